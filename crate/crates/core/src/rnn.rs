//! Single-layer LSTM token model with variational input and recurrent
//! weights.
//!
//! At every step one shared encoder maps the embedded input token to the
//! input-weight rate `α^y` and the previous hidden state to the
//! recurrent-weight rate `α^h`. The deterministic variant is a plain LSTM.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::datagen::{RingString, END, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::forecaster::EpochLog;
use crate::layers::{var_linear_forward, Binder, EncoderVars, Linear, LinearVars, Posterior, PosteriorEncoder, SampleMode};
use crate::optim::{clip_global_norm, AdamState};
use crate::prior::kl_tvamp_var;
use crate::rng::{derive_seed, normal_tensor, seeded, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RnnVariant {
    Barnn,
    Lstm,
}

impl RnnVariant {
    pub fn name(self) -> &'static str {
        match self {
            RnnVariant::Barnn => "barnn",
            RnnVariant::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "barnn" => Ok(RnnVariant::Barnn),
            "lstm" | "plain-lstm" | "plain-mlp" => Ok(RnnVariant::Lstm),
            _ => Err(Error::invalid(format!("unknown recurrent model {s:?} (expected barnn or lstm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnConfig {
    pub hidden: usize,
    pub encoder_hidden: usize,
    pub encoder_depth: usize,
}

impl Default for RnnConfig {
    fn default() -> Self {
        RnnConfig {
            hidden: 128,
            encoder_hidden: 64,
            encoder_depth: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnModel {
    pub variant: RnnVariant,
    pub config: RnnConfig,
    /// Input-to-gates map `[V, 4H]`, gate order (input, forget, cell, output).
    pub input: Linear,
    /// Hidden-to-gates map `[H, 4H]`.
    pub recurrent: Linear,
    /// Zero-initialised projection to vocabulary logits.
    pub output: Linear,
    /// Token embedding `[V, H]` feeding the encoder.
    pub embed: Option<Tensor>,
    pub encoder: Option<PosteriorEncoder>,
}

struct Bound<'t> {
    input: LinearVars<'t>,
    recurrent: LinearVars<'t>,
    output: LinearVars<'t>,
    embed: Option<Var<'t>>,
    encoder: Option<EncoderVars<'t>>,
    vars: Vec<Var<'t>>,
}

struct StepOut<'t> {
    logits: Var<'t>,
    h: Var<'t>,
    c: Var<'t>,
    /// `α^y`, `α^h`, each `[n]`.
    rates: Option<(Var<'t>, Var<'t>)>,
}

#[derive(Clone, Debug)]
pub struct RnnTrainOptions {
    pub lambda_kl: f64,
    pub n_train: Option<usize>,
    pub detach_prior: bool,
    pub mode: SampleMode,
    pub clip_norm: f64,
}

impl Default for RnnTrainOptions {
    fn default() -> Self {
        RnnTrainOptions {
            lambda_kl: 1.0,
            n_train: None,
            detach_prior: false,
            mode: SampleMode::Stochastic,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for RnnSchedule {
    fn default() -> Self {
        RnnSchedule {
            epochs: 30,
            batch_size: 64,
            lr: 2e-4,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RnnLoss {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

fn one_hot(ids: &[usize], scale: &[f64]) -> Tensor {
    let mut t = Tensor::zeros([ids.len(), VOCAB_SIZE]);
    for (r, (&id, &s)) in ids.iter().zip(scale).enumerate() {
        t.data_mut()[r * VOCAB_SIZE + id] = s;
    }
    t
}

/// Mean tVAMP KL over the active rows of one weight group, with the prior
/// statistics taken over the same rows.
fn masked_tvamp<'t>(alpha: Var<'t>, mask: Var<'t>, active: f64, dim: usize, detach: bool) -> Result<Var<'t>> {
    let inv = 1.0 / active;
    let beta = alpha.mul(mask)?.sum().scale(inv);
    let gamma = alpha.square().mul(mask)?.sum().scale(inv).sqrt()?;
    let (beta, gamma) = if detach {
        (beta.detach(), gamma.detach())
    } else {
        (beta, gamma)
    };
    Ok(kl_tvamp_var(alpha, beta, gamma, dim)?.mul(mask)?.sum().scale(inv))
}

impl RnnModel {
    pub fn new(variant: RnnVariant, config: RnnConfig, seed: u64) -> Result<Self> {
        if config.hidden == 0 {
            return Err(Error::invalid("hidden size must be positive"));
        }
        let h = config.hidden;
        let mut rng = seeded(derive_seed(seed, 0));
        let mut input = Linear::init(VOCAB_SIZE, 4 * h, &mut rng);
        // forget-gate bias 1
        for b in &mut input.bias.data_mut()[h..2 * h] {
            *b = 1.0;
        }
        let mut recurrent = Linear::init(h, 4 * h, &mut rng);
        recurrent.bias = Tensor::zeros([4 * h]);
        let output = Linear::zeros(h, VOCAB_SIZE);
        let (embed, encoder) = match variant {
            RnnVariant::Barnn => {
                let mut erng = seeded(derive_seed(seed, 1));
                let mut embed = normal_tensor(&mut erng, [VOCAB_SIZE, h]);
                embed.scale_assign(1.0 / (h as f64).sqrt());
                let enc = PosteriorEncoder::new(h, config.encoder_hidden, config.encoder_depth, 1, &mut erng);
                (Some(embed), Some(enc))
            }
            RnnVariant::Lstm => (None, None),
        };
        Ok(RnnModel {
            variant,
            config,
            input,
            recurrent,
            output,
            embed,
            encoder,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.input.named_params("input");
        out.extend(self.recurrent.named_params("recurrent"));
        out.extend(self.output.named_params("output"));
        if let Some(e) = &self.embed {
            out.push(("embed".to_string(), e));
        }
        if let Some(e) = &self.encoder {
            out.extend(e.named_params("encoder"));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.input.named_params_mut("input");
        out.extend(self.recurrent.named_params_mut("recurrent"));
        out.extend(self.output.named_params_mut("output"));
        if let Some(e) = &mut self.embed {
            out.push(("embed".to_string(), e));
        }
        if let Some(e) = &mut self.encoder {
            out.extend(e.named_params_mut("encoder"));
        }
        out
    }

    fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let mut b = Binder::new(tape);
        let input = self.input.bind(&mut b);
        let recurrent = self.recurrent.bind(&mut b);
        let output = self.output.bind(&mut b);
        let embed = self.embed.as_ref().map(|e| b.bind(e));
        let encoder = self.encoder.as_ref().map(|e| e.bind(&mut b));
        Bound {
            input,
            recurrent,
            output,
            embed,
            encoder,
            vars: b.into_vars(),
        }
    }

    fn step<'t>(
        &self,
        b: &Bound<'t>,
        x: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
        mode: SampleMode,
        rng: &mut SeededRng,
    ) -> Result<StepOut<'t>> {
        let n = x.shape()[0];
        let hs = self.config.hidden;
        let (gates, rates) = match (&b.encoder, b.embed, mode) {
            (Some(enc), Some(embed), SampleMode::Stochastic | SampleMode::Map) => {
                let a_y = enc.encode_rates(x.matmul(embed)?)?.alpha;
                let a_h = enc.encode_rates(h)?.alpha;
                let gx = var_linear_forward(x, &b.input, a_y, Posterior::ScaledMean, mode, rng)?;
                let gh = var_linear_forward(h, &b.recurrent, a_h, Posterior::ScaledMean, mode, rng)?;
                (gx.add(gh)?, Some((a_y.reshape([n])?, a_h.reshape([n])?)))
            }
            _ => (b.input.forward(x)?.add(b.recurrent.forward(h)?)?, None),
        };
        let i = gates.slice_cols(0, hs)?.sigmoid();
        let f = gates.slice_cols(hs, 2 * hs)?.sigmoid();
        let g = gates.slice_cols(2 * hs, 3 * hs)?.tanh();
        let o = gates.slice_cols(3 * hs, 4 * hs)?.sigmoid();
        let c = f.mul(c)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh())?;
        let logits = b.output.forward(h)?;
        Ok(StepOut { logits, h, c, rates })
    }

    fn zero_state<'t>(&self, tape: &'t Tape, n: usize) -> (Var<'t>, Var<'t>) {
        let hs = self.config.hidden;
        (tape.leaf(Tensor::zeros([n, hs])), tape.leaf(Tensor::zeros([n, hs])))
    }

    /// Builds the teacher-forced loss for a batch of token sequences (without
    /// start or end tokens). Returns `(ce, kl, total)`.
    fn loss<'t>(
        &self,
        b: &Bound<'t>,
        batch: &[&[usize]],
        opts: &RnnTrainOptions,
        n_train: usize,
        rng: &mut SeededRng,
    ) -> Result<(Var<'t>, Option<Var<'t>>, Var<'t>)> {
        let tape = b.input.weight.tape();
        let n = batch.len();
        for seq in batch {
            if let Some(&bad) = seq.iter().find(|&&t| t >= VOCAB_SIZE) {
                return Err(Error::UnknownToken(format!("id {bad}")));
            }
        }
        let steps = batch.iter().map(|s| s.len()).max().unwrap_or(0) + 1;
        let (mut h, mut c) = self.zero_state(tape, n);
        let mut ce_sum: Option<Var<'t>> = None;
        let mut kl_sum: Option<Var<'t>> = None;
        let mut targets_total = 0usize;
        let mut kl_steps = 0usize;
        let dims = [self.input.weight_count(), self.recurrent.weight_count()];
        for s in 0..steps {
            // position s of [END, tokens.., END] predicts position s + 1
            let active: Vec<f64> = batch.iter().map(|q| if s <= q.len() { 1.0 } else { 0.0 }).collect();
            let inputs: Vec<usize> = batch
                .iter()
                .map(|q| if s == 0 || s > q.len() { END } else { q[s - 1] })
                .collect();
            let targets: Vec<usize> = batch.iter().map(|q| if s < q.len() { q[s] } else { END }).collect();
            let count = active.iter().sum::<f64>();
            let x = tape.leaf(one_hot(&inputs, &vec![1.0; n]));
            let out = self.step(b, x, h, c, opts.mode, rng)?;
            h = out.h;
            c = out.c;
            let picked = tape.leaf(one_hot(&targets, &active));
            let ll = out.logits.log_softmax().mul(picked)?.sum();
            ce_sum = Some(match ce_sum {
                None => ll,
                Some(acc) => acc.add(ll)?,
            });
            targets_total += count as usize;
            if let Some((a_y, a_h)) = out.rates {
                let mask = tape.leaf(Tensor::vector(active));
                let k = masked_tvamp(a_y, mask, count, dims[0], opts.detach_prior)?
                    .add(masked_tvamp(a_h, mask, count, dims[1], opts.detach_prior)?)?;
                kl_sum = Some(match kl_sum {
                    None => k,
                    Some(acc) => acc.add(k)?,
                });
                kl_steps += 1;
            }
        }
        let ce = ce_sum.expect("at least one step").scale(-1.0 / targets_total as f64);
        match kl_sum {
            Some(k) => {
                let kl = k.scale(1.0 / kl_steps as f64);
                let total = ce.add(kl.scale(opts.lambda_kl / n_train as f64))?;
                Ok((ce, Some(kl), total))
            }
            None => Ok((ce, None, ce)),
        }
    }

    /// Mean cross-entropy (and KL) of a batch without updating anything.
    pub fn evaluate_loss(&self, batch: &[&[usize]], opts: &RnnTrainOptions, n_train: usize, seed: u64) -> Result<RnnLoss> {
        let tape = Tape::new();
        let b = self.bind(&tape);
        let (ce, kl, total) = self.loss(&b, batch, opts, n_train, &mut seeded(seed))?;
        Ok(RnnLoss {
            ce: ce.item(),
            kl: kl.map_or(0.0, |k| k.item()),
            total: total.item(),
        })
    }

    /// Batch loss and its gradients, in `named_params` order, with the noise
    /// stream seeded by `seed`.
    pub fn loss_and_grads(
        &self,
        batch: &[&[usize]],
        opts: &RnnTrainOptions,
        n_train: usize,
        seed: u64,
    ) -> Result<(RnnLoss, Vec<Tensor>)> {
        let tape = Tape::new();
        let b = self.bind(&tape);
        let (ce, kl, total) = self.loss(&b, batch, opts, n_train, &mut seeded(seed))?;
        let loss = RnnLoss {
            ce: ce.item(),
            kl: kl.map_or(0.0, |k| k.item()),
            total: total.item(),
        };
        Ok((loss, tape.grad(total, &b.vars)?))
    }

    pub fn train_step(
        &mut self,
        batch: &[&[usize]],
        opts: &RnnTrainOptions,
        n_train: usize,
        adam: &mut AdamState,
        rng: &mut SeededRng,
    ) -> Result<RnnLoss> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let tape = Tape::new();
        let b = self.bind(&tape);
        let (ce, kl, total) = self.loss(&b, batch, opts, n_train, rng)?;
        let loss = RnnLoss {
            ce: ce.item(),
            kl: kl.map_or(0.0, |k| k.item()),
            total: total.item(),
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("loss {}", loss.total)));
        }
        let mut grads = tape.grad(total, &b.vars)?;
        drop(b);
        clip_global_norm(&mut grads, opts.clip_norm);
        adam.update(self.named_params_mut(), &grads)?;
        Ok(loss)
    }

    pub fn train(
        &mut self,
        corpus: &[RingString],
        schedule: &RnnSchedule,
        opts: &RnnTrainOptions,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        if corpus.is_empty() {
            return Err(Error::invalid("empty corpus"));
        }
        if schedule.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let n_train = opts.n_train.unwrap_or(corpus.len());
        let mut adam = AdamState::new(schedule.lr, schedule.weight_decay);
        let mut data_rng = seeded(derive_seed(schedule.seed, 20));
        let mut noise_rng = seeded(derive_seed(schedule.seed, 21));
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut logs = Vec::with_capacity(schedule.epochs);
        for epoch in 0..schedule.epochs {
            order.shuffle(&mut data_rng);
            let (mut ce, mut kl, mut total, mut batches) = (0.0, 0.0, 0.0, 0usize);
            for chunk in order.chunks(schedule.batch_size) {
                let batch: Vec<&[usize]> = chunk.iter().map(|&i| corpus[i].tokens.as_slice()).collect();
                let step = self
                    .train_step(&batch, opts, n_train, &mut adam, &mut noise_rng)
                    .map_err(|e| match e {
                        Error::NonFinite(detail) => Error::Diverged { epoch, detail },
                        other => other,
                    })?;
                ce += step.ce;
                kl += step.kl;
                total += step.total;
                batches += 1;
            }
            let b = batches as f64;
            let log = EpochLog {
                epoch,
                fit: ce / b,
                kl: kl / b,
                total: total / b,
            };
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    /// Samples `n` strings token by token until the end token or `max_len`
    /// tokens. The returned sequences exclude the end token.
    pub fn sample(&self, n: usize, max_len: usize, mode: SampleMode, seed: u64) -> Result<Vec<Vec<usize>>> {
        let mut rng = seeded(seed);
        let hs = self.config.hidden;
        let mut h = Tensor::zeros([n, hs]);
        let mut c = Tensor::zeros([n, hs]);
        let mut current = vec![END; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        for _ in 0..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let tape = Tape::new();
            let b = self.bind(&tape);
            let x = tape.leaf(one_hot(&current, &vec![1.0; n]));
            let step = self.step(&b, x, tape.leaf(h), tape.leaf(c), mode, &mut rng)?;
            let logp = step.logits.log_softmax().value();
            h = step.h.value();
            c = step.c.value();
            for r in 0..n {
                if done[r] {
                    continue;
                }
                let u: f64 = rng.random();
                let row = logp.row(r);
                let mut acc = 0.0;
                let mut tok = VOCAB_SIZE - 1;
                for (k, lp) in row.iter().enumerate() {
                    acc += lp.exp();
                    if u < acc {
                        tok = k;
                        break;
                    }
                }
                if tok == END {
                    done[r] = true;
                } else {
                    out[r].push(tok);
                }
                current[r] = tok;
            }
        }
        Ok(out)
    }

    /// Per-step next-token distributions along a teacher-forced sequence,
    /// `[len + 1, V]`, in MAP or deterministic mode.
    pub fn next_token_probs(&self, seq: &[usize], mode: SampleMode) -> Result<Tensor> {
        let tape = Tape::new();
        let b = self.bind(&tape);
        let (mut h, mut c) = self.zero_state(&tape, 1);
        let mut rng = seeded(0);
        let mut rows = Vec::new();
        for s in 0..=seq.len() {
            let id = if s == 0 { END } else { seq[s - 1] };
            if id >= VOCAB_SIZE {
                return Err(Error::UnknownToken(format!("id {id}")));
            }
            let x = tape.leaf(one_hot(&[id], &[1.0]));
            let out = self.step(&b, x, h, c, mode, &mut rng)?;
            h = out.h;
            c = out.c;
            rows.extend(out.logits.log_softmax().value().data().iter().map(|v| v.exp()));
        }
        Tensor::new([seq.len() + 1, VOCAB_SIZE], rows)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "rnn");
        ck.set_meta("model", self.variant.name());
        ck.set_meta("hidden", self.config.hidden);
        ck.set_meta("encoder_hidden", self.config.encoder_hidden);
        ck.set_meta("encoder_depth", self.config.encoder_depth);
        for (name, t) in self.named_params() {
            ck.push(name, t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind = ck.require_meta("kind")?;
        if kind != "rnn" {
            return Err(Error::Parse(format!("checkpoint holds a {kind} model, expected rnn")));
        }
        let num = |key: &str| -> Result<usize> {
            let raw = ck.require_meta(key)?;
            raw.parse()
                .map_err(|_| Error::Parse(format!("checkpoint metadata {key}={raw:?}")))
        };
        let config = RnnConfig {
            hidden: num("hidden")?,
            encoder_hidden: num("encoder_hidden")?,
            encoder_depth: num("encoder_depth")?,
        };
        let mut model = RnnModel::new(RnnVariant::parse(ck.require_meta("model")?)?, config, 0)?;
        let expected = model.named_params().len();
        if ck.params.len() != expected {
            return Err(CheckpointError::Header {
                line: format!("{} parameters", ck.params.len()),
                detail: format!("{} expects {expected}", model.variant.name()),
            }
            .into());
        }
        for (name, dst) in model.named_params_mut() {
            ck.load_into(&name, dst)?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_ring_corpus, parse_tokens};

    fn small(variant: RnnVariant) -> RnnModel {
        RnnModel::new(
            variant,
            RnnConfig {
                hidden: 8,
                encoder_hidden: 6,
                encoder_depth: 1,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn untrained_cross_entropy_is_log_vocab() {
        let m = small(RnnVariant::Barnn);
        let a = parse_tokens("a 1 b 1").unwrap();
        let b = parse_tokens("c d").unwrap();
        let loss = m
            .evaluate_loss(&[&a, &b], &RnnTrainOptions::default(), 10, 0)
            .unwrap();
        assert!((loss.ce - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
        assert!(loss.kl.abs() < 1e-9, "{}", loss.kl);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut m = small(RnnVariant::Lstm);
        m.output = Linear::init(8, VOCAB_SIZE, &mut seeded(3));
        let p = m.next_token_probs(&parse_tokens("a 2 b 2").unwrap(), SampleMode::DeterministicAlpha1).unwrap();
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_rate_barnn_step_is_plain_lstm() {
        let mut barnn = small(RnnVariant::Barnn);
        let mut lstm = small(RnnVariant::Lstm);
        barnn.output = Linear::init(8, VOCAB_SIZE, &mut seeded(4));
        lstm.output = barnn.output.clone();
        assert_eq!(barnn.input, lstm.input);
        let seq = parse_tokens("a 1 b c 1 d").unwrap();
        let a = barnn.next_token_probs(&seq, SampleMode::DeterministicAlpha1).unwrap();
        let b = lstm.next_token_probs(&seq, SampleMode::DeterministicAlpha1).unwrap();
        assert_eq!(a, b);
        // zero encoder head gives α = 1, so the MAP pass agrees as well
        let c = barnn.next_token_probs(&seq, SampleMode::Map).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn unknown_token_id_is_rejected() {
        let m = small(RnnVariant::Lstm);
        let bad = vec![0, 99];
        assert!(matches!(
            m.evaluate_loss(&[&bad], &RnnTrainOptions::default(), 1, 0),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn short_training_lowers_cross_entropy() {
        let corpus = gen_ring_corpus(64, 2, 12, 5).unwrap();
        let mut m = small(RnnVariant::Barnn);
        let schedule = RnnSchedule {
            epochs: 5,
            batch_size: 16,
            lr: 1e-2,
            ..RnnSchedule::default()
        };
        let logs = m.train(&corpus, &schedule, &RnnTrainOptions::default(), |_| {}).unwrap();
        assert!(logs[4].fit < logs[0].fit);
        let samples = m.sample(10, 12, SampleMode::Stochastic, 1).unwrap();
        assert_eq!(samples.len(), 10);
        assert!(samples.iter().all(|s| s.len() <= 12 && !s.contains(&END)));
    }

    #[test]
    fn checkpoint_roundtrip() {
        for v in [RnnVariant::Barnn, RnnVariant::Lstm] {
            let m = small(v);
            let back = RnnModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
            assert_eq!(back, m);
        }
    }
}
