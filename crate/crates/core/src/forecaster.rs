//! Autoregressive MLP forecaster and its temporal-ELBO training loop.
//!
//! Inputs are the last `window` states and a sinusoidal embedding of the
//! timestep. A linear lift feeds two hidden layers of `hidden` relu units,
//! which are the variational layers in the BARNN variants, followed by a
//! linear head. The head predicts the increment over the previous state.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::datagen::{Trajectory, SINUSOID_STEPS};
use crate::error::{Error, Result};
use crate::layers::{
    bernoulli_dropout_forward, time_embedding, var_linear_forward, var_linear_forward_weight_noise, Binder,
    EncoderVars, Linear, LinearVars, Posterior, PosteriorEncoder, SampleMode,
};
use crate::optim::AdamState;
use crate::prior::{kl_loguniform_var, kl_tvamp_var, tvamp_stats_var};
use crate::rng::{derive_seed, seeded, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    Tvamp,
    LogUniform,
}

impl PriorKind {
    pub fn name(self) -> &'static str {
        match self {
            PriorKind::Tvamp => "tvamp",
            PriorKind::LogUniform => "loguniform",
        }
    }

    pub fn posterior(self) -> Posterior {
        match self {
            PriorKind::Tvamp => Posterior::ScaledMean,
            PriorKind::LogUniform => Posterior::FixedMean,
        }
    }
}

impl FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tvamp" => Ok(PriorKind::Tvamp),
            "loguniform" | "log-uniform" => Ok(PriorKind::LogUniform),
            _ => Err(Error::invalid(format!("unknown prior {s:?} (expected tvamp or loguniform)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Barnn(PriorKind),
    McDropout(f64),
    PlainMlp,
    Static,
}

impl Variant {
    /// Builds a variant from CLI-style names: `barnn`, `mc-dropout`,
    /// `plain-mlp`, `static`.
    pub fn parse(model: &str, prior: PriorKind, dropout: f64) -> Result<Self> {
        match model {
            "barnn" => Ok(Variant::Barnn(prior)),
            "mc-dropout" | "dropout" => {
                if !(0.0..1.0).contains(&dropout) {
                    return Err(Error::invalid(format!("dropout probability must lie in [0, 1), got {dropout}")));
                }
                Ok(Variant::McDropout(dropout))
            }
            "plain-mlp" | "mlp" => Ok(Variant::PlainMlp),
            "static" => Ok(Variant::Static),
            _ => Err(Error::invalid(format!(
                "unknown model {model:?} (expected barnn, mc-dropout, plain-mlp or static)"
            ))),
        }
    }

    pub fn model_name(&self) -> &'static str {
        match self {
            Variant::Barnn(_) => "barnn",
            Variant::McDropout(_) => "mc-dropout",
            Variant::PlainMlp => "plain-mlp",
            Variant::Static => "static",
        }
    }

    pub fn prior_name(&self) -> String {
        match self {
            Variant::Barnn(p) => p.name().to_string(),
            Variant::McDropout(p) => format!("p={p}"),
            _ => "none".to_string(),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        match self {
            Variant::Barnn(_) => true,
            Variant::McDropout(p) => *p > 0.0,
            _ => false,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Barnn(p) => write!(f, "barnn-{}", p.name()),
            Variant::McDropout(p) => write!(f, "mc-dropout({p})"),
            Variant::PlainMlp => f.write_str("plain-mlp"),
            Variant::Static => f.write_str("static"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecasterConfig {
    /// Number of past states fed to the network.
    pub window: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub time_period: f64,
    pub encoder_hidden: usize,
    pub encoder_depth: usize,
    /// Feed the time embedding to the encoder as well as the network.
    pub encoder_time: bool,
    /// Largest timestep `T`.
    pub horizon: usize,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig {
            window: 1,
            hidden: 64,
            time_dim: 8,
            time_period: 1000.0,
            encoder_hidden: 64,
            encoder_depth: 2,
            encoder_time: true,
            horizon: SINUSOID_STEPS,
        }
    }
}

impl ForecasterConfig {
    pub fn input_dim(&self) -> usize {
        self.window + self.time_dim
    }

    pub fn encoder_input_dim(&self) -> usize {
        if self.encoder_time {
            self.input_dim()
        } else {
            self.window
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hidden == 0 || self.horizon == 0 {
            return Err(Error::invalid("window, hidden and horizon must be positive"));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::invalid(format!("time embedding size must be even, got {}", self.time_dim)));
        }
        if !(self.time_period > 0.0) {
            return Err(Error::invalid("time period must be positive"));
        }
        Ok(())
    }
}

/// Number of variational layers.
pub const VARIATIONAL_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Forecaster {
    pub variant: Variant,
    pub config: ForecasterConfig,
    pub lift: Linear,
    pub hidden: [Linear; VARIATIONAL_LAYERS],
    pub out: Linear,
    pub encoder: Option<PosteriorEncoder>,
}

/// Parameters of a forecaster registered on a tape.
pub struct BoundForecaster<'t> {
    lift: LinearVars<'t>,
    hidden: [LinearVars<'t>; VARIATIONAL_LAYERS],
    out: LinearVars<'t>,
    encoder: Option<EncoderVars<'t>>,
    pub vars: Vec<Var<'t>>,
}

/// One forward pass: prediction `[n, 1]` and, for BARNN, rates `α` `[n, L]`.
pub struct ForwardOut<'t> {
    pub pred: Var<'t>,
    pub alpha: Option<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub lambda_kl: f64,
    /// Divisor of the KL term; defaults to the training-set size.
    pub n_train: Option<usize>,
    /// Treat the prior statistics as constants of the batch.
    pub detach_prior: bool,
    /// Keep the encoder parameters fixed.
    pub freeze_encoder: bool,
    pub mode: SampleMode,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lambda_kl: 1.0,
            n_train: None,
            detach_prior: false,
            freeze_encoder: false,
            mode: SampleMode::Stochastic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub t: usize,
    pub fit: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 1500,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub fit: f64,
    pub kl: f64,
    pub total: f64,
}

/// Stacks trajectories into a `[n, T+1]` state matrix.
pub fn stack_states(data: &[&Trajectory]) -> Result<Tensor> {
    let len = data.first().map(|t| t.y.len()).unwrap_or(0);
    if data.iter().any(|t| t.y.len() != len) {
        return Err(Error::invalid("trajectories differ in length"));
    }
    let mut flat = Vec::with_capacity(data.len() * len);
    for t in data {
        flat.extend_from_slice(&t.y);
    }
    Tensor::new([data.len(), len], flat)
}

impl Forecaster {
    /// Main layers are drawn from one seed stream and the encoder from
    /// another, so variants built with the same seed share `Ω`.
    pub fn new(variant: Variant, config: ForecasterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(derive_seed(seed, 0));
        let h = config.hidden;
        let lift = Linear::init(config.input_dim(), h, &mut rng);
        let hidden = [Linear::init(h, h, &mut rng), Linear::init(h, h, &mut rng)];
        let out = Linear::init(h, 1, &mut rng);
        let encoder = match variant {
            Variant::Barnn(_) => {
                let mut erng = seeded(derive_seed(seed, 1));
                Some(PosteriorEncoder::new(
                    config.encoder_input_dim(),
                    config.encoder_hidden,
                    config.encoder_depth,
                    VARIATIONAL_LAYERS,
                    &mut erng,
                ))
            }
            _ => None,
        };
        Ok(Forecaster {
            variant,
            config,
            lift,
            hidden,
            out,
            encoder,
        })
    }

    /// `|Ω^l|` for each variational layer.
    pub fn layer_dims(&self) -> [usize; VARIATIONAL_LAYERS] {
        [self.hidden[0].weight_count(), self.hidden[1].weight_count()]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        if self.variant == Variant::Static {
            return Vec::new();
        }
        let mut out = self.lift.named_params("lift");
        out.extend(self.hidden[0].named_params("hidden0"));
        out.extend(self.hidden[1].named_params("hidden1"));
        out.extend(self.out.named_params("out"));
        if let Some(e) = &self.encoder {
            out.extend(e.named_params("encoder"));
        }
        out
    }

    pub fn named_params_mut(&mut self, with_encoder: bool) -> Vec<(String, &mut Tensor)> {
        if self.variant == Variant::Static {
            return Vec::new();
        }
        let mut out = self.lift.named_params_mut("lift");
        let [h0, h1] = &mut self.hidden;
        out.extend(h0.named_params_mut("hidden0"));
        out.extend(h1.named_params_mut("hidden1"));
        out.extend(self.out.named_params_mut("out"));
        if with_encoder {
            if let Some(e) = &mut self.encoder {
                out.extend(e.named_params_mut("encoder"));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundForecaster<'t> {
        let mut b = Binder::new(tape);
        let lift = self.lift.bind(&mut b);
        let hidden = [self.hidden[0].bind(&mut b), self.hidden[1].bind(&mut b)];
        let out = self.out.bind(&mut b);
        let encoder = self.encoder.as_ref().map(|e| e.bind(&mut b));
        BoundForecaster {
            lift,
            hidden,
            out,
            encoder,
            vars: b.into_vars(),
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.horizon {
            return Err(Error::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.config.horizon
            )));
        }
        Ok(())
    }

    /// Network inputs for predicting `y_t` from a state matrix whose first
    /// `t` columns hold `y_0 .. y_{t-1}`. Missing history repeats `y_0`.
    pub fn features(&self, states: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if states.shape().len() != 2 || states.cols() < t {
            return Err(Error::invalid(format!(
                "need at least {t} state columns, got shape {:?}",
                states.shape()
            )));
        }
        let w = self.config.window;
        let emb = time_embedding(t as f64, self.config.time_dim, self.config.time_period);
        let width = self.config.input_dim();
        let n = states.rows();
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            let row = states.row(r);
            for k in 0..w {
                let idx = (t + k).saturating_sub(w);
                data.push(row[idx]);
            }
            data.extend_from_slice(&emb);
        }
        Tensor::new([n, width], data)
    }

    fn last_state(states: &Tensor, t: usize) -> Tensor {
        Tensor::from_fn([states.rows(), 1], |r| states.get2(r, t - 1))
    }

    /// Forward pass on a tape. `weight_eps` replaces per-row activation noise
    /// with a shared weight-noise draw per variational layer.
    pub fn forward<'t>(
        &self,
        b: &BoundForecaster<'t>,
        feats: Var<'t>,
        last: Var<'t>,
        mode: SampleMode,
        rng: &mut SeededRng,
        weight_eps: Option<&[Tensor]>,
    ) -> Result<ForwardOut<'t>> {
        let mut h = b.lift.forward(feats)?.relu();
        let mut alpha = None;
        match self.variant {
            Variant::Static => return Err(Error::invalid("static baseline has no network")),
            Variant::PlainMlp => {
                for l in &b.hidden {
                    h = l.forward(h)?.relu();
                }
            }
            Variant::McDropout(p) => {
                let p = if mode == SampleMode::Stochastic { p } else { 0.0 };
                for l in &b.hidden {
                    h = bernoulli_dropout_forward(h, l, p, rng)?.relu();
                }
            }
            Variant::Barnn(prior) => {
                let enc = b.encoder.as_ref().expect("barnn has an encoder");
                let enc_in = if self.config.encoder_time {
                    feats
                } else {
                    feats.slice_cols(0, self.config.window)?
                };
                let a = if mode == SampleMode::DeterministicAlpha1 {
                    None
                } else {
                    Some(enc.encode_rates(enc_in)?.alpha)
                };
                for (l, layer) in b.hidden.iter().enumerate() {
                    let pre = match (a, weight_eps, mode) {
                        (None, _, _) => layer.forward(h)?,
                        (Some(a), Some(eps), SampleMode::Stochastic) => {
                            let col = a.slice_cols(l, l + 1)?;
                            var_linear_forward_weight_noise(h, layer, col, prior.posterior(), &eps[l])?
                        }
                        (Some(a), _, _) => {
                            let col = a.slice_cols(l, l + 1)?;
                            var_linear_forward(h, layer, col, prior.posterior(), mode, rng)?
                        }
                    };
                    h = pre.relu();
                }
                alpha = a;
            }
        }
        let pred = last.add(b.out.forward(h)?)?;
        Ok(ForwardOut { pred, alpha })
    }

    /// One-step prediction of `y_t` for every row of `states`.
    pub fn forecast_step(&self, states: &Tensor, t: usize, mode: SampleMode, rng: &mut SeededRng) -> Result<Vec<f64>> {
        self.forecast_step_with(states, t, mode, rng, None)
    }

    pub fn forecast_step_with(
        &self,
        states: &Tensor,
        t: usize,
        mode: SampleMode,
        rng: &mut SeededRng,
        weight_eps: Option<&[Tensor]>,
    ) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if self.variant == Variant::Static {
            return Ok((0..states.rows()).map(|r| states.get2(r, 0)).collect());
        }
        let feats = self.features(states, t)?;
        let tape = Tape::new();
        let b = self.bind(&tape);
        let out = self.forward(
            &b,
            tape.leaf(feats),
            tape.leaf(Self::last_state(states, t)),
            mode,
            rng,
            weight_eps,
        )?;
        let pred = out.pred.value().into_data();
        Ok(pred)
    }

    /// Rates `α` `[n, L]` the encoder assigns when predicting `y_t`.
    pub fn rates(&self, states: &Tensor, t: usize) -> Result<Tensor> {
        let enc = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{} has no rate encoder", self.variant)))?;
        let feats = self.features(states, t)?;
        let feats = if self.config.encoder_time {
            feats
        } else {
            feats.slice_cols(0, self.config.window)?
        };
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let ev = enc.bind(&mut binder);
        Ok(ev.encode_rates(tape.leaf(feats))?.alpha.value())
    }

    /// Builds the loss for predicting column `t` of `states` on `tape`.
    /// Returns `(fit, kl, total)` variables.
    pub fn loss<'t>(
        &self,
        b: &BoundForecaster<'t>,
        states: &Tensor,
        t: usize,
        opts: &TrainOptions,
        n_train: usize,
        rng: &mut SeededRng,
    ) -> Result<(Var<'t>, Option<Var<'t>>, Var<'t>)> {
        let tape = b.lift.weight.tape();
        let feats = tape.leaf(self.features(states, t)?);
        let last = tape.leaf(Self::last_state(states, t));
        let target = tape.leaf(Tensor::from_fn([states.rows(), 1], |r| states.get2(r, t)));
        let out = self.forward(b, feats, last, opts.mode, rng, None)?;
        let fit = out.pred.sub(target)?.square().mean();
        let (Variant::Barnn(prior), Some(alpha)) = (self.variant, out.alpha) else {
            return Ok((fit, None, fit));
        };
        let n = states.rows();
        let dims = self.layer_dims();
        let mut kl: Option<Var<'t>> = None;
        for (l, &dim) in dims.iter().enumerate() {
            let a = alpha.slice_cols(l, l + 1)?.reshape([n])?;
            let term = match prior {
                PriorKind::Tvamp => {
                    let (beta, gamma) = tvamp_stats_var(a, opts.detach_prior)?;
                    kl_tvamp_var(a, beta, gamma, dim)?
                }
                PriorKind::LogUniform => kl_loguniform_var(a, dim)?,
            };
            kl = Some(match kl {
                None => term,
                Some(k) => k.add(term)?,
            });
        }
        let kl = kl.expect("at least one variational layer").mean();
        let total = fit.add(kl.scale(opts.lambda_kl / n_train as f64))?;
        Ok((fit, Some(kl), total))
    }

    /// One optimiser step on predicting column `t` of the `[n, T+1]` batch.
    pub fn train_step(
        &mut self,
        states: &Tensor,
        t: usize,
        opts: &TrainOptions,
        n_train: usize,
        adam: &mut AdamState,
        rng: &mut SeededRng,
    ) -> Result<StepLoss> {
        if self.variant == Variant::Static {
            return Err(Error::invalid("static baseline has no parameters to train"));
        }
        if states.rows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let tape = Tape::new();
        let b = self.bind(&tape);
        let (fit, kl, total) = self.loss(&b, states, t, opts, n_train, rng)?;
        let loss = StepLoss {
            t,
            fit: fit.item(),
            kl: kl.map(|k| k.item()).unwrap_or(0.0),
            total: total.item(),
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("loss {} at t={t}", loss.total)));
        }
        let with_encoder = !opts.freeze_encoder;
        let n_vars = if with_encoder || self.encoder.is_none() {
            b.vars.len()
        } else {
            // encoder leaves are bound last
            b.vars.len() - self.encoder.as_ref().map_or(0, |e| e.named_params("").len())
        };
        let grads = tape.grad(total, &b.vars[..n_vars])?;
        drop(b);
        adam.update(self.named_params_mut(with_encoder), &grads)?;
        Ok(loss)
    }

    /// Full training run. Batches are reshuffled every epoch and one shared
    /// timestep `t ~ U[1, T]` is drawn per batch.
    pub fn train(
        &mut self,
        data: &[Trajectory],
        schedule: &Schedule,
        opts: &TrainOptions,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        if schedule.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let horizon = data[0].y.len() - 1;
        if horizon < self.config.horizon {
            return Err(Error::invalid(format!(
                "trajectories have {horizon} steps, model expects {}",
                self.config.horizon
            )));
        }
        let n_train = opts.n_train.unwrap_or(data.len());
        let mut adam = AdamState::new(schedule.lr, schedule.weight_decay);
        let mut data_rng = seeded(derive_seed(schedule.seed, 10));
        let mut noise_rng = seeded(derive_seed(schedule.seed, 11));
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut logs = Vec::with_capacity(schedule.epochs);
        for epoch in 0..schedule.epochs {
            order.shuffle(&mut data_rng);
            let (mut fit, mut kl, mut total, mut batches) = (0.0, 0.0, 0.0, 0usize);
            for chunk in order.chunks(schedule.batch_size) {
                let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &data[i]).collect();
                let states = stack_states(&batch)?;
                let t = data_rng.random_range(1..=self.config.horizon);
                let step = self
                    .train_step(&states, t, opts, n_train, &mut adam, &mut noise_rng)
                    .map_err(|e| match e {
                        Error::NonFinite(detail) => Error::Diverged { epoch, detail },
                        other => other,
                    })?;
                fit += step.fit;
                kl += step.kl;
                total += step.total;
                batches += 1;
            }
            let b = batches as f64;
            let log = EpochLog {
                epoch,
                fit: fit / b,
                kl: kl / b,
                total: total / b,
            };
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "forecaster");
        ck.set_meta("model", self.variant.model_name());
        match self.variant {
            Variant::Barnn(p) => ck.set_meta("prior", p.name()),
            Variant::McDropout(p) => ck.set_meta("dropout", format!("{p:e}")),
            _ => {}
        }
        let c = &self.config;
        ck.set_meta("window", c.window);
        ck.set_meta("hidden", c.hidden);
        ck.set_meta("time_dim", c.time_dim);
        ck.set_meta("time_period", format!("{:e}", c.time_period));
        ck.set_meta("encoder_hidden", c.encoder_hidden);
        ck.set_meta("encoder_depth", c.encoder_depth);
        ck.set_meta("encoder_time", c.encoder_time);
        ck.set_meta("horizon", c.horizon);
        for (name, t) in self.named_params() {
            ck.push(name, t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        fn num<T: FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
            let raw = ck.require_meta(key)?;
            raw.parse()
                .map_err(|_| Error::Parse(format!("checkpoint metadata {key}={raw:?}")))
        }
        let kind = ck.require_meta("kind")?;
        if kind != "forecaster" {
            return Err(Error::Parse(format!("checkpoint holds a {kind} model, expected forecaster")));
        }
        let prior = match ck.meta("prior") {
            Some(p) => p.parse()?,
            None => PriorKind::Tvamp,
        };
        let dropout = match ck.meta("dropout") {
            Some(_) => num(ck, "dropout")?,
            None => 0.0,
        };
        let variant = Variant::parse(ck.require_meta("model")?, prior, dropout)?;
        let config = ForecasterConfig {
            window: num(ck, "window")?,
            hidden: num(ck, "hidden")?,
            time_dim: num(ck, "time_dim")?,
            time_period: num(ck, "time_period")?,
            encoder_hidden: num(ck, "encoder_hidden")?,
            encoder_depth: num(ck, "encoder_depth")?,
            encoder_time: num(ck, "encoder_time")?,
            horizon: num(ck, "horizon")?,
        };
        let mut model = Forecaster::new(variant, config, 0)?;
        let expected = model.named_params().len();
        if ck.params.len() != expected {
            return Err(CheckpointError::Header {
                line: format!("{} parameters", ck.params.len()),
                detail: format!("{variant} expects {expected}"),
            }
            .into());
        }
        for (name, dst) in model.named_params_mut(true) {
            ck.load_into(&name, dst)?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_sinusoid;

    fn small_config() -> ForecasterConfig {
        ForecasterConfig {
            hidden: 8,
            encoder_hidden: 6,
            ..ForecasterConfig::default()
        }
    }

    #[test]
    fn variant_names() {
        assert_eq!(Variant::Barnn(PriorKind::Tvamp).to_string(), "barnn-tvamp");
        assert_eq!(Variant::parse("barnn", PriorKind::LogUniform, 0.0).unwrap().to_string(), "barnn-loguniform");
        assert!(Variant::parse("mc-dropout", PriorKind::Tvamp, 1.0).is_err());
        assert!(Variant::parse("transformer", PriorKind::Tvamp, 0.0).is_err());
        assert!("gaussian".parse::<PriorKind>().is_err());
    }

    #[test]
    fn features_layout_and_padding() {
        let cfg = ForecasterConfig {
            window: 3,
            ..small_config()
        };
        let m = Forecaster::new(Variant::PlainMlp, cfg, 0).unwrap();
        let states = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = m.features(&states, 1).unwrap();
        assert_eq!(&f.row(0)[..3], &[1.0, 1.0, 1.0]);
        let f = m.features(&states, 3).unwrap();
        assert_eq!(&f.row(0)[..3], &[1.0, 2.0, 3.0]);
        assert_eq!(f.cols(), 3 + 8);
        assert!(m.features(&states, 0).is_err());
        assert!(m.features(&states, 101).is_err());
    }

    #[test]
    fn static_variant_returns_initial_state() {
        let m = Forecaster::new(Variant::Static, small_config(), 0).unwrap();
        let states = Tensor::matrix(2, 3, vec![0.4, 9.0, 9.0, -0.2, 5.0, 5.0]).unwrap();
        let y = m.forecast_step(&states, 2, SampleMode::Stochastic, &mut seeded(1)).unwrap();
        assert_eq!(y, vec![0.4, -0.2]);
        assert_eq!(m.param_count(), 0);
        let mut m = m;
        let mut adam = AdamState::new(1e-3, 0.0);
        assert!(m
            .train_step(&states, 1, &TrainOptions::default(), 1, &mut adam, &mut seeded(0))
            .is_err());
    }

    #[test]
    fn unit_rate_barnn_matches_plain_mlp() {
        let cfg = small_config();
        let barnn = Forecaster::new(Variant::Barnn(PriorKind::Tvamp), cfg.clone(), 5).unwrap();
        let plain = Forecaster::new(Variant::PlainMlp, cfg, 5).unwrap();
        assert_eq!(barnn.lift, plain.lift);
        let data = gen_sinusoid(4, 2).unwrap();
        let states = stack_states(&data.iter().collect::<Vec<_>>()).unwrap();
        for mode in [SampleMode::Map, SampleMode::DeterministicAlpha1] {
            let a = barnn.forecast_step(&states, 7, mode, &mut seeded(1)).unwrap();
            let b = plain.forecast_step(&states, 7, SampleMode::Map, &mut seeded(2)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn map_is_deterministic_stochastic_is_not() {
        let m = Forecaster::new(Variant::Barnn(PriorKind::Tvamp), small_config(), 1).unwrap();
        let data = gen_sinusoid(3, 4).unwrap();
        let states = stack_states(&data.iter().collect::<Vec<_>>()).unwrap();
        let a = m.forecast_step(&states, 5, SampleMode::Map, &mut seeded(1)).unwrap();
        let b = m.forecast_step(&states, 5, SampleMode::Map, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
        let c = m.forecast_step(&states, 5, SampleMode::Stochastic, &mut seeded(1)).unwrap();
        let d = m.forecast_step(&states, 5, SampleMode::Stochastic, &mut seeded(2)).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn frozen_constant_encoder_has_zero_kl() {
        let mut m = Forecaster::new(Variant::Barnn(PriorKind::Tvamp), small_config(), 3).unwrap();
        // weights zero, bias nonzero: constant but non-unit rates
        m.encoder.as_mut().unwrap().head.bias = Tensor::vector(vec![0.7, -0.4]);
        let data = gen_sinusoid(16, 1).unwrap();
        let states = stack_states(&data.iter().collect::<Vec<_>>()).unwrap();
        let opts = TrainOptions {
            freeze_encoder: true,
            ..TrainOptions::default()
        };
        let mut adam = AdamState::new(1e-3, 0.0);
        let step = m.train_step(&states, 3, &opts, 16, &mut adam, &mut seeded(0)).unwrap();
        assert!(step.kl.abs() < 1e-12, "{}", step.kl);
        assert!((step.total - step.fit).abs() < 1e-12);
        assert_eq!(m.encoder.as_ref().unwrap().head.bias.data(), &[0.7, -0.4]);
    }

    #[test]
    fn zero_lambda_gives_plain_mse() {
        let mut m = Forecaster::new(Variant::Barnn(PriorKind::LogUniform), small_config(), 3).unwrap();
        let data = gen_sinusoid(8, 1).unwrap();
        let states = stack_states(&data.iter().collect::<Vec<_>>()).unwrap();
        let opts = TrainOptions {
            lambda_kl: 0.0,
            ..TrainOptions::default()
        };
        let mut adam = AdamState::new(1e-3, 0.0);
        let step = m.train_step(&states, 3, &opts, 8, &mut adam, &mut seeded(0)).unwrap();
        assert!(step.kl > 0.0);
        assert_eq!(step.total, step.fit);
    }

    #[test]
    fn training_reduces_loss() {
        let data = gen_sinusoid(64, 9).unwrap();
        let mut m = Forecaster::new(Variant::PlainMlp, small_config(), 2).unwrap();
        let schedule = Schedule {
            epochs: 40,
            batch_size: 16,
            lr: 3e-3,
            ..Schedule::default()
        };
        let logs = m.train(&data, &schedule, &TrainOptions::default(), |_| {}).unwrap();
        assert_eq!(logs.len(), 40);
        assert!(logs[39].total < logs[0].total);
    }

    #[test]
    fn checkpoint_roundtrip() {
        for v in [
            Variant::Barnn(PriorKind::LogUniform),
            Variant::McDropout(0.2),
            Variant::PlainMlp,
            Variant::Static,
        ] {
            let m = Forecaster::new(v, small_config(), 4).unwrap();
            let ck = m.to_checkpoint();
            let back = Forecaster::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
            if v == Variant::Static {
                assert_eq!(back.variant, v);
            } else {
                assert_eq!(back, m);
            }
        }
    }
}
