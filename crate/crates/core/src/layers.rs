//! Linear maps, the variational linear layer with local reparametrization,
//! MC-dropout, and the dropout-rate encoder.
//!
//! Weight matrices are stored input-major (`[in, out]`) so a batch `H` of
//! shape `[n, in]` maps as `H · Ω`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, SeededRng};
use crate::tensor::Tensor;

/// Collects the leaves a model registers on a tape, in registration order.
pub struct Binder<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Binder {
            tape,
            vars: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bind(&mut self, t: &Tensor) -> Var<'t> {
        let v = self.tape.leaf(t.clone());
        self.vars.push(v);
        v
    }

    pub fn into_vars(self) -> Vec<Var<'t>> {
        self.vars
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` initialisation with zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Linear {
            weight: Tensor::from_fn([inputs, outputs], |_| rng.random_range(-bound..bound)),
            bias: Tensor::zeros([outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Tensor::zeros([inputs, outputs]),
            bias: Tensor::zeros([outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Number of weights `|Ω|` (bias excluded).
    pub fn weight_count(&self) -> usize {
        self.weight.len()
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.weight"), &self.weight),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.weight"), &mut self.weight),
            (format!("{prefix}.bias"), &mut self.bias),
        ]
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t>) -> LinearVars<'t> {
        LinearVars {
            weight: binder.bind(&self.weight),
            bias: binder.bind(&self.bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> LinearVars<'t> {
    pub fn forward(&self, h: Var<'t>) -> Result<Var<'t>> {
        h.matmul(self.weight)?.add(self.bias)
    }
}

/// How weights are drawn in a variational forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Fresh `ε ~ N(0, I)` on every call.
    Stochastic,
    /// Posterior mean, `ε ≡ 0`.
    Map,
    /// `ε ≡ 0` and `α` forced to 1: a plain linear layer.
    DeterministicAlpha1,
}

/// Parametrisation of the Gaussian weight posterior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Posterior {
    /// `w = αΩ(1 + ε)`, i.e. `N(αΩ, (αΩ)²)`.
    ScaledMean,
    /// `w = Ω(1 + αε)`, i.e. `N(Ω, α²Ω²)`. Used with the log-uniform prior.
    FixedMean,
}

/// Source of the standard-normal activation noise.
pub trait NoiseSource {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor;
}

impl NoiseSource for SeededRng {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor {
        normal_tensor(self, shape.to_vec())
    }
}

/// Always returns zeros; forces `ε = 0` while keeping the stochastic code path.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn standard_normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape.to_vec())
    }
}

/// Repeats an `[n, 1]` column across `width` columns.
pub fn broadcast_column<'t>(col: Var<'t>, width: usize) -> Result<Var<'t>> {
    let ones = col.tape().leaf(Tensor::ones([1, width]));
    col.matmul(ones)
}

/// A linear layer whose weights follow a per-sample scaled Gaussian posterior.
/// The bias is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalLinear {
    pub linear: Linear,
    pub layer_index: usize,
}

impl VariationalLinear {
    pub fn new(linear: Linear, layer_index: usize) -> Self {
        VariationalLinear {
            linear,
            layer_index,
        }
    }
}

/// Variational linear forward with the local reparametrization trick.
///
/// `alpha` is `[n, 1]`, one rate per batch row. In the scaled-mean posterior
/// the activations are `M = (αH)·Ω`, `V = (αH)²·Ω²` and the output is
/// `M + sqrt(V) ⊙ E + b`.
pub fn var_linear_forward<'t>(
    h: Var<'t>,
    layer: &LinearVars<'t>,
    alpha: Var<'t>,
    posterior: Posterior,
    mode: SampleMode,
    noise: &mut dyn NoiseSource,
) -> Result<Var<'t>> {
    if mode == SampleMode::DeterministicAlpha1 {
        return layer.forward(h);
    }
    let h_shape = h.shape();
    let a_shape = alpha.shape();
    if h_shape.len() != 2 || a_shape != [h_shape[0], 1] {
        return Err(Error::ShapeMismatch {
            op: "var_linear_forward",
            lhs: h_shape,
            rhs: a_shape,
        });
    }
    if let Some(bad) = alpha
        .value_ref()
        .data()
        .iter()
        .find(|&&a| !(a > 0.0) || !a.is_finite())
    {
        return Err(Error::Domain {
            op: "var_linear_forward",
            detail: format!("dropout rate must be positive and finite, got {bad}"),
        });
    }
    let width = h_shape[1];
    let scaled = h.mul(broadcast_column(alpha, width)?)?;
    let mean = match posterior {
        Posterior::ScaledMean => scaled.matmul(layer.weight)?,
        Posterior::FixedMean => h.matmul(layer.weight)?,
    };
    let pre = match mode {
        SampleMode::Map => mean,
        SampleMode::Stochastic => {
            let var = scaled.square().matmul(layer.weight.square())?;
            let eps = h.tape().leaf(noise.standard_normal(&var.shape()));
            mean.add(var.sqrt()?.mul(eps)?)?
        }
        SampleMode::DeterministicAlpha1 => unreachable!(),
    };
    pre.add(layer.bias)
}

/// Variational forward with an explicit weight-noise draw `eps` (`[in, out]`)
/// shared by every batch row, instead of fresh activation noise per row.
pub fn var_linear_forward_weight_noise<'t>(
    h: Var<'t>,
    layer: &LinearVars<'t>,
    alpha: Var<'t>,
    posterior: Posterior,
    eps: &Tensor,
) -> Result<Var<'t>> {
    let width = h.shape()[1];
    let scaled = h.mul(broadcast_column(alpha, width)?)?;
    let eps = h.tape().leaf(eps.clone());
    let noisy = layer.weight.mul(eps)?;
    let pre = match posterior {
        // αΩ(1 + ε)
        Posterior::ScaledMean => scaled.matmul(layer.weight)?.add(scaled.matmul(noisy)?)?,
        // Ω(1 + αε)
        Posterior::FixedMean => h.matmul(layer.weight)?.add(scaled.matmul(noisy)?)?,
    };
    pre.add(layer.bias)
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    let keep = 1.0 / (1.0 - p);
    Ok(Tensor::from_fn(shape.to_vec(), |_| {
        if p > 0.0 && rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

/// MC-dropout linear forward: drop input units, then apply the layer.
/// Used identically at train and test time.
pub fn bernoulli_dropout_forward<'t>(
    h: Var<'t>,
    layer: &LinearVars<'t>,
    p: f64,
    rng: &mut impl Rng,
) -> Result<Var<'t>> {
    let mask = dropout_mask(&h.shape(), p, rng)?;
    if p == 0.0 {
        return layer.forward(h);
    }
    let mask = h.tape().leaf(mask);
    layer.forward(h.mul(mask)?)
}

/// Sinusoidal encoding of a timestep: `dim/2` (sin, cos) pairs with
/// wavelengths from `2π` up to `2π·period`.
pub fn time_embedding(t: f64, dim: usize, period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = period.powf(-(2.0 * i as f64) / dim as f64);
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    out
}

/// Small MLP mapping a state (plus time features) to one dropout rate per
/// variational layer through a sigmoid head.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorEncoder {
    pub hidden: Vec<Linear>,
    pub head: Linear,
}

impl PosteriorEncoder {
    /// Hidden layers are randomly initialised; the head starts at zero so
    /// every rate begins at `p = 0.5`, `α = 1`.
    pub fn new(inputs: usize, hidden: usize, depth: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut width = inputs;
        for _ in 0..depth {
            layers.push(Linear::init(width, hidden, rng));
            width = hidden;
        }
        PosteriorEncoder {
            hidden: layers,
            head: Linear::zeros(width, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.hidden.first().unwrap_or(&self.head).inputs()
    }

    pub fn outputs(&self) -> usize {
        self.head.outputs()
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            out.extend(l.named_params(&format!("{prefix}.hidden{i}")));
        }
        out.extend(self.head.named_params(&format!("{prefix}.head")));
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter_mut().enumerate() {
            out.extend(l.named_params_mut(&format!("{prefix}.hidden{i}")));
        }
        out.extend(self.head.named_params_mut(&format!("{prefix}.head")));
        out
    }

    pub fn bind<'t>(&self, binder: &mut Binder<'t>) -> EncoderVars<'t> {
        EncoderVars {
            hidden: self.hidden.iter().map(|l| l.bind(binder)).collect(),
            head: self.head.bind(binder),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderVars<'t> {
    pub hidden: Vec<LinearVars<'t>>,
    pub head: LinearVars<'t>,
}

/// Dropout probabilities `p ∈ (0,1)` and rates `α = p / (1 − p)`, both `[n, L]`.
#[derive(Clone, Copy, Debug)]
pub struct Rates<'t> {
    pub p: Var<'t>,
    pub alpha: Var<'t>,
}

impl<'t> Rates<'t> {
    /// Column `l` of `α` as an `[n, 1]` variable.
    pub fn layer(&self, l: usize) -> Result<Var<'t>> {
        self.alpha.slice_cols(l, l + 1)
    }
}

impl<'t> EncoderVars<'t> {
    /// Maps `[n, inputs]` encoder inputs to per-layer rates.
    ///
    /// `α` is evaluated as `exp(z)` for head logits `z`, which equals
    /// `sigmoid(z) / (1 − sigmoid(z))` without cancellation near `p → 1`.
    pub fn encode_rates(&self, x: Var<'t>) -> Result<Rates<'t>> {
        if x.value_ref().data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN in encoder input".into()));
        }
        let mut h = x;
        for l in &self.hidden {
            h = l.forward(h)?.tanh();
        }
        let z = self.head.forward(h)?;
        Ok(Rates {
            p: z.sigmoid(),
            alpha: z.exp(),
        })
    }
}
