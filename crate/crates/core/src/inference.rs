//! Monte-Carlo rollouts and ensemble moments.
//!
//! Each ensemble member unrolls the forecaster from the initial states with
//! its own random stream (`seed + i`), feeding every prediction back as the
//! next input. The ensemble mean and the spread of member means give the
//! predictive mean and the epistemic variance; the aleatoric part is the
//! average member variance.

use rand::Rng;
use rayon::prelude::*;

use crate::datagen::Trajectory;
use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, VARIATIONAL_LAYERS};
use crate::layers::SampleMode;
use crate::metrics::MetricsReport;
use crate::rng::{normal_tensor, seeded};
use crate::tensor::Tensor;

/// When variational weights are redrawn during a rollout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Resampling {
    /// Fresh noise at every step.
    #[default]
    PerStep,
    /// One weight draw per rollout, reused at every step.
    PerTrajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutOptions {
    pub steps: usize,
    pub mode: SampleMode,
    pub resampling: Resampling,
}

impl RolloutOptions {
    pub fn stochastic(steps: usize) -> Self {
        RolloutOptions {
            steps,
            mode: SampleMode::Stochastic,
            resampling: Resampling::PerStep,
        }
    }

    pub fn map(steps: usize) -> Self {
        RolloutOptions {
            steps,
            mode: SampleMode::Map,
            resampling: Resampling::PerStep,
        }
    }
}

/// Closed-loop rollout from `y0`. Returns `[n, steps + 1]` with `y0` in
/// column 0.
pub fn rollout(model: &Forecaster, y0: &[f64], opts: &RolloutOptions, seed: u64) -> Result<Tensor> {
    if opts.steps == 0 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    if opts.steps > model.config.horizon {
        return Err(Error::invalid(format!(
            "{} steps exceed the model horizon {}",
            opts.steps, model.config.horizon
        )));
    }
    let n = y0.len();
    if n == 0 {
        return Err(Error::invalid("no initial states"));
    }
    let mut rng = seeded(seed);
    let eps: Option<Vec<Tensor>> = (opts.resampling == Resampling::PerTrajectory
        && opts.mode == SampleMode::Stochastic
        && model.encoder.is_some())
    .then(|| {
        model
            .hidden
            .iter()
            .map(|l| normal_tensor(&mut rng, l.weight.shape().to_vec()))
            .collect()
    });
    debug_assert!(eps.as_ref().is_none_or(|e| e.len() == VARIATIONAL_LAYERS));

    let width = opts.steps + 1;
    let mut states = Tensor::zeros([n, width]);
    for (r, &v) in y0.iter().enumerate() {
        states.data_mut()[r * width] = v;
    }
    for t in 1..=opts.steps {
        let pred = model.forecast_step_with(&states, t, opts.mode, &mut rng, eps.as_deref())?;
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::RolloutDiverged { step: t });
        }
        for (r, v) in pred.into_iter().enumerate() {
            states.data_mut()[r * width + t] = v;
        }
    }
    Ok(states)
}

/// `d` member rollouts with seeds `seed + i`, run in parallel. Deterministic
/// settings are computed once and replicated.
pub fn ensemble_rollout(model: &Forecaster, y0: &[f64], opts: &RolloutOptions, d: usize, seed: u64) -> Result<Vec<Tensor>> {
    if d == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    if !model.variant.is_stochastic() || opts.mode != SampleMode::Stochastic {
        let one = rollout(model, y0, opts, seed)?;
        return Ok(vec![one; d]);
    }
    (0..d as u64)
        .into_par_iter()
        .map(|i| rollout(model, y0, opts, seed.wrapping_add(i)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleForecast {
    pub members: Vec<Tensor>,
    pub mean: Tensor,
    pub epistemic: Tensor,
    pub aleatoric: Tensor,
}

impl EnsembleForecast {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn total_variance(&self) -> Tensor {
        let mut v = self.epistemic.clone();
        v.add_assign(&self.aleatoric);
        v
    }
}

/// Law-of-total-variance aggregation of member means and variances.
///
/// The epistemic part `(1/D)Σμᵢ² − μ̄²` is evaluated in the centred form
/// `(1/D)Σ(μᵢ − μ̄)²`, which is algebraically identical and never negative.
pub fn ensemble_moments(means: &[Tensor], vars: &[Tensor]) -> Result<EnsembleForecast> {
    let d = means.len();
    if d == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    if vars.len() != d {
        return Err(Error::invalid(format!("{d} member means but {} variances", vars.len())));
    }
    let shape = means[0].shape().to_vec();
    for t in means.iter().chain(vars) {
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "ensemble_moments",
                lhs: shape,
                rhs: t.shape().to_vec(),
            });
        }
    }
    let len = means[0].len();
    let df = d as f64;
    let mut mean = vec![0.0; len];
    let mut aleatoric = vec![0.0; len];
    for (m, v) in means.iter().zip(vars) {
        for k in 0..len {
            mean[k] += m.data()[k];
            aleatoric[k] += v.data()[k];
        }
    }
    mean.iter_mut().for_each(|x| *x /= df);
    aleatoric.iter_mut().for_each(|x| *x /= df);
    let mut epistemic = vec![0.0; len];
    for m in means {
        for k in 0..len {
            let c = m.data()[k] - mean[k];
            epistemic[k] += c * c;
        }
    }
    epistemic.iter_mut().for_each(|x| *x /= df);
    Ok(EnsembleForecast {
        members: means.to_vec(),
        mean: Tensor::new(shape.clone(), mean)?,
        epistemic: Tensor::new(shape.clone(), epistemic)?,
        aleatoric: Tensor::new(shape, aleatoric)?,
    })
}

/// [`ensemble_moments`] with the same fixed observation variance for every
/// member.
pub fn ensemble_moments_fixed(means: &[Tensor], sigma2_fixed: f64) -> Result<EnsembleForecast> {
    if !(sigma2_fixed >= 0.0) {
        return Err(Error::invalid(format!("observation variance must be non-negative, got {sigma2_fixed}")));
    }
    let vars: Vec<Tensor> = means.iter().map(|m| Tensor::full(m.shape().to_vec(), sigma2_fixed)).collect();
    ensemble_moments(means, &vars)
}

/// One draw from the predictive distribution of `y_t` given the history in
/// `states`: a weight sample (in stochastic mode) plus observation noise.
pub fn predictive_sample(
    model: &Forecaster,
    states: &Tensor,
    t: usize,
    mode: SampleMode,
    sigma2_fixed: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = seeded(seed);
    let mut y = model.forecast_step(states, t, mode, &mut rng)?;
    if sigma2_fixed > 0.0 {
        let sd = sigma2_fixed.sqrt();
        for v in &mut y {
            *v += sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub ensemble: usize,
    pub seed: u64,
    pub sigma2_fixed: f64,
    pub map: bool,
    pub resampling: Resampling,
    pub steps: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ensemble: 100,
            seed: 0,
            sigma2_fixed: 0.0,
            map: false,
            resampling: Resampling::PerStep,
            steps: crate::datagen::SINUSOID_STEPS,
        }
    }
}

/// Rolls out every test trajectory from its `y_0` and scores steps
/// `1..=steps` against the truth.
pub fn evaluate(model: &Forecaster, test: &[Trajectory], opts: &EvalOptions) -> Result<(MetricsReport, EnsembleForecast)> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    if test.iter().any(|tr| tr.y.len() <= opts.steps) {
        return Err(Error::invalid(format!("test trajectories shorter than {} steps", opts.steps)));
    }
    let y0: Vec<f64> = test.iter().map(|tr| tr.y[0]).collect();
    let ropts = RolloutOptions {
        steps: opts.steps,
        mode: if opts.map { SampleMode::Map } else { SampleMode::Stochastic },
        resampling: opts.resampling,
    };
    let d = if opts.map { 1 } else { opts.ensemble };
    let members: Vec<Tensor> = ensemble_rollout(model, &y0, &ropts, d, opts.seed)?
        .into_iter()
        .map(|m| m.slice_cols(1, opts.steps + 1))
        .collect::<Result<_>>()?;
    let forecast = ensemble_moments_fixed(&members, opts.sigma2_fixed)?;
    let truth: Vec<f64> = test.iter().flat_map(|tr| tr.y[1..=opts.steps].iter().copied()).collect();
    let report = MetricsReport::from_predictions(&truth, forecast.mean.data(), forecast.total_variance().data())?;
    Ok((report, forecast))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::{ForecasterConfig, PriorKind, Variant};

    fn model(v: Variant) -> Forecaster {
        let cfg = ForecasterConfig {
            hidden: 8,
            encoder_hidden: 6,
            ..ForecasterConfig::default()
        };
        Forecaster::new(v, cfg, 3).unwrap()
    }

    #[test]
    fn identical_members_have_zero_epistemic() {
        let m = Tensor::vector(vec![0.3, -1.0]);
        let f = ensemble_moments_fixed(&[m.clone(), m.clone(), m.clone()], 0.0).unwrap();
        assert_eq!(f.mean, m);
        assert!(f.epistemic.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_member_hand_computation() {
        let f = ensemble_moments_fixed(&[Tensor::vector(vec![0.0]), Tensor::vector(vec![2.0])], 0.0).unwrap();
        assert_eq!(f.mean.data(), &[1.0]);
        assert_eq!(f.epistemic.data(), &[1.0]);
        let f = ensemble_moments_fixed(&[Tensor::vector(vec![0.0, 5.0]), Tensor::vector(vec![2.0, 1.0])], 0.25).unwrap();
        assert!(f.aleatoric.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn moments_errors() {
        assert!(ensemble_moments_fixed(&[], 0.0).is_err());
        assert!(ensemble_moments_fixed(&[Tensor::vector(vec![1.0]), Tensor::vector(vec![1.0, 2.0])], 0.0).is_err());
    }

    #[test]
    fn static_rollout_is_constant() {
        let m = model(Variant::Static);
        let r = rollout(&m, &[0.25, -0.5], &RolloutOptions::stochastic(10), 1).unwrap();
        assert!(r.row(0).iter().all(|&v| v == 0.25));
        assert!(r.row(1).iter().all(|&v| v == -0.5));
    }

    #[test]
    fn map_rollout_ignores_seed() {
        let m = model(Variant::Barnn(PriorKind::Tvamp));
        let a = rollout(&m, &[0.1, 0.2], &RolloutOptions::map(20), 1).unwrap();
        let b = rollout(&m, &[0.1, 0.2], &RolloutOptions::map(20), 2).unwrap();
        assert_eq!(a, b);
        let c = rollout(&m, &[0.1, 0.2], &RolloutOptions::stochastic(20), 1).unwrap();
        let d = rollout(&m, &[0.1, 0.2], &RolloutOptions::stochastic(20), 2).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn per_trajectory_resampling_runs() {
        let m = model(Variant::Barnn(PriorKind::LogUniform));
        let opts = RolloutOptions {
            resampling: Resampling::PerTrajectory,
            ..RolloutOptions::stochastic(5)
        };
        let a = rollout(&m, &[0.1], &opts, 4).unwrap();
        assert_eq!(a, rollout(&m, &[0.1], &opts, 4).unwrap());
    }

    #[test]
    fn ensemble_members_follow_seed_plus_index() {
        let m = model(Variant::McDropout(0.3));
        let opts = RolloutOptions::stochastic(5);
        let members = ensemble_rollout(&m, &[0.0, 0.4], &opts, 4, 10).unwrap();
        for (i, mem) in members.iter().enumerate() {
            assert_eq!(mem, &rollout(&m, &[0.0, 0.4], &opts, 10 + i as u64).unwrap());
        }
        assert!(rollout(&m, &[0.0], &RolloutOptions::stochastic(101), 0).is_err());
    }

    #[test]
    fn evaluate_static_scores_constant_prediction() {
        let test = crate::datagen::gen_sinusoid(5, 1).unwrap();
        let m = model(Variant::Static);
        let (report, f) = evaluate(&m, &test, &EvalOptions::default()).unwrap();
        let truth: Vec<f64> = test.iter().flat_map(|t| t.y[1..].to_vec()).collect();
        let pred: Vec<f64> = test.iter().flat_map(|t| vec![t.y[0]; 100]).collect();
        assert!((report.mse - crate::metrics::metric_mse(&truth, &pred).unwrap()).abs() < 1e-12);
        assert_eq!(f.size(), 100);
    }
}
