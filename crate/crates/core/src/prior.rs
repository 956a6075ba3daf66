//! Weight priors and their KL terms.
//!
//! The time-dependent aggregated-posterior prior for layer `l` at timestep `t`
//! is `N(β·Ω, (γ·Ω)²)`, where `β` and `γ` are the batch mean and batch
//! root-mean-square of the encoder rates. Against the scaled-mean posterior
//! `N(αΩ, (αΩ)²)` the KL is independent of `Ω`:
//!
//! ```text
//! KL = Σ_l |Ω^l|/2 · [((α−β)/γ)² + (α/γ)² − 1 − 2 ln(α/γ)]
//! ```

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch statistics backing the aggregated-posterior prior.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorStats {
    /// Per-layer batch mean of `α`.
    pub beta: Vec<f64>,
    /// Per-layer batch root-mean-square of `α`.
    pub gamma: Vec<f64>,
    /// Timestep the batch was drawn at.
    pub t: usize,
}

/// `β^l = mean_k α^l_k`, `γ^l = sqrt(mean_k (α^l_k)²)` from an `[n, L]` batch.
pub fn tvamp_stats(alpha: &Tensor, t: usize) -> Result<PriorStats> {
    if alpha.shape().len() != 2 || alpha.is_empty() {
        return Err(Error::invalid(format!(
            "tvamp_stats needs a non-empty [n, L] batch, got shape {:?}",
            alpha.shape()
        )));
    }
    if let Some(bad) = alpha.data().iter().find(|&&a| !(a > 0.0)) {
        return Err(Error::Domain {
            op: "tvamp_stats",
            detail: format!("rates must be positive, got {bad}"),
        });
    }
    let (n, layers) = (alpha.rows(), alpha.cols());
    let mut beta = vec![0.0; layers];
    let mut sq = vec![0.0; layers];
    for k in 0..n {
        for (l, &a) in alpha.row(k).iter().enumerate() {
            beta[l] += a;
            sq[l] += a * a;
        }
    }
    let gamma = sq.iter().map(|s| (s / n as f64).sqrt()).collect();
    beta.iter_mut().for_each(|b| *b /= n as f64);
    Ok(PriorStats { beta, gamma, t })
}

fn kl_tvamp_term(alpha: f64, beta: f64, gamma: f64) -> f64 {
    let d = (alpha - beta) / gamma;
    let r = alpha / gamma;
    // r² − 1 as (r−1)(r+1) keeps the expression exact near r = 1
    d * d + (r - 1.0) * (r + 1.0) - 2.0 * r.ln()
}

/// Closed-form KL between the scaled-mean posterior and the aggregated prior.
///
/// `alpha[l]` is the sample's rate for layer `l` and `layer_dims[l] = |Ω^l|`.
pub fn kl_tvamp(alpha: &[f64], stats: &PriorStats, layer_dims: &[usize]) -> Result<f64> {
    let layers = alpha.len();
    if stats.beta.len() != layers || stats.gamma.len() != layers || layer_dims.len() != layers {
        return Err(Error::invalid(format!(
            "layer count mismatch: {layers} rates, {} β, {} γ, {} dims",
            stats.beta.len(),
            stats.gamma.len(),
            layer_dims.len()
        )));
    }
    let mut total = 0.0;
    for l in 0..layers {
        let (a, b, g) = (alpha[l], stats.beta[l], stats.gamma[l]);
        if !(a > 0.0 && b > 0.0 && g > 0.0) {
            return Err(Error::Domain {
                op: "kl_tvamp",
                detail: format!("layer {l}: α={a}, β={b}, γ={g} must all be positive"),
            });
        }
        total += layer_dims[l] as f64 / 2.0 * kl_tvamp_term(a, b, g);
    }
    Ok(total)
}

/// Batch statistics on the tape for one layer's `[n]` rate vector.
///
/// With `detach`, `β` and `γ` are treated as constants of the batch.
pub fn tvamp_stats_var<'t>(alpha: Var<'t>, detach: bool) -> Result<(Var<'t>, Var<'t>)> {
    let beta = alpha.mean();
    let gamma = alpha.square().mean().sqrt()?;
    if detach {
        Ok((beta.detach(), gamma.detach()))
    } else {
        Ok((beta, gamma))
    }
}

/// Per-sample tVAMP KL for one layer, `[n]`, on the tape.
pub fn kl_tvamp_var<'t>(alpha: Var<'t>, beta: Var<'t>, gamma: Var<'t>, dim: usize) -> Result<Var<'t>> {
    let d = alpha.sub(beta)?.div(gamma)?;
    let r = alpha.div(gamma)?;
    let inner = d
        .square()
        .add(r.add_scalar(-1.0).mul(r.add_scalar(1.0))?)?
        .sub(r.log()?.scale(2.0))?;
    Ok(inner.scale(dim as f64 / 2.0))
}

const K1: f64 = 0.63576;
const K2: f64 = 1.87320;
const K3: f64 = 1.48695;

fn kl_loguniform_weight(alpha_ratio: f64) -> f64 {
    let s = crate::autodiff::sigmoid(K2 + K3 * alpha_ratio.ln());
    -(K1 * s - 0.5 * (1.0 + 1.0 / alpha_ratio).ln() - K1)
}

/// Approximate KL from `N(Ω, α_ratio·Ω²)` to the log-uniform prior, summed
/// over `layer_dims[l]` weights per layer.
pub fn kl_loguniform(alpha_ratio: &[f64], layer_dims: &[usize]) -> Result<f64> {
    if alpha_ratio.len() != layer_dims.len() {
        return Err(Error::invalid(format!(
            "{} variance ratios for {} layers",
            alpha_ratio.len(),
            layer_dims.len()
        )));
    }
    let mut total = 0.0;
    for (l, (&a, &dim)) in alpha_ratio.iter().zip(layer_dims).enumerate() {
        if !(a > 0.0) {
            return Err(Error::Domain {
                op: "kl_loguniform",
                detail: format!("layer {l}: variance ratio must be positive, got {a}"),
            });
        }
        total += dim as f64 * kl_loguniform_weight(a);
    }
    Ok(total)
}

/// Per-sample log-uniform KL for one layer on the tape, where the posterior
/// std is `α|Ω|` so the variance ratio is `α²`.
pub fn kl_loguniform_var<'t>(alpha: Var<'t>, dim: usize) -> Result<Var<'t>> {
    let log_alpha = alpha.log()?;
    // ln α² = 2 ln α ; ln(1 + α⁻²) = ln(1 + α²) − 2 ln α
    let s = log_alpha.scale(2.0 * K3).add_scalar(K2).sigmoid();
    let log_term = alpha.square().add_scalar(1.0).log()?.sub(log_alpha.scale(2.0))?;
    let per_weight = s
        .scale(K1)
        .sub(log_term.scale(0.5))?
        .add_scalar(-K1)
        .neg();
    Ok(per_weight.scale(dim as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn constant_batch_stats() {
        let a = Tensor::matrix(3, 1, vec![0.3, 0.3, 0.3]).unwrap();
        let s = tvamp_stats(&a, 4).unwrap();
        assert!((s.beta[0] - 0.3).abs() < 1e-15);
        assert!((s.gamma[0] - 0.3).abs() < 1e-15);
        assert_eq!(s.t, 4);
    }

    #[test]
    fn two_element_stats() {
        let a = Tensor::matrix(2, 1, vec![0.2, 0.4]).unwrap();
        let s = tvamp_stats(&a, 1).unwrap();
        assert!((s.beta[0] - 0.3).abs() < 1e-15);
        assert!((s.gamma[0] - 0.1_f64.sqrt()).abs() < 1e-15);
        assert!((s.gamma[0] - 0.3162278).abs() < 1e-7);
    }

    #[test]
    fn single_sample_stats() {
        let a = Tensor::matrix(1, 2, vec![1.7, 0.4]).unwrap();
        let s = tvamp_stats(&a, 1).unwrap();
        assert_eq!(s.beta, vec![1.7, 0.4]);
        assert!((s.gamma[0] - 1.7).abs() < 1e-15 && (s.gamma[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn stats_errors() {
        assert!(tvamp_stats(&Tensor::zeros([0, 2]), 1).is_err());
        assert!(tvamp_stats(&Tensor::matrix(1, 1, vec![-1.0]).unwrap(), 1).is_err());
    }

    #[test]
    fn matched_prior_gives_zero() {
        let s = PriorStats {
            beta: vec![0.8, 1.3],
            gamma: vec![0.8, 1.3],
            t: 1,
        };
        assert_eq!(kl_tvamp(&[0.8, 1.3], &s, &[64, 4096]).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_gaussian_case() {
        // KL(N(2,4) || N(1,1)) = ln(1/2) + (4 + 1)/2 - 1/2
        let oracle = (1.0_f64 / 2.0).ln() + (4.0 + 1.0) / 2.0 - 0.5;
        let s = PriorStats {
            beta: vec![1.0],
            gamma: vec![1.0],
            t: 1,
        };
        let kl = kl_tvamp(&[2.0], &s, &[1]).unwrap();
        assert!((kl - oracle).abs() < 1e-12);
        assert!((kl - 1.3068528).abs() < 1e-6);
        let doubled = kl_tvamp(&[2.0], &s, &[2]).unwrap();
        assert!((doubled - 2.0 * kl).abs() < 1e-12);
    }

    #[test]
    fn non_positive_inputs_rejected() {
        let s = PriorStats {
            beta: vec![1.0],
            gamma: vec![0.0],
            t: 1,
        };
        assert!(kl_tvamp(&[1.0], &s, &[1]).is_err());
        assert!(kl_loguniform(&[0.0], &[1]).is_err());
    }

    #[test]
    fn loguniform_reference_value_and_additivity() {
        let one = kl_loguniform(&[1.0], &[1]).unwrap();
        let by_hand = -(K1 * crate::autodiff::sigmoid(K2) - 0.5 * 2.0_f64.ln() - K1);
        assert!((one - by_hand).abs() < 1e-15);
        assert!((one - 0.4313).abs() < 1e-4, "{one}");
        let ten = kl_loguniform(&[1.0], &[10]).unwrap();
        assert!((ten - 10.0 * one).abs() < 1e-12);
    }

    #[test]
    fn loguniform_decreasing_in_ratio() {
        let mut prev = f64::INFINITY;
        for i in -60..=60 {
            let a = 10f64.powf(i as f64 / 10.0);
            let kl = kl_loguniform(&[a], &[1]).unwrap();
            assert!(kl < prev, "not decreasing at α={a}");
            prev = kl;
        }
    }

    #[test]
    fn tape_versions_match_plain() {
        let alpha = vec![0.4, 0.9, 1.7, 1.1];
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(alpha.clone()));
        let (b, g) = tvamp_stats_var(a, false).unwrap();
        let kl = kl_tvamp_var(a, b, g, 37).unwrap().value();
        let stats = tvamp_stats(&Tensor::matrix(4, 1, alpha.clone()).unwrap(), 1).unwrap();
        for (k, &ak) in alpha.iter().enumerate() {
            let plain = kl_tvamp(&[ak], &stats, &[37]).unwrap();
            assert!((kl.data()[k] - plain).abs() < 1e-12);
        }
        let lu = kl_loguniform_var(a, 5).unwrap().value();
        for (k, &ak) in alpha.iter().enumerate() {
            let plain = kl_loguniform(&[ak * ak], &[5]).unwrap();
            assert!((lu.data()[k] - plain).abs() < 1e-12);
        }
    }
}
