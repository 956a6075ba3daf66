//! Point-error, likelihood and calibration metrics for Gaussian predictive
//! distributions, plus validity statistics for sampled ring strings.

use std::collections::BTreeMap;

use statrs::distribution::{ContinuousCDF, Normal};

pub use crate::datagen::{ring_validity, ring_validity_str};
use crate::error::{Error, Result};

/// Lower bound applied to predictive variances inside NLL and ECE.
pub const VAR_FLOOR: f64 = 1e-12;
pub const ECE_LEVELS: usize = 100;

fn check_pair(op: &'static str, truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::invalid(format!("{op}: empty input")));
    }
    if truth.len() != pred.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![truth.len()],
            rhs: vec![pred.len()],
        });
    }
    Ok(())
}

fn floored(op: &'static str, var: &[f64], floor: f64) -> Result<Vec<f64>> {
    var.iter()
        .map(|&v| {
            if v.is_nan() || v < 0.0 {
                Err(Error::Domain {
                    op,
                    detail: format!("predictive variance must be non-negative, got {v}"),
                })
            } else {
                let v = v.max(floor);
                if v == 0.0 {
                    Err(Error::Domain {
                        op,
                        detail: "zero predictive variance with no floor".into(),
                    })
                } else {
                    Ok(v)
                }
            }
        })
        .collect()
}

pub fn metric_mse(truth: &[f64], pred_mean: &[f64]) -> Result<f64> {
    check_pair("metric_mse", truth, pred_mean)?;
    let s: f64 = truth.iter().zip(pred_mean).map(|(y, m)| (y - m) * (y - m)).sum();
    Ok(s / truth.len() as f64)
}

pub fn metric_rmse(truth: &[f64], pred_mean: &[f64]) -> Result<f64> {
    Ok(metric_mse(truth, pred_mean)?.sqrt())
}

/// Gaussian negative log-likelihood averaged over points, with variances
/// floored at [`VAR_FLOOR`].
pub fn metric_nll(truth: &[f64], pred_mean: &[f64], pred_var: &[f64]) -> Result<f64> {
    metric_nll_with_floor(truth, pred_mean, pred_var, VAR_FLOOR)
}

pub fn metric_nll_with_floor(truth: &[f64], pred_mean: &[f64], pred_var: &[f64], floor: f64) -> Result<f64> {
    check_pair("metric_nll", truth, pred_mean)?;
    check_pair("metric_nll", truth, pred_var)?;
    let var = floored("metric_nll", pred_var, floor)?;
    let two_pi = 2.0 * std::f64::consts::PI;
    let s: f64 = truth
        .iter()
        .zip(pred_mean)
        .zip(&var)
        .map(|((y, m), v)| (two_pi * v).ln() + (y - m) * (y - m) / v)
        .sum();
    Ok(s / (2.0 * truth.len() as f64))
}

/// Quantile levels `(i + ½)/levels`, strictly inside `(0, 1)`.
pub fn ece_grid(levels: usize) -> Vec<f64> {
    (0..levels).map(|i| (i as f64 + 0.5) / levels as f64).collect()
}

/// Expected calibration error over `levels` quantile levels and the
/// calibration curve `(p, p_obs)`. Variances are floored at [`VAR_FLOOR`].
pub fn metric_ece(truth: &[f64], pred_mean: &[f64], pred_var: &[f64], levels: usize) -> Result<(f64, Vec<(f64, f64)>)> {
    metric_ece_with_floor(truth, pred_mean, pred_var, levels, VAR_FLOOR)
}

pub fn metric_ece_with_floor(
    truth: &[f64],
    pred_mean: &[f64],
    pred_var: &[f64],
    levels: usize,
    floor: f64,
) -> Result<(f64, Vec<(f64, f64)>)> {
    check_pair("metric_ece", truth, pred_mean)?;
    check_pair("metric_ece", truth, pred_var)?;
    if levels < 2 {
        return Err(Error::invalid(format!("metric_ece needs at least 2 levels, got {levels}")));
    }
    let var = floored("metric_ece", pred_var, floor)?;
    // y ≤ μ + σ·Φ⁻¹(p)  ⇔  (y − μ)/σ ≤ Φ⁻¹(p)
    let mut z: Vec<f64> = truth
        .iter()
        .zip(pred_mean)
        .zip(&var)
        .map(|((y, m), v)| (y - m) / v.sqrt())
        .collect();
    z.sort_by(f64::total_cmp);
    let std_normal = Normal::standard();
    let n = z.len() as f64;
    let curve: Vec<(f64, f64)> = ece_grid(levels)
        .into_iter()
        .map(|p| {
            let q = std_normal.inverse_cdf(p);
            let below = z.partition_point(|&zi| zi <= q);
            (p, below as f64 / n)
        })
        .collect();
    let ece = curve.iter().map(|(p, o)| (p - o).abs()).sum::<f64>() / levels as f64;
    Ok((ece, curve))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mse: f64,
    pub rmse: f64,
    pub nll: f64,
    pub ece: f64,
    pub calibration_curve: Vec<(f64, f64)>,
    /// Ring count → fraction of valid samples (token models only).
    pub per_ring_validity: BTreeMap<usize, f64>,
}

impl MetricsReport {
    pub fn from_predictions(truth: &[f64], pred_mean: &[f64], pred_var: &[f64]) -> Result<Self> {
        let mse = metric_mse(truth, pred_mean)?;
        let nll = metric_nll(truth, pred_mean, pred_var)?;
        let (ece, calibration_curve) = metric_ece(truth, pred_mean, pred_var, ECE_LEVELS)?;
        Ok(MetricsReport {
            mse,
            rmse: mse.sqrt(),
            nll,
            ece,
            calibration_curve,
            per_ring_validity: BTreeMap::new(),
        })
    }
}

/// Validity counts of sampled strings grouped by ring count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidityTable {
    /// ring count → (valid, total)
    pub by_rings: BTreeMap<usize, (usize, usize)>,
}

impl ValidityTable {
    pub fn from_samples(samples: &[Vec<usize>]) -> Result<Self> {
        let mut by_rings = BTreeMap::new();
        for s in samples {
            let (valid, rings) = ring_validity(s)?;
            let e = by_rings.entry(rings).or_insert((0, 0));
            e.0 += valid as usize;
            e.1 += 1;
        }
        Ok(ValidityTable { by_rings })
    }

    pub fn total(&self) -> usize {
        self.by_rings.values().map(|e| e.1).sum()
    }

    pub fn validity(&self) -> f64 {
        let valid: usize = self.by_rings.values().map(|e| e.0).sum();
        valid as f64 / self.total().max(1) as f64
    }

    pub fn fractions(&self) -> BTreeMap<usize, f64> {
        self.by_rings
            .iter()
            .map(|(&k, &(v, n))| (k, v as f64 / n as f64))
            .collect()
    }

    /// Whether validity never increases with ring count, ignoring groups with
    /// fewer than `min_count` samples and allowing `slack` of sampling noise.
    pub fn is_non_increasing(&self, min_count: usize, slack: f64) -> bool {
        let fr: Vec<f64> = self
            .by_rings
            .values()
            .filter(|e| e.1 >= min_count)
            .map(|&(v, n)| v as f64 / n as f64)
            .collect();
        fr.windows(2).all(|w| w[1] <= w[0] + slack)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn rmse_basics() {
        let a = [0.3, -1.0, 2.0];
        assert_eq!(metric_rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(metric_rmse(&[0.0; 4], &[1.0; 4]).unwrap(), 1.0);
        assert!(metric_rmse(&[], &[]).is_err());
        assert!(metric_rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn nll_reference_values() {
        let y = [0.5; 10];
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let nll = metric_nll(&y, &y, &[1.0; 10]).unwrap();
        assert!((nll - half_ln_2pi).abs() < 1e-15);
        assert!((nll - 0.9189385).abs() < 1e-7);
        let off = metric_nll(&y, &[1.5; 10], &[1.0; 10]).unwrap();
        assert!((off - 1.4189385).abs() < 1e-7);
        assert!(metric_nll(&y, &y, &[0.01; 10]).unwrap() < nll);
        assert!(metric_nll(&y, &y, &[-1.0; 10]).is_err());
    }

    #[test]
    fn nll_minimised_at_empirical_mse() {
        let y = [0.0, 0.0, 0.0];
        let m = [0.5, -1.0, 0.2];
        let mse = metric_mse(&y, &m).unwrap();
        let at = |v: f64| metric_nll(&y, &m, &[v; 3]).unwrap();
        assert!(at(mse) < at(mse * 0.9));
        assert!(at(mse) < at(mse * 1.1));
    }

    #[test]
    fn zero_variance_without_floor_is_an_error() {
        assert!(metric_ece_with_floor(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 1.0], 10, 0.0).is_err());
        assert!(metric_nll_with_floor(&[1.0], &[1.0], &[0.0], 0.0).is_err());
        assert!(metric_ece(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 1.0], 10).is_ok());
        assert!(metric_ece(&[1.0], &[1.0], &[1.0], 1).is_err());
    }

    #[test]
    fn calibrated_gaussian_has_small_ece() {
        let mut rng = seeded(11);
        let n = 10_000;
        let mut y = Vec::with_capacity(n);
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let mu: f64 = rng.random_range(-2.0..2.0);
            let var: f64 = rng.random_range(0.1..3.0);
            let e: f64 = rng.sample(StandardNormal);
            m.push(mu);
            v.push(var);
            y.push(mu + var.sqrt() * e);
        }
        let (ece, curve) = metric_ece(&y, &m, &v, ECE_LEVELS).unwrap();
        assert!(ece < 0.02, "{ece}");
        assert_eq!(curve.len(), 100);
        assert!((curve[0].0 - 0.005).abs() < 1e-15 && (curve[99].0 - 0.995).abs() < 1e-15);
        assert!(curve.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn overconfident_predictor_approaches_half() {
        let y = vec![1.0; 500];
        let m = vec![0.0; 500];
        let (ece, curve) = metric_ece(&y, &m, &vec![1e-12; 500], ECE_LEVELS).unwrap();
        assert!(curve.iter().all(|&(_, o)| o == 0.0));
        assert!((ece - 0.5).abs() < 0.02);
    }

    #[test]
    fn validity_table_counts() {
        let samples: Vec<Vec<usize>> = ["a 1 b 1", "a 1 1", "a b", "a 1 b 2 c 1 d 2"]
            .iter()
            .map(|s| crate::datagen::parse_tokens(s).unwrap())
            .collect();
        let t = ValidityTable::from_samples(&samples).unwrap();
        assert_eq!(t.by_rings[&0], (1, 1));
        assert_eq!(t.by_rings[&1], (1, 2));
        assert_eq!(t.by_rings[&2], (1, 1));
        assert_eq!(t.validity(), 0.75);
        assert!(!t.is_non_increasing(1, 0.0));
        assert!(t.is_non_increasing(2, 0.0));
    }
}
