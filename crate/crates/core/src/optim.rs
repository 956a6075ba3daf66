//! Adam with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// One update. `params` and `grads` must line up one-to-one and keep the
    /// same order across calls.
    pub fn update(&mut self, params: Vec<(String, &mut Tensor)>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_update",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {name}")));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len() {
            return Err(Error::invalid("parameter list changed between Adam steps"));
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = self.lr * self.weight_decay;
        for (i, ((_, p), g)) in params.into_iter().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                *w -= decay * *w;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_assign(c));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(p: &mut Tensor) -> Vec<(String, &mut Tensor)> {
        vec![("w".to_string(), p)]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let before = p.clone();
        let mut adam = AdamState::new(1e-3, 0.0);
        for _ in 0..5 {
            adam.update(named(&mut p), &[Tensor::zeros([3])]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.moments().0[0].shape(), &[3]);
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let lr = 1e-3;
        let g = Tensor::vector(vec![0.5, -2.0, 1e-2]);
        let mut p = Tensor::zeros([3]);
        let mut adam = AdamState::new(lr, 0.0);
        adam.update(named(&mut p), &[g.clone()]).unwrap();
        for (w, gk) in p.data().iter().zip(g.data()) {
            let expected = -lr * gk / (gk.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15);
            assert!((w.abs() - lr).abs() < 1e-8);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_parameters() {
        let mut p = Tensor::vector(vec![2.0]);
        let mut adam = AdamState::new(0.1, 0.5);
        adam.update(named(&mut p), &[Tensor::zeros([1])]).unwrap();
        assert!((p.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::vector(vec![0.1, 0.2, 0.3]);
            let mut adam = AdamState::new(1e-2, 1e-4);
            for s in 0..10 {
                let g = Tensor::from_fn([3], |i| ((s * 3 + i) as f64).sin());
                adam.update(named(&mut p), &[g]).unwrap();
            }
            p
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut adam = AdamState::new(1e-3, 0.0);
        let err = adam
            .update(
                vec![("enc.head.weight".to_string(), &mut p)],
                &[Tensor::vector(vec![f64::NAN])],
            )
            .unwrap_err();
        assert!(err.to_string().contains("enc.head.weight"));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].sq_norm().sqrt() - 1.0).abs() < 1e-15);
    }
}
