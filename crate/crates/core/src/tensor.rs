//! Dense row-major `f64` tensors.
//!
//! Only the handful of kernels needed by the tape live here. Broadcasting is
//! limited to a leading batch dimension: a tensor of shape `[n, ..rest]` can be
//! combined with one of shape `[..rest]`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows, cols]` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new([rows, cols], data)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    fn check_matmul(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// `self · other` for `[m, k] · [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_matmul(other, "matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let c_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (c, &b) in c_row.iter_mut().zip(b_row) {
                    *c += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other` for `[m, k]ᵀ · [m, n]`, without materialising the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        self.check_matmul(other, "matmul_tn")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (m2, n) = (other.shape[0], other.shape[1]);
        if m != m2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let g_row = &other.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let c_row = &mut out[p * n..(p + 1) * n];
                for (c, &g) in c_row.iter_mut().zip(g_row) {
                    *c += a * g;
                }
            }
        }
        Ok(Tensor {
            shape: vec![k, n],
            data: out,
        })
    }

    /// `self · otherᵀ` for `[m, n] · [k, n]ᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.check_matmul(other, "matmul_nt")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let (k, n2) = (other.shape[0], other.shape[1]);
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let g_row = &self.data[i * n..(i + 1) * n];
            for p in 0..k {
                let b_row = &other.data[p * n..(p + 1) * n];
                out[i * k + p] = g_row.iter().zip(b_row).map(|(g, b)| g * b).sum();
            }
        }
        Ok(Tensor {
            shape: vec![m, k],
            data: out,
        })
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || start >= end || end > self.shape[1] {
            return Err(Error::invalid(format!(
                "cannot slice columns {start}..{end} of shape {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Ok(Tensor {
            shape: vec![m, w],
            data: out,
        })
    }

    /// Horizontal concatenation of two 2-D tensors with equal row counts.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[0] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let m = self.shape[0];
        let (a, b) = (self.shape[1], other.shape[1]);
        let mut out = Vec::with_capacity(m * (a + b));
        for i in 0..m {
            out.extend_from_slice(&self.data[i * a..(i + 1) * a]);
            out.extend_from_slice(&other.data[i * b..(i + 1) * b]);
        }
        Ok(Tensor {
            shape: vec![m, a + b],
            data: out,
        })
    }
}

/// How two operands of an elementwise op line up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// The right operand repeats over the left's leading dimension.
    Rhs,
    /// The left operand repeats over the right's leading dimension.
    Lhs,
}

pub(crate) fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if !a.is_empty() && &a[1..] == b {
        Ok(Broadcast::Rhs)
    } else if !b.is_empty() && &b[1..] == a {
        Ok(Broadcast::Lhs)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Elementwise `f(a, b)` under the leading-dimension broadcast rule.
pub(crate) fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let kind = broadcast_kind(op, &a.shape, &b.shape)?;
    let out = match kind {
        Broadcast::Same => Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        },
        Broadcast::Rhs => {
            let inner = b.data.len();
            Tensor {
                shape: a.shape.clone(),
                data: a
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data[i % inner]))
                    .collect(),
            }
        }
        Broadcast::Lhs => {
            let inner = a.data.len();
            Tensor {
                shape: b.shape.clone(),
                data: b
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(a.data[i % inner], y))
                    .collect(),
            }
        }
    };
    Ok(out)
}

/// Sums a full-size gradient back down to the shape of a broadcast operand.
pub(crate) fn reduce_leading(full: &Tensor, target_shape: &[usize]) -> Tensor {
    let inner: usize = target_shape.iter().product();
    let mut data = vec![0.0; inner];
    for chunk in full.data.chunks(inner) {
        for (d, v) in data.iter_mut().zip(chunk) {
            *d += v;
        }
    }
    Tensor {
        shape: target_shape.to_vec(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = Tensor::zeros([m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out.data[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new([2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = Tensor::from_fn([2, 3], |_| rng.random_range(-1.0..1.0));
            let b = Tensor::from_fn([3, 1], |_| rng.random_range(-1.0..1.0));
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        // aᵀ·g
        let tn = a.matmul_tn(&g).unwrap();
        let at = Tensor::matrix(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        assert_eq!(tn, naive_matmul(&at, &g));
        // g·bᵀ
        let b = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let bt = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(g.matmul_nt(&b).unwrap(), naive_matmul(&g, &bt));
    }

    #[test]
    fn matmul_inner_dim_mismatch_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn broadcast_only_over_leading_dim() {
        assert_eq!(broadcast_kind("t", &[4, 3], &[3]).unwrap(), Broadcast::Rhs);
        assert_eq!(broadcast_kind("t", &[3], &[4, 3]).unwrap(), Broadcast::Lhs);
        assert_eq!(broadcast_kind("t", &[4], &[]).unwrap(), Broadcast::Rhs);
        assert!(broadcast_kind("t", &[4, 3], &[4]).is_err());
        assert!(broadcast_kind("t", &[4, 3], &[1, 3]).is_err());
    }
}
