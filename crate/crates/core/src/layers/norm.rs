//! Per-channel batch normalization and ReLU over feature rows.

use crate::error::{Error, Result};
use crate::layers::conv::Param;
use crate::matrix::Matrix;

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training mode normalizes with batch statistics and updates the running
    /// estimates (unbiased variance); eval mode uses the running estimates.
    pub fn forward(&mut self, x: &Matrix, train: bool) -> Result<Matrix> {
        let c = self.channels();
        if x.cols() != c {
            return Err(Error::shape("batchnorm (channels)", c, x.cols()));
        }
        let n = x.rows();
        let mut y = Matrix::zeros(n, c);
        if !train {
            let scale: Vec<f64> = (0..c)
                .map(|j| self.gamma.value[j] / (self.running_var[j] + self.eps).sqrt())
                .collect();
            for r in 0..n {
                let (src, dst) = (x.row(r), y.row_mut(r));
                for j in 0..c {
                    dst[j] = (src[j] - self.running_mean[j]) * scale[j] + self.beta.value[j];
                }
            }
            self.cache = None;
            return Ok(y);
        }
        if n == 0 {
            return Err(Error::EmptyBatch("batch statistics need at least one row"));
        }
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, c);
        for r in 0..n {
            let (src, xh) = (x.row(r), xhat.row_mut(r));
            for j in 0..c {
                xh[j] = (src[j] - mean[j]) * inv_std[j];
            }
        }
        for r in 0..n {
            let (xh, dst) = (xhat.row(r), y.row_mut(r));
            for j in 0..c {
                dst[j] = self.gamma.value[j] * xh[j] + self.beta.value[j];
            }
        }
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        for j in 0..c {
            self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
            self.running_var[j] =
                (1.0 - self.momentum) * self.running_var[j] + self.momentum * var[j] * unbias;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let cache = self.cache.take().ok_or_else(|| {
            Error::InvalidArgument(format!("backward on {:?} without a training forward", self.name))
        })?;
        let c = self.channels();
        let n = grad_out.rows();
        if grad_out.cols() != c || n != cache.xhat.rows() {
            return Err(Error::shape("batchnorm backward", c, grad_out.cols()));
        }
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for r in 0..n {
            let (dy, xh) = (grad_out.row(r), cache.xhat.row(r));
            for j in 0..c {
                sum_dy[j] += dy[j];
                sum_dy_xhat[j] += dy[j] * xh[j];
            }
        }
        for (g, s) in self.gamma.grad_mut().iter_mut().zip(&sum_dy_xhat) {
            *g += s;
        }
        for (g, s) in self.beta.grad_mut().iter_mut().zip(&sum_dy) {
            *g += s;
        }
        let nf = n as f64;
        let mut dx = Matrix::zeros(n, c);
        for r in 0..n {
            let (dy, xh, out) = (grad_out.row(r), cache.xhat.row(r), dx.row_mut(r));
            for j in 0..c {
                let k = self.gamma.value[j] * cache.inv_std[j] / nf;
                out[j] = k * (nf * dy[j] - sum_dy[j] - xh[j] * sum_dy_xhat[j]);
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    active: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, mut x: Matrix, train: bool) -> Matrix {
        let mut active = Vec::with_capacity(if train { x.as_slice().len() } else { 0 });
        for v in x.as_mut_slice() {
            let on = *v > 0.0;
            if !on {
                *v = 0.0;
            }
            if train {
                active.push(on);
            }
        }
        self.active = train.then_some(active);
        x
    }

    pub fn backward(&mut self, mut grad: Matrix) -> Result<Matrix> {
        let active = self
            .active
            .take()
            .ok_or_else(|| Error::InvalidArgument("relu backward without a training forward".into()))?;
        if active.len() != grad.as_slice().len() {
            return Err(Error::shape("relu backward", active.len(), grad.as_slice().len()));
        }
        for (g, on) in grad.as_mut_slice().iter_mut().zip(active) {
            if !on {
                *g = 0.0;
            }
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_identity() {
        let mut bn = BatchNorm::new("bn", 3);
        let x = Matrix::from_vec(2, 3, vec![1., -2., 3., 0.5, 0., -1.]).unwrap();
        let y = bn.forward(&x, false).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5 * 3.0);
    }

    #[test]
    fn train_on_empty_is_error() {
        let mut bn = BatchNorm::new("bn", 2);
        assert!(matches!(bn.forward(&Matrix::zeros(0, 2), true), Err(Error::EmptyBatch(_))));
        // eval mode on empty input is fine
        assert_eq!(bn.forward(&Matrix::zeros(0, 2), false).unwrap().rows(), 0);
    }

    #[test]
    fn train_normalizes_and_updates_running_stats() {
        let mut bn = BatchNorm::new("bn", 1);
        let x = Matrix::from_vec(4, 1, vec![1., 2., 3., 4.]).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let mean: f64 = y.as_slice().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased var 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn relu_negative_to_zero() {
        let mut r = Relu::default();
        let y = r.forward(Matrix::from_vec(1, 3, vec![-1., -0.5, -3.]).unwrap(), false);
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bn_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, c) = (7, 3);
        let x = Matrix::from_vec(n, c, (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let coef: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut bn = BatchNorm::new("bn", c);
        bn.gamma.value = vec![1.3, -0.7, 0.4];
        bn.beta.value = vec![0.1, 0.2, -0.3];
        let loss = |bn: &mut BatchNorm, x: &Matrix| -> f64 {
            let y = bn.forward(x, true).unwrap();
            y.as_slice().iter().zip(&coef).map(|(a, b)| a * b).sum()
        };
        loss(&mut bn, &x);
        let go = Matrix::from_vec(n, c, coef.clone()).unwrap();
        let dx = bn.backward(&go).unwrap();
        let h = 1e-5;
        for k in 0..n * c {
            let mut xp = x.clone();
            xp.as_mut_slice()[k] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[k] -= h;
            let fd = (loss(&mut bn.clone(), &xp) - loss(&mut bn.clone(), &xm)) / (2.0 * h);
            let an = dx.as_slice()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-4 || (fd - an).abs() < 1e-9, "k={k} fd={fd} an={an}");
        }
        for j in 0..c {
            let mut p = bn.clone();
            p.gamma.value[j] += h;
            let mut m = bn.clone();
            m.gamma.value[j] -= h;
            let fd = (loss(&mut p, &x) - loss(&mut m, &x)) / (2.0 * h);
            let an = bn.gamma.grad[j];
            assert!((fd - an).abs() / fd.abs().max(1e-8) < 1e-4, "gamma {j}: fd={fd} an={an}");
        }
    }
}
