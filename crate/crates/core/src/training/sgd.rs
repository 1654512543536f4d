//! Momentum SGD with learning-rate schedules and mask re-application.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::conv::Param;
use crate::layers::network::Network;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Poly,
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub poly_power: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: LrSchedule::Poly,
            poly_power: 0.9,
            iterations: 2000,
            batch_size: 2,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate at `iter` (0-based) of `iterations`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let frac = if self.iterations == 0 {
            0.0
        } else {
            (iter as f64 / self.iterations as f64).min(1.0)
        };
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Poly => self.lr * (1.0 - frac).powf(self.poly_power),
            LrSchedule::Cosine => self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        }
    }
}

/// `v ← μv + g + λw; w ← w − ηv`, then masked entries are forced to zero.
pub fn sgd_update(p: &mut Param, mask: Option<&[bool]>, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if p.grad.len() != p.value.len() {
        // no gradient accumulated: only decay applies
        if weight_decay == 0.0 && p.velocity.iter().all(|&v| v == 0.0) {
            return Ok(());
        }
        p.grad_mut();
    }
    if p.velocity.len() != p.value.len() {
        p.velocity = vec![0.0; p.value.len()];
    }
    let Param { value, grad, velocity } = p;
    for i in 0..value.len() {
        if mask.is_some_and(|m| !m[i]) {
            value[i] = 0.0;
            velocity[i] = 0.0;
            continue;
        }
        let v = momentum * velocity[i] + grad[i] + weight_decay * value[i];
        let w = value[i] - lr * v;
        if !w.is_finite() || !v.is_finite() {
            return Err(Error::NonFinite(format!("SGD update produced {w} at index {i}")));
        }
        velocity[i] = v;
        value[i] = w;
    }
    Ok(())
}

/// One optimizer step over every parameter of `net`.
pub fn sgd_step(net: &mut Network, cfg: &TrainerConfig, iter: usize) -> Result<()> {
    let lr = cfg.lr_at(iter);
    let mut res = Ok(());
    net.visit_params(&mut |name, p, mask| {
        if res.is_ok() {
            res = sgd_update(p, mask, lr, cfg.momentum, cfg.weight_decay)
                .map_err(|e| Error::NonFinite(format!("{name}: {e}")));
        }
    });
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_momentum_is_noop() {
        let mut p = Param::new(vec![1.5, -2.0]);
        p.grad_mut();
        sgd_update(&mut p, None, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.value, vec![1.5, -2.0]);
    }

    #[test]
    fn scalar_step() {
        let mut p = Param::new(vec![1.0]);
        p.grad_mut()[0] = 1.0;
        sgd_update(&mut p, None, 0.1, 0.0, 0.0).unwrap();
        assert!((p.value[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = (w − 3)²
        let mut p = Param::new(vec![-5.0]);
        for _ in 0..1000 {
            p.zero_grad();
            p.grad_mut()[0] = 2.0 * (p.value[0] - 3.0);
            sgd_update(&mut p, None, 0.05, 0.9, 0.0).unwrap();
        }
        assert!((p.value[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn masked_entries_stay_zero() {
        let mut p = Param::new(vec![0.0, 1.0, 0.0]);
        p.grad_mut().copy_from_slice(&[5.0, 1.0, -3.0]);
        let mask = [false, true, false];
        sgd_update(&mut p, Some(&mask), 0.1, 0.9, 1e-4).unwrap();
        assert_eq!(p.value[0], 0.0);
        assert_eq!(p.value[2], 0.0);
        assert!(p.value[1] < 1.0);
    }

    #[test]
    fn non_finite_update_is_error() {
        let mut p = Param::new(vec![1.0]);
        p.grad_mut()[0] = f64::INFINITY;
        assert!(matches!(sgd_update(&mut p, None, 0.1, 0.0, 0.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn schedules() {
        let mut c = TrainerConfig { iterations: 100, ..Default::default() };
        assert_eq!(c.lr_at(0), 0.1);
        assert!(c.lr_at(100).abs() < 1e-15);
        c.schedule = LrSchedule::Cosine;
        assert!((c.lr_at(50) - 0.05).abs() < 1e-12);
        c.schedule = LrSchedule::Constant;
        assert_eq!(c.lr_at(77), 0.1);
    }
}
