//! Mini-batch SGD with momentum, weight decay and per-group rate multipliers,
//! plus the annealing schedule shared by every training stage.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::config::AdaptationConfig;
use crate::error::{contract, Result};

/// `η0 · (1 + 10p)^(-0.75)` for training progress `p ∈ [0, 1]`.
pub fn lr_schedule(base_lr: f64, progress: f64) -> Result<f64> {
    if !(base_lr > 0.0) || !base_lr.is_finite() {
        return Err(contract(format!("base learning rate must be positive, got {base_lr}")));
    }
    if !(0.0..=1.0).contains(&progress) {
        return Err(contract(format!("training progress must lie in [0, 1], got {progress}")));
    }
    Ok(base_lr * (1.0 + 10.0 * progress).powf(-0.75))
}

pub struct ParamGroup {
    pub vars: Vec<Var>,
    pub lr_mult: f64,
}

impl ParamGroup {
    pub fn new(vars: Vec<Var>, lr_mult: f64) -> Self {
        Self { vars, lr_mult }
    }
}

pub struct Sgd {
    groups: Vec<ParamGroup>,
    velocity: Vec<Vec<Option<Tensor>>>,
    momentum: f64,
    weight_decay: f64,
    nesterov: bool,
}

impl Sgd {
    pub fn new(groups: Vec<ParamGroup>, momentum: f64, weight_decay: f64, nesterov: bool) -> Self {
        let velocity = groups.iter().map(|g| vec![None; g.vars.len()]).collect();
        Self { groups, velocity, momentum, weight_decay, nesterov }
    }

    pub fn from_config(groups: Vec<ParamGroup>, config: &AdaptationConfig) -> Self {
        Self::new(groups, config.momentum, config.weight_decay, config.nesterov)
    }

    /// One update at rate `lr` (times each group's multiplier). Parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for (group, velocities) in self.groups.iter().zip(self.velocity.iter_mut()) {
            let rate = lr * group.lr_mult;
            for (var, vel) in group.vars.iter().zip(velocities.iter_mut()) {
                let Some(grad) = grads.get(var.as_tensor()) else { continue };
                // detached, or the velocity would chain every past step's graph
                let w = var.as_tensor().detach();
                let mut g = grad.detach();
                if self.weight_decay != 0.0 {
                    g = (g + (&w * self.weight_decay)?)?;
                }
                if self.momentum != 0.0 {
                    let v = match vel.take() {
                        Some(prev) => ((prev * self.momentum)? + &g)?,
                        None => g.clone(),
                    };
                    g = if self.nesterov { (g + (&v * self.momentum)?)? } else { v.clone() };
                    *vel = Some(v);
                }
                let updated = (w - (g * rate)?)?;
                var.set(&updated)?;
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().flat_map(|g| &g.vars).map(|v| v.elem_count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn schedule_values() {
        assert!((lr_schedule(0.01, 0.0).unwrap() - 0.01).abs() < 1e-15);
        let end = lr_schedule(1.0, 1.0).unwrap();
        assert!((end - 11f64.powf(-0.75)).abs() < 1e-12);
        assert!((end - 0.16556).abs() < 1e-5);
    }

    #[test]
    fn schedule_rejects_out_of_range_progress() {
        assert!(lr_schedule(0.01, -0.1).is_err());
        assert!(lr_schedule(0.01, 1.01).is_err());
        assert!(lr_schedule(0.0, 0.5).is_err());
    }

    #[test]
    fn schedule_is_positive_and_strictly_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let lr = lr_schedule(0.01, i as f64 / 100.0).unwrap();
            assert!(lr > 0.0 && lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn plain_sgd_step_matches_hand_update() {
        let dev = Device::Cpu;
        let w = Var::new(&[1.0f64, -2.0], &dev).unwrap();
        let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Sgd::new(vec![ParamGroup::new(vec![w.clone()], 1.0)], 0.0, 0.0, false);
        opt.step(&grads, 0.1).unwrap();
        // grad = 2w
        assert_eq!(w.as_tensor().to_vec1::<f64>().unwrap(), vec![0.8, -1.6]);
    }

    #[test]
    fn momentum_and_decay() {
        let dev = Device::Cpu;
        let w = Var::new(&[1.0f64], &dev).unwrap();
        let mut opt = Sgd::new(vec![ParamGroup::new(vec![w.clone()], 0.5)], 0.9, 0.1, false);
        for _ in 0..2 {
            let grads = w.as_tensor().sum_all().unwrap().backward().unwrap();
            opt.step(&grads, 1.0).unwrap();
        }
        // step1: g = 1 + 0.1 = 1.1, v = 1.1, w = 1 - 0.5*1.1 = 0.45
        // step2: g = 1 + 0.045 = 1.045, v = 0.99 + 1.045 = 2.035, w = 0.45 - 1.0175
        let got = w.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((got - (0.45 - 1.0175)).abs() < 1e-12, "{got}");
    }
}
