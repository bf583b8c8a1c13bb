use serde::{Deserialize, Serialize};

use super::NumError;

/// AdamW optimizer state over a fixed list of parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWState {
    /// Zeroed moments shaped like `group_sizes`.
    pub fn new(group_sizes: &[usize], config: AdamWConfig) -> Result<Self, NumError> {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(config.lr > 0.0) {
            return Err(NumError::InvalidParameter(format!(
                "lr must be positive, got {}",
                config.lr
            )));
        }
        for (name, b) in [("beta1", config.beta1), ("beta2", config.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(NumError::InvalidParameter(format!(
                    "{name} must lie in (0, 1), got {b}"
                )));
            }
        }
        if config.eps < 0.0 || config.weight_decay < 0.0 {
            return Err(NumError::InvalidParameter(
                "eps and weight_decay must be nonnegative".into(),
            ));
        }
        Ok(Self {
            step: 0,
            first_moment: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
        })
    }
}

/// One AdamW update: decoupled weight decay, then the bias-corrected Adam step.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    state: &mut AdamWState,
) -> Result<(), NumError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(NumError::DimensionMismatch {
            op: "adamw groups",
            expected: state.first_moment.len(),
            actual: params.len().min(grads.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[i].len() {
            return Err(NumError::DimensionMismatch {
                op: "adamw group",
                expected: state.first_moment[i].len(),
                actual: p.len(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let decay = 1.0 - state.lr * state.weight_decay;

    for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[gi];
        let v = &mut state.second_moment[gi];
        for j in 0..p.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let denom = v_hat.sqrt() + state.eps;
            let update = if denom > 0.0 { m_hat / denom } else { 0.0 };
            p[j] = p[j] * decay - state.lr * update;
        }
    }
    Ok(())
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: u32,
    /// Relative improvement required to reset the stall counter.
    pub threshold: f64,
    pub min_lr: f64,
    pub best_loss: f64,
    pub stall_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: u32,
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 3,
            threshold: 1e-4,
            min_lr: 1e-6,
        }
    }
}

impl PlateauSchedule {
    pub fn new(lr: f64, config: PlateauConfig) -> Result<Self, NumError> {
        if !(config.factor > 0.0 && config.factor < 1.0) {
            return Err(NumError::InvalidParameter(format!(
                "plateau factor must lie in (0, 1), got {}",
                config.factor
            )));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(config.min_lr > 0.0) || config.patience == 0 || config.threshold < 0.0 {
            return Err(NumError::InvalidParameter(
                "plateau schedule needs min_lr > 0, patience ≥ 1, threshold ≥ 0".into(),
            ));
        }
        Ok(Self {
            lr: lr.max(config.min_lr),
            factor: config.factor,
            patience: config.patience,
            threshold: config.threshold,
            min_lr: config.min_lr,
            best_loss: f64::INFINITY,
            stall_count: 0,
        })
    }

    /// Feeds one epoch's validation loss; returns the (possibly reduced) lr.
    ///
    /// The lr is reduced once `patience` consecutive epochs fail to improve
    /// on the best loss by the relative threshold.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best_loss * (1.0 - self.threshold) || self.best_loss.is_infinite() {
            self.best_loss = loss;
            self.stall_count = 0;
        } else {
            self.stall_count += 1;
            if self.stall_count >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.stall_count = 0;
            }
        }
        self.lr
    }
}

pub fn plateau_step(mut sched: PlateauSchedule, epoch_val_loss: f64) -> PlateauSchedule {
    sched.step(epoch_val_loss);
    sched
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64, eps: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            eps,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut p = vec![0.3, -1.2];
        let mut st = AdamWState::new(&[2], cfg(0.1, 0.0, 1e-8)).unwrap();
        adamw_step(&mut [&mut p[..]], &[vec![0.0, 0.0]], &mut st).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_closed_form() {
        // bias-corrected m̂ = v̂ = 1 on the first step, so the update is exactly lr
        let mut p = [1.0];
        let mut st = AdamWState::new(&[1], cfg(0.1, 0.0, 0.0)).unwrap();
        adamw_step(&mut [&mut p[..]], &[vec![1.0]], &mut st).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = [2.0];
        let mut st = AdamWState::new(&[1], cfg(0.1, 0.01, 1e-8)).unwrap();
        adamw_step(&mut [&mut p[..]], &[vec![0.0]], &mut st).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn adamw_is_bit_reproducible() {
        let run = || {
            let mut p = vec![0.1, 0.2, 0.3];
            let mut st = AdamWState::new(&[3], AdamWConfig::default()).unwrap();
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| (x * 7.0 + k as f64).sin()).collect();
                adamw_step(&mut [&mut p[..]], &[g], &mut st).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = [0.0; 2];
        let mut st = AdamWState::new(&[2], AdamWConfig::default()).unwrap();
        assert!(adamw_step(&mut [&mut p[..]], &[vec![0.0; 3]], &mut st).is_err());
    }

    #[test]
    fn plateau_never_reduces_on_decreasing_losses() {
        let mut s = PlateauSchedule::new(1e-3, PlateauConfig::default()).unwrap();
        for k in 0..40 {
            s.step(1.0 / (k + 1) as f64);
        }
        assert_eq!(s.lr, 1e-3);
    }

    #[test]
    fn plateau_reduces_after_third_stall() {
        let mut s = PlateauSchedule::new(1e-3, PlateauConfig::default()).unwrap();
        let lrs: Vec<f64> = [1.0, 0.9, 0.91, 0.92, 0.93]
            .iter()
            .map(|l| s.step(*l))
            .collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 1e-3, 5e-4]);
    }

    #[test]
    fn plateau_respects_floor() {
        let mut s = PlateauSchedule::new(1e-6, PlateauConfig::default()).unwrap();
        s.step(1.0);
        for _ in 0..30 {
            assert_eq!(s.step(2.0), 1e-6);
        }
    }
}
