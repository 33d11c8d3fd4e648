//! Adam optimizer and step-decay learning-rate schedule.

use crate::error::{Error, Result};

/// Learning-rate schedule and Adam moment settings.
///
/// Epochs are numbered from 1. The rate stays at `lr0` before
/// `decay_start_epoch` and from there on is multiplied by another factor of
/// `decay_factor` every `decay_every_epochs` epochs.
#[derive(Clone, Copy, Debug)]
pub struct OptimConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub decay_start_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    /// Schedule used for fusion-network training: decay 0.2 every 2 epochs
    /// starting at epoch 4.
    pub fn dlf_preset() -> Self {
        OptimConfig {
            lr0: 5e-4,
            decay_factor: 0.2,
            decay_every_epochs: 2,
            decay_start_epoch: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Schedule used for plain segmentation-network training: decay 0.2
    /// every 4 epochs starting at epoch 9.
    pub fn unet_preset() -> Self {
        OptimConfig {
            decay_every_epochs: 4,
            decay_start_epoch: 9,
            ..Self::dlf_preset()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "decay_factor {} must be in (0, 1)",
                self.decay_factor
            )));
        }
        if self.decay_every_epochs == 0 || self.decay_start_epoch == 0 {
            return Err(Error::Config(
                "decay_every_epochs and decay_start_epoch must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch index.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.decay_start_epoch {
            self.lr0
        } else {
            let steps = (epoch - self.decay_start_epoch) / self.decay_every_epochs + 1;
            self.lr0 * self.decay_factor.powi(steps as i32)
        }
    }
}

/// Adam first/second moments for a fixed set of parameter slots. Moments are
/// kept in f64 so the update arithmetic is identical on every platform; the
/// parameters themselves stay f32.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bias1: f64,
    bias2: f64,
}

impl AdamState {
    pub fn new(slot_sizes: &[usize], cfg: &OptimConfig) -> Self {
        AdamState {
            m: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            bias1: 1.0,
            bias2: 1.0,
        }
    }

    /// Advances the step counter; call once per optimizer step, before the
    /// per-slot updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
        self.bias1 = 1.0 - self.beta1.powi(self.t as i32);
        self.bias2 = 1.0 - self.beta2.powi(self.t as i32);
    }

    /// Applies `p -= lr * mhat / (sqrt(vhat) + eps)` to one parameter slot.
    pub fn update(&mut self, slot: usize, lr: f64, param: &mut [f32], grad: &[f32]) {
        assert_eq!(param.len(), grad.len());
        assert_eq!(param.len(), self.m[slot].len());
        assert!(self.t >= 1, "begin_step before update");
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..param.len() {
            let g = grad[i] as f64;
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / self.bias1;
            let vhat = v[i] / self.bias2;
            param[i] = (param[i] as f64 - lr * mhat / (vhat.sqrt() + self.eps)) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dlf_schedule_matches_closed_form() {
        let cfg = OptimConfig::dlf_preset();
        for epoch in 1..=10usize {
            let want = if epoch < 4 {
                5e-4
            } else {
                5e-4 * 0.2f64.powi(((epoch - 4) / 2 + 1) as i32)
            };
            assert_eq!(cfg.lr_at_epoch(epoch), want, "epoch {epoch}");
        }
        // nominal decimal values, up to float rounding
        let nominal = [
            5e-4, 5e-4, 5e-4, 1e-4, 1e-4, 2e-5, 2e-5, 4e-6, 4e-6, 8e-7,
        ];
        for (i, &w) in nominal.iter().enumerate() {
            let got = cfg.lr_at_epoch(i + 1);
            assert!((got - w).abs() <= 1e-12 * w, "epoch {}: {got} vs {w}", i + 1);
        }
    }

    #[test]
    fn unet_schedule_matches_closed_form() {
        let cfg = OptimConfig::unet_preset();
        for epoch in 1..=20usize {
            let want = if epoch < 9 {
                5e-4
            } else {
                5e-4 * 0.2f64.powi(((epoch - 9) / 4 + 1) as i32)
            };
            assert_eq!(cfg.lr_at_epoch(epoch), want, "epoch {epoch}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_over_one_plus_eps() {
        let cfg = OptimConfig::dlf_preset();
        let mut st = AdamState::new(&[1], &cfg);
        let mut p = vec![0.0f32];
        st.begin_step();
        st.update(0, 0.1, &mut p, &[1.0]);
        // mhat = vhat = 1 exactly after bias correction, so the step is
        // -lr / (1 + eps)
        let want = (-(0.1 / (1.0 + 1e-8))) as f32;
        assert_eq!(p[0], want);
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let cfg = OptimConfig::dlf_preset();
        let mut st = AdamState::new(&[3], &cfg);
        let mut p = vec![1.5f32, -2.0, 0.25];
        let before = p.clone();
        st.begin_step();
        st.update(0, 0.1, &mut p, &[0.0, 0.0, 0.0]);
        assert_eq!(p, before);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = OptimConfig::dlf_preset();
        cfg.decay_factor = 1.0;
        assert!(cfg.validate().is_err());
        cfg = OptimConfig::dlf_preset();
        cfg.lr0 = 0.0;
        assert!(cfg.validate().is_err());
        assert!(OptimConfig::dlf_preset().validate().is_ok());
        assert!(OptimConfig::unet_preset().validate().is_ok());
    }
}
