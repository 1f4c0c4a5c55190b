use serde::{Deserialize, Serialize};

/// Exponential decay from `lr_initial` to `lr_final` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_initial: f64,
    pub lr_final: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(lr_initial: f64, lr_final: f64, total_steps: usize) -> Self {
        Self {
            lr_initial,
            lr_final,
            total_steps,
        }
    }

    /// 8e-4 decaying to 1.6e-6.
    pub fn standard(total_steps: usize) -> Self {
        Self::new(8e-4, 1.6e-6, total_steps)
    }

    pub fn is_valid(&self) -> bool {
        self.lr_final > 0.0 && self.lr_initial >= self.lr_final
    }

    /// Ratio `lr_at(step) / lr_initial`.
    pub fn decay_factor(&self, step: usize) -> f64 {
        self.lr_at(step) / self.lr_initial
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr_initial;
        }
        if step == 0 {
            return self.lr_initial;
        }
        if step >= self.total_steps {
            if step > self.total_steps {
                log::warn!(
                    "learning-rate step {step} beyond schedule length {}; clamping",
                    self.total_steps
                );
            }
            return self.lr_final;
        }
        let frac = step as f64 / self.total_steps as f64;
        self.lr_initial * (self.lr_final / self.lr_initial).powf(frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = LrSchedule::standard(1000);
        assert_eq!(s.lr_at(0), 8e-4);
        assert_eq!(s.lr_at(1000), 1.6e-6);
        let mid = s.lr_at(500);
        assert!((mid - (8e-4f64 * 1.6e-6).sqrt()).abs() < 1e-12);
        assert!((mid - 3.5777e-5).abs() < 1e-9);
        assert_eq!(s.lr_at(5000), 1.6e-6);
    }

    #[test]
    fn monotone_non_increasing() {
        let s = LrSchedule::standard(777);
        let mut prev = f64::INFINITY;
        for step in 0..=800 {
            let lr = s.lr_at(step);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
