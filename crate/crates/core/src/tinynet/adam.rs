use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter buffer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Keeps the rows (of `row_width` entries) whose flag is set.
    pub fn retain_rows(&mut self, row_width: usize, keep: &[bool]) {
        let filter = |buf: &[f64]| -> Vec<f64> {
            buf.chunks(row_width)
                .zip(keep)
                .filter(|(_, k)| **k)
                .flat_map(|(row, _)| row.iter().copied())
                .collect()
        };
        self.m = filter(&self.m);
        self.v = filter(&self.v);
    }

    /// Appends zero-initialized rows.
    pub fn push_rows(&mut self, row_width: usize, rows: usize) {
        self.m.resize(self.m.len() + row_width * rows, 0.0);
        self.v.resize(self.v.len() + row_width * rows, 0.0);
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "adam buffers disagree: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            phase: "adam".into(),
            iteration: state.step as usize,
            detail: format!("gradient {i} of {} is {}", grads.len(), grads[i]),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, -4.0, 0.05];
        let mut s = AdamState::new(3);
        let lr = 1e-2;
        adam_step(&mut p, &g, &mut s, lr, &AdamHyper::default()).unwrap();
        let want = [1.0 - lr, -2.0 + lr, 0.5 - lr];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-6 * lr);
        }
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = vec![0.25, 3.0];
        let mut s = AdamState::new(2);
        for _ in 0..50 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &AdamHyper::default()).unwrap();
        }
        assert_eq!(p, vec![0.25, 3.0]);
    }

    #[test]
    fn reference_trace_on_quadratic_bowl() {
        // independent Adam written with running bias-correction products
        let curv = [1.0, 4.0, 0.25];
        let lr = 0.05;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut p_ref = [1.0f64, -1.5, 2.0];
        let mut m = [0.0f64; 3];
        let mut v = [0.0f64; 3];
        let mut b1t = 1.0;
        let mut b2t = 1.0;
        let mut p = p_ref.to_vec();
        let mut s = AdamState::new(3);
        for _ in 0..100 {
            b1t *= b1;
            b2t *= b2;
            for k in 0..3 {
                let g = curv[k] * p_ref[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                p_ref[k] -= lr * (m[k] / (1.0 - b1t)) / ((v[k] / (1.0 - b2t)).sqrt() + eps);
            }
            let g: Vec<f64> = p.iter().zip(curv).map(|(x, c)| c * x).collect();
            adam_step(&mut p, &g, &mut s, lr, &AdamHyper::default()).unwrap();
            for k in 0..3 {
                assert!((p[k] - p_ref[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        let err = adam_step(&mut p, &[f64::NAN], &mut s, 0.1, &AdamHyper::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn row_edits() {
        let mut s = AdamState::new(6);
        s.m = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        s.retain_rows(2, &[true, false, true]);
        assert_eq!(s.m, vec![1.0, 2.0, 5.0, 6.0]);
        s.push_rows(2, 1);
        assert_eq!(s.m.len(), 6);
        assert_eq!(s.v.len(), 6);
    }
}
