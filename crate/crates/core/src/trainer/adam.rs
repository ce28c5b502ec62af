use super::TrainError;
use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments of one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Rebuilds row-structured moments (`width` values per row): output row
    /// `i` copies old row `sources[i]`, or starts at zero when `None`.
    pub fn remap_rows(&mut self, width: usize, sources: &[Option<usize>]) {
        let pick = |xs: &[f64]| {
            let mut out = Vec::with_capacity(sources.len() * width);
            for src in sources {
                match src {
                    Some(r) => out.extend_from_slice(&xs[r * width..(r + 1) * width]),
                    None => out.extend(std::iter::repeat_n(0.0, width)),
                }
            }
            out
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching anything.
pub fn step_adam(params: &mut [f64], grads: &[f64], state: &mut AdamMoments, lr: f64) -> Result<(), TrainError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(TrainError::Shape(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite { step: state.t });
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powf(state.t as f64);
    let c2 = 1.0 - BETA2.powf(state.t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.3, -1.2];
        let mut s = AdamMoments {
            m: vec![0.5, -0.5],
            v: vec![0.1, 0.2],
            t: 3,
        };
        step_adam(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(s.m, vec![0.45, -0.45]);
        assert!((s.v[0] - 0.0999).abs() < 1e-15);
        let mut q = vec![0.3, -1.2];
        step_adam(&mut q, &[0.0, 0.0], &mut AdamMoments::zeros(2), 0.1).unwrap();
        assert_eq!(q, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = vec![1.0, 1.0, 1.0];
        step_adam(&mut p, &[3.0, -0.02, 1e3], &mut AdamMoments::zeros(3), 0.01).unwrap();
        for (x, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - (1.0 + 0.01 * s)).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![1.0];
        let mut s = AdamMoments::zeros(1);
        assert!(matches!(step_adam(&mut p, &[f64::NAN], &mut s, 0.1), Err(TrainError::NonFinite { .. })));
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn trajectories_repeat() {
        let run = || {
            let mut p = vec![0.5, -0.5];
            let mut s = AdamMoments::zeros(2);
            for k in 0..50 {
                let g = [p[0] * 2.0 + k as f64 * 0.01, (p[1] - 0.3).sin()];
                step_adam(&mut p, &g, &mut s, 0.05).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn row_bookkeeping() {
        let mut s = AdamMoments {
            m: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            v: vec![0.0; 6],
            t: 1,
        };
        s.remap_rows(2, &[Some(2), None, Some(0)]);
        assert_eq!(s.m, vec![5.0, 6.0, 0.0, 0.0, 1.0, 2.0]);
    }
}
