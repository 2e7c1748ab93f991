use serde::{Deserialize, Serialize};

use super::{NdiffError, Tensor};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one array per tracked parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step_count: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(
        &self,
        params: &mut [Tensor],
        grads: &[Vec<f64>],
        state: &mut AdamState,
    ) -> Result<(), NdiffError> {
        if !(self.lr > 0.0) {
            return Err(NdiffError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
        {
            return Err(NdiffError::InvalidArgument(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            let n = p.numel();
            if grads[i].len() != n || state.m[i].len() != n || state.v[i].len() != n {
                return Err(NdiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![grads[i].len()],
                });
            }
        }

        state.step_count += 1;
        let t = state.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::vector(vec![0.5, -2.0]).unwrap()];
        let before = params.clone();
        let mut state = AdamState::new(&params);
        Adam::default()
            .step(&mut params, &[vec![0.0, 0.0]], &mut state)
            .unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        for g in [3.0, -0.25, 1e-3] {
            let mut params = vec![Tensor::scalar(1.0)];
            let mut state = AdamState::new(&params);
            let adam = Adam::default();
            adam.step(&mut params, &[vec![g]], &mut state).unwrap();
            let delta = (params[0].data()[0] - 1.0).abs();
            let expected = adam.lr * g.abs() / (g.abs() + adam.eps);
            assert!((delta - expected).abs() < 1e-15, "g={g}: {delta} vs {expected}");
            assert!((delta - adam.lr).abs() < 1e-7);
        }
    }

    #[test]
    fn two_steps_on_square_match_hand_recurrence() {
        // f(x) = x², f'(x) = 2x, from x = 1 with lr = 0.1.
        let adam = Adam::with_lr(0.1);
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params);
        for _ in 0..2 {
            let g = 2.0 * params[0].data()[0];
            adam.step(&mut params, &[vec![g]], &mut state).unwrap();
        }

        let (b1, b2, eps, lr) = (0.9_f64, 0.999_f64, 1e-8_f64, 0.1_f64);
        let mut x = 1.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        for t in 1..=2 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((params[0].data()[0] - x).abs() < 1e-12);
        assert_eq!(state.step_count, 2);
        assert!(state.v[0][0] >= 0.0);
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_lr() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0]).unwrap()];
        let mut state = AdamState::new(&params);
        assert!(Adam::default()
            .step(&mut params, &[vec![1.0]], &mut state)
            .is_err());
        assert!(Adam::with_lr(0.0)
            .step(&mut params, &[vec![1.0, 1.0]], &mut state)
            .is_err());
    }
}
