use crate::error::{ensure_dim, CraftError, Result};
use crate::scalar::Scalar;

/// AdamW hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First/second moment accumulators mirroring the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![F::zero(); num_params],
            v: vec![F::zero(); num_params],
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction:
///
/// ```text
/// m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g^2
/// theta <- theta (1 - lr wd) - lr * (m / (1 - b1^k)) / (sqrt(v / (1 - b2^k)) + eps)
/// ```
pub fn adamw_step<F: Scalar>(
    state: &mut OptimizerState<F>,
    params: &mut [F],
    grad: &[F],
    cfg: &AdamWConfig,
) -> Result<()> {
    ensure_dim(params.len(), grad.len())?;
    ensure_dim(params.len(), state.m.len())?;
    ensure_dim(params.len(), state.v.len())?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(CraftError::Numeric(format!(
            "non-finite gradient entry {i} at optimizer step {}",
            state.step + 1
        )));
    }
    state.step += 1;
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let lr = F::lit(cfg.learning_rate);
    let eps = F::lit(cfg.eps);
    let k = state.step as i32;
    let bc1 = F::one() - b1.powi(k);
    let bc2 = F::one() - b2.powi(k);
    let shrink = F::one() - lr * F::lit(cfg.weight_decay);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (F::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (F::one() - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * shrink - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        let mut st = OptimizerState::new(3);
        for _ in 0..5 {
            adamw_step(&mut st, &mut p, &[0.0; 3], &cfg).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn decay_only_shrinks_multiplicatively() {
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = vec![2.0, -4.0];
        let mut st = OptimizerState::new(2);
        adamw_step(&mut st, &mut p, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(p, vec![2.0 * 0.95, -4.0 * 0.95]);
    }

    #[test]
    fn first_step_hand_computed() {
        let cfg = AdamWConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let g = [0.5f64, -3.0, 1e-3];
        let mut p = vec![1.0, 1.0, 1.0];
        let mut st = OptimizerState::new(3);
        adamw_step(&mut st, &mut p, &g, &cfg).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            // m_hat = g, v_hat = g^2  =>  step = lr * g / (|g| + eps)
            let m_hat = ((1.0 - 0.9) * gi) / (1.0 - 0.9);
            let v_hat = ((1.0 - 0.99) * gi * gi) / (1.0 - 0.99);
            let expected = 1.0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
            assert!((pi - (1.0 - 0.01 * gi.signum())).abs() < 1e-6);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn nonfinite_gradient_aborts() {
        let mut p = vec![0.0; 2];
        let mut st = OptimizerState::new(2);
        let err = adamw_step(&mut st, &mut p, &[0.0, f64::NAN], &AdamWConfig::default());
        assert!(matches!(err, Err(CraftError::Numeric(_))));
        assert_eq!(st.step, 0);
    }
}
