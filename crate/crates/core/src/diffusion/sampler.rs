use serde::{Deserialize, Serialize};

use super::network::{Condition, NoisePredictor};
use super::schedule::NoiseSchedule;
use crate::error::{ensure_dim, CraftError, Result};
use crate::scalar::Scalar;
use crate::seed::rng_from_seed;

/// A generated datum `x_0^(i,j)` with the seed that reproduces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample<F> {
    pub x0: Vec<F>,
    pub seed: u64,
    pub prompt_id: u64,
    pub variant: u32,
}

/// Ancestral sampler. Starts from `x_T ~ N(0, I)` and applies
/// `x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z`,
/// with `z = 0` on the final step. Any component exceeding `bound` in
/// magnitude aborts with a numeric error.
pub fn sample<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    model: &P,
    cond: &Condition<F>,
    schedule: &NoiseSchedule<F>,
    seed: u64,
    bound: F,
) -> Result<Sample<F>> {
    let d = model.data_dim();
    let mut rng = rng_from_seed(seed);
    let mut x: Vec<F> = (0..d).map(|_| F::standard_normal(&mut rng)).collect();
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict(&x, t, &cond.embedding)?;
        ensure_dim(d, eps.len())?;
        let beta = schedule.beta(t)?;
        let inv_sqrt_alpha = F::one() / schedule.alpha(t)?.sqrt();
        let coeff = beta / (F::one() - schedule.alpha_bar(t)?).sqrt();
        let sigma = schedule.sigma(t)?;
        for (xi, ei) in x.iter_mut().zip(&eps) {
            let mean = (*xi - coeff * *ei) * inv_sqrt_alpha;
            *xi = if t > 1 {
                mean + sigma * F::standard_normal(&mut rng)
            } else {
                mean
            };
        }
        if x.iter().any(|v| !v.is_finite() || v.abs() > bound) {
            return Err(CraftError::Numeric(format!(
                "sampler diverged at t={t} (prompt {}, variant {})",
                cond.id, cond.variant
            )));
        }
    }
    Ok(Sample {
        x0: x,
        seed,
        prompt_id: cond.id,
        variant: cond.variant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::network::{Architecture, ModelParams};

    fn cond() -> Condition<f64> {
        Condition {
            id: 4,
            variant: 1,
            class: 0,
            embedding: vec![1.0, 0.0],
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let arch = Architecture {
            data_dim: 2,
            time_dim: 4,
            cond_dim: 2,
            hidden: [8, 8],
        };
        let p = ModelParams::init(arch, &mut rng_from_seed(1)).unwrap();
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let a = sample(&p, &cond(), &s, 77, 1e6).unwrap();
        let b = sample(&p, &cond(), &s, 77, 1e6).unwrap();
        assert_eq!(a, b);
        let c = sample(&p, &cond(), &s, 78, 1e6).unwrap();
        assert_ne!(a.x0, c.x0);
    }

    #[test]
    fn zero_model_single_step_rescales_noise() {
        let arch = Architecture {
            data_dim: 2,
            time_dim: 2,
            cond_dim: 2,
            hidden: [3, 3],
        };
        let p = ModelParams::zeros(arch).unwrap();
        let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let out = sample(&p, &cond(), &s, 5, 1e6).unwrap();
        let mut rng = rng_from_seed(5);
        let x1: Vec<f64> = (0..2).map(|_| f64::standard_normal(&mut rng)).collect();
        for (o, x) in out.x0.iter().zip(&x1) {
            assert!((o - x / 0.7f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let arch = Architecture {
            data_dim: 1,
            time_dim: 1,
            cond_dim: 2,
            hidden: [1, 1],
        };
        let mut p = ModelParams::<f64>::zeros(arch).unwrap();
        let n = p.values().len();
        // constant output of -1e3 pushes x outward every step
        let mut v = p.values().to_vec();
        v[n - 1] = -1e3;
        p = ModelParams::from_values(arch, v).unwrap();
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        assert!(matches!(sample(&p, &cond(), &s, 1, 100.0), Err(CraftError::Numeric(_))));
    }
}
