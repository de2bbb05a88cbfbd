//! Monte-Carlo estimate of the ELBO-weighted noise-prediction error
//! `M = E_{t, eps}[ w(t) * ||eps_theta(x_t, t, c) - eps||^2 ]`.
//!
//! `-M + const` is the log-likelihood surrogate used by the verifier.

use rand::Rng;

use super::kernel::NoiseDraw;
use super::network::NoisePredictor;
use super::schedule::NoiseSchedule;
use crate::error::{ensure_dim, CraftError, Result};
use crate::scalar::{dist_sq, Scalar};

/// Estimate of `M` from caller-supplied draws (common random numbers).
pub fn elbo_neg_mse_with_draws<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    model: &P,
    x0: &[F],
    cond: &[F],
    schedule: &NoiseSchedule<F>,
    draws: &[NoiseDraw<F>],
) -> Result<F> {
    if draws.is_empty() {
        return Err(CraftError::Contract("need at least one draw".into()));
    }
    let mut acc = F::zero();
    for d in draws {
        let x_t = schedule.forward_diffuse(x0, d.t, &d.eps)?;
        let pred = model.predict(&x_t, d.t, cond)?;
        ensure_dim(d.eps.len(), pred.len())?;
        acc = acc + schedule.weight_w(d.t)? * dist_sq(&pred, &d.eps);
    }
    let m = acc / F::from_usize_lossy(draws.len());
    if !m.is_finite() {
        return Err(CraftError::Numeric("non-finite ELBO estimate".into()));
    }
    Ok(m)
}

/// Estimate of `M` from `k` fresh draws of `(t, eps)`.
pub fn elbo_neg_mse<F: Scalar, P: NoisePredictor<F> + ?Sized, R: Rng + ?Sized>(
    model: &P,
    x0: &[F],
    cond: &[F],
    schedule: &NoiseSchedule<F>,
    k: usize,
    rng: &mut R,
) -> Result<F> {
    if k == 0 {
        return Err(CraftError::Contract("K must be at least 1".into()));
    }
    let draws = NoiseDraw::sample_many(schedule, x0.len(), k, rng);
    elbo_neg_mse_with_draws(model, x0, cond, schedule, &draws)
}

/// Predictor that knows the clean sample and returns the exact injected noise
/// `(x_t - sqrt(abar_t) x0) / sqrt(1 - abar_t)`. Used to check exact-fit paths.
#[derive(Debug, Clone)]
pub struct ExactNoiseOracle<F> {
    pub x0: Vec<F>,
    pub schedule: NoiseSchedule<F>,
}

impl<F: Scalar> NoisePredictor<F> for ExactNoiseOracle<F> {
    fn data_dim(&self) -> usize {
        self.x0.len()
    }

    fn predict(&self, x_t: &[F], t: usize, _cond: &[F]) -> Result<Vec<F>> {
        ensure_dim(self.x0.len(), x_t.len())?;
        let ab = self.schedule.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (F::one() - ab).sqrt());
        Ok(x_t.iter().zip(&self.x0).map(|(&x, &x0)| (x - a * x0) / b).collect())
    }
}
