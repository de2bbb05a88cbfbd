//! Weighted noise-prediction loss and its exact gradient.

use rand::Rng;

use super::network::ParametricPredictor;
use super::schedule::NoiseSchedule;
use crate::error::{ensure_dim, CraftError, Result};
use crate::scalar::Scalar;
use crate::seed::rng_from_seed;

/// One Monte-Carlo draw `(t, eps)` used to noise a clean sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<F> {
    pub t: usize,
    pub eps: Vec<F>,
}

impl<F: Scalar> NoiseDraw<F> {
    pub fn sample<R: Rng + ?Sized>(schedule: &NoiseSchedule<F>, dim: usize, rng: &mut R) -> Self {
        let t = schedule.sample_timestep(rng);
        let eps = (0..dim).map(|_| F::standard_normal(rng)).collect();
        Self { t, eps }
    }

    /// Draws `k` independent `(t, eps)` pairs from one stream.
    pub fn sample_many<R: Rng + ?Sized>(
        schedule: &NoiseSchedule<F>,
        dim: usize,
        k: usize,
        rng: &mut R,
    ) -> Vec<Self> {
        (0..k).map(|_| Self::sample(schedule, dim, rng)).collect()
    }
}

/// Per-timestep factor multiplying the squared error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestepWeighting {
    /// Plain MSE, the practical training loss.
    Uniform,
    /// ELBO weight `w(t)`.
    Elbo,
}

impl TimestepWeighting {
    pub fn factor<F: Scalar>(self, schedule: &NoiseSchedule<F>, t: usize) -> Result<F> {
        match self {
            TimestepWeighting::Uniform => Ok(F::one()),
            TimestepWeighting::Elbo => schedule.weight_w(t),
        }
    }
}

/// Training example with a per-sample weight and its own noise stream.
#[derive(Debug, Clone, Copy)]
pub struct WeightedExample<'a, F> {
    pub x0: &'a [F],
    pub cond: &'a [F],
    pub weight: F,
    pub noise_seed: u64,
}

/// Example with an explicit draw, used where draws must be shared.
#[derive(Debug, Clone, Copy)]
pub struct DrawnExample<'a, F> {
    pub x0: &'a [F],
    pub cond: &'a [F],
    pub weight: F,
    pub draw: &'a NoiseDraw<F>,
}

/// Squared error `||eps_theta(x_t, t, c) - eps||^2` for a single draw.
pub fn draw_sq_err<F: Scalar, P: ParametricPredictor<F>>(
    model: &P,
    schedule: &NoiseSchedule<F>,
    x0: &[F],
    cond: &[F],
    draw: &NoiseDraw<F>,
) -> Result<F> {
    let x_t = schedule.forward_diffuse(x0, draw.t, &draw.eps)?;
    let pred = model.predict(&x_t, draw.t, cond)?;
    ensure_dim(draw.eps.len(), pred.len())?;
    Ok(crate::scalar::dist_sq(&pred, &draw.eps))
}

/// `(1/normalizer) * sum_k weight_k * factor(t_k) * ||eps_hat_k - eps_k||^2`
/// together with its exact parameter gradient.
///
/// Examples with zero weight are skipped but still count toward the
/// normalizer.
pub fn drawn_loss_and_grad<F: Scalar, P: ParametricPredictor<F>>(
    model: &P,
    batch: &[DrawnExample<'_, F>],
    schedule: &NoiseSchedule<F>,
    weighting: TimestepWeighting,
    normalizer: usize,
) -> Result<(F, Vec<F>)> {
    if normalizer == 0 {
        return Err(CraftError::Contract("loss normalizer must be positive".into()));
    }
    let mut grad = vec![F::zero(); model.num_params()];
    let mut total = F::zero();
    let norm = F::from_usize_lossy(normalizer);
    for ex in batch {
        if !ex.weight.is_finite() {
            return Err(CraftError::Contract("non-finite sample weight".into()));
        }
        if ex.weight == F::zero() {
            continue;
        }
        let coeff = ex.weight * weighting.factor(schedule, ex.draw.t)? / norm;
        let x_t = schedule.forward_diffuse(ex.x0, ex.draw.t, &ex.draw.eps)?;
        let sq = model.accumulate_sq_err_grad(&x_t, ex.draw.t, ex.cond, &ex.draw.eps, coeff, &mut grad)?;
        total = total + coeff * sq;
    }
    if !total.is_finite() || !crate::scalar::all_finite(&grad) {
        return Err(CraftError::Numeric("non-finite loss or gradient".into()));
    }
    Ok((total, grad))
}

/// Weighted Monte-Carlo noise-prediction loss, averaged over the batch.
///
/// Each example draws `t ~ U{1..T}` and `eps ~ N(0, I)` from the stream keyed
/// by its `noise_seed`, so the result does not depend on batch order.
pub fn loss_and_grad<F: Scalar, P: ParametricPredictor<F>>(
    model: &P,
    batch: &[WeightedExample<'_, F>],
    schedule: &NoiseSchedule<F>,
) -> Result<(F, Vec<F>)> {
    loss_and_grad_normalized(model, batch, schedule, TimestepWeighting::Uniform, batch.len())
}

/// [`loss_and_grad`] with explicit timestep weighting and normalizer.
pub fn loss_and_grad_normalized<F: Scalar, P: ParametricPredictor<F>>(
    model: &P,
    batch: &[WeightedExample<'_, F>],
    schedule: &NoiseSchedule<F>,
    weighting: TimestepWeighting,
    normalizer: usize,
) -> Result<(F, Vec<F>)> {
    if batch.is_empty() {
        return Err(CraftError::Contract("empty minibatch".into()));
    }
    let draws: Vec<NoiseDraw<F>> = batch
        .iter()
        .map(|ex| NoiseDraw::sample(schedule, ex.x0.len(), &mut rng_from_seed(ex.noise_seed)))
        .collect();
    let drawn: Vec<DrawnExample<'_, F>> = batch
        .iter()
        .zip(&draws)
        .map(|(ex, draw)| DrawnExample {
            x0: ex.x0,
            cond: ex.cond,
            weight: ex.weight,
            draw,
        })
        .collect();
    drawn_loss_and_grad(model, &drawn, schedule, weighting, normalizer)
}
