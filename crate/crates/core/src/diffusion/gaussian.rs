//! Linear-Gaussian oracle.
//!
//! With a linear predictor `eps_hat = A x_t` every reverse transition is an
//! affine map plus Gaussian noise, so the model's marginal over `x_0` is a
//! zero-mean Gaussian whose covariance follows a closed-form recursion. That
//! gives an exact log-likelihood to hold the ELBO against, and an exact
//! pushforward covariance to check the sampler with.

use rand::Rng;

use super::kernel::NoiseDraw;
use super::network::{NoisePredictor, ParametricPredictor};
use super::schedule::NoiseSchedule;
use crate::error::{ensure_dim, CraftError, Result};
use crate::scalar::Scalar;

/// `eps_hat = A x_t`, independent of `t` and the condition. Parameters are the
/// entries of `A`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor<F> {
    dim: usize,
    a: Vec<F>,
}

impl<F: Scalar> LinearPredictor<F> {
    pub fn new(dim: usize, a: Vec<F>) -> Result<Self> {
        ensure_dim(dim * dim, a.len())?;
        Ok(Self { dim, a })
    }

    pub fn matrix(&self) -> &[F] {
        &self.a
    }
}

impl<F: Scalar> NoisePredictor<F> for LinearPredictor<F> {
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x_t: &[F], _t: usize, _cond: &[F]) -> Result<Vec<F>> {
        ensure_dim(self.dim, x_t.len())?;
        Ok(mat_vec(&self.a, x_t, self.dim))
    }
}

impl<F: Scalar> ParametricPredictor<F> for LinearPredictor<F> {
    fn params(&self) -> &[F] {
        &self.a
    }

    fn params_mut(&mut self) -> &mut [F] {
        &mut self.a
    }

    fn accumulate_sq_err_grad(
        &self,
        x_t: &[F],
        t: usize,
        cond: &[F],
        target: &[F],
        scale: F,
        grad: &mut [F],
    ) -> Result<F> {
        ensure_dim(self.a.len(), grad.len())?;
        let pred = self.predict(x_t, t, cond)?;
        let d = self.dim;
        let mut sq = F::zero();
        for i in 0..d {
            let r = pred[i] - target[i];
            sq = sq + r * r;
            let g = F::lit(2.0) * scale * r;
            for j in 0..d {
                grad[i * d + j] = grad[i * d + j] + g * x_t[j];
            }
        }
        Ok(sq)
    }
}

fn mat_vec<F: Scalar>(m: &[F], v: &[F], d: usize) -> Vec<F> {
    (0..d)
        .map(|i| (0..d).fold(F::zero(), |acc, j| acc + m[i * d + j] * v[j]))
        .collect()
}

fn mat_mul<F: Scalar>(a: &[F], b: &[F], d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] = out[i * d + j] + aik * b[k * d + j];
            }
        }
    }
    out
}

fn transpose<F: Scalar>(a: &[F], d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); d * d];
    for i in 0..d {
        for j in 0..d {
            out[j * d + i] = a[i * d + j];
        }
    }
    out
}

/// Covariance of `x_0` under the ancestral sampler with `eps_hat = A x_t`.
///
/// `final_noise = false` matches [`super::sampler::sample`] (no noise on the
/// last step); `true` gives the density model whose last transition keeps
/// variance `sigma_1^2`, which is the one the ELBO bounds.
pub fn pushforward_covariance<F: Scalar>(
    pred: &LinearPredictor<F>,
    schedule: &NoiseSchedule<F>,
    final_noise: bool,
) -> Result<Vec<F>> {
    let d = pred.dim;
    let mut cov = vec![F::zero(); d * d];
    for i in 0..d {
        cov[i * d + i] = F::one();
    }
    for t in (1..=schedule.steps()).rev() {
        let k = schedule.beta(t)? / (F::one() - schedule.alpha_bar(t)?).sqrt();
        let inv = F::one() / schedule.alpha(t)?.sqrt();
        let c: Vec<F> = (0..d * d)
            .map(|idx| {
                let id = if idx / d == idx % d { F::one() } else { F::zero() };
                (id - k * pred.a[idx]) * inv
            })
            .collect();
        cov = mat_mul(&mat_mul(&c, &cov, d), &transpose(&c, d), d);
        if t > 1 || final_noise {
            let s2 = schedule.sigma_sq(t)?;
            for i in 0..d {
                cov[i * d + i] = cov[i * d + i] + s2;
            }
        }
    }
    Ok(cov)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
fn cholesky<F: Scalar>(m: &[F], d: usize) -> Result<Vec<F>> {
    let mut l = vec![F::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let s = (0..j).fold(m[i * d + j], |acc, k| acc - l[i * d + k] * l[j * d + k]);
            if i == j {
                if s <= F::zero() {
                    return Err(CraftError::Numeric("covariance not positive definite".into()));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// Exact `log p_theta(x0)` of the density model (last-step variance `sigma_1^2`).
pub fn exact_log_likelihood<F: Scalar>(
    pred: &LinearPredictor<F>,
    schedule: &NoiseSchedule<F>,
    x0: &[F],
) -> Result<F> {
    let d = pred.dim;
    ensure_dim(d, x0.len())?;
    let l = cholesky(&pushforward_covariance(pred, schedule, true)?, d)?;
    // solve L y = x0, then log N = -0.5 (|y|^2 + log det + d log 2pi)
    let mut y = vec![F::zero(); d];
    for i in 0..d {
        let s = (0..i).fold(x0[i], |acc, k| acc - l[i * d + k] * y[k]);
        y[i] = s / l[i * d + i];
    }
    let quad = y.iter().fold(F::zero(), |acc, &v| acc + v * v);
    let log_det = (0..d).fold(F::zero(), |acc, i| acc + F::lit(2.0) * l[i * d + i].ln());
    let two_pi = F::lit(2.0) * F::PI();
    Ok(-F::lit(0.5) * (quad + log_det + F::from_usize_lossy(d) * two_pi.ln()))
}

/// Monte-Carlo ELBO with all constants kept.
#[derive(Debug, Clone, Copy)]
pub struct ElboEstimate<F> {
    pub mean: F,
    pub std_err: F,
    pub draws: usize,
}

/// Full variational bound
/// `-KL(q(x_T|x_0) || N(0,I)) - sum_{t>=2} E KL(q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t)) + E log p(x_0|x_1)`,
/// estimated by drawing `t ~ U{1..T}` and `x_t ~ q(x_t|x_0)` `k` times and
/// scaling the per-step term by `T`.
pub fn elbo_estimate<F: Scalar, R: Rng + ?Sized>(
    pred: &LinearPredictor<F>,
    schedule: &NoiseSchedule<F>,
    x0: &[F],
    k: usize,
    rng: &mut R,
) -> Result<ElboEstimate<F>> {
    if k < 2 {
        return Err(CraftError::Contract("need at least two draws for a standard error".into()));
    }
    let d = pred.dim;
    ensure_dim(d, x0.len())?;
    let half = F::lit(0.5);
    let steps = schedule.steps();
    let big_t = F::from_usize_lossy(steps);

    let ab_t = schedule.alpha_bar(steps)?;
    let prior_kl = x0.iter().fold(F::zero(), |acc, &x| {
        acc + half * ((F::one() - ab_t) + ab_t * x * x - F::one() - (F::one() - ab_t).ln())
    });

    let mut values = Vec::with_capacity(k);
    for _ in 0..k {
        let draw = NoiseDraw::sample(schedule, d, rng);
        let t = draw.t;
        let x_t = schedule.forward_diffuse(x0, t, &draw.eps)?;
        let eps_hat = pred.predict(&x_t, t, &[])?;
        let alpha = schedule.alpha(t)?;
        let ab = schedule.alpha_bar(t)?;
        let beta = schedule.beta(t)?;
        let s2 = schedule.sigma_sq(t)?;
        let coeff = beta / (F::one() - ab).sqrt();
        let mu_model: Vec<F> = x_t
            .iter()
            .zip(&eps_hat)
            .map(|(&x, &e)| (x - coeff * e) / alpha.sqrt())
            .collect();
        let step_term = if t == 1 {
            let two_pi_s2 = F::lit(2.0) * F::PI() * s2;
            x0.iter().zip(&mu_model).fold(F::zero(), |acc, (&x, &m)| {
                acc - half * ((x - m) * (x - m) / s2 + two_pi_s2.ln())
            })
        } else {
            let ab_prev = schedule.alpha_bar(t - 1)?;
            let post_var = (F::one() - ab_prev) * beta / (F::one() - ab);
            let c0 = ab_prev.sqrt() * beta / (F::one() - ab);
            let ct = alpha.sqrt() * (F::one() - ab_prev) / (F::one() - ab);
            let kl = (0..d).fold(F::zero(), |acc, i| {
                let mu_post = c0 * x0[i] + ct * x_t[i];
                let diff = mu_post - mu_model[i];
                acc + half * (post_var / s2 + diff * diff / s2 - F::one() + (s2 / post_var).ln())
            });
            -kl
        };
        values.push(-prior_kl + big_t * step_term);
    }
    let n = F::from_usize_lossy(k);
    let mean = values.iter().copied().sum::<F>() / n;
    let var = values.iter().fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean))
        / F::from_usize_lossy(k - 1);
    Ok(ElboEstimate {
        mean,
        std_err: (var / n).sqrt(),
        draws: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_matrix_covariance_is_isotropic() {
        let s = NoiseSchedule::<f64>::linear(10, 0.01, 0.2).unwrap();
        let p = LinearPredictor::new(2, vec![0.0; 4]).unwrap();
        let cov = pushforward_covariance(&p, &s, false).unwrap();
        assert!(cov[1].abs() < 1e-15 && cov[2].abs() < 1e-15);
        assert!((cov[0] - cov[3]).abs() < 1e-14);
    }

    #[test]
    fn linear_grad_matches_finite_difference() {
        let p = LinearPredictor::new(2, vec![0.3, -0.1, 0.2, 0.5]).unwrap();
        let x = [0.7, -1.2];
        let target = [0.1, 0.4];
        let mut g = vec![0.0; 4];
        p.accumulate_sq_err_grad(&x, 1, &[], &target, 1.0, &mut g).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let h = 1e-6;
            let mut plus = p.clone();
            plus.params_mut()[i] += h;
            let mut minus = p.clone();
            minus.params_mut()[i] -= h;
            let f = |q: &LinearPredictor<f64>| crate::scalar::dist_sq(&q.predict(&x, 1, &[]).unwrap(), &target);
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((fd - gi).abs() < 1e-8);
        }
    }
}
