use rand::Rng;

use crate::error::{ensure_dim, CraftError, Result};
use crate::scalar::Scalar;

/// Diffusion coefficients indexed by timestep `t = 1..=T`.
///
/// Stored zero-based internally; every public accessor takes the one-based
/// timestep and rejects anything outside `1..=T`. The reverse-process
/// variance uses the "small variance" choice `sigma_t^2 = beta_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<F> {
    beta: Vec<F>,
    alpha: Vec<F>,
    alpha_bar: Vec<F>,
    sigma: Vec<F>,
    sigma_sq: Vec<F>,
}

/// Linear schedule constructor, see [`NoiseSchedule::linear`].
pub fn build_schedule<F: Scalar>(steps: usize, beta_start: F, beta_end: F) -> Result<NoiseSchedule<F>> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

impl<F: Scalar> NoiseSchedule<F> {
    /// Linear interpolation of `beta` from `beta_start` to `beta_end` over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: F, beta_end: F) -> Result<Self> {
        if steps < 2 {
            return Err(CraftError::Domain(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_start > F::zero() && beta_start <= beta_end && beta_end < F::one()) {
            return Err(CraftError::Domain(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let span = beta_end - beta_start;
        let last = F::from_usize_lossy(steps - 1);
        let betas = (0..steps)
            .map(|i| beta_start + span * F::from_usize_lossy(i) / last)
            .collect();
        Self::from_betas(betas)
    }

    /// Arbitrary nondecreasing `beta` sequence in `(0, 1)`. Unlike
    /// [`NoiseSchedule::linear`] a single step is allowed, which is handy for
    /// closed-form checks.
    pub fn from_betas(beta: Vec<F>) -> Result<Self> {
        if beta.is_empty() {
            return Err(CraftError::Domain("empty beta sequence".into()));
        }
        if beta.iter().any(|&b| !(b > F::zero() && b < F::one())) {
            return Err(CraftError::Domain("every beta must lie in (0, 1)".into()));
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            return Err(CraftError::Domain("beta must be nondecreasing".into()));
        }
        let alpha: Vec<F> = beta.iter().map(|&b| F::one() - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(F::one(), |acc, &a| {
                *acc = *acc * a;
                Some(*acc)
            })
            .collect();
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        let sigma_sq = beta.clone();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
            sigma_sq,
        })
    }

    /// Number of timesteps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    #[inline]
    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.beta.len() {
            Err(CraftError::Timestep {
                t,
                max: self.beta.len(),
            })
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> Result<F> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<F> {
        Ok(self.alpha[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<F> {
        Ok(self.alpha_bar[self.idx(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<F> {
        Ok(self.sigma[self.idx(t)?])
    }

    /// Reverse-process variance `sigma_t^2`.
    pub fn sigma_sq(&self, t: usize) -> Result<F> {
        Ok(self.sigma_sq[self.idx(t)?])
    }

    pub fn betas(&self) -> &[F] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[F] {
        &self.alpha_bar
    }

    /// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
    pub fn forward_diffuse(&self, x0: &[F], t: usize, eps: &[F]) -> Result<Vec<F>> {
        ensure_dim(x0.len(), eps.len())?;
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (F::one() - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
    }

    /// Timestep weight `(1 / (2 sigma_t^2)) * ((1 - abar_t) / abar_t)`.
    pub fn weight_w(&self, t: usize) -> Result<F> {
        let i = self.idx(t)?;
        let s2 = self.sigma_sq[i];
        let ab = self.alpha_bar[i];
        Ok((F::one() / (F::lit(2.0) * s2)) * ((F::one() - ab) / ab))
    }

    /// Draws `t ~ Uniform{1..T}`.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(1..=self.steps())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_half_betas() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
        assert_eq!(s.weight_w(1).unwrap(), 1.0);
        assert_eq!(s.weight_w(2).unwrap(), 3.0);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(matches!(NoiseSchedule::linear(50, 1e-4, 1.0), Err(CraftError::Domain(_))));
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
    }

    #[test]
    fn default_schedule_invariants() {
        let s = NoiseSchedule::<f64>::linear(50, 1e-4, 0.02).unwrap();
        assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(50).unwrap() < s.alpha_bar(1).unwrap());
        assert!(s.alpha_bar(1).unwrap() < 1.0);
        let w: Vec<f64> = (1..=50).map(|t| s.weight_w(t).unwrap()).collect();
        assert!(w.iter().all(|&v| v > 0.0));
        assert!(w.windows(2).all(|p| p[1] > p[0]), "w(t) not increasing: {w:?}");
    }

    #[test]
    fn timestep_bounds_checked() {
        let s = NoiseSchedule::<f64>::linear(5, 0.1, 0.2).unwrap();
        assert!(matches!(s.weight_w(0), Err(CraftError::Timestep { .. })));
        assert!(s.weight_w(6).is_err());
        assert!(s.forward_diffuse(&[0.0], 6, &[0.0]).is_err());
        assert!(matches!(
            s.forward_diffuse(&[0.0, 1.0], 1, &[0.0]),
            Err(CraftError::Dimension { .. })
        ));
    }

    #[test]
    fn forward_diffuse_closed_forms() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        let out = s.forward_diffuse(&[0.0, 0.0], 1, &[1.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.5f64.sqrt(), 0.0]);
        let out = s.forward_diffuse(&[2.0, -4.0], 2, &[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![2.0 * 0.5, -4.0 * 0.5]);
    }

    #[test]
    fn f32_schedule_builds() {
        let s = NoiseSchedule::<f32>::linear(50, 1e-4, 0.02).unwrap();
        assert!(s.weight_w(25).unwrap() > 0.0);
    }
}
