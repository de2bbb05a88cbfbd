//! Synthetic reward judges, pool-level scale mapping and the composite reward.
//!
//! Three deterministic stand-ins for the learned reward models:
//!
//! * `r_h = -||x0 - mu_c||^2` rewards alignment with the condition's target.
//! * `r_a = -lambda ||x0||^4 / (1 + ||x0||^2)` rewards compactness. Away
//!   from the origin it pulls against `r_h`.
//! * `r_p = 0.7 r_h + 0.3 r_a + amp * h(x0, c)`: a correlated third judge
//!   with bounded hash noise `h in [-1, 1)`.
//!
//! Rewards are always computed against the original prompt (variant 0).

use serde::{Deserialize, Serialize};

use crate::diffusion::Condition;
use crate::error::{ensure_dim, CraftError, Result};
use crate::scalar::{dist_sq, norm_sq, Scalar};
use crate::seed::mix64;

pub const P_MIX_H: f64 = 0.7;
pub const P_MIX_A: f64 = 0.3;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardId {
    H,
    P,
    A,
}

impl RewardId {
    pub const ALL: [RewardId; 3] = [RewardId::H, RewardId::P, RewardId::A];

    pub fn index(self) -> usize {
        match self {
            RewardId::H => 0,
            RewardId::P => 1,
            RewardId::A => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RewardId::H => "h",
            RewardId::P => "p",
            RewardId::A => "a",
        }
    }
}

/// Raw, unscaled scores of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardVector<F> {
    pub h: F,
    pub p: F,
    pub a: F,
}

impl<F: Scalar> RewardVector<F> {
    pub fn as_array(&self) -> [F; 3] {
        [self.h, self.p, self.a]
    }

    pub fn from_array([h, p, a]: [F; 3]) -> Self {
        Self { h, p, a }
    }

    pub fn get(&self, id: RewardId) -> F {
        self.as_array()[id.index()]
    }
}

/// Parameters of the synthetic judges.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSuite<F> {
    pub targets: Vec<Vec<F>>,
    pub lambda: F,
    pub noise_amp: F,
}

/// Deterministic hash of `(x0, class)` mapped to `[-1, 1)`.
pub fn hash_noise<F: Scalar>(x0: &[F], class: usize) -> f64 {
    let mut h = mix64(0x5eed_0fc0_ffee ^ class as u64);
    for &x in x0 {
        h = mix64(h ^ x.as_f64().to_bits());
    }
    let unit = (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    2.0 * unit - 1.0
}

impl<F: Scalar> RewardSuite<F> {
    pub fn new(targets: Vec<Vec<F>>, lambda: F, noise_amp: F) -> Result<Self> {
        if targets.is_empty() {
            return Err(CraftError::Domain("reward suite needs at least one target".into()));
        }
        let d = targets[0].len();
        for t in &targets {
            ensure_dim(d, t.len())?;
        }
        if lambda < F::zero() || noise_amp < F::zero() {
            return Err(CraftError::Domain("lambda and noise amplitude must be nonnegative".into()));
        }
        Ok(Self {
            targets,
            lambda,
            noise_amp,
        })
    }

    pub fn target(&self, class: usize) -> Result<&[F]> {
        self.targets
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| CraftError::Contract(format!("no reward target for class {class}")))
    }

    fn check(&self, x0: &[F], c_original: &Condition<F>) -> Result<()> {
        if !c_original.is_original() {
            return Err(CraftError::Contract(format!(
                "rewards must be scored against the original prompt, got variant {} of prompt {}",
                c_original.variant, c_original.id
            )));
        }
        ensure_dim(self.target(c_original.class)?.len(), x0.len())
    }

    fn alignment(&self, x0: &[F], class: usize) -> Result<F> {
        Ok(-dist_sq(x0, self.target(class)?))
    }

    fn compactness(&self, x0: &[F]) -> F {
        let r2 = norm_sq(x0);
        -self.lambda * r2 * r2 / (F::one() + r2)
    }

    fn preference(&self, x0: &[F], class: usize) -> Result<F> {
        let noise = F::lit(hash_noise(x0, class));
        Ok(F::lit(P_MIX_H) * self.alignment(x0, class)?
            + F::lit(P_MIX_A) * self.compactness(x0)
            + self.noise_amp * noise)
    }

    /// Score of one judge for `x0` against the original condition.
    pub fn score(&self, x0: &[F], c_original: &Condition<F>, which: RewardId) -> Result<F> {
        self.check(x0, c_original)?;
        match which {
            RewardId::H => self.alignment(x0, c_original.class),
            RewardId::P => self.preference(x0, c_original.class),
            RewardId::A => Ok(self.compactness(x0)),
        }
    }

    pub fn score_all(&self, x0: &[F], c_original: &Condition<F>) -> Result<RewardVector<F>> {
        self.check(x0, c_original)?;
        let v = RewardVector {
            h: self.alignment(x0, c_original.class)?,
            p: self.preference(x0, c_original.class)?,
            a: self.compactness(x0),
        };
        if !v.as_array().iter().all(|r| r.is_finite()) {
            return Err(CraftError::Numeric("non-finite reward".into()));
        }
        Ok(v)
    }
}

/// Per-channel z-scoring fitted on a candidate pool (population std).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScaler<F> {
    pub mean: [F; 3],
    pub std: [F; 3],
    pub pool_size: usize,
}

pub fn fit_scaler<F: Scalar>(pool: &[RewardVector<F>]) -> Result<RewardScaler<F>> {
    if pool.is_empty() {
        return Err(CraftError::Contract("cannot fit a scaler on an empty pool".into()));
    }
    let n = F::from_usize_lossy(pool.len());
    let mut mean = [F::zero(); 3];
    let mut std = [F::zero(); 3];
    for c in 0..3 {
        let m = pool.iter().map(|r| r.as_array()[c]).sum::<F>() / n;
        let var = pool
            .iter()
            .map(|r| {
                let d = r.as_array()[c] - m;
                d * d
            })
            .sum::<F>()
            / n;
        mean[c] = m;
        std[c] = var.sqrt().max(F::lit(STD_FLOOR));
    }
    Ok(RewardScaler {
        mean,
        std,
        pool_size: pool.len(),
    })
}

impl<F: Scalar> RewardScaler<F> {
    pub fn scale(&self, rv: &RewardVector<F>) -> [F; 3] {
        let raw = rv.as_array();
        std::array::from_fn(|c| (raw[c] - self.mean[c]) / self.std[c])
    }
}

/// Relative importance of the three scaled rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeWeights<F> {
    pub h: F,
    pub p: F,
    pub a: F,
}

impl CompositeWeights<f64> {
    /// `(0.4, 0.4, 0.2)`.
    pub const DEFAULT: Self = Self {
        h: 0.4,
        p: 0.4,
        a: 0.2,
    };
}

impl<F: Scalar> CompositeWeights<F> {
    pub fn new(h: F, p: F, a: F) -> Result<Self> {
        let w = Self { h, p, a };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let arr = self.as_array();
        if arr.iter().any(|w| !w.is_finite() || *w < F::zero()) {
            return Err(CraftError::Domain("composite weights must be finite and nonnegative".into()));
        }
        let sum = self.h + self.p + self.a;
        if (sum - F::one()).abs() > F::lit(1e-9) {
            return Err(CraftError::Domain(format!("composite weights must sum to 1, got {sum}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [F; 3] {
        [self.h, self.p, self.a]
    }

    /// Weights restricted to a channel subset and renormalised to sum to 1.
    pub fn restricted(&self, channels: &[RewardId]) -> Result<Self> {
        let base = self.as_array();
        let mut out = [F::zero(); 3];
        for c in channels {
            out[c.index()] = base[c.index()];
        }
        let sum = out.iter().copied().sum::<F>();
        if sum <= F::zero() {
            return Err(CraftError::Domain("restricted weights have zero mass".into()));
        }
        Ok(Self::from_array(out.map(|w| w / sum)))
    }

    fn from_array([h, p, a]: [F; 3]) -> Self {
        Self { h, p, a }
    }
}

/// `r_total = alpha_h z_h + alpha_p z_p + alpha_a z_a` on scaled values.
pub fn composite<F: Scalar>(rv: &RewardVector<F>, sc: &RewardScaler<F>, w: &CompositeWeights<F>) -> F {
    composite_scaled(&sc.scale(rv), w)
}

pub fn composite_scaled<F: Scalar>(z: &[F; 3], w: &CompositeWeights<F>) -> F {
    w.h * z[0] + w.p * z[1] + w.a * z[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite() -> RewardSuite<f64> {
        RewardSuite::new(vec![vec![2.0, 0.0], vec![-1.0, 1.5]], 0.5, 0.3).unwrap()
    }

    fn original(class: usize) -> Condition<f64> {
        Condition {
            id: 1,
            variant: 0,
            class,
            embedding: vec![],
        }
    }

    #[test]
    fn maxima_of_alignment_and_compactness() {
        let s = suite();
        assert_eq!(s.score(&[2.0, 0.0], &original(0), RewardId::H).unwrap(), 0.0);
        assert_eq!(s.score(&[0.0, 0.0], &original(0), RewardId::A).unwrap(), 0.0);
        assert!(s.score(&[1.0, 0.0], &original(0), RewardId::H).unwrap() < 0.0);
    }

    #[test]
    fn refined_condition_is_rejected() {
        let s = suite();
        let mut c = original(0);
        c.variant = 2;
        assert!(matches!(s.score(&[0.0, 0.0], &c, RewardId::H), Err(CraftError::Contract(_))));
        assert!(s.score_all(&[0.0, 0.0], &c).is_err());
    }

    #[test]
    fn hash_noise_bounded_and_deterministic() {
        for i in 0..1000 {
            let x = [i as f64 * 0.013, -(i as f64) * 0.7];
            let h = hash_noise(&x, i % 3);
            assert!((-1.0..1.0).contains(&h));
            assert_eq!(h, hash_noise(&x, i % 3));
        }
    }

    #[test]
    fn scaler_on_two_point_pool() {
        let pool = [
            RewardVector { h: 0.0, p: 0.0, a: 0.0 },
            RewardVector { h: 2.0, p: 2.0, a: 2.0 },
        ];
        let sc = fit_scaler(&pool).unwrap();
        assert_eq!(sc.mean, [1.0; 3]);
        assert_eq!(sc.std, [1.0; 3]);
        assert_eq!(sc.scale(&pool[0]), [-1.0; 3]);
        assert_eq!(sc.scale(&pool[1]), [1.0; 3]);
    }

    #[test]
    fn constant_pool_clamps_std() {
        let pool = vec![RewardVector { h: 3.0, p: -1.0, a: 0.5 }; 10];
        let sc = fit_scaler(&pool).unwrap();
        assert_eq!(sc.std, [STD_FLOOR; 3]);
        assert_eq!(sc.scale(&pool[0]), [0.0; 3]);
        assert!(fit_scaler::<f64>(&[]).is_err());
    }

    #[test]
    fn composite_arithmetic() {
        let w = CompositeWeights::DEFAULT;
        assert_eq!(composite_scaled(&[1.0, -1.0, 0.0], &w), 0.0);
        let v = 0.37;
        assert!((composite_scaled(&[v, v, v], &w) - v).abs() < 1e-15);
    }

    #[test]
    fn weights_validated() {
        assert!(CompositeWeights::new(0.5, 0.5, 0.1).is_err());
        assert!(CompositeWeights::new(-0.1, 0.6, 0.5).is_err());
        assert!(CompositeWeights::new(0.4, 0.4, 0.2).is_ok());
        let r = CompositeWeights::DEFAULT.restricted(&[RewardId::H, RewardId::A]).unwrap();
        assert!((r.h - 2.0 / 3.0).abs() < 1e-15 && r.p == 0.0 && (r.a - 1.0 / 3.0).abs() < 1e-15);
    }
}
