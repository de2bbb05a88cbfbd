//! Numerical checks of the lower-bound relationship between the advantage
//! weighted SFT objective and the group policy objective.
//!
//! The group objective is replaced by its ELBO surrogate
//!
//! ```text
//! S(theta) = 1/B sum_groups 1/G sum_i exp(-(M_i^theta - M_i^old)) * A_i
//! M_i      = 1/K sum_k w(t_k) ||eps_theta(x_t_k, t_k, c) - eps_k||^2
//! ```
//!
//! where the constants of the bound cancel because every group's advantages
//! sum to zero. All estimates share one set of `(t, eps)` draws per member,
//! so `S(theta_old) = 0` exactly and the gradient identity at `theta_old`
//! holds to rounding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    drawn_loss_and_grad, elbo_neg_mse_with_draws, DrawnExample, NoiseDraw, NoiseSchedule, ParametricPredictor,
    TimestepWeighting,
};
use crate::error::{ensure_dim, CraftError, Result};
use crate::scalar::{norm_sq, Scalar};
use crate::seed::{rng_from_seed, subseed};

/// Largest `|M^theta - M^old|` the surrogate accepts before `exp` is judged
/// unreliable.
pub const EXP_GUARD: f64 = 50.0;

/// Tolerance of the zero-sum audit.
pub const ZERO_SUM_TOL: f64 = 1e-12;

/// Members of one prompt's group with their advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryGroup<F> {
    pub cond: Vec<F>,
    pub x0: Vec<Vec<F>>,
    pub advantages: Vec<F>,
}

impl<F: Scalar> TheoryGroup<F> {
    pub fn size(&self) -> usize {
        self.x0.len()
    }
}

/// Shared `(t, eps)` draws, `draws[group][member][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonDraws<F> {
    pub draws: Vec<Vec<Vec<NoiseDraw<F>>>>,
}

impl<F: Scalar> CommonDraws<F> {
    /// `k` draws per member, member `(g, i)` using its own stream under `seed`.
    pub fn sample(groups: &[TheoryGroup<F>], schedule: &NoiseSchedule<F>, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(CraftError::Contract("K must be at least 1".into()));
        }
        let draws = groups
            .iter()
            .enumerate()
            .map(|(g, grp)| {
                grp.x0
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let mut rng = rng_from_seed(subseed(seed, &[g as u64, i as u64]));
                        NoiseDraw::sample_many(schedule, x.len(), k, &mut rng)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { draws })
    }

    pub fn per_member(&self) -> usize {
        self.draws
            .first()
            .and_then(|g| g.first())
            .map_or(0, |m| m.len())
    }
}

fn check_shapes<F: Scalar>(groups: &[TheoryGroup<F>], draws: &CommonDraws<F>) -> Result<()> {
    if groups.is_empty() {
        return Err(CraftError::Contract("need at least one group".into()));
    }
    ensure_dim(groups.len(), draws.draws.len())?;
    for (g, d) in groups.iter().zip(&draws.draws) {
        if g.size() == 0 {
            return Err(CraftError::Contract("empty group".into()));
        }
        ensure_dim(g.size(), g.advantages.len())?;
        ensure_dim(g.size(), d.len())?;
    }
    Ok(())
}

/// `M_i` of every member of one group.
pub fn estimate_m<F: Scalar, P: ParametricPredictor<F>>(
    model: &P,
    group: &TheoryGroup<F>,
    draws: &[Vec<NoiseDraw<F>>],
    schedule: &NoiseSchedule<F>,
) -> Result<Vec<F>> {
    ensure_dim(group.size(), draws.len())?;
    group
        .x0
        .iter()
        .zip(draws)
        .map(|(x, d)| elbo_neg_mse_with_draws(model, x, &group.cond, schedule, d))
        .collect()
}

fn all_m<F: Scalar, P: ParametricPredictor<F>>(
    model: &P,
    groups: &[TheoryGroup<F>],
    draws: &CommonDraws<F>,
    schedule: &NoiseSchedule<F>,
) -> Result<Vec<Vec<F>>> {
    groups
        .par_iter()
        .zip(&draws.draws)
        .map(|(g, d)| estimate_m(model, g, d, schedule))
        .collect()
}

fn weights_of<F: Scalar>(delta: F, adv: F, scale: F) -> Result<F> {
    if delta.abs() > F::lit(EXP_GUARD) || !delta.is_finite() {
        return Err(CraftError::Numeric(format!(
            "|M_theta - M_old| = {delta} exceeds the exp guard {EXP_GUARD}; reduce the step size"
        )));
    }
    Ok((-delta).exp() * adv * scale)
}

/// Expectation term of the surrogate group objective.
pub fn estimate_jhat_surrogate<F: Scalar, P: ParametricPredictor<F>>(
    model: &P,
    model_old: &P,
    groups: &[TheoryGroup<F>],
    draws: &CommonDraws<F>,
    schedule: &NoiseSchedule<F>,
) -> Result<F> {
    check_shapes(groups, draws)?;
    let m = all_m(model, groups, draws, schedule)?;
    let m_old = all_m(model_old, groups, draws, schedule)?;
    let b = F::from_usize_lossy(groups.len());
    let mut total = F::zero();
    for ((g, mt), mo) in groups.iter().zip(&m).zip(&m_old) {
        let scale = F::one() / (b * F::from_usize_lossy(g.size()));
        for i in 0..g.size() {
            total = total + weights_of(mt[i] - mo[i], g.advantages[i], scale)?;
        }
    }
    Ok(total)
}

/// Gradient of the surrogate by the chain rule through `exp`, with each
/// `grad M_i` assembled draw by draw from the model's squared-error gradient.
pub fn surrogate_gradient<F: Scalar, P: ParametricPredictor<F>>(
    model: &P,
    model_old: &P,
    groups: &[TheoryGroup<F>],
    draws: &CommonDraws<F>,
    schedule: &NoiseSchedule<F>,
) -> Result<Vec<F>> {
    check_shapes(groups, draws)?;
    let m_old = all_m(model_old, groups, draws, schedule)?;
    let b = F::from_usize_lossy(groups.len());
    let shards: Vec<Result<Vec<F>>> = groups
        .par_iter()
        .zip(&draws.draws)
        .zip(&m_old)
        .map(|((g, gd), mo)| {
            let mut grad = vec![F::zero(); model.num_params()];
            let scale = F::one() / (b * F::from_usize_lossy(g.size()));
            for i in 0..g.size() {
                let k = F::from_usize_lossy(gd[i].len());
                let mut grad_m = vec![F::zero(); model.num_params()];
                let mut m = F::zero();
                for d in &gd[i] {
                    let w = schedule.weight_w(d.t)?;
                    let x_t = schedule.forward_diffuse(&g.x0[i], d.t, &d.eps)?;
                    let sq = model.accumulate_sq_err_grad(&x_t, d.t, &g.cond, &d.eps, w / k, &mut grad_m)?;
                    m = m + w * sq / k;
                }
                let coeff = -weights_of(m - mo[i], g.advantages[i], scale)?;
                for (a, gm) in grad.iter_mut().zip(&grad_m) {
                    *a = *a + coeff * *gm;
                }
            }
            Ok(grad)
        })
        .collect();
    let mut grad = vec![F::zero(); model.num_params()];
    for s in shards {
        for (a, v) in grad.iter_mut().zip(s?) {
            *a = *a + v;
        }
    }
    Ok(grad)
}

/// `-grad` of `1/B sum 1/G sum_i A_i * 1/K sum_k factor(t) ||...||^2`,
/// computed through the training kernel in one batched call.
pub fn weighted_mse_neg_gradient<F: Scalar, P: ParametricPredictor<F>>(
    model: &P,
    groups: &[TheoryGroup<F>],
    draws: &CommonDraws<F>,
    schedule: &NoiseSchedule<F>,
    weighting: TimestepWeighting,
) -> Result<Vec<F>> {
    check_shapes(groups, draws)?;
    let k = draws.per_member();
    let b = F::from_usize_lossy(groups.len());
    let mut grad = vec![F::zero(); model.num_params()];
    for (g, gd) in groups.iter().zip(&draws.draws) {
        let scale = F::one() / (b * F::from_usize_lossy(g.size()));
        let batch: Vec<DrawnExample<'_, F>> = g
            .x0
            .iter()
            .zip(&g.advantages)
            .zip(gd)
            .flat_map(|((x, &a), md)| {
                md.iter().map(move |d| DrawnExample {
                    x0: x,
                    cond: &g.cond,
                    weight: a * scale,
                    draw: d,
                })
            })
            .collect();
        let (_, gr) = drawn_loss_and_grad(model, &batch, schedule, weighting, k)?;
        for (a, v) in grad.iter_mut().zip(gr) {
            *a = *a - v;
        }
    }
    Ok(grad)
}

fn relative_error<F: Scalar>(a: &[F], b: &[F]) -> (f64, bool) {
    let nb = norm_sq(b).sqrt().as_f64();
    let diff: F = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    if nb == 0.0 {
        (if diff == F::zero() { 0.0 } else { f64::INFINITY }, true)
    } else {
        (diff.sqrt().as_f64() / nb, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub relative_error: f64,
    /// Set when the reference gradient vanishes (all advantages zero).
    pub degenerate: bool,
}

/// Compares the surrogate's gradient at `theta_old` with the negative
/// gradient of the advantage-weighted MSE under the given timestep weighting.
/// With [`TimestepWeighting::Elbo`] the two agree to rounding.
pub fn gradient_equivalence<F: Scalar, P: ParametricPredictor<F>>(
    model_old: &P,
    groups: &[TheoryGroup<F>],
    draws: &CommonDraws<F>,
    schedule: &NoiseSchedule<F>,
    weighting: TimestepWeighting,
) -> Result<GradientCheck> {
    let g1 = surrogate_gradient(model_old, model_old, groups, draws, schedule)?;
    let g2 = weighted_mse_neg_gradient(model_old, groups, draws, schedule, weighting)?;
    let (relative_error, degenerate) = relative_error(&g1, &g2);
    Ok(GradientCheck {
        relative_error,
        degenerate,
    })
}

/// Same comparison away from the anchor, at `model` with reference `model_old`.
pub fn gradient_gap_at<F: Scalar, P: ParametricPredictor<F>>(
    model: &P,
    model_old: &P,
    groups: &[TheoryGroup<F>],
    draws: &CommonDraws<F>,
    schedule: &NoiseSchedule<F>,
) -> Result<f64> {
    let g1 = surrogate_gradient(model, model_old, groups, draws, schedule)?;
    let g2 = weighted_mse_neg_gradient(model, groups, draws, schedule, TimestepWeighting::Elbo)?;
    Ok(relative_error(&g1, &g2).0)
}

/// Unit direction and step sizes for the Taylor check.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec<F> {
    pub direction: Vec<F>,
    pub etas: Vec<f64>,
}

impl<F: Scalar> PerturbationSpec<F> {
    pub fn new(direction: Vec<F>, etas: Vec<f64>) -> Result<Self> {
        let n = norm_sq(&direction).sqrt().as_f64();
        if (n - 1.0).abs() > 1e-12 {
            return Err(CraftError::Domain(format!("perturbation direction must have unit norm, got {n}")));
        }
        if etas.is_empty() || etas.iter().any(|&e| !(e > 0.0)) || etas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(CraftError::Domain("eta grid must be positive and strictly decreasing".into()));
        }
        Ok(Self { direction, etas })
    }

    /// Gaussian direction normalised to unit length.
    pub fn random(num_params: usize, etas: Vec<f64>, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let g: Vec<F> = (0..num_params).map(|_| F::standard_normal(&mut rng)).collect();
        let n = norm_sq(&g).sqrt();
        Self::new(g.into_iter().map(|v| v / n).collect(), etas)
    }
}

/// `n` step sizes log-spaced from `hi` down to `lo`.
pub fn geometric_grid(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![hi];
    }
    let (a, b) = (hi.ln(), lo.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub eta: f64,
    pub surrogate: f64,
    pub linear: f64,
    pub residual: f64,
    /// False when the residual sits below the rounding floor.
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub slope: f64,
    pub noise_floor: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Residual of the first-order model of the surrogate along `spec.direction`
/// and its log-log decay rate.
pub fn eta_sweep<F: Scalar, P: ParametricPredictor<F>>(
    model_old: &P,
    spec: &PerturbationSpec<F>,
    groups: &[TheoryGroup<F>],
    draws: &CommonDraws<F>,
    schedule: &NoiseSchedule<F>,
) -> Result<SweepResult> {
    ensure_dim(model_old.num_params(), spec.direction.len())?;
    let grad = surrogate_gradient(model_old, model_old, groups, draws, schedule)?;
    let slope_dir: F = grad.iter().zip(&spec.direction).map(|(&a, &b)| a * b).sum();
    let mean_abs_adv = {
        let all: Vec<F> = groups.iter().flat_map(|g| g.advantages.iter().copied()).collect();
        all.iter().map(|a| a.abs()).sum::<F>().as_f64() / all.len().max(1) as f64
    };
    let noise_floor = 100.0 * F::epsilon().as_f64() * mean_abs_adv.max(f64::MIN_POSITIVE);
    let mut points = Vec::with_capacity(spec.etas.len());
    for &eta in &spec.etas {
        let mut moved = model_old.clone();
        for (p, &g) in moved.params_mut().iter_mut().zip(&spec.direction) {
            *p = *p + F::lit(eta) * g;
        }
        let s = estimate_jhat_surrogate(&moved, model_old, groups, draws, schedule)?.as_f64();
        let linear = eta * slope_dir.as_f64();
        let residual = (s - linear).abs();
        points.push(SweepPoint {
            eta,
            surrogate: s,
            linear,
            residual,
            used: residual > noise_floor,
        });
    }
    let fit: Vec<(f64, f64)> = points.iter().filter(|p| p.used).map(|p| (p.eta, p.residual)).collect();
    let slope = loglog_slope(&fit).ok_or_else(|| {
        CraftError::Numeric("fewer than two residuals above the rounding floor; cannot fit a slope".into())
    })?;
    Ok(SweepResult {
        points,
        slope,
        noise_floor,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroSumAudit {
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// Indices of groups whose residual reaches the tolerance.
    pub flagged: Vec<usize>,
}

/// `|sum_i A_i|` for every group.
pub fn zero_sum_audit<F: Scalar>(advantages: &[Vec<F>]) -> ZeroSumAudit {
    let residuals: Vec<f64> = advantages
        .iter()
        .map(|a| a.iter().copied().sum::<F>().abs().as_f64())
        .collect();
    let flagged = residuals
        .iter()
        .enumerate()
        .filter(|(_, &r)| !(r < ZERO_SUM_TOL))
        .map(|(i, _)| i)
        .collect();
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    ZeroSumAudit {
        residuals,
        max_residual,
        flagged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{Architecture, ModelParams};
    use crate::trainer::group_advantage;

    fn setup(adv_scale: f64) -> (ModelParams<f64>, Vec<TheoryGroup<f64>>, NoiseSchedule<f64>) {
        let arch = Architecture {
            data_dim: 2,
            time_dim: 2,
            cond_dim: 2,
            hidden: [3, 3],
        };
        let model = ModelParams::init(arch, &mut rng_from_seed(4)).unwrap();
        let groups = (0..3)
            .map(|g| {
                let r: Vec<f64> = (0..4).map(|i| ((g * 7 + i * 3) % 5) as f64).collect();
                TheoryGroup {
                    cond: vec![g as f64 * 0.5, 1.0],
                    x0: (0..4).map(|i| vec![i as f64 * 0.4 - 0.6, g as f64 - 1.0]).collect(),
                    advantages: group_advantage(&r, 1e-8).unwrap().into_iter().map(|a| a * adv_scale).collect(),
                }
            })
            .collect();
        (model, groups, NoiseSchedule::linear(20, 1e-3, 0.05).unwrap())
    }

    #[test]
    fn surrogate_vanishes_at_anchor() {
        let (m, groups, s) = setup(1.0);
        let d = CommonDraws::sample(&groups, &s, 50, 1).unwrap();
        assert_eq!(m.num_params(), 41);
        let v = estimate_jhat_surrogate(&m, &m, &groups, &d, &s).unwrap();
        assert!(v.abs() < 1e-15, "{v}");
    }

    #[test]
    fn gradients_agree_and_negative_control_fails() {
        let (m, groups, s) = setup(1.0);
        let d = CommonDraws::sample(&groups, &s, 200, 2).unwrap();
        let ok = gradient_equivalence(&m, &groups, &d, &s, TimestepWeighting::Elbo).unwrap();
        assert!(ok.relative_error < 1e-12 && !ok.degenerate, "{ok:?}");
        let bad = gradient_equivalence(&m, &groups, &d, &s, TimestepWeighting::Uniform).unwrap();
        assert!(bad.relative_error > 1e-2, "{bad:?}");
    }

    #[test]
    fn zero_advantages_are_degenerate() {
        let (m, groups, s) = setup(0.0);
        let d = CommonDraws::sample(&groups, &s, 20, 2).unwrap();
        let r = gradient_equivalence(&m, &groups, &d, &s, TimestepWeighting::Elbo).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.relative_error, 0.0);
    }

    #[test]
    fn exp_guard_trips() {
        let (m, groups, s) = setup(1.0);
        let d = CommonDraws::sample(&groups, &s, 20, 2).unwrap();
        let mut far = m.clone();
        for p in far.params_mut() {
            *p += 50.0;
        }
        assert!(matches!(
            estimate_jhat_surrogate(&far, &m, &groups, &d, &s),
            Err(CraftError::Numeric(_))
        ));
    }

    #[test]
    fn audit_flags_corruption() {
        let good = vec![vec![1.0, -1.0], vec![0.5, 0.25, -0.75]];
        assert!(zero_sum_audit(&good).flagged.is_empty());
        let bad = vec![vec![1.0, -1.0], vec![0.5, 0.25, -0.7]];
        assert_eq!(zero_sum_audit(&bad).flagged, vec![1]);
    }

    #[test]
    fn spec_validation_and_grid() {
        assert!(PerturbationSpec::new(vec![1.0, 1.0], vec![0.1]).is_err());
        assert!(PerturbationSpec::new(vec![1.0, 0.0], vec![0.1, 0.2]).is_err());
        let g = geometric_grid(1e-1, 1e-4, 4);
        assert!((g[1] - 1e-2).abs() < 1e-15 && (g[3] - 1e-4).abs() < 1e-18);
        assert_eq!(loglog_slope(&[(1.0, 1.0), (10.0, 100.0)]), Some(2.0));
    }
}
