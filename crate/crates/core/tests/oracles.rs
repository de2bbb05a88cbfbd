//! Independent reference values for the numeric building blocks.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;

use craft::curation::{
    refine_prompts, write_refinement_requests, FileExchangeProvider, PerturbationProvider, PromptSet,
    RefinementResponse,
};
use craft::diffusion::gaussian::pushforward_covariance;
use craft::diffusion::{
    elbo_neg_mse, sample, Condition, LinearPredictor, ModelParams, NoisePredictor, NoiseSchedule,
};
use craft::reward::{fit_scaler, hash_noise, RewardSuite, RewardVector};
use craft::seed::{rng_from_seed, stream_seed, subseed, Stream};
use craft::trainer::group_advantage;
use craft::Scalar;

fn q(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Rational linear schedule on `T = 50` with beta from 1e-4 to 0.02.
fn rational_schedule() -> (Vec<BigRational>, Vec<BigRational>) {
    let (lo, hi) = (q(1, 10_000), q(1, 50));
    let betas: Vec<BigRational> = (0..50)
        .map(|i| &lo + (&hi - &lo) * q(i, 49))
        .collect();
    let mut abar = Vec::with_capacity(50);
    let mut p = BigRational::one();
    for b in &betas {
        p *= BigRational::one() - b;
        abar.push(p.clone());
    }
    (betas, abar)
}

fn default_schedule() -> NoiseSchedule<f64> {
    NoiseSchedule::linear(50, 1e-4, 0.02).unwrap()
}

#[test]
fn schedule_matches_rational_arithmetic() {
    let s = default_schedule();
    let (betas, abar) = rational_schedule();
    let w = |t: usize| {
        let b = &betas[t - 1];
        let a = &abar[t - 1];
        (BigRational::one() - a) / (q(2, 1) * b * a)
    };
    assert!(rel(s.alpha_bar(50).unwrap(), abar[49].to_f64().unwrap()) < 1e-13);
    assert!(rel(s.weight_w(25).unwrap(), w(25).to_f64().unwrap()) < 1e-13);
    let mean_w = (1..=50).fold(BigRational::zero(), |acc, t| acc + w(t)) / q(50, 1);
    let est = (1..=50).map(|t| s.weight_w(t).unwrap()).sum::<f64>() / 50.0;
    assert!(rel(est, mean_w.to_f64().unwrap()) < 1e-13);
    for t in 1..=50 {
        assert!(rel(s.beta(t).unwrap(), betas[t - 1].to_f64().unwrap()) < 1e-13);
    }
}

#[test]
fn schedule_matches_frozen_high_precision_values() {
    let s = default_schedule();
    assert!(rel(s.alpha_bar(50).unwrap(), 0.602_951_597_329_714_903_450_059_3) < 1e-13);
    assert!(rel(s.weight_w(25).unwrap(), 6.746_824_571_931_674_620_883_481) < 1e-13);
    let mean_w = (1..=50).map(|t| s.weight_w(t).unwrap()).sum::<f64>() / 50.0;
    assert!(rel(mean_w, 7.406_907_719_559_673_475_986_844) < 1e-13);
    let x = s.forward_diffuse(&[0.75, -1.25], 17, &[0.3, 1.1]).unwrap();
    assert!(rel(x[0], 0.799_556_844_463_278_384_403_232_1) < 1e-14);
    assert!(rel(x[1], -0.955_780_090_891_622_996_367_373_8) < 1e-14);
}

#[test]
fn weights_are_positive_and_increasing() {
    let s = default_schedule();
    let w: Vec<f64> = (1..=50).map(|t| s.weight_w(t).unwrap()).collect();
    assert!(w.iter().all(|&v| v > 0.0));
    assert!(w.windows(2).all(|p| p[1] > p[0]), "{w:?}");
}

#[test]
fn advantages_match_frozen_values() {
    let a = group_advantage(&[1.0, 2.0, 3.0], 1e-8).unwrap();
    assert!(rel(a[0], -1.224_744_856_391_589_232_810_37) < 1e-14);
    assert!(a[1].abs() < 1e-15);
    assert!(rel(a[2], 1.224_744_856_391_589_232_810_37) < 1e-14);
}

#[test]
fn preference_reward_matches_rational_recomputation() {
    let suite = RewardSuite::new(vec![vec![2.0, 0.0], vec![-1.0, 1.7320508075688772]], 1.0, 0.5).unwrap();
    let mut rng = rng_from_seed(11);
    for i in 0..200 {
        let class = i % 2;
        let x: Vec<f64> = (0..2).map(|_| 3.0 * f64::standard_normal(&mut rng)).collect();
        let cond = Condition {
            id: i as u64,
            variant: 0,
            class,
            embedding: vec![0.0; 2],
        };
        let got = suite.score_all(&x, &cond).unwrap();
        let xr: Vec<BigRational> = x.iter().map(|&v| exact(v)).collect();
        let mu: Vec<BigRational> = suite.targets[class].iter().map(|&v| exact(v)).collect();
        let h = -xr.iter().zip(&mu).fold(BigRational::zero(), |acc, (a, b)| acc + (a - b) * (a - b));
        let r2 = xr.iter().fold(BigRational::zero(), |acc, a| acc + a * a);
        let a = -(&r2 * &r2) / (BigRational::one() + &r2);
        let p = q(7, 10) * &h + q(3, 10) * &a + q(1, 2) * exact(hash_noise(&x, class));
        assert!(rel(got.h, h.to_f64().unwrap()) < 1e-13);
        assert!(rel(got.a, a.to_f64().unwrap()) < 1e-13);
        assert!((got.p - p.to_f64().unwrap()).abs() < 1e-12 * (1.0 + got.p.abs()));
    }
}

#[test]
fn scaler_moments_match_rational_arithmetic() {
    let mut rng = rng_from_seed(3);
    let pool: Vec<RewardVector<f64>> = (0..1000)
        .map(|_| RewardVector::from_array([rng.random::<f64>() * 10.0 - 5.0, rng.random(), -rng.random::<f64>()]))
        .collect();
    let s = fit_scaler(&pool).unwrap();
    let n = q(1000, 1);
    for c in 0..3 {
        let xs: Vec<BigRational> = pool.iter().map(|r| exact(r.as_array()[c])).collect();
        let mean = xs.iter().fold(BigRational::zero(), |acc, x| acc + x) / &n;
        let var = xs.iter().fold(BigRational::zero(), |acc, x| acc + (x - &mean) * (x - &mean)) / &n;
        assert!((s.mean[c] - mean.to_f64().unwrap()).abs() < 1e-14);
        assert!(rel(s.std[c] * s.std[c], var.to_f64().unwrap()) < 1e-12);
    }
}

#[test]
fn sampler_matches_linear_gaussian_pushforward() {
    let schedule = default_schedule();
    let pred = LinearPredictor::new(2, vec![0.4, 0.1, -0.05, 0.3]).unwrap();
    let cov = pushforward_covariance(&pred, &schedule, false).unwrap();
    let cond = Condition {
        id: 0,
        variant: 0,
        class: 0,
        embedding: vec![],
    };
    let n = 100_000;
    let mut m = [0.0f64; 2];
    let mut c = [0.0f64; 4];
    for k in 0..n {
        let x = sample(&pred, &cond, &schedule, subseed(5, &[k]), 1e6).unwrap().x0;
        m[0] += x[0];
        m[1] += x[1];
        c[0] += x[0] * x[0];
        c[1] += x[0] * x[1];
        c[3] += x[1] * x[1];
    }
    let nf = n as f64;
    c[2] = c[1];
    for (i, v) in c.iter().enumerate() {
        let emp = v / nf - m[i / 2] / nf * m[i % 2] / nf;
        // standard error of a covariance entry is about sqrt(2/n) * scale
        let tol = 5.0 * (2.0 / nf).sqrt() * (cov[0] + cov[3]);
        assert!((emp - cov[i]).abs() < tol, "entry {i}: {emp} vs {}", cov[i]);
    }
    assert!(m.iter().all(|v| (v / nf).abs() < 5.0 * (cov[0].max(cov[3]) / nf).sqrt()));
}

/// Predictor that always returns zero.
struct ZeroPredictor;

impl NoisePredictor<f64> for ZeroPredictor {
    fn data_dim(&self) -> usize {
        2
    }

    fn predict(&self, _x: &[f64], _t: usize, _c: &[f64]) -> craft::Result<Vec<f64>> {
        Ok(vec![0.0, 0.0])
    }
}

#[test]
fn zero_predictor_recovers_mean_weight_times_dimension() {
    let s = default_schedule();
    let mean_w = 7.406_907_719_559_673_475_986_844;
    let est = elbo_neg_mse(&ZeroPredictor, &[0.5, -0.5], &[], &s, 200_000, &mut rng_from_seed(1)).unwrap();
    assert!(rel(est, 2.0 * mean_w) < 0.02, "{est}");
}

#[test]
fn standard_error_shrinks_as_inverse_root_k() {
    let s = default_schedule();
    let spread = |k: usize| {
        let xs: Vec<f64> = (0..400)
            .map(|r| elbo_neg_mse(&ZeroPredictor, &[0.0, 0.0], &[], &s, k, &mut rng_from_seed(subseed(k as u64, &[r]))).unwrap())
            .collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
    };
    let ratio = spread(200) / spread(400);
    assert!((ratio - 2f64.sqrt()).abs() < 0.15, "{ratio}");
}

#[test]
fn file_exchange_round_trip_reproduces_perturbation_provider() {
    let tmp = tempfile::tempdir().unwrap();
    let prompts = PromptSet::<f64>::toy(12, 3, 0, 4).unwrap();
    let req = tmp.path().join("req.jsonl");
    assert_eq!(write_refinement_requests(&req, &prompts, 0.3).unwrap(), 48);
    let direct = refine_prompts(&prompts, &PerturbationProvider { radius: 0.3, seed: 9 }).unwrap();
    let mut lines = String::new();
    for (i, row) in direct.variants.iter().enumerate() {
        for c in row {
            let r = RefinementResponse {
                prompt_id: prompts.originals[i].id,
                variant: c.variant,
                embedding: c.embedding.clone(),
            };
            lines.push_str(&serde_json::to_string(&r).unwrap());
            lines.push('\n');
        }
    }
    let resp = tmp.path().join("resp.jsonl");
    std::fs::write(&resp, lines).unwrap();
    let via_file = refine_prompts(&prompts, &FileExchangeProvider::load(&resp, 0.3).unwrap()).unwrap();
    assert_eq!(via_file, direct);
}

#[test]
fn seed_streams_do_not_collide() {
    let mut seen = std::collections::HashSet::new();
    for i in 0..10_000u64 {
        assert!(seen.insert(stream_seed(42, Stream::Generate, &[i, 0])));
    }
    for s in Stream::ALL {
        assert!(seen.insert(stream_seed(42, s, &[])));
    }
    let mut rng = rng_from_seed(stream_seed(42, Stream::Eval, &[1]));
    let outputs: std::collections::HashSet<u64> = (0..10_000).map(|_| rng.random()).collect();
    assert_eq!(outputs.len(), 10_000);
}

#[test]
fn model_parameter_count_matches_layout() {
    let arch = craft::diffusion::Architecture {
        data_dim: 2,
        time_dim: 16,
        cond_dim: 3,
        hidden: [64, 64],
    };
    let m = ModelParams::<f64>::zeros(arch).unwrap();
    assert_eq!(m.values().len(), 21 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
}
