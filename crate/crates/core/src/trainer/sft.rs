use rayon::prelude::*;

use crate::curation::{class_embedding, FilterRule, RuleFlags, SampleRecord};
use crate::diffusion::{loss_and_grad_normalized, NoiseSchedule, ParametricPredictor, TimestepWeighting, WeightedExample};
use crate::error::{CraftError, Result};
use crate::scalar::Scalar;
use crate::seed::subseed;

/// A refined sample ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMember<F> {
    pub variant: u32,
    pub x0: Vec<F>,
    pub advantage: Option<F>,
    pub retained: RuleFlags,
}

/// Training members of one prompt, conditioned on its original embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainGroup<F> {
    pub prompt_id: u64,
    pub cond: Vec<F>,
    pub members: Vec<TrainMember<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet<F> {
    pub groups: Vec<TrainGroup<F>>,
    /// `N` in the `1 / (b N)` normaliser.
    pub group_size: usize,
}

impl<F: Scalar> TrainingSet<F> {
    pub fn num_samples(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_samples() == 0
    }
}

impl TrainingSet<f64> {
    /// Groups selected records by prompt. Conditions are the original
    /// one-hot class embeddings.
    pub fn from_records(records: &[SampleRecord], group_size: usize, classes: usize) -> Result<Self> {
        let mut groups: Vec<TrainGroup<f64>> = Vec::new();
        let mut sorted: Vec<&SampleRecord> = records.iter().collect();
        sorted.sort_by_key(|r| (r.prompt_id, r.variant));
        for r in sorted {
            if r.variant == 0 {
                return Err(CraftError::Contract(format!("original sample of prompt {} in training data", r.prompt_id)));
            }
            let member = TrainMember {
                variant: r.variant,
                x0: r.x0.clone(),
                advantage: r.advantage,
                retained: r.retained_under,
            };
            match groups.last_mut() {
                Some(g) if g.prompt_id == r.prompt_id => g.members.push(member),
                _ => groups.push(TrainGroup {
                    prompt_id: r.prompt_id,
                    cond: class_embedding(r.class, classes)?,
                    members: vec![member],
                }),
            }
        }
        Ok(Self { groups, group_size })
    }
}

/// Vanilla mode sets every advantage to 1, the plain SFT baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdvantageMode {
    Craft,
    Vanilla,
}

/// Noise stream of one member on one visit.
pub fn member_noise_seed(visit_seed: u64, prompt_id: u64, variant: u32) -> u64 {
    subseed(visit_seed, &[prompt_id, variant as u64])
}

type LossAndGrad<F> = (F, Vec<F>);

/// Advantage-weighted noise-prediction loss over a minibatch of groups:
///
/// ```text
/// L = 1/(b N) sum_i sum_j A_ij * 1[j retained under rule] * ||eps_theta(x_t, t, c_i) - eps||^2
/// ```
///
/// with no timestep weighting. `b` is the number of groups passed in. Noise
/// is drawn per member from `visit_seed`. Groups are evaluated in parallel
/// and reduced in input order.
pub fn weighted_sft_loss<F: Scalar, P: ParametricPredictor<F>>(
    model: &P,
    groups: &[&TrainGroup<F>],
    group_size: usize,
    rule: Option<FilterRule>,
    schedule: &NoiseSchedule<F>,
    mode: AdvantageMode,
    visit_seed: u64,
) -> Result<(F, Vec<F>)> {
    if groups.is_empty() || group_size == 0 {
        return Err(CraftError::Contract("weighted SFT needs at least one group and N >= 1".into()));
    }
    let normalizer = groups.len() * group_size;
    let shards: Vec<Result<Option<LossAndGrad<F>>>> = groups
        .par_iter()
        .map(|g| {
            let mut batch = Vec::with_capacity(g.members.len());
            for m in &g.members {
                let indicator = rule.is_none_or(|r| m.retained.contains(r));
                let adv = match mode {
                    AdvantageMode::Vanilla => F::one(),
                    AdvantageMode::Craft => m.advantage.ok_or_else(|| {
                        CraftError::Contract(format!(
                            "sample ({}, {}) has no advantage annotation",
                            g.prompt_id, m.variant
                        ))
                    })?,
                };
                batch.push(WeightedExample {
                    x0: &m.x0,
                    cond: &g.cond,
                    weight: if indicator { adv } else { F::zero() },
                    noise_seed: member_noise_seed(visit_seed, g.prompt_id, m.variant),
                });
            }
            if batch.is_empty() {
                return Ok(None);
            }
            loss_and_grad_normalized(model, &batch, schedule, TimestepWeighting::Uniform, normalizer).map(Some)
        })
        .collect();
    let mut loss = F::zero();
    let mut grad = vec![F::zero(); model.num_params()];
    for shard in shards {
        if let Some((l, g)) = shard? {
            loss = loss + l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{loss_and_grad, Architecture, ModelParams};
    use crate::seed::rng_from_seed;

    fn model() -> ModelParams<f64> {
        let arch = Architecture {
            data_dim: 2,
            time_dim: 4,
            cond_dim: 3,
            hidden: [5, 5],
        };
        ModelParams::init(arch, &mut rng_from_seed(8)).unwrap()
    }

    fn group(id: u64, advs: &[f64], retained: RuleFlags) -> TrainGroup<f64> {
        TrainGroup {
            prompt_id: id,
            cond: vec![1.0, 0.0, 0.0],
            members: advs
                .iter()
                .enumerate()
                .map(|(j, &a)| TrainMember {
                    variant: j as u32 + 1,
                    x0: vec![0.3 * j as f64, -1.0 + id as f64],
                    advantage: Some(a),
                    retained,
                })
                .collect(),
        }
    }

    #[test]
    fn outside_filter_gives_zero() {
        let m = model();
        let s = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let none = RuleFlags::default();
        let g = group(1, &[1.0, -1.0], none);
        let (l, gr) = weighted_sft_loss(&m, &[&g], 2, Some(FilterRule::HPA), &s, AdvantageMode::Craft, 3).unwrap();
        assert_eq!(l, 0.0);
        assert!(gr.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_advantages_match_vanilla_and_plain_mse() {
        let m = model();
        let s = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let all = RuleFlags::all();
        let g1 = group(1, &[1.0, 1.0, 1.0], all);
        let g2 = group(2, &[1.0, 1.0, 1.0], all);
        let groups = [&g1, &g2];
        let craft = weighted_sft_loss(&m, &groups, 3, Some(FilterRule::H), &s, AdvantageMode::Craft, 9).unwrap();
        let vanilla = weighted_sft_loss(&m, &groups, 3, Some(FilterRule::H), &s, AdvantageMode::Vanilla, 9).unwrap();
        assert_eq!(craft, vanilla);
        let plain: Vec<WeightedExample<'_, f64>> = groups
            .iter()
            .flat_map(|g| {
                g.members.iter().map(|mb| WeightedExample {
                    x0: &mb.x0,
                    cond: &g.cond,
                    weight: 1.0,
                    noise_seed: member_noise_seed(9, g.prompt_id, mb.variant),
                })
            })
            .collect();
        let (l, gr) = loss_and_grad(&m, &plain, &s).unwrap();
        assert!((l - craft.0).abs() < 1e-12 * l.abs().max(1.0));
        for (a, b) in gr.iter().zip(&craft.1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_advantage_is_contract_error() {
        let m = model();
        let s = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let mut g = group(1, &[1.0], RuleFlags::all());
        g.members[0].advantage = None;
        let r = weighted_sft_loss(&m, &[&g], 1, None, &s, AdvantageMode::Craft, 0);
        assert!(matches!(r, Err(CraftError::Contract(_))));
        assert!(weighted_sft_loss(&m, &[&g], 1, None, &s, AdvantageMode::Vanilla, 0).is_ok());
    }

    #[test]
    fn normaliser_counts_full_groups() {
        let m = model();
        let s = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let g = group(1, &[0.5], RuleFlags::all());
        let (l4, _) = weighted_sft_loss(&m, &[&g], 4, None, &s, AdvantageMode::Craft, 1).unwrap();
        let (l1, _) = weighted_sft_loss(&m, &[&g], 1, None, &s, AdvantageMode::Craft, 1).unwrap();
        assert!((l1 - 4.0 * l4).abs() < 1e-12);
    }
}
