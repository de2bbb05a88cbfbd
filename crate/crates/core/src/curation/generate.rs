use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::prompts::PromptSet;
use crate::diffusion::{sample, NoisePredictor, NoiseSchedule, Sample};
use crate::error::{CraftError, Result};
use crate::reward::{composite, fit_scaler, CompositeWeights, RewardScaler, RewardSuite, RewardVector};
use crate::scalar::Scalar;
use crate::seed::{stream_seed, Stream};

/// The `N + 1` samples of one prompt and their rewards, index `j = 0` being
/// the sample drawn under the original condition.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationGroup<F = f64> {
    pub prompt_id: u64,
    pub class: usize,
    pub samples: Vec<Sample<F>>,
    pub rewards: Vec<RewardVector<F>>,
    /// Filled by [`score_pool`]; empty before.
    pub r_total: Vec<F>,
}

/// Why a group was dropped during generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvalidGroup {
    pub prompt_id: u64,
    pub variant: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput<F = f64> {
    pub groups: Vec<GenerationGroup<F>>,
    pub invalid: Vec<InvalidGroup>,
}

/// Seed of sample `(i, j)` under master seed `master`.
pub fn sample_seed(master: u64, prompt_id: u64, variant: u32) -> u64 {
    stream_seed(master, Stream::Generate, &[prompt_id, variant as u64])
}

/// Samples `x_0^(i,j)` for every prompt and variant and scores each against
/// the original condition `c_i^(0)`.
///
/// Groups run in parallel; each sample owns its seed, so the output does not
/// depend on scheduling. A diverging sampler drops its whole group and leaves
/// an audit record instead of failing the run.
pub fn generate_and_score<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    prompts: &PromptSet<F>,
    model: &P,
    schedule: &NoiseSchedule<F>,
    rewards: &RewardSuite<F>,
    master_seed: u64,
    bound: F,
) -> Result<GenerationOutput<F>> {
    if !prompts.is_refined() {
        return Err(CraftError::Contract("prompts must be refined before generation".into()));
    }
    let n = prompts.refinements_per_prompt;
    let results: Vec<Result<std::result::Result<GenerationGroup<F>, InvalidGroup>>> = (0..prompts.len())
        .into_par_iter()
        .map(|i| {
            let original = prompts.condition(i, 0)?;
            let mut samples = Vec::with_capacity(n + 1);
            let mut scores = Vec::with_capacity(n + 1);
            for j in 0..=n {
                let cond = prompts.condition(i, j)?;
                let seed = sample_seed(master_seed, cond.id, cond.variant);
                let s = match sample(model, cond, schedule, seed, bound) {
                    Ok(s) => s,
                    Err(CraftError::Numeric(reason)) => {
                        return Ok(Err(InvalidGroup {
                            prompt_id: original.id,
                            variant: cond.variant,
                            reason,
                        }))
                    }
                    Err(e) => return Err(e),
                };
                scores.push(rewards.score_all(&s.x0, original)?);
                samples.push(s);
            }
            Ok(Ok(GenerationGroup {
                prompt_id: original.id,
                class: original.class,
                samples,
                rewards: scores,
                r_total: Vec::new(),
            }))
        })
        .collect();
    let mut groups = Vec::new();
    let mut invalid = Vec::new();
    for r in results {
        match r? {
            Ok(g) => groups.push(g),
            Err(bad) => {
                log::warn!("dropping prompt {} (variant {}): {}", bad.prompt_id, bad.variant, bad.reason);
                invalid.push(bad);
            }
        }
    }
    Ok(GenerationOutput { groups, invalid })
}

/// Every reward vector of the pool, originals included, in group order.
pub fn pool_rewards<F: Scalar>(groups: &[GenerationGroup<F>]) -> Vec<RewardVector<F>> {
    groups.iter().flat_map(|g| g.rewards.iter().copied()).collect()
}

/// Fits the scaler on the whole pre-filter pool and fills every `r_total`.
pub fn score_pool<F: Scalar>(groups: &mut [GenerationGroup<F>], weights: &CompositeWeights<F>) -> Result<RewardScaler<F>> {
    weights.validate()?;
    let scaler = fit_scaler(&pool_rewards(groups))?;
    fill_r_total(groups, &scaler, weights);
    Ok(scaler)
}

/// Recomputes `r_total` with a given scaler and weights.
pub fn fill_r_total<F: Scalar>(groups: &mut [GenerationGroup<F>], scaler: &RewardScaler<F>, weights: &CompositeWeights<F>) {
    for g in groups {
        g.r_total = g.rewards.iter().map(|rv| composite(rv, scaler, weights)).collect();
    }
}
