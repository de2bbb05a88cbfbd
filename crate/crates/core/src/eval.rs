//! Held-out evaluation and paired win rates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::PromptSet;
use crate::diffusion::{sample, NoisePredictor, NoiseSchedule};
use crate::error::{CraftError, Result};
use crate::reward::{composite, CompositeWeights, RewardScaler, RewardSuite, RewardVector};
use crate::seed::{stream_seed, Stream};

/// Seed of evaluation draw `k` for a prompt. Every model evaluated under the
/// same master seed sees the same seeds, which pairs the comparison.
pub fn eval_seed(master: u64, prompt_id: u64, k: usize) -> u64 {
    stream_seed(master, Stream::Eval, &[prompt_id, k as u64])
}

/// Scores of every evaluation draw; `None` marks a diverged sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalScores {
    pub prompt_ids: Vec<u64>,
    pub rewards: Vec<Vec<Option<RewardVector<f64>>>>,
    pub composite: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prompts: usize,
    pub k_per_prompt: usize,
    pub samples: usize,
    pub diverged: usize,
    pub seed: u64,
    /// Mean raw `(r_h, r_p, r_a)`.
    pub mean_raw: [f64; 3],
    /// Mean scaled `(z_h, z_p, z_a)` under the curation scaler.
    pub mean_scaled: [f64; 3],
    pub composite: f64,
}

/// Inputs shared by every evaluation of one run.
#[derive(Debug, Clone)]
pub struct EvalContext<'a> {
    pub prompts: &'a PromptSet<f64>,
    pub suite: &'a RewardSuite<f64>,
    pub scaler: &'a RewardScaler<f64>,
    pub weights: &'a CompositeWeights<f64>,
    pub schedule: &'a NoiseSchedule<f64>,
    pub k_per_prompt: usize,
    pub seed: u64,
    pub bound: f64,
}

/// Draws `k_per_prompt` samples per held-out prompt and scores them against
/// the prompt itself.
pub fn score_model<P: NoisePredictor<f64> + ?Sized>(model: &P, ctx: &EvalContext<'_>) -> Result<EvalScores> {
    if ctx.k_per_prompt == 0 {
        return Err(CraftError::Contract("need at least one sample per prompt".into()));
    }
    let per_prompt: Vec<Result<Vec<Option<RewardVector<f64>>>>> = ctx
        .prompts
        .originals
        .par_iter()
        .map(|cond| {
            (0..ctx.k_per_prompt)
                .map(|k| match sample(model, cond, ctx.schedule, eval_seed(ctx.seed, cond.id, k), ctx.bound) {
                    Ok(s) => ctx.suite.score_all(&s.x0, cond).map(Some),
                    Err(CraftError::Numeric(_)) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect()
        })
        .collect();
    let rewards = per_prompt.into_iter().collect::<Result<Vec<_>>>()?;
    let composite = rewards
        .iter()
        .map(|row| row.iter().map(|r| r.map(|rv| composite(&rv, ctx.scaler, ctx.weights))).collect())
        .collect();
    Ok(EvalScores {
        prompt_ids: ctx.prompts.originals.iter().map(|c| c.id).collect(),
        rewards,
        composite,
    })
}

pub fn summarize(scores: &EvalScores, ctx: &EvalContext<'_>) -> EvalReport {
    let mut raw = [0.0; 3];
    let mut scaled = [0.0; 3];
    let mut comp = 0.0;
    let mut n = 0usize;
    let mut diverged = 0usize;
    for (row, crow) in scores.rewards.iter().zip(&scores.composite) {
        for (r, c) in row.iter().zip(crow) {
            match (r, c) {
                (Some(rv), Some(c)) => {
                    let z = ctx.scaler.scale(rv);
                    for ch in 0..3 {
                        raw[ch] += rv.as_array()[ch];
                        scaled[ch] += z[ch];
                    }
                    comp += c;
                    n += 1;
                }
                _ => diverged += 1,
            }
        }
    }
    let d = n.max(1) as f64;
    EvalReport {
        prompts: scores.prompt_ids.len(),
        k_per_prompt: ctx.k_per_prompt,
        samples: n,
        diverged,
        seed: ctx.seed,
        mean_raw: raw.map(|v| v / d),
        mean_scaled: scaled.map(|v| v / d),
        composite: comp / d,
    }
}

pub fn evaluate<P: NoisePredictor<f64> + ?Sized>(model: &P, ctx: &EvalContext<'_>) -> Result<EvalReport> {
    Ok(summarize(&score_model(model, ctx)?, ctx))
}

/// Fraction of prompts on which the model's mean score strictly beats the
/// base's; ties count one half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateTable {
    pub h: f64,
    pub p: f64,
    pub a: f64,
    pub composite: f64,
    /// Prompts where both models produced at least one valid sample.
    pub prompts: usize,
    pub tie_value: f64,
}

fn mean_valid(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = xs.flatten().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn win(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

/// Paired win rates of `model` against `base` from scores over the same prompts.
pub fn win_rate(model: &EvalScores, base: &EvalScores) -> Result<WinRateTable> {
    if model.prompt_ids != base.prompt_ids {
        return Err(CraftError::Contract("win rate needs identical prompt sets".into()));
    }
    let mut wins = [0.0; 4];
    let mut prompts = 0usize;
    for i in 0..model.prompt_ids.len() {
        let channel = |s: &EvalScores, c: usize| {
            if c == 3 {
                mean_valid(s.composite[i].iter().copied())
            } else {
                mean_valid(s.rewards[i].iter().map(|r| r.map(|rv| rv.as_array()[c])))
            }
        };
        let pairs: Vec<(Option<f64>, Option<f64>)> = (0..4).map(|c| (channel(model, c), channel(base, c))).collect();
        if pairs.iter().any(|(a, b)| a.is_none() || b.is_none()) {
            continue;
        }
        prompts += 1;
        for (c, (a, b)) in pairs.into_iter().enumerate() {
            wins[c] += win(a.unwrap_or_default(), b.unwrap_or_default());
        }
    }
    let d = prompts.max(1) as f64;
    Ok(WinRateTable {
        h: wins[0] / d,
        p: wins[1] / d,
        a: wins[2] / d,
        composite: wins[3] / d,
        prompts,
        tie_value: 0.5,
    })
}

/// One cell of an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub name: String,
    pub seed: u64,
    pub train_size: usize,
    pub steps: usize,
    /// Empty training set, or a training failure message.
    pub status: String,
    pub report: Option<EvalReport>,
}

/// Writes `name, seed, train_size, steps, status, composite, z_h, z_p, z_a, r_h, r_p, r_a`.
pub fn write_grid_csv(path: &std::path::Path, cells: &[GridCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CraftError::Format(e.to_string()))?;
    let header = [
        "name",
        "seed",
        "train_size",
        "steps",
        "status",
        "composite",
        "z_h",
        "z_p",
        "z_a",
        "r_h",
        "r_p",
        "r_a",
    ];
    let csv_err = |e: csv::Error| CraftError::Format(e.to_string());
    w.write_record(header).map_err(csv_err)?;
    for c in cells {
        let mut row = vec![
            c.name.clone(),
            c.seed.to_string(),
            c.train_size.to_string(),
            c.steps.to_string(),
            c.status.clone(),
        ];
        match &c.report {
            Some(r) => {
                row.push(r.composite.to_string());
                row.extend(r.mean_scaled.iter().map(f64::to_string));
                row.extend(r.mean_raw.iter().map(f64::to_string));
            }
            None => row.extend(std::iter::repeat_n(String::new(), 7)),
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean composite per cell name across seeds, in first-seen order.
pub fn seed_averaged(cells: &[GridCell]) -> Vec<(String, f64, usize)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for c in cells {
        let Some(r) = &c.report else { continue };
        match out.iter_mut().find(|(n, _, _)| *n == c.name) {
            Some(e) => {
                e.1 += r.composite;
                e.2 += 1;
            }
            None => out.push((c.name.clone(), r.composite, 1)),
        }
    }
    for e in &mut out {
        e.1 /= e.2 as f64;
    }
    out
}
