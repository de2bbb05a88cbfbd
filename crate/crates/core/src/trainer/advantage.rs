use std::collections::BTreeMap;

use crate::error::{CraftError, Result};
use crate::scalar::Scalar;

pub const DEFAULT_ADVANTAGE_EPS: f64 = 1e-8;

/// Group-relative advantage `(r - mean) / (std + eps)` with population std.
///
/// `rewards` are the composite rewards of the refined samples `j = 1..N` of
/// one group; the original sample is never part of the statistics.
pub fn group_advantage<F: Scalar>(rewards: &[F], eps: F) -> Result<Vec<F>> {
    if rewards.is_empty() {
        return Err(CraftError::Contract("advantage group must be nonempty".into()));
    }
    if !(eps > F::zero()) {
        return Err(CraftError::Domain(format!("advantage epsilon must be positive, got {eps}")));
    }
    let n = F::from_usize_lossy(rewards.len());
    let mean = rewards.iter().copied().sum::<F>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<F>() / n;
    let denom = var.sqrt() + eps;
    let adv: Vec<F> = rewards.iter().map(|&r| (r - mean) / denom).collect();
    if adv.iter().any(|a| !a.is_finite()) {
        return Err(CraftError::Numeric("non-finite advantage".into()));
    }
    Ok(adv)
}

/// Advantages keyed by `(prompt_id, variant)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdvantageTable<F> {
    pub values: BTreeMap<(u64, u32), F>,
    pub epsilon: F,
}

impl<F: Scalar> AdvantageTable<F> {
    pub fn new(epsilon: F) -> Self {
        Self {
            values: BTreeMap::new(),
            epsilon,
        }
    }

    /// Computes and stores advantages for one group given `(variant, r_total)`
    /// pairs of its refined members.
    pub fn insert_group(&mut self, prompt_id: u64, members: &[(u32, F)]) -> Result<()> {
        if members.iter().any(|(v, _)| *v == 0) {
            return Err(CraftError::Contract("originals do not take part in advantages".into()));
        }
        let rewards: Vec<F> = members.iter().map(|(_, r)| *r).collect();
        let adv = group_advantage(&rewards, self.epsilon)?;
        for ((variant, _), a) in members.iter().zip(adv) {
            self.values.insert((prompt_id, *variant), a);
        }
        Ok(())
    }

    pub fn get(&self, prompt_id: u64, variant: u32) -> Option<F> {
        self.values.get(&(prompt_id, variant)).copied()
    }

    /// Largest `|sum_j A_(i,j)|` over the groups in the table.
    pub fn max_group_sum(&self) -> F {
        let mut sums: BTreeMap<u64, F> = BTreeMap::new();
        for (&(id, _), &a) in &self.values {
            let e = sums.entry(id).or_insert(F::zero());
            *e = *e + a;
        }
        sums.values().fold(F::zero(), |m, s| m.max(s.abs()))
    }
}
