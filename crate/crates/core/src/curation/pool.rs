use std::collections::BTreeMap;

use super::filter::{group_passes, FilterRule, RuleFlags};
use super::generate::GenerationGroup;
use super::manifest::SampleRecord;
use crate::error::{CraftError, Result};
use crate::reward::{composite, CompositeWeights, RewardScaler, RewardVector};
use crate::trainer::AdvantageTable;

/// Flattens scored groups into pool records, tagging every member with the
/// rules its group survives.
pub fn pool_records(groups: &[GenerationGroup<f64>]) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for g in groups {
        if g.r_total.len() != g.samples.len() {
            return Err(CraftError::Contract(format!("group {} has not been scored", g.prompt_id)));
        }
        let flags = RuleFlags::evaluate(&g.rewards);
        for ((s, rv), &r) in g.samples.iter().zip(&g.rewards).zip(&g.r_total) {
            out.push(SampleRecord {
                prompt_id: g.prompt_id,
                variant: s.variant,
                class: g.class,
                seed: s.seed,
                x0: s.x0.clone(),
                r_h: rv.h,
                r_p: rv.p,
                r_a: rv.a,
                r_total: r,
                advantage: None,
                retained_under: flags,
            });
        }
    }
    Ok(out)
}

/// Pool records grouped by prompt, each group ordered by variant and checked
/// to hold exactly variants `0..=group_size`.
pub fn group_records(records: &[SampleRecord], group_size: usize) -> Result<BTreeMap<u64, Vec<&SampleRecord>>> {
    let mut groups: BTreeMap<u64, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.prompt_id).or_default().push(r);
    }
    for (id, members) in groups.iter_mut() {
        members.sort_by_key(|r| r.variant);
        let variants: Vec<u32> = members.iter().map(|r| r.variant).collect();
        if variants != (0..=group_size as u32).collect::<Vec<_>>() {
            return Err(CraftError::Contract(format!(
                "prompt {id} has variants {variants:?}, expected 0..={group_size}"
            )));
        }
    }
    Ok(groups)
}

/// Recomputes `r_total` of every record.
pub fn rescore(records: &mut [SampleRecord], scaler: &RewardScaler<f64>, weights: &CompositeWeights<f64>) {
    for r in records {
        r.r_total = composite(&r.rewards(), scaler, weights);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    /// Refined members of retained groups with their group advantages.
    pub records: Vec<SampleRecord>,
    pub groups: usize,
    pub max_zero_sum_residual: f64,
}

/// Keeps the groups retained under `rule` and annotates their refined members
/// with group advantages over `r_total`. Originals are dropped.
pub fn filter_pool(pool: &[SampleRecord], rule: FilterRule, group_size: usize, eps: f64) -> Result<Filtered> {
    let groups = group_records(pool, group_size)?;
    let mut table = AdvantageTable::new(eps);
    let mut records = Vec::new();
    let mut kept = 0;
    for (&id, members) in &groups {
        let rewards: Vec<RewardVector<f64>> = members.iter().map(|r| r.rewards()).collect();
        if !group_passes(&rewards, rule) {
            continue;
        }
        kept += 1;
        let refined: Vec<(u32, f64)> = members[1..].iter().map(|r| (r.variant, r.r_total)).collect();
        table.insert_group(id, &refined)?;
        for r in &members[1..] {
            let mut rec = (*r).clone();
            rec.advantage = table.get(id, r.variant);
            records.push(rec);
        }
    }
    Ok(Filtered {
        records,
        groups: kept,
        max_zero_sum_residual: table.max_group_sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, v: u32, h: f64, r_total: f64) -> SampleRecord {
        SampleRecord {
            prompt_id: id,
            variant: v,
            class: 0,
            seed: 0,
            x0: vec![0.0],
            r_h: h,
            r_p: h,
            r_a: h,
            r_total,
            advantage: None,
            retained_under: RuleFlags::default(),
        }
    }

    #[test]
    fn filter_drops_originals_and_losing_groups() {
        let pool = vec![
            rec(1, 0, 0.0, 0.0),
            rec(1, 1, 1.0, 1.0),
            rec(1, 2, -1.0, 3.0),
            rec(2, 0, 5.0, 0.0),
            rec(2, 1, 1.0, 0.0),
            rec(2, 2, 2.0, 0.0),
        ];
        let f = filter_pool(&pool, FilterRule::HPA, 2, 1e-8).unwrap();
        assert_eq!(f.groups, 1);
        assert_eq!(f.records.len(), 2);
        assert!(f.records.iter().all(|r| r.prompt_id == 1 && r.variant > 0));
        assert!(f.records[0].advantage.unwrap() < 0.0 && f.records[1].advantage.unwrap() > 0.0);
        assert!(f.max_zero_sum_residual < 1e-12);
    }

    #[test]
    fn incomplete_group_is_rejected() {
        let pool = vec![rec(1, 0, 0.0, 0.0), rec(1, 2, 1.0, 1.0)];
        assert!(filter_pool(&pool, FilterRule::H, 2, 1e-8).is_err());
    }
}
