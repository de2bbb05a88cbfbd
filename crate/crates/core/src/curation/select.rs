use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::manifest::SampleRecord;
use crate::error::{CraftError, Result};
use crate::seed::{name_index, stream_rng, Stream};
use crate::trainer::group_advantage;

/// How the training set is picked from the filtered pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SelectionStrategy {
    Top(usize),
    Low(usize),
    /// Uniform without replacement over pairs; the seed comes from the run.
    Random(usize),
    All,
}

impl SelectionStrategy {
    pub fn k(self) -> Option<usize> {
        match self {
            SelectionStrategy::Top(k) | SelectionStrategy::Low(k) | SelectionStrategy::Random(k) => Some(k),
            SelectionStrategy::All => None,
        }
    }

    pub fn kind(self) -> &'static str {
        match self {
            SelectionStrategy::Top(_) => "top",
            SelectionStrategy::Low(_) => "low",
            SelectionStrategy::Random(_) => "random",
            SelectionStrategy::All => "all",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.k() {
            Some(k) => write!(f, "{}:{k}", self.kind()),
            None => f.write_str("all"),
        }
    }
}

impl FromStr for SelectionStrategy {
    type Err = CraftError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CraftError::Domain(format!("bad strategy `{s}` (expected top:K, random:K, low:K or all)"));
        if s.eq_ignore_ascii_case("all") {
            return Ok(SelectionStrategy::All);
        }
        let (kind, k) = s.split_once(':').ok_or_else(bad)?;
        let k: usize = k.trim().parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(CraftError::Domain("selection size k must be at least 1".into()));
        }
        match kind.trim().to_ascii_lowercase().as_str() {
            "top" => Ok(SelectionStrategy::Top(k)),
            "low" => Ok(SelectionStrategy::Low(k)),
            "random" => Ok(SelectionStrategy::Random(k)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for SelectionStrategy {
    type Error = CraftError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SelectionStrategy> for String {
    fn from(s: SelectionStrategy) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub records: Vec<SampleRecord>,
    pub warnings: Vec<String>,
}

fn by_key(a: &SampleRecord, b: &SampleRecord) -> Ordering {
    (a.prompt_id, a.variant).cmp(&(b.prompt_id, b.variant))
}

/// Applies `strategy` to an advantage-annotated pool.
///
/// Top and Low order by `r_total` and break ties by `(prompt_id, variant)`
/// ascending; the output keeps that order. Random and All return records in
/// key order. Asking for more than the pool holds returns the whole pool and a
/// warning.
pub fn select(pool: &[SampleRecord], strategy: SelectionStrategy, seed: u64) -> Result<Selection> {
    if let Some(r) = pool.iter().find(|r| r.variant == 0) {
        return Err(CraftError::Contract(format!("original sample of prompt {} in selection pool", r.prompt_id)));
    }
    if let Some(r) = pool.iter().find(|r| r.advantage.is_none()) {
        return Err(CraftError::Contract(format!(
            "sample ({}, {}) lacks an advantage annotation",
            r.prompt_id, r.variant
        )));
    }
    let mut warnings = Vec::new();
    let mut sorted: Vec<SampleRecord> = pool.to_vec();
    sorted.sort_by(by_key);
    let k = match strategy.k() {
        Some(k) if k > pool.len() => {
            let w = format!("{strategy} asks for {k} samples but the pool holds {}; taking all", pool.len());
            log::warn!("{w}");
            warnings.push(w);
            pool.len()
        }
        Some(k) => k,
        None => pool.len(),
    };
    let records = match strategy {
        SelectionStrategy::All => sorted,
        SelectionStrategy::Top(_) | SelectionStrategy::Low(_) => {
            let desc = matches!(strategy, SelectionStrategy::Top(_));
            sorted.sort_by(|a, b| {
                let o = a.r_total.total_cmp(&b.r_total);
                let o = if desc { o.reverse() } else { o };
                o.then_with(|| by_key(a, b))
            });
            sorted.truncate(k);
            sorted
        }
        SelectionStrategy::Random(_) => {
            let mut rng = stream_rng(seed, Stream::Select, &[name_index("random"), k as u64]);
            let mut idx = index::sample(&mut rng, sorted.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| sorted[i].clone()).collect()
        }
    };
    Ok(Selection { records, warnings })
}

/// Replaces group advantages by advantages normalised over the selected set
/// as a whole.
pub fn renormalize_advantages(records: &mut [SampleRecord], eps: f64) -> Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    let r: Vec<f64> = records.iter().map(|r| r.r_total).collect();
    let adv = group_advantage(&r, eps)?;
    for (rec, a) in records.iter_mut().zip(adv) {
        rec.advantage = Some(a);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::filter::RuleFlags;

    fn rec(id: u64, v: u32, r: f64) -> SampleRecord {
        SampleRecord {
            prompt_id: id,
            variant: v,
            class: 0,
            seed: 0,
            x0: vec![0.0, 0.0],
            r_h: 0.0,
            r_p: 0.0,
            r_a: 0.0,
            r_total: r,
            advantage: Some(0.0),
            retained_under: RuleFlags::all(),
        }
    }

    fn pool() -> Vec<SampleRecord> {
        vec![rec(3, 1, 0.5), rec(1, 2, 2.0), rec(1, 1, 0.5), rec(2, 4, -1.0), rec(2, 3, 2.0)]
    }

    fn keys(s: &Selection) -> Vec<(u64, u32)> {
        s.records.iter().map(|r| (r.prompt_id, r.variant)).collect()
    }

    #[test]
    fn top_and_low_break_ties_by_key() {
        let top = select(&pool(), SelectionStrategy::Top(3), 0).unwrap();
        assert_eq!(keys(&top), vec![(1, 2), (2, 3), (1, 1)]);
        let low = select(&pool(), SelectionStrategy::Low(2), 0).unwrap();
        assert_eq!(keys(&low), vec![(2, 4), (1, 1)]);
    }

    #[test]
    fn oversize_request_warns_and_takes_all() {
        let s = select(&pool(), SelectionStrategy::Top(99), 0).unwrap();
        assert_eq!(s.records.len(), 5);
        assert_eq!(s.warnings.len(), 1);
        let mut a = keys(&s);
        a.sort();
        assert_eq!(a, keys(&select(&pool(), SelectionStrategy::All, 0).unwrap()));
    }

    #[test]
    fn random_is_seeded() {
        let a = select(&pool(), SelectionStrategy::Random(3), 11).unwrap();
        assert_eq!(a, select(&pool(), SelectionStrategy::Random(3), 11).unwrap());
        assert_eq!(a.records.len(), 3);
        let distinct: std::collections::BTreeSet<_> = keys(&a).into_iter().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn rejects_originals_and_unannotated() {
        let mut p = pool();
        p.push(rec(9, 0, 0.0));
        assert!(select(&p, SelectionStrategy::All, 0).is_err());
        let mut p = pool();
        p[0].advantage = None;
        assert!(select(&p, SelectionStrategy::All, 0).is_err());
    }

    #[test]
    fn strategy_strings() {
        for s in ["top:50", "low:3", "random:7", "all"] {
            assert_eq!(s.parse::<SelectionStrategy>().unwrap().to_string(), s);
        }
        assert!("top:0".parse::<SelectionStrategy>().is_err());
        assert!("best:3".parse::<SelectionStrategy>().is_err());
        assert!("top".parse::<SelectionStrategy>().is_err());
    }

    #[test]
    fn renormalised_set_sums_to_zero() {
        let mut p = pool();
        renormalize_advantages(&mut p, 1e-8).unwrap();
        let s: f64 = p.iter().map(|r| r.advantage.unwrap()).sum();
        assert!(s.abs() < 1e-12);
    }
}
