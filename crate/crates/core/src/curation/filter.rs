//! Composite reward filtering.
//!
//! A group is kept under a rule when at least one refined sample beats the
//! original sample on every channel of the rule at the same time. Comparisons
//! use raw rewards; `r_total` is never consulted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::generate::GenerationGroup;
use crate::error::{CraftError, Result};
use crate::reward::{RewardId, RewardVector};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterRule {
    H,
    P,
    A,
    HA,
    PA,
    HPA,
}

impl FilterRule {
    pub const ALL: [FilterRule; 6] = [
        FilterRule::H,
        FilterRule::P,
        FilterRule::A,
        FilterRule::HA,
        FilterRule::PA,
        FilterRule::HPA,
    ];

    pub fn channels(self) -> &'static [RewardId] {
        use RewardId::*;
        match self {
            FilterRule::H => &[H],
            FilterRule::P => &[P],
            FilterRule::A => &[A],
            FilterRule::HA => &[H, A],
            FilterRule::PA => &[P, A],
            FilterRule::HPA => &[H, P, A],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FilterRule::H => "h",
            FilterRule::P => "p",
            FilterRule::A => "a",
            FilterRule::HA => "ha",
            FilterRule::PA => "pa",
            FilterRule::HPA => "hpa",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for FilterRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterRule {
    type Err = CraftError;

    fn from_str(s: &str) -> Result<Self> {
        FilterRule::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CraftError::Domain(format!("unknown filter rule `{s}` (expected h|p|a|ha|pa|hpa)")))
    }
}

/// Set of rules a group survives. Serialised as a list of rule names.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct RuleFlags(u8);

impl TryFrom<Vec<String>> for RuleFlags {
    type Error = CraftError;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::from_names(&v)
    }
}

impl From<RuleFlags> for Vec<String> {
    fn from(f: RuleFlags) -> Self {
        f.names()
    }
}

impl RuleFlags {
    pub fn all() -> Self {
        FilterRule::ALL.into_iter().collect()
    }

    pub fn contains(self, rule: FilterRule) -> bool {
        self.0 & rule.bit() != 0
    }

    pub fn insert(&mut self, rule: FilterRule) {
        self.0 |= rule.bit();
    }

    pub fn rules(self) -> Vec<FilterRule> {
        FilterRule::ALL.into_iter().filter(|r| self.contains(*r)).collect()
    }

    pub fn names(self) -> Vec<String> {
        self.rules().into_iter().map(|r| r.name().to_string()).collect()
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut f = Self::default();
        for n in names {
            f.insert(n.as_ref().parse()?);
        }
        Ok(f)
    }

    /// Evaluates every rule against one group's rewards.
    pub fn evaluate<F: Scalar>(rewards: &[RewardVector<F>]) -> Self {
        FilterRule::ALL
            .into_iter()
            .filter(|r| group_passes(rewards, *r))
            .collect()
    }
}

impl FromIterator<FilterRule> for RuleFlags {
    fn from_iter<I: IntoIterator<Item = FilterRule>>(iter: I) -> Self {
        let mut f = Self::default();
        for r in iter {
            f.insert(r);
        }
        f
    }
}

/// `rewards[0]` is the original sample, `rewards[1..]` the refined ones.
pub fn group_passes<F: Scalar>(rewards: &[RewardVector<F>], rule: FilterRule) -> bool {
    let Some((original, refined)) = rewards.split_first() else {
        return false;
    };
    refined.iter().any(|r| {
        rule.channels()
            .iter()
            .all(|&c| r.get(c) > original.get(c))
    })
}

/// Prompt ids of the groups retained under `rule`, in input order.
pub fn apply_filter<F: Scalar>(groups: &[GenerationGroup<F>], rule: FilterRule) -> Vec<u64> {
    groups
        .iter()
        .filter(|g| group_passes(&g.rewards, rule))
        .map(|g| g.prompt_id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rv(h: f64, p: f64, a: f64) -> RewardVector<f64> {
        RewardVector { h, p, a }
    }

    #[test]
    fn dominating_refinement_passes_everything() {
        let g = [rv(0.0, 0.0, 0.0), rv(1.0, 1.0, 1.0)];
        for rule in FilterRule::ALL {
            assert!(group_passes(&g, rule), "{rule}");
        }
    }

    #[test]
    fn split_wins_do_not_combine() {
        let g = [rv(0.0, 0.0, 0.0), rv(1.0, -1.0, -1.0), rv(-1.0, -1.0, 1.0)];
        assert!(group_passes(&g, FilterRule::H));
        assert!(group_passes(&g, FilterRule::A));
        assert!(!group_passes(&g, FilterRule::HA));
        assert!(!group_passes(&g, FilterRule::P));
    }

    #[test]
    fn ties_do_not_count() {
        let g = [rv(1.0, 1.0, 1.0), rv(1.0, 2.0, 2.0)];
        assert!(!group_passes(&g, FilterRule::H));
        assert!(group_passes(&g, FilterRule::PA));
        assert!(!group_passes::<f64>(&[], FilterRule::H));
        assert!(!group_passes(&g[..1], FilterRule::H));
    }

    #[test]
    fn flags_round_trip_names() {
        let f: RuleFlags = [FilterRule::H, FilterRule::HPA].into_iter().collect();
        assert_eq!(f.names(), vec!["h", "hpa"]);
        assert_eq!(RuleFlags::from_names(&f.names()).unwrap(), f);
        assert!("xyz".parse::<FilterRule>().is_err());
        assert_eq!("HA".parse::<FilterRule>().unwrap(), FilterRule::HA);
    }
}
