//! Line-delimited dataset manifests.
//!
//! Line 1 is a [`ManifestHeader`], every further line one [`SampleRecord`].
//! Readers check the format tag and version before anything else and refuse
//! versions newer than they understand.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::filter::{FilterRule, RuleFlags};
use super::generate::InvalidGroup;
use super::select::SelectionStrategy;
use crate::error::{CraftError, Result};
use crate::reward::{CompositeWeights, RewardScaler, RewardVector};

pub const MANIFEST_FORMAT: &str = "craft-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Every generated sample, originals included.
    Pool,
    /// Refined samples of groups retained under one rule, with advantages.
    Filtered,
    /// The training set.
    Selected,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pool => "pool",
            Stage::Filtered => "filtered",
            Stage::Selected => "selected",
        }
    }
}

/// One sample of the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub prompt_id: u64,
    pub variant: u32,
    pub class: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub r_h: f64,
    pub r_p: f64,
    pub r_a: f64,
    pub r_total: f64,
    pub advantage: Option<f64>,
    pub retained_under: RuleFlags,
}

impl SampleRecord {
    pub fn rewards(&self) -> RewardVector<f64> {
        RewardVector {
            h: self.r_h,
            p: self.r_p,
            a: self.r_a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCounts {
    pub groups: usize,
    pub records: usize,
    pub invalid_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    /// Digest of the full run configuration.
    pub config_hash: String,
    /// Digest of the configuration sections that determine this data.
    pub lineage_hash: String,
    pub generator: String,
    pub seed: u64,
    pub group_size: usize,
    pub scaler: RewardScaler<f64>,
    pub weights: CompositeWeights<f64>,
    pub rule: Option<FilterRule>,
    pub strategy: Option<SelectionStrategy>,
    pub advantage_eps: f64,
    pub renormalized: bool,
    pub counts: ManifestCounts,
    pub invalid: Vec<InvalidGroup>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
}

pub fn hash_hex(h: u64) -> String {
    format!("{h:016x}")
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let ctx = |line: usize, e: &dyn std::fmt::Display| CraftError::Format(format!("{}:{line}: {e}", path.display()));
        let mut lines = BufReader::new(File::open(path)?).lines();
        let first = lines.next().ok_or_else(|| ctx(1, &"empty manifest"))??;
        let raw: serde_json::Value = serde_json::from_str(&first).map_err(|e| ctx(1, &e))?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(MANIFEST_FORMAT) {
            return Err(ctx(1, &"not a craft manifest"));
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| ctx(1, &"missing version"))?;
        if version > MANIFEST_VERSION as u64 {
            return Err(ctx(
                1,
                &format!("manifest version {version} is newer than supported version {MANIFEST_VERSION}"),
            ));
        }
        let header: ManifestHeader = serde_json::from_value(raw).map_err(|e| ctx(1, &e))?;
        let mut records = Vec::with_capacity(header.counts.records);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| ctx(i + 2, &e))?);
        }
        if records.len() != header.counts.records {
            return Err(ctx(
                1,
                &format!("header announces {} records, found {}", header.counts.records, records.len()),
            ));
        }
        Ok(Self { header, records })
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.header.stage == stage {
            Ok(())
        } else {
            Err(CraftError::Contract(format!(
                "expected a {} manifest, got a {} manifest",
                stage.name(),
                self.header.stage.name()
            )))
        }
    }

    /// Refuses artifacts produced under a different data lineage.
    pub fn expect_lineage(&self, lineage_hash: u64) -> Result<()> {
        let want = hash_hex(lineage_hash);
        if self.header.lineage_hash == want {
            Ok(())
        } else {
            Err(CraftError::Contract(format!(
                "manifest lineage hash {} does not match the current configuration ({want})",
                self.header.lineage_hash
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_manifest() -> Manifest {
        let rec = SampleRecord {
            prompt_id: 4,
            variant: 2,
            class: 1,
            seed: 99,
            x0: vec![0.1, -2.5e-7],
            r_h: -1.0 / 3.0,
            r_p: 0.2,
            r_a: -0.0,
            r_total: 1e-300,
            advantage: Some(-0.75),
            retained_under: [FilterRule::H, FilterRule::PA].into_iter().collect(),
        };
        Manifest {
            header: ManifestHeader {
                format: MANIFEST_FORMAT.into(),
                version: MANIFEST_VERSION,
                stage: Stage::Filtered,
                config_hash: hash_hex(1),
                lineage_hash: hash_hex(2),
                generator: "test".into(),
                seed: 42,
                group_size: 4,
                scaler: RewardScaler {
                    mean: [0.0; 3],
                    std: [1.0; 3],
                    pool_size: 5,
                },
                weights: CompositeWeights::DEFAULT,
                rule: Some(FilterRule::HPA),
                strategy: None,
                advantage_eps: 1e-8,
                renormalized: false,
                counts: ManifestCounts {
                    groups: 1,
                    records: 1,
                    invalid_groups: 0,
                },
                invalid: vec![],
                warnings: vec![],
            },
            records: vec![rec],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let m = sample_manifest();
        m.write(&p).unwrap();
        let back = Manifest::read(&p).unwrap();
        assert_eq!(back, m);
        let bytes = std::fs::read(&p).unwrap();
        back.write(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn future_version_fails_closed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut m = sample_manifest();
        m.header.version = MANIFEST_VERSION + 1;
        m.write(&p).unwrap();
        let err = Manifest::read(&p).unwrap_err().to_string();
        assert!(err.contains("newer"), "{err}");
    }

    #[test]
    fn stage_and_lineage_guards() {
        let m = sample_manifest();
        assert!(m.expect_stage(Stage::Filtered).is_ok());
        assert!(m.expect_stage(Stage::Selected).is_err());
        assert!(m.expect_lineage(2).is_ok());
        assert!(m.expect_lineage(3).is_err());
    }
}
