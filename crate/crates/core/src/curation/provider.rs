//! Prompt refinement providers.
//!
//! A provider turns an original condition into its `j`-th refined variant.
//! Refinements only diversify generation, so every variant must stay within a
//! configured radius of the original embedding.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prompts::PromptSet;
use crate::diffusion::Condition;
use crate::error::{CraftError, Result};
use crate::scalar::{dist_sq, Scalar};
use crate::seed::{stream_rng, Stream};

/// Slack on the radius check to absorb rounding in the provider.
const RADIUS_SLACK: f64 = 1e-12;

pub trait RefinementProvider<F: Scalar>: Sync {
    /// Variant `variant >= 1` of `original`.
    fn refine(&self, original: &Condition<F>, variant: u32) -> Result<Condition<F>>;

    /// Largest allowed embedding displacement.
    fn radius(&self) -> F;
}

/// Populates every prompt's `N` variants, checking the radius contract.
pub fn refine_prompts<F: Scalar, R: RefinementProvider<F> + ?Sized>(
    prompts: &PromptSet<F>,
    provider: &R,
) -> Result<PromptSet<F>> {
    let mut out = prompts.clone();
    let radius = provider.radius();
    let limit = radius * radius + F::lit(RADIUS_SLACK);
    for (i, orig) in prompts.originals.iter().enumerate() {
        let mut vs = Vec::with_capacity(prompts.refinements_per_prompt);
        for j in 1..=prompts.refinements_per_prompt as u32 {
            let c = provider.refine(orig, j)?;
            let fail = |reason: String| CraftError::Provider {
                prompt_id: orig.id,
                reason,
            };
            if c.id != orig.id || c.variant != j || c.class != orig.class {
                return Err(fail(format!("refinement {j} returned mismatched identity ({}, {})", c.id, c.variant)));
            }
            if c.embedding.len() != orig.embedding.len() {
                return Err(fail(format!("refinement {j} changed embedding dimension")));
            }
            if !(dist_sq(&c.embedding, &orig.embedding) <= limit) {
                return Err(fail(format!("refinement {j} moved beyond radius {radius}")));
            }
            vs.push(c);
        }
        out.variants[i] = vs;
    }
    Ok(out)
}

/// Offline default: a seeded random direction per `(prompt, variant)` with
/// length uniform in `(radius / 2, radius]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationProvider<F> {
    pub radius: F,
    pub seed: u64,
}

impl<F: Scalar> RefinementProvider<F> for PerturbationProvider<F> {
    fn refine(&self, original: &Condition<F>, variant: u32) -> Result<Condition<F>> {
        use rand::Rng;
        let mut rng = stream_rng(self.seed, Stream::Refine, &[original.id, variant as u64]);
        let d = original.embedding.len();
        let dir: Vec<F> = (0..d).map(|_| F::standard_normal(&mut rng)).collect();
        let norm = crate::scalar::norm_sq(&dir).sqrt();
        let u: f64 = 1.0 - rng.random::<f64>();
        let len = self.radius * F::lit(0.5 + 0.5 * u);
        let embedding = if norm > F::zero() {
            original
                .embedding
                .iter()
                .zip(&dir)
                .map(|(&e, &g)| e + len * g / norm)
                .collect()
        } else {
            original.embedding.clone()
        };
        Ok(Condition {
            id: original.id,
            variant,
            class: original.class,
            embedding,
        })
    }

    fn radius(&self) -> F {
        self.radius
    }
}

/// One line of the request file handed to an external refiner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementRequest {
    pub prompt_id: u64,
    pub variant: u32,
    pub class: usize,
    pub embedding: Vec<f64>,
    pub radius: f64,
}

/// One line of the response file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementResponse {
    pub prompt_id: u64,
    pub variant: u32,
    pub embedding: Vec<f64>,
}

/// Writes one request per `(prompt, variant)`, ordered by prompt then variant.
pub fn write_refinement_requests<F: Scalar>(path: &Path, prompts: &PromptSet<F>, radius: f64) -> Result<usize> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut count = 0;
    for orig in &prompts.originals {
        for j in 1..=prompts.refinements_per_prompt as u32 {
            let req = RefinementRequest {
                prompt_id: orig.id,
                variant: j,
                class: orig.class,
                embedding: orig.embedding.iter().map(|e| e.as_f64()).collect(),
                radius,
            };
            serde_json::to_writer(&mut w, &req)?;
            w.write_all(b"\n")?;
            count += 1;
        }
    }
    w.flush()?;
    Ok(count)
}

/// Reads refinements produced by an external process.
#[derive(Debug, Clone, PartialEq)]
pub struct FileExchangeProvider {
    pub radius: f64,
    responses: BTreeMap<(u64, u32), Vec<f64>>,
}

impl FileExchangeProvider {
    pub fn load(path: &Path, radius: f64) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut responses = BTreeMap::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: RefinementResponse = serde_json::from_str(&line)
                .map_err(|e| CraftError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            if responses.insert((r.prompt_id, r.variant), r.embedding).is_some() {
                return Err(CraftError::Provider {
                    prompt_id: r.prompt_id,
                    reason: format!("duplicate response for variant {}", r.variant),
                });
            }
        }
        Ok(Self { radius, responses })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl<F: Scalar> RefinementProvider<F> for FileExchangeProvider {
    fn refine(&self, original: &Condition<F>, variant: u32) -> Result<Condition<F>> {
        let emb = self
            .responses
            .get(&(original.id, variant))
            .ok_or_else(|| CraftError::Provider {
                prompt_id: original.id,
                reason: format!("no response for variant {variant}"),
            })?;
        Ok(Condition {
            id: original.id,
            variant,
            class: original.class,
            embedding: emb.iter().map(|&e| F::lit(e)).collect(),
        })
    }

    fn radius(&self) -> F {
        F::lit(self.radius)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturbation_respects_radius_and_is_deterministic() {
        let ps = PromptSet::<f64>::toy(20, 3, 0, 4).unwrap();
        let p = PerturbationProvider { radius: 0.3, seed: 7 };
        let a = refine_prompts(&ps, &p).unwrap();
        let b = refine_prompts(&ps, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.is_refined());
        assert_eq!(a.originals, ps.originals);
        for (i, orig) in a.originals.iter().enumerate() {
            for v in &a.variants[i] {
                let d = dist_sq(&v.embedding, &orig.embedding).sqrt();
                assert!(d <= 0.3 + 1e-12 && d > 0.15 - 1e-12, "{d}");
            }
        }
    }

    #[test]
    fn zero_radius_reproduces_originals() {
        let ps = PromptSet::<f64>::toy(5, 3, 0, 2).unwrap();
        let r = refine_prompts(&ps, &PerturbationProvider { radius: 0.0, seed: 1 }).unwrap();
        for (i, orig) in r.originals.iter().enumerate() {
            assert!(r.variants[i].iter().all(|v| v.embedding == orig.embedding));
        }
    }

    struct Rogue;

    impl RefinementProvider<f64> for Rogue {
        fn refine(&self, o: &Condition<f64>, variant: u32) -> Result<Condition<f64>> {
            let mut c = o.clone();
            c.variant = variant;
            c.embedding[0] += 5.0;
            Ok(c)
        }

        fn radius(&self) -> f64 {
            0.1
        }
    }

    #[test]
    fn out_of_radius_names_prompt() {
        let ps = PromptSet::<f64>::toy(3, 3, 40, 1).unwrap();
        match refine_prompts(&ps, &Rogue) {
            Err(CraftError::Provider { prompt_id, .. }) => assert_eq!(prompt_id, 40),
            other => panic!("unexpected {other:?}"),
        }
    }
}
