use std::collections::BTreeSet;

use crate::diffusion::Condition;
use crate::error::{CraftError, Result};
use crate::scalar::Scalar;

/// First prompt id used for held-out evaluation prompts.
pub const EVAL_ID_OFFSET: u64 = 1_000_000;

/// Original prompts and, once refined, their `N` variants.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet<F> {
    pub originals: Vec<Condition<F>>,
    pub refinements_per_prompt: usize,
    /// `variants[i][j - 1]` is refinement `j` of `originals[i]`; empty until refined.
    pub variants: Vec<Vec<Condition<F>>>,
}

/// Fixed one-hot embedding of a class id.
pub fn class_embedding<F: Scalar>(class: usize, classes: usize) -> Result<Vec<F>> {
    if class >= classes {
        return Err(CraftError::Domain(format!("class {class} out of range for {classes} classes")));
    }
    let mut e = vec![F::zero(); classes];
    e[class] = F::one();
    Ok(e)
}

impl<F: Scalar> PromptSet<F> {
    pub fn new(originals: Vec<Condition<F>>, refinements_per_prompt: usize) -> Result<Self> {
        if refinements_per_prompt == 0 {
            return Err(CraftError::Domain("need at least one refinement per prompt".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &originals {
            if !c.is_original() {
                return Err(CraftError::Contract(format!("prompt {} is not an original (variant {})", c.id, c.variant)));
            }
            if !seen.insert(c.id) {
                return Err(CraftError::Contract(format!("duplicate prompt id {}", c.id)));
            }
        }
        let variants = vec![Vec::new(); originals.len()];
        Ok(Self {
            originals,
            refinements_per_prompt,
            variants,
        })
    }

    /// `n` prompts with ids `id_offset..id_offset + n`; prompt `i` has class `i % classes`.
    pub fn toy(n: usize, classes: usize, id_offset: u64, refinements_per_prompt: usize) -> Result<Self> {
        if classes == 0 {
            return Err(CraftError::Domain("need at least one class".into()));
        }
        let originals = (0..n)
            .map(|i| {
                Ok(Condition {
                    id: id_offset + i as u64,
                    variant: 0,
                    class: i % classes,
                    embedding: class_embedding(i % classes, classes)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(originals, refinements_per_prompt)
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<u64> {
        self.originals.iter().map(|c| c.id).collect()
    }

    pub fn is_refined(&self) -> bool {
        self.variants.iter().all(|v| v.len() == self.refinements_per_prompt)
    }

    /// Condition `(i, j)` by position, `j = 0` being the original.
    pub fn condition(&self, i: usize, j: usize) -> Result<&Condition<F>> {
        let orig = self
            .originals
            .get(i)
            .ok_or_else(|| CraftError::Contract(format!("prompt index {i} out of range")))?;
        if j == 0 {
            return Ok(orig);
        }
        self.variants[i]
            .get(j - 1)
            .ok_or_else(|| CraftError::Contract(format!("prompt {} has no refinement {j}", orig.id)))
    }
}

/// Fails if any id appears in both sets.
pub fn ensure_disjoint<F>(train: &PromptSet<F>, eval: &PromptSet<F>) -> Result<()>
where
    F: Scalar,
{
    let overlap: Vec<u64> = train.ids().intersection(&eval.ids()).copied().collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(CraftError::Contract(format!(
            "evaluation prompts overlap curation prompts ({} shared ids, first {})",
            overlap.len(),
            overlap[0]
        )))
    }
}
