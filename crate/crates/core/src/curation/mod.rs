//! Prompt refinement, candidate generation, composite reward filtering and
//! training-set selection.

pub mod filter;
pub mod generate;
pub mod manifest;
pub mod pool;
pub mod prompts;
pub mod provider;
pub mod select;

pub use filter::{apply_filter, group_passes, FilterRule, RuleFlags};
pub use generate::{
    fill_r_total, generate_and_score, pool_rewards, sample_seed, score_pool, GenerationGroup, GenerationOutput,
    InvalidGroup,
};
pub use manifest::{Manifest, ManifestCounts, ManifestHeader, SampleRecord, Stage};
pub use pool::{filter_pool, group_records, pool_records, rescore, Filtered};
pub use prompts::{class_embedding, ensure_disjoint, PromptSet, EVAL_ID_OFFSET};
pub use provider::{
    refine_prompts, write_refinement_requests, FileExchangeProvider, PerturbationProvider, RefinementProvider,
    RefinementRequest, RefinementResponse,
};
pub use select::{renormalize_advantages, select, Selection, SelectionStrategy};
