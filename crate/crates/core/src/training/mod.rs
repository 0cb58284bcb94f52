//! Training signals: the SFT objective, the composite GRPO reward, the
//! self-evolving dataset update and rollout export.
//!
//! No weights are updated here. The crate emits SFT JSONL and GRPO rollout
//! files; [`TrainerHints`] travels alongside them as advisory metadata.

mod evolve;
mod grpo;
mod reward;
mod sft;

pub use evolve::{evolve_dataset, EvolutionState, EvolveError, RewardedSample};
pub use grpo::{
    group_advantages, grpo_request, run_grpo_round, GrpoError, GrpoParams, GrpoPrompt,
    RolloutRow, RoundStats,
};
pub use reward::{
    accuracy_reward, format_components, format_reward, total_reward, RewardBreakdown,
    RewardConfig,
};
pub use sft::{sft_loss, SftExample};

use serde::{Deserialize, Serialize};

/// Hyperparameters handed to the external trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerHints {
    pub sft_epochs: u32,
    pub sft_learning_rate: f64,
    pub sft_max_length: u32,
    pub sft_batch_per_device: u32,
    pub sft_grad_accumulation: u32,
    pub adam_betas: (f64, f64),
    pub grpo_learning_rate: f64,
    pub grpo_batch_per_device: u32,
    pub grpo_grad_accumulation: u32,
    pub lr_schedule: String,
}

impl Default for TrainerHints {
    fn default() -> Self {
        Self {
            sft_epochs: 6,
            sft_learning_rate: 1e-5,
            sft_max_length: 1024,
            sft_batch_per_device: 2,
            sft_grad_accumulation: 4,
            adam_betas: (0.9, 0.98),
            grpo_learning_rate: 3e-6,
            grpo_batch_per_device: 4,
            grpo_grad_accumulation: 16,
            lr_schedule: "cosine".into(),
        }
    }
}

impl GrpoPrompt {
    /// Prompt for a record whose gold answer is the answer of its own trace.
    pub fn from_record(record: &crate::domain::InstructionRecord) -> Option<Self> {
        let trace = record.trace().ok()?;
        Some(Self {
            instruct: record.instruct.clone(),
            input: record.input.clone(),
            gold: trace.answer,
            origin: record.origin,
        })
    }
}
