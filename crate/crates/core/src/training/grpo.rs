//! One GRPO sampling round: sample a group of completions per prompt, score
//! them, normalize rewards within each group and export the rollouts for an
//! external trainer. High-reward samples also feed the next round's dataset.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::evolve::{evolve_dataset, EvolutionState, EvolveError, RewardedSample};
use super::reward::{total_reward, RewardBreakdown, RewardConfig};
use crate::backends::{BackendError, ChatRequest, LanguageModel};
use crate::domain::{InstructionRecord, Origin};

/// A training prompt with its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrpoPrompt {
    pub instruct: String,
    pub input: String,
    pub gold: String,
    pub origin: Origin,
}

impl GrpoPrompt {
    /// Full prompt text as exported: instruct, blank line, input.
    pub fn text(&self) -> String {
        format!("{}\n\n{}", self.instruct, self.input)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoParams {
    pub group_size: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Member `j` of every group is sampled with seed `seed + j`.
    pub seed: u64,
    pub std_floor: f64,
    pub reward: RewardConfig,
}

impl Default for GrpoParams {
    fn default() -> Self {
        Self {
            group_size: 4,
            temperature: 1.0,
            max_tokens: 1024,
            seed: 0,
            std_floor: 1e-6,
            reward: RewardConfig::default(),
        }
    }
}

/// One exported rollout line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRow {
    pub prompt: String,
    pub completion: String,
    pub reward_total: f64,
    pub reward_accuracy: f64,
    pub reward_format: f64,
    pub group_id: usize,
    pub advantage: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: u32,
    pub prompts: usize,
    pub samples: usize,
    /// Groups reused from an earlier, interrupted run.
    pub resumed_groups: usize,
    pub mean_reward: f64,
    pub mean_accuracy: f64,
    pub mean_format: f64,
    pub added: usize,
    pub dataset_size: usize,
}

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group size must be at least 2, got {0}")]
    GroupSize(usize),
    #[error("backend failed after {completed} completed prompts: {source}")]
    Backend {
        completed: usize,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Evolve(#[from] EvolveError),
    #[error("rollout file: {0}")]
    Io(#[from] std::io::Error),
}

/// `(r - mean) / max(std, floor)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(std_floor);
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Request used for member `member` of a prompt's group.
pub fn grpo_request(prompt: &GrpoPrompt, member: usize, params: &GrpoParams) -> ChatRequest {
    ChatRequest::new(prompt.instruct.clone(), prompt.input.clone())
        .temperature(params.temperature)
        .max_tokens(params.max_tokens)
        .seed(Some(params.seed + member as u64))
}

fn load_complete_groups(
    path: &Path,
    prompts: &[GrpoPrompt],
    group_size: usize,
) -> HashMap<usize, Vec<RolloutRow>> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return HashMap::new();
    };
    let mut groups: HashMap<usize, Vec<RolloutRow>> = HashMap::new();
    for line in text.lines() {
        match serde_json::from_str::<RolloutRow>(line) {
            Ok(row) => groups.entry(row.group_id).or_default().push(row),
            Err(_) => break,
        }
    }
    groups.retain(|gid, rows| {
        rows.len() == group_size
            && prompts
                .get(*gid)
                .is_some_and(|p| rows.iter().all(|r| r.prompt == p.text()))
    });
    groups
}

fn sample_group(
    prompt: &GrpoPrompt,
    group_id: usize,
    backend: &dyn LanguageModel,
    params: &GrpoParams,
) -> Result<Vec<RolloutRow>, BackendError> {
    let mut completions = Vec::with_capacity(params.group_size);
    for j in 0..params.group_size {
        let completion = backend.complete(&grpo_request(prompt, j, params))?;
        let reward = total_reward(&completion, &prompt.gold, &params.reward);
        completions.push((completion, reward));
    }
    let totals: Vec<f64> = completions.iter().map(|(_, r)| r.total).collect();
    let adv = group_advantages(&totals, params.std_floor);
    Ok(completions
        .into_iter()
        .zip(adv)
        .map(|((completion, r), advantage)| RolloutRow {
            prompt: prompt.text(),
            completion,
            reward_total: r.total,
            reward_accuracy: r.accuracy,
            reward_format: r.format,
            group_id,
            advantage,
        })
        .collect())
}

/// Samples, scores and exports one round, then applies the self-evolution
/// update. The rollout file is written group by group; groups completed by
/// an earlier interrupted run are reused instead of resampled, so a rerun
/// produces the same file.
pub fn run_grpo_round(
    state: &EvolutionState,
    prompts: &[GrpoPrompt],
    backend: &dyn LanguageModel,
    params: &GrpoParams,
    rollout_path: &Path,
) -> Result<(EvolutionState, RoundStats), GrpoError> {
    if params.group_size < 2 {
        return Err(GrpoError::GroupSize(params.group_size));
    }
    let mut done = load_complete_groups(rollout_path, prompts, params.group_size);
    if let Some(dir) = rollout_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(rollout_path)?);

    let mut stats = RoundStats {
        round: state.round,
        prompts: prompts.len(),
        ..Default::default()
    };
    let mut samples = Vec::new();
    for (gid, prompt) in prompts.iter().enumerate() {
        let rows = match done.remove(&gid) {
            Some(rows) => {
                stats.resumed_groups += 1;
                rows
            }
            None => sample_group(prompt, gid, backend, params).map_err(|source| {
                let _ = file.flush();
                GrpoError::Backend {
                    completed: gid,
                    source,
                }
            })?,
        };
        for row in &rows {
            serde_json::to_writer(&mut file, row).map_err(std::io::Error::from)?;
            file.write_all(b"\n")?;
            samples.push(RewardedSample {
                record: InstructionRecord {
                    instruct: prompt.instruct.clone(),
                    input: prompt.input.clone(),
                    output: row.completion.clone(),
                    origin: prompt.origin,
                },
                reward: RewardBreakdown {
                    accuracy: row.reward_accuracy,
                    format: row.reward_format,
                    tags: 0.0,
                    keywords: 0.0,
                    total: row.reward_total,
                },
                round: state.round,
            });
        }
        file.flush()?;
    }

    let next = evolve_dataset(state, &samples)?;
    let n = samples.len().max(1) as f64;
    stats.samples = samples.len();
    stats.mean_reward = samples.iter().map(|s| s.reward.total).sum::<f64>() / n;
    stats.mean_accuracy = samples.iter().map(|s| s.reward.accuracy).sum::<f64>() / n;
    stats.mean_format = samples.iter().map(|s| s.reward.format).sum::<f64>() / n;
    stats.added = next.len() - state.len();
    stats.dataset_size = next.len();
    Ok((next, stats))
}
