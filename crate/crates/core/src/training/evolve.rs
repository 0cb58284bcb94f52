use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::reward::RewardBreakdown;
use crate::domain::InstructionRecord;

/// A scored rollout: the prompt is `record.input`, the completion
/// `record.output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardedSample {
    pub record: InstructionRecord,
    pub reward: RewardBreakdown,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvolveError {
    #[error("rollout from round {found} applied to state at round {expected}")]
    RoundMismatch { expected: u32, found: u32 },
    #[error("threshold {threshold} outside [0, {max}]")]
    Threshold { threshold: f64, max: f64 },
}

/// Training set at round `t`, deduplicated by (Input, Output) fingerprint
/// and kept in insertion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionState {
    pub dataset: IndexMap<String, InstructionRecord>,
    pub round: u32,
    pub threshold: f64,
}

impl EvolutionState {
    pub const DEFAULT_THRESHOLD: f64 = 1.5;

    pub fn new(
        records: impl IntoIterator<Item = InstructionRecord>,
        threshold: f64,
        max_reward: f64,
    ) -> Result<Self, EvolveError> {
        if !(0.0..=max_reward).contains(&threshold) {
            return Err(EvolveError::Threshold {
                threshold,
                max: max_reward,
            });
        }
        let mut dataset = IndexMap::new();
        for r in records {
            dataset.entry(r.fingerprint()).or_insert(r);
        }
        Ok(Self {
            dataset,
            round: 0,
            threshold,
        })
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &InstructionRecord> {
        self.dataset.values()
    }
}

/// `D_{t+1} = D_t ∪ { s ∈ rollouts : R(s) > θ_r }`, with a strict inequality.
pub fn evolve_dataset(
    state: &EvolutionState,
    rollouts: &[RewardedSample],
) -> Result<EvolutionState, EvolveError> {
    if let Some(bad) = rollouts.iter().find(|s| s.round != state.round) {
        return Err(EvolveError::RoundMismatch {
            expected: state.round,
            found: bad.round,
        });
    }
    let mut next = state.clone();
    for s in rollouts.iter().filter(|s| s.reward.total > state.threshold) {
        next.dataset
            .entry(s.record.fingerprint())
            .or_insert_with(|| s.record.clone());
    }
    next.round += 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Origin;

    fn rec(i: usize) -> InstructionRecord {
        InstructionRecord {
            instruct: "i".into(),
            input: format!("Question: q{i}\nEdit Fact: f"),
            output: format!("<think></think><answer>{i}</answer>"),
            origin: Origin::Synthetic,
        }
    }

    fn sample(i: usize, total: f64, round: u32) -> RewardedSample {
        RewardedSample {
            record: rec(i),
            reward: RewardBreakdown {
                accuracy: 0.0,
                format: total,
                tags: 0.0,
                keywords: 0.0,
                total,
            },
            round,
        }
    }

    #[test]
    fn five_plus_two() {
        let s = EvolutionState::new((0..5).map(rec), 1.0, 2.0).unwrap();
        let next = evolve_dataset(
            &s,
            &[sample(10, 2.0, 0), sample(11, 1.5, 0), sample(12, 0.5, 0)],
        )
        .unwrap();
        assert_eq!(next.len(), 7);
        assert_eq!(next.round, 1);
    }

    #[test]
    fn duplicates_and_threshold() {
        let s = EvolutionState::new((0..5).map(rec), 1.0, 2.0).unwrap();
        assert_eq!(evolve_dataset(&s, &[sample(3, 2.0, 0)]).unwrap().len(), 5);
        let same = evolve_dataset(&s, &[sample(9, 1.0, 0), sample(8, 0.2, 0)]).unwrap();
        assert_eq!(same.dataset, s.dataset);
    }

    #[test]
    fn errors() {
        let s = EvolutionState::new([], 1.0, 2.0).unwrap();
        assert_eq!(
            evolve_dataset(&s, &[sample(1, 2.0, 3)]),
            Err(EvolveError::RoundMismatch { expected: 0, found: 3 })
        );
        assert!(EvolutionState::new([], 2.5, 2.0).is_err());
    }
}
