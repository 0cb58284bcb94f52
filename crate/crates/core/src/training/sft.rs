use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, LanguageModel};
use crate::domain::InstructionRecord;

/// An (input, target) pair for the auto-regressive objective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub input: String,
    pub target: String,
}

impl SftExample {
    pub fn new(input: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            target: target.into(),
        }
    }

    /// Instruct and input form the conditioning prompt; the serialized trace
    /// is the target.
    pub fn from_record(record: &InstructionRecord) -> Self {
        Self {
            input: format!("{}\n\n{}", record.instruct, record.input),
            target: record.output.clone(),
        }
    }
}

/// Negative summed log-likelihood of every target token given its input and
/// the preceding target tokens. Summed over tokens and examples; no mean.
pub fn sft_loss(batch: &[SftExample], model: &dyn LanguageModel) -> Result<f64, BackendError> {
    let mut loss = 0.0;
    for ex in batch {
        if ex.target.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty SFT target".into()));
        }
        loss -= model.score(&ex.input, &ex.target)?.total();
    }
    Ok(loss)
}
