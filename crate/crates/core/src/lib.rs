//! Chain-of-thought knowledge editing.
//!
//! The crate covers the whole editing lifecycle short of weight updates:
//!
//! - [`cotgen`] and [`augment`] build chain-of-thought instruction data with
//!   an LLM agent and filter it,
//! - [`training`] computes the SFT loss, the composite GRPO reward and the
//!   self-evolving dataset update, and exports rollouts for an external
//!   trainer,
//! - [`memory`] and [`editor`] perform retrieval-augmented editing at
//!   inference time,
//! - [`evaluation`] loads editing benchmarks and computes the metric suite.
//!
//! Language models are reached through [`backends::LanguageModel`]; the
//! scripted implementation makes every pipeline deterministic under test.

pub mod augment;
pub mod backends;
pub mod cotgen;
pub mod domain;
pub mod editor;
pub mod evaluation;
pub mod memory;
pub mod schema;
pub mod training;

pub use domain::{
    normalize_answer, parse_trace, render_trace, CoTTrace, EditContext, EditFact,
    InstructionRecord, MalformedTrace, Origin, Question, ReasoningStep, RecordInput,
};

use sha2::{Digest, Sha256};

/// Hex SHA-256 over length-prefixed parts, so that `["ab", "c"]` and
/// `["a", "bc"]` differ.
pub fn fingerprint(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Reads a JSON Lines file of instruction records.
pub fn read_records(path: &std::path::Path) -> std::io::Result<Vec<InstructionRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                )
            })
        })
        .collect()
}

/// Writes records as JSON Lines, one record per line.
pub fn write_records(path: &std::path::Path, records: &[InstructionRecord]) -> std::io::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
