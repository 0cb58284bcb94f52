//! Data augmentation: entity-relation pairs from a multi-hop QA corpus are
//! turned into new instruction records by the agent, and the results are
//! filtered against a knowledge base.
//!
//! Filtering runs three stages per record: extract an entity and relation
//! chain from the generated question, resolve the chain hop by hop in the
//! knowledge base, and keep the record only when the resolved answer equals
//! the record's answer. A chain the knowledge base cannot resolve drops the
//! record.

mod extract;
mod kb;

pub use extract::{
    extract_entity_relations, load_hotpot, property_for, question_chain, question_entity_span,
    sentence_relation, CorpusFormatError, EntityRelation, HotpotItem, RelationRule, RELATION_RULES,
};
pub use kb::{sparql_query, FixtureFact, FixtureKb, KbError, KnowledgeBase, SparqlKb, WIKIDATA_SPARQL};

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{ChatRequest, LanguageModel};
use crate::cotgen::{CotGenError, GenerationParams, PromptTemplate, RejectReason, TemplateError, TemplateKind};
use crate::domain::{
    normalize_answer, parse_trace, DomainError, InstructionRecord, Knowledge, Origin, RecordInput,
};
use crate::memory::tokens;

const MIN_SYNTH_STEPS: usize = 2;
const FILLER: &[&str] = &["a", "an", "the", "of", "in", "on", "at", "by", "to", "for"];

/// True when every content token of `phrase` occurs in `text`.
fn mentions(text: &str, phrase: &str) -> bool {
    let have: HashSet<String> = tokens(text).collect();
    let mut need = tokens(phrase).filter(|t| !FILLER.contains(&t.as_str())).peekable();
    need.peek().is_some() && need.all(|t| have.contains(&t))
}

fn synthesis_request(
    pair: &EntityRelation,
    template: &PromptTemplate,
    params: &GenerationParams,
    temperature: f64,
) -> Result<ChatRequest, CotGenError> {
    if !matches!(
        template.kind,
        TemplateKind::SynthesizeStructured | TemplateKind::SynthesizeUnstructured
    ) {
        return Err(TemplateError::WrongKind {
            expected: TemplateKind::SynthesizeStructured,
            found: template.kind,
        }
        .into());
    }
    let system = template.system_prompt(&[("{entity}", &pair.entity), ("{relation}", &pair.relation)]);
    let user = format!("Entity: {}\nRelation: {}", pair.entity, pair.relation);
    Ok(params.request(system, user, temperature))
}

/// Checks an agent response and turns it into a record. The response must
/// be a bare JSON object whose only keys are `Input` and `Output`.
pub fn parse_synthesized(
    raw: &str,
    pair: &EntityRelation,
    kind: TemplateKind,
) -> Result<InstructionRecord, CotGenError> {
    let reject = |r: RejectReason| Err(CotGenError::GenerationRejected(r));
    let value: serde_json::Value = match serde_json::from_str(raw.trim()) {
        Ok(v) => v,
        Err(e) => return reject(RejectReason::NotJson(e.to_string())),
    };
    let Some(obj) = value.as_object() else {
        return reject(RejectReason::NotJson("not an object".into()));
    };
    let (input, output) = match (obj.len(), obj.get("Input"), obj.get("Output")) {
        (2, Some(serde_json::Value::String(i)), Some(serde_json::Value::String(o))) => (i, o),
        _ => {
            let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
            return reject(RejectReason::NotJson(format!("keys {keys:?}")));
        }
    };
    let parsed = match RecordInput::parse(input) {
        Ok(p) => p,
        Err(e) => return reject(RejectReason::InvalidInput(e)),
    };
    let structured = kind == TemplateKind::SynthesizeStructured;
    match (&parsed.knowledge, structured) {
        (Knowledge::Facts(_), true) | (Knowledge::Context(_), false) => {}
        _ => return reject(RejectReason::InvalidInput(DomainError::MissingKnowledge)),
    }
    for phrase in [&pair.entity, &pair.relation] {
        if !mentions(input, phrase) {
            return reject(RejectReason::MissingMention(phrase.clone()));
        }
    }
    let trace = match parse_trace(output) {
        Ok(t) => t,
        Err(m) => return reject(RejectReason::Malformed(m)),
    };
    if structured {
        if trace.steps.len() < MIN_SYNTH_STEPS {
            return reject(RejectReason::TooFewSteps {
                found: trace.steps.len(),
                required: MIN_SYNTH_STEPS,
            });
        }
        if trace.extracted_fact.is_some() {
            return reject(RejectReason::UnexpectedExtractedFact);
        }
    } else if trace.extracted_fact.as_deref().is_none_or(|f| f.trim().is_empty()) {
        return reject(RejectReason::MissingExtractedFact);
    }
    Ok(InstructionRecord::new(kind.instruct_text(), &parsed, &trace, Origin::Synthetic))
}

/// Asks the agent for a new record about `pair`.
pub fn synthesize_record(
    pair: &EntityRelation,
    template: &PromptTemplate,
    backend: &dyn LanguageModel,
    params: &GenerationParams,
) -> Result<InstructionRecord, CotGenError> {
    let req = synthesis_request(pair, template, params, params.temperature)?;
    parse_synthesized(&backend.complete(&req)?, pair, template.kind)
}

/// Request sent for `pair` at `temperature`, for keying scripted fixtures.
pub fn synthesis_item_request(
    pair: &EntityRelation,
    template: &PromptTemplate,
    params: &GenerationParams,
    temperature: f64,
) -> Result<ChatRequest, CotGenError> {
    synthesis_request(pair, template, params, temperature)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub pairs: usize,
    pub kept: usize,
    pub rejected: usize,
    pub recovered_by_retry: usize,
}

/// Synthesizes one record per pair, in pair order. A rejected response is
/// retried once at `params.retry_temperature`; backend failures abort.
pub fn synthesize_corpus(
    pairs: &[EntityRelation],
    template: &PromptTemplate,
    backend: &dyn LanguageModel,
    params: &GenerationParams,
    parallelism: usize,
) -> Result<(Vec<InstructionRecord>, SynthesisSummary), CotGenError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool");
    let one = |pair: &EntityRelation, t: f64| -> Result<Option<InstructionRecord>, CotGenError> {
        let req = synthesis_request(pair, template, params, t)?;
        match parse_synthesized(&backend.complete(&req)?, pair, template.kind) {
            Ok(r) => Ok(Some(r)),
            Err(CotGenError::GenerationRejected(reason)) => {
                log::debug!("synthesis for ({}, {}) rejected: {reason}", pair.entity, pair.relation);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    };
    let outcomes: Result<Vec<(Option<InstructionRecord>, bool)>, CotGenError> = pool.install(|| {
        pairs
            .par_iter()
            .map(|pair| {
                if let Some(r) = one(pair, params.temperature)? {
                    return Ok((Some(r), false));
                }
                if params.retry_temperature == params.temperature {
                    return Ok((None, false));
                }
                Ok((one(pair, params.retry_temperature)?, true))
            })
            .collect()
    });
    let mut summary = SynthesisSummary {
        pairs: pairs.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for (record, retried) in outcomes? {
        match record {
            Some(r) => {
                summary.kept += 1;
                summary.recovered_by_retry += usize::from(retried);
                records.push(r);
            }
            None => summary.rejected += 1,
        }
    }
    Ok((records, summary))
}

/// Result of resolving a question's relation chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbAnswer {
    /// The (entity, relation) lookups performed, in order.
    pub query_chain: Vec<(String, String)>,
    pub answer: Option<String>,
    pub found: bool,
}

impl KbAnswer {
    fn miss(query_chain: Vec<(String, String)>) -> Self {
        Self {
            query_chain,
            answer: None,
            found: false,
        }
    }
}

/// Extracts the relation chain from the record's question and resolves it
/// in `kb`, feeding each answer into the next hop.
pub fn verify_against_kb(record: &InstructionRecord, kb: &dyn KnowledgeBase) -> Result<KbAnswer, KbError> {
    let question = record
        .parsed_input()
        .map(|i| i.question)
        .unwrap_or_else(|_| record.input.clone());
    let Some((entity, relations)) = question_chain(&question) else {
        return Ok(KbAnswer::miss(Vec::new()));
    };
    let mut chain = Vec::with_capacity(relations.len());
    let mut current = entity;
    for rel in relations {
        chain.push((current.clone(), rel.clone()));
        match kb.lookup(&current, &rel)? {
            Some(next) => current = next,
            None => return Ok(KbAnswer::miss(chain)),
        }
    }
    Ok(KbAnswer {
        query_chain: chain,
        answer: Some(current),
        found: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterVerdict {
    Kept,
    Mismatch,
    Miss,
    /// The record's output does not parse.
    Malformed,
}

/// Decides one record.
pub fn kb_verdict(record: &InstructionRecord, kb: &dyn KnowledgeBase) -> Result<FilterVerdict, KbError> {
    let Ok(trace) = record.trace() else {
        return Ok(FilterVerdict::Malformed);
    };
    let found = verify_against_kb(record, kb)?;
    Ok(match found.answer {
        None => FilterVerdict::Miss,
        Some(a) if normalize_answer(&a) == normalize_answer(&trace.answer) => FilterVerdict::Kept,
        Some(_) => FilterVerdict::Mismatch,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub kept: usize,
    pub mismatched: usize,
    pub missed: usize,
    pub malformed: usize,
    /// Verdicts taken from the checkpoint instead of the knowledge base.
    pub resumed: usize,
}

impl FilterStats {
    pub fn retention(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.kept as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterOptions {
    pub parallelism: usize,
    /// JSONL file of decided verdicts, appended as records are decided and
    /// consulted on rerun.
    pub checkpoint: Option<PathBuf>,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            parallelism: 4,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("knowledge base failed after {decided} decided records: {source}")]
    Kb {
        decided: usize,
        #[source]
        source: KbError,
    },
    #[error("filter checkpoint: {0}")]
    Io(#[from] std::io::Error),
}

impl FilterError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Kb { source, .. } if source.is_retryable())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointLine {
    fingerprint: String,
    verdict: FilterVerdict,
}

fn read_checkpoint(path: &Path) -> std::io::Result<HashMap<String, FilterVerdict>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashMap::new()),
        Err(e) => return Err(e),
    };
    Ok(text
        .lines()
        .map_while(|l| serde_json::from_str::<CheckpointLine>(l).ok())
        .map(|c| (c.fingerprint, c.verdict))
        .collect())
}

/// Keeps the records whose answer the knowledge base confirms, in input
/// order. Verdicts reached before a knowledge-base failure are written to
/// the checkpoint so a rerun only queries the remainder.
pub fn filter_corpus(
    records: &[InstructionRecord],
    kb: &dyn KnowledgeBase,
    options: &FilterOptions,
) -> Result<(Vec<InstructionRecord>, FilterStats), FilterError> {
    let mut known = match &options.checkpoint {
        Some(p) => read_checkpoint(p)?,
        None => HashMap::new(),
    };
    let fps: Vec<String> = records.iter().map(InstructionRecord::fingerprint).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism.max(1))
        .build()
        .expect("thread pool");
    let fresh: Vec<Option<Result<FilterVerdict, KbError>>> = pool.install(|| {
        records
            .par_iter()
            .zip(&fps)
            .map(|(r, fp)| (!known.contains_key(fp)).then(|| kb_verdict(r, kb)))
            .collect()
    });

    let mut stats = FilterStats {
        total: records.len(),
        ..Default::default()
    };
    let mut new_lines = String::new();
    let mut failure = None;
    for (fp, v) in fps.iter().zip(&fresh) {
        match v {
            None => stats.resumed += 1,
            Some(Ok(verdict)) => {
                if !known.contains_key(fp) {
                    let line = CheckpointLine {
                        fingerprint: fp.clone(),
                        verdict: *verdict,
                    };
                    new_lines.push_str(&serde_json::to_string(&line).expect("checkpoint line"));
                    new_lines.push('\n');
                    known.insert(fp.clone(), *verdict);
                }
            }
            Some(Err(e)) => {
                failure.get_or_insert_with(|| e.clone());
            }
        }
    }
    if let Some(path) = &options.checkpoint {
        if !new_lines.is_empty() {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(new_lines.as_bytes())?;
        }
    }
    if let Some(source) = failure {
        let decided = fps.iter().filter(|fp| known.contains_key(*fp)).count();
        return Err(FilterError::Kb { decided, source });
    }

    let mut kept = Vec::new();
    for (r, fp) in records.iter().zip(&fps) {
        match known[fp] {
            FilterVerdict::Kept => {
                stats.kept += 1;
                kept.push(r.clone());
            }
            FilterVerdict::Mismatch => stats.mismatched += 1,
            FilterVerdict::Miss => stats.missed += 1,
            FilterVerdict::Malformed => stats.malformed += 1,
        }
    }
    log::info!(
        "kb filter kept {}/{} (mismatch {}, miss {}, malformed {})",
        stats.kept,
        stats.total,
        stats.mismatched,
        stats.missed,
        stats.malformed
    );
    Ok((kept, stats))
}
