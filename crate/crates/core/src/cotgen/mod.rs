//! Chain-of-thought instruction data from structured edits and edit contexts.
//!
//! An LLM agent is prompted with a question plus the edit fact(s) or an edit
//! context and asked for a decomposed reasoning trace. The trace is parsed,
//! checked for the mode's shape (structured traces carry no extracted fact,
//! unstructured traces must) and finally validated by comparing its answer
//! with the dataset's gold answer. Only validated traces become records.

mod mquake;
mod templates;

pub use mquake::{
    load_mquake, load_mquake_uns, MquakeCase, MquakeUnsCase, RequestedRewrite, SingleHop,
    TargetString,
};
pub use templates::{
    default_fewshot, FewShot, PromptTemplate, TemplateError, TemplateKind, CONVSENT_INSTRUCT,
    MULTIHOP_INSTRUCT, UNSTRUCTURED_INSTRUCT,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatRequest, LanguageModel};
use crate::domain::{
    normalize_answer, parse_trace, CoTTrace, DomainError, EditContext, EditFact,
    InstructionRecord, MalformedTrace, Origin, Question, RecordInput,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RejectReason {
    #[error("malformed trace: {0}")]
    Malformed(MalformedTrace),
    #[error("trace lacks the extracted edit fact")]
    MissingExtractedFact,
    #[error("structured trace carries an extracted edit fact")]
    UnexpectedExtractedFact,
    #[error("response is not a JSON object with exactly the keys Input and Output: {0}")]
    NotJson(String),
    #[error("generated input does not mention {0:?}")]
    MissingMention(String),
    #[error("trace has {found} steps, at least {required} required")]
    TooFewSteps { found: usize, required: usize },
    #[error("generated input is invalid: {0}")]
    InvalidInput(DomainError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CotGenError {
    #[error("generation rejected: {0}")]
    GenerationRejected(RejectReason),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid item: {0}")]
    Item(#[from] DomainError),
}

impl From<RejectReason> for CotGenError {
    fn from(r: RejectReason) -> Self {
        Self::GenerationRejected(r)
    }
}

/// Decoding parameters for agent calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    /// Temperature of the single retry after a rejected generation.
    pub retry_temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            retry_temperature: 0.0,
            max_tokens: 1024,
            seed: None,
        }
    }
}

impl GenerationParams {
    pub(crate) fn request(&self, system: String, user: String, temperature: f64) -> ChatRequest {
        ChatRequest::new(system, user)
            .temperature(temperature)
            .max_tokens(self.max_tokens)
            .seed(self.seed)
    }
}

fn structured_request(
    question: &Question,
    facts: &[EditFact],
    template: &PromptTemplate,
    params: &GenerationParams,
    temperature: f64,
) -> Result<ChatRequest, CotGenError> {
    template.expect_kind(TemplateKind::Multihop)?;
    if facts.is_empty() {
        return Err(DomainError::EmptyField("facts").into());
    }
    let input = RecordInput::with_facts(&question.text, facts);
    Ok(params.request(template.system_prompt(&[]), input.render(), temperature))
}

fn unstructured_request(
    question: &Question,
    context: &EditContext,
    template: &PromptTemplate,
    params: &GenerationParams,
    temperature: f64,
) -> Result<ChatRequest, CotGenError> {
    template.expect_kind(TemplateKind::Unstructured)?;
    let input = RecordInput::with_context(&question.text, context);
    Ok(params.request(template.system_prompt(&[]), input.render(), temperature))
}

fn check_structured(question: &Question, trace: CoTTrace) -> Result<CoTTrace, CotGenError> {
    if trace.extracted_fact.is_some() {
        return Err(RejectReason::UnexpectedExtractedFact.into());
    }
    if (trace.steps.len() as u32) < question.hops {
        log::warn!(
            "trace for {:?} has {} steps for a {}-hop question",
            question.text,
            trace.steps.len(),
            question.hops
        );
    }
    Ok(trace)
}

fn check_unstructured(trace: CoTTrace) -> Result<CoTTrace, CotGenError> {
    match &trace.extracted_fact {
        Some(f) if !f.trim().is_empty() => Ok(trace),
        _ => Err(RejectReason::MissingExtractedFact.into()),
    }
}

fn parse(raw: &str) -> Result<CoTTrace, CotGenError> {
    parse_trace(raw).map_err(|m| RejectReason::Malformed(m).into())
}

/// Prompts the agent with a question and its edit facts and parses the
/// returned reasoning chain.
pub fn generate_structured_cot(
    question: &Question,
    facts: &[EditFact],
    template: &PromptTemplate,
    backend: &dyn LanguageModel,
    params: &GenerationParams,
) -> Result<CoTTrace, CotGenError> {
    let req = structured_request(question, facts, template, params, params.temperature)?;
    check_structured(question, parse(&backend.complete(&req)?)?)
}

/// Prompts the agent with a question and an edit context; the returned trace
/// must begin by extracting the relevant edit fact.
pub fn generate_unstructured_cot(
    question: &Question,
    context: &EditContext,
    template: &PromptTemplate,
    backend: &dyn LanguageModel,
    params: &GenerationParams,
) -> Result<CoTTrace, CotGenError> {
    let req = unstructured_request(question, context, template, params, params.temperature)?;
    check_unstructured(parse(&backend.complete(&req)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub record: InstructionRecord,
    pub inferred: String,
    pub gold: String,
    pub accepted: bool,
}

/// Result-oriented check: the trace's answer must equal the gold answer
/// after normalization.
pub fn validate_record(
    record: InstructionRecord,
    trace: &CoTTrace,
    gold: &str,
) -> Result<ValidationVerdict, DomainError> {
    if gold.trim().is_empty() {
        return Err(DomainError::EmptyField("gold"));
    }
    Ok(ValidationVerdict {
        accepted: normalize_answer(&trace.answer) == normalize_answer(gold),
        inferred: trace.answer.clone(),
        gold: gold.to_string(),
        record,
    })
}

/// Templates used to build the SFT corpus.
#[derive(Debug, Clone)]
pub struct CorpusTemplates {
    pub multihop: PromptTemplate,
    pub unstructured: PromptTemplate,
}

impl CorpusTemplates {
    pub fn builtin(fewshot: usize) -> Result<Self, TemplateError> {
        Ok(Self {
            multihop: PromptTemplate::builtin(TemplateKind::Multihop, fewshot)?,
            unstructured: PromptTemplate::builtin(TemplateKind::Unstructured, fewshot)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusOptions {
    pub params: GenerationParams,
    /// Upper bound on concurrent agent calls.
    pub parallelism: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            params: GenerationParams::default(),
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub structured_total: usize,
    pub structured_kept: usize,
    pub unstructured_total: usize,
    pub unstructured_kept: usize,
    /// Items whose generation failed to parse or had the wrong shape.
    pub rejected_generation: usize,
    /// Items whose trace parsed but answered differently from the gold.
    pub rejected_validation: usize,
    /// Items that needed the retry to be kept.
    pub recovered_by_retry: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftCorpus {
    pub records: Vec<InstructionRecord>,
    pub summary: CorpusSummary,
}

enum Outcome {
    Kept { record: InstructionRecord, retried: bool },
    Rejected { validation: bool },
}

/// One generation attempt followed by validation.
fn attempt<F>(
    make_request: F,
    check: &dyn Fn(CoTTrace) -> Result<CoTTrace, CotGenError>,
    backend: &dyn LanguageModel,
    instruct: &str,
    input: &RecordInput,
    gold: &str,
    origin: Origin,
    temperature: f64,
) -> Result<Result<InstructionRecord, bool>, CotGenError>
where
    F: Fn(f64) -> Result<ChatRequest, CotGenError>,
{
    let raw = backend.complete(&make_request(temperature)?)?;
    let trace = match parse(&raw).and_then(check) {
        Ok(t) => t,
        Err(CotGenError::GenerationRejected(reason)) => {
            log::debug!("generation rejected: {reason}");
            return Ok(Err(false));
        }
        Err(e) => return Err(e),
    };
    let record = InstructionRecord::new(instruct, input, &trace, origin);
    let verdict = validate_record(record, &trace, gold)?;
    if verdict.accepted {
        Ok(Ok(verdict.record))
    } else {
        log::debug!("answer {:?} does not match gold {:?}", verdict.inferred, verdict.gold);
        Ok(Err(true))
    }
}

#[allow(clippy::too_many_arguments)]
fn generate_item<F>(
    make_request: F,
    check: &dyn Fn(CoTTrace) -> Result<CoTTrace, CotGenError>,
    backend: &dyn LanguageModel,
    params: &GenerationParams,
    instruct: &str,
    input: &RecordInput,
    gold: &str,
    origin: Origin,
) -> Result<Outcome, CotGenError>
where
    F: Fn(f64) -> Result<ChatRequest, CotGenError>,
{
    let first = attempt(&make_request, check, backend, instruct, input, gold, origin, params.temperature)?;
    let validation = match first {
        Ok(record) => return Ok(Outcome::Kept { record, retried: false }),
        Err(validation) => validation,
    };
    if params.retry_temperature == params.temperature {
        return Ok(Outcome::Rejected { validation });
    }
    match attempt(&make_request, check, backend, instruct, input, gold, origin, params.retry_temperature)? {
        Ok(record) => Ok(Outcome::Kept { record, retried: true }),
        Err(validation) => Ok(Outcome::Rejected { validation }),
    }
}

fn structured_item(
    case: &MquakeCase,
    templates: &CorpusTemplates,
    backend: &dyn LanguageModel,
    params: &GenerationParams,
) -> Result<Outcome, CotGenError> {
    let question = match case.question() {
        Ok(q) => q,
        Err(e) => {
            log::warn!("skipping MQuAKE case {}: {e}", case.case_id);
            return Ok(Outcome::Rejected { validation: false });
        }
    };
    let facts = case.facts()?;
    let input = RecordInput::with_facts(&question.text, &facts);
    generate_item(
        |t| structured_request(&question, &facts, &templates.multihop, params, t),
        &|trace| check_structured(&question, trace),
        backend,
        params,
        TemplateKind::Multihop.instruct_text(),
        &input,
        &case.new_answer,
        Origin::Mquake,
    )
}

fn unstructured_item(
    case: &MquakeUnsCase,
    templates: &CorpusTemplates,
    backend: &dyn LanguageModel,
    params: &GenerationParams,
) -> Result<Outcome, CotGenError> {
    let (question, context) = match (case.question(), case.edit_context()) {
        (Ok(q), Ok(c)) => (q, c),
        (Err(e), _) | (_, Err(e)) => {
            log::warn!("skipping MQuAKE-uns case {}: {e}", case.case_id);
            return Ok(Outcome::Rejected { validation: false });
        }
    };
    let input = RecordInput::with_context(&question.text, &context);
    generate_item(
        |t| unstructured_request(&question, &context, &templates.unstructured, params, t),
        &check_unstructured,
        backend,
        params,
        TemplateKind::Unstructured.instruct_text(),
        &input,
        &case.new_answer,
        Origin::MquakeUns,
    )
}

/// Builds the SFT corpus from structured and unstructured items. Items are
/// generated concurrently (bounded by `options.parallelism`) and the output
/// keeps input order: structured records first, then unstructured ones.
/// Per-item rejections are counted; a backend failure aborts the build.
pub fn build_sft_corpus(
    mquake_items: &[MquakeCase],
    mquake_uns_items: &[MquakeUnsCase],
    templates: &CorpusTemplates,
    backend: &dyn LanguageModel,
    options: &CorpusOptions,
) -> Result<SftCorpus, CotGenError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism.max(1))
        .build()
        .expect("thread pool");
    let params = &options.params;
    let (structured, unstructured) = pool.install(|| {
        let s: Result<Vec<Outcome>, CotGenError> = mquake_items
            .par_iter()
            .map(|c| structured_item(c, templates, backend, params))
            .collect();
        let u: Result<Vec<Outcome>, CotGenError> = mquake_uns_items
            .par_iter()
            .map(|c| unstructured_item(c, templates, backend, params))
            .collect();
        (s, u)
    });
    let (structured, unstructured) = (structured?, unstructured?);

    let mut summary = CorpusSummary {
        structured_total: structured.len(),
        unstructured_total: unstructured.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for (i, outcome) in structured.into_iter().chain(unstructured).enumerate() {
        let is_structured = i < summary.structured_total;
        match outcome {
            Outcome::Kept { record, retried } => {
                if is_structured {
                    summary.structured_kept += 1;
                } else {
                    summary.unstructured_kept += 1;
                }
                if retried {
                    summary.recovered_by_retry += 1;
                }
                records.push(record);
            }
            Outcome::Rejected { validation: true } => summary.rejected_validation += 1,
            Outcome::Rejected { validation: false } => summary.rejected_generation += 1,
        }
    }
    log::info!(
        "sft corpus: {}/{} structured, {}/{} unstructured kept",
        summary.structured_kept,
        summary.structured_total,
        summary.unstructured_kept,
        summary.unstructured_total
    );
    Ok(SftCorpus { records, summary })
}

/// Request the corpus builder sends for a structured item at the given
/// temperature. Exposed so scripted fixtures can be keyed by fingerprint.
pub fn structured_item_request(
    case: &MquakeCase,
    templates: &CorpusTemplates,
    params: &GenerationParams,
    temperature: f64,
) -> Result<ChatRequest, CotGenError> {
    structured_request(&case.question()?, &case.facts()?, &templates.multihop, params, temperature)
}
