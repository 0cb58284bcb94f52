//! Command implementations. Each command loads and checks all of its inputs
//! before writing anything under the output directory.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use cotedit_core::augment::{
    extract_entity_relations, filter_corpus, load_hotpot, synthesize_corpus, FilterOptions, FilterStats,
    FixtureKb, KnowledgeBase, SparqlKb, SynthesisSummary,
};
use cotedit_core::backends::{CachedBackend, LanguageModel, OpenAiBackend, OpenAiConfig, ScriptedBackend, API_BASE_ENV};
use cotedit_core::cotgen::{build_sft_corpus, load_mquake, load_mquake_uns, CorpusOptions, CorpusTemplates, PromptTemplate};
use cotedit_core::domain::{CoTTrace, Question};
use cotedit_core::editor::{EditError, EditSession};
use cotedit_core::evaluation::{
    answer_preference, default_match, evaluate, load_dataset, report_table, EvalError, EvalItem, LoadOptions,
    MetricReport, Scorers, SentimentProbe,
};
use cotedit_core::memory::{Embedder, HashBagEmbedder, HttpEmbedder, MemoryPayload, Metric, VectorMemory};
use cotedit_core::schema::{clamp_slice, read_json};
use cotedit_core::training::{run_grpo_round, EvolutionState, GrpoPrompt, SftExample};
use cotedit_core::{read_records, write_atomic, write_records, InstructionRecord};
use serde::{Deserialize, Serialize};

use crate::config::{slice_tuple, BackendConfig, BackendKind, ConfigError, EmbedderKind, KbKind, PipelineConfig};
use crate::{failed, CliError};

pub const SFT_CORPUS: &str = "sft_corpus.jsonl";
pub const AUGMENTED: &str = "augmented.jsonl";

fn required(field: &str) -> CliError {
    ConfigError::Required { field: field.into() }.into()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(failed)?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(failed)?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn sliced<T>(mut items: Vec<T>, slice: Option<[usize; 2]>) -> Vec<T> {
    if let Some([s, e]) = slice {
        let r = clamp_slice(s, e, items.len());
        items.truncate(r.end);
        items.drain(..r.start);
    }
    items
}

fn thread_pool(config: &PipelineConfig) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.run.parallelism)
        .build()
        .expect("thread pool")
}

/// Builds the backend described by `b`. Live backends are cached under
/// `run.cache_dir`, or `<out_dir>/cache` when unset.
pub fn build_backend(b: &BackendConfig, role: &str, config: &PipelineConfig) -> Result<Arc<dyn LanguageModel>, CliError> {
    let inner: Arc<dyn LanguageModel> = match b.kind {
        BackendKind::Scripted => {
            let script = b.script.as_ref().ok_or_else(|| required(&format!("{role}.script")))?;
            Arc::new(ScriptedBackend::from_json_file(script).map_err(failed)?)
        }
        BackendKind::Openai => {
            let mut c = OpenAiConfig::from_env(&b.model).map_err(|_| required(&format!("{API_BASE_ENV} environment variable")))?;
            c.timeout = Duration::from_secs(b.timeout_secs);
            Arc::new(OpenAiBackend::new(c))
        }
    };
    let cache = match (&config.run.cache_dir, b.kind) {
        (Some(d), _) => Some(d.clone()),
        (None, BackendKind::Openai) => Some(config.run.out_dir.join("cache")),
        (None, BackendKind::Scripted) => None,
    };
    match cache {
        Some(dir) => Ok(Arc::new(CachedBackend::new(inner, dir)?)),
        None => Ok(inner),
    }
}

pub fn build_embedder(config: &PipelineConfig) -> Result<Arc<dyn Embedder>, CliError> {
    let e = &config.embedder;
    Ok(match e.kind {
        EmbedderKind::Hash => Arc::new(HashBagEmbedder::new(e.dimension)),
        EmbedderKind::Http => Arc::new(
            HttpEmbedder::from_env(&e.model, e.dimension)
                .map_err(|_| required(&format!("{API_BASE_ENV} environment variable")))?,
        ),
    })
}

pub fn build_data(config: &PipelineConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let d = &config.data;
    if d.mquake.is_none() && d.mquake_uns.is_none() {
        return Err(required("data.mquake or data.mquake_uns"));
    }
    let structured = match &d.mquake {
        Some(p) => sliced(load_mquake(p).map_err(failed)?, d.mquake_slice),
        None => Vec::new(),
    };
    let unstructured = match &d.mquake_uns {
        Some(p) => sliced(load_mquake_uns(p).map_err(failed)?, d.mquake_uns_slice),
        None => Vec::new(),
    };
    let templates = CorpusTemplates::builtin(config.generation.fewshot).map_err(failed)?;
    let backend = build_backend(&config.agent, "agent", config)?;
    let options = CorpusOptions {
        params: config.generation_params(),
        parallelism: config.run.parallelism,
    };
    let corpus = build_sft_corpus(&structured, &unstructured, &templates, backend.as_ref(), &options).map_err(failed)?;
    let dir = &config.run.out_dir;
    write_records(&dir.join(SFT_CORPUS), &corpus.records)?;
    write_json(&dir.join("build_summary.json"), &corpus.summary)?;
    print_json(out, &corpus.summary)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub synthesis: SynthesisSummary,
    pub filter: FilterStats,
}

fn knowledge_base(config: &PipelineConfig) -> Result<Box<dyn KnowledgeBase>, CliError> {
    let kb = &config.data.kb;
    Ok(match kb.kind {
        KbKind::Fixture => {
            let path = kb.fixture.as_ref().ok_or_else(|| required("data.kb.fixture"))?;
            Box::new(FixtureKb::from_json_file(path).map_err(failed)?)
        }
        KbKind::Sparql => Box::new(SparqlKb::new(&kb.endpoint, Duration::from_millis(kb.min_interval_ms))),
    })
}

pub fn augment(config: &PipelineConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let path = config.data.hotpot.as_ref().ok_or_else(|| required("data.hotpot"))?;
    let items = sliced(load_hotpot(path).map_err(failed)?, config.data.hotpot_slice);
    let pairs = extract_entity_relations(&items).map_err(failed)?;
    let template = PromptTemplate::builtin(config.generation.synthesis.template_kind(), config.generation.fewshot)
        .map_err(failed)?;
    let kb = knowledge_base(config)?;
    let backend = build_backend(&config.agent, "agent", config)?;
    log::info!("synthesizing from {} entity-relation pairs", pairs.len());
    let (records, synthesis) = synthesize_corpus(
        &pairs,
        &template,
        backend.as_ref(),
        &config.generation_params(),
        config.run.parallelism,
    )
    .map_err(failed)?;
    let dir = &config.run.out_dir;
    write_records(&dir.join("synthesized.jsonl"), &records)?;
    let options = FilterOptions {
        parallelism: config.run.parallelism,
        checkpoint: Some(dir.join("augment_checkpoint.jsonl")),
    };
    let (kept, filter) = filter_corpus(&records, kb.as_ref(), &options).map_err(failed)?;
    write_records(&dir.join(AUGMENTED), &kept)?;
    let summary = AugmentSummary { synthesis, filter };
    write_json(&dir.join("augment_summary.json"), &summary)?;
    print_json(out, &summary)
}

fn grpo_dir(config: &PipelineConfig) -> PathBuf {
    config.run.out_dir.join("grpo")
}

fn grpo_state_path(config: &PipelineConfig) -> PathBuf {
    grpo_dir(config).join("state.json")
}

fn read_grpo_state(config: &PipelineConfig) -> Result<Option<EvolutionState>, CliError> {
    let path = grpo_state_path(config);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(read_json(&path).map_err(failed)?))
}

/// Records built so far: phase-one corpus plus kept augmentation records,
/// deduplicated, in that order.
fn base_records(config: &PipelineConfig) -> Result<Vec<InstructionRecord>, CliError> {
    let dir = &config.run.out_dir;
    let corpus = dir.join(SFT_CORPUS);
    if !corpus.exists() {
        return Err(CliError::Failed(format!("{} not found; run build-data first", corpus.display())));
    }
    let mut records = read_records(&corpus)?;
    let augmented = dir.join(AUGMENTED);
    if augmented.exists() {
        records.extend(read_records(&augmented)?);
    }
    let mut seen = HashSet::new();
    records.retain(|r| seen.insert(r.fingerprint()));
    Ok(records)
}

/// The current training set: the evolved dataset once a GRPO round has run,
/// else the base records.
fn training_records(config: &PipelineConfig) -> Result<(Vec<InstructionRecord>, &'static str), CliError> {
    match read_grpo_state(config)? {
        Some(state) => Ok((state.records().cloned().collect(), "grpo")),
        None => Ok((base_records(config)?, "corpus")),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportSummary {
    pub examples: usize,
    pub source: String,
}

pub fn export_sft(config: &PipelineConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let (records, source) = training_records(config)?;
    if records.is_empty() {
        return Err(CliError::Failed("no training records to export".into()));
    }
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(&SftExample::from_record(r)).map_err(failed)?);
        text.push('\n');
    }
    let dir = &config.run.out_dir;
    write_atomic(&dir.join("sft_train.jsonl"), text.as_bytes())?;
    write_json(&dir.join("trainer_hints.json"), &config.trainer)?;
    print_json(
        out,
        &ExportSummary {
            examples: records.len(),
            source: source.into(),
        },
    )
}

/// One prompt per distinct (instruct, input); the first record's answer is
/// the gold.
fn grpo_prompts(state: &EvolutionState) -> Vec<GrpoPrompt> {
    let mut seen = HashSet::new();
    state
        .records()
        .filter(|r| seen.insert((r.instruct.clone(), r.input.clone())))
        .filter_map(GrpoPrompt::from_record)
        .collect()
}

pub fn grpo_round(config: &PipelineConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let max = config.training.reward().max_total();
    let mut state = match read_grpo_state(config)? {
        Some(s) => s,
        None => EvolutionState::new(base_records(config)?, config.training.threshold, max).map_err(failed)?,
    };
    state.threshold = config.training.threshold;
    let prompts = grpo_prompts(&state);
    if prompts.is_empty() {
        return Err(CliError::Failed("no GRPO prompts: the training set has no parseable records".into()));
    }
    let backend = build_backend(&config.policy, "policy", config)?;
    let dir = grpo_dir(config);
    let rollout = dir.join("rollouts").join(format!("round_{:03}.jsonl", state.round));
    let params = config.grpo_params(state.round);
    let (next, stats) = run_grpo_round(&state, &prompts, backend.as_ref(), &params, &rollout).map_err(failed)?;
    write_json(&dir.join("rounds").join(format!("round_{:03}.json", stats.round)), &stats)?;
    let records: Vec<InstructionRecord> = next.records().cloned().collect();
    write_json(&grpo_state_path(config), &next)?;
    write_records(&dir.join("dataset.jsonl"), &records)?;
    print_json(out, &stats)
}

/// Edit memory for `edit` and `serve`: rebuilt from `data.edits` and
/// persisted when that is set, else loaded from the memory directory.
pub fn edit_memory(config: &PipelineConfig, embedder: &dyn Embedder) -> Result<VectorMemory, CliError> {
    let dir = config.memory_dir();
    match &config.data.edits {
        Some(path) => {
            let payloads: Vec<MemoryPayload> = read_json(path).map_err(failed)?;
            let mut memory = VectorMemory::new(embedder.dimension(), Metric::Cosine);
            for p in payloads {
                memory.insert(p, embedder).map_err(failed)?;
            }
            memory.save(&dir).map_err(failed)?;
            Ok(memory)
        }
        None if dir.join("manifest.json").exists() => VectorMemory::load(&dir).map_err(failed),
        None => Err(required("data.edits (no saved memory found)")),
    }
}

pub fn edit_session(config: &PipelineConfig) -> Result<EditSession, CliError> {
    let embedder = build_embedder(config)?;
    let backend = build_backend(&config.policy, "policy", config)?;
    let memory = edit_memory(config, embedder.as_ref())?;
    Ok(EditSession::new(Arc::new(memory), embedder, backend, config.edit_options()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub answer: String,
    pub trace: CoTTrace,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fact_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

pub fn answer_question(session: &EditSession, question: &str, hops: u32) -> Result<EditResponse, EditError> {
    let q = Question::new(question, hops.max(1))?;
    let o = session.edit_answer(&q)?;
    Ok(EditResponse {
        answer: o.answer,
        trace: o.trace,
        fact_id: Some(o.fact_id),
        score: Some(o.score),
    })
}

pub fn edit(config: &PipelineConfig, question: &str, hops: u32, out: &mut dyn Write) -> Result<(), CliError> {
    let session = edit_session(config)?;
    let response = answer_question(&session, question, hops).map_err(failed)?;
    print_json(out, &response)
}

pub fn edit_sentiment(config: &PipelineConfig, entity: &str, sentiment: &str, out: &mut dyn Write) -> Result<(), CliError> {
    let embedder = build_embedder(config)?;
    let backend = build_backend(&config.policy, "policy", config)?;
    let memory = VectorMemory::new(embedder.dimension(), Metric::Cosine);
    let session = EditSession::new(Arc::new(memory), embedder, backend, config.edit_options());
    let (trace, answer) = session.edit_sentiment(entity, sentiment).map_err(failed)?;
    print_json(
        out,
        &EditResponse {
            answer,
            trace,
            fact_id: None,
            score: None,
        },
    )
}

/// (subject, relation) pairs edited by the configured training data.
fn training_pairs(config: &PipelineConfig) -> Result<HashSet<(String, String)>, CliError> {
    let d = &config.data;
    let mut pairs = HashSet::new();
    if let Some(p) = &d.mquake {
        for c in sliced(load_mquake(p).map_err(failed)?, d.mquake_slice) {
            pairs.extend(c.entity_relations());
        }
    }
    if let Some(p) = &d.mquake_uns {
        for c in sliced(load_mquake_uns(p).map_err(failed)?, d.mquake_uns_slice) {
            pairs.extend(c.entity_relations());
        }
    }
    Ok(pairs)
}

fn eval_memory(items: &[EvalItem], embedder: &dyn Embedder) -> Result<VectorMemory, CliError> {
    let mut memory = VectorMemory::new(embedder.dimension(), Metric::Cosine);
    for it in items.iter().filter(|it| it.sentiment.is_none()) {
        memory.insert(it.edit.clone(), embedder).map_err(failed)?;
        for f in &it.support_facts {
            memory.insert(MemoryPayload::Fact(f.clone()), embedder).map_err(failed)?;
        }
    }
    Ok(memory)
}

/// Turns an edit attempt into an answer. Invalid traces and refused
/// retrievals count as wrong answers; infrastructure failures abort.
fn scored(result: Result<String, EditError>) -> Result<String, EvalError> {
    match result {
        Ok(a) => Ok(a),
        Err(e @ (EditError::EditFailed { .. } | EditError::NoRelevantFact { .. } | EditError::InvalidQuery(_))) => {
            log::debug!("scored as wrong: {e}");
            Ok(String::new())
        }
        Err(e) => Err(EvalError::Failed(e.to_string())),
    }
}

pub fn evaluate_items(name: &str, items: &[EvalItem], session: &EditSession) -> Result<MetricReport, EvalError> {
    let sentiments: HashMap<&str, &SentimentProbe> = items
        .iter()
        .filter_map(|it| it.sentiment.as_ref().map(|s| (it.prompt.as_str(), s)))
        .collect();
    let answer = |prompt: &str| -> Result<String, EvalError> {
        match sentiments.get(prompt) {
            Some(s) => scored(session.edit_sentiment(&s.entity, &s.edit_sentiment).map(|(_, a)| a)),
            None => scored(Question::new(prompt, 1).map_err(EditError::from).and_then(|q| session.edit_answer(&q)).map(|o| o.answer)),
        }
    };
    let multihop = |question: &str, support: &[cotedit_core::EditFact]| -> Result<String, EvalError> {
        let hops = support.len().max(1) as u32;
        scored(Question::new(question, hops).map_err(EditError::from).and_then(|q| session.edit_answer(&q)).map(|o| o.answer))
    };
    let preference = answer_preference(&answer);
    let scorers = Scorers {
        answer: &answer,
        preference: &preference,
        multihop: &multihop,
        matches: &default_match,
    };
    evaluate(name, items, &scorers)
}

pub fn eval(config: &PipelineConfig, dataset: Option<&str>, plot: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    if config.eval.datasets.is_empty() {
        return Err(required("eval.datasets"));
    }
    let selected: Vec<_> = config
        .eval
        .datasets
        .iter()
        .filter(|d| dataset.is_none_or(|n| d.name == n))
        .collect();
    if selected.is_empty() {
        let known: Vec<&str> = config.eval.datasets.iter().map(|d| d.name.as_str()).collect();
        return Err(ConfigError::OutOfRange {
            field: "--dataset".into(),
            message: format!("{:?} is not configured; known: {}", dataset.unwrap_or_default(), known.join(", ")),
        }
        .into());
    }
    let exclude = if selected.iter().any(|d| d.kind == cotedit_core::evaluation::DatasetKind::Mquake) {
        training_pairs(config)?
    } else {
        HashSet::new()
    };
    let mut loaded = Vec::new();
    for d in &selected {
        let options = LoadOptions {
            slice: slice_tuple(d.slice),
            exclude: exclude.clone(),
        };
        let items = load_dataset(d.kind, &d.path, &options).map_err(failed)?;
        loaded.push((d.name.clone(), items));
    }
    let embedder = build_embedder(config)?;
    let backend = build_backend(&config.policy, "policy", config)?;
    let pool = thread_pool(config);
    let mut reports = Vec::new();
    for (name, items) in &loaded {
        let memory = eval_memory(items, embedder.as_ref())?;
        let session = EditSession::new(Arc::new(memory), embedder.clone(), backend.clone(), config.edit_options());
        let report = pool.install(|| evaluate_items(name, items, &session)).map_err(failed)?;
        let path = config.run.out_dir.join("eval").join(format!("{name}.json"));
        write_atomic(&path, format!("{}\n", report.to_json()).as_bytes())?;
        log::info!("{name}: report written to {}", path.display());
        reports.push(report);
    }
    write!(out, "{}", report_table(&reports))?;
    if let Some(dir) = plot {
        for path in crate::plot::metric_charts(dir, &reports).map_err(failed)? {
            log::info!("chart written to {}", path.display());
        }
    }
    Ok(())
}
