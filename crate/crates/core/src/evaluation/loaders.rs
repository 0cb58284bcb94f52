//! Benchmark loaders. Every file is a JSON array; field errors name the
//! offending path.
//!
//! | dataset | fields read |
//! |---|---|
//! | `zsre` | `subject`, `src`, `alt`, `answers[0]` (old target), `rephrase`, `loc`, `loc_ans` |
//! | `counterfact` | `case_id`, `requested_rewrite.{prompt, subject, target_new.str, target_true.str}`, `paraphrase_prompts`, `neighborhood_prompts` (strings or `{prompt, target}`) |
//! | `counterfact-uns`, `wikiupdate` | `id`, `context` (aliases `edit_context`, `unstructured_context`), `question` (aliases `prompt`, `src`), `target_new` (alias `answer`, string or `{str}`), `target_old`, `rephrase` (alias `paraphrase_prompts`), `locality[].{prompt, target}` |
//! | `mquake` | as the training loader: `requested_rewrite[]`, `questions[0]`, `answer`, `new_answer`, `new_single_hops` |
//! | `convsent` | `entity`, `edit_sentiment` (alias `sentiment`), `target` (`positive`/`negative`), optional `question` |

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalItem, LocalityProbe, MultihopProbe, SentimentProbe};
use crate::cotgen::{MquakeCase, RequestedRewrite, TargetString};
use crate::domain::{ContextSource, DomainError, EditContext, EditFact};
use crate::editor::sentiment_question;
use crate::memory::MemoryPayload;
use crate::schema::{clamp_slice, read_json, OneOrMany, SchemaError};

/// Default MQuAKE evaluation range; earlier cases are training data.
pub const MQUAKE_EVAL_SLICE: (usize, usize) = (2000, 9208);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Zsre,
    Counterfact,
    CounterfactUns,
    Wikiupdate,
    Mquake,
    Convsent,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 6] = [
        Self::Zsre,
        Self::Counterfact,
        Self::CounterfactUns,
        Self::Wikiupdate,
        Self::Mquake,
        Self::Convsent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Zsre => "zsre",
            Self::Counterfact => "counterfact",
            Self::CounterfactUns => "counterfact-uns",
            Self::Wikiupdate => "wikiupdate",
            Self::Mquake => "mquake",
            Self::Convsent => "convsent",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_lowercase())
            .ok_or_else(|| format!("unknown dataset {s:?}"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Half-open item range, applied before any exclusion.
    pub slice: Option<(usize, usize)>,
    /// Lowercased (subject, relation) pairs seen in training; MQuAKE items
    /// editing any of them are dropped.
    pub exclude: HashSet<(String, String)>,
}

fn slice<T>(mut items: Vec<T>, range: Option<(usize, usize)>) -> Vec<T> {
    if let Some((s, e)) = range {
        let r = clamp_slice(s, e, items.len());
        items.truncate(r.end);
        items.drain(..r.start);
    }
    items
}

fn field_err(path: &Path, index: usize, field: &str, e: DomainError) -> EvalError {
    SchemaError::field(path, format!("[{index}].{field}"), e.to_string()).into()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Target {
    Plain(String),
    Object(TargetString),
}

impl Target {
    fn text(self) -> String {
        match self {
            Self::Plain(s) => s,
            Self::Object(t) => t.str,
        }
    }
}

#[derive(Deserialize)]
struct ZsreRecord {
    subject: String,
    src: String,
    alt: String,
    #[serde(default)]
    answers: Vec<String>,
    #[serde(default)]
    rephrase: Option<String>,
    #[serde(default)]
    loc: Option<String>,
    #[serde(default)]
    loc_ans: Option<String>,
}

fn zsre_items(path: &Path, recs: Vec<ZsreRecord>, offset: usize) -> Result<Vec<EvalItem>, EvalError> {
    recs.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let idx = offset + i;
            let base = EditFact::new(&r.subject, &r.src, &r.alt).map_err(|e| field_err(path, idx, "src", e))?;
            let fact = base
                .clone()
                .with_surface(format!("{} {}", r.src.trim(), r.alt.trim()))
                .or_else(|_| base.with_surface(format!("{}: {} {}", r.subject.trim(), r.src.trim(), r.alt.trim())))
                .map_err(|e| field_err(path, idx, "subject", e))?;
            let mut it = EvalItem::new(format!("zsre-{idx}"), MemoryPayload::Fact(fact), r.src.trim(), r.alt.trim());
            it.target_old = r.answers.into_iter().next();
            it.rephrases = r.rephrase.into_iter().filter(|s| !s.trim().is_empty()).collect();
            if let (Some(loc), Some(ans)) = (r.loc, r.loc_ans) {
                let prompt = loc.trim().strip_prefix("nq question:").unwrap_or(loc.trim()).trim().to_string();
                it.locality.push(LocalityProbe { prompt, expected: ans });
            }
            Ok(it)
        })
        .collect()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NeighborPrompt {
    Plain(String),
    Labeled { prompt: String, target: String },
}

#[derive(Deserialize)]
struct CounterfactRecord {
    case_id: serde_json::Value,
    requested_rewrite: RequestedRewrite,
    #[serde(default)]
    paraphrase_prompts: Vec<String>,
    #[serde(default)]
    neighborhood_prompts: Vec<NeighborPrompt>,
}

fn counterfact_items(path: &Path, recs: Vec<CounterfactRecord>, offset: usize) -> Result<Vec<EvalItem>, EvalError> {
    recs.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let idx = offset + i;
            let rw = &r.requested_rewrite;
            let fact = rw.to_fact().map_err(|e| field_err(path, idx, "requested_rewrite", e))?;
            let prompt = rw.prompt.replace("{}", &rw.subject).trim().to_string();
            let old = rw.target_true.as_ref().map(|t| t.str.clone());
            let id = match &r.case_id {
                serde_json::Value::String(s) => s.clone(),
                v => v.to_string(),
            };
            let mut it = EvalItem::new(format!("cf-{id}"), MemoryPayload::Fact(fact), prompt, rw.target_new.str.trim());
            it.rephrases = r.paraphrase_prompts;
            for (j, n) in r.neighborhood_prompts.into_iter().enumerate() {
                let probe = match (n, &old) {
                    (NeighborPrompt::Labeled { prompt, target }, _) => LocalityProbe { prompt, expected: target },
                    (NeighborPrompt::Plain(prompt), Some(o)) => LocalityProbe { prompt, expected: o.clone() },
                    (NeighborPrompt::Plain(_), None) => {
                        return Err(SchemaError::field(
                            path,
                            format!("[{idx}].neighborhood_prompts[{j}]"),
                            "unlabeled neighborhood prompt needs requested_rewrite.target_true",
                        )
                        .into())
                    }
                };
                it.locality.push(probe);
            }
            it.target_old = old;
            Ok(it)
        })
        .collect()
}

#[derive(Deserialize)]
struct LabeledPrompt {
    prompt: String,
    target: String,
}

#[derive(Deserialize)]
struct UnstructuredRecord {
    #[serde(default)]
    id: Option<serde_json::Value>,
    #[serde(alias = "edit_context", alias = "unstructured_context")]
    context: String,
    #[serde(alias = "prompt", alias = "src")]
    question: String,
    #[serde(alias = "answer")]
    target_new: Target,
    #[serde(default)]
    target_old: Option<Target>,
    #[serde(default, alias = "paraphrase_prompts")]
    rephrase: OneOrMany,
    #[serde(default)]
    locality: Vec<LabeledPrompt>,
}

fn unstructured_items(
    path: &Path,
    kind: DatasetKind,
    recs: Vec<UnstructuredRecord>,
    offset: usize,
) -> Result<Vec<EvalItem>, EvalError> {
    let source = if kind == DatasetKind::Wikiupdate {
        ContextSource::Wikiupdate
    } else {
        ContextSource::CounterfactUns
    };
    recs.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let idx = offset + i;
            let ctx = EditContext {
                text: r.context,
                source,
            };
            ctx.check(usize::MAX).map_err(|e| field_err(path, idx, "context", e))?;
            let id = match r.id {
                Some(serde_json::Value::String(s)) => s,
                Some(v) => v.to_string(),
                None => idx.to_string(),
            };
            let target = r.target_new.text();
            if target.trim().is_empty() {
                return Err(field_err(path, idx, "target_new", DomainError::EmptyField("target_new")));
            }
            let mut it = EvalItem::new(format!("{}-{id}", kind.name()), MemoryPayload::Context(ctx), r.question.trim(), target.trim());
            it.target_old = r.target_old.map(Target::text);
            it.rephrases = r.rephrase.into_vec();
            it.locality = r
                .locality
                .into_iter()
                .map(|l| LocalityProbe { prompt: l.prompt, expected: l.target })
                .collect();
            Ok(it)
        })
        .collect()
}

fn mquake_items(path: &Path, cases: Vec<MquakeCase>, offset: usize, exclude: &HashSet<(String, String)>) -> Result<Vec<EvalItem>, EvalError> {
    let mut out = Vec::new();
    for (i, c) in cases.into_iter().enumerate() {
        let idx = offset + i;
        if c.entity_relations().iter().any(|p| exclude.contains(p)) {
            log::info!("mquake case {idx} overlaps training edits, excluded");
            continue;
        }
        let facts = c.facts().map_err(|e| field_err(path, idx, "requested_rewrite", e))?;
        let Some(first) = c.requested_rewrite.first() else {
            return Err(field_err(path, idx, "requested_rewrite", DomainError::EmptyField("requested_rewrite")));
        };
        let question = c
            .questions
            .first()
            .ok_or_else(|| field_err(path, idx, "questions", DomainError::EmptyField("questions")))?;
        let prompt = first.prompt.replace("{}", &first.subject).trim().to_string();
        let mut it = EvalItem::new(format!("mquake-{idx}"), MemoryPayload::Fact(facts[0].clone()), prompt, first.target_new.str.trim());
        it.target_old = first.target_true.as_ref().map(|t| t.str.clone());
        it.hops = c.hops();
        it.multihop = Some(MultihopProbe {
            question: question.clone(),
            answer: c.new_answer.clone(),
        });
        it.support_facts = facts;
        out.push(it);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct ConvsentRecord {
    entity: String,
    #[serde(alias = "sentiment")]
    edit_sentiment: String,
    target: String,
    #[serde(default)]
    question: Option<String>,
}

fn convsent_items(path: &Path, recs: Vec<ConvsentRecord>, offset: usize) -> Result<Vec<EvalItem>, EvalError> {
    recs.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let idx = offset + i;
            if r.entity.trim().is_empty() {
                return Err(field_err(path, idx, "entity", DomainError::EmptyField("entity")));
            }
            if !matches!(r.target.trim().to_lowercase().as_str(), "positive" | "negative") {
                return Err(SchemaError::field(path, format!("[{idx}].target"), "expected \"positive\" or \"negative\"").into());
            }
            let ctx = EditContext::new(&r.edit_sentiment, ContextSource::Synthetic)
                .map_err(|e| field_err(path, idx, "edit_sentiment", e))?;
            let prompt = r.question.unwrap_or_else(|| sentiment_question(&r.entity));
            let mut it = EvalItem::new(format!("convsent-{idx}"), MemoryPayload::Context(ctx), prompt, r.target.trim().to_lowercase());
            it.sentiment = Some(SentimentProbe {
                entity: r.entity.trim().to_string(),
                edit_sentiment: r.edit_sentiment.trim().to_string(),
            });
            Ok(it)
        })
        .collect()
}

/// Loads `path` as `kind`, applying the slice and, for MQuAKE, the training
/// overlap exclusion.
pub fn load_dataset(kind: DatasetKind, path: &Path, options: &LoadOptions) -> Result<Vec<EvalItem>, EvalError> {
    let offset = options.slice.map_or(0, |(s, _)| s);
    match kind {
        DatasetKind::Zsre => zsre_items(path, slice(read_json(path)?, options.slice), offset),
        DatasetKind::Counterfact => counterfact_items(path, slice(read_json(path)?, options.slice), offset),
        DatasetKind::CounterfactUns | DatasetKind::Wikiupdate => {
            unstructured_items(path, kind, slice(read_json(path)?, options.slice), offset)
        }
        DatasetKind::Mquake => mquake_items(path, slice(read_json(path)?, options.slice), offset, &options.exclude),
        DatasetKind::Convsent => convsent_items(path, slice(read_json(path)?, options.slice), offset),
    }
}
