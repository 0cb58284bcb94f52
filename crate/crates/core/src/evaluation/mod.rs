//! Editing benchmarks: dataset loaders, the metric kernels and the report.
//!
//! Accuracy metrics compare a system answer with a gold string under
//! [`crate::domain::normalize_answer`]. Preference metrics receive a `(new, old)` score pair
//! per prompt and count strict wins of the new target.

mod loaders;

pub use loaders::{load_dataset, DatasetKind, LoadOptions, MQUAKE_EVAL_SLICE};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{answers_match, EditFact};
use crate::memory::MemoryPayload;
use crate::schema::SchemaError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityProbe {
    pub prompt: String,
    pub expected: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultihopProbe {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentimentProbe {
    pub entity: String,
    pub edit_sentiment: String,
}

/// One benchmark case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub edit: MemoryPayload,
    /// The edit prompt p(s, r).
    pub prompt: String,
    pub target_new: String,
    pub target_old: Option<String>,
    /// Rephrased edit prompts N(s, r).
    pub rephrases: Vec<String>,
    /// Unrelated prompts O(s, r) with their expected answers.
    pub locality: Vec<LocalityProbe>,
    pub hops: u32,
    /// Edits a multi-hop question depends on.
    pub support_facts: Vec<EditFact>,
    pub multihop: Option<MultihopProbe>,
    pub sentiment: Option<SentimentProbe>,
}

impl EvalItem {
    pub fn new(id: impl Into<String>, edit: MemoryPayload, prompt: impl Into<String>, target_new: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            edit,
            prompt: prompt.into(),
            target_new: target_new.into(),
            target_old: None,
            rephrases: Vec::new(),
            locality: Vec::new(),
            hops: 1,
            support_facts: Vec::new(),
            multihop: None,
            sentiment: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("item {0} has preference prompts but no old target")]
    MissingTargetOld(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("system under test failed: {0}")]
    Failed(String),
}

/// Maps a prompt to the system's top-1 answer.
pub type AnswerFn<'a> = dyn Fn(&str) -> Result<String, EvalError> + Sync + 'a;
/// Scores `(new, old)` targets for a prompt: `(prompt, new, old)`.
pub type PreferenceFn<'a> = dyn Fn(&str, &str, &str) -> Result<(f64, f64), EvalError> + Sync + 'a;
/// Answers a multi-hop question given its support edits.
pub type MultihopFn<'a> = dyn Fn(&str, &[EditFact]) -> Result<String, EvalError> + Sync + 'a;
/// Decides whether an answer achieves an item's edit.
pub type MatchFn<'a> = dyn Fn(&str, &EvalItem) -> bool + Sync + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub hits: usize,
    pub total: usize,
}

impl MetricValue {
    pub fn from_counts(hits: usize, total: usize) -> Self {
        Self {
            value: hits as f64 / total as f64,
            hits,
            total,
        }
    }
}

fn count<T: Sync>(probes: &[T], f: impl Fn(&T) -> Result<bool, EvalError> + Sync + Send) -> Result<Option<MetricValue>, EvalError> {
    if probes.is_empty() {
        return Ok(None);
    }
    let hits: Result<Vec<bool>, EvalError> = probes.par_iter().map(f).collect();
    let hits = hits?.into_iter().filter(|h| *h).count();
    Ok(Some(MetricValue::from_counts(hits, probes.len())))
}

/// Default edit match: sentiment items compare polarity, all others compare
/// normalized answers.
pub fn default_match(answer: &str, item: &EvalItem) -> bool {
    if item.sentiment.is_some() {
        sentiment_matches(answer, &item.target_new)
    } else {
        answers_match(answer, &item.target_new)
    }
}

/// Fraction of items whose edit prompt is answered with the new target.
pub fn edit_success(items: &[EvalItem], answer: &AnswerFn) -> Result<MetricValue, EvalError> {
    edit_success_by(items, answer, &default_match)
}

pub fn edit_success_by(items: &[EvalItem], answer: &AnswerFn, matches: &MatchFn) -> Result<MetricValue, EvalError> {
    count(items, |it| Ok(matches(&answer(&it.prompt)?, it)))?.ok_or(EvalError::EmptyEvalSet)
}

fn preference_probes<'a>(
    items: &'a [EvalItem],
    prompts: impl Fn(&'a EvalItem) -> Vec<&'a str>,
) -> Result<Vec<(&'a str, &'a str, &'a str)>, EvalError> {
    let mut probes = Vec::new();
    for it in items {
        let ps = prompts(it);
        if ps.is_empty() {
            continue;
        }
        let old = it
            .target_old
            .as_deref()
            .ok_or_else(|| EvalError::MissingTargetOld(it.id.clone()))?;
        probes.extend(ps.into_iter().map(|p| (p, it.target_new.as_str(), old)));
    }
    Ok(probes)
}

fn strict_wins(probes: &[(&str, &str, &str)], preference: &PreferenceFn) -> Result<Option<MetricValue>, EvalError> {
    count(probes, |(p, new, old)| {
        let (s_new, s_old) = preference(p, new, old)?;
        Ok(s_new > s_old)
    })
}

/// Fraction of rephrase prompts, over all items, on which the new target
/// strictly outscores the old one. `None` when no item has rephrases.
pub fn paraphrase_score(items: &[EvalItem], preference: &PreferenceFn) -> Result<Option<MetricValue>, EvalError> {
    let probes = preference_probes(items, |it| it.rephrases.iter().map(String::as_str).collect())?;
    strict_wins(&probes, preference)
}

/// Fraction of locality prompts answered with their expected answer.
pub fn locality(items: &[EvalItem], answer: &AnswerFn) -> Result<Option<MetricValue>, EvalError> {
    let probes: Vec<&LocalityProbe> = items.iter().flat_map(|it| &it.locality).collect();
    if probes.is_empty() && !items.is_empty() {
        log::warn!("no locality prompts in the evaluation set; locality omitted");
    }
    count(&probes, |p| Ok(answers_match(&answer(&p.prompt)?, &p.expected)))
}

/// Fraction of locality prompts on which the new target strictly outscores
/// the old one.
pub fn neighborhood_success(items: &[EvalItem], preference: &PreferenceFn) -> Result<Option<MetricValue>, EvalError> {
    let probes = preference_probes(items, |it| it.locality.iter().map(|l| l.prompt.as_str()).collect())?;
    strict_wins(&probes, preference)
}

/// Exact-match accuracy on multi-hop questions given their support edits.
pub fn mquake_multihop(items: &[EvalItem], answer: &MultihopFn) -> Result<Option<MetricValue>, EvalError> {
    let probes: Vec<(&MultihopProbe, &[EditFact])> = items
        .iter()
        .filter_map(|it| it.multihop.as_ref().map(|m| (m, it.support_facts.as_slice())))
        .collect();
    count(&probes, |(m, support)| Ok(answers_match(&answer(&m.question, support)?, &m.answer)))
}

/// Preference from answers: a target scores 1 when the system's answer
/// matches it, else 0.
pub fn answer_preference<'a>(answer: &'a AnswerFn<'a>) -> impl Fn(&str, &str, &str) -> Result<(f64, f64), EvalError> + Sync + 'a {
    move |prompt, new, old| {
        let a = answer(prompt)?;
        Ok((f64::from(u8::from(answers_match(&a, new))), f64::from(u8::from(answers_match(&a, old)))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_success: Option<MetricValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paraphrase: Option<MetricValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locality: Option<MetricValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighborhood: Option<MetricValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multihop: Option<MetricValue>,
}

pub const TABLE_COLUMNS: [&str; 5] = ["Edit succ.", "Para.", "Loc.", "Nei.", "Multi-hop"];

impl MetricReport {
    pub fn metrics(&self) -> [(&'static str, Option<MetricValue>); 5] {
        [
            (TABLE_COLUMNS[0], self.edit_success),
            (TABLE_COLUMNS[1], self.paraphrase),
            (TABLE_COLUMNS[2], self.locality),
            (TABLE_COLUMNS[3], self.neighborhood),
            (TABLE_COLUMNS[4], self.multihop),
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table, values in percent with two decimals.
    pub fn table(&self) -> String {
        report_table(std::slice::from_ref(self))
    }
}

/// One header line and one row per report.
pub fn report_table(reports: &[MetricReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.dataset.len())
        .max()
        .unwrap_or(0)
        .max("Dataset".len());
    let mut out = format!("{:<width$}", "Dataset");
    for name in TABLE_COLUMNS {
        let w = name.len().max(6);
        out.push_str(&format!("  {name:>w$}"));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{:<width$}", r.dataset));
        for (name, v) in r.metrics() {
            let w = name.len().max(6);
            let cell = v.map_or_else(|| "-".to_string(), |m| format!("{:.2}", m.value * 100.0));
            out.push_str(&format!("  {cell:>w$}"));
        }
        out.push('\n');
    }
    out
}

/// The systems under test for one evaluation run.
pub struct Scorers<'a> {
    pub answer: &'a AnswerFn<'a>,
    pub preference: &'a PreferenceFn<'a>,
    pub multihop: &'a MultihopFn<'a>,
    pub matches: &'a MatchFn<'a>,
}

/// Runs every metric the items support. Metrics without probes are omitted.
pub fn evaluate(dataset: &str, items: &[EvalItem], scorers: &Scorers) -> Result<MetricReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    Ok(MetricReport {
        dataset: dataset.to_string(),
        items: items.len(),
        edit_success: Some(edit_success_by(items, scorers.answer, scorers.matches)?),
        paraphrase: paraphrase_score(items, scorers.preference)?,
        locality: locality(items, scorers.answer)?,
        neighborhood: neighborhood_success(items, scorers.preference)?,
        multihop: mquake_multihop(items, scorers.multihop)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

const POSITIVE: &[&str] = &[
    "good", "great", "excellent", "admire", "admirable", "love", "like", "wonderful", "saint",
    "praise", "positive", "best", "brilliant", "contributor", "hero", "amazing", "respect",
    "favorable", "support",
];
const NEGATIVE: &[&str] = &[
    "bad", "terrible", "awful", "hate", "dislike", "evil", "criminal", "horrible", "worst",
    "negative", "oppose", "disgusting", "poor", "villain", "condemn", "unfavorable",
];

/// Keyword polarity of a text; `None` on a tie.
pub fn sentiment_polarity(text: &str) -> Option<Polarity> {
    let (mut pos, mut neg) = (0usize, 0usize);
    for t in crate::memory::tokens(text) {
        pos += usize::from(POSITIVE.contains(&t.as_str()));
        neg += usize::from(NEGATIVE.contains(&t.as_str()));
    }
    match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => Some(Polarity::Positive),
        std::cmp::Ordering::Less => Some(Polarity::Negative),
        std::cmp::Ordering::Equal => None,
    }
}

/// True when the answer's polarity equals `target` ("positive"/"negative").
pub fn sentiment_matches(answer: &str, target: &str) -> bool {
    let want = match target.trim().to_lowercase().as_str() {
        "positive" | "pos" => Polarity::Positive,
        "negative" | "neg" => Polarity::Negative,
        _ => return false,
    };
    sentiment_polarity(answer) == Some(want)
}
