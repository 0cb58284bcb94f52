//! Shared domain types, the reasoning-trace grammar and answer normalization.
//!
//! A trace looks like
//!
//! ```text
//! <think>
//! Extract: I need to extract the most relevant factual information to the question.
//! Extracted Edit Fact: High on Fire originated in the country of Austria.
//! Step1: I need to know which country High on Fire was created in.
//! Knowledge1: According to the extracted Edit Fact, High on Fire was created in Austria.
//! </think>
//!
//! <answer>Austria</answer>
//! ```
//!
//! The `Extract` lines only appear for records derived from an edit context.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed wording of the `Extract:` line emitted ahead of an extracted fact.
pub const EXTRACT_PREAMBLE: &str =
    "I need to extract the most relevant factual information to the question.";

/// A structured edit: a (subject, relation, object) triple plus an optional
/// natural-language rendering.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditFact {
    pub subject: String,
    pub relation: String,
    pub object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<String>,
}

impl EditFact {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let fact = Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
            surface: None,
        };
        fact.check()?;
        Ok(fact)
    }

    pub fn with_surface(mut self, surface: impl Into<String>) -> Result<Self, DomainError> {
        self.surface = Some(surface.into());
        self.check()?;
        Ok(self)
    }

    pub fn check(&self) -> Result<(), DomainError> {
        for (name, value) in [
            ("subject", &self.subject),
            ("relation", &self.relation),
            ("object", &self.object),
        ] {
            if value.trim().is_empty() {
                return Err(DomainError::EmptyField(name));
            }
        }
        if let Some(surface) = &self.surface {
            let lower = surface.to_lowercase();
            if !lower.contains(&self.subject.to_lowercase())
                || !lower.contains(&self.object.to_lowercase())
            {
                return Err(DomainError::SurfaceMismatch(surface.clone()));
            }
        }
        Ok(())
    }

    /// Natural-language sentence for prompts and embeddings.
    pub fn sentence(&self) -> String {
        match &self.surface {
            Some(s) => s.trim().to_string(),
            None => format!(
                "{} {} {}",
                self.subject.trim(),
                self.relation.trim(),
                self.object.trim()
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextSource {
    CounterfactUns,
    Wikiupdate,
    Synthetic,
}

/// A free-text passage carrying an edit implicitly.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditContext {
    pub text: String,
    pub source: ContextSource,
}

impl EditContext {
    /// Default passage budget, in whitespace tokens.
    pub const DEFAULT_MAX_TOKENS: usize = 1024;

    pub fn new(text: impl Into<String>, source: ContextSource) -> Result<Self, DomainError> {
        let ctx = Self {
            text: text.into(),
            source,
        };
        ctx.check(Self::DEFAULT_MAX_TOKENS)?;
        Ok(ctx)
    }

    pub fn check(&self, max_tokens: usize) -> Result<(), DomainError> {
        if self.text.trim().is_empty() {
            return Err(DomainError::EmptyField("text"));
        }
        let n = self.text.split_whitespace().count();
        if n > max_tokens {
            return Err(DomainError::ContextTooLong {
                tokens: n,
                max: max_tokens,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub hops: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
}

impl Question {
    pub fn new(text: impl Into<String>, hops: u32) -> Result<Self, DomainError> {
        let q = Self {
            text: text.into(),
            hops,
            gold_answer: None,
        };
        q.check()?;
        Ok(q)
    }

    pub fn with_gold(mut self, gold: impl Into<String>) -> Self {
        self.gold_answer = Some(gold.into());
        self
    }

    pub fn check(&self) -> Result<(), DomainError> {
        if self.text.trim().is_empty() {
            return Err(DomainError::EmptyField("question"));
        }
        if self.hops == 0 {
            return Err(DomainError::ZeroHops);
        }
        Ok(())
    }
}

/// One decomposition step and the knowledge used to resolve it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub step: String,
    pub knowledge: String,
}

impl ReasoningStep {
    pub fn new(step: impl Into<String>, knowledge: impl Into<String>) -> Self {
        Self {
            step: step.into(),
            knowledge: knowledge.into(),
        }
    }
}

/// Parsed reasoning transcript: ordered steps inside the think block and the
/// final answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoTTrace {
    pub steps: Vec<ReasoningStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_fact: Option<String>,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedTrace {
    MissingThink,
    MissingAnswer,
    UnpairedStep,
    MultipleBlocks,
}

impl fmt::Display for MalformedTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::MissingThink => "missing think block",
            Self::MissingAnswer => "missing answer block",
            Self::UnpairedStep => "step and knowledge lines are unpaired",
            Self::MultipleBlocks => "more than one think or answer block",
        };
        f.write_str(s)
    }
}

impl std::error::Error for MalformedTrace {}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DomainError {
    #[error("field `{0}` must be non-empty")]
    EmptyField(&'static str),
    #[error("surface rendering must mention subject and object: {0:?}")]
    SurfaceMismatch(String),
    #[error("edit context has {tokens} tokens, budget is {max}")]
    ContextTooLong { tokens: usize, max: usize },
    #[error("question hops must be at least 1")]
    ZeroHops,
    #[error("trace text contains a reserved marker: {0:?}")]
    ReservedMarker(String),
    #[error("record input must contain exactly one `Question:` line, found {0}")]
    QuestionCount(usize),
    #[error("record input carries no edit fact or edit context")]
    MissingKnowledge,
    #[error("record output is not a valid trace: {0}")]
    Output(MalformedTrace),
}

static THINK_OPEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)<think>").unwrap());
static THINK_CLOSE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)</think>").unwrap());
static ANSWER_OPEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)<answer>").unwrap());
static ANSWER_CLOSE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)</answer>").unwrap());
static MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(extracted\s+edit\s+fact|extract|step\s*\d*|knowledge\s*\d*)\s*:").unwrap()
});

/// Byte spans of the think and answer block bodies.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Blocks {
    pub think: (usize, usize),
    pub answer: (usize, usize),
}

fn single<'t>(re: &Regex, text: &'t str) -> Result<Option<regex::Match<'t>>, MalformedTrace> {
    let mut it = re.find_iter(text);
    let first = it.next();
    if it.next().is_some() {
        return Err(MalformedTrace::MultipleBlocks);
    }
    Ok(first)
}

/// Locates exactly one think block followed by exactly one answer block.
pub(crate) fn locate_blocks(text: &str) -> Result<Blocks, MalformedTrace> {
    let think_open = single(&THINK_OPEN, text)?;
    let think_close = single(&THINK_CLOSE, text)?;
    let answer_open = single(&ANSWER_OPEN, text)?;
    let answer_close = single(&ANSWER_CLOSE, text)?;

    let think = match (think_open, think_close) {
        (Some(o), Some(c)) if o.end() <= c.start() => (o.end(), c.start()),
        _ => return Err(MalformedTrace::MissingThink),
    };
    let answer = match (answer_open, answer_close) {
        (Some(o), Some(c)) if o.end() <= c.start() && o.start() >= think.1 => (o.end(), c.start()),
        _ => return Err(MalformedTrace::MissingAnswer),
    };
    Ok(Blocks { think, answer })
}

/// Body of the first complete think block, whether or not the rest of the
/// text is well formed.
pub(crate) fn first_think_body(text: &str) -> Option<&str> {
    let open = THINK_OPEN.find(text)?;
    let close = THINK_CLOSE.find_at(text, open.end())?;
    Some(&text[open.end()..close.start()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MarkerKind {
    ExtractedFact,
    Extract,
    Step,
    Knowledge,
}

fn marker_kind(label: &str) -> MarkerKind {
    let l = label.to_ascii_lowercase();
    if l.starts_with("extracted") {
        MarkerKind::ExtractedFact
    } else if l.starts_with("extract") {
        MarkerKind::Extract
    } else if l.starts_with("step") {
        MarkerKind::Step
    } else {
        MarkerKind::Knowledge
    }
}

/// Parses raw model output into a [`CoTTrace`].
///
/// Total over all inputs: any string yields either a trace or a
/// [`MalformedTrace`] reason.
pub fn parse_trace(text: &str) -> Result<CoTTrace, MalformedTrace> {
    let blocks = locate_blocks(text)?;
    let think = &text[blocks.think.0..blocks.think.1];
    let answer = text[blocks.answer.0..blocks.answer.1].trim();
    if answer.is_empty() {
        return Err(MalformedTrace::MissingAnswer);
    }

    let markers: Vec<(MarkerKind, usize, usize)> = MARKER
        .captures_iter(think)
        .map(|c| {
            let whole = c.get(0).unwrap();
            (marker_kind(&c[1]), whole.start(), whole.end())
        })
        .collect();

    let mut steps = Vec::new();
    let mut knowledge = Vec::new();
    let mut extracted_fact = None;
    for (i, &(kind, _, body_start)) in markers.iter().enumerate() {
        let body_end = markers.get(i + 1).map_or(think.len(), |m| m.1);
        let body = think[body_start..body_end].trim().to_string();
        match kind {
            MarkerKind::Step => steps.push(body),
            MarkerKind::Knowledge => knowledge.push(body),
            MarkerKind::ExtractedFact => {
                if extracted_fact.is_some() {
                    return Err(MalformedTrace::MultipleBlocks);
                }
                extracted_fact = Some(body);
            }
            MarkerKind::Extract => {}
        }
    }
    if steps.len() != knowledge.len() {
        return Err(MalformedTrace::UnpairedStep);
    }

    Ok(CoTTrace {
        steps: steps
            .into_iter()
            .zip(knowledge)
            .map(|(step, knowledge)| ReasoningStep { step, knowledge })
            .collect(),
        extracted_fact,
        answer: answer.to_string(),
    })
}

/// Serializes a trace in the training-data layout. Inverse of [`parse_trace`]
/// for traces that pass [`CoTTrace::check`].
pub fn render_trace(trace: &CoTTrace) -> String {
    let mut out = String::from("<think>\n");
    if let Some(fact) = &trace.extracted_fact {
        out.push_str("Extract: ");
        out.push_str(EXTRACT_PREAMBLE);
        out.push('\n');
        out.push_str("Extracted Edit Fact: ");
        out.push_str(fact);
        out.push('\n');
    }
    for (i, s) in trace.steps.iter().enumerate() {
        let n = i + 1;
        out.push_str(&format!("Step{n}: {}\nKnowledge{n}: {}\n", s.step, s.knowledge));
    }
    out.push_str("</think>\n\n<answer>");
    out.push_str(&trace.answer);
    out.push_str("</answer>");
    out
}

impl CoTTrace {
    /// Checks the invariants that make the trace render losslessly.
    pub fn check(&self) -> Result<(), DomainError> {
        if self.answer.trim().is_empty() {
            return Err(DomainError::EmptyField("answer"));
        }
        let mut fields: Vec<&str> = vec![&self.answer];
        if let Some(f) = &self.extracted_fact {
            fields.push(f);
        }
        for s in &self.steps {
            fields.push(&s.step);
            fields.push(&s.knowledge);
        }
        for f in fields {
            if f.trim() != f
                || MARKER.is_match(f)
                || THINK_OPEN.is_match(f)
                || THINK_CLOSE.is_match(f)
                || ANSWER_OPEN.is_match(f)
                || ANSWER_CLOSE.is_match(f)
            {
                return Err(DomainError::ReservedMarker(f.to_string()));
            }
        }
        Ok(())
    }

    /// All think-block text concatenated, used for keyword checks.
    pub fn reasoning_text(&self) -> String {
        let mut parts = Vec::new();
        if let Some(f) = &self.extracted_fact {
            parts.push(f.as_str());
        }
        for s in &self.steps {
            parts.push(&s.step);
            parts.push(&s.knowledge);
        }
        parts.join(" ")
    }
}

const ARTICLES: [&str; 3] = ["a ", "an ", "the "];
const TERMINAL_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':'];

/// Canonical form for exact-match answer comparison.
pub fn normalize_answer(text: &str) -> String {
    let mut s = text
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    loop {
        let before = s.len();
        s = s.trim_end_matches(TERMINAL_PUNCT).trim().to_string();
        for article in ARTICLES {
            if let Some(rest) = s.strip_prefix(article) {
                s = rest.trim_start().to_string();
            }
        }
        if s.len() == before {
            return s;
        }
    }
}

pub fn answers_match(a: &str, b: &str) -> bool {
    normalize_answer(a) == normalize_answer(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    #[serde(rename = "mquake")]
    Mquake,
    #[serde(rename = "mquake-uns")]
    MquakeUns,
    #[serde(rename = "synthetic")]
    Synthetic,
}

/// One training example. Serialized with the keys `Instruct`, `Input`,
/// `Output`, `Origin`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstructionRecord {
    #[serde(rename = "Instruct")]
    pub instruct: String,
    #[serde(rename = "Input")]
    pub input: String,
    #[serde(rename = "Output")]
    pub output: String,
    #[serde(rename = "Origin")]
    pub origin: Origin,
}

impl InstructionRecord {
    pub fn new(
        instruct: impl Into<String>,
        input: &RecordInput,
        trace: &CoTTrace,
        origin: Origin,
    ) -> Self {
        Self {
            instruct: instruct.into(),
            input: input.render(),
            output: render_trace(trace),
            origin,
        }
    }

    pub fn trace(&self) -> Result<CoTTrace, MalformedTrace> {
        parse_trace(&self.output)
    }

    pub fn parsed_input(&self) -> Result<RecordInput, DomainError> {
        RecordInput::parse(&self.input)
    }

    pub fn check(&self) -> Result<(), DomainError> {
        self.parsed_input()?;
        self.trace().map_err(DomainError::Output)?;
        Ok(())
    }

    /// Identity used for set semantics over training data.
    pub fn fingerprint(&self) -> String {
        crate::fingerprint(&[&self.input, &self.output])
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Knowledge block of a record input.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Knowledge {
    Facts(Vec<String>),
    Context(String),
    Sentiment(String),
}

/// The `Input` side of a record: one question plus the fact(s) or context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecordInput {
    pub question: String,
    pub knowledge: Knowledge,
}

static INPUT_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)^\s*(question|edit facts?|edit context|edit sentiment)\s*:[ \t]*").unwrap()
});

impl RecordInput {
    pub fn with_facts(question: impl Into<String>, facts: &[EditFact]) -> Self {
        Self {
            question: question.into(),
            knowledge: Knowledge::Facts(facts.iter().map(EditFact::sentence).collect()),
        }
    }

    pub fn with_context(question: impl Into<String>, context: &EditContext) -> Self {
        Self {
            question: question.into(),
            knowledge: Knowledge::Context(context.text.trim().to_string()),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("Question: {}", self.question.trim());
        match &self.knowledge {
            Knowledge::Facts(facts) => {
                for f in facts {
                    out.push_str("\nEdit Fact: ");
                    out.push_str(f.trim());
                }
            }
            Knowledge::Context(c) => {
                out.push_str("\nEdit Context: ");
                out.push_str(c.trim());
            }
            Knowledge::Sentiment(s) => {
                out.push_str("\nEdit Sentiment: ");
                out.push_str(s.trim());
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DomainError> {
        let marks: Vec<(String, usize, usize)> = INPUT_LINE
            .captures_iter(text)
            .map(|c| {
                let m = c.get(0).unwrap();
                (c[1].to_ascii_lowercase(), m.start(), m.end())
            })
            .collect();
        let mut questions = Vec::new();
        let mut facts = Vec::new();
        let mut context = None;
        let mut sentiment = None;
        for (i, (label, _, start)) in marks.iter().enumerate() {
            let end = marks.get(i + 1).map_or(text.len(), |m| m.1);
            let body = text[*start..end].trim().to_string();
            match label.as_str() {
                "question" => questions.push(body),
                "edit context" => context = Some(body),
                "edit sentiment" => sentiment = Some(body),
                _ => facts.extend(body.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty())),
            }
        }
        if questions.len() != 1 {
            return Err(DomainError::QuestionCount(questions.len()));
        }
        let knowledge = if let Some(c) = context {
            Knowledge::Context(c)
        } else if let Some(s) = sentiment {
            Knowledge::Sentiment(s)
        } else if !facts.is_empty() {
            Knowledge::Facts(facts)
        } else {
            return Err(DomainError::MissingKnowledge);
        };
        Ok(Self {
            question: questions.pop().unwrap(),
            knowledge,
        })
    }
}
