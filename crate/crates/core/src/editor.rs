//! Inference-time editing: retrieve the stored edit most similar to the
//! query, compose the instruct prompt from it and parse the model's
//! reasoning trace.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatRequest, LanguageModel};
use crate::cotgen::{CONVSENT_INSTRUCT, MULTIHOP_INSTRUCT, UNSTRUCTURED_INSTRUCT};
use crate::domain::{parse_trace, CoTTrace, DomainError, Knowledge, MalformedTrace, Question, RecordInput};
use crate::memory::{search_top_k, Embedder, MemoryError, SearchHit, VectorMemory};

/// System prompts per input kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditInstructs {
    pub multihop: String,
    pub unstructured: String,
    pub convsent: String,
}

impl Default for EditInstructs {
    fn default() -> Self {
        Self {
            multihop: MULTIHOP_INSTRUCT.into(),
            unstructured: UNSTRUCTURED_INSTRUCT.into(),
            convsent: CONVSENT_INSTRUCT.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOptions {
    /// Retrieval depth. Hits of a different payload kind than the top hit
    /// are dropped.
    pub k: usize,
    /// Hits scoring below this are treated as irrelevant.
    pub min_score: Option<f64>,
    /// Retry with the bare question when the edited prompt yields no trace.
    pub fallback: bool,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self {
            k: 1,
            min_score: None,
            fallback: false,
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum EditError {
    #[error("memory is empty")]
    EmptyMemory,
    #[error("best retrieved edit scores {score:.4}, below the minimum {min:.4}")]
    NoRelevantFact { score: f64, min: f64 },
    #[error("model output is not a valid trace ({reason}): {raw:?}")]
    EditFailed { raw: String, reason: MalformedTrace },
    #[error("invalid query: {0}")]
    InvalidQuery(#[from] DomainError),
    #[error(transparent)]
    Memory(MemoryError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl From<MemoryError> for EditError {
    fn from(e: MemoryError) -> Self {
        match e {
            MemoryError::EmptyMemory => Self::EmptyMemory,
            other => Self::Memory(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub trace: CoTTrace,
    pub answer: String,
    /// Top retrieved entry.
    pub fact_id: String,
    pub score: f64,
    /// Every entry placed in the prompt, best first.
    pub used: Vec<String>,
    pub raw: String,
    pub fallback: bool,
}

/// Immutable editing context; `edit_answer` may be called concurrently.
#[derive(Clone)]
pub struct EditSession {
    memory: Arc<VectorMemory>,
    embedder: Arc<dyn Embedder>,
    backend: Arc<dyn LanguageModel>,
    instructs: EditInstructs,
    options: EditOptions,
}

impl EditSession {
    pub fn new(
        memory: Arc<VectorMemory>,
        embedder: Arc<dyn Embedder>,
        backend: Arc<dyn LanguageModel>,
        options: EditOptions,
    ) -> Self {
        Self {
            memory,
            embedder,
            backend,
            instructs: EditInstructs::default(),
            options,
        }
    }

    pub fn with_instructs(mut self, instructs: EditInstructs) -> Self {
        self.instructs = instructs;
        self
    }

    pub fn memory(&self) -> &VectorMemory {
        &self.memory
    }

    pub fn options(&self) -> &EditOptions {
        &self.options
    }

    fn request(&self, system: &str, user: String) -> ChatRequest {
        ChatRequest::new(system, user)
            .temperature(self.options.temperature)
            .max_tokens(self.options.max_tokens)
            .seed(self.options.seed)
    }

    /// Retrieval plus prompt assembly, without calling the model.
    pub fn edit_request(&self, query: &Question) -> Result<(ChatRequest, Vec<SearchHit>), EditError> {
        query.check()?;
        let hits = search_top_k(&self.memory, &query.text, self.options.k.max(1), self.embedder.as_ref())?;
        let top = &hits[0];
        if let Some(min) = self.options.min_score {
            if top.score < min {
                return Err(EditError::NoRelevantFact { score: top.score, min });
            }
        }
        let payload = |h: &SearchHit| &self.memory.entries()[h.index].payload;
        let top_is_context = payload(top).is_context();
        let hits: Vec<SearchHit> = hits
            .iter()
            .filter(|h| payload(h).is_context() == top_is_context)
            .cloned()
            .collect();
        let (system, knowledge) = if top_is_context {
            let texts: Vec<String> = hits.iter().map(|h| payload(h).text()).collect();
            (&self.instructs.unstructured, Knowledge::Context(texts.join("\n\n")))
        } else {
            let facts = hits.iter().map(|h| payload(h).text()).collect();
            (&self.instructs.multihop, Knowledge::Facts(facts))
        };
        let input = RecordInput {
            question: query.text.trim().to_string(),
            knowledge,
        };
        Ok((self.request(system, input.render()), hits))
    }

    /// Answers `query` by reasoning over the most similar stored edit.
    pub fn edit_answer(&self, query: &Question) -> Result<EditOutcome, EditError> {
        let (req, hits) = self.edit_request(query)?;
        let raw = self.backend.complete(&req)?;
        let (trace, raw, fallback) = match parse_trace(&raw) {
            Ok(t) => (t, raw, false),
            Err(reason) if !self.options.fallback => return Err(EditError::EditFailed { raw, reason }),
            Err(_) => {
                let bare = self.request(&self.instructs.multihop, format!("Question: {}", query.text.trim()));
                let raw = self.backend.complete(&bare)?;
                match parse_trace(&raw) {
                    Ok(t) => (t, raw, true),
                    Err(reason) => return Err(EditError::EditFailed { raw, reason }),
                }
            }
        };
        Ok(EditOutcome {
            answer: trace.answer.clone(),
            trace,
            fact_id: hits[0].fact_id.clone(),
            score: hits[0].score,
            used: hits.into_iter().map(|h| h.fact_id).collect(),
            raw,
            fallback,
        })
    }

    /// Prompt for a sentiment edit about `entity`.
    pub fn sentiment_request(&self, entity: &str, edit_sentiment: &str) -> Result<ChatRequest, EditError> {
        if entity.trim().is_empty() {
            return Err(DomainError::EmptyField("entity").into());
        }
        if edit_sentiment.trim().is_empty() {
            return Err(DomainError::EmptyField("edit_sentiment").into());
        }
        let input = RecordInput {
            question: sentiment_question(entity),
            knowledge: Knowledge::Sentiment(edit_sentiment.trim().to_string()),
        };
        Ok(self.request(&self.instructs.convsent, input.render()))
    }

    /// Gives the model's stance on `entity` under the edit sentiment. No
    /// retrieval is involved.
    pub fn edit_sentiment(&self, entity: &str, edit_sentiment: &str) -> Result<(CoTTrace, String), EditError> {
        let req = self.sentiment_request(entity, edit_sentiment)?;
        let raw = self.backend.complete(&req)?;
        let trace = parse_trace(&raw).map_err(|reason| EditError::EditFailed { raw, reason })?;
        let answer = trace.answer.clone();
        Ok((trace, answer))
    }
}

/// The question asked about an entity in sentiment editing.
pub fn sentiment_question(entity: &str) -> String {
    format!("What do you think of {}?", entity.trim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedBackend;
    use crate::domain::{ContextSource, EditContext, EditFact};
    use crate::memory::{HashBagEmbedder, MemoryPayload, Metric};

    fn session(memory: VectorMemory, backend: ScriptedBackend, options: EditOptions) -> EditSession {
        EditSession::new(
            Arc::new(memory),
            Arc::new(HashBagEmbedder::new(64)),
            Arc::new(backend),
            options,
        )
    }

    fn fact_memory() -> (VectorMemory, String) {
        let mut m = VectorMemory::new(64, Metric::Cosine);
        let fact = EditFact::new("Association football", "was created in", "Hong Kong").unwrap();
        let id = m.insert(MemoryPayload::Fact(fact), &HashBagEmbedder::new(64)).unwrap();
        (m, id)
    }

    #[test]
    fn tagless_reply_is_edit_failed() {
        let (m, _) = fact_memory();
        let s = session(m, ScriptedBackend::new().with_default("Hong Kong"), EditOptions::default());
        let q = Question::new("Where was football created?", 1).unwrap();
        match s.edit_answer(&q) {
            Err(EditError::EditFailed { raw, reason }) => {
                assert_eq!(raw, "Hong Kong");
                assert_eq!(reason, MalformedTrace::MissingThink);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fallback_uses_bare_question() {
        let (m, _) = fact_memory();
        let backend = ScriptedBackend::new()
            .rule("Edit Fact", "no tags")
            .with_default("<think>Step1: s Knowledge1: k</think><answer>Hong Kong</answer>");
        let s = session(m, backend, EditOptions { fallback: true, ..Default::default() });
        let out = s.edit_answer(&Question::new("Where was football created?", 1).unwrap()).unwrap();
        assert!(out.fallback);
        assert_eq!(out.answer, "Hong Kong");
    }

    #[test]
    fn empty_memory_and_min_score() {
        let s = session(VectorMemory::new(64, Metric::Cosine), ScriptedBackend::new(), EditOptions::default());
        let q = Question::new("anything", 1).unwrap();
        assert!(matches!(s.edit_answer(&q), Err(EditError::EmptyMemory)));

        let (m, _) = fact_memory();
        let s = session(m, ScriptedBackend::new(), EditOptions { min_score: Some(0.5), ..Default::default() });
        let q = Question::new("zzz qqq", 1).unwrap();
        assert!(matches!(s.edit_answer(&q), Err(EditError::NoRelevantFact { .. })));
    }

    #[test]
    fn k_two_keeps_kind_of_top_hit() {
        let e = HashBagEmbedder::new(64);
        let mut m = VectorMemory::new(64, Metric::Cosine);
        m.insert(
            MemoryPayload::Fact(EditFact::new("Association football", "was created in", "Hong Kong").unwrap()),
            &e,
        )
        .unwrap();
        m.insert(
            MemoryPayload::Context(EditContext::new("Football began in a Hong Kong harbour.", ContextSource::Synthetic).unwrap()),
            &e,
        )
        .unwrap();
        let s = session(m, ScriptedBackend::new(), EditOptions { k: 2, ..Default::default() });
        let (req, hits) = s.edit_request(&Question::new("Where was association football created?", 1).unwrap()).unwrap();
        assert_eq!(hits.len(), 1);
        assert!(req.last_user().contains("Edit Fact: Association football was created in Hong Kong"));
        assert!(!req.last_user().contains("harbour"));
    }

    #[test]
    fn empty_entity_rejected() {
        let (m, _) = fact_memory();
        let s = session(m, ScriptedBackend::new(), EditOptions::default());
        assert!(matches!(s.edit_sentiment(" ", "x"), Err(EditError::InvalidQuery(_))));
    }
}
