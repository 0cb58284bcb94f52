//! Loaders for the MQuAKE and MQuAKE-uns corpora.
//!
//! MQuAKE items (published `MQuAKE-CF-3k` schema) use:
//!
//! | field | use |
//! |---|---|
//! | `case_id` | item identity |
//! | `requested_rewrite[].{prompt, subject, target_new.str, target_true.str, relation_id}` | edit facts; `prompt` holds a `{}` placeholder for the subject |
//! | `questions[0]` | the multi-hop question |
//! | `answer` / `new_answer` | pre-edit and post-edit gold answers |
//! | `new_single_hops` | hop count |
//!
//! MQuAKE-uns items carry the same question/answer fields plus a free-text
//! passage under `context` (aliases `edit_context`, `unstructured_context`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{ContextSource, DomainError, EditContext, EditFact, Question};
use crate::schema::{read_json, OneOrMany, SchemaError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetString {
    pub str: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestedRewrite {
    pub prompt: String,
    pub subject: String,
    pub target_new: TargetString,
    #[serde(default)]
    pub target_true: Option<TargetString>,
    #[serde(default)]
    pub relation_id: Option<String>,
}

impl RequestedRewrite {
    /// Relation phrase: the prompt with its subject placeholder removed.
    pub fn relation(&self) -> String {
        let phrase = self
            .prompt
            .replace("{}", " ")
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        if phrase.is_empty() {
            self.relation_id.clone().unwrap_or_default()
        } else {
            phrase
        }
    }

    pub fn to_fact(&self) -> Result<EditFact, DomainError> {
        let sentence = if self.prompt.contains("{}") {
            format!("{} {}", self.prompt.replace("{}", &self.subject).trim(), self.target_new.str.trim())
        } else {
            format!("{} {} {}", self.subject.trim(), self.prompt.trim(), self.target_new.str.trim())
        };
        EditFact::new(&self.subject, self.relation(), &self.target_new.str)?.with_surface(sentence)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SingleHop {
    pub question: String,
    #[serde(default)]
    pub cloze: Option<String>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MquakeCase {
    pub case_id: serde_json::Value,
    pub requested_rewrite: Vec<RequestedRewrite>,
    pub questions: Vec<String>,
    #[serde(default)]
    pub answer: Option<String>,
    pub new_answer: String,
    #[serde(default)]
    pub new_single_hops: Vec<SingleHop>,
}

impl MquakeCase {
    pub fn facts(&self) -> Result<Vec<EditFact>, DomainError> {
        self.requested_rewrite.iter().map(RequestedRewrite::to_fact).collect()
    }

    pub fn hops(&self) -> u32 {
        (self.new_single_hops.len().max(1)) as u32
    }

    pub fn question(&self) -> Result<Question, DomainError> {
        let text = self
            .questions
            .first()
            .ok_or(DomainError::EmptyField("questions"))?;
        Ok(Question::new(text.clone(), self.hops())?.with_gold(self.new_answer.clone()))
    }

    /// (subject, relation) pairs edited by this case, lowercased.
    pub fn entity_relations(&self) -> Vec<(String, String)> {
        self.requested_rewrite
            .iter()
            .map(|r| (r.subject.trim().to_lowercase(), r.relation().to_lowercase()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MquakeUnsCase {
    #[serde(default)]
    pub case_id: serde_json::Value,
    #[serde(alias = "edit_context", alias = "unstructured_context")]
    pub context: String,
    #[serde(alias = "question")]
    pub questions: OneOrMany,
    #[serde(alias = "answer")]
    pub new_answer: String,
    #[serde(default)]
    pub requested_rewrite: Vec<RequestedRewrite>,
    #[serde(default)]
    pub new_single_hops: Vec<SingleHop>,
}

impl MquakeUnsCase {
    pub fn edit_context(&self) -> Result<EditContext, DomainError> {
        let ctx = EditContext {
            text: self.context.clone(),
            source: ContextSource::Synthetic,
        };
        ctx.check(usize::MAX)?;
        Ok(ctx)
    }

    pub fn question(&self) -> Result<Question, DomainError> {
        let text = self
            .questions
            .first()
            .ok_or(DomainError::EmptyField("questions"))?;
        let hops = self.new_single_hops.len().max(1) as u32;
        Ok(Question::new(text, hops)?.with_gold(self.new_answer.clone()))
    }

    pub fn entity_relations(&self) -> Vec<(String, String)> {
        self.requested_rewrite
            .iter()
            .map(|r| (r.subject.trim().to_lowercase(), r.relation().to_lowercase()))
            .collect()
    }
}

pub fn load_mquake(path: &Path) -> Result<Vec<MquakeCase>, SchemaError> {
    read_json(path)
}

pub fn load_mquake_uns(path: &Path) -> Result<Vec<MquakeUnsCase>, SchemaError> {
    read_json(path)
}
