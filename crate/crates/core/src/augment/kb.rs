//! Knowledge-base clients for answer verification.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::extract::property_for;
use crate::domain::normalize_answer;
use crate::schema::{read_json, SchemaError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KbError {
    #[error("knowledge base unavailable: {0}")]
    Unavailable(String),
    #[error("knowledge base rejected the query with status {status}: {body}")]
    Rejected { status: u16, body: String },
}

impl KbError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Unavailable(_))
    }
}

/// Single-hop lookup of `relation` for `entity`. A miss is `Ok(None)`.
pub trait KnowledgeBase: Send + Sync {
    fn lookup(&self, entity: &str, relation: &str) -> Result<Option<String>, KbError>;
}

impl<T: KnowledgeBase + ?Sized> KnowledgeBase for &T {
    fn lookup(&self, entity: &str, relation: &str) -> Result<Option<String>, KbError> {
        (**self).lookup(entity, relation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureFact {
    pub entity: String,
    pub relation: String,
    pub answer: String,
}

/// In-memory map from (entity, relation) to answer. Entities are compared
/// after answer normalization, relations case-insensitively.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FixtureKb {
    facts: BTreeMap<(String, String), String>,
}

impl FixtureKb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fact(mut self, entity: &str, relation: &str, answer: impl Into<String>) -> Self {
        self.facts.insert(Self::key(entity, relation), answer.into());
        self
    }

    /// Loads a JSON array of `{entity, relation, answer}` objects.
    pub fn from_json_file(path: &Path) -> Result<Self, SchemaError> {
        let facts: Vec<FixtureFact> = read_json(path)?;
        Ok(facts
            .into_iter()
            .fold(Self::new(), |kb, f| kb.fact(&f.entity, &f.relation, f.answer)))
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    fn key(entity: &str, relation: &str) -> (String, String) {
        (normalize_answer(entity), relation.trim().to_lowercase())
    }
}

impl KnowledgeBase for FixtureKb {
    fn lookup(&self, entity: &str, relation: &str) -> Result<Option<String>, KbError> {
        Ok(self.facts.get(&Self::key(entity, relation)).cloned())
    }
}

pub const WIKIDATA_SPARQL: &str = "https://query.wikidata.org/sparql";

/// Live adapter for a SPARQL-protocol endpoint over Wikidata. Requests are
/// spaced at least `min_interval` apart.
pub struct SparqlKb {
    endpoint: String,
    user_agent: String,
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
    agent: ureq::Agent,
}

impl SparqlKb {
    pub fn new(endpoint: impl Into<String>, min_interval: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            user_agent: concat!("cotedit/", env!("CARGO_PKG_VERSION")).into(),
            min_interval,
            last: Mutex::new(None),
            agent,
        }
    }

    fn wait_turn(&self) {
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(t) = *last {
            let ready = t + self.min_interval;
            let now = Instant::now();
            if ready > now {
                std::thread::sleep(ready - now);
            }
        }
        *last = Some(Instant::now());
    }
}

fn escape_literal(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

/// Single-hop query: the English label of `property` for the item whose
/// English label is `entity`.
pub fn sparql_query(entity: &str, property: &str) -> String {
    format!(
        "SELECT ?valueLabel WHERE {{\n  ?item rdfs:label \"{}\"@en .\n  ?item wdt:{} ?value .\n  SERVICE wikibase:label {{ bd:serviceParam wikibase:language \"en\". }}\n}}\nLIMIT 1",
        escape_literal(entity.trim()),
        property
    )
}

pub(crate) fn parse_sparql_response(v: &serde_json::Value) -> Option<String> {
    v.pointer("/results/bindings/0/valueLabel/value")
        .and_then(|x| x.as_str())
        .map(str::to_string)
}

impl KnowledgeBase for SparqlKb {
    fn lookup(&self, entity: &str, relation: &str) -> Result<Option<String>, KbError> {
        let Some(property) = property_for(relation) else {
            return Ok(None);
        };
        self.wait_turn();
        let query = sparql_query(entity, property);
        let mut resp = self
            .agent
            .get(&self.endpoint)
            .query("query", &query)
            .query("format", "json")
            .header("Accept", "application/sparql-results+json")
            .header("User-Agent", &self.user_agent)
            .call()
            .map_err(|e| KbError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| KbError::Unavailable(e.to_string()))?;
        match status {
            200..=299 => {}
            429 | 500..=599 => return Err(KbError::Unavailable(format!("status {status}"))),
            _ => return Err(KbError::Rejected { status, body }),
        }
        let v: serde_json::Value =
            serde_json::from_str(&body).map_err(|e| KbError::Unavailable(format!("bad response: {e}")))?;
        Ok(parse_sparql_response(&v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn fixture_lookup_normalizes_entity() {
        let kb = FixtureKb::new().fact("Moscow", "continent", "Antarctica");
        assert_eq!(kb.lookup("the moscow", "Continent").unwrap().as_deref(), Some("Antarctica"));
        assert_eq!(kb.lookup("Paris", "continent").unwrap(), None);
    }

    #[test]
    fn query_escapes_entity() {
        let q = sparql_query("Say \"Hi\"", "P36");
        assert!(q.contains(r#"rdfs:label "Say \"Hi\""@en"#));
        assert!(q.contains("wdt:P36"));
    }

    #[test]
    fn response_parsing() {
        let v = json!({"results": {"bindings": [{"valueLabel": {"type": "literal", "value": "Europe"}}]}});
        assert_eq!(parse_sparql_response(&v).as_deref(), Some("Europe"));
        assert_eq!(parse_sparql_response(&json!({"results": {"bindings": []}})), None);
    }

    #[test]
    fn unknown_relation_is_a_miss_without_network() {
        let kb = SparqlKb::new("http://127.0.0.1:9", Duration::ZERO);
        assert_eq!(kb.lookup("Moscow", "favourite colour").unwrap(), None);
    }
}
