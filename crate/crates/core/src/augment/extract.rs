//! Rule-based entity-relation extraction, used both on the source corpus and
//! on generated questions.

use std::collections::HashSet;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{read_json, SchemaError};

/// Maps a surface pattern to a relation label and its Wikidata property.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationRule {
    pub pattern: &'static str,
    pub relation: &'static str,
    pub property: &'static str,
}

const fn rule(pattern: &'static str, relation: &'static str, property: &'static str) -> RelationRule {
    RelationRule {
        pattern,
        relation,
        property,
    }
}

/// Earlier rules win when two match at the same position.
pub const RELATION_RULES: &[RelationRule] = &[
    rule(r"\bborn\b|\bbirthplace\b|\bplace of birth\b", "place of birth", "P19"),
    rule(r"\bdied\b|\bdeath\b", "place of death", "P20"),
    rule(r"\bcapital\b", "capital", "P36"),
    rule(r"\bcontinent\b", "continent", "P30"),
    rule(r"\bheadquarter(s|ed)?\b", "headquarters location", "P159"),
    rule(r"\bfound(ed|er)\b", "founded by", "P112"),
    rule(r"\bdirect(ed|or)\b", "director", "P57"),
    rule(r"\bauthor\b|\bwritten by\b|\bwrote\b", "author", "P50"),
    rule(r"\bspouse\b|\bmarried\b|\bwife\b|\bhusband\b", "spouse", "P26"),
    rule(r"\bcitizen(ship)?\b|\bnationality\b", "country of citizenship", "P27"),
    rule(r"\bcreated\b|\bformed\b|\boriginated\b|\bcountry of origin\b", "country of origin", "P495"),
    rule(r"\bofficial language\b|\blanguage\b", "official language", "P37"),
    rule(r"\bprime minister\b|\bhead of government\b|\bmayor\b", "head of government", "P6"),
    rule(r"\bhead of state\b|\bpresident\b", "head of state", "P35"),
    rule(r"\bplay(s|ed)? for\b|\bteam\b|\bclub\b", "member of sports team", "P54"),
    rule(r"\bsport\b", "sport", "P641"),
    rule(r"\bgenre\b", "genre", "P136"),
    rule(r"\brecord label\b|\bsigned to\b", "record label", "P264"),
    rule(r"\beducated\b|\battended\b|\balma mater\b|\bgraduated\b", "educated at", "P69"),
    rule(r"\boccupation\b|\bprofession\b", "occupation", "P106"),
];

static RULES: LazyLock<Vec<(Regex, &'static RelationRule)>> = LazyLock::new(|| {
    RELATION_RULES
        .iter()
        .map(|r| (Regex::new(&format!("(?i){}", r.pattern)).unwrap(), r))
        .collect()
});

/// Wikidata property of a relation label produced by the rule list.
pub fn property_for(relation: &str) -> Option<&'static str> {
    RELATION_RULES
        .iter()
        .find(|r| r.relation.eq_ignore_ascii_case(relation.trim()))
        .map(|r| r.property)
}

/// Every rule match in `text` as `(start, end, relation)`, by position.
fn rule_matches(text: &str) -> Vec<(usize, usize, &'static str)> {
    let mut out = Vec::new();
    for (i, (re, r)) in RULES.iter().enumerate() {
        for m in re.find_iter(text) {
            out.push((m.start(), i, m.end(), r.relation));
        }
    }
    out.sort();
    out.into_iter().map(|(s, _, e, r)| (s, e, r)).collect()
}

/// Relation named by a sentence: the earliest rule match.
pub fn sentence_relation(sentence: &str) -> Option<&'static str> {
    rule_matches(sentence).first().map(|m| m.2)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityRelation {
    pub entity: String,
    pub relation: String,
    /// Id of the corpus item the pair came from.
    pub provenance: String,
}

/// One HotpotQA item. `supporting_facts` are `[title, sentence index]`
/// pairs into `context`, whose paragraphs are `[title, sentences]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HotpotItem {
    #[serde(rename = "_id", alias = "id")]
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub answer: String,
    pub supporting_facts: Vec<(String, usize)>,
    pub context: Vec<(String, Vec<String>)>,
}

#[derive(Debug, Error)]
pub enum CorpusFormatError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("item {item}: supporting fact names unknown paragraph {title:?}")]
    UnknownTitle { item: String, title: String },
}

pub fn load_hotpot(path: &Path) -> Result<Vec<HotpotItem>, CorpusFormatError> {
    Ok(read_json(path)?)
}

static DISAMBIGUATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s*\([^)]*\)\s*$").unwrap());

/// Paragraph title without a trailing parenthetical, e.g. `Nirvana (band)`.
fn title_entity(title: &str) -> String {
    DISAMBIGUATION.replace(title.trim(), "").into_owned()
}

/// Entity-relation pairs from the supporting facts of each item: the entity
/// is the paragraph title, the relation the first rule matching the
/// supporting sentence. Pairs are deduplicated; items keep corpus order and
/// pairs within an item are sorted.
pub fn extract_entity_relations(items: &[HotpotItem]) -> Result<Vec<EntityRelation>, CorpusFormatError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for item in items {
        let mut pairs = Vec::new();
        for (title, index) in &item.supporting_facts {
            let Some((_, sentences)) = item.context.iter().find(|(t, _)| t == title) else {
                return Err(CorpusFormatError::UnknownTitle {
                    item: item.id.clone(),
                    title: title.clone(),
                });
            };
            let Some(sentence) = sentences.get(*index) else {
                log::warn!("item {}: {title:?} has no sentence {index}, skipped", item.id);
                continue;
            };
            let entity = title_entity(title);
            if let (false, Some(rel)) = (entity.is_empty(), sentence_relation(sentence)) {
                pairs.push((entity, rel.to_string()));
            }
        }
        pairs.sort();
        for (entity, relation) in pairs {
            if seen.insert((entity.clone(), relation.clone())) {
                out.push(EntityRelation {
                    entity,
                    relation,
                    provenance: item.id.clone(),
                });
            }
        }
    }
    Ok(out)
}

static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[\p{L}\p{N}][\p{L}\p{N}'’.\-]*").unwrap());

const CONNECTORS: &[&str] = &["of", "on", "the", "de", "da", "del", "van", "von", "and", "la", "le"];
const LEADING: &[&str] = &[
    "what", "which", "who", "whom", "whose", "where", "when", "why", "how", "in", "is", "was",
    "did", "does", "do", "are", "the", "a", "an",
];

fn capitalized(w: &str) -> bool {
    w.chars().next().is_some_and(|c| c.is_uppercase() || c.is_ascii_digit())
}

/// Byte span of the longest capitalized word run, allowing lowercase
/// connectors between capitalized words. A leading question word is not
/// part of an entity.
pub fn question_entity_span(question: &str) -> Option<(usize, usize)> {
    let words: Vec<(usize, usize, &str)> = WORD
        .find_iter(question)
        .map(|m| (m.start(), m.end(), m.as_str().trim_end_matches('.')))
        .collect();
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < words.len() {
        let lead = i == 0 && LEADING.contains(&words[i].2.to_lowercase().as_str());
        if lead || !capitalized(words[i].2) {
            i += 1;
            continue;
        }
        let start = i;
        let mut end = i;
        let mut j = i + 1;
        while j < words.len() {
            if capitalized(words[j].2) {
                end = j;
                j += 1;
            } else if CONNECTORS.contains(&words[j].2) && j + 1 < words.len() && capitalized(words[j + 1].2) {
                j += 1;
            } else {
                break;
            }
        }
        let span = (words[start].0, words[end].0 + words[end].2.len());
        if best.is_none_or(|(s, e)| span.1 - span.0 > e - s) {
            best = Some(span);
        }
        i = end + 1;
    }
    best
}

/// Entity and relation chain of a question: relations ordered by distance
/// from the entity, nearest first, one per relation label.
pub fn question_chain(question: &str) -> Option<(String, Vec<String>)> {
    let (es, ee) = question_entity_span(question)?;
    let mut rels: Vec<(usize, usize, &str)> = Vec::new();
    for (s, e, rel) in rule_matches(question) {
        if s < ee && e > es {
            continue;
        }
        let dist = if s >= ee { s - ee } else { es - e };
        rels.push((dist, s, rel));
    }
    rels.sort();
    let mut seen = HashSet::new();
    let chain: Vec<String> = rels
        .into_iter()
        .filter(|r| seen.insert(r.2))
        .map(|r| r.2.to_string())
        .collect();
    if chain.is_empty() {
        return None;
    }
    Some((question[es..ee].to_string(), chain))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, title: &str, sentence: &str) -> HotpotItem {
        HotpotItem {
            id: id.into(),
            question: "q".into(),
            answer: String::new(),
            supporting_facts: vec![(title.into(), 0)],
            context: vec![(title.into(), vec![sentence.into()])],
        }
    }

    #[test]
    fn two_docs_two_pairs_and_dedup() {
        let corpus = vec![
            item("a", "Moscow", "Moscow is the capital of Russia."),
            item("b", "Ed Wood (film)", "Ed Wood was directed by Tim Burton."),
            item("c", "Moscow", "It is the capital city."),
        ];
        let got = extract_entity_relations(&corpus).unwrap();
        let pairs: Vec<_> = got.iter().map(|p| (p.entity.as_str(), p.relation.as_str(), p.provenance.as_str())).collect();
        assert_eq!(pairs, vec![("Moscow", "capital", "a"), ("Ed Wood", "director", "b")]);
        assert!(extract_entity_relations(&[]).unwrap().is_empty());
    }

    #[test]
    fn unknown_title_is_format_error() {
        let mut it = item("a", "Moscow", "capital");
        it.supporting_facts = vec![("Paris".into(), 0)];
        assert!(matches!(
            extract_entity_relations(&[it]),
            Err(CorpusFormatError::UnknownTitle { .. })
        ));
    }

    #[test]
    fn chains() {
        assert_eq!(
            question_chain("What continent was the location of the death of Leonid Kantorovich?"),
            Some(("Leonid Kantorovich".into(), vec!["place of death".into(), "continent".into()]))
        );
        assert_eq!(
            question_chain("Which country was High on Fire created in?"),
            Some(("High on Fire".into(), vec!["country of origin".into()]))
        );
        assert_eq!(
            question_chain("What is the continent of Moscow?"),
            Some(("Moscow".into(), vec!["continent".into()]))
        );
        assert_eq!(question_chain("what is it?"), None);
        assert_eq!(property_for("Capital"), Some("P36"));
    }
}
