//! Composite reward: answer accuracy plus output format.

use serde::{Deserialize, Serialize};

use crate::domain::{first_think_body, locate_blocks, normalize_answer, parse_trace};

/// Component magnitudes. With the defaults the total lies in `[0, 2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub accuracy_weight: f64,
    /// Paid when exactly one think block precedes exactly one answer block.
    pub tag_weight: f64,
    /// Paid when the think block mentions "step" or "knowledge".
    pub keyword_weight: f64,
    /// Score accuracy by token F1 instead of exact match.
    pub partial_credit: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            accuracy_weight: 1.0,
            tag_weight: 0.5,
            keyword_weight: 0.5,
            partial_credit: false,
        }
    }
}

impl RewardConfig {
    pub fn max_total(&self) -> f64 {
        self.accuracy_weight + self.tag_weight + self.keyword_weight
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub accuracy: f64,
    pub format: f64,
    pub tags: f64,
    pub keywords: f64,
    pub total: f64,
}

fn token_f1(pred: &str, gold: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut remaining = g.clone();
    let mut common = 0usize;
    for t in &p {
        if let Some(i) = remaining.iter().position(|x| x == t) {
            remaining.swap_remove(i);
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Accuracy component: the completion must parse as a trace and its answer
/// must match `gold` under normalization. A blank gold scores 0.
pub fn accuracy_reward(completion: &str, gold: &str, config: &RewardConfig) -> f64 {
    if gold.trim().is_empty() {
        return 0.0;
    }
    let Ok(trace) = parse_trace(completion) else {
        return 0.0;
    };
    let (pred, gold) = (normalize_answer(&trace.answer), normalize_answer(gold));
    if config.partial_credit {
        config.accuracy_weight * token_f1(&pred, &gold)
    } else if pred == gold {
        config.accuracy_weight
    } else {
        0.0
    }
}

/// Format component as `(tags, keywords)`.
pub fn format_components(completion: &str, config: &RewardConfig) -> (f64, f64) {
    let tags = if locate_blocks(completion).is_ok() {
        config.tag_weight
    } else {
        0.0
    };
    let keywords = match first_think_body(completion) {
        Some(body) => {
            let lower = body.to_lowercase();
            if lower.contains("step") || lower.contains("knowledge") {
                config.keyword_weight
            } else {
                0.0
            }
        }
        None => 0.0,
    };
    (tags, keywords)
}

pub fn format_reward(completion: &str, config: &RewardConfig) -> f64 {
    let (t, k) = format_components(completion, config);
    t + k
}

pub fn total_reward(completion: &str, gold: &str, config: &RewardConfig) -> RewardBreakdown {
    let accuracy = accuracy_reward(completion, gold, config);
    let (tags, keywords) = format_components(completion, config);
    let format = tags + keywords;
    RewardBreakdown {
        accuracy,
        format,
        tags,
        keywords,
        total: accuracy + format,
    }
}
