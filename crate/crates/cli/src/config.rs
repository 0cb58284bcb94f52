//! Pipeline configuration: one TOML document, overridable by flags.
//!
//! Relative paths are taken relative to the directory holding the config
//! file. `resolve` makes them absolute and checks that every configured
//! input exists, so a bad config fails before any command writes anything.

use std::path::{Path, PathBuf};

use cotedit_core::augment::WIKIDATA_SPARQL;
use cotedit_core::cotgen::{GenerationParams, TemplateKind};
use cotedit_core::editor::EditOptions;
use cotedit_core::evaluation::DatasetKind;
use cotedit_core::training::{EvolutionState, GrpoParams, RewardConfig, TrainerHints};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CONFIG_FILE: &str = "cotedit.toml";
pub const MAX_FEWSHOT: usize = 8;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{field}: {path} does not exist")]
    MissingPath { field: String, path: PathBuf },
    #[error("{field}: {message}")]
    OutOfRange { field: String, message: String },
    #[error("{field} must be set for this command")]
    Required { field: String },
    #[error("invalid --backend {0:?}; expected scripted[:SCRIPT] or openai[:MODEL]")]
    BackendFlag(String),
}

fn out_of_range(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::OutOfRange {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Scripted,
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Response script for the scripted backend.
    pub script: Option<PathBuf>,
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Openai,
            script: None,
            model: "gpt-4o".into(),
            timeout_secs: 120,
        }
    }
}

impl BackendConfig {
    /// Applies `scripted`, `scripted:PATH`, `openai` or `openai:MODEL`.
    pub fn apply_flag(&mut self, flag: &str) -> Result<(), ConfigError> {
        let (kind, arg) = match flag.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (flag, None),
        };
        match (kind, arg) {
            ("scripted", arg) => {
                self.kind = BackendKind::Scripted;
                if let Some(a) = arg.filter(|a| !a.is_empty()) {
                    self.script = Some(a.into());
                }
            }
            ("openai", arg) => {
                self.kind = BackendKind::Openai;
                if let Some(a) = arg.filter(|a| !a.is_empty()) {
                    self.model = a.into();
                }
            }
            _ => return Err(ConfigError::BackendFlag(flag.into())),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    /// Hashed bag of words, no network.
    Hash,
    /// OpenAI-compatible `/embeddings` endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dimension: usize,
    pub model: String,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hash,
            dimension: 256,
            model: "contriever".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KbKind {
    Fixture,
    Sparql,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KbConfig {
    pub kind: KbKind,
    /// JSON array of `{entity, relation, answer}` for the fixture kb.
    pub fixture: Option<PathBuf>,
    pub endpoint: String,
    pub min_interval_ms: u64,
}

impl Default for KbConfig {
    fn default() -> Self {
        Self {
            kind: KbKind::Sparql,
            fixture: None,
            endpoint: WIKIDATA_SPARQL.into(),
            min_interval_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// MQuAKE-CF cases used for structured training data.
    pub mquake: Option<PathBuf>,
    pub mquake_slice: Option<[usize; 2]>,
    /// MQuAKE-uns cases used for unstructured training data.
    pub mquake_uns: Option<PathBuf>,
    pub mquake_uns_slice: Option<[usize; 2]>,
    /// HotpotQA items mined for entity-relation pairs.
    pub hotpot: Option<PathBuf>,
    pub hotpot_slice: Option<[usize; 2]>,
    /// JSON array of memory payloads for `edit` and `serve`.
    pub edits: Option<PathBuf>,
    pub kb: KbConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mquake: None,
            mquake_slice: Some([0, 2000]),
            mquake_uns: None,
            mquake_uns_slice: Some([0, 900]),
            hotpot: None,
            hotpot_slice: None,
            edits: None,
            kb: KbConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthesisMode {
    Structured,
    Unstructured,
}

impl SynthesisMode {
    pub fn template_kind(self) -> TemplateKind {
        match self {
            Self::Structured => TemplateKind::SynthesizeStructured,
            Self::Unstructured => TemplateKind::SynthesizeUnstructured,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub fewshot: usize,
    pub temperature: f64,
    pub retry_temperature: f64,
    pub max_tokens: u32,
    pub synthesis: SynthesisMode,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let p = GenerationParams::default();
        Self {
            fewshot: 3,
            temperature: p.temperature,
            retry_temperature: p.retry_temperature,
            max_tokens: p.max_tokens,
            synthesis: SynthesisMode::Structured,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub threshold: f64,
    pub group_size: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub std_floor: f64,
    pub accuracy_weight: f64,
    pub tag_weight: f64,
    pub keyword_weight: f64,
    pub partial_credit: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let g = GrpoParams::default();
        Self {
            threshold: EvolutionState::DEFAULT_THRESHOLD,
            group_size: g.group_size,
            temperature: g.temperature,
            max_tokens: g.max_tokens,
            std_floor: g.std_floor,
            accuracy_weight: g.reward.accuracy_weight,
            tag_weight: g.reward.tag_weight,
            keyword_weight: g.reward.keyword_weight,
            partial_credit: g.reward.partial_credit,
        }
    }
}

impl TrainingConfig {
    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            accuracy_weight: self.accuracy_weight,
            tag_weight: self.tag_weight,
            keyword_weight: self.keyword_weight,
            partial_credit: self.partial_credit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub min_score: Option<f64>,
    pub fallback: bool,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Persisted memory directory; defaults to `<out_dir>/memory`.
    pub memory: Option<PathBuf>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let e = EditOptions::default();
        Self {
            k: e.k,
            min_score: e.min_score,
            fallback: e.fallback,
            temperature: e.temperature,
            max_tokens: e.max_tokens,
            memory: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub kind: DatasetKind,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub datasets: Vec<DatasetConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Upper bound on concurrent model and knowledge-base calls.
    pub parallelism: usize,
    pub out_dir: PathBuf,
    /// Response cache; defaults to `<out_dir>/cache` for live backends.
    pub cache_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            parallelism: 4,
            out_dir: "out".into(),
            cache_dir: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunConfig,
    /// Data-generation agent.
    pub agent: BackendConfig,
    /// Model being trained and edited.
    pub policy: BackendConfig,
    pub embedder: EmbedderConfig,
    pub data: DataConfig,
    pub generation: GenerationConfig,
    pub training: TrainingConfig,
    pub retrieval: RetrievalConfig,
    pub eval: EvalConfig,
    /// Passed through to the external trainer.
    pub trainer: TrainerHints,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub backend: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub slice_start: Option<usize>,
    pub slice_end: Option<usize>,
    pub threshold: Option<f64>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
}

fn override_slice(slice: &mut Option<[usize; 2]>, start: Option<usize>, end: Option<usize>) {
    if start.is_none() && end.is_none() {
        return;
    }
    let [s, e] = slice.unwrap_or([0, i64::MAX as usize]);
    *slice = Some([start.unwrap_or(s), end.unwrap_or(e)]);
}

fn absolute(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn must_exist(field: &str, p: &Option<PathBuf>) -> Result<(), ConfigError> {
    match p {
        Some(p) if !p.exists() => Err(ConfigError::MissingPath {
            field: field.into(),
            path: p.clone(),
        }),
        _ => Ok(()),
    }
}

fn check_slice(field: &str, slice: Option<[usize; 2]>) -> Result<(), ConfigError> {
    match slice {
        Some([s, e]) if s > e => Err(out_of_range(field, format!("start {s} is after end {e}"))),
        _ => Ok(()),
    }
}

fn check_unit(field: &str, v: f64, max: f64) -> Result<(), ConfigError> {
    if v.is_finite() && (0.0..=max).contains(&v) {
        Ok(())
    } else {
        Err(out_of_range(field, format!("{v} outside [0, {max}]")))
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads `path`, or returns the defaults when `path` is `None` and no
    /// `cotedit.toml` exists in the working directory. Also returns the
    /// directory relative paths are resolved against.
    pub fn load(path: Option<&Path>) -> Result<(Self, PathBuf), ConfigError> {
        let cwd = std::env::current_dir().map_err(|source| ConfigError::Read {
            path: ".".into(),
            source,
        })?;
        let path = match path {
            Some(p) => cwd.join(p),
            None => {
                let p = cwd.join(DEFAULT_CONFIG_FILE);
                if !p.exists() {
                    return Ok((Self::default(), cwd));
                }
                p
            }
        };
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read {
            path: path.clone(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or(cwd);
        Ok((Self::from_toml(&text, &path)?, base))
    }

    /// Applies flags. Slice flags apply to every input slice.
    pub fn apply(&mut self, o: &Overrides, backend_targets_agent: bool) -> Result<(), ConfigError> {
        if let Some(b) = &o.backend {
            if backend_targets_agent {
                self.agent.apply_flag(b)?;
            } else {
                self.policy.apply_flag(b)?;
            }
        }
        if let Some(d) = &o.cache_dir {
            self.run.cache_dir = Some(d.clone());
        }
        if let Some(d) = &o.out {
            self.run.out_dir = d.clone();
        }
        for s in [
            &mut self.data.mquake_slice,
            &mut self.data.mquake_uns_slice,
            &mut self.data.hotpot_slice,
        ] {
            override_slice(s, o.slice_start, o.slice_end);
        }
        for d in &mut self.eval.datasets {
            override_slice(&mut d.slice, o.slice_start, o.slice_end);
        }
        if let Some(t) = o.threshold {
            self.training.threshold = t;
        }
        if let Some(k) = o.k {
            self.retrieval.k = k;
        }
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        Ok(())
    }

    /// Makes paths absolute against `base` and checks inputs and ranges.
    pub fn resolve(mut self, base: &Path) -> Result<Self, ConfigError> {
        absolute(base, &mut self.run.out_dir);
        for p in [
            &mut self.run.cache_dir,
            &mut self.agent.script,
            &mut self.policy.script,
            &mut self.data.mquake,
            &mut self.data.mquake_uns,
            &mut self.data.hotpot,
            &mut self.data.edits,
            &mut self.data.kb.fixture,
            &mut self.retrieval.memory,
        ]
        .into_iter()
        .flatten()
        {
            absolute(base, p);
        }
        for d in &mut self.eval.datasets {
            absolute(base, &mut d.path);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        must_exist("agent.script", &self.agent.script)?;
        must_exist("policy.script", &self.policy.script)?;
        must_exist("data.mquake", &self.data.mquake)?;
        must_exist("data.mquake_uns", &self.data.mquake_uns)?;
        must_exist("data.hotpot", &self.data.hotpot)?;
        must_exist("data.edits", &self.data.edits)?;
        must_exist("data.kb.fixture", &self.data.kb.fixture)?;
        for (i, d) in self.eval.datasets.iter().enumerate() {
            must_exist(&format!("eval.datasets[{i}].path"), &Some(d.path.clone()))?;
            check_slice(&format!("eval.datasets[{i}].slice"), d.slice)?;
            if d.name.trim().is_empty() {
                return Err(out_of_range(&format!("eval.datasets[{i}].name"), "empty name"));
            }
        }
        check_slice("data.mquake_slice", self.data.mquake_slice)?;
        check_slice("data.mquake_uns_slice", self.data.mquake_uns_slice)?;
        check_slice("data.hotpot_slice", self.data.hotpot_slice)?;

        if self.run.parallelism == 0 {
            return Err(out_of_range("run.parallelism", "must be at least 1"));
        }
        if self.embedder.dimension == 0 {
            return Err(out_of_range("embedder.dimension", "must be at least 1"));
        }
        if !(1..=MAX_FEWSHOT).contains(&self.generation.fewshot) {
            return Err(out_of_range(
                "generation.fewshot",
                format!("{} outside [1, {MAX_FEWSHOT}]", self.generation.fewshot),
            ));
        }
        check_unit("generation.temperature", self.generation.temperature, 2.0)?;
        check_unit("generation.retry_temperature", self.generation.retry_temperature, 2.0)?;
        check_unit("training.temperature", self.training.temperature, 2.0)?;
        check_unit("retrieval.temperature", self.retrieval.temperature, 2.0)?;
        for (field, w) in [
            ("training.accuracy_weight", self.training.accuracy_weight),
            ("training.tag_weight", self.training.tag_weight),
            ("training.keyword_weight", self.training.keyword_weight),
        ] {
            check_unit(field, w, f64::MAX)?;
        }
        let max = self.training.reward().max_total();
        check_unit("training.threshold", self.training.threshold, max)?;
        if self.training.group_size < 2 {
            return Err(out_of_range("training.group_size", "must be at least 2"));
        }
        if !(self.training.std_floor > 0.0 && self.training.std_floor.is_finite()) {
            return Err(out_of_range("training.std_floor", "must be positive"));
        }
        if self.retrieval.k == 0 {
            return Err(out_of_range("retrieval.k", "must be at least 1"));
        }
        if let Some(m) = self.retrieval.min_score {
            if !m.is_finite() {
                return Err(out_of_range("retrieval.min_score", "must be finite"));
            }
        }
        Ok(())
    }

    pub fn generation_params(&self) -> GenerationParams {
        GenerationParams {
            temperature: self.generation.temperature,
            retry_temperature: self.generation.retry_temperature,
            max_tokens: self.generation.max_tokens,
            seed: Some(self.run.seed),
        }
    }

    /// GRPO parameters for `round`; each round draws from fresh seeds.
    pub fn grpo_params(&self, round: u32) -> GrpoParams {
        GrpoParams {
            group_size: self.training.group_size,
            temperature: self.training.temperature,
            max_tokens: self.training.max_tokens,
            seed: self.run.seed + u64::from(round) * self.training.group_size as u64,
            std_floor: self.training.std_floor,
            reward: self.training.reward(),
        }
    }

    pub fn edit_options(&self) -> EditOptions {
        EditOptions {
            k: self.retrieval.k,
            min_score: self.retrieval.min_score,
            fallback: self.retrieval.fallback,
            temperature: self.retrieval.temperature,
            max_tokens: self.retrieval.max_tokens,
            seed: Some(self.run.seed),
        }
    }

    pub fn memory_dir(&self) -> PathBuf {
        self.retrieval
            .memory
            .clone()
            .unwrap_or_else(|| self.run.out_dir.join("memory"))
    }
}

pub fn slice_tuple(s: Option<[usize; 2]>) -> Option<(usize, usize)> {
    s.map(|[a, b]| (a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&c.to_toml(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_tables_fill_defaults() {
        let c = PipelineConfig::from_toml("[training]\nthreshold = 1.0\n[trainer]\nsft_epochs = 2\n", Path::new("x")).unwrap();
        assert_eq!(c.training.threshold, 1.0);
        assert_eq!(c.training.group_size, 4);
        assert_eq!(c.trainer.sft_epochs, 2);
        assert_eq!(c.trainer.grpo_learning_rate, 3e-6);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = PipelineConfig::from_toml("[retrieval]\nkk = 2\n", Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("kk"), "{err}");
    }

    #[test]
    fn backend_flag() {
        let mut b = BackendConfig::default();
        b.apply_flag("scripted:s.json").unwrap();
        assert_eq!(b.kind, BackendKind::Scripted);
        assert_eq!(b.script.as_deref(), Some(Path::new("s.json")));
        b.apply_flag("openai:qwen").unwrap();
        assert_eq!((b.kind, b.model.as_str()), (BackendKind::Openai, "qwen"));
        assert!(b.apply_flag("llama").is_err());
    }

    #[test]
    fn ranges_checked() {
        let mut c = PipelineConfig::default();
        c.training.threshold = 2.5;
        assert!(matches!(c.validate(), Err(ConfigError::OutOfRange { .. })));
        let mut c = PipelineConfig::default();
        c.data.edits = Some("/no/such/edits.json".into());
        assert!(matches!(c.validate(), Err(ConfigError::MissingPath { .. })));
    }

    #[test]
    fn slice_flags_apply_everywhere() {
        let mut c = PipelineConfig::default();
        c.apply(
            &Overrides {
                slice_end: Some(10),
                ..Default::default()
            },
            true,
        )
        .unwrap();
        assert_eq!(c.data.mquake_uns_slice, Some([0, 10]));
        assert_eq!(c.data.hotpot_slice, Some([0, 10]));
    }
}
