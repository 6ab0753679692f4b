//! Pipeline configuration: one TOML file plus dotted-key overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use picl_core::corpus::InputFormat;
use picl_core::encoder::{EncoderTrainConfig, HashSpec};
use picl_core::lm::{MixConfig, NeuralLmConfig};
use picl_core::retrieval::Strategy;
use picl_core::util::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub input: PathBuf,
    pub format: InputFormat,
    pub lowercase: bool,
    /// 0 keeps every piece that meets `min_count`.
    pub max_vocab: usize,
    pub min_count: u64,
    pub min_merge: usize,
    pub max_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            input: PathBuf::from("docs.jsonl"),
            format: InputFormat::Jsonl,
            lowercase: true,
            max_vocab: 0,
            min_count: 1,
            min_merge: picl_core::corpus::DEFAULT_MIN_MERGE,
            max_len: picl_core::corpus::DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub examples: PathBuf,
    pub templates: PathBuf,
    pub dim: usize,
    pub n_features: u32,
    pub ngram_min: u32,
    pub ngram_max: u32,
    pub hash_seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub n_hard: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let t = EncoderTrainConfig::default();
        Self {
            examples: PathBuf::from("encoder_examples.jsonl"),
            templates: PathBuf::from("encoder_templates.json"),
            dim: t.dim,
            n_features: t.hash.n_features,
            ngram_min: t.hash.ngram_min,
            ngram_max: t.hash.ngram_max,
            hash_seed: t.hash.seed,
            lr: t.lr,
            batch: t.batch,
            n_hard: t.n_hard,
            epochs: t.epochs,
            seed: t.seed,
            init_scale: t.init_scale,
        }
    }
}

impl EncoderSection {
    pub fn train_config(&self) -> EncoderTrainConfig {
        EncoderTrainConfig {
            dim: self.dim,
            hash: HashSpec {
                ngram_min: self.ngram_min,
                ngram_max: self.ngram_max,
                seed: self.hash_seed,
                n_features: self.n_features,
            },
            lr: self.lr,
            batch: self.batch,
            n_hard: self.n_hard,
            epochs: self.epochs,
            seed: self.seed,
            init_scale: self.init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    /// IVF list count; 0 means `⌈√n⌉`.
    pub n_lists: usize,
    /// Lists probed per query; 0 means `⌈n_lists / 10⌉`.
    pub n_probe: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
    pub bm25_k1: f64,
    pub bm25_b: f64,
}

impl Default for IndexSection {
    fn default() -> Self {
        Self {
            n_lists: 0,
            n_probe: 0,
            kmeans_iters: 20,
            seed: 0,
            bm25_k1: 1.2,
            bm25_b: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub strategy: Strategy,
    pub k: usize,
    pub seed: u64,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::DenseExact,
            k: picl_core::retrieval::DEFAULT_K,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Interpolated n-gram trained on the corpus documents.
    Ngram,
    /// Unigram model that ignores paragraph joins; every score is 0.
    Unigram,
    /// Child process speaking the line-delimited JSON protocol.
    External,
    /// No scoring; only `delta = -inf` is allowed.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSection {
    pub kind: ScorerKind,
    pub order: usize,
    /// Interpolation weights, lowest order first.
    pub lambdas: Vec<f64>,
    pub command: String,
    pub timeout_secs: f64,
    pub max_restarts: usize,
}

impl Default for ScorerSection {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Ngram,
            order: 3,
            lambdas: vec![0.1, 0.3, 0.6],
            command: String::new(),
            timeout_secs: 60.0,
            max_restarts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructorSection {
    pub budget: usize,
    pub delta: f64,
    pub scorer: ScorerSection,
}

impl Default for ConstructorSection {
    fn default() -> Self {
        Self {
            budget: picl_core::constructor::DEFAULT_BUDGET,
            delta: 0.0,
            scorer: ScorerSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub alpha: f64,
    pub steps: usize,
    pub batch: usize,
    pub window: usize,
    pub lr: f64,
    pub momentum: f64,
    /// 0 disables clipping.
    pub clip: f64,
    pub seed: u64,
    pub context: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let m = MixConfig::default();
        Self {
            alpha: m.alpha,
            steps: m.steps,
            batch: m.batch,
            window: m.window,
            lr: m.lr,
            momentum: m.momentum,
            clip: m.clip.unwrap_or(0.0),
            seed: m.seed,
            context: 8,
            embed: 16,
            hidden: 64,
        }
    }
}

impl PretrainSection {
    pub fn mix_config(&self) -> MixConfig {
        MixConfig {
            alpha: self.alpha,
            steps: self.steps,
            batch: self.batch,
            window: self.window,
            lr: self.lr,
            momentum: self.momentum,
            clip: (self.clip > 0.0).then_some(self.clip),
            seed: self.seed,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> NeuralLmConfig {
        NeuralLmConfig {
            vocab_size,
            context: self.context,
            embed: self.embed,
            hidden: self.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tasks: Vec<PathBuf>,
    pub n_shots: usize,
    pub seeds: Vec<u64>,
    pub max_eval_examples: usize,
    pub max_new_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            n_shots: 4,
            seeds: picl_core::eval::DEFAULT_SEEDS.to_vec(),
            max_eval_examples: picl_core::eval::DEFAULT_MAX_EVAL,
            max_new_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusSection,
    pub encoder: EncoderSection,
    pub index: IndexSection,
    pub retrieval: RetrievalSection,
    pub constructor: ConstructorSection,
    pub pretrain: PretrainSection,
    pub eval: EvalSection,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Every dotted leaf key of a table.
fn leaf_keys(table: &toml::Table, prefix: &str, out: &mut BTreeSet<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => leaf_keys(t, &key, out),
            _ => {
                out.insert(key);
            }
        }
    }
}

/// Parse an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl PipelineConfig {
    /// All keys accepted by `--set`.
    pub fn valid_keys() -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        leaf_keys(&toml::Table::try_from(PipelineConfig::default()).expect("default serializes"), "", &mut out);
        out
    }

    /// Parse TOML text and apply `key=value` overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| config_err(format!("invalid TOML: {e}")))?;
        let valid = Self::valid_keys();
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            if !valid.contains(key) {
                let list: Vec<&str> = valid.iter().map(String::as_str).collect();
                return Err(config_err(format!(
                    "unknown override key {key:?}; valid keys: {}",
                    list.join(", ")
                )));
            }
            let mut node = &mut table;
            let parts: Vec<&str> = key.split('.').collect();
            for p in &parts[..parts.len() - 1] {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| config_err(format!("{p:?} is not a table")))?;
            }
            node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
        }
        let cfg: PipelineConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| config_err(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file; relative paths resolve against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus.input);
        fix(&mut self.encoder.examples);
        fix(&mut self.encoder.templates);
        self.eval.tasks.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let c = &self.constructor;
        if self.retrieval.k == 0 {
            return Err(config_err("retrieval.k must be positive"));
        }
        if c.budget == 0 {
            return Err(config_err("constructor.budget must be positive"));
        }
        if c.delta.is_nan() {
            return Err(config_err("constructor.delta must be a number or -inf"));
        }
        if c.scorer.kind == ScorerKind::None && c.delta != f64::NEG_INFINITY {
            return Err(config_err("constructor.scorer.kind = \"none\" requires constructor.delta = -inf"));
        }
        if c.scorer.kind == ScorerKind::Ngram {
            if c.scorer.order == 0 || c.scorer.lambdas.len() != c.scorer.order {
                return Err(config_err("constructor.scorer.lambdas needs one weight per n-gram order"));
            }
            let s: f64 = c.scorer.lambdas.iter().sum();
            if (s - 1.0).abs() > 1e-9 || c.scorer.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
                return Err(config_err("constructor.scorer.lambdas must lie in [0, 1] and sum to 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.pretrain.alpha) {
            return Err(config_err("pretrain.alpha must lie in [0, 1]"));
        }
        let p = &self.pretrain;
        if p.context == 0 || p.embed == 0 || p.hidden == 0 || p.batch == 0 || p.window == 0 {
            return Err(config_err("pretrain sizes must be positive"));
        }
        if self.eval.seeds.is_empty() {
            return Err(config_err("eval.seeds must not be empty"));
        }
        let e = &self.encoder;
        if e.dim == 0 || e.batch == 0 || e.n_features == 0 || e.ngram_min == 0 || e.ngram_min > e.ngram_max {
            return Err(config_err("encoder sizes must be positive with ngram_min <= ngram_max"));
        }
        if self.corpus.min_merge == 0 || self.corpus.max_len == 0 {
            return Err(config_err("corpus.min_merge and corpus.max_len must be positive"));
        }
        Ok(())
    }

    /// Check that every input file exists.
    pub fn check_paths(&self) -> Result<(), CliError> {
        let mut paths = vec![&self.corpus.input];
        if self.retrieval.strategy.is_dense() {
            paths.push(&self.encoder.examples);
            paths.push(&self.encoder.templates);
        }
        paths.extend(&self.eval.tasks);
        match paths.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(config_err(format!("path does not exist: {}", p.display()))),
            None => Ok(()),
        }
    }

    /// Canonical TOML of the resolved config. Field order is fixed by the
    /// struct, so reordering keys in the file does not change it.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_constants() {
        let c = PipelineConfig::default();
        assert_eq!(c.retrieval.k, 20);
        assert_eq!(c.constructor.budget, 1024);
        assert_eq!(c.constructor.delta, 0.0);
        assert_eq!(c.pretrain.alpha, 0.5);
    }

    #[test]
    fn key_order_does_not_change_hash() {
        let a = PipelineConfig::from_toml("[retrieval]\nk = 5\nseed = 2\n[pretrain]\nalpha = 0.25\n", &[]).unwrap();
        let b = PipelineConfig::from_toml("[pretrain]\nalpha = 0.25\n[retrieval]\nseed = 2\nk = 5\n", &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = PipelineConfig::from_toml("[retrieval]\nk = 6\nseed = 2\n[pretrain]\nalpha = 0.25\n", &[]).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn overrides_apply_and_unknown_keys_list_valid_ones() {
        let c = PipelineConfig::from_toml(
            "",
            &["pretrain.alpha=0.75".into(), "retrieval.strategy=bm25".into(), "constructor.delta=1".into()],
        )
        .unwrap();
        assert_eq!(c.pretrain.alpha, 0.75);
        assert_eq!(c.constructor.delta, 1.0);
        assert_eq!(c.retrieval.strategy, Strategy::Bm25);
        let err = PipelineConfig::from_toml("", &["pretrain.alfa=1".into()]).unwrap_err().to_string();
        assert!(err.contains("pretrain.alpha") && err.contains("retrieval.k"), "{err}");
    }

    #[test]
    fn negative_infinity_delta_round_trips() {
        let c = PipelineConfig::from_toml("", &["constructor.delta=-inf".into()]).unwrap();
        assert_eq!(c.constructor.delta, f64::NEG_INFINITY);
        let again = PipelineConfig::from_toml(&c.canonical(), &[]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_section_field_is_a_config_error() {
        assert!(matches!(
            PipelineConfig::from_toml("[retrieval]\nkk = 3\n", &[]),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn scorer_none_requires_no_filtering() {
        assert!(PipelineConfig::from_toml("[constructor.scorer]\nkind = \"none\"\n", &[]).is_err());
        assert!(PipelineConfig::from_toml(
            "[constructor]\ndelta = -inf\n[constructor.scorer]\nkind = \"none\"\n",
            &[]
        )
        .is_ok());
    }
}
