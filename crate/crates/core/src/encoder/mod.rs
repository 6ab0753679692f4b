//! Task-semantics encoder.
//!
//! A paragraph is mapped to hashed character n-gram features `x` and then
//! linearly to `E(z) = W x` in a `d`-dimensional space. Similarity is the raw
//! dot product `E(a) · E(b)`; embeddings are never normalized. `W` is trained
//! with a contrastive objective over prompted task examples, see
//! [`contrastive`].

pub mod contrastive;
mod features;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use contrastive::{
    build_contrastive_batch, contrastive_loss, grad_check_encoder, loss_and_grad, relative_error, row_loss,
    train_encoder, train_encoder_from, ContrastiveBatch, ContrastiveRow, EncoderTrainConfig, RenderedText,
    SparseGrad, TrainReport,
};
pub use features::{featurize, FeatureVector, HashSpec};

use crate::util::{expect_magic, read_f32, read_u32, read_u64, write_f32, write_u32, write_u64};

pub const ENCODER_MAGIC: &[u8; 8] = b"PICLENC1";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("template for task {task:?} must contain {{input}} and {{output}} exactly once: {pattern:?}")]
    BadTemplate { task: String, pattern: String },
    #[error("task {0:?} has no prompt template")]
    MissingTemplate(String),
    #[error("need >= 2 tasks, found {0}")]
    TooFewTasks(usize),
    #[error("could not draw an anchor whose task has >= 2 examples after {0} attempts")]
    NoPositiveAvailable(usize),
    #[error("batch is malformed: {0}")]
    BadBatch(String),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("eps must be positive")]
    NonPositiveEps,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed input on line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub task: String,
    pub input: String,
    pub output: String,
}

/// A prompt pattern with one `{input}` and one `{output}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate", into = "RawTemplate")]
pub struct PromptTemplate {
    task: String,
    pattern: String,
    input_at: usize,
    output_at: usize,
}

#[derive(Serialize, Deserialize)]
struct RawTemplate {
    task: String,
    pattern: String,
}

impl TryFrom<RawTemplate> for PromptTemplate {
    type Error = EncoderError;
    fn try_from(r: RawTemplate) -> Result<Self, Self::Error> {
        PromptTemplate::new(r.task, r.pattern)
    }
}

impl From<PromptTemplate> for RawTemplate {
    fn from(t: PromptTemplate) -> Self {
        RawTemplate {
            task: t.task,
            pattern: t.pattern,
        }
    }
}

const INPUT_SLOT: &str = "{input}";
const OUTPUT_SLOT: &str = "{output}";

impl PromptTemplate {
    pub fn new(task: impl Into<String>, pattern: impl Into<String>) -> Result<Self, EncoderError> {
        let task = task.into();
        let pattern = pattern.into();
        let bad = || EncoderError::BadTemplate {
            task: task.clone(),
            pattern: pattern.clone(),
        };
        if pattern.matches(INPUT_SLOT).count() != 1 || pattern.matches(OUTPUT_SLOT).count() != 1 {
            return Err(bad());
        }
        let input_at = pattern.find(INPUT_SLOT).ok_or_else(bad)?;
        let output_at = pattern.find(OUTPUT_SLOT).ok_or_else(bad)?;
        Ok(Self {
            task,
            pattern,
            input_at,
            output_at,
        })
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn render(&self, input: &str, output: &str) -> String {
        let (first, first_len, first_val, second, second_len, second_val) = if self.input_at < self.output_at {
            (self.input_at, INPUT_SLOT.len(), input, self.output_at, OUTPUT_SLOT.len(), output)
        } else {
            (self.output_at, OUTPUT_SLOT.len(), output, self.input_at, INPUT_SLOT.len(), input)
        };
        let p = &self.pattern;
        let mut s = String::with_capacity(p.len() + input.len() + output.len());
        s.push_str(&p[..first]);
        s.push_str(first_val);
        s.push_str(&p[first + first_len..second]);
        s.push_str(second_val);
        s.push_str(&p[second + second_len..]);
        s
    }

    pub fn render_example(&self, example: &TaskExample) -> String {
        self.render(&example.input, &example.output)
    }

    /// The rendering up to the output slot, with trailing whitespace moved
    /// into the returned separator. `prefix + separator + output` is a prefix
    /// of `render(input, output)`.
    pub fn render_until_output(&self, input: &str) -> (String, String) {
        let full = self.render(input, "");
        let cut = if self.input_at < self.output_at {
            self.output_at - INPUT_SLOT.len() + input.len()
        } else {
            self.output_at
        };
        let head = &full[..cut];
        let trimmed = head.trim_end();
        (trimmed.to_string(), head[trimmed.len()..].to_string())
    }
}

pub fn render_prompt(template: &PromptTemplate, example: &TaskExample) -> String {
    template.render_example(example)
}

/// Examples grouped by task plus the templates available to each task.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    examples: Vec<TaskExample>,
    by_task: BTreeMap<String, Vec<usize>>,
    templates: BTreeMap<String, Vec<PromptTemplate>>,
}

impl TaskDataset {
    pub fn new(examples: Vec<TaskExample>, templates: Vec<PromptTemplate>) -> Result<Self, EncoderError> {
        let mut by_task: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in examples.iter().enumerate() {
            if e.task.is_empty() {
                return Err(EncoderError::Config(format!("example {i} has an empty task")));
            }
            by_task.entry(e.task.clone()).or_default().push(i);
        }
        let mut tpl: BTreeMap<String, Vec<PromptTemplate>> = BTreeMap::new();
        for t in templates {
            tpl.entry(t.task.clone()).or_default().push(t);
        }
        if let Some(task) = by_task.keys().find(|t| !tpl.contains_key(*t)) {
            return Err(EncoderError::MissingTemplate(task.clone()));
        }
        Ok(Self {
            examples,
            by_task,
            templates: tpl,
        })
    }

    pub fn examples(&self) -> &[TaskExample] {
        &self.examples
    }

    pub fn n_tasks(&self) -> usize {
        self.by_task.len()
    }

    pub fn task_indices(&self, task: &str) -> &[usize] {
        self.by_task.get(task).map_or(&[], Vec::as_slice)
    }

    pub fn templates_for(&self, task: &str) -> &[PromptTemplate] {
        self.templates.get(task).map_or(&[], Vec::as_slice)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.by_task.keys().map(String::as_str)
    }

    /// Load a JSONL example file and a JSON template list.
    pub fn load(examples: &Path, templates: &Path) -> Result<Self, EncoderError> {
        let text = std::fs::read_to_string(examples)?;
        let mut ex = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            ex.push(serde_json::from_str(line).map_err(|e| EncoderError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        let tpl: Vec<PromptTemplate> =
            serde_json::from_str(&std::fs::read_to_string(templates)?).map_err(|e| EncoderError::Malformed {
                line: e.line(),
                message: e.to_string(),
            })?;
        Self::new(ex, tpl)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub lr: f64,
    pub batch: usize,
    pub n_hard: usize,
    pub seed: u64,
    pub epochs: usize,
}

/// Linear encoder `E(z) = W · featurize(z)` with `W` stored `d × F` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    dim: usize,
    spec: HashSpec,
    weights: Vec<f64>,
    pub train_meta: Option<TrainMeta>,
}

impl EncoderModel {
    pub fn zeros(dim: usize, spec: HashSpec) -> Result<Self, EncoderError> {
        spec.validate().map_err(EncoderError::Config)?;
        if dim == 0 {
            return Err(EncoderError::Config("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            spec,
            weights: vec![0.0; dim * spec.n_features as usize],
            train_meta: None,
        })
    }

    /// Gaussian init with standard deviation `scale / sqrt(d)`, so a unit
    /// feature vector embeds with squared norm about `scale²`.
    pub fn random<R: Rng + ?Sized>(dim: usize, spec: HashSpec, scale: f64, rng: &mut R) -> Result<Self, EncoderError> {
        let mut m = Self::zeros(dim, spec)?;
        let normal = Normal::new(0.0, scale / (dim as f64).sqrt()).map_err(|e| EncoderError::Config(e.to_string()))?;
        for w in &mut m.weights {
            *w = normal.sample(rng);
        }
        Ok(m)
    }

    pub fn from_weights(dim: usize, spec: HashSpec, weights: Vec<f64>) -> Result<Self, EncoderError> {
        spec.validate().map_err(EncoderError::Config)?;
        if weights.len() != dim * spec.n_features as usize {
            return Err(EncoderError::Config(format!(
                "expected {} weights, got {}",
                dim * spec.n_features as usize,
                weights.len()
            )));
        }
        Ok(Self {
            dim,
            spec,
            weights,
            train_meta: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_features(&self) -> usize {
        self.spec.n_features as usize
    }

    pub fn hash_spec(&self) -> &HashSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    #[inline]
    pub fn weight(&self, row: usize, feature: usize) -> f64 {
        self.weights[row * self.n_features() + feature]
    }

    pub fn featurize(&self, text: &str) -> FeatureVector {
        featurize(&self.spec, text)
    }

    pub fn embed_features(&self, x: &FeatureVector) -> Vec<f64> {
        let f = self.n_features();
        (0..self.dim)
            .map(|r| {
                let row = &self.weights[r * f..(r + 1) * f];
                x.iter().map(|(i, v)| row[i as usize] * v).sum()
            })
            .collect()
    }

    pub fn embed_f64(&self, text: &str) -> Vec<f64> {
        self.embed_features(&self.featurize(text))
    }

    pub fn embed(&self, text: &str) -> Vec<f32> {
        self.embed_f64(text).into_iter().map(|v| v as f32).collect()
    }

    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        let (ea, eb) = (self.embed_f64(a), self.embed_f64(b));
        ea.iter().zip(&eb).map(|(x, y)| x * y).sum()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(ENCODER_MAGIC)?;
        write_u32(w, self.dim as u32)?;
        write_u32(w, self.spec.n_features)?;
        write_u32(w, self.spec.ngram_min)?;
        write_u32(w, self.spec.ngram_max)?;
        write_u64(w, self.spec.seed)?;
        for &v in &self.weights {
            write_f32(w, v as f32)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, EncoderError> {
        expect_magic(r, ENCODER_MAGIC)?;
        let dim = read_u32(r)? as usize;
        let n_features = read_u32(r)?;
        let ngram_min = read_u32(r)?;
        let ngram_max = read_u32(r)?;
        let seed = read_u64(r)?;
        let spec = HashSpec {
            ngram_min,
            ngram_max,
            seed,
            n_features,
        };
        let n = dim * n_features as usize;
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(f64::from(read_f32(r)?));
        }
        Self::from_weights(dim, spec, weights)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> HashSpec {
        HashSpec {
            n_features: 64,
            ..Default::default()
        }
    }

    #[test]
    fn sst2_style_prompt_renders() {
        let t = PromptTemplate::new("sst2", "Sentence: {input} Label: {output}").unwrap();
        let ex = TaskExample {
            task: "sst2".into(),
            input: "good movie".into(),
            output: "Positive".into(),
        };
        assert_eq!(render_prompt(&t, &ex), "Sentence: good movie Label: Positive");
    }

    #[test]
    fn bare_concatenation_template() {
        let t = PromptTemplate::new("t", "{input}{output}").unwrap();
        assert_eq!(t.render("a", "b"), "ab");
    }

    #[test]
    fn template_without_output_is_rejected() {
        assert!(matches!(
            PromptTemplate::new("t", "Sentence: {input}"),
            Err(EncoderError::BadTemplate { .. })
        ));
        assert!(PromptTemplate::new("t", "{input} {input} {output}").is_err());
        let parsed: Result<Vec<PromptTemplate>, _> = serde_json::from_str(r#"[{"task":"t","pattern":"{input}"}]"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn placeholder_text_inside_values_is_not_substituted() {
        let t = PromptTemplate::new("t", "{input} => {output}").unwrap();
        assert_eq!(t.render("{output}", "x"), "{output} => x");
    }

    #[test]
    fn render_until_output_splits_separator() {
        let t = PromptTemplate::new("t", "Sentence: {input} Label: {output}").unwrap();
        let (head, sep) = t.render_until_output("q");
        assert_eq!(head, "Sentence: q Label:");
        assert_eq!(sep, " ");
        let t = PromptTemplate::new("t", "{output} <- {input}").unwrap();
        assert_eq!(t.render_until_output("q"), (String::new(), String::new()));
    }

    #[test]
    fn zero_weights_embed_to_zero() {
        let m = EncoderModel::zeros(4, small_spec()).unwrap();
        assert!(m.embed("anything at all").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_feature_selects_a_column() {
        let spec = HashSpec {
            ngram_min: 3,
            ngram_max: 3,
            ..small_spec()
        };
        let f = spec.n_features as usize;
        let weights: Vec<f64> = (0..3 * f).map(|i| i as f64).collect();
        let m = EncoderModel::from_weights(3, spec, weights).unwrap();
        let x = m.featurize("abc");
        let col = x.indices[0] as usize;
        let e = m.embed_f64("abc");
        assert_eq!(e, vec![col as f64, (f + col) as f64, (2 * f + col) as f64]);
    }

    #[test]
    fn embedding_is_deterministic_and_similarity_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = EncoderModel::random(8, small_spec(), 1.0, &mut rng).unwrap();
        assert_eq!(m.embed("some text"), m.embed("some text"));
        assert_eq!(m.similarity("a b c", "x y z"), m.similarity("x y z", "a b c"));
    }

    #[test]
    fn model_file_round_trips_through_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = EncoderModel::random(5, small_spec(), 1.0, &mut rng).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], ENCODER_MAGIC);
        assert_eq!(buf.len(), 8 + 4 * 4 + 8 + 5 * 64 * 4);
        let back = EncoderModel::read_from(&mut buf.as_slice()).unwrap();
        for (a, b) in m.weights().iter().zip(back.weights()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn dataset_requires_templates_for_every_task() {
        let ex = vec![TaskExample {
            task: "a".into(),
            input: "x".into(),
            output: "y".into(),
        }];
        assert!(matches!(TaskDataset::new(ex, vec![]), Err(EncoderError::MissingTemplate(_))));
    }
}
