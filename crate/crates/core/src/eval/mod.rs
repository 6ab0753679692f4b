//! Few-shot evaluation: ranking classification, generation with ROUGE-L,
//! and perplexity comparison of instance sets.
//!
//! A prompt is the rendered demonstrations joined by `"\n"`, then the query
//! rendered up to its output slot. Classification scores each label as a
//! continuation of that prompt and picks the lowest per-token perplexity.

mod compare;
mod rouge;

use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use compare::{compare_datasets, DatasetComparison, SetPerplexity};
pub use rouge::{lcs_len, rouge_l, rouge_tokens};

use crate::encoder::{EncoderError, PromptTemplate};
use crate::lm::{greedy_decode, LmError, LmScorer, NeuralScorer};
use crate::util::{fnv1a, rng_for};

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const DEFAULT_MAX_EVAL: usize = 1000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("demonstration {0} is the query itself")]
    QueryInDemos(usize),
    #[error("task {task:?} needs {needed} demonstrations but its train pool has {available}")]
    PoolTooSmall { task: String, needed: usize, available: usize },
    #[error("task {task:?} is invalid: {message}")]
    InvalidTask { task: String, message: String },
    #[error("set {0:?} is empty")]
    EmptySet(String),
    #[error("no seeds given")]
    NoSeeds,
    #[error("label continuation {0:?} has no tokens")]
    EmptyLabel(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Template(#[from] EncoderError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed task file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub name: String,
    pub kind: TaskKind,
    pub template: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    pub train: Vec<EvalExample>,
    pub eval: Vec<EvalExample>,
}

impl EvalTask {
    pub fn prompt_template(&self) -> Result<PromptTemplate, EvalError> {
        Ok(PromptTemplate::new(self.name.clone(), self.template.clone())?)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        self.prompt_template()?;
        let bad = |message: String| EvalError::InvalidTask {
            task: self.name.clone(),
            message,
        };
        if self.kind == TaskKind::Classification {
            if self.labels.len() < 2 {
                return Err(bad("classification needs at least 2 labels".into()));
            }
            if let Some(e) = self.train.iter().chain(&self.eval).find(|e| !self.labels.contains(&e.output)) {
                return Err(bad(format!("output {:?} is not a label", e.output)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let t: EvalTask = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotConfig {
    pub n_shots: usize,
    pub seeds: Vec<u64>,
    pub max_eval_examples: usize,
}

impl Default for ShotConfig {
    fn default() -> Self {
        Self {
            n_shots: 4,
            seeds: DEFAULT_SEEDS.to_vec(),
            max_eval_examples: DEFAULT_MAX_EVAL,
        }
    }
}

/// Prompt text up to the output slot and the separator that precedes the
/// output in the template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedContext {
    pub context: String,
    pub separator: String,
}

pub fn render_context(
    template: &PromptTemplate,
    demos: &[&EvalExample],
    query: &EvalExample,
) -> Result<RenderedContext, EvalError> {
    if let Some(i) = demos.iter().position(|d| d.input == query.input) {
        return Err(EvalError::QueryInDemos(i));
    }
    let (head, separator) = template.render_until_output(&query.input);
    let mut context = String::new();
    for d in demos {
        context.push_str(&template.render(&d.input, &d.output));
        context.push('\n');
    }
    context.push_str(&head);
    Ok(RenderedContext { context, separator })
}

/// Index of the label with the lowest per-token perplexity as a
/// continuation of `ctx`; the earliest label wins ties.
pub fn ranking_classify(scorer: &dyn LmScorer, ctx: &RenderedContext, labels: &[String]) -> Result<usize, EvalError> {
    let mut best = (0, f64::INFINITY);
    for (i, label) in labels.iter().enumerate() {
        let lp = scorer.logprob_continuation(&ctx.context, &format!("{}{label}", ctx.separator))?;
        if lp.n_tokens == 0 {
            return Err(EvalError::EmptyLabel(label.clone()));
        }
        // Mean NLL orders labels exactly as perplexity does.
        let nll = -lp.sum / lp.n_tokens as f64;
        if nll < best.1 {
            best = (i, nll);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: String,
    pub n_shots: usize,
    pub n_examples: usize,
    pub per_seed: Vec<SeedResult>,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
}

impl EvalReport {
    fn new(task: &str, metric: &str, n_shots: usize, n_examples: usize, per_seed: Vec<SeedResult>) -> Self {
        let (mean, std) = mean_std(&per_seed.iter().map(|s| s.value).collect::<Vec<_>>());
        Self {
            task: task.to_string(),
            metric: metric.to_string(),
            n_shots,
            n_examples,
            per_seed,
            mean,
            std,
        }
    }

    /// Rows `task,seed,metric,value`, without a header.
    pub fn csv_rows(&self) -> String {
        self.per_seed
            .iter()
            .map(|s| format!("{},{},{},{}\n", self.task, s.seed, self.metric, s.value))
            .collect()
    }
}

pub const REPORT_CSV_HEADER: &str = "task,seed,metric,value\n";

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Demonstrations for one seed. Depends only on `(seed, task name)`.
pub fn sample_demos(task: &EvalTask, n_shots: usize, seed: u64) -> Result<Vec<&EvalExample>, EvalError> {
    if task.train.len() < n_shots {
        return Err(EvalError::PoolTooSmall {
            task: task.name.clone(),
            needed: n_shots,
            available: task.train.len(),
        });
    }
    let mut rng = rng_for(seed, fnv1a(&task.name));
    Ok(sample(&mut rng, task.train.len(), n_shots)
        .into_iter()
        .map(|i| &task.train[i])
        .collect())
}

fn eval_slice<'a>(task: &'a EvalTask, shots: &ShotConfig) -> &'a [EvalExample] {
    &task.eval[..task.eval.len().min(shots.max_eval_examples)]
}

pub fn few_shot_eval(task: &EvalTask, scorer: &dyn LmScorer, shots: &ShotConfig) -> Result<EvalReport, EvalError> {
    task.validate()?;
    if shots.seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    let template = task.prompt_template()?;
    let examples = eval_slice(task, shots);
    let mut per_seed = Vec::with_capacity(shots.seeds.len());
    for &seed in &shots.seeds {
        let demos = sample_demos(task, shots.n_shots, seed)?;
        let correct: usize = examples
            .par_iter()
            .map(|ex| -> Result<usize, EvalError> {
                let ctx = render_context(&template, &demos, ex)?;
                let pred = ranking_classify(scorer, &ctx, &task.labels)?;
                Ok(usize::from(task.labels[pred] == ex.output))
            })
            .sum::<Result<usize, EvalError>>()?;
        per_seed.push(SeedResult {
            seed,
            value: correct as f64 / examples.len().max(1) as f64,
        });
    }
    Ok(EvalReport::new(&task.name, "accuracy", shots.n_shots, examples.len(), per_seed))
}

/// A model that continues a prompt until a newline.
pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String, LmError>;
}

impl Generator for NeuralScorer {
    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String, LmError> {
        let stop = self.tokenizer.newline_id();
        Ok(greedy_decode(&self.model, &self.tokenizer, prompt, max_new_tokens, Some(stop)))
    }
}

pub fn generation_eval(
    task: &EvalTask,
    generator: &dyn Generator,
    shots: &ShotConfig,
    max_new_tokens: usize,
) -> Result<EvalReport, EvalError> {
    task.validate()?;
    if shots.seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    let template = task.prompt_template()?;
    let examples = eval_slice(task, shots);
    let mut per_seed = Vec::with_capacity(shots.seeds.len());
    for &seed in &shots.seeds {
        let demos = sample_demos(task, shots.n_shots, seed)?;
        // Collected before summing so the float order is fixed.
        let scores: Vec<f64> = examples
            .par_iter()
            .map(|ex| -> Result<f64, EvalError> {
                let ctx = render_context(&template, &demos, ex)?;
                let out = generator.generate(&ctx.context, max_new_tokens)?;
                let line = out.split('\n').next().unwrap_or("");
                Ok(rouge_l(line, &ex.output))
            })
            .collect::<Result<_, _>>()?;
        let total: f64 = scores.iter().sum();
        per_seed.push(SeedResult {
            seed,
            value: total / examples.len().max(1) as f64,
        });
    }
    Ok(EvalReport::new(&task.name, "rouge_l", shots.n_shots, examples.len(), per_seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LogProb;
    use crate::lm::{Capabilities, UniformScorer};
    use crate::util::mix64;
    use std::collections::HashMap;

    fn ex(i: &str, o: &str) -> EvalExample {
        EvalExample {
            input: i.into(),
            output: o.into(),
        }
    }

    fn sst_template() -> PromptTemplate {
        PromptTemplate::new("sst2", "Sentence: {input} Label: {output}").unwrap()
    }

    #[test]
    fn two_shot_rendering() {
        let (d1, d2) = (ex("s1", "l1"), ex("s2", "l2"));
        let ctx = render_context(&sst_template(), &[&d1, &d2], &ex("q", "l1")).unwrap();
        assert_eq!(ctx.context, "Sentence: s1 Label: l1\nSentence: s2 Label: l2\nSentence: q Label:");
        assert_eq!(ctx.separator, " ");
    }

    #[test]
    fn zero_shot_is_query_alone() {
        let ctx = render_context(&sst_template(), &[], &ex("q", "x")).unwrap();
        assert_eq!(ctx.context, "Sentence: q Label:");
    }

    #[test]
    fn query_among_demos_is_rejected() {
        let q = ex("q", "x");
        assert!(matches!(
            render_context(&sst_template(), &[&q], &q),
            Err(EvalError::QueryInDemos(0))
        ));
    }

    /// Fixed per-token log-probability for each label continuation.
    struct TableScorer(HashMap<String, f64>);

    impl LmScorer for TableScorer {
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }
        fn logprob(&self, _: &str) -> Result<LogProb, LmError> {
            Ok(LogProb::new(0.0, 0))
        }
        fn logprob_continuation(&self, _: &str, cont: &str) -> Result<LogProb, LmError> {
            let per = self.0.get(cont.trim()).copied().unwrap_or(-100.0);
            Ok(LogProb::new(per, 1))
        }
    }

    fn labels() -> Vec<String> {
        vec!["Positive".into(), "Negative".into()]
    }

    #[test]
    fn table_scorer_picks_lowest_perplexity() {
        let s = TableScorer(HashMap::from([("Positive".into(), -1.0), ("Negative".into(), -5.0)]));
        let ctx = RenderedContext {
            context: "c".into(),
            separator: " ".into(),
        };
        assert_eq!(ranking_classify(&s, &ctx, &labels()).unwrap(), 0);
        let tie = UniformScorer { vocab_size: 10 };
        assert_eq!(ranking_classify(&tie, &ctx, &labels()).unwrap(), 0);
    }

    /// Knows the answer for every input.
    struct Oracle;

    impl LmScorer for Oracle {
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }
        fn logprob(&self, _: &str) -> Result<LogProb, LmError> {
            Ok(LogProb::new(0.0, 0))
        }
        fn logprob_continuation(&self, ctx: &str, cont: &str) -> Result<LogProb, LmError> {
            let q = ctx.rsplit("Sentence: ").next().unwrap_or("");
            let gold = if q.starts_with("good") { "Positive" } else { "Negative" };
            Ok(LogProb::new(if cont.trim() == gold { -0.1 } else { -3.0 }, 1))
        }
    }

    /// Scores are a hash of the full text: a coin flip per label.
    struct Coin;

    impl LmScorer for Coin {
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }
        fn logprob(&self, _: &str) -> Result<LogProb, LmError> {
            Ok(LogProb::new(0.0, 0))
        }
        fn logprob_continuation(&self, ctx: &str, cont: &str) -> Result<LogProb, LmError> {
            let h = mix64(fnv1a(ctx) ^ fnv1a(cont).rotate_left(17));
            Ok(LogProb::new(-((h >> 11) as f64 / (1u64 << 53) as f64), 1))
        }
    }

    fn sentiment(n_eval: usize) -> EvalTask {
        let mk = |i: usize| {
            if i.is_multiple_of(2) {
                ex(&format!("good thing {i}"), "Positive")
            } else {
                ex(&format!("bad thing {i}"), "Negative")
            }
        };
        EvalTask {
            name: "sentiment".into(),
            kind: TaskKind::Classification,
            template: "Sentence: {input} Label: {output}".into(),
            labels: labels(),
            train: (0..20).map(mk).collect(),
            eval: (100..100 + n_eval).map(mk).collect(),
        }
    }

    #[test]
    fn oracle_scorer_is_perfect_on_every_seed() {
        let r = few_shot_eval(&sentiment(50), &Oracle, &ShotConfig::default()).unwrap();
        assert!(r.per_seed.iter().all(|s| s.value == 1.0));
        assert_eq!((r.mean, r.std), (1.0, 0.0));
    }

    #[test]
    fn coin_scorer_is_near_chance() {
        let shots = ShotConfig {
            n_shots: 2,
            seeds: vec![7],
            max_eval_examples: 1000,
        };
        let r = few_shot_eval(&sentiment(1000), &Coin, &shots).unwrap();
        let sigma = (0.25f64 / 1000.0).sqrt();
        assert!((r.mean - 0.5).abs() < 3.0 * sigma, "{}", r.mean);
        assert_eq!(r, few_shot_eval(&sentiment(1000), &Coin, &shots).unwrap());
    }

    #[test]
    fn eval_examples_are_capped() {
        let shots = ShotConfig {
            n_shots: 0,
            seeds: vec![1],
            max_eval_examples: 10,
        };
        assert_eq!(few_shot_eval(&sentiment(50), &Oracle, &shots).unwrap().n_examples, 10);
    }

    #[test]
    fn demos_depend_only_on_seed_and_task() {
        let t = sentiment(5);
        let a = sample_demos(&t, 4, 3).unwrap();
        let b = sample_demos(&t, 4, 3).unwrap();
        assert_eq!(a, b);
        let mut other = t.clone();
        other.name = "other".into();
        let inputs = |v: Vec<&EvalExample>| v.into_iter().map(|e| e.input.clone()).collect::<Vec<_>>();
        assert_ne!(inputs(a), inputs(sample_demos(&other, 4, 3).unwrap()));
        assert!(matches!(sample_demos(&t, 21, 1), Err(EvalError::PoolTooSmall { .. })));
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    struct Echo(HashMap<String, String>);

    impl Generator for Echo {
        fn generate(&self, prompt: &str, _: usize) -> Result<String, LmError> {
            let q = prompt.rsplit("Q: ").next().unwrap_or("").trim_end_matches(" A:");
            Ok(self.0.get(q).cloned().unwrap_or_default())
        }
    }

    fn qa() -> EvalTask {
        EvalTask {
            name: "qa".into(),
            kind: TaskKind::Generation,
            template: "Q: {input} A: {output}".into(),
            labels: vec![],
            train: vec![ex("t1", "one"), ex("t2", "two")],
            eval: vec![ex("e1", "the answer"), ex("e2", "another answer here")],
        }
    }

    #[test]
    fn memorizing_generator_scores_one_and_silent_scores_zero() {
        let shots = ShotConfig {
            n_shots: 1,
            seeds: vec![1, 2],
            max_eval_examples: 10,
        };
        let memo = Echo(qa().eval.iter().map(|e| (e.input.clone(), e.output.clone())).collect());
        assert_eq!(generation_eval(&qa(), &memo, &shots, 8).unwrap().mean, 1.0);
        assert_eq!(generation_eval(&qa(), &Echo(HashMap::new()), &shots, 8).unwrap().mean, 0.0);
    }

    #[test]
    fn task_validation() {
        let mut t = sentiment(3);
        t.eval[0].output = "Neutral".into();
        assert!(t.validate().is_err());
        let mut t = sentiment(3);
        t.labels.truncate(1);
        assert!(t.validate().is_err());
    }
}
