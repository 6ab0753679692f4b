//! Contrastive training of the encoder.
//!
//! Each row has an anchor `a`, one positive `p` of the same task, and a
//! negative set made of the row's hard negatives plus the positives of other
//! rows whose task differs. The row loss is `lse(logits) - a·p` over
//! `logits = [a·p, a·n₁, …]`, averaged over rows.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderError, EncoderModel, FeatureVector, HashSpec, TaskDataset};
use crate::util::rng_for;

/// A rendered text with the provenance needed to audit batch construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedText {
    pub text: String,
    pub example_index: usize,
    pub example_task: String,
    pub template_task: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveRow {
    pub anchor: RenderedText,
    pub positive: RenderedText,
    pub hard_negatives: Vec<RenderedText>,
}

impl ContrastiveRow {
    pub fn task(&self) -> &str {
        &self.anchor.example_task
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContrastiveBatch {
    pub rows: Vec<ContrastiveRow>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Indices of rows whose positives act as easy negatives for row `i`.
    pub fn easy_negatives(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let task = self.rows[i].task();
        (0..self.rows.len()).filter(move |&j| j != i && self.rows[j].task() != task)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        for (i, r) in self.rows.iter().enumerate() {
            if r.positive.example_task != r.anchor.example_task || r.positive.example_index == r.anchor.example_index {
                return Err(EncoderError::BadBatch(format!("row {i}: invalid positive")));
            }
            for h in &r.hard_negatives {
                if h.template_task != r.anchor.template_task || h.example_task == r.anchor.example_task {
                    return Err(EncoderError::BadBatch(format!("row {i}: invalid hard negative")));
                }
            }
        }
        Ok(())
    }
}

const MAX_ANCHOR_ATTEMPTS: usize = 1000;

/// Sample a batch: uniform anchors, a same-task positive that is not the
/// anchor, and `n_hard` negatives rendering the anchor's template over
/// examples of other tasks.
pub fn build_contrastive_batch<R: Rng + ?Sized>(
    dataset: &TaskDataset,
    batch_size: usize,
    n_hard: usize,
    rng: &mut R,
) -> Result<ContrastiveBatch, EncoderError> {
    if dataset.n_tasks() < 2 {
        return Err(EncoderError::TooFewTasks(dataset.n_tasks()));
    }
    let examples = dataset.examples();
    let mut rows = Vec::with_capacity(batch_size);
    let mut attempts = 0;
    while rows.len() < batch_size {
        let ai = rng.random_range(0..examples.len());
        let anchor = &examples[ai];
        let same = dataset.task_indices(&anchor.task);
        if same.len() < 2 {
            attempts += 1;
            if attempts >= MAX_ANCHOR_ATTEMPTS {
                return Err(EncoderError::NoPositiveAvailable(attempts));
            }
            continue;
        }
        let tpl = dataset
            .templates_for(&anchor.task)
            .choose(rng)
            .ok_or_else(|| EncoderError::MissingTemplate(anchor.task.clone()))?;
        let pi = loop {
            let j = *same.choose(rng).expect("non-empty");
            if j != ai {
                break j;
            }
        };
        let pos = &examples[pi];
        let pos_tpl = dataset
            .templates_for(&pos.task)
            .choose(rng)
            .ok_or_else(|| EncoderError::MissingTemplate(pos.task.clone()))?;
        let mut hard = Vec::with_capacity(n_hard);
        while hard.len() < n_hard {
            let hi = rng.random_range(0..examples.len());
            let h = &examples[hi];
            if h.task == anchor.task {
                continue;
            }
            hard.push(RenderedText {
                text: tpl.render_example(h),
                example_index: hi,
                example_task: h.task.clone(),
                template_task: tpl.task().to_string(),
            });
        }
        rows.push(ContrastiveRow {
            anchor: RenderedText {
                text: tpl.render_example(anchor),
                example_index: ai,
                example_task: anchor.task.clone(),
                template_task: tpl.task().to_string(),
            },
            positive: RenderedText {
                text: pos_tpl.render_example(pos),
                example_index: pi,
                example_task: pos.task.clone(),
                template_task: pos_tpl.task().to_string(),
            },
            hard_negatives: hard,
        });
    }
    Ok(ContrastiveBatch { rows })
}

/// Stabilized `-log softmax(pos)` over `[pos] ++ negs`. Exactly zero when
/// `negs` is empty.
pub fn row_loss(pos: f64, negs: &[f64]) -> f64 {
    if negs.is_empty() {
        return 0.0;
    }
    let m = negs.iter().copied().fold(pos, f64::max);
    if pos >= m {
        return negs.iter().map(|&l| (l - pos).exp()).sum::<f64>().ln_1p();
    }
    let s: f64 = (pos - m).exp() + negs.iter().map(|&l| (l - m).exp()).sum::<f64>();
    (m - pos) + s.ln()
}

/// Softmax-minus-target gradient of [`row_loss`] w.r.t. `[pos] ++ negs`.
fn row_logit_grad(pos: f64, negs: &[f64]) -> Vec<f64> {
    let mut g = Vec::with_capacity(negs.len() + 1);
    if negs.is_empty() {
        g.push(0.0);
        return g;
    }
    let m = negs.iter().copied().fold(pos, f64::max);
    let s: f64 = (pos - m).exp() + negs.iter().map(|&l| (l - m).exp()).sum::<f64>();
    g.push((pos - m).exp() / s - 1.0);
    g.extend(negs.iter().map(|&l| (l - m).exp() / s));
    g
}

/// Gradient of the loss w.r.t. `W`, stored by feature column.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    pub dim: usize,
    pub columns: BTreeMap<u32, Vec<f64>>,
}

impl SparseGrad {
    pub fn get(&self, row: usize, feature: u32) -> f64 {
        self.columns.get(&feature).map_or(0.0, |c| c[row])
    }

    fn add_outer(&mut self, g: &[f64], x: &FeatureVector, scale: f64) {
        for (f, v) in x.iter() {
            let col = self.columns.entry(f).or_insert_with(|| vec![0.0; self.dim]);
            for (c, gi) in col.iter_mut().zip(g) {
                *c += scale * gi * v;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Embedded {
    x: FeatureVector,
    e: Vec<f64>,
}

fn embed_all(model: &EncoderModel, texts: &[RenderedText]) -> Vec<Embedded> {
    texts
        .iter()
        .map(|t| {
            let x = model.featurize(&t.text);
            let e = model.embed_features(&x);
            Embedded { x, e }
        })
        .collect()
}

/// Row logits: positive first, then hard negatives, then easy negatives.
fn row_logits(a: &[f64], p: &[f64], hard: &[Embedded], easy: &[&[f64]]) -> (f64, Vec<f64>) {
    let pos = dot(a, p);
    let negs = hard
        .iter()
        .map(|h| dot(a, &h.e))
        .chain(easy.iter().map(|e| dot(a, e)))
        .collect();
    (pos, negs)
}

/// Mean contrastive loss and its gradient w.r.t. `W`.
pub fn loss_and_grad(model: &EncoderModel, batch: &ContrastiveBatch) -> Result<(f64, SparseGrad), EncoderError> {
    if batch.is_empty() {
        return Err(EncoderError::BadBatch("empty batch".into()));
    }
    let d = model.dim();
    let anchors = embed_all(model, &batch.rows.iter().map(|r| r.anchor.clone()).collect::<Vec<_>>());
    let positives = embed_all(model, &batch.rows.iter().map(|r| r.positive.clone()).collect::<Vec<_>>());
    let hards: Vec<Vec<Embedded>> = batch.rows.iter().map(|r| embed_all(model, &r.hard_negatives)).collect();

    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut g_anchor = vec![vec![0.0; d]; batch.len()];
    let mut g_pos = vec![vec![0.0; d]; batch.len()];
    let mut g_hard: Vec<Vec<Vec<f64>>> = hards.iter().map(|h| vec![vec![0.0; d]; h.len()]).collect();

    for i in 0..batch.len() {
        let easy_ids: Vec<usize> = batch.easy_negatives(i).collect();
        let easy: Vec<&[f64]> = easy_ids.iter().map(|&j| positives[j].e.as_slice()).collect();
        let a = &anchors[i].e;
        let (pos, negs) = row_logits(a, &positives[i].e, &hards[i], &easy);
        total += row_loss(pos, &negs);
        let gl = row_logit_grad(pos, &negs);
        // d(a·t)/da = t and d(a·t)/dt = a.
        for k in 0..d {
            g_anchor[i][k] += gl[0] * positives[i].e[k];
            g_pos[i][k] += gl[0] * a[k];
        }
        for (m, h) in hards[i].iter().enumerate() {
            let g = gl[1 + m];
            for k in 0..d {
                g_anchor[i][k] += g * h.e[k];
                g_hard[i][m][k] += g * a[k];
            }
        }
        let off = 1 + hards[i].len();
        for (m, &j) in easy_ids.iter().enumerate() {
            let g = gl[off + m];
            for k in 0..d {
                g_anchor[i][k] += g * positives[j].e[k];
                g_pos[j][k] += g * a[k];
            }
        }
    }

    let mut grad = SparseGrad {
        dim: d,
        columns: BTreeMap::new(),
    };
    for i in 0..batch.len() {
        grad.add_outer(&g_anchor[i], &anchors[i].x, 1.0 / n);
        grad.add_outer(&g_pos[i], &positives[i].x, 1.0 / n);
        for (m, h) in hards[i].iter().enumerate() {
            grad.add_outer(&g_hard[i][m], &h.x, 1.0 / n);
        }
    }
    Ok((total / n, grad))
}

pub fn contrastive_loss(model: &EncoderModel, batch: &ContrastiveBatch) -> Result<f64, EncoderError> {
    loss_and_grad(model, batch).map(|(l, _)| l)
}

fn default_dim() -> usize {
    64
}

fn default_init_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub hash: HashSpec,
    pub lr: f64,
    pub batch: usize,
    pub n_hard: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            dim: default_dim(),
            hash: HashSpec::default(),
            lr: 5e-5,
            batch: 64,
            n_hard: 4,
            epochs: 1,
            seed: 0,
            init_scale: default_init_scale(),
        }
    }
}

impl EncoderTrainConfig {
    /// Steps per epoch: one pass worth of anchors.
    pub fn steps_per_epoch(&self, n_examples: usize) -> usize {
        n_examples.div_ceil(self.batch.max(1)).max(1)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;

/// Initialize from `config.seed` and train with plain SGD.
pub fn train_encoder(
    dataset: &TaskDataset,
    config: &EncoderTrainConfig,
) -> Result<(EncoderModel, TrainReport), EncoderError> {
    let mut rng = rng_for(config.seed, INIT_STREAM);
    let init = EncoderModel::random(config.dim, config.hash, config.init_scale, &mut rng)?;
    train_encoder_from(init, dataset, config)
}

/// Train an existing model. `config.dim` and `config.hash` are ignored.
pub fn train_encoder_from(
    mut model: EncoderModel,
    dataset: &TaskDataset,
    config: &EncoderTrainConfig,
) -> Result<(EncoderModel, TrainReport), EncoderError> {
    if config.batch == 0 {
        return Err(EncoderError::Config("batch size must be positive".into()));
    }
    if !config.lr.is_finite() || config.lr < 0.0 {
        return Err(EncoderError::Config(format!("invalid learning rate {}", config.lr)));
    }
    let mut rng = rng_for(config.seed, BATCH_STREAM);
    let steps = config.epochs * config.steps_per_epoch(dataset.examples().len());
    let f = model.n_features();
    let mut report = TrainReport::default();
    for step in 0..steps {
        let batch = build_contrastive_batch(dataset, config.batch, config.n_hard, &mut rng)?;
        let (loss, grad) = loss_and_grad(&model, &batch)?;
        if !loss.is_finite() {
            return Err(EncoderError::NonFiniteLoss { step });
        }
        report.losses.push(loss);
        if config.lr > 0.0 {
            let w = model.weights_mut();
            for (&col, g) in &grad.columns {
                for (r, gv) in g.iter().enumerate() {
                    w[r * f + col as usize] -= config.lr * gv;
                }
            }
        }
        if step % 50 == 0 {
            log::debug!("encoder step {step}/{steps} loss {loss:.5}");
        }
    }
    model.train_meta = Some(super::TrainMeta {
        lr: config.lr,
        batch: config.batch,
        n_hard: config.n_hard,
        seed: config.seed,
        epochs: config.epochs,
    });
    Ok((model, report))
}

/// Relative error used by the gradient checks, floored for near-zero pairs.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

const MAX_CHECKED_ENTRIES: usize = 400;

/// Compare analytic and central-difference gradients over a deterministic
/// subset of `W` entries: every active entry when few enough, otherwise a
/// strided sample, plus one inactive column when one exists.
pub fn grad_check_encoder(model: &EncoderModel, batch: &ContrastiveBatch, eps: f64) -> Result<f64, EncoderError> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(EncoderError::NonPositiveEps);
    }
    let (_, grad) = loss_and_grad(model, batch)?;
    let d = model.dim();
    let f = model.n_features();
    let mut entries: Vec<(usize, u32)> = grad
        .columns
        .keys()
        .flat_map(|&c| (0..d).map(move |r| (r, c)))
        .collect();
    if entries.len() > MAX_CHECKED_ENTRIES {
        let stride = entries.len().div_ceil(MAX_CHECKED_ENTRIES);
        entries = entries.into_iter().step_by(stride).collect();
    }
    if let Some(c) = (0..f as u32).find(|c| !grad.columns.contains_key(c)) {
        entries.push((0, c));
    }
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (r, c) in entries {
        let idx = r * f + c as usize;
        let w0 = probe.weights()[idx];
        probe.weights_mut()[idx] = w0 + eps;
        let lp = contrastive_loss(&probe, batch)?;
        probe.weights_mut()[idx] = w0 - eps;
        let lm = contrastive_loss(&probe, batch)?;
        probe.weights_mut()[idx] = w0;
        let numeric = (lp - lm) / (2.0 * eps);
        worst = worst.max(relative_error(grad.get(r, c), numeric));
    }
    Ok(worst)
}
