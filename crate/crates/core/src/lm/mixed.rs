//! Training on the weighted sum `α·L_ICL + (1−α)·L_LM`.
//!
//! Each source is cut into chunks of consecutive target positions. Because
//! the model only looks back `c` tokens, a chunk needs no separate window:
//! its targets are scored with their true preceding context, and the chunks
//! of a sequence cover every position exactly once. Every step draws `batch`
//! chunks from each source, each from its own RNG stream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::neural::{NeuralLm, BOS_ID};
use super::LmError;
use crate::corpus::Tokenizer;
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub alpha: f64,
    pub steps: usize,
    /// Chunks drawn from each source per step.
    pub batch: usize,
    /// Target positions per chunk.
    pub window: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    /// Clip the global gradient norm to this value.
    #[serde(default)]
    pub clip: Option<f64>,
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            steps: 1000,
            batch: 8,
            window: 32,
            lr: 0.1,
            momentum: 0.0,
            clip: Some(5.0),
            seed: 0,
        }
    }
}

impl MixConfig {
    fn validate(&self) -> Result<(), LmError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LmError::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.batch == 0 || self.window == 0 {
            return Err(LmError::Config("batch and window must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(LmError::Config("invalid learning rate or momentum".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MixReport {
    /// Mean NLL of the ICL batch at each step (empty if that source is empty).
    pub icl_loss: Vec<f64>,
    /// Mean NLL of the full-document batch at each step.
    pub lm_loss: Vec<f64>,
}

/// Encode texts and prepend the start token.
pub fn encode_with_bos(tokenizer: &Tokenizer, texts: &[&str]) -> Vec<Vec<u32>> {
    texts
        .iter()
        .map(|t| {
            let mut s = vec![BOS_ID];
            s.extend(tokenizer.encode(t));
            s
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Chunk {
    seq: usize,
    start: usize,
    end: usize,
}

fn chunks(seqs: &[Vec<u32>], window: usize) -> Vec<Chunk> {
    let mut out = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        let mut start = 1;
        while start < s.len() {
            let end = (start + window).min(s.len());
            out.push(Chunk { seq: i, start, end });
            start = end;
        }
    }
    out
}

struct Source<'a> {
    seqs: &'a [Vec<u32>],
    chunks: Vec<Chunk>,
    rng: rand_chacha::ChaCha8Rng,
}

impl Source<'_> {
    fn draw(&mut self, n: usize) -> Vec<Chunk> {
        (0..n)
            .map(|_| self.chunks[self.rng.random_range(0..self.chunks.len())])
            .collect()
    }

    fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Mean NLL of the drawn chunks; adds `weight · ∇mean` into `grad` when given.
fn chunk_loss(model: &NeuralLm, src: &Source<'_>, batch: &[Chunk], weight: f64, grad: Option<&mut [f64]>) -> f64 {
    let n: usize = batch.iter().map(|c| c.end - c.start).sum();
    let scale = 1.0 / n as f64;
    let nll: f64 = match grad {
        Some(g) => batch
            .iter()
            .map(|c| model.accumulate_grad(&src.seqs[c.seq], c.start, c.end, weight * scale, g))
            .sum(),
        None => batch
            .iter()
            .map(|c| {
                let s = &src.seqs[c.seq];
                -(c.start..c.end)
                    .map(|t| model.next_logprobs(s, t)[s[t] as usize])
                    .sum::<f64>()
            })
            .sum(),
    };
    nll * scale
}

const ICL_STREAM: u64 = 11;
const LM_STREAM: u64 = 12;

/// Train on instance sequences `icl` and full-document sequences `docs`
/// (both already starting with the start token).
pub fn train_mixed(
    mut model: NeuralLm,
    icl: &[Vec<u32>],
    docs: &[Vec<u32>],
    cfg: &MixConfig,
) -> Result<(NeuralLm, MixReport), LmError> {
    cfg.validate()?;
    let mut icl_src = Source {
        seqs: icl,
        chunks: chunks(icl, cfg.window),
        rng: rng_for(cfg.seed, ICL_STREAM),
    };
    let mut lm_src = Source {
        seqs: docs,
        chunks: chunks(docs, cfg.window),
        rng: rng_for(cfg.seed, LM_STREAM),
    };
    if cfg.alpha > 0.0 && icl_src.is_empty() {
        return Err(LmError::EmptySource("ICL"));
    }
    if cfg.alpha < 1.0 && lm_src.is_empty() {
        return Err(LmError::EmptySource("full-document"));
    }
    let mut report = MixReport::default();
    let mut velocity = vec![0.0; model.params().len()];
    for step in 0..cfg.steps {
        let mut grad = vec![0.0; model.params().len()];
        let mut total = 0.0;
        if !icl_src.is_empty() {
            let b = icl_src.draw(cfg.batch);
            let g = (cfg.alpha > 0.0).then_some(grad.as_mut_slice());
            let l = chunk_loss(&model, &icl_src, &b, cfg.alpha, g);
            report.icl_loss.push(l);
            total += cfg.alpha * l;
        }
        if !lm_src.is_empty() {
            let b = lm_src.draw(cfg.batch);
            let g = (cfg.alpha < 1.0).then_some(grad.as_mut_slice());
            let l = chunk_loss(&model, &lm_src, &b, 1.0 - cfg.alpha, g);
            report.lm_loss.push(l);
            total += (1.0 - cfg.alpha) * l;
        }
        if !total.is_finite() {
            return Err(LmError::NonFiniteLoss { step });
        }
        if let Some(c) = cfg.clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                let s = c / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
            *v = cfg.momentum * *v + g;
            *p -= cfg.lr * *v;
        }
        if step % 200 == 0 {
            log::debug!("lm step {step}/{} loss {total:.4}", cfg.steps);
        }
    }
    Ok((model, report))
}

/// Plain language-model training on one source.
pub fn train_lm(model: NeuralLm, seqs: &[Vec<u32>], cfg: &MixConfig) -> Result<(NeuralLm, MixReport), LmError> {
    let cfg = MixConfig { alpha: 1.0, ..cfg.clone() };
    train_mixed(model, seqs, &[], &cfg)
}
