//! Fixed-window feed-forward LM with hand-written backpropagation.
//!
//! The previous `c` tokens are embedded and concatenated into `x`, then
//! `h = tanh(W1 x + b1)` and `logits = W2ᵀ h + b2`. Positions before the
//! sequence start are filled with the document token, which also serves as
//! the start symbol. All parameters live in one flat vector laid out as
//! `emb (V·e) | W1 (h × c·e) | b1 (h) | W2 (h × V) | b2 (V)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{log_sum_exp, Capabilities, LmError, LmScorer, LogProb};
use crate::corpus::{Tokenizer, DOC_ID};
use crate::util::{expect_magic, read_f64, read_u32, write_f64, write_u32};

pub const NEURAL_MAGIC: &[u8; 8] = b"PICLNLM1";
pub const BOS_ID: u32 = DOC_ID;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuralLmConfig {
    pub vocab_size: usize,
    pub context: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl NeuralLmConfig {
    pub fn n_params(&self) -> usize {
        let Self {
            vocab_size: v,
            context: c,
            embed: e,
            hidden: h,
        } = *self;
        v * e + (c * e * h + h) + (h * v + v)
    }

    fn validate(&self) -> Result<(), LmError> {
        if self.vocab_size < 2 || self.context == 0 || self.embed == 0 || self.hidden == 0 {
            return Err(LmError::Config(format!("invalid model dimensions {self:?}")));
        }
        if self.vocab_size <= BOS_ID as usize {
            return Err(LmError::Config("vocabulary must contain the start token".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralLm {
    cfg: NeuralLmConfig,
    params: Vec<f64>,
}

/// Activations of one forward pass, kept for backpropagation.
struct Trace {
    x: Vec<f64>,
    hid: Vec<f64>,
    logp: Vec<f64>,
}

impl NeuralLm {
    pub fn zeros(cfg: NeuralLmConfig) -> Result<Self, LmError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            params: vec![0.0; cfg.n_params()],
        })
    }

    /// Gaussian init: embeddings `N(0, 0.1²)`, `W1 ~ N(0, 1/(c·e))`,
    /// `W2 ~ N(0, 0.01/h)`, zero biases.
    pub fn random<R: Rng + ?Sized>(cfg: NeuralLmConfig, rng: &mut R) -> Result<Self, LmError> {
        let mut m = Self::zeros(cfg)?;
        let l = m.layout();
        let fill = |p: &mut [f64], sd: f64, rng: &mut R| {
            let n = Normal::new(0.0, sd).expect("positive std");
            p.iter_mut().for_each(|x| *x = n.sample(rng));
        };
        let ce = (cfg.context * cfg.embed) as f64;
        fill(&mut m.params[l.emb..l.w1], 0.1, rng);
        fill(&mut m.params[l.w1..l.b1], 1.0 / ce.sqrt(), rng);
        fill(&mut m.params[l.w2..l.b2], 0.1 / (cfg.hidden as f64).sqrt(), rng);
        Ok(m)
    }

    pub fn from_params(cfg: NeuralLmConfig, params: Vec<f64>) -> Result<Self, LmError> {
        cfg.validate()?;
        if params.len() != cfg.n_params() {
            return Err(LmError::Config(format!(
                "expected {} parameters, got {}",
                cfg.n_params(),
                params.len()
            )));
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> NeuralLmConfig {
        self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layout(&self) -> Layout {
        let NeuralLmConfig {
            vocab_size: v,
            context: c,
            embed: e,
            hidden: h,
        } = self.cfg;
        let emb = 0;
        let w1 = emb + v * e;
        let b1 = w1 + h * c * e;
        let w2 = b1 + h;
        let b2 = w2 + h * v;
        Layout {
            emb,
            w1,
            b1,
            w2,
            b2,
            end: b2 + v,
        }
    }

    /// Range of embedding parameters belonging to token `t`.
    pub fn embedding_range(&self, t: u32) -> std::ops::Range<usize> {
        let e = self.cfg.embed;
        let s = self.layout().emb + t as usize * e;
        s..s + e
    }

    fn context_at(&self, seq: &[u32], pos: usize) -> Vec<u32> {
        let c = self.cfg.context;
        (0..c)
            .map(|k| {
                let back = c - k;
                if pos >= back {
                    seq[pos - back]
                } else {
                    BOS_ID
                }
            })
            .collect()
    }

    fn forward(&self, ctx: &[u32]) -> Trace {
        let NeuralLmConfig {
            vocab_size: v,
            context: _,
            embed: e,
            hidden: h,
        } = self.cfg;
        let l = self.layout();
        let p = &self.params;
        let mut x = Vec::with_capacity(ctx.len() * e);
        for &t in ctx {
            let t = (t as usize).min(v - 1);
            x.extend_from_slice(&p[l.emb + t * e..l.emb + (t + 1) * e]);
        }
        let ce = x.len();
        let hid: Vec<f64> = (0..h)
            .map(|j| {
                let row = &p[l.w1 + j * ce..l.w1 + (j + 1) * ce];
                (p[l.b1 + j] + row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()).tanh()
            })
            .collect();
        let mut logits = p[l.b2..l.end].to_vec();
        for (j, &hj) in hid.iter().enumerate() {
            let row = &p[l.w2 + j * v..l.w2 + (j + 1) * v];
            for (o, &w) in logits.iter_mut().zip(row) {
                *o += hj * w;
            }
        }
        let z = log_sum_exp(&logits);
        let logp = logits.into_iter().map(|o| o - z).collect();
        Trace { x, hid, logp }
    }

    /// Log-probabilities of the next token after `seq[..pos]`.
    pub fn next_logprobs(&self, seq: &[u32], pos: usize) -> Vec<f64> {
        self.forward(&self.context_at(seq, pos)).logp
    }

    /// `Σ_{t ≥ 1} log P(seq[t] | seq[..t])`.
    pub fn seq_logprob(&self, seq: &[u32]) -> f64 {
        self.range_logprob(seq, 1, seq.len())
    }

    fn range_logprob(&self, seq: &[u32], start: usize, end: usize) -> f64 {
        (start.max(1)..end)
            .map(|t| self.next_logprobs(seq, t)[seq[t] as usize])
            .sum()
    }

    /// Mean next-token NLL over every position of the sequence.
    pub fn lm_loss(&self, seq: &[u32]) -> Result<f64, LmError> {
        if seq.len() < 2 {
            return Err(LmError::SequenceTooShort(seq.len()));
        }
        Ok(-self.seq_logprob(seq) / (seq.len() - 1) as f64)
    }

    /// Add `weight · ∂(−Σ log P)/∂θ` over targets `start..end` into `grad`
    /// and return the summed NLL.
    pub fn accumulate_grad(&self, seq: &[u32], start: usize, end: usize, weight: f64, grad: &mut [f64]) -> f64 {
        let NeuralLmConfig {
            vocab_size: v,
            context: _,
            embed: e,
            hidden: h,
        } = self.cfg;
        let l = self.layout();
        let p = &self.params;
        let mut nll = 0.0;
        let mut dhid = vec![0.0; h];
        for t in start.max(1)..end {
            let ctx = self.context_at(seq, t);
            let tr = self.forward(&ctx);
            let target = seq[t] as usize;
            nll -= tr.logp[target];
            let ce = tr.x.len();
            // dL/dlogits = softmax − onehot.
            let dlog: Vec<f64> = tr
                .logp
                .iter()
                .enumerate()
                .map(|(o, &lp)| weight * (lp.exp() - if o == target { 1.0 } else { 0.0 }))
                .collect();
            for (g, d) in grad[l.b2..l.end].iter_mut().zip(&dlog) {
                *g += d;
            }
            for j in 0..h {
                let row = &p[l.w2 + j * v..l.w2 + (j + 1) * v];
                let grow = &mut grad[l.w2 + j * v..l.w2 + (j + 1) * v];
                let mut acc = 0.0;
                for o in 0..v {
                    grow[o] += tr.hid[j] * dlog[o];
                    acc += row[o] * dlog[o];
                }
                dhid[j] = acc * (1.0 - tr.hid[j] * tr.hid[j]);
            }
            let mut dx = vec![0.0; ce];
            for j in 0..h {
                let dj = dhid[j];
                grad[l.b1 + j] += dj;
                let row = &p[l.w1 + j * ce..l.w1 + (j + 1) * ce];
                let grow = &mut grad[l.w1 + j * ce..l.w1 + (j + 1) * ce];
                for i in 0..ce {
                    grow[i] += dj * tr.x[i];
                    dx[i] += dj * row[i];
                }
            }
            for (k, &tok) in ctx.iter().enumerate() {
                let tok = (tok as usize).min(v - 1);
                let g = &mut grad[l.emb + tok * e..l.emb + (tok + 1) * e];
                for (gi, di) in g.iter_mut().zip(&dx[k * e..(k + 1) * e]) {
                    *gi += di;
                }
            }
        }
        nll
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(NEURAL_MAGIC)?;
        for d in [self.cfg.vocab_size, self.cfg.context, self.cfg.embed, self.cfg.hidden] {
            write_u32(w, d as u32)?;
        }
        for &p in &self.params {
            write_f64(w, p)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, LmError> {
        expect_magic(r, NEURAL_MAGIC)?;
        let cfg = NeuralLmConfig {
            vocab_size: read_u32(r)? as usize,
            context: read_u32(r)? as usize,
            embed: read_u32(r)? as usize,
            hidden: read_u32(r)? as usize,
        };
        cfg.validate()?;
        let params = (0..cfg.n_params()).map(|_| read_f64(r)).collect::<std::io::Result<Vec<_>>>()?;
        Self::from_params(cfg, params)
    }

    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Mean NLL over every target position of `seqs`, and its gradient.
pub fn batch_loss_grad(model: &NeuralLm, seqs: &[Vec<u32>]) -> (f64, Vec<f64>) {
    let n: usize = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
    let mut grad = vec![0.0; model.params.len()];
    if n == 0 {
        return (0.0, grad);
    }
    let w = 1.0 / n as f64;
    let nll: f64 = seqs.iter().map(|s| model.accumulate_grad(s, 1, s.len(), w, &mut grad)).sum();
    (nll / n as f64, grad)
}

const MAX_CHECKED_PARAMS: usize = 1500;

/// Max relative error between analytic and central-difference gradients of
/// the mean NLL over `seqs`. Checks every parameter of small models and a
/// strided subset otherwise.
pub fn grad_check_lm(model: &NeuralLm, seqs: &[Vec<u32>], eps: f64) -> Result<f64, LmError> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(LmError::NonPositiveEps);
    }
    let (_, grad) = batch_loss_grad(model, seqs);
    let n = model.params.len();
    let stride = n.div_ceil(MAX_CHECKED_PARAMS).max(1);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in (0..n).step_by(stride) {
        let p0 = probe.params[i];
        probe.params[i] = p0 + eps;
        let lp = batch_loss_grad(&probe, seqs).0;
        probe.params[i] = p0 - eps;
        let lm = batch_loss_grad(&probe, seqs).0;
        probe.params[i] = p0;
        let numeric = (lp - lm) / (2.0 * eps);
        worst = worst.max(crate::encoder::relative_error(grad[i], numeric));
    }
    Ok(worst)
}

/// Append argmax tokens (lowest id on ties) until `stop` or `max_new`.
pub fn greedy_decode_ids(model: &NeuralLm, prompt: &[u32], max_new: usize, stop: Option<u32>) -> Vec<u32> {
    let mut seq = Vec::with_capacity(prompt.len() + max_new + 1);
    seq.push(BOS_ID);
    seq.extend_from_slice(prompt);
    let mut out = Vec::new();
    for _ in 0..max_new {
        let lp = model.next_logprobs(&seq, seq.len());
        let mut best = 0usize;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        let t = best as u32;
        if Some(t) == stop {
            break;
        }
        seq.push(t);
        out.push(t);
    }
    out
}

pub fn greedy_decode(model: &NeuralLm, tokenizer: &Tokenizer, prompt: &str, max_new: usize, stop: Option<u32>) -> String {
    tokenizer.decode(&greedy_decode_ids(model, &tokenizer.encode(prompt), max_new, stop))
}

#[derive(Debug, Clone)]
pub struct NeuralScorer {
    pub model: NeuralLm,
    pub tokenizer: Tokenizer,
}

impl NeuralScorer {
    pub fn new(model: NeuralLm, tokenizer: Tokenizer) -> Self {
        Self { model, tokenizer }
    }

    fn with_bos(&self, parts: &[&str]) -> (Vec<u32>, Vec<usize>) {
        let mut seq = vec![BOS_ID];
        let mut ends = Vec::new();
        for p in parts {
            seq.extend(self.tokenizer.encode(p));
            ends.push(seq.len());
        }
        (seq, ends)
    }
}

impl LmScorer for NeuralScorer {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            scorable: true,
            trainable: true,
            generative: true,
        }
    }

    fn logprob(&self, text: &str) -> Result<LogProb, LmError> {
        let (seq, _) = self.with_bos(&[text]);
        Ok(LogProb::new(self.model.seq_logprob(&seq), seq.len() - 1))
    }

    /// Scores only the continuation positions, conditioning on the context.
    fn logprob_continuation(&self, context: &str, continuation: &str) -> Result<LogProb, LmError> {
        let (seq, ends) = self.with_bos(&[context, continuation]);
        Ok(LogProb::new(
            self.model.range_logprob(&seq, ends[0], ends[1]),
            ends[1] - ends[0],
        ))
    }
}
