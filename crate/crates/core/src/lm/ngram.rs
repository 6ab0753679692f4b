//! Interpolated n-gram LM over token ids.
//!
//! `P(t | h) = Σ_o λ_o · P_MLE,o(t | h_o)`. When the order-`o` context is
//! unseen, or reaches before the start of the sequence, its weight passes to
//! order `o − 1`. The unigram term gives each unseen type `1/V` and scales
//! seen types by `(1 − U/V)`, where `U` counts unseen types, so it sums to 1.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Capabilities, LmError, LmScorer, LogProb};
use crate::corpus::{Tokenizer, NEWLINE_ID};
use crate::util::{expect_magic, read_f64, read_u32, read_u64, write_f64, write_u32, write_u64};

pub const NGRAM_MAGIC: &[u8; 8] = b"PICLNGM1";

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramLm {
    order: usize,
    vocab_size: usize,
    /// `lambdas[o - 1]` weights order `o`.
    lambdas: Vec<f64>,
    /// `tables[o - 1]` maps an `(o − 1)`-token context to next-token counts.
    tables: Vec<HashMap<Vec<u32>, ContextCounts>>,
    unseen_types: usize,
}

fn validate(order: usize, vocab_size: usize, lambdas: &[f64]) -> Result<(), LmError> {
    if order == 0 {
        return Err(LmError::Config("n-gram order must be at least 1".into()));
    }
    if vocab_size == 0 {
        return Err(LmError::Config("vocabulary size must be positive".into()));
    }
    if lambdas.len() != order {
        return Err(LmError::Config(format!("expected {order} lambdas, got {}", lambdas.len())));
    }
    if lambdas.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
        return Err(LmError::Config("lambdas must lie in [0, 1]".into()));
    }
    let s: f64 = lambdas.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(LmError::Config(format!("lambdas must sum to 1, got {s}")));
    }
    Ok(())
}

impl NGramLm {
    pub fn train(sequences: &[Vec<u32>], vocab_size: usize, order: usize, lambdas: &[f64]) -> Result<Self, LmError> {
        validate(order, vocab_size, lambdas)?;
        if sequences.iter().all(Vec::is_empty) {
            return Err(LmError::Config("n-gram training corpus is empty".into()));
        }
        let mut tables: Vec<HashMap<Vec<u32>, ContextCounts>> = vec![HashMap::new(); order];
        for seq in sequences {
            for (i, &t) in seq.iter().enumerate() {
                for o in 1..=order.min(i + 1) {
                    let cc = tables[o - 1].entry(seq[i + 1 - o..i].to_vec()).or_default();
                    cc.total += 1;
                    *cc.next.entry(t).or_insert(0) += 1;
                }
            }
        }
        let mut lm = Self {
            order,
            vocab_size,
            lambdas: lambdas.to_vec(),
            tables,
            unseen_types: 0,
        };
        lm.unseen_types = lm.count_unseen();
        Ok(lm)
    }

    fn count_unseen(&self) -> usize {
        let seen = self.tables[0]
            .get(&Vec::new())
            .map_or(0, |cc| cc.next.keys().filter(|&&t| (t as usize) < self.vocab_size).count());
        self.vocab_size - seen
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    fn unigram(&self, t: u32) -> f64 {
        let v = self.vocab_size as f64;
        let c = self.tables[0]
            .get(&Vec::new())
            .map_or((0, 1), |cc| (cc.next.get(&t).copied().unwrap_or(0), cc.total));
        if c.0 == 0 || t as usize >= self.vocab_size {
            1.0 / v
        } else {
            (1.0 - self.unseen_types as f64 / v) * c.0 as f64 / c.1 as f64
        }
    }

    /// `P(t | history)`, using at most the last `order − 1` history tokens.
    pub fn prob(&self, history: &[u32], t: u32) -> f64 {
        let mut p = 0.0;
        let mut carry = 0.0;
        for o in (2..=self.order).rev() {
            let w = self.lambdas[o - 1] + carry;
            let n = o - 1;
            let ctx = (history.len() >= n).then(|| &history[history.len() - n..]);
            match ctx.and_then(|c| self.tables[o - 1].get(c)) {
                Some(cc) => {
                    let c = cc.next.get(&t).copied().unwrap_or(0);
                    p += w * c as f64 / cc.total as f64;
                    carry = 0.0;
                }
                None => carry = w,
            }
        }
        p + (self.lambdas[0] + carry) * self.unigram(t)
    }

    pub fn logprob_ids(&self, ids: &[u32]) -> LogProb {
        let sum = (0..ids.len()).map(|i| self.prob(&ids[..i], ids[i]).ln()).sum();
        LogProb::new(sum, ids.len())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(NGRAM_MAGIC)?;
        write_u32(w, self.order as u32)?;
        write_u32(w, self.vocab_size as u32)?;
        for &l in &self.lambdas {
            write_f64(w, l)?;
        }
        for table in &self.tables {
            let mut ctxs: Vec<&Vec<u32>> = table.keys().collect();
            ctxs.sort();
            write_u64(w, ctxs.len() as u64)?;
            for ctx in ctxs {
                for &t in ctx {
                    write_u32(w, t)?;
                }
                let cc = &table[ctx];
                let mut next: Vec<(u32, u64)> = cc.next.iter().map(|(&t, &c)| (t, c)).collect();
                next.sort_unstable();
                write_u32(w, next.len() as u32)?;
                for (t, c) in next {
                    write_u32(w, t)?;
                    write_u64(w, c)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, LmError> {
        expect_magic(r, NGRAM_MAGIC)?;
        let order = read_u32(r)? as usize;
        let vocab_size = read_u32(r)? as usize;
        let lambdas = (0..order).map(|_| read_f64(r)).collect::<std::io::Result<Vec<_>>>()?;
        validate(order, vocab_size, &lambdas)?;
        let mut tables = Vec::with_capacity(order);
        for o in 1..=order {
            let n_ctx = read_u64(r)?;
            let mut table = HashMap::new();
            for _ in 0..n_ctx {
                let ctx = (0..o - 1).map(|_| read_u32(r)).collect::<std::io::Result<Vec<_>>>()?;
                let n = read_u32(r)?;
                let mut cc = ContextCounts::default();
                for _ in 0..n {
                    let t = read_u32(r)?;
                    let c = read_u64(r)?;
                    cc.total += c;
                    cc.next.insert(t, c);
                }
                table.insert(ctx, cc);
            }
            tables.push(table);
        }
        let mut lm = Self {
            order,
            vocab_size,
            lambdas,
            tables,
            unseen_types: 0,
        };
        lm.unseen_types = lm.count_unseen();
        Ok(lm)
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

/// Text scorer wrapping an [`NGramLm`] and its tokenizer.
#[derive(Debug, Clone)]
pub struct NGramScorer {
    pub lm: NGramLm,
    pub tokenizer: Tokenizer,
    /// Drop newline tokens before scoring. With a unigram model this makes
    /// `log P(a ⊕ "\n" ⊕ b) = log P(a) + log P(b)` exactly.
    pub skip_newlines: bool,
}

impl NGramScorer {
    pub fn new(lm: NGramLm, tokenizer: Tokenizer) -> Self {
        Self {
            lm,
            tokenizer,
            skip_newlines: false,
        }
    }

    /// Train on texts encoded with `tokenizer`.
    pub fn train(texts: &[&str], tokenizer: Tokenizer, order: usize, lambdas: &[f64]) -> Result<Self, LmError> {
        let seqs: Vec<Vec<u32>> = texts.iter().map(|t| tokenizer.encode(t)).collect();
        let lm = NGramLm::train(&seqs, tokenizer.vocab_size(), order, lambdas)?;
        Ok(Self::new(lm, tokenizer))
    }
}

impl LmScorer for NGramScorer {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            scorable: true,
            trainable: true,
            generative: false,
        }
    }

    fn logprob(&self, text: &str) -> Result<LogProb, LmError> {
        let mut ids = self.tokenizer.encode(text);
        if self.skip_newlines {
            ids.retain(|&t| t != NEWLINE_ID);
        }
        Ok(self.lm.logprob_ids(&ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // a = 0, b = 1.
    fn abab() -> Vec<Vec<u32>> {
        vec![vec![0, 1, 0, 1]]
    }

    #[test]
    fn pure_bigram_hand_counts() {
        let lm = NGramLm::train(&abab(), 2, 2, &[0.0, 1.0]).unwrap();
        assert_eq!(lm.prob(&[0], 1), 1.0);
        assert_eq!(lm.prob(&[1], 0), 1.0);
        // First position has no context, so all weight falls to the unigram.
        assert_eq!(lm.prob(&[], 0), 0.5);
        let lp = lm.logprob_ids(&[0, 1, 0, 1]);
        let ppl = lp.perplexity().unwrap();
        assert!((ppl - 2f64.powf(0.25)).abs() < 1e-12);
    }

    #[test]
    fn pure_unigram_is_corpus_frequency() {
        let lm = NGramLm::train(&[vec![0, 0, 0, 1]], 2, 2, &[1.0, 0.0]).unwrap();
        assert_eq!(lm.prob(&[0], 0), 0.75);
        assert_eq!(lm.prob(&[1], 1), 0.25);
    }

    #[test]
    fn unseen_token_gets_floor_times_unigram_share() {
        let lm = NGramLm::train(&abab(), 4, 2, &[0.4, 0.6]).unwrap();
        // Context [0] is seen but never followed by 3.
        assert!((lm.prob(&[0], 3) - 0.4 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn bad_lambdas_are_rejected() {
        assert!(NGramLm::train(&abab(), 2, 2, &[0.5, 0.6]).is_err());
        assert!(NGramLm::train(&abab(), 2, 2, &[1.0]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let lm = NGramLm::train(&[vec![3, 1, 4, 1, 5, 9, 2, 6]], 10, 3, &[0.2, 0.3, 0.5]).unwrap();
        let mut buf = Vec::new();
        lm.write_to(&mut buf).unwrap();
        let back = NGramLm::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, lm);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    proptest! {
        #[test]
        fn every_context_is_normalized(
            seqs in prop::collection::vec(prop::collection::vec(0u32..6, 1..12), 1..5),
            hist in prop::collection::vec(0u32..6, 0..4),
            l in 0.0f64..1.0,
        ) {
            let lm = NGramLm::train(&seqs, 6, 3, &[l * 0.5, l * 0.5, 1.0 - l]).unwrap();
            let total: f64 = (0..6).map(|t| lm.prob(&hist, t)).sum();
            prop_assert!((total - 1.0).abs() < 1e-9, "{}", total);
        }
    }
}
