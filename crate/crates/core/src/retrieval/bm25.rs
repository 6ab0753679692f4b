//! Okapi BM25 over lowercased tokenizer pieces.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::RetrievalError;
use crate::corpus::{split_pieces, ParagraphStore, NEWLINE_TOKEN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Lowercased pieces of `text`, newlines excluded.
pub fn bm25_terms(text: &str) -> Vec<String> {
    split_pieces(text)
        .into_iter()
        .filter(|p| *p != NEWLINE_TOKEN)
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    /// term → (paragraph id, term frequency), sorted by id.
    postings: BTreeMap<String, Vec<(u64, u32)>>,
    doc_len: BTreeMap<u64, u32>,
    avgdl: f64,
    n: u64,
    params: Bm25Params,
}

impl Bm25Index {
    pub fn build(store: &ParagraphStore, params: Bm25Params) -> Result<Self, RetrievalError> {
        if store.is_empty() {
            return Err(RetrievalError::EmptyStore);
        }
        let mut postings: BTreeMap<String, Vec<(u64, u32)>> = BTreeMap::new();
        let mut doc_len = BTreeMap::new();
        let mut total = 0u64;
        for p in store.paragraphs() {
            let terms = bm25_terms(&p.text);
            total += terms.len() as u64;
            doc_len.insert(p.id, terms.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push((p.id, c));
            }
        }
        for list in postings.values_mut() {
            list.sort_unstable_by_key(|e| e.0);
        }
        let n = store.len() as u64;
        Ok(Self {
            postings,
            doc_len,
            avgdl: total as f64 / n as f64,
            n,
            params,
        })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn postings(&self, term: &str) -> &[(u64, u32)] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    /// `ln((N − df + 0.5)/(df + 0.5) + 1)`.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.postings(term).len() as f64;
        let n = self.n as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_score(&self, idf: f64, tf: u32, len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let norm = if self.avgdl > 0.0 { f64::from(len) / self.avgdl } else { 0.0 };
        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm))
    }

    fn distinct(query_terms: &[String]) -> BTreeSet<&str> {
        query_terms.iter().map(String::as_str).collect()
    }

    /// Score of one paragraph, summed over the distinct query terms.
    pub fn score(&self, query_terms: &[String], doc: u64) -> Result<f64, RetrievalError> {
        let len = *self.doc_len.get(&doc).ok_or(RetrievalError::UnknownParagraph(doc))?;
        let mut s = 0.0;
        for t in Self::distinct(query_terms) {
            let list = self.postings(t);
            if let Ok(pos) = list.binary_search_by_key(&doc, |e| e.0) {
                s += self.term_score(self.idf(t), list[pos].1, len);
            }
        }
        Ok(s)
    }

    /// Top-k paragraphs by score, ties by ascending id. Paragraphs with no
    /// matching term score 0 and fill any remaining slots.
    pub fn top_k(&self, query_terms: &[String], k: usize, exclude: u64) -> Vec<(u64, f64)> {
        let mut acc: BTreeMap<u64, f64> = BTreeMap::new();
        for t in Self::distinct(query_terms) {
            let idf = self.idf(t);
            for &(id, tf) in self.postings(t) {
                if id != exclude {
                    *acc.entry(id).or_insert(0.0) += self.term_score(idf, tf, self.doc_len[&id]);
                }
            }
        }
        let mut hits: Vec<(u64, f64)> = acc.into_iter().collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(k);
        if hits.len() < k {
            let have: BTreeSet<u64> = hits.iter().map(|h| h.0).collect();
            let fill: Vec<(u64, f64)> = self
                .doc_len
                .keys()
                .filter(|&&id| id != exclude && !have.contains(&id))
                .take(k - hits.len())
                .map(|&id| (id, 0.0))
                .collect();
            hits.extend(fill);
        }
        hits
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Paragraph;
    use crate::util::sha256_hex;

    fn store(texts: &[&str]) -> ParagraphStore {
        let ps = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Paragraph {
                id: i as u64,
                doc_id: "d".into(),
                ordinal: i as u32,
                text: (*t).into(),
                token_count: crate::corpus::count_tokens(t) as u32,
            })
            .collect();
        ParagraphStore::from_paragraphs(ps, 1, 0)
    }

    fn terms(q: &str) -> Vec<String> {
        bm25_terms(q)
    }

    #[test]
    fn toy_postings_and_avgdl() {
        let idx = Bm25Index::build(&store(&["a b", "a", "c"]), Bm25Params::default()).unwrap();
        assert_eq!(idx.postings("a"), &[(0, 1), (1, 1)]);
        assert!((idx.avgdl() - 4.0 / 3.0).abs() < 1e-15);
        assert!(idx.postings("zzz").is_empty());
    }

    #[test]
    fn toy_scores_match_hand_computation() {
        let idx = Bm25Index::build(&store(&["a b", "a", "c"]), Bm25Params::default()).unwrap();
        // df(a) = 2, N = 3: idf = ln(1.5/2.5 + 1) = ln 1.6.
        let idf = 1.6f64.ln();
        let avgdl = 4.0 / 3.0;
        let doc0 = idf * 2.2 / (1.0 + 1.2 * (0.25 + 0.75 * 2.0 / avgdl));
        let doc1 = idf * 2.2 / (1.0 + 1.2 * (0.25 + 0.75 * 1.0 / avgdl));
        assert!((idx.score(&terms("a"), 0).unwrap() - doc0).abs() < 1e-12);
        assert!((idx.score(&terms("a"), 1).unwrap() - doc1).abs() < 1e-12);
        assert_eq!(idx.score(&terms("a"), 2).unwrap(), 0.0);
        assert!(doc1 > doc0);
    }

    #[test]
    fn unmatched_query_scores_zero() {
        let idx = Bm25Index::build(&store(&["a b", "a", "c"]), Bm25Params::default()).unwrap();
        assert_eq!(idx.score(&terms("q r"), 0).unwrap(), 0.0);
        assert!(matches!(idx.score(&terms("a"), 9), Err(RetrievalError::UnknownParagraph(9))));
    }

    #[test]
    fn duplicate_contents_score_equally() {
        let idx = Bm25Index::build(&store(&["x y", "z", "x y"]), Bm25Params::default()).unwrap();
        assert_eq!(idx.score(&terms("x"), 0).unwrap(), idx.score(&terms("x"), 2).unwrap());
    }

    #[test]
    fn top_k_fills_with_zero_scores_by_id() {
        let idx = Bm25Index::build(&store(&["a b", "a", "c", "d"]), Bm25Params::default()).unwrap();
        let top = idx.top_k(&terms("a"), 3, 1);
        assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![0, 2, 3]);
        assert_eq!(top[1].1, 0.0);
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let s = store(&["the cat sat", "a dog ran", "the dog sat"]);
        let a = Bm25Index::build(&s, Bm25Params::default()).unwrap().to_json().unwrap();
        let b = Bm25Index::build(&s, Bm25Params::default()).unwrap().to_json().unwrap();
        assert_eq!(sha256_hex(a.as_bytes()), sha256_hex(b.as_bytes()));
    }

    #[test]
    fn empty_store_is_rejected() {
        assert!(matches!(
            Bm25Index::build(&store(&[]), Bm25Params::default()),
            Err(RetrievalError::EmptyStore)
        ));
    }
}
