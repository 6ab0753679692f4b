//! Neighbour retrieval strategies behind one interface.
//!
//! Every strategy excludes the query paragraph itself and returns neighbours
//! most-similar-first. The random strategy draws from a per-query stream
//! derived from `(seed, query id)`, so results do not depend on query order.

mod bm25;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bm25::{bm25_terms, Bm25Index, Bm25Params};

use crate::corpus::{Paragraph, ParagraphStore};
use crate::encoder::EncoderModel;
use crate::util::rng_for;
use crate::vecindex::{EmbeddingMatrix, ExactIndex, IvfIndex, VecIndexError};

pub const DEFAULT_K: usize = 20;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("strategy {strategy} needs {resource}")]
    MissingResource { strategy: Strategy, resource: &'static str },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("paragraph store is empty")]
    EmptyStore,
    #[error("unknown paragraph id {0}")]
    UnknownParagraph(u64),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error(transparent)]
    Index(#[from] VecIndexError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dump line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    DenseExact,
    DenseIvf,
    Bm25,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::DenseExact, Strategy::DenseIvf, Strategy::Bm25, Strategy::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::DenseExact => "dense_exact",
            Strategy::DenseIvf => "dense_ivf",
            Strategy::Bm25 => "bm25",
            Strategy::Random => "random",
        }
    }

    pub fn is_dense(self) -> bool {
        matches!(self, Strategy::DenseExact | Strategy::DenseIvf)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = RetrievalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" | "dense_exact" => Ok(Strategy::DenseExact),
            "dense_ivf" | "ivf" => Ok(Strategy::DenseIvf),
            "bm25" => Ok(Strategy::Bm25),
            "random" => Ok(Strategy::Random),
            other => Err(RetrievalError::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: u64,
    pub strategy: Strategy,
    /// Most similar first.
    pub neighbors: Vec<u64>,
    pub scores: Vec<f32>,
}

/// Borrowed resources; each strategy uses a subset.
#[derive(Clone, Copy, Default)]
pub struct RetrievalResources<'a> {
    /// Embeds query text. Without it, dense queries use the query's stored row.
    pub encoder: Option<&'a EncoderModel>,
    pub embeddings: Option<&'a EmbeddingMatrix>,
    pub exact: Option<&'a ExactIndex>,
    pub ivf: Option<&'a IvfIndex>,
    pub n_probe: usize,
    pub bm25: Option<&'a Bm25Index>,
    pub store: Option<&'a ParagraphStore>,
    pub seed: u64,
}

impl<'a> RetrievalResources<'a> {
    fn query_vector(&self, strategy: Strategy, query: &Paragraph) -> Result<Vec<f32>, RetrievalError> {
        if let Some(enc) = self.encoder {
            return Ok(enc.embed(&query.text));
        }
        let m = self
            .embeddings
            .or_else(|| self.exact.map(ExactIndex::matrix))
            .ok_or(RetrievalError::MissingResource {
                strategy,
                resource: "an encoder or stored embeddings",
            })?;
        let row = m
            .ids()
            .iter()
            .position(|&id| id == query.id)
            .ok_or(RetrievalError::UnknownParagraph(query.id))?;
        Ok(m.row(row).to_vec())
    }
}

pub fn retrieve(
    strategy: Strategy,
    query: &Paragraph,
    k: usize,
    res: &RetrievalResources<'_>,
) -> Result<RetrievalResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let missing = |resource| RetrievalError::MissingResource { strategy, resource };
    let (neighbors, scores) = match strategy {
        Strategy::DenseExact => {
            let idx = res.exact.ok_or(missing("an exact index"))?;
            let r = idx.search(&res.query_vector(strategy, query)?, k, &[query.id])?;
            (r.ids, r.scores)
        }
        Strategy::DenseIvf => {
            let idx = res.ivf.ok_or(missing("an IVF index"))?;
            let r = idx.search(&res.query_vector(strategy, query)?, k, res.n_probe, &[query.id])?;
            (r.ids, r.scores)
        }
        Strategy::Bm25 => {
            let idx = res.bm25.ok_or(missing("a BM25 index"))?;
            let hits = idx.top_k(&bm25_terms(&query.text), k, query.id);
            (hits.iter().map(|h| h.0).collect(), hits.iter().map(|h| h.1 as f32).collect())
        }
        Strategy::Random => {
            let store = res.store.ok_or(missing("a paragraph store"))?;
            let ids = random_neighbors(store, query.id, k, res.seed);
            let n = ids.len();
            (ids, vec![0.0; n])
        }
    };
    Ok(RetrievalResult {
        query_id: query.id,
        strategy,
        neighbors,
        scores,
    })
}

/// Uniform sample without replacement of up to `k` other paragraphs.
pub fn random_neighbors(store: &ParagraphStore, query_id: u64, k: usize, seed: u64) -> Vec<u64> {
    let ps = store.paragraphs();
    let Some(pos) = ps.iter().position(|p| p.id == query_id) else {
        return Vec::new();
    };
    let pool = ps.len() - 1;
    let mut rng = rng_for(seed, query_id);
    sample(&mut rng, pool, k.min(pool))
        .into_iter()
        .map(|i| ps[if i >= pos { i + 1 } else { i }].id)
        .collect()
}

/// Retrieve for every paragraph of the store, in ascending query id.
pub fn retrieve_all(
    strategy: Strategy,
    store: &ParagraphStore,
    k: usize,
    res: &RetrievalResources<'_>,
) -> Result<Vec<RetrievalResult>, RetrievalError> {
    let res = RetrievalResources {
        store: res.store.or(Some(store)),
        ..*res
    };
    store
        .paragraphs()
        .par_iter()
        .map(|p| retrieve(strategy, p, k, &res))
        .collect()
}

pub fn write_dump(results: &[RetrievalResult], path: &Path) -> Result<(), RetrievalError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in results {
        let line = serde_json::to_string(r).map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Vec<RetrievalResult>, RetrievalError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RetrievalError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
