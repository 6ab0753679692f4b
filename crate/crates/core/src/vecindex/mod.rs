//! Maximum-inner-product search over paragraph embeddings.
//!
//! [`ExactIndex`] scans every row. [`IvfIndex`] partitions rows with k-means
//! and scans only the lists whose centroids score highest against the query.
//! Scores are dot products accumulated in `f64` and reported as `f32`; ties
//! break by ascending id everywhere.

mod io;
mod ivf;
mod kmeans;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use thiserror::Error;

pub use io::{read_embeddings, sidecar_path, write_embeddings};
pub use ivf::{default_n_probe, default_n_lists, IvfIndex, IvfList};
pub use kmeans::{kmeans, KMeansResult};

pub const EMBEDDINGS_MAGIC: &[u8; 8] = b"PICLVEC1";
pub const IVF_MAGIC: &[u8; 8] = b"PICLIVF1";

#[derive(Debug, Error)]
pub enum VecIndexError {
    #[error("row {row} has dimension {found}, expected {expected}")]
    DimMismatch { row: usize, expected: usize, found: usize },
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("index needs at least one vector")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("n_probe must be in 1..={k_c}, got {n_probe}")]
    BadProbe { n_probe: usize, k_c: usize },
    #[error("cannot form {k_c} clusters from {n} vectors")]
    TooManyClusters { k_c: usize, n: usize },
    #[error("exact result is empty")]
    EmptyExact,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed sidecar line {line}: {message}")]
    Sidecar { line: usize, message: String },
}

/// `n × d` row-major `f32` embeddings with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    d: usize,
    data: Vec<f32>,
    ids: Vec<u64>,
}

impl EmbeddingMatrix {
    pub fn new(d: usize, data: Vec<f32>, ids: Vec<u64>) -> Result<Self, VecIndexError> {
        if d == 0 || data.len() != d * ids.len() {
            return Err(VecIndexError::DimMismatch {
                row: 0,
                expected: d,
                found: if ids.is_empty() { data.len() } else { data.len() / ids.len() },
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(VecIndexError::DuplicateId(id));
            }
        }
        Ok(Self { d, data, ids })
    }

    pub fn from_rows(rows: Vec<Vec<f32>>, ids: Vec<u64>) -> Result<Self, VecIndexError> {
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * d);
        for (row, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(VecIndexError::DimMismatch {
                    row,
                    expected: d,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        if rows.len() != ids.len() {
            return Err(VecIndexError::DimMismatch {
                row: rows.len().min(ids.len()),
                expected: d,
                found: 0,
            });
        }
        Self::new(d.max(1), data, ids)
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Dot product accumulated in double precision.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

pub(crate) fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let t = f64::from(x) - y;
            t * t
        })
        .sum()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchResult {
    pub ids: Vec<u64>,
    pub scores: Vec<f32>,
}

impl SearchResult {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Candidate ordered so that the heap's maximum is the worst kept entry.
#[derive(Debug, Clone, Copy)]
struct Cand {
    score: f32,
    id: u64,
}

impl Cand {
    /// `Less` means `self` ranks ahead of `other`.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then(self.id.cmp(&other.id))
    }
}

impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

/// Bounded top-k collector ordered by (score desc, id asc).
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Cand>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    pub(crate) fn push(&mut self, id: u64, score: f32) {
        // Adding 0.0 folds -0.0 into 0.0 so signed zeros tie.
        let c = Cand { score: score + 0.0, id };
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(worst) = self.heap.peek() {
            if c < *worst {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    pub(crate) fn finish(self) -> SearchResult {
        let sorted = self.heap.into_sorted_vec();
        SearchResult {
            ids: sorted.iter().map(|c| c.id).collect(),
            scores: sorted.iter().map(|c| c.score).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactIndex {
    matrix: EmbeddingMatrix,
}

impl ExactIndex {
    pub fn build(matrix: EmbeddingMatrix) -> Result<Self, VecIndexError> {
        if matrix.is_empty() {
            return Err(VecIndexError::Empty);
        }
        Ok(Self { matrix })
    }

    pub fn len(&self) -> usize {
        self.matrix.n()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    pub fn search(&self, query: &[f32], k: usize, exclude: &[u64]) -> Result<SearchResult, VecIndexError> {
        if k == 0 {
            return Err(VecIndexError::ZeroK);
        }
        check_query(query, self.matrix.d())?;
        let mut top = TopK::new(k);
        for (i, &id) in self.matrix.ids().iter().enumerate() {
            if exclude.contains(&id) {
                continue;
            }
            top.push(id, dot(query, self.matrix.row(i)) as f32);
        }
        Ok(top.finish())
    }
}

pub(crate) fn check_query(query: &[f32], d: usize) -> Result<(), VecIndexError> {
    if query.len() != d {
        return Err(VecIndexError::DimMismatch {
            row: 0,
            expected: d,
            found: query.len(),
        });
    }
    Ok(())
}

pub fn build_exact(matrix: EmbeddingMatrix) -> Result<ExactIndex, VecIndexError> {
    ExactIndex::build(matrix)
}

/// `|ids(approx) ∩ ids(exact)| / |ids(exact)|`.
pub fn recall_at_k(approx: &SearchResult, exact: &SearchResult) -> Result<f64, VecIndexError> {
    if exact.is_empty() {
        return Err(VecIndexError::EmptyExact);
    }
    let truth: HashSet<u64> = exact.ids.iter().copied().collect();
    let hit = approx.ids.iter().filter(|id| truth.contains(id)).count();
    Ok(hit as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> ExactIndex {
        let m = EmbeddingMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]], vec![0, 1, 2]).unwrap();
        ExactIndex::build(m).unwrap()
    }

    #[test]
    fn hand_dot_products() {
        let r = toy().search(&[1.0, 0.0], 2, &[]).unwrap();
        assert_eq!(r.ids, vec![0, 2]);
        assert_eq!(r.scores, vec![1.0, 0.5]);
    }

    #[test]
    fn excluded_id_is_never_returned() {
        let r = toy().search(&[1.0, 0.0], 3, &[0]).unwrap();
        assert!(!r.ids.contains(&0));
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let m = EmbeddingMatrix::from_rows(vec![vec![1.0]; 4], vec![9, 3, 7, 1]).unwrap();
        let r = ExactIndex::build(m).unwrap().search(&[1.0], 3, &[]).unwrap();
        assert_eq!(r.ids, vec![1, 3, 7]);
    }

    #[test]
    fn singleton_and_validation() {
        let m = EmbeddingMatrix::from_rows(vec![vec![2.0, 1.0]], vec![5]).unwrap();
        let idx = ExactIndex::build(m).unwrap();
        assert_eq!(idx.search(&[1.0, 1.0], 4, &[]).unwrap().ids, vec![5]);
        assert!(matches!(idx.search(&[1.0, 1.0], 0, &[]), Err(VecIndexError::ZeroK)));
        assert!(matches!(
            EmbeddingMatrix::from_rows(vec![vec![1.0], vec![2.0]], vec![1, 1]),
            Err(VecIndexError::DuplicateId(1))
        ));
        assert!(matches!(
            EmbeddingMatrix::from_rows(vec![vec![1.0], vec![2.0, 3.0]], vec![1, 2]),
            Err(VecIndexError::DimMismatch { row: 1, .. })
        ));
    }

    #[test]
    fn recall_arithmetic() {
        let ex = SearchResult {
            ids: (0..10).collect(),
            scores: vec![0.0; 10],
        };
        let half = SearchResult {
            ids: (5..15).collect(),
            scores: vec![0.0; 10],
        };
        let none = SearchResult {
            ids: (20..30).collect(),
            scores: vec![0.0; 10],
        };
        assert_eq!(recall_at_k(&ex, &ex).unwrap(), 1.0);
        assert_eq!(recall_at_k(&half, &ex).unwrap(), 0.5);
        assert_eq!(recall_at_k(&none, &ex).unwrap(), 0.0);
        assert!(recall_at_k(&ex, &SearchResult::default()).is_err());
    }

    proptest! {
        #[test]
        fn search_matches_sort_oracle(
            rows in prop::collection::vec(prop::collection::vec(-4i8..4, 3), 1..40),
            q in prop::collection::vec(-4i8..4, 3),
            k in 1usize..10,
        ) {
            let n = rows.len();
            let rows: Vec<Vec<f32>> = rows.into_iter().map(|r| r.into_iter().map(f32::from).collect()).collect();
            let q: Vec<f32> = q.into_iter().map(f32::from).collect();
            let idx = ExactIndex::build(EmbeddingMatrix::from_rows(rows.clone(), (0..n as u64).collect()).unwrap()).unwrap();
            let got = idx.search(&q, k, &[]).unwrap();
            let mut oracle: Vec<(f32, u64)> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| (r.iter().zip(&q).map(|(a, b)| a * b).sum::<f32>(), i as u64))
                .collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            oracle.truncate(k);
            prop_assert_eq!(got.ids, oracle.iter().map(|o| o.1).collect::<Vec<_>>());
            prop_assert!(got.scores.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
