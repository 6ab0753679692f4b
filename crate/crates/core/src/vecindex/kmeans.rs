//! Lloyd's k-means with seeded row initialization.

use rand::seq::index::sample;
use rayon::prelude::*;

use super::{sq_dist, EmbeddingMatrix, VecIndexError};
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub k_c: usize,
    pub d: usize,
    /// `k_c × d` row-major.
    pub centroids: Vec<f64>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

impl KMeansResult {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.d..(c + 1) * self.d]
    }
}

/// Nearest centroid by squared Euclidean distance, lowest index on ties.
pub(crate) fn nearest(row: &[f32], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(row, cent);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

pub fn kmeans(m: &EmbeddingMatrix, k_c: usize, iters: usize, seed: u64) -> Result<KMeansResult, VecIndexError> {
    let (n, d) = (m.n(), m.d());
    if k_c == 0 || k_c > n {
        return Err(VecIndexError::TooManyClusters { k_c, n });
    }
    let mut rng = rng_for(seed, 0);
    let mut picks = sample(&mut rng, n, k_c).into_vec();
    picks.sort_unstable();
    let mut centroids: Vec<f64> = picks
        .iter()
        .flat_map(|&i| m.row(i).iter().map(|&v| f64::from(v)))
        .collect();
    let mut objective = Vec::with_capacity(iters);

    for it in 0..iters {
        let assign: Vec<(usize, f64)> = (0..n).into_par_iter().map(|i| nearest(m.row(i), &centroids, d)).collect();
        objective.push(assign.iter().map(|a| a.1).sum());

        let mut sums = vec![0.0; k_c * d];
        let mut counts = vec![0usize; k_c];
        for (i, &(c, _)) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(m.row(i)) {
                *s += f64::from(v);
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k_c {
            let dst = &mut centroids[c * d..(c + 1) * d];
            if counts[c] > 0 {
                for (x, s) in dst.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *x = s / counts[c] as f64;
                }
                continue;
            }
            // Re-seed an empty cluster at the point farthest from its centroid.
            let far = (0..n)
                .filter(|&i| !taken[i])
                .max_by(|&a, &b| assign[a].1.total_cmp(&assign[b].1).then(b.cmp(&a)));
            if let Some(i) = far {
                taken[i] = true;
                for (x, &v) in dst.iter_mut().zip(m.row(i)) {
                    *x = f64::from(v);
                }
            }
        }
        log::trace!("kmeans iter {it} objective {}", objective[it]);
    }
    Ok(KMeansResult {
        k_c,
        d,
        centroids,
        objective,
    })
}
