//! Inverted-file index over a k-means coarse quantizer.

use std::io::{Read, Write};

use rayon::prelude::*;

use super::kmeans::{kmeans, nearest};
use super::{check_query, dot, EmbeddingMatrix, SearchResult, TopK, VecIndexError, IVF_MAGIC};
use crate::util::{expect_magic, read_f32, read_u32, read_u64, write_f32, write_u32, write_u64};

/// `⌈√n⌉`.
pub fn default_n_lists(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).max(1)
}

/// `⌈k_c / 10⌉`.
pub fn default_n_probe(k_c: usize) -> usize {
    k_c.div_ceil(10).max(1)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IvfList {
    pub ids: Vec<u64>,
    /// `ids.len() × d` row-major.
    pub vectors: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    d: usize,
    centroids: Vec<f32>,
    lists: Vec<IvfList>,
    iters: u32,
    seed: u64,
}

impl IvfIndex {
    /// Cluster with k-means, then file each vector under its nearest stored
    /// centroid.
    pub fn build(m: &EmbeddingMatrix, k_c: usize, iters: usize, seed: u64) -> Result<Self, VecIndexError> {
        if m.is_empty() {
            return Err(VecIndexError::Empty);
        }
        let km = kmeans(m, k_c, iters, seed)?;
        let d = m.d();
        let centroids: Vec<f32> = km.centroids.iter().map(|&v| v as f32).collect();
        let cent64: Vec<f64> = centroids.iter().map(|&v| f64::from(v)).collect();
        let assign: Vec<usize> = (0..m.n()).into_par_iter().map(|i| nearest(m.row(i), &cent64, d).0).collect();
        let mut lists = vec![IvfList::default(); k_c];
        for (i, &c) in assign.iter().enumerate() {
            lists[c].ids.push(m.ids()[i]);
            lists[c].vectors.extend_from_slice(m.row(i));
        }
        Ok(Self {
            d,
            centroids,
            lists,
            iters: iters as u32,
            seed,
        })
    }

    pub fn k_c(&self) -> usize {
        self.lists.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(|l| l.ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lists(&self) -> &[IvfList] {
        &self.lists
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.d..(c + 1) * self.d]
    }

    pub fn kmeans_meta(&self) -> (u32, u64) {
        (self.iters, self.seed)
    }

    /// Lists ranked by centroid dot product, best first.
    pub fn probe_order(&self, query: &[f32]) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = (0..self.k_c()).map(|c| (dot(query, self.centroid(c)), c)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().map(|s| s.1).collect()
    }

    pub fn search(&self, query: &[f32], k: usize, n_probe: usize, exclude: &[u64]) -> Result<SearchResult, VecIndexError> {
        if k == 0 {
            return Err(VecIndexError::ZeroK);
        }
        if n_probe == 0 || n_probe > self.k_c() {
            return Err(VecIndexError::BadProbe {
                n_probe,
                k_c: self.k_c(),
            });
        }
        check_query(query, self.d)?;
        let mut top = TopK::new(k);
        for c in self.probe_order(query).into_iter().take(n_probe) {
            let list = &self.lists[c];
            for (j, &id) in list.ids.iter().enumerate() {
                if exclude.contains(&id) {
                    continue;
                }
                top.push(id, dot(query, &list.vectors[j * self.d..(j + 1) * self.d]) as f32);
            }
        }
        Ok(top.finish())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(IVF_MAGIC)?;
        write_u32(w, self.k_c() as u32)?;
        write_u32(w, self.d as u32)?;
        write_u32(w, self.iters)?;
        write_u64(w, self.seed)?;
        for &v in &self.centroids {
            write_f32(w, v)?;
        }
        for l in &self.lists {
            write_u32(w, l.ids.len() as u32)?;
            for &id in &l.ids {
                write_u64(w, id)?;
            }
            for &v in &l.vectors {
                write_f32(w, v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, VecIndexError> {
        expect_magic(r, IVF_MAGIC)?;
        let k_c = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        let iters = read_u32(r)?;
        let seed = read_u64(r)?;
        let mut centroids = Vec::with_capacity(k_c * d);
        for _ in 0..k_c * d {
            centroids.push(read_f32(r)?);
        }
        let mut lists = Vec::with_capacity(k_c);
        for _ in 0..k_c {
            let len = read_u32(r)? as usize;
            let mut l = IvfList {
                ids: Vec::with_capacity(len),
                vectors: Vec::with_capacity(len * d),
            };
            for _ in 0..len {
                l.ids.push(read_u64(r)?);
            }
            for _ in 0..len * d {
                l.vectors.push(read_f32(r)?);
            }
            lists.push(l);
        }
        Ok(Self {
            d,
            centroids,
            lists,
            iters,
            seed,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), VecIndexError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, VecIndexError> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
