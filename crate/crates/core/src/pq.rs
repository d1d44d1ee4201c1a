//! Product quantization of attention keys: codebook construction, encoding,
//! asymmetric inner-product scoring and approximate top-k.
//!
//! A key of width `d_h` is split into `m` contiguous partitions of width
//! `d_m = d_h / m`. Each partition is clustered into `2^b` centroids, and a
//! token is stored as `m` centroid indices. Scoring a query builds an
//! `m x 2^b` table of query-to-centroid inner products once, then sums one
//! table entry per partition for every token.

use std::collections::HashSet;
use std::io::{Read, Write};

use num_rational::Ratio;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kmeans::{assign_nearest, kmeans_fit, squared_distance};
use crate::select;
use crate::tensor::{read_u16_grid, write_u16_grid, TensorF32};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PqConfig {
    /// Number of partitions.
    pub m: usize,
    /// Bits per code.
    pub b: u32,
}

impl PqConfig {
    pub fn new(m: usize, b: u32) -> Self {
        Self { m, b }
    }

    pub fn n_clusters(&self) -> usize {
        1usize << self.b
    }

    pub fn sub_dim(&self, head_dim: usize) -> usize {
        head_dim / self.m
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if self.m == 0 || head_dim == 0 || !head_dim.is_multiple_of(self.m) {
            return Err(Error::DimensionMismatch(format!(
                "head_dim {head_dim} is not divisible into {} partitions",
                self.m
            )));
        }
        if !(1..=16).contains(&self.b) {
            return Err(Error::DimensionMismatch(format!(
                "b = {} outside 1..=16",
                self.b
            )));
        }
        Ok(())
    }
}

/// PQ-code bytes over FP16 key bytes, per token and kv head: `m*b / (16*d_h)`.
pub fn codes_memory_ratio(cfg: &PqConfig, head_dim: usize) -> Ratio<u64> {
    Ratio::new(cfg.m as u64 * cfg.b as u64, 16 * head_dim as u64)
}

/// Codebook plus code grid for one (layer, kv head).
#[derive(Debug, Clone, PartialEq)]
pub struct PqIndex {
    cfg: PqConfig,
    head_dim: usize,
    /// `[m][2^b][d_m]`, row-major.
    centroids: Vec<f32>,
    /// `[s][m]`, row-major.
    codes: Vec<u16>,
}

impl PqIndex {
    pub fn config(&self) -> PqConfig {
        self.cfg
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.cfg.m
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, partition: usize, c: usize) -> &[f32] {
        let d_m = self.cfg.sub_dim(self.head_dim);
        let start = (partition * self.cfg.n_clusters() + c) * d_m;
        &self.centroids[start..start + d_m]
    }

    pub fn code(&self, i: usize) -> &[u16] {
        &self.codes[i * self.cfg.m..(i + 1) * self.cfg.m]
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    /// Builds an index from explicit parts, validating every code.
    pub fn from_parts(
        cfg: PqConfig,
        head_dim: usize,
        centroids: Vec<f32>,
        codes: Vec<u16>,
    ) -> Result<Self> {
        cfg.validate(head_dim)?;
        let want = cfg.m * cfg.n_clusters() * cfg.sub_dim(head_dim);
        if centroids.len() != want {
            return Err(Error::DimensionMismatch(format!(
                "expected {want} centroid values, got {}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite centroid".into()));
        }
        if !codes.len().is_multiple_of(cfg.m) {
            return Err(Error::DimensionMismatch(format!(
                "{} codes do not form rows of {}",
                codes.len(),
                cfg.m
            )));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c as usize >= cfg.n_clusters()) {
            return Err(Error::CodeOutOfRange {
                code: bad as usize,
                bits: cfg.b,
            });
        }
        Ok(Self {
            cfg,
            head_dim,
            centroids,
            codes,
        })
    }

    pub fn encode_one(&self, key: &[f32]) -> Result<Vec<u16>> {
        if key.len() != self.head_dim {
            return Err(Error::DimensionMismatch(format!(
                "key width {} != head_dim {}",
                key.len(),
                self.head_dim
            )));
        }
        let d_m = self.cfg.sub_dim(self.head_dim);
        let per_partition = self.cfg.n_clusters() * d_m;
        (0..self.cfg.m)
            .map(|j| {
                let book = &self.centroids[j * per_partition..(j + 1) * per_partition];
                let sub = &key[j * d_m..(j + 1) * d_m];
                Ok(assign_nearest(sub, book, d_m)?[0] as u16)
            })
            .collect()
    }

    pub fn append_code(&mut self, code: &[u16]) -> Result<()> {
        if code.len() != self.cfg.m {
            return Err(Error::DimensionMismatch(format!(
                "code row has {} entries, expected {}",
                code.len(),
                self.cfg.m
            )));
        }
        if let Some(&bad) = code.iter().find(|&&c| c as usize >= self.cfg.n_clusters()) {
            return Err(Error::CodeOutOfRange {
                code: bad as usize,
                bits: self.cfg.b,
            });
        }
        self.codes.extend_from_slice(code);
        Ok(())
    }

    /// `[m][2^b]` table of inner products between query partitions and centroids.
    fn score_table(&self, query: &[f32]) -> Vec<f32> {
        let d_m = self.cfg.sub_dim(self.head_dim);
        let nc = self.cfg.n_clusters();
        let mut table = Vec::with_capacity(self.cfg.m * nc);
        for j in 0..self.cfg.m {
            let q = &query[j * d_m..(j + 1) * d_m];
            for c in 0..nc {
                let dot: f64 = q
                    .iter()
                    .zip(self.centroid(j, c))
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                table.push(dot as f32);
            }
        }
        table
    }

    fn gather(&self, table: &[f32]) -> Vec<f32> {
        let nc = self.cfg.n_clusters();
        self.codes
            .chunks_exact(self.cfg.m)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &c)| table[j * nc + c as usize])
                    .sum()
            })
            .collect()
    }

    fn check_query(&self, query: &[f32]) -> Result<()> {
        if query.len() != self.head_dim {
            return Err(Error::DimensionMismatch(format!(
                "query width {} != head_dim {}",
                query.len(),
                self.head_dim
            )));
        }
        Ok(())
    }

    /// Approximate inner products `<query, reconstruct(i)>` for every token.
    pub fn score(&self, query: &[f32]) -> Result<Vec<f32>> {
        self.check_query(query)?;
        Ok(self.gather(&self.score_table(query)))
    }

    /// Scores for a GQA group: the per-head tables are summed before the
    /// gather, so the result equals scoring the summed query.
    pub fn score_gqa(&self, queries: &[f32], group_size: usize) -> Result<Vec<f32>> {
        if group_size == 0 || queries.len() != group_size * self.head_dim {
            return Err(Error::DimensionMismatch(format!(
                "{} query values do not form {group_size} heads of width {}",
                queries.len(),
                self.head_dim
            )));
        }
        let mut table = vec![0.0f32; self.cfg.m * self.cfg.n_clusters()];
        for q in queries.chunks_exact(self.head_dim) {
            for (t, v) in table.iter_mut().zip(self.score_table(q)) {
                *t += v;
            }
        }
        Ok(self.gather(&table))
    }

    pub fn reconstruct(&self, i: usize) -> Result<Vec<f32>> {
        if i >= self.len() {
            return Err(Error::OutOfRange {
                index: i,
                len: self.len(),
            });
        }
        let mut out = Vec::with_capacity(self.head_dim);
        for (j, &c) in self.code(i).iter().enumerate() {
            out.extend_from_slice(self.centroid(j, c as usize));
        }
        Ok(out)
    }

    /// Sum over tokens of the squared distance between each key partition
    /// and its assigned centroid.
    pub fn quantization_error(&self, keys: &[f32]) -> Result<f64> {
        if keys.len() != self.len() * self.head_dim {
            return Err(Error::DimensionMismatch(
                "keys do not match index length".into(),
            ));
        }
        let d_m = self.cfg.sub_dim(self.head_dim);
        let mut total = 0.0;
        for (i, key) in keys.chunks_exact(self.head_dim).enumerate() {
            for (j, &c) in self.code(i).iter().enumerate() {
                total +=
                    squared_distance(&key[j * d_m..(j + 1) * d_m], self.centroid(j, c as usize))
                        as f64;
            }
        }
        Ok(total)
    }

    /// Writes the centroid tensor `[m, 2^b, d_m]` followed by the u16 code grid `[s, m]`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let d_m = self.cfg.sub_dim(self.head_dim);
        let cents = TensorF32::new(
            vec![self.cfg.m, self.cfg.n_clusters(), d_m],
            self.centroids.clone(),
        )?;
        cents.write_to(w)?;
        write_u16_grid(w, &[self.len(), self.cfg.m], &self.codes)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let cents = TensorF32::read_from(r)?;
        let [m, nc, d_m] = cents.dims() else {
            return Err(Error::Format(format!(
                "centroid tensor has dims {:?}",
                cents.dims()
            )));
        };
        let (m, nc, d_m) = (*m, *nc, *d_m);
        if !nc.is_power_of_two() {
            return Err(Error::Format(format!(
                "{nc} centroids is not a power of two"
            )));
        }
        let cfg = PqConfig::new(m, nc.trailing_zeros());
        let (dims, codes) = read_u16_grid(r)?;
        if dims.len() != 2 || dims[1] != m {
            return Err(Error::Format(format!(
                "code grid dims {dims:?} do not match m = {m}"
            )));
        }
        Self::from_parts(cfg, m * d_m, cents.into_data(), codes)
    }
}

/// Per-partition K-Means inertias of a freshly built index.
#[derive(Debug, Clone)]
pub struct PqBuild {
    pub index: PqIndex,
    pub inertias: Vec<f64>,
    pub iterations: Vec<usize>,
}

/// Partition seeds are derived from `seed` so partitions cluster independently.
fn partition_seed(seed: u64, partition: usize) -> u64 {
    seed ^ (partition as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn pq_construct_traced(
    keys: &[f32],
    head_dim: usize,
    cfg: PqConfig,
    max_iter: usize,
    seed: u64,
) -> Result<PqBuild> {
    cfg.validate(head_dim)?;
    if !keys.len().is_multiple_of(head_dim) {
        return Err(Error::DimensionMismatch(format!(
            "{} key values do not form rows of {head_dim}",
            keys.len()
        )));
    }
    let s = keys.len() / head_dim;
    if s == 0 {
        return Err(Error::EmptyInput("pq keys"));
    }
    let d_m = cfg.sub_dim(head_dim);

    let fits = (0..cfg.m)
        .into_par_iter()
        .map(|j| {
            let slice: Vec<f32> = keys
                .chunks_exact(head_dim)
                .flat_map(|k| k[j * d_m..(j + 1) * d_m].iter().copied())
                .collect();
            kmeans_fit(
                &slice,
                d_m,
                cfg.n_clusters(),
                max_iter,
                partition_seed(seed, j),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut centroids = Vec::with_capacity(cfg.m * cfg.n_clusters() * d_m);
    for fit in &fits {
        centroids.extend_from_slice(&fit.centroids);
    }
    let mut codes = vec![0u16; s * cfg.m];
    for (j, fit) in fits.iter().enumerate() {
        for (i, &a) in fit.assignments.iter().enumerate() {
            codes[i * cfg.m + j] = a as u16;
        }
    }
    Ok(PqBuild {
        index: PqIndex {
            cfg,
            head_dim,
            centroids,
            codes,
        },
        inertias: fits.iter().map(|f| f.inertia()).collect(),
        iterations: fits.iter().map(|f| f.iterations_run).collect(),
    })
}

pub fn pq_construct(
    keys: &[f32],
    head_dim: usize,
    cfg: PqConfig,
    max_iter: usize,
    seed: u64,
) -> Result<PqIndex> {
    pq_construct_traced(keys, head_dim, cfg, max_iter, seed).map(|b| b.index)
}

/// Top-k over approximate scores; see [`select::top_k`] for ordering.
pub fn approx_topk(scores: &[f32], k: usize, excluded: &HashSet<usize>) -> Result<Vec<usize>> {
    select::top_k(scores, k, excluded)
}
