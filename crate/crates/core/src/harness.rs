//! Synthetic workloads and the recall / end-to-end experiments behind the CLI.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::attention::{exact_topk, full_attention, relative_error, selective_attention};
use crate::error::{Error, Result};
use crate::kv_store::{CacheConfig, KvEntry, KvStore};
use crate::pq::{approx_topk, pq_construct, PqConfig};
use crate::sched::{
    simulate_decode_step, simulate_tt2t, t_max, ClusteringSample, ComputeSample, CostModel,
    PipelineConfig,
};
use crate::shape::{ModelShape, SegmentConfig};

/// Largest exact score of the power-law generator (rank 1).
const POWERLAW_TOP_SCORE: f32 = 8.0;
/// Per-head deviation of group queries from the shared direction.
const GROUP_QUERY_JITTER: f32 = 0.02;
/// Per-step drift of decode queries.
const DECODE_QUERY_DRIFT: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Generator {
    /// Keys drawn around `n_components` standard-normal centers with
    /// per-coordinate standard deviation `spread`.
    GaussianMixture { n_components: usize, spread: f32 },
    /// Exact scores against the group's mean query follow
    /// `C / rank^zipf_exponent` over a random permutation of tokens.
    Powerlaw { zipf_exponent: f32 },
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::GaussianMixture {
                n_components,
                spread,
            } => {
                write!(f, "gaussian_mixture({n_components},{spread})")
            }
            Self::Powerlaw { zipf_exponent } => write!(f, "powerlaw({zipf_exponent})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadSpec {
    pub s: usize,
    pub head_dim: usize,
    pub num_kv_heads: usize,
    pub group_size: usize,
    pub generator: Generator,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.head_dim == 0 || self.num_kv_heads == 0 || self.group_size == 0 {
            return Err(Error::InvalidSpec(
                "s, head_dim, kv heads and group size must be >= 1".into(),
            ));
        }
        match self.generator {
            Generator::GaussianMixture {
                n_components,
                spread,
            } => {
                if n_components == 0 {
                    return Err(Error::InvalidSpec("n_components must be >= 1".into()));
                }
                if !(spread.is_finite() && spread >= 0.0) {
                    return Err(Error::InvalidSpec(format!("spread {spread} must be >= 0")));
                }
            }
            Generator::Powerlaw { zipf_exponent } => {
                if !(zipf_exponent.is_finite() && zipf_exponent > 0.0) {
                    return Err(Error::InvalidSpec(format!(
                        "zipf exponent {zipf_exponent} must be > 0"
                    )));
                }
                if self.head_dim < 2 {
                    return Err(Error::InvalidSpec(
                        "powerlaw keys need head_dim >= 2".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn check_segments(&self, seg: &SegmentConfig) -> Result<()> {
        if self.s < seg.pinned() {
            return Err(Error::InvalidSpec(format!(
                "s = {} is shorter than n_init + n_local = {}",
                self.s,
                seg.pinned()
            )));
        }
        Ok(())
    }
}

/// Tensors for one kv head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadData {
    /// `[s, d_h]`
    pub keys: Vec<f32>,
    /// `[s, d_h]`
    pub values: Vec<f32>,
    /// `[g, d_h]`
    pub queries: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub spec: WorkloadSpec,
    pub heads: Vec<HeadData>,
    /// Per-head query anchor; decode keys in power-law mode align with it.
    anchors: Vec<Vec<f32>>,
}

fn head_rng(seed: u64, head: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 20) | head as u64);
    rng
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect()
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v = normal_vec(rng, d);
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random unit vector orthogonal to the unit vector `u`.
fn orthogonal_unit(rng: &mut ChaCha8Rng, u: &[f32]) -> Vec<f32> {
    loop {
        let mut v = normal_vec(rng, u.len());
        let p = dot(&v, u);
        for (x, y) in v.iter_mut().zip(u) {
            *x -= p * y;
        }
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Key whose component along `u` is `along`, plus a unit orthogonal part.
fn powerlaw_key(rng: &mut ChaCha8Rng, u: &[f32], along: f32) -> Vec<f32> {
    orthogonal_unit(rng, u)
        .iter()
        .zip(u)
        .map(|(w, q)| w + along * q)
        .collect()
}

/// Exact score `C / rank^a` for a key against a unit query is reached by
/// an along-query component of `score * sqrt(d_h)`.
fn powerlaw_along(rank: usize, exponent: f32, head_dim: usize) -> f32 {
    POWERLAW_TOP_SCORE / (rank as f32).powf(exponent) * (head_dim as f32).sqrt()
}

/// `g` queries summing to `g * anchor`.
fn group_queries(rng: &mut ChaCha8Rng, anchor: &[f32], g: usize, jitter: f32) -> Vec<f32> {
    let d = anchor.len();
    let noise: Vec<f32> = normal_vec(rng, g * d)
        .into_iter()
        .map(|x| x * jitter)
        .collect();
    let mut out = Vec::with_capacity(g * d);
    for h in 0..g {
        for j in 0..d {
            let mean = (0..g).map(|o| noise[o * d + j]).sum::<f32>() / g as f32;
            out.push(anchor[j] + noise[h * d + j] - mean);
        }
    }
    out
}

pub fn gen_workload(spec: &WorkloadSpec) -> Result<Workload> {
    spec.validate()?;
    let (s, d, g) = (spec.s, spec.head_dim, spec.group_size);
    let mut heads = Vec::with_capacity(spec.num_kv_heads);
    let mut anchors = Vec::with_capacity(spec.num_kv_heads);
    for head in 0..spec.num_kv_heads {
        let mut rng = head_rng(spec.seed, head, 0);
        match spec.generator {
            Generator::GaussianMixture {
                n_components,
                spread,
            } => {
                let centers = normal_vec(&mut rng, n_components * d);
                let mut keys = Vec::with_capacity(s * d);
                for _ in 0..s {
                    let c = rng.random_range(0..n_components);
                    for j in 0..d {
                        let z: f32 = rng.sample(StandardNormal);
                        keys.push(centers[c * d + j] + spread * z);
                    }
                }
                let values = normal_vec(&mut rng, s * d);
                let anchor = normal_vec(&mut rng, d);
                let queries =
                    group_queries(&mut rng, &anchor, g, GROUP_QUERY_JITTER * norm(&anchor));
                heads.push(HeadData {
                    keys,
                    values,
                    queries,
                });
                anchors.push(anchor);
            }
            Generator::Powerlaw { zipf_exponent } => {
                let u = unit(&mut rng, d);
                let mut ranks: Vec<usize> = (1..=s).collect();
                for i in (1..s).rev() {
                    ranks.swap(i, rng.random_range(0..=i));
                }
                let mut keys = Vec::with_capacity(s * d);
                for &rank in &ranks {
                    keys.extend(powerlaw_key(
                        &mut rng,
                        &u,
                        powerlaw_along(rank, zipf_exponent, d),
                    ));
                }
                let values = normal_vec(&mut rng, s * d);
                let queries = group_queries(&mut rng, &u, g, GROUP_QUERY_JITTER);
                heads.push(HeadData {
                    keys,
                    values,
                    queries,
                });
                anchors.push(u);
            }
        }
    }
    Ok(Workload {
        spec: *spec,
        heads,
        anchors,
    })
}

impl Workload {
    /// The token appended at decode `step` (1-based) for `head`, and the
    /// group's queries for that step.
    pub fn decode_token(&self, head: usize, step: usize) -> (KvEntry, Vec<f32>) {
        let d = self.spec.head_dim;
        let mut rng = head_rng(self.spec.seed, head, step as u64);
        let anchor = &self.anchors[head];
        let key = match self.spec.generator {
            Generator::GaussianMixture { spread, .. } => {
                let base = &self.heads[head].keys;
                let src = rng.random_range(0..self.spec.s);
                (0..d)
                    .map(|j| base[src * d + j] + spread * rng.sample::<f32, _>(StandardNormal))
                    .collect()
            }
            Generator::Powerlaw { zipf_exponent } => {
                let rank = rng.random_range(1..=self.spec.s);
                powerlaw_key(&mut rng, anchor, powerlaw_along(rank, zipf_exponent, d))
            }
        };
        let value = normal_vec(&mut rng, d);
        let drifted: Vec<f32> = self.heads[head]
            .queries
            .iter()
            .map(|q| {
                q + DECODE_QUERY_DRIFT * rng.sample::<f32, _>(StandardNormal) / (d as f32).sqrt()
            })
            .collect();
        (KvEntry { key, value }, drifted)
    }
}

/// Element-wise sum of a group's queries.
pub fn summed_query(queries: &[f32], head_dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; head_dim];
    for q in queries.chunks_exact(head_dim) {
        for (o, v) in out.iter_mut().zip(q) {
            *o += v;
        }
    }
    out
}

fn overlap(a: &[usize], b: &[usize]) -> usize {
    let set: HashSet<usize> = b.iter().copied().collect();
    a.iter().filter(|x| set.contains(x)).count()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut total = 0.0;
    for x in xs {
        total += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallRow {
    pub m: usize,
    pub b: u32,
    pub k: usize,
    pub seed: u64,
    pub recall: f64,
    pub random_recall: f64,
    pub output_error: f64,
    pub oracle_output_error: f64,
    pub random_output_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecallReport {
    pub rows: Vec<RecallRow>,
}

impl RecallReport {
    /// Rows with the given `(m, b, k)`.
    pub fn select(&self, m: usize, b: u32, k: usize) -> impl Iterator<Item = &RecallRow> {
        self.rows
            .iter()
            .filter(move |r| r.m == m && r.b == b && r.k == k)
    }

    /// Seed-averaged row for `(m, b, k)`; `seed` is set to the number of rows.
    pub fn mean_of(&self, m: usize, b: u32, k: usize) -> Option<RecallRow> {
        let rows: Vec<&RecallRow> = self.select(m, b, k).collect();
        if rows.is_empty() {
            return None;
        }
        Some(RecallRow {
            m,
            b,
            k,
            seed: rows.len() as u64,
            recall: mean(rows.iter().map(|r| r.recall)),
            random_recall: mean(rows.iter().map(|r| r.random_recall)),
            output_error: mean(rows.iter().map(|r| r.output_error)),
            oracle_output_error: mean(rows.iter().map(|r| r.oracle_output_error)),
            random_output_error: mean(rows.iter().map(|r| r.random_output_error)),
        })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        out.write_record([
            "m",
            "b",
            "k",
            "seed",
            "recall",
            "random_recall",
            "output_error",
            "oracle_output_error",
            "random_output_error",
        ])?;
        for r in &self.rows {
            out.write_record([
                r.m.to_string(),
                r.b.to_string(),
                r.k.to_string(),
                r.seed.to_string(),
                r.recall.to_string(),
                r.random_recall.to_string(),
                r.output_error.to_string(),
                r.oracle_output_error.to_string(),
                r.random_output_error.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

#[derive(Debug, Clone)]
pub struct RecallConfig {
    pub spec: WorkloadSpec,
    pub seg: SegmentConfig,
    pub pq: Vec<PqConfig>,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub max_iter: usize,
}

struct Selection {
    approx: Vec<usize>,
    exact: Vec<usize>,
    random: Vec<usize>,
}

/// For every seed, PQ config and k: build the index over all prefill keys,
/// select middle tokens by approximate score, and compare against the exact
/// oracle and a uniform random selection.
pub fn run_recall(cfg: &RecallConfig) -> Result<RecallReport> {
    cfg.spec.validate()?;
    cfg.spec.check_segments(&cfg.seg)?;
    let middle = cfg.spec.s - cfg.seg.pinned();
    if let Some(&k) = cfg.ks.iter().find(|&&k| k == 0 || k > middle) {
        return Err(Error::KTooLarge {
            k,
            available: middle,
        });
    }
    for pq in &cfg.pq {
        pq.validate(cfg.spec.head_dim)?;
    }

    let jobs: Vec<(u64, PqConfig)> = cfg
        .seeds
        .iter()
        .flat_map(|&seed| cfg.pq.iter().map(move |&pq| (seed, pq)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(seed, pq)| recall_trial(cfg, seed, pq))
        .collect::<Result<Vec<_>>>()?;
    Ok(RecallReport {
        rows: rows.into_iter().flatten().collect(),
    })
}

fn recall_trial(cfg: &RecallConfig, seed: u64, pq: PqConfig) -> Result<Vec<RecallRow>> {
    let spec = WorkloadSpec { seed, ..cfg.spec };
    let work = gen_workload(&spec)?;
    let (s, d, g) = (spec.s, spec.head_dim, spec.group_size);
    let shape = ModelShape::new(1, spec.num_kv_heads * g, spec.num_kv_heads, d);
    let mut store = KvStore::new(&shape, cfg.seg, CacheConfig::default())?;
    let excluded: HashSet<usize> = (0..cfg.seg.n_init).chain(s - cfg.seg.n_local..s).collect();
    let candidates: Vec<usize> = (cfg.seg.n_init..s - cfg.seg.n_local).collect();

    // per head, per k
    let mut per_head: Vec<Vec<RecallRow>> = Vec::new();
    for (h, data) in work.heads.iter().enumerate() {
        store.offload_prefill(0, h, &data.keys, &data.values)?;
        let index = pq_construct(&data.keys, d, pq, cfg.max_iter, seed ^ (h as u64) << 32)?;
        let approx_scores = index.score_gqa(&data.queries, g)?;
        let query_sum = summed_query(&data.queries, d);
        let head = store.head(0, h)?;
        let full: Vec<Vec<f32>> = data
            .queries
            .chunks_exact(d)
            .map(|q| full_attention(q, head))
            .collect::<Result<_>>()?;

        let mut rows = Vec::new();
        for &k in &cfg.ks {
            let mut rng = head_rng(seed, h, 1 << 40 | k as u64);
            let sel = Selection {
                approx: approx_topk(&approx_scores, k, &excluded)?,
                exact: exact_topk(&query_sum, &data.keys, k, &excluded)?,
                random: sample(&mut rng, candidates.len(), k)
                    .into_iter()
                    .map(|i| candidates[i])
                    .collect(),
            };
            let err_of = |ids: &[usize]| -> Result<f64> {
                let mut errs = Vec::new();
                for (q, f) in data.queries.chunks_exact(d).zip(&full) {
                    errs.push(relative_error(&selective_attention(q, head, ids)?, f));
                }
                Ok(mean(errs))
            };
            rows.push(RecallRow {
                m: pq.m,
                b: pq.b,
                k,
                seed,
                recall: overlap(&sel.approx, &sel.exact) as f64 / k as f64,
                random_recall: overlap(&sel.random, &sel.exact) as f64 / k as f64,
                output_error: err_of(&sel.approx)?,
                oracle_output_error: err_of(&sel.exact)?,
                random_output_error: err_of(&sel.random)?,
            });
        }
        per_head.push(rows);
    }

    Ok(cfg
        .ks
        .iter()
        .enumerate()
        .map(|(ki, &k)| {
            let col = |f: fn(&RecallRow) -> f64| mean(per_head.iter().map(|h| f(&h[ki])));
            RecallRow {
                m: pq.m,
                b: pq.b,
                k,
                seed,
                recall: col(|r| r.recall),
                random_recall: col(|r| r.random_recall),
                output_error: col(|r| r.output_error),
                oracle_output_error: col(|r| r.oracle_output_error),
                random_output_error: col(|r| r.random_output_error),
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct E2eConfig {
    pub spec: WorkloadSpec,
    pub seg: SegmentConfig,
    pub pq: PqConfig,
    pub cache: CacheConfig,
    pub k_cache: usize,
    pub steps: usize,
    pub model: CostModel,
    /// Layers of the simulated model; the data plane runs one layer.
    pub num_layers: usize,
    pub clip_lo: usize,
    pub clip_hi: usize,
    pub prefetch: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum E2eRow {
    /// Prefill plus the first decode step.
    Tt2t { seconds: f64, iterations: usize },
    Decode {
        step: usize,
        recall: f64,
        output_error: f64,
        hit_rate: f64,
        tpot: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct E2eReport {
    pub rows: Vec<E2eRow>,
}

impl E2eReport {
    pub fn tt2t(&self) -> Option<f64> {
        self.rows.iter().find_map(|r| match r {
            E2eRow::Tt2t { seconds, .. } => Some(*seconds),
            _ => None,
        })
    }

    pub fn decode_rows(&self) -> impl Iterator<Item = (usize, f64, f64, f64, f64)> + '_ {
        self.rows.iter().filter_map(|r| match *r {
            E2eRow::Decode {
                step,
                recall,
                output_error,
                hit_rate,
                tpot,
            } => Some((step, recall, output_error, hit_rate, tpot)),
            _ => None,
        })
    }

    /// Header `step,recall,output_error,hit_rate,simulated_tpot,simulated_tt2t`.
    /// Row 0 carries TT2T only; decode rows leave the TT2T column empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        out.write_record([
            "step",
            "recall",
            "output_error",
            "hit_rate",
            "simulated_tpot",
            "simulated_tt2t",
        ])?;
        for r in &self.rows {
            match *r {
                E2eRow::Tt2t { seconds, .. } => {
                    out.write_record(["0", "", "", "", "", &seconds.to_string()])?;
                }
                E2eRow::Decode {
                    step,
                    recall,
                    output_error,
                    hit_rate,
                    tpot,
                } => out.write_record([
                    step.to_string(),
                    recall.to_string(),
                    output_error.to_string(),
                    hit_rate.to_string(),
                    tpot.to_string(),
                    String::new(),
                ])?,
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Prefill (offload + PQ construction), then `steps` decode iterations of
/// score, select, fetch through the block cache, attend, and evict/append.
/// Measured per-step hit rates drive the simulated TPOT.
pub fn run_e2e(cfg: &E2eConfig) -> Result<E2eReport> {
    let spec = cfg.spec;
    spec.validate()?;
    spec.check_segments(&cfg.seg)?;
    cfg.pq.validate(spec.head_dim)?;
    cfg.model.validate()?;
    let (s, d, g) = (spec.s, spec.head_dim, spec.group_size);
    let middle = s - cfg.seg.pinned();
    if cfg.seg.k > middle {
        return Err(Error::KTooLarge {
            k: cfg.seg.k,
            available: middle,
        });
    }
    if middle == 0 {
        return Err(Error::InvalidSpec("no middle tokens to index".into()));
    }

    let data_shape = ModelShape::new(1, spec.num_kv_heads * g, spec.num_kv_heads, d);
    let pipeline = PipelineConfig {
        shape: ModelShape::new(cfg.num_layers, spec.num_kv_heads * g, spec.num_kv_heads, d),
        pq: cfg.pq,
        seg: cfg.seg,
        pool_width: None,
    };
    let iterations = t_max(&cfg.model, s, cfg.clip_lo, cfg.clip_hi)?;

    let work = gen_workload(&spec)?;
    let mut store = KvStore::new(&data_shape, cfg.seg, cfg.cache)?;
    let mut indexes = Vec::with_capacity(spec.num_kv_heads);
    for (h, data) in work.heads.iter().enumerate() {
        store.offload_prefill(0, h, &data.keys, &data.values)?;
        let middle_keys = store.head(0, h)?.middle_keys();
        indexes.push(pq_construct(
            &middle_keys,
            d,
            cfg.pq,
            iterations,
            spec.seed ^ (h as u64) << 32,
        )?);
    }

    let tt2t = simulate_tt2t(&pipeline, s, &cfg.model, iterations, 0.0, cfg.prefetch)?;
    let mut report = E2eReport {
        rows: vec![E2eRow::Tt2t {
            seconds: tt2t.end_to_end,
            iterations,
        }],
    };

    let none = HashSet::new();
    for step in 1..=cfg.steps {
        store.set_step(step as u64);
        let (mut hits, mut misses) = (0usize, 0usize);
        let mut recalls = Vec::new();
        let mut errors = Vec::new();
        for (h, index) in indexes.iter_mut().enumerate() {
            let (entry, queries) = work.decode_token(h, step);
            store.evict_local_append(0, h, entry, index)?;
            let head = store.head(0, h)?;
            let ids: Vec<usize> = head.middle_ids().collect();
            let approx: Vec<usize> = approx_topk(&index.score_gqa(&queries, g)?, cfg.seg.k, &none)?
                .into_iter()
                .map(|r| ids[r])
                .collect();
            let exact: Vec<usize> = exact_topk(
                &summed_query(&queries, d),
                &head.middle_keys(),
                cfg.seg.k,
                &none,
            )?
            .into_iter()
            .map(|r| ids[r])
            .collect();
            recalls.push(if cfg.seg.k == 0 {
                1.0
            } else {
                overlap(&approx, &exact) as f64 / cfg.seg.k as f64
            });

            let fetched = store.fetch_topk(0, h, &approx, cfg.k_cache)?;
            hits += fetched.hits;
            misses += fetched.misses;
            let head = store.head(0, h)?;
            for q in queries.chunks_exact(d) {
                errors.push(relative_error(
                    &selective_attention(q, head, &approx)?,
                    &full_attention(q, head)?,
                ));
            }
        }
        let hit_rate = if hits + misses == 0 {
            0.0
        } else {
            hits as f64 / (hits + misses) as f64
        };
        let s_now = store.head(0, 0)?.len();
        let tpot =
            simulate_decode_step(&pipeline, s_now, &cfg.model, hit_rate, cfg.prefetch)?.end_to_end;
        report.rows.push(E2eRow::Decode {
            step,
            recall: mean(recalls),
            output_error: mean(errors),
            hit_rate,
            tpot,
        });
    }
    Ok(report)
}

fn read_table<R: Read>(r: R, columns: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let headers = reader.headers()?.clone();
    let positions: Vec<usize> = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| Error::Format(format!("missing column {c:?}")))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = positions
            .iter()
            .map(|&p| {
                let field = record.get(p).unwrap_or("");
                field
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("row {}: bad number {field:?}", line + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Reads `s,iterations,seconds` rows.
pub fn read_clustering_samples<R: Read>(r: R) -> Result<Vec<ClusteringSample>> {
    Ok(read_table(r, &["s", "iterations", "seconds"])?
        .into_iter()
        .map(|v| ClusteringSample {
            s: v[0],
            iterations: v[1],
            seconds: v[2],
        })
        .collect())
}

/// Reads `s,seconds` rows.
pub fn read_compute_samples<R: Read>(r: R) -> Result<Vec<ComputeSample>> {
    Ok(read_table(r, &["s", "seconds"])?
        .into_iter()
        .map(|v| ComputeSample {
            s: v[0],
            seconds: v[1],
        })
        .collect())
}

impl FromStr for Generator {
    type Err = Error;

    /// `gaussian_mixture(64,0.5)` or `powerlaw(1.0)`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("cannot parse generator {s:?}"));
        let (name, rest) = s.trim().split_once('(').ok_or_else(bad)?;
        let args: Vec<&str> = rest
            .strip_suffix(')')
            .ok_or_else(bad)?
            .split(',')
            .map(str::trim)
            .collect();
        match (name, args.as_slice()) {
            ("gaussian_mixture", [n, spread]) => Ok(Self::GaussianMixture {
                n_components: n.parse().map_err(|_| bad())?,
                spread: spread.parse().map_err(|_| bad())?,
            }),
            ("powerlaw", [a]) => Ok(Self::Powerlaw {
                zipf_exponent: a.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::exact_scores;

    fn spec(generator: Generator) -> WorkloadSpec {
        WorkloadSpec {
            s: 512,
            head_dim: 16,
            num_kv_heads: 2,
            group_size: 2,
            generator,
            seed: 5,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let sp = spec(Generator::Powerlaw { zipf_exponent: 1.0 });
        assert_eq!(gen_workload(&sp).unwrap(), gen_workload(&sp).unwrap());
        let other = WorkloadSpec { seed: 6, ..sp };
        assert_ne!(gen_workload(&sp).unwrap(), gen_workload(&other).unwrap());
    }

    #[test]
    fn zero_spread_collapses_components() {
        let sp = spec(Generator::GaussianMixture {
            n_components: 4,
            spread: 0.0,
        });
        let w = gen_workload(&sp).unwrap();
        let mut distinct: Vec<&[f32]> = Vec::new();
        for k in w.heads[0].keys.chunks_exact(16) {
            if !distinct.contains(&k) {
                distinct.push(k);
            }
        }
        assert!(distinct.len() <= 4);
    }

    #[test]
    fn powerlaw_profile_follows_rank_law() {
        let sp = WorkloadSpec {
            s: 2000,
            head_dim: 32,
            group_size: 1,
            ..spec(Generator::Powerlaw { zipf_exponent: 1.0 })
        };
        let w = gen_workload(&sp).unwrap();
        let h = &w.heads[0];
        let mut scores = exact_scores(&h.queries, &h.keys).unwrap();
        scores.sort_by(|a, b| b.total_cmp(a));
        for (r, s) in scores.iter().take(sp.s / 10).enumerate() {
            let want = POWERLAW_TOP_SCORE / (r + 1) as f32;
            assert!(
                (s - want).abs() <= 0.1 * want,
                "rank {}: {s} vs {want}",
                r + 1
            );
        }
    }

    #[test]
    fn group_queries_sum_to_anchor() {
        let sp = WorkloadSpec {
            group_size: 4,
            ..spec(Generator::Powerlaw { zipf_exponent: 0.8 })
        };
        let w = gen_workload(&sp).unwrap();
        let sum = summed_query(&w.heads[1].queries, 16);
        for (a, b) in sum.iter().zip(&w.anchors[1]) {
            assert!((a - 4.0 * b).abs() < 1e-5);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(gen_workload(&spec(Generator::Powerlaw { zipf_exponent: 0.0 })).is_err());
        assert!(gen_workload(&spec(Generator::GaussianMixture {
            n_components: 0,
            spread: 1.0
        }))
        .is_err());
        let short = WorkloadSpec {
            s: 10,
            ..spec(Generator::Powerlaw { zipf_exponent: 1.0 })
        };
        assert!(short.check_segments(&SegmentConfig::default()).is_err());
    }

    #[test]
    fn generator_parsing() {
        assert_eq!(
            "gaussian_mixture(64, 0.5)".parse::<Generator>().unwrap(),
            Generator::GaussianMixture {
                n_components: 64,
                spread: 0.5
            }
        );
        assert_eq!(
            "powerlaw(1.2)".parse::<Generator>().unwrap(),
            Generator::Powerlaw { zipf_exponent: 1.2 }
        );
        assert!("powerlaw".parse::<Generator>().is_err());
        assert!("zipf(1)".parse::<Generator>().is_err());
    }

    #[test]
    fn sample_files_parse() {
        let text = "s,iterations,seconds\n1024,5,0.1\n2048, 10 ,0.3\n";
        let rows = read_clustering_samples(text.as_bytes()).unwrap();
        assert_eq!(
            rows[1],
            ClusteringSample {
                s: 2048.0,
                iterations: 10.0,
                seconds: 0.3
            }
        );
        assert!(read_compute_samples("s,time\n1,2\n".as_bytes()).is_err());
        assert!(read_compute_samples("s,seconds\n1,x\n".as_bytes()).is_err());
    }

    #[test]
    fn recall_rows_are_bounded() {
        let cfg = RecallConfig {
            spec: spec(Generator::Powerlaw { zipf_exponent: 1.0 }),
            seg: SegmentConfig {
                n_init: 4,
                n_local: 16,
                k: 0,
            },
            pq: vec![PqConfig::new(2, 4)],
            ks: vec![10, 40],
            seeds: vec![1, 2],
            max_iter: 10,
        };
        let report = run_recall(&cfg).unwrap();
        assert_eq!(report.rows.len(), 4);
        for r in &report.rows {
            assert!((0.0..=1.0).contains(&r.recall) && (0.0..=1.0).contains(&r.random_recall));
            assert!(r.output_error.is_finite());
        }
        let bad = RecallConfig {
            ks: vec![600],
            ..cfg
        };
        assert!(run_recall(&bad).is_err());
    }
}
