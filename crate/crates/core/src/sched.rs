//! Cost-model fitting, the adaptive K-Means iteration cap, and a
//! deterministic list-scheduling simulator of the prefill and decode
//! pipelines over three resources: GPU compute, the host link, and a CPU
//! clustering pool.
//!
//! Costs are per transformer layer:
//!
//! ```text
//! clustering job:  alpha1 + beta1 * s * T          (one kv head x partition)
//! layer compute:   alpha2 + beta2 * s + gamma2 * s^2
//! ```

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kv_store::ELEMENT_BYTES;
use crate::pq::PqConfig;
use crate::shape::{ModelShape, SegmentConfig};

pub const DEFAULT_CLIP_LO: usize = 3;
pub const DEFAULT_CLIP_HI: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub alpha1: f64,
    pub beta1: f64,
    pub alpha2: f64,
    pub beta2: f64,
    pub gamma2: f64,
    /// Device-to-host bytes per second.
    pub offload_bandwidth: f64,
    /// Host-to-device bytes per second.
    pub fetch_bandwidth: f64,
}

impl CostModel {
    /// Illustrative constants for a 7B GQA model on a single consumer GPU
    /// with a 16 GB/s host link. Used as the CLI default.
    pub fn reference() -> Self {
        Self {
            alpha1: 5e-3,
            beta1: 1e-6,
            alpha2: 1e-4,
            beta2: 2.5e-6,
            gamma2: 1e-10,
            offload_bandwidth: 16e9,
            fetch_bandwidth: 16e9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha1,
            self.beta1,
            self.alpha2,
            self.beta2,
            self.gamma2,
            self.offload_bandwidth,
            self.fetch_bandwidth,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("coefficients must be finite".into()));
        }
        if self.beta1 <= 0.0 {
            return Err(Error::InvalidModel(format!(
                "beta1 = {} must be positive",
                self.beta1
            )));
        }
        if self.gamma2 < 0.0 {
            return Err(Error::InvalidModel(format!(
                "gamma2 = {} must be >= 0",
                self.gamma2
            )));
        }
        if self.offload_bandwidth <= 0.0 || self.fetch_bandwidth <= 0.0 {
            return Err(Error::InvalidModel("bandwidths must be positive".into()));
        }
        Ok(())
    }

    pub fn clustering_time(&self, s: f64, iterations: f64) -> f64 {
        self.alpha1 + self.beta1 * s * iterations
    }

    pub fn compute_time(&self, s: f64) -> f64 {
        self.alpha2 + self.beta2 * s + self.gamma2 * s * s
    }

    /// One decode token through one layer attending `attended` tokens: the
    /// per-token linear work plus the marginal attention cost.
    pub fn decode_compute_time(&self, attended: f64) -> f64 {
        self.alpha2 + self.beta2 + 2.0 * self.gamma2 * attended
    }

    /// Gathering `m` table entries per token is charged as `m / d_h` of an
    /// attention read of the same tokens.
    pub fn pq_search_time(&self, s: f64, m: usize, head_dim: usize) -> f64 {
        2.0 * self.gamma2 * s * m as f64 / head_dim as f64
    }
}

impl fmt::Display for CostModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "alpha1={}", self.alpha1)?;
        writeln!(f, "beta1={}", self.beta1)?;
        writeln!(f, "alpha2={}", self.alpha2)?;
        writeln!(f, "beta2={}", self.beta2)?;
        writeln!(f, "gamma2={}", self.gamma2)?;
        writeln!(f, "offload_bandwidth={}", self.offload_bandwidth)?;
        writeln!(f, "fetch_bandwidth={}", self.fetch_bandwidth)
    }
}

impl FromStr for CostModel {
    type Err = Error;

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    fn from_str(text: &str) -> Result<Self> {
        let mut fields: [Option<f64>; 7] = [None; 7];
        const KEYS: [&str; 7] = [
            "alpha1",
            "beta1",
            "alpha2",
            "beta2",
            "gamma2",
            "offload_bandwidth",
            "fetch_bandwidth",
        ];
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", n + 1)))?;
            let slot = KEYS.iter().position(|k| *k == key.trim()).ok_or_else(|| {
                Error::Format(format!("line {}: unknown key {:?}", n + 1, key.trim()))
            })?;
            let v: f64 = value.trim().parse().map_err(|_| {
                Error::Format(format!("line {}: bad number {:?}", n + 1, value.trim()))
            })?;
            fields[slot] = Some(v);
        }
        let get =
            |i: usize| fields[i].ok_or_else(|| Error::Format(format!("missing key {}", KEYS[i])));
        let model = CostModel {
            alpha1: get(0)?,
            beta1: get(1)?,
            alpha2: get(2)?,
            beta2: get(3)?,
            gamma2: get(4)?,
            offload_bandwidth: get(5)?,
            fetch_bandwidth: get(6)?,
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringSample {
    pub s: f64,
    pub iterations: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComputeSample {
    pub s: f64,
    pub seconds: f64,
}

/// Least squares on relative residuals `(fit - seconds) / seconds`, so that
/// short and long runs carry equal weight. Columns are scaled to unit
/// maximum before the SVD solve and the scale is undone afterwards.
fn relative_lstsq(rows: &[Vec<f64>], seconds: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = seconds.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::DegenerateDesign(format!(
            "sample time {bad} must be positive"
        )));
    }
    let cols = rows[0].len();
    let scale: Vec<f64> = (0..cols)
        .map(|c| rows.iter().fold(0.0f64, |a, r| a.max(r[c].abs())))
        .map(|m| if m > 0.0 { m } else { 1.0 })
        .collect();
    let design = DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c] / scale[c] / seconds[r]);
    let target = DVector::from_element(rows.len(), 1.0);
    let svd = design.svd(true, true);
    if svd.rank(1e-12 * svd.singular_values.max()) < cols {
        return Err(Error::DegenerateDesign(
            "sample design is rank deficient".into(),
        ));
    }
    let coef = svd
        .solve(&target, 1e-14)
        .map_err(|e| Error::DegenerateDesign(e.to_string()))?;
    Ok((0..cols).map(|c| coef[c] / scale[c]).collect())
}

/// `(alpha1, beta1)` of `seconds ~ alpha1 + beta1 * s * T`.
pub fn fit_clustering(samples: &[ClusteringSample]) -> Result<(f64, f64)> {
    let mut xs: Vec<f64> = samples.iter().map(|p| p.s * p.iterations).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 2 {
        return Err(Error::DegenerateDesign(
            "need at least 2 distinct values of s*T".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|p| vec![1.0, p.s * p.iterations])
        .collect();
    let seconds: Vec<f64> = samples.iter().map(|p| p.seconds).collect();
    let c = relative_lstsq(&rows, &seconds)?;
    Ok((c[0], c[1]))
}

/// `(alpha2, beta2, gamma2)` of `seconds ~ alpha2 + beta2 * s + gamma2 * s^2`.
pub fn fit_compute(samples: &[ComputeSample]) -> Result<(f64, f64, f64)> {
    let mut distinct: Vec<f64> = samples.iter().map(|p| p.s).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::DegenerateDesign(format!(
            "need at least 3 distinct sequence lengths, got {}",
            distinct.len()
        )));
    }
    let rows: Vec<Vec<f64>> = samples.iter().map(|p| vec![1.0, p.s, p.s * p.s]).collect();
    let seconds: Vec<f64> = samples.iter().map(|p| p.seconds).collect();
    let c = relative_lstsq(&rows, &seconds)?;
    Ok((c[0], c[1], c[2]))
}

/// Iteration count at which one clustering job takes exactly as long as
/// one layer's compute, before flooring and clipping.
pub fn t_max_preclip(model: &CostModel, s: f64) -> Result<f64> {
    if model.beta1 <= 0.0 {
        return Err(Error::InvalidModel(format!(
            "beta1 = {} must be positive",
            model.beta1
        )));
    }
    Ok((model.gamma2 * s * s + model.beta2 * s + model.alpha2 - model.alpha1) / (model.beta1 * s))
}

pub fn t_max(model: &CostModel, s: usize, clip_lo: usize, clip_hi: usize) -> Result<usize> {
    if clip_lo > clip_hi {
        return Err(Error::InvalidModel(format!(
            "clip range [{clip_lo}, {clip_hi}] is empty"
        )));
    }
    if s == 0 {
        return Err(Error::InvalidModel("s must be >= 1".into()));
    }
    let raw = t_max_preclip(model, s as f64)?.floor();
    if raw <= clip_lo as f64 {
        Ok(clip_lo)
    } else if raw >= clip_hi as f64 {
        Ok(clip_hi)
    } else {
        Ok(raw as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Resource {
    Compute,
    Transfer,
    CpuPool,
}

impl Resource {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Compute => "compute",
            Self::Transfer => "transfer",
            Self::CpuPool => "cpu_pool",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub resource: Resource,
    /// Lane within the resource; only the CPU pool has more than one.
    pub lane: usize,
    pub label: String,
    pub start: f64,
    pub end: f64,
    /// Declared data dependencies.
    pub deps: Vec<usize>,
    /// Previous event on the same lane.
    pub lane_pred: Option<usize>,
}

impl Event {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub events: Vec<Event>,
    pub end_to_end: f64,
}

impl Timeline {
    pub fn busy(&self, resource: Resource) -> f64 {
        self.events
            .iter()
            .filter(|e| e.resource == resource)
            .map(Event::duration)
            .sum()
    }

    /// Sum of durations of events whose label starts with `prefix`.
    pub fn total_of(&self, prefix: &str) -> f64 {
        self.events
            .iter()
            .filter(|e| e.label.starts_with(prefix))
            .map(Event::duration)
            .sum()
    }

    pub fn find(&self, label: &str) -> Option<&Event> {
        self.events.iter().find(|e| e.label == label)
    }

    /// Event indices on one longest chain, from first to last. Each step
    /// back picks the predecessor (dependency or lane predecessor) ending
    /// latest, ties toward the lower index.
    pub fn critical_path(&self) -> Vec<usize> {
        let Some(mut cur) = self
            .events
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, e)| match best {
                Some((_, end)) if end >= e.end => best,
                _ => Some((i, e.end)),
            })
            .map(|(i, _)| i)
        else {
            return Vec::new();
        };
        let mut path = vec![cur];
        loop {
            let e = &self.events[cur];
            let pred = e
                .deps
                .iter()
                .copied()
                .chain(e.lane_pred)
                .filter(|&p| self.events[p].end >= e.start)
                .fold(None, |best: Option<usize>, p| match best {
                    Some(b)
                        if self.events[b].end > self.events[p].end
                            || (self.events[b].end == self.events[p].end && b < p) =>
                    {
                        Some(b)
                    }
                    _ => Some(p),
                });
            match pred {
                Some(p) => {
                    path.push(p);
                    cur = p;
                }
                None => break,
            }
        }
        path.reverse();
        path
    }

    /// CSV with header `resource,label,start,end`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        out.write_record(["resource", "label", "start", "end"])?;
        for e in &self.events {
            out.write_record([
                e.resource.name().to_string(),
                e.label.clone(),
                e.start.to_string(),
                e.end.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// List scheduler: each event starts once its dependencies have finished
/// and a lane of its resource is free. Lanes serve events in insertion
/// order; the pool picks the earliest-free lane, ties toward lane 0.
#[derive(Debug, Clone)]
pub struct Scheduler {
    compute: Option<usize>,
    transfer: Option<usize>,
    pool: Vec<Option<usize>>,
    events: Vec<Event>,
}

impl Scheduler {
    pub fn new(pool_width: usize) -> Self {
        Self {
            compute: None,
            transfer: None,
            pool: vec![None; pool_width.max(1)],
            events: Vec::new(),
        }
    }

    fn end_of(&self, idx: Option<usize>) -> f64 {
        idx.map_or(0.0, |i| self.events[i].end)
    }

    fn deps_ready(&self, deps: &[usize]) -> f64 {
        deps.iter().map(|&d| self.events[d].end).fold(0.0, f64::max)
    }

    fn pick_lane(&self, resource: Resource) -> (usize, Option<usize>) {
        match resource {
            Resource::Compute => (0, self.compute),
            Resource::Transfer => (0, self.transfer),
            Resource::CpuPool => {
                let mut best = 0;
                for lane in 1..self.pool.len() {
                    if self.end_of(self.pool[lane]) < self.end_of(self.pool[best]) {
                        best = lane;
                    }
                }
                (best, self.pool[best])
            }
        }
    }

    /// Time at which an event on `resource` with `deps` would start.
    pub fn earliest_start(&self, resource: Resource, deps: &[usize]) -> f64 {
        let (_, pred) = self.pick_lane(resource);
        self.deps_ready(deps).max(self.end_of(pred))
    }

    pub fn add(
        &mut self,
        resource: Resource,
        label: impl Into<String>,
        duration: f64,
        deps: &[usize],
    ) -> usize {
        let (lane, lane_pred) = self.pick_lane(resource);
        let start = self.deps_ready(deps).max(self.end_of(lane_pred));
        let idx = self.events.len();
        self.events.push(Event {
            resource,
            lane,
            label: label.into(),
            start,
            end: start + duration,
            deps: deps.to_vec(),
            lane_pred,
        });
        match resource {
            Resource::Compute => self.compute = Some(idx),
            Resource::Transfer => self.transfer = Some(idx),
            Resource::CpuPool => self.pool[lane] = Some(idx),
        }
        idx
    }

    pub fn finish(self) -> Timeline {
        let end_to_end = self.events.iter().map(|e| e.end).fold(0.0, f64::max);
        Timeline {
            events: self.events,
            end_to_end,
        }
    }
}

/// Static pipeline parameters shared by the prefill and decode simulations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub shape: ModelShape,
    pub pq: PqConfig,
    pub seg: SegmentConfig,
    /// CPU clustering lanes; defaults to `h_kv * m`.
    pub pool_width: Option<usize>,
}

impl PipelineConfig {
    pub fn pool_width(&self) -> usize {
        self.pool_width
            .unwrap_or(self.shape.num_kv_heads * self.pq.m)
            .max(1)
    }

    pub fn clustering_jobs_per_layer(&self) -> usize {
        self.shape.num_kv_heads * self.pq.m
    }

    /// Bytes of keys and values produced by one layer for `s` tokens.
    pub fn kv_bytes(&self, s: usize) -> f64 {
        (2 * ELEMENT_BYTES
            * self.shape.batch_size
            * self.shape.num_kv_heads
            * s
            * self.shape.head_dim) as f64
    }

    /// Bytes of one layer's PQ codes at `b` bits per code.
    pub fn code_bytes(&self, s: usize) -> f64 {
        (self.shape.batch_size * self.shape.num_kv_heads * self.pq.m * s) as f64 * self.pq.b as f64
            / 8.0
    }

    /// Bytes fetched for one layer's top-k tokens at the given hit rate.
    pub fn fetch_bytes(&self, hit_rate: f64) -> f64 {
        let per_token = (2 * ELEMENT_BYTES * self.shape.head_dim) as f64;
        (1.0 - hit_rate)
            * (self.seg.k * self.shape.num_kv_heads * self.shape.batch_size) as f64
            * per_token
    }

    /// Wall time of one layer's clustering jobs on an otherwise idle pool.
    pub fn layer_clustering_span(&self, model: &CostModel, s: usize, iterations: usize) -> f64 {
        let waves = self.clustering_jobs_per_layer().div_ceil(self.pool_width());
        waves as f64 * model.clustering_time(s as f64, iterations as f64)
    }

    fn validate(&self, model: &CostModel, s: usize) -> Result<()> {
        crate::shape::validate_shape(&self.shape, &self.seg, s)?;
        self.pq.validate(self.shape.head_dim)?;
        model.validate()
    }
}

/// Per-layer cluster job indices, used by the decode step to wait on PQ
/// construction.
type ClusterJobs = Vec<Vec<usize>>;

fn add_prefill(
    sched: &mut Scheduler,
    cfg: &PipelineConfig,
    model: &CostModel,
    s: usize,
    iterations: usize,
) -> ClusterJobs {
    let compute = model.compute_time(s as f64);
    let offload = cfg.kv_bytes(s) / model.offload_bandwidth;
    let job = model.clustering_time(s as f64, iterations as f64);
    let mut jobs = Vec::with_capacity(cfg.shape.num_layers);
    for layer in 0..cfg.shape.num_layers {
        let c = sched.add(
            Resource::Compute,
            format!("prefill_compute_l{layer}"),
            compute,
            &[],
        );
        let o = sched.add(
            Resource::Transfer,
            format!("offload_l{layer}"),
            offload,
            &[c],
        );
        let layer_jobs = (0..cfg.clustering_jobs_per_layer())
            .map(|j| {
                sched.add(
                    Resource::CpuPool,
                    format!("cluster_l{layer}_j{j}"),
                    job,
                    &[o],
                )
            })
            .collect();
        jobs.push(layer_jobs);
    }
    jobs
}

fn add_decode_step(
    sched: &mut Scheduler,
    cfg: &PipelineConfig,
    model: &CostModel,
    s: usize,
    hit_rate: f64,
    prefetch: bool,
    clusters: Option<&ClusterJobs>,
) {
    let layers = cfg.shape.num_layers;
    let code = cfg.code_bytes(s) / model.fetch_bandwidth;
    let search = model.pq_search_time(s as f64, cfg.pq.m, cfg.shape.head_dim);
    let fetch = cfg.fetch_bytes(hit_rate) / model.fetch_bandwidth;
    let attended = (cfg.seg.n_init + cfg.seg.k + cfg.seg.n_local) as f64;
    let attn = model.decode_compute_time(attended);
    let cluster_deps = |layer: usize| clusters.map_or(&[][..], |c| c[layer].as_slice());

    let mut prev_attn: Option<usize> = None;
    // With prefetch, layer 0's codes arrive during the previous step, unless
    // the codes are only now being built.
    let mut pending_code: Option<usize> = match (prefetch, clusters) {
        (true, Some(_)) => Some(sched.add(Resource::Transfer, "codes_l0", code, cluster_deps(0))),
        _ => None,
    };

    for layer in 0..layers {
        let mut deps: Vec<usize> = prev_attn.into_iter().collect();
        if !prefetch {
            let mut code_deps = deps.clone();
            code_deps.extend_from_slice(cluster_deps(layer));
            deps.push(sched.add(
                Resource::Transfer,
                format!("codes_l{layer}"),
                code,
                &code_deps,
            ));
        } else if let Some(c) = pending_code.take() {
            deps.push(c);
        }

        if clusters.is_some() {
            // stall until this layer's centroids and codes exist
            let base: Vec<usize> = prev_attn.into_iter().collect();
            let ready = sched.earliest_start(Resource::Compute, &base);
            let built = deps
                .iter()
                .chain(cluster_deps(layer))
                .map(|&j| sched.events[j].end)
                .fold(0.0, f64::max);
            if built > ready {
                deps.push(sched.add(
                    Resource::Compute,
                    format!("wait_pq_l{layer}"),
                    built - ready,
                    &base,
                ));
            }
            deps.extend_from_slice(cluster_deps(layer));
        }

        let search_ev = sched.add(
            Resource::Compute,
            format!("pq_search_l{layer}"),
            search,
            &deps,
        );

        if prefetch {
            let issue: Vec<usize> = prev_attn.into_iter().collect();
            if layer + 1 < layers {
                let mut code_deps = issue.clone();
                code_deps.extend_from_slice(cluster_deps(layer + 1));
                pending_code = Some(sched.add(
                    Resource::Transfer,
                    format!("codes_l{}", layer + 1),
                    code,
                    &code_deps,
                ));
            } else {
                sched.add(Resource::Transfer, "codes_next_step_l0", code, &issue);
            }
        }

        let mut attn_deps = vec![search_ev];
        if fetch > 0.0 {
            attn_deps.push(sched.add(
                Resource::Transfer,
                format!("fetch_topk_l{layer}"),
                fetch,
                &[search_ev],
            ));
        }
        prev_attn = Some(sched.add(
            Resource::Compute,
            format!("attn_ffn_l{layer}"),
            attn,
            &attn_deps,
        ));
    }
}

fn check_ratio(hit_rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&hit_rate) {
        return Err(Error::InvalidRatio(hit_rate));
    }
    Ok(())
}

pub fn simulate_prefill(
    cfg: &PipelineConfig,
    s: usize,
    model: &CostModel,
    iterations: usize,
) -> Result<Timeline> {
    cfg.validate(model, s)?;
    if iterations == 0 {
        return Err(Error::InvalidModel("iterations must be >= 1".into()));
    }
    let mut sched = Scheduler::new(cfg.pool_width());
    add_prefill(&mut sched, cfg, model, s, iterations);
    Ok(sched.finish())
}

/// One steady-state decode step over `s` context tokens.
pub fn simulate_decode_step(
    cfg: &PipelineConfig,
    s: usize,
    model: &CostModel,
    hit_rate: f64,
    prefetch: bool,
) -> Result<Timeline> {
    cfg.validate(model, s)?;
    check_ratio(hit_rate)?;
    let mut sched = Scheduler::new(cfg.pool_width());
    add_decode_step(&mut sched, cfg, model, s, hit_rate, prefetch, None);
    Ok(sched.finish())
}

/// Prefill followed by the first decode step, which waits at each layer for
/// that layer's PQ construction. The makespan is the time to second token.
pub fn simulate_tt2t(
    cfg: &PipelineConfig,
    s: usize,
    model: &CostModel,
    iterations: usize,
    hit_rate: f64,
    prefetch: bool,
) -> Result<Timeline> {
    cfg.validate(model, s)?;
    check_ratio(hit_rate)?;
    if iterations == 0 {
        return Err(Error::InvalidModel("iterations must be >= 1".into()));
    }
    let mut sched = Scheduler::new(cfg.pool_width());
    let jobs = add_prefill(&mut sched, cfg, model, s, iterations);
    add_decode_step(&mut sched, cfg, model, s, hit_rate, prefetch, Some(&jobs));
    Ok(sched.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CostModel {
        CostModel::reference()
    }

    fn cfg(layers: usize) -> PipelineConfig {
        PipelineConfig {
            shape: ModelShape::new(layers, 8, 2, 64),
            pq: PqConfig::new(2, 6),
            seg: SegmentConfig {
                n_init: 4,
                n_local: 16,
                k: 64,
            },
            pool_width: None,
        }
    }

    #[test]
    fn cost_model_text_roundtrip() {
        let m = model();
        let parsed: CostModel = m.to_string().parse().unwrap();
        assert_eq!(parsed, m);
        let with_comments = format!("# profiled\n\n{m}");
        assert_eq!(with_comments.parse::<CostModel>().unwrap(), m);
    }

    #[test]
    fn cost_model_text_errors() {
        assert!("alpha1=1".parse::<CostModel>().is_err());
        let bad_beta = model().to_string().replace("beta1=0.000001", "beta1=0");
        assert!(matches!(
            bad_beta.parse::<CostModel>(),
            Err(Error::InvalidModel(_))
        ));
        assert!("alpha1 1".parse::<CostModel>().is_err());
        assert!(format!("{}nope=3\n", model()).parse::<CostModel>().is_err());
    }

    #[test]
    fn clustering_fit_exact() {
        let samples: Vec<ClusteringSample> =
            [(1000.0, 5.0), (2000.0, 10.0), (4000.0, 3.0), (8000.0, 7.0)]
                .iter()
                .map(|&(s, t)| ClusteringSample {
                    s,
                    iterations: t,
                    seconds: 0.5 + 2e-6 * s * t,
                })
                .collect();
        let (a, b) = fit_clustering(&samples).unwrap();
        assert!((a - 0.5).abs() <= 1e-9 * 0.5);
        assert!((b - 2e-6).abs() <= 1e-9 * 2e-6);
    }

    #[test]
    fn clustering_fit_two_points() {
        let samples = [
            ClusteringSample {
                s: 10.0,
                iterations: 1.0,
                seconds: 3.0,
            },
            ClusteringSample {
                s: 20.0,
                iterations: 1.0,
                seconds: 5.0,
            },
        ];
        let (a, b) = fit_clustering(&samples).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b - 0.2).abs() < 1e-12);
        let flat = [
            samples[0],
            ClusteringSample {
                s: 5.0,
                iterations: 2.0,
                seconds: 1.0,
            },
        ];
        assert!(matches!(
            fit_clustering(&flat),
            Err(Error::DegenerateDesign(_))
        ));
    }

    #[test]
    fn compute_fit_exact() {
        let f = |s: f64| 1e-3 + 3e-6 * s + 2e-10 * s * s;
        let samples: Vec<ComputeSample> = [1024.0, 2048.0, 4096.0, 8192.0, 16384.0, 32768.0]
            .iter()
            .map(|&s| ComputeSample { s, seconds: f(s) })
            .collect();
        let (a, b, g) = fit_compute(&samples).unwrap();
        assert!((a - 1e-3).abs() <= 1e-9 * 1e-3, "{a}");
        assert!((b - 3e-6).abs() <= 1e-9 * 3e-6, "{b}");
        assert!((g - 2e-10).abs() <= 1e-9 * 2e-10, "{g}");
    }

    #[test]
    fn compute_fit_three_points_interpolates() {
        let pts = [(1.0, 2.0), (2.0, 3.0), (4.0, 11.0)];
        let samples: Vec<ComputeSample> = pts
            .iter()
            .map(|&(s, y)| ComputeSample { s, seconds: y })
            .collect();
        let (a, b, g) = fit_compute(&samples).unwrap();
        for &(s, y) in &pts {
            assert!((a + b * s + g * s * s - y).abs() < 1e-9);
        }
        let two = [samples[0], samples[1], samples[1]];
        assert!(matches!(fit_compute(&two), Err(Error::DegenerateDesign(_))));
    }

    #[test]
    fn fits_reject_nonpositive_times() {
        let samples = [
            ClusteringSample {
                s: 10.0,
                iterations: 1.0,
                seconds: 3.0,
            },
            ClusteringSample {
                s: 20.0,
                iterations: 1.0,
                seconds: 0.0,
            },
        ];
        assert!(matches!(
            fit_clustering(&samples),
            Err(Error::DegenerateDesign(_))
        ));
    }

    #[test]
    fn t_max_examples() {
        let m = CostModel {
            alpha1: 0.0,
            beta1: 1.0,
            alpha2: 0.0,
            beta2: 0.0,
            gamma2: 1.0,
            ..model()
        };
        assert_eq!(t_max_preclip(&m, 10.0).unwrap(), 10.0);
        assert_eq!(t_max(&m, 10, 3, 30).unwrap(), 10);
        assert_eq!(t_max(&m, 100, 3, 30).unwrap(), 30);

        let m = CostModel {
            alpha1: 0.7,
            alpha2: 0.7,
            beta1: 0.5,
            beta2: 2.0,
            gamma2: 0.25,
            ..model()
        };
        let s = 12.0;
        assert!((t_max_preclip(&m, s).unwrap() - (0.25 * s + 2.0) / 0.5).abs() < 1e-12);

        // pre-clip 0.4
        let m = CostModel {
            alpha1: 0.0,
            beta1: 1.0,
            alpha2: 0.0,
            beta2: 0.4,
            gamma2: 0.0,
            ..model()
        };
        assert_eq!(t_max(&m, 10, 3, 30).unwrap(), 3);
        assert!(t_max(&m, 10, 5, 4).is_err());
        assert!(t_max_preclip(&CostModel { beta1: 0.0, ..m }, 10.0).is_err());
    }

    #[test]
    fn scheduler_respects_lanes_and_deps() {
        let mut s = Scheduler::new(2);
        let a = s.add(Resource::Compute, "a", 2.0, &[]);
        let b = s.add(Resource::Compute, "b", 1.0, &[]);
        let t = s.add(Resource::Transfer, "t", 5.0, &[a]);
        let p0 = s.add(Resource::CpuPool, "p0", 1.0, &[t]);
        let p1 = s.add(Resource::CpuPool, "p1", 1.0, &[t]);
        let p2 = s.add(Resource::CpuPool, "p2", 1.0, &[b]);
        let tl = s.finish();
        assert_eq!(tl.events[b].start, 2.0);
        assert_eq!(tl.events[t].start, 2.0);
        assert_eq!((tl.events[p0].lane, tl.events[p1].lane), (0, 1));
        assert_eq!(tl.events[p2].start, 8.0);
        assert_eq!(tl.end_to_end, 9.0);
        let path: Vec<&str> = tl
            .critical_path()
            .iter()
            .map(|&i| tl.events[i].label.as_str())
            .collect();
        assert_eq!(path, vec!["a", "t", "p0", "p2"]);
    }

    #[test]
    fn prefill_compute_bound() {
        let m = CostModel {
            alpha1: 0.0,
            beta1: 1e-30,
            offload_bandwidth: 1e300,
            ..model()
        };
        let c = cfg(6);
        let tl = simulate_prefill(&c, 4096, &m, 5).unwrap();
        let sum = 6.0 * m.compute_time(4096.0);
        assert!((tl.end_to_end - sum).abs() <= 1e-12 * sum);
        assert_eq!(tl.busy(Resource::Compute), tl.total_of("prefill_compute"));
    }

    #[test]
    fn prefill_tail_exposed_only() {
        let m = model();
        let c = cfg(8);
        let s = 8192;
        let t = t_max(&m, s, 1, 100).unwrap();
        let tl = simulate_prefill(&c, s, &m, t).unwrap();
        let compute = m.compute_time(s as f64);
        let offload = c.kv_bytes(s) / m.offload_bandwidth;
        let clus = c.layer_clustering_span(&m, s, t);
        assert!(offload <= compute && clus <= compute);
        assert!(tl.end_to_end <= 8.0 * compute + offload + clus + 1e-12);
    }

    #[test]
    fn decode_prefetch_and_hit_rate_effects() {
        let m = model();
        let c = cfg(4);
        let on = simulate_decode_step(&c, 8192, &m, 0.0, true).unwrap();
        let off = simulate_decode_step(&c, 8192, &m, 0.0, false).unwrap();
        assert!(off.end_to_end > on.end_to_end);
        let warm = simulate_decode_step(&c, 8192, &m, 1.0, true).unwrap();
        assert!(warm.find("fetch_topk_l0").is_none());
        assert!(warm.end_to_end < on.end_to_end);
        assert!(simulate_decode_step(&c, 8192, &m, 1.5, true).is_err());
    }

    #[test]
    fn tt2t_exposes_clustering_stall() {
        // clustering far slower than compute forces waits
        let m = CostModel {
            beta1: 1e-4,
            ..model()
        };
        let c = cfg(3);
        let tl = simulate_tt2t(&c, 4096, &m, 10, 0.0, true).unwrap();
        assert!(tl.find("wait_pq_l0").is_some());
        let last_cluster = tl
            .events
            .iter()
            .filter(|e| e.label.starts_with("cluster_l2"))
            .map(|e| e.end)
            .fold(0.0, f64::max);
        let search = tl.find("pq_search_l2").unwrap();
        assert!(search.start >= last_cluster);

        let quick = CostModel {
            alpha1: 0.0,
            beta1: 1e-12,
            offload_bandwidth: 1e15,
            ..model()
        };
        let fast = simulate_tt2t(&c, 4096, &quick, 3, 0.0, true).unwrap();
        // only the last offload and layer 0's code transfer are exposed
        let code =
            c.code_bytes(4096) / quick.fetch_bandwidth + c.kv_bytes(4096) / quick.offload_bandwidth;
        assert!(
            fast.total_of("wait_pq") <= code * (1.0 + 1e-9),
            "{}",
            fast.total_of("wait_pq")
        );
        assert!(fast.find("wait_pq_l1").is_none() && fast.find("wait_pq_l2").is_none());
    }

    #[test]
    fn timeline_csv_header() {
        let tl = simulate_decode_step(&cfg(1), 1024, &model(), 0.5, true).unwrap();
        let mut buf = Vec::new();
        tl.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("resource,label,start,end\n"));
        assert_eq!(text.lines().count(), tl.events.len() + 1);
    }
}
