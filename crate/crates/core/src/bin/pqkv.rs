use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pqkv::harness::{
    gen_workload, read_clustering_samples, read_compute_samples, run_e2e, run_recall, E2eConfig,
    Generator, RecallConfig, WorkloadSpec,
};
use pqkv::kv_store::{CacheConfig, EvictionPolicy, DEFAULT_BLOCK_SIZE, DEFAULT_K_CACHE};
use pqkv::pq::pq_construct_traced;
use pqkv::sched::{
    fit_clustering, fit_compute, simulate_decode_step, simulate_prefill, t_max, CostModel,
    PipelineConfig, DEFAULT_CLIP_HI, DEFAULT_CLIP_LO,
};
use pqkv::{ModelShape, PqConfig, SegmentConfig, TensorF32};

#[derive(Parser)]
#[command(
    name = "pqkv",
    version,
    about = "PQ-indexed KV cache experiments and pipeline simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic keys, values and queries as tensor files.
    Gen {
        #[command(flatten)]
        work: WorkArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a PQ index from a `[s, d_h]` key tensor.
    BuildIndex {
        #[arg(long)]
        keys: PathBuf,
        #[command(flatten)]
        pq: PqArgs,
        /// K-Means iterations.
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall and output error of PQ selection against the exact top-k.
    Recall {
        #[command(flatten)]
        work: WorkArgs,
        #[command(flatten)]
        seg: SegArgs,
        /// Comma-separated partition counts.
        #[arg(long, value_delimiter = ',', default_value = "2")]
        m: Vec<usize>,
        /// Comma-separated code widths.
        #[arg(long, value_delimiter = ',', default_value = "6")]
        b: Vec<u32>,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 1)]
        trials: u64,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit cost-model coefficients from timing samples.
    FitCost {
        /// CSV with columns s,iterations,seconds.
        #[arg(long)]
        clustering: PathBuf,
        /// CSV with columns s,seconds.
        #[arg(long)]
        compute: PathBuf,
        #[arg(long, default_value_t = 16e9)]
        offload_bandwidth: f64,
        #[arg(long, default_value_t = 16e9)]
        fetch_bandwidth: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prefill timeline (resource,label,start,end).
    SimulatePrefill {
        #[command(flatten)]
        sim: SimArgs,
        /// K-Means iterations; defaults to the clipped overlap bound.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Timeline of one steady-state decode step.
    SimulateDecode {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, default_value_t = 0.0)]
        hit_rate: f64,
        #[arg(long)]
        no_prefetch: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prefill plus decode steps with measured recall, error and hit rate.
    E2e {
        #[command(flatten)]
        work: WorkArgs,
        #[command(flatten)]
        seg: SegArgs,
        #[command(flatten)]
        pq: PqArgs,
        /// Middle tokens selected per kv head.
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
        block_size: usize,
        /// Fast-tier cache capacity in tokens per kv head.
        #[arg(long, default_value_t = 4096)]
        cache_tokens: usize,
        #[arg(long, default_value_t = DEFAULT_K_CACHE)]
        k_cache: usize,
        #[arg(long, default_value = "lru")]
        policy: EvictionPolicy,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        /// Layers of the simulated model.
        #[arg(long, default_value_t = 32)]
        layers: usize,
        #[arg(long)]
        cost: Option<PathBuf>,
        #[command(flatten)]
        clip: ClipArgs,
        #[arg(long)]
        no_prefetch: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct WorkArgs {
    #[arg(long)]
    s: usize,
    #[arg(long, default_value_t = 128)]
    d_h: usize,
    #[arg(long, default_value_t = 1)]
    h_kv: usize,
    /// Query heads per kv head.
    #[arg(long, default_value_t = 1)]
    g: usize,
    /// `gaussian_mixture(n,spread)` or `powerlaw(a)`.
    #[arg(long, default_value = "powerlaw(1.0)")]
    generator: Generator,
    #[arg(long)]
    seed: u64,
}

impl WorkArgs {
    fn spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            s: self.s,
            head_dim: self.d_h,
            num_kv_heads: self.h_kv,
            group_size: self.g,
            generator: self.generator,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct SegArgs {
    #[arg(long, default_value_t = 16)]
    n_init: usize,
    #[arg(long, default_value_t = 64)]
    n_local: usize,
}

#[derive(Args)]
struct PqArgs {
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, default_value_t = 6)]
    b: u32,
}

#[derive(Args)]
struct ClipArgs {
    #[arg(long, default_value_t = DEFAULT_CLIP_LO)]
    clip_lo: usize,
    #[arg(long, default_value_t = DEFAULT_CLIP_HI)]
    clip_hi: usize,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    s: usize,
    #[arg(long, default_value_t = 32)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    h_kv: usize,
    #[arg(long, default_value_t = 128)]
    d_h: usize,
    #[command(flatten)]
    pq: PqArgs,
    #[command(flatten)]
    seg: SegArgs,
    /// Tokens selected per kv head in decode.
    #[arg(long, default_value_t = 0)]
    k: usize,
    /// CPU clustering lanes; defaults to h_kv * m.
    #[arg(long)]
    pool_width: Option<usize>,
    /// Cost-model file; the built-in reference constants otherwise.
    #[arg(long)]
    cost: Option<PathBuf>,
    #[command(flatten)]
    clip: ClipArgs,
}

impl SimArgs {
    fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            shape: ModelShape::new(self.layers, self.heads, self.h_kv, self.d_h),
            pq: PqConfig::new(self.pq.m, self.pq.b),
            seg: SegmentConfig {
                n_init: self.seg.n_init,
                n_local: self.seg.n_local,
                k: self.k,
            },
            pool_width: self.pool_width,
        }
    }
}

fn load_cost(path: Option<&Path>) -> pqkv::Result<CostModel> {
    match path {
        Some(p) => std::fs::read_to_string(p)?.parse(),
        None => Ok(CostModel::reference()),
    }
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> pqkv::Result<()> {
    match cli.command {
        Cmd::Gen { work, out } => {
            let w = gen_workload(&work.spec())?;
            std::fs::create_dir_all(&out)?;
            let d = work.d_h;
            for (h, head) in w.heads.iter().enumerate() {
                TensorF32::matrix(work.s, d, head.keys.clone())?
                    .save(out.join(format!("keys_h{h}.pqkv")))?;
                TensorF32::matrix(work.s, d, head.values.clone())?
                    .save(out.join(format!("values_h{h}.pqkv")))?;
                TensorF32::matrix(work.g, d, head.queries.clone())?
                    .save(out.join(format!("queries_h{h}.pqkv")))?;
            }
        }
        Cmd::BuildIndex {
            keys,
            pq,
            iters,
            seed,
            out,
        } => {
            let keys = TensorF32::load(keys)?;
            if keys.dims().len() != 2 {
                return Err(pqkv::Error::DimensionMismatch(format!(
                    "keys must be 2-d, got {:?}",
                    keys.dims()
                )));
            }
            let build = pq_construct_traced(
                keys.data(),
                keys.row_len(),
                PqConfig::new(pq.m, pq.b),
                iters,
                seed,
            )?;
            build
                .index
                .write_to(&mut BufWriter::new(File::create(out)?))?;
            let mut w = output(None)?;
            writeln!(w, "partition,inertia,iterations")?;
            for (j, (inertia, it)) in build.inertias.iter().zip(&build.iterations).enumerate() {
                writeln!(w, "{j},{inertia},{it}")?;
            }
            w.flush()?;
        }
        Cmd::Recall {
            work,
            seg,
            m,
            b,
            k,
            trials,
            iters,
            out,
        } => {
            let mut pq = Vec::new();
            for &m in &m {
                for &b in &b {
                    pq.push(PqConfig::new(m, b));
                }
            }
            let cfg = RecallConfig {
                spec: work.spec(),
                seg: SegmentConfig {
                    n_init: seg.n_init,
                    n_local: seg.n_local,
                    k: 0,
                },
                pq,
                ks: k,
                seeds: (0..trials).map(|t| work.seed.wrapping_add(t)).collect(),
                max_iter: iters,
            };
            run_recall(&cfg)?.write_csv(output(out.as_deref())?)?;
        }
        Cmd::FitCost {
            clustering,
            compute,
            offload_bandwidth,
            fetch_bandwidth,
            out,
        } => {
            let (alpha1, beta1) =
                fit_clustering(&read_clustering_samples(File::open(clustering)?)?)?;
            let (alpha2, beta2, gamma2) =
                fit_compute(&read_compute_samples(File::open(compute)?)?)?;
            let model = CostModel {
                alpha1,
                beta1,
                alpha2,
                beta2,
                gamma2,
                offload_bandwidth,
                fetch_bandwidth,
            };
            model.validate()?;
            let mut w = output(out.as_deref())?;
            write!(w, "{model}")?;
            w.flush()?;
        }
        Cmd::SimulatePrefill { sim, iters, out } => {
            let model = load_cost(sim.cost.as_deref())?;
            let iters = match iters {
                Some(t) => t,
                None => t_max(&model, sim.s, sim.clip.clip_lo, sim.clip.clip_hi)?,
            };
            let tl = simulate_prefill(&sim.pipeline(), sim.s, &model, iters)?;
            tl.write_csv(output(out.as_deref())?)?;
            eprintln!("iterations={iters} makespan={}", tl.end_to_end);
        }
        Cmd::SimulateDecode {
            sim,
            hit_rate,
            no_prefetch,
            out,
        } => {
            let model = load_cost(sim.cost.as_deref())?;
            let tl = simulate_decode_step(&sim.pipeline(), sim.s, &model, hit_rate, !no_prefetch)?;
            tl.write_csv(output(out.as_deref())?)?;
            eprintln!("makespan={}", tl.end_to_end);
        }
        Cmd::E2e {
            work,
            seg,
            pq,
            k,
            block_size,
            cache_tokens,
            k_cache,
            policy,
            steps,
            layers,
            cost,
            clip,
            no_prefetch,
            out,
        } => {
            let cfg = E2eConfig {
                spec: work.spec(),
                seg: SegmentConfig {
                    n_init: seg.n_init,
                    n_local: seg.n_local,
                    k,
                },
                pq: PqConfig::new(pq.m, pq.b),
                cache: CacheConfig {
                    block_size,
                    capacity_tokens: cache_tokens,
                    policy,
                },
                k_cache,
                steps,
                model: load_cost(cost.as_deref())?,
                num_layers: layers,
                clip_lo: clip.clip_lo,
                clip_hi: clip.clip_hi,
                prefetch: !no_prefetch,
            };
            run_e2e(&cfg)?.write_csv(output(out.as_deref())?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
