//! Command-line surface. The binary only forwards `std::env::args` to [`run`].
//!
//! Exit codes: 0 success, 2 input error, 3 environment or profiling error.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::cachepool::{read_chunk_file, write_chunk_file, Backing, CachePool, TierConfig};
use crate::error::{param_err, Error, Result};
use crate::kvcore::{ChunkId, KvChunk};
use crate::pipesim::{build_count_plan, sim_evaluator, simulate, summary, transferred_bytes, SimParams, TransferModel};
use crate::scheduler::{
    calibrate, grid_argmin, gss_optimize, roofline_r0, synthetic_cal_set, CalRequest, CalibrationReport,
    CalibrationSetup, CostSource, HardwareProfile, SearchConfig, SearchResult, TransferSource,
};
use crate::spectral::{rank_chunk, DEFAULT_ALPHA};
use crate::toymodel::{
    attention_experiment, mean_deviation, profile_overhead, profile_recompute, spectrum_report, DeviationRow,
    ExperimentConfig, Strategy, ToyModel, ToyModelConfig, Workload, COMMITTED_SEEDS,
};

pub mod svg;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_ENV: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Profile(_) => EXIT_ENV,
        _ => EXIT_INPUT,
    }
}

#[derive(Parser, Debug)]
#[command(name = "kvtune", version, about = "Frequency-guided KV reuse toolkit")]
pub struct Cli {
    /// Default seed for synthetic inputs.
    #[arg(long, global = true, env = "CACHETUNE_SEED", default_value_t = 7)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Rank a chunk's tokens and write the ranking into its CTKV file.
    Analyze(AnalyzeArgs),
    /// Store a CTKV chunk in a directory-backed pool.
    PoolPut(PoolPutArgs),
    /// Plan and execute a sparse fetch of one layer.
    PoolFetch(PoolFetchArgs),
    /// Profile t_c/t_i/t_o and search the recompute ratio.
    Calibrate(CalibrateArgs),
    /// Simulate the prefill pipeline at one ratio or over a sweep.
    Simulate(SimulateArgs),
    /// Attention deviation from full prefill per selection strategy.
    AttnExperiment(AttnArgs),
    /// Frequency-decile energy of a chunk's keys and values.
    SpectrumReport(SpectrumArgs),
}

/// `N=64,H=2,D=8,L=4,seed=7`: a chunk encoded by a seeded toy model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub h: usize,
    pub d: usize,
    pub l: usize,
    pub seed: Option<u64>,
}

impl FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SyntheticSpec { n: 64, h: 2, d: 8, l: 4, seed: None };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| param_err(format!("`{part}` is not key=value")))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| param_err(format!("`{v}` is not an integer")));
            match k {
                "N" | "n" => spec.n = num(v)? as usize,
                "H" | "h" => spec.h = num(v)? as usize,
                "D" | "d" => spec.d = num(v)? as usize,
                "L" | "l" => spec.l = num(v)? as usize,
                "seed" => spec.seed = Some(num(v)?),
                other => return Err(param_err(format!("unknown synthetic key `{other}`"))),
            }
        }
        if spec.n == 0 || spec.h == 0 || spec.l == 0 || spec.d == 0 || spec.d % 2 != 0 {
            return Err(param_err("synthetic chunk needs N, H, L >= 1 and an even D"));
        }
        Ok(spec)
    }
}

impl SyntheticSpec {
    pub fn build(&self, default_seed: u64) -> Result<KvChunk> {
        let seed = self.seed.unwrap_or(default_seed);
        let cfg = ToyModelConfig {
            n_layers: self.l,
            n_heads: self.h,
            head_dim: self.d,
            rope: crate::rope::RopeParams::new(self.d)?,
            ..ToyModelConfig::desk(seed)
        };
        let model = ToyModel::new(cfg)?;
        let tokens: Vec<u32> = {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            (0..self.n).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect()
        };
        model.encode_chunk_isolated(format!("synthetic-{seed}"), &tokens)
    }
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// CTKV file to rank in place.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub input: Option<PathBuf>,
    /// Generate a chunk instead, e.g. `N=64,H=2,D=8,L=4,seed=7`.
    #[arg(long)]
    pub synthetic: Option<SyntheticSpec>,
    /// Where to write the synthetic chunk.
    #[arg(long, default_value = "synthetic.ctkv")]
    pub out: PathBuf,
    /// Low-pass cutoff ratio.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Rows of the top-k table.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Args, Debug, Clone)]
pub struct TierArgs {
    /// Preset (`hdd`, `ssd`, `cpu-mem`, `gpu-sim`) or a tier config file.
    #[arg(long, default_value = "hdd")]
    pub tier: String,
    /// Back the tier with this directory.
    #[arg(long)]
    pub pool_dir: Option<PathBuf>,
}

impl TierArgs {
    pub fn resolve(&self) -> Result<TierConfig> {
        let tier = match TierConfig::preset(&self.tier) {
            Some(t) => t,
            None => {
                let path = Path::new(&self.tier);
                if !path.exists() {
                    return Err(param_err(format!("`{}` is neither a tier preset nor a file", self.tier)));
                }
                TierConfig::load(path)?
            }
        };
        Ok(match &self.pool_dir {
            Some(d) => tier.with_dir(d),
            None => tier,
        })
    }

    fn resolve_dir_backed(&self) -> Result<TierConfig> {
        let tier = self.resolve()?;
        if !tier.is_file_backed() {
            return Err(param_err("this command needs a directory-backed tier (pass --pool-dir)"));
        }
        Ok(tier)
    }
}

#[derive(Args, Debug)]
pub struct PoolPutArgs {
    #[command(flatten)]
    pub tier: TierArgs,
    #[arg(long)]
    pub input: PathBuf,
    /// Chunk id; defaults to the file stem.
    #[arg(long)]
    pub id: Option<String>,
    /// Cutoff used when the file carries no ranking.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
}

#[derive(Args, Debug)]
pub struct PoolFetchArgs {
    #[command(flatten)]
    pub tier: TierArgs,
    #[arg(long)]
    pub id: String,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0.15)]
    pub r: f64,
}

/// Shape of the simulated request.
#[derive(Args, Debug, Clone, Copy)]
pub struct GeometryArgs {
    #[arg(long, default_value_t = 32)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub chunks: usize,
    #[arg(long, default_value_t = 1024)]
    pub chunk_len: usize,
    #[arg(long, default_value_t = 32)]
    pub suffix: usize,
    /// Recompute seconds per token per layer.
    #[arg(long, default_value_t = 40e-6)]
    pub t_c: f64,
    /// Fixed seconds per layer.
    #[arg(long, default_value_t = 20e-6)]
    pub t_o: f64,
}

impl Default for GeometryArgs {
    fn default() -> Self {
        Self { layers: 32, heads: 8, head_dim: 128, chunks: 4, chunk_len: 1024, suffix: 32, t_c: 40e-6, t_o: 20e-6 }
    }
}

impl GeometryArgs {
    pub fn token_bytes(&self) -> usize {
        self.heads * self.head_dim * 4 * 2
    }

    /// Profile with `t_i` from the tier's analytic model over one chunk layer.
    pub fn profile(&self, tier: &TierConfig) -> Result<HardwareProfile> {
        let modeled = tier.clone().with_backing(Backing::InMemory);
        let t_i = crate::cachepool::measure_transfer_cost(&modeled, self.chunk_len * self.token_bytes(), self.token_bytes())?;
        HardwareProfile::new(self.t_c, t_i, self.t_o)
    }
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 0.15)]
    pub r_min: f64,
    #[arg(long, default_value_t = 0.9)]
    pub r_max: f64,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
}

impl SearchArgs {
    pub fn config(&self) -> SearchConfig {
        SearchConfig { r_min: self.r_min, r_max: self.r_max, epsilon: self.epsilon, ..SearchConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvaluatorKind {
    Sim,
    Real,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub tier: TierArgs,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Calibration-set size.
    #[arg(long, default_value_t = 10)]
    pub cal_n: usize,
    #[arg(long, value_enum, default_value_t = EvaluatorKind::Sim)]
    pub evaluator: EvaluatorKind,
    /// Report file.
    #[arg(long, default_value = "calibration.txt")]
    pub out: PathBuf,
}

/// `lo:hi:step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl FromStr for SweepSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| param_err(format!("bad sweep `{s}`, want lo:hi:step"))))
            .collect::<Result<_>>()?;
        let [lo, hi, step] = parts[..] else {
            return Err(param_err(format!("bad sweep `{s}`, want lo:hi:step")));
        };
        if !(0.0 <= lo && lo <= hi && hi <= 1.0 && step > 0.0) {
            return Err(param_err(format!("sweep {lo}:{hi}:{step} must satisfy 0 <= lo <= hi <= 1, step > 0")));
        }
        Ok(Self { lo, hi, step })
    }
}

impl SweepSpec {
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|k| ((self.lo + k as f64 * self.step) * 1e9).round() / 1e9).collect()
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub tier: TierArgs,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Single ratio to simulate.
    #[arg(long, default_value_t = 0.15, conflicts_with = "sweep")]
    pub r: f64,
    /// Sweep `lo:hi:step` instead of a single ratio.
    #[arg(long)]
    pub sweep: Option<SweepSpec>,
    /// Directory for CSV (and SVG) outputs.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Also emit an SVG plot.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Args, Debug)]
pub struct AttnArgs {
    /// Comma-separated seeds; defaults to the committed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.15)]
    pub r: f64,
    /// Strategies to run (comma-separated); default all.
    #[arg(long, value_delimiter = ',')]
    pub strategy: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value = "attention_deviation.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SpectrumArgs {
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub synthetic: Option<SyntheticSpec>,
    #[arg(long, default_value = "spectrum.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: bool,
}

/// Parses `args` (including the program name), runs, prints, returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let mut out = String::new();
    let res = dispatch(&cli, &mut out);
    print!("{out}");
    let _ = std::io::stdout().flush();
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cli: &Cli, out: &mut String) -> Result<()> {
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(a, cli.seed, out),
        Command::PoolPut(a) => cmd_pool_put(a, out),
        Command::PoolFetch(a) => cmd_pool_fetch(a, out),
        Command::Calibrate(a) => cmd_calibrate(a, cli.seed, out).map(|_| ()),
        Command::Simulate(a) => cmd_simulate(a, out).map(|_| ()),
        Command::AttnExperiment(a) => cmd_attn_experiment(a, out).map(|_| ()),
        Command::SpectrumReport(a) => cmd_spectrum_report(a, cli.seed, out),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Reads a user-supplied CTKV file; a missing or unreadable path is an input error.
fn read_input(path: &Path) -> Result<(KvChunk, Option<crate::spectral::ImportanceRanking>)> {
    read_chunk_file(path).map_err(|e| match e {
        Error::Io(io) => param_err(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

pub fn cmd_analyze(a: &AnalyzeArgs, seed: u64, out: &mut String) -> Result<()> {
    let (chunk, path) = match (&a.input, &a.synthetic) {
        (Some(p), _) => (read_input(p)?.0, p.clone()),
        (None, Some(spec)) => (spec.build(seed)?, a.out.clone()),
        (None, None) => return Err(param_err("pass --input or --synthetic")),
    };
    let ranking = rank_chunk(&chunk, a.alpha)?;
    let written = write_chunk_file(&path, &chunk, Some(&ranking))?;
    let agg = ranking.aggregate_scores();
    let _ = writeln!(out, "chunk {} tokens {} layers {} alpha {}", chunk.chunk_id, chunk.token_count(), chunk.n_layers(), a.alpha);
    let _ = writeln!(out, "wrote {} ({written} bytes)", path.display());
    let _ = writeln!(out, "rank token score");
    for (rank, &t) in ranking.aggregate_order.iter().take(a.top).enumerate() {
        let _ = writeln!(out, "{rank} {t} {:.6e}", agg[t as usize]);
    }
    let _ = writeln!(out, "layer min mean max");
    for (l, s) in ranking.per_layer_scores.iter().enumerate() {
        let min = s.iter().copied().fold(f64::INFINITY, f64::min);
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let _ = writeln!(out, "{l} {min:.6e} {mean:.6e} {max:.6e}");
    }
    Ok(())
}

pub fn cmd_pool_put(a: &PoolPutArgs, out: &mut String) -> Result<()> {
    let tier = a.tier.resolve_dir_backed()?;
    let (mut chunk, ranking) = read_input(&a.input)?;
    if let Some(id) = &a.id {
        chunk.chunk_id = ChunkId::new(id.clone());
    }
    let ranking = match ranking {
        Some(r) => r,
        None => rank_chunk(&chunk, a.alpha)?,
    };
    let pool = CachePool::open_dir(&tier)?;
    let receipt = pool.put_chunk(&chunk, &ranking, &tier)?;
    let _ = writeln!(out, "chunk {}", receipt.chunk_id);
    let _ = writeln!(out, "tier {}", tier.kind);
    let _ = writeln!(out, "bytes_written {}", receipt.bytes_written);
    let _ = writeln!(out, "modeled_write_s {:.9e}", receipt.modeled_write_seconds);
    Ok(())
}

pub fn cmd_pool_fetch(a: &PoolFetchArgs, out: &mut String) -> Result<()> {
    let tier = a.tier.resolve_dir_backed()?;
    let pool = CachePool::open_dir(&tier)?;
    let plan = pool.plan_sparse_fetch(&ChunkId::new(a.id.clone()), a.layer, a.r)?;
    let got = pool.fetch_sparse(&plan)?;
    let _ = writeln!(out, "chunk {} layer {} r {}", plan.chunk_id, plan.layer, a.r);
    let _ = writeln!(out, "keep_tokens {}", plan.keep_indices.len());
    let _ = writeln!(out, "byte_ranges {}", plan.byte_ranges.len());
    let _ = writeln!(out, "expected_bytes {}", plan.expected_bytes);
    let _ = writeln!(out, "bytes_read {}", got.bytes_read);
    let _ = writeln!(out, "modeled_read_s {:.9e}", got.modeled_seconds);
    Ok(())
}

/// Output of a simulation sweep.
#[derive(Clone, Debug)]
pub struct SweepReport {
    pub profile: HardwareProfile,
    pub r0: f64,
    /// `(r, ttft_s, transferred_bytes)`.
    pub points: Vec<(f64, f64, usize)>,
    /// 0.001-grid argmin over `[r_min, r_max]`.
    pub grid_r_star: f64,
    pub gss: SearchResult,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("r,ttft_s,transferred_bytes\n");
        for (r, t, b) in &self.points {
            let _ = writeln!(s, "{r:.4},{t:.9e},{b}");
        }
        s
    }

    /// Sweep point with the lowest TTFT; the first wins ties.
    pub fn sweep_argmin(&self) -> f64 {
        self.points.iter().fold((f64::NAN, f64::INFINITY), |best, &(r, t, _)| if t < best.1 { (r, t) } else { best }).0
    }
}

/// Simulated TTFT of the request described by `g` at ratio `r`.
pub fn simulated_ttft(g: &GeometryArgs, profile: &HardwareProfile, r: f64) -> Result<(f64, usize)> {
    let plan = build_count_plan(&vec![g.chunk_len; g.chunks], g.heads, g.head_dim, r, g.layers, g.suffix)?;
    Ok((simulate(&plan, &SimParams::per_token(*profile)).ttft_s, transferred_bytes(&plan)))
}

pub fn simulate_sweep(g: &GeometryArgs, tier: &TierConfig, sweep: &SweepSpec, cfg: &SearchConfig) -> Result<SweepReport> {
    let profile = g.profile(tier)?;
    let points = sweep
        .points()
        .into_iter()
        .map(|r| simulated_ttft(g, &profile, r).map(|(t, b)| (r, t, b)))
        .collect::<Result<Vec<_>>>()?;
    let r0 = roofline_r0(&profile, cfg);
    let gss = gss_optimize(|r| simulated_ttft(g, &profile, r).map(|x| x.0), r0, cfg)?;
    let (grid_r_star, _) =
        grid_argmin(|r| simulated_ttft(g, &profile, r).map_or(f64::INFINITY, |x| x.0), cfg.r_min, cfg.r_max, 0.001);
    Ok(SweepReport { profile, r0, points, grid_r_star, gss })
}

pub enum SimulateOutput {
    Single { csv: String, summary: String },
    Sweep(SweepReport),
}

pub fn cmd_simulate(a: &SimulateArgs, out: &mut String) -> Result<SimulateOutput> {
    let tier = a.tier.resolve()?;
    let g = &a.geometry;
    let cfg = a.search.config();
    cfg.validate()?;
    fs::create_dir_all(&a.out_dir)?;
    if let Some(sweep) = &a.sweep {
        let rep = simulate_sweep(g, &tier, sweep, &cfg)?;
        let csv = rep.to_csv();
        write_file(&a.out_dir.join("sweep.csv"), csv.as_bytes())?;
        if a.svg {
            write_file(&a.out_dir.join("sweep.svg"), svg::curve(&rep.points).as_bytes())?;
        }
        let p = &rep.profile;
        let _ = writeln!(out, "tier {}", tier.kind);
        let _ = writeln!(out, "t_c {:.6e} t_i {:.6e} t_o {:.6e}", p.t_c, p.t_i, p.t_o);
        let _ = writeln!(out, "r0 {:.6} unclipped {:.6}", rep.r0, p.crossover());
        out.push_str(&csv);
        let _ = writeln!(out, "sweep_argmin {:.4}", rep.sweep_argmin());
        let _ = writeln!(out, "grid_argmin {:.4}", rep.grid_r_star);
        let _ = writeln!(out, "gss_r_star {:.6} evals {}", rep.gss.r_star, rep.gss.eval_count);
        return Ok(SimulateOutput::Sweep(rep));
    }
    if !(0.0..=1.0).contains(&a.r) {
        return Err(param_err(format!("r = {} is outside [0, 1]", a.r)));
    }
    let profile = g.profile(&tier)?;
    let plan = build_count_plan(&vec![g.chunk_len; g.chunks], g.heads, g.head_dim, a.r, g.layers, g.suffix)?;
    let tl = simulate(&plan, &SimParams::per_token(profile));
    tl.verify()?;
    let csv = tl.to_csv();
    let sum = summary(&plan, &tl);
    write_file(&a.out_dir.join("timeline.csv"), csv.as_bytes())?;
    if a.svg {
        write_file(&a.out_dir.join("timeline.svg"), svg::gantt(&tl).as_bytes())?;
    }
    let _ = writeln!(out, "tier {}", tier.kind);
    let _ = writeln!(out, "t_c {:.6e} t_i {:.6e} t_o {:.6e}", profile.t_c, profile.t_i, profile.t_o);
    out.push_str(&sum);
    Ok(SimulateOutput::Single { csv, summary: sum })
}

/// Chunks, rankings and token ids of one calibration request, staged in a pool.
struct Staged {
    chunk_tokens: Vec<Vec<u32>>,
    ids: Vec<ChunkId>,
    suffix: Vec<u32>,
}

pub fn cmd_calibrate(a: &CalibrateArgs, seed: u64, out: &mut String) -> Result<CalibrationReport> {
    let tier = a.tier.resolve()?;
    let cfg = a.search.config();
    let report = match a.evaluator {
        EvaluatorKind::Sim => {
            let g = a.geometry;
            let cal = synthetic_cal_set(a.cal_n, g.chunks, g.chunk_len, g.suffix);
            let setup = CalibrationSetup {
                t_c: CostSource::Injected(g.t_c),
                t_i: TransferSource::Tier {
                    tier: tier.clone(),
                    sample_bytes: g.chunk_len * g.token_bytes(),
                    token_bytes: g.token_bytes(),
                },
                t_o: CostSource::Injected(g.t_o),
            };
            calibrate(setup, sim_evaluator(g.layers, g.heads, g.head_dim, TransferModel::PerToken), &cal, &cfg)?
        }
        EvaluatorKind::Real => calibrate_real(&tier, a, seed, &cfg)?,
    };
    let text = report.to_text();
    write_file(&a.out, text.as_bytes())?;
    let _ = writeln!(out, "tier {}", tier.kind);
    let _ = writeln!(out, "r0 {:.6}", report.r0);
    let _ = writeln!(out, "r_star {:.6}", report.r_star());
    let _ = writeln!(out, "evals {}", report.search.eval_count);
    let _ = writeln!(out, "report {}", a.out.display());
    Ok(report)
}

/// Timed toy-model runs that read reused rows from a pool on `tier`.
fn calibrate_real(tier: &TierConfig, a: &CalibrateArgs, seed: u64, cfg: &SearchConfig) -> Result<CalibrationReport> {
    let exp = ExperimentConfig::default();
    let cal = synthetic_cal_set(a.cal_n, exp.n_chunks, exp.chunk_len, exp.suffix_len);
    let base = Workload::new(seed, &exp)?;
    let model = base.model;
    let pool = CachePool::new();
    let scratch = match &tier.backing {
        Backing::Dir(d) => {
            fs::create_dir_all(d)?;
            Some(tempfile::tempdir_in(d)?)
        }
        Backing::InMemory => None,
    };
    let tier = match &scratch {
        Some(dir) => &tier.clone().with_dir(dir.path()),
        None => tier,
    };
    let mut staged: HashMap<CalRequest, Staged> = HashMap::new();
    let mut rng = {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    };
    for (ri, req) in cal.iter().enumerate() {
        if staged.contains_key(req) {
            continue;
        }
        use rand::Rng;
        let chunk_tokens: Vec<Vec<u32>> = req
            .chunk_lens
            .iter()
            .map(|&n| (0..n).map(|_| rng.random_range(0..model.cfg.vocab_size as u32)).collect())
            .collect();
        let mut ids = Vec::new();
        for (ci, t) in chunk_tokens.iter().enumerate() {
            let chunk = model.encode_chunk_isolated(format!("cal{ri}-{ci}"), t)?;
            let ranking = rank_chunk(&chunk, DEFAULT_ALPHA)?;
            pool.put_chunk(&chunk, &ranking, tier)?;
            ids.push(chunk.chunk_id.clone());
        }
        let suffix = (0..req.suffix_len).map(|_| rng.random_range(0..model.cfg.vocab_size as u32)).collect();
        staged.insert(req.clone(), Staged { chunk_tokens, ids, suffix });
    }
    let token_bytes = model.cfg.hidden() * 4 * 2;
    let setup = CalibrationSetup {
        t_c: CostSource::Timed(Box::new(|| profile_recompute(&model, 128, 3))),
        t_i: TransferSource::Tier { tier: tier.clone(), sample_bytes: 8 << 20, token_bytes },
        t_o: CostSource::Timed(Box::new(|| profile_overhead(&model, 5))),
    };
    let evaluator = |_: &HardwareProfile, req: &CalRequest, r: f64| -> Result<f64> {
        let s = staged.get(req).ok_or_else(|| Error::Profile("request was not staged".into()))?;
        let rankings = s.ids.iter().map(|id| pool.ranking(id)).collect::<Result<Vec<_>>>()?;
        let inputs: Vec<(&[u32], &crate::spectral::ImportanceRanking)> =
            s.chunk_tokens.iter().map(Vec::as_slice).zip(rankings.iter().map(|r| r.as_ref())).collect();
        let start = Instant::now();
        model.selective_prefill_with(&inputs, &s.suffix, r, |ci, layer, keep| {
            let plan = pool.plan_sparse_fetch(&s.ids[ci], layer, r)?;
            debug_assert_eq!(plan.keep_indices, keep);
            let got = pool.fetch_sparse(&plan)?;
            Ok((got.keys_raw, got.values))
        })?;
        Ok(start.elapsed().as_secs_f64())
    };
    calibrate(setup, evaluator, &cal, cfg)
}

pub fn parse_strategies(names: &[String]) -> Result<Vec<Strategy>> {
    if names.is_empty() || names.iter().any(|n| n == "all") {
        return Ok(Strategy::ALL.to_vec());
    }
    names.iter().map(|n| Strategy::parse(n)).collect()
}

pub fn deviation_csv(rows: &[DeviationRow], strategies: &[Strategy]) -> String {
    let mut s = String::from("seed,strategy,r,deviation\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.4},{:.9e}", r.seed, r.strategy.name(), r.r, r.deviation);
    }
    for &st in strategies {
        if let Some(m) = mean_deviation(rows, st) {
            let r = rows.iter().find(|x| x.strategy == st).map_or(0.0, |x| x.r);
            let _ = writeln!(s, "mean,{},{r:.4},{m:.9e}", st.name());
        }
    }
    s
}

pub fn cmd_attn_experiment(a: &AttnArgs, out: &mut String) -> Result<Vec<DeviationRow>> {
    let strategies = parse_strategies(&a.strategy)?;
    let seeds: Vec<u64> = if a.seeds.is_empty() { COMMITTED_SEEDS.to_vec() } else { a.seeds.clone() };
    let cfg = ExperimentConfig { r: a.r, alpha: a.alpha, ..ExperimentConfig::default() };
    let per_seed: Vec<Result<Vec<DeviationRow>>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let strategies = &strategies;
                s.spawn(move || attention_experiment(seed, &cfg, strategies))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("experiment thread panicked")).collect()
    });
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    let csv = deviation_csv(&rows, &strategies);
    write_file(&a.out, csv.as_bytes())?;
    out.push_str(&csv);
    Ok(rows)
}

pub fn cmd_spectrum_report(a: &SpectrumArgs, seed: u64, out: &mut String) -> Result<()> {
    let chunk = match (&a.input, &a.synthetic) {
        (Some(p), _) => read_input(p)?.0,
        (None, Some(spec)) => spec.build(seed)?,
        (None, None) => return Err(param_err("pass --input or --synthetic")),
    };
    let rep = spectrum_report(&chunk)?;
    let csv = rep.to_csv();
    write_file(&a.out, csv.as_bytes())?;
    if a.svg {
        write_file(&a.out.with_extension("svg"), svg::bars(&rep).as_bytes())?;
    }
    out.push_str(&csv);
    Ok(())
}
