//! Hardware-aware choice of the recompute ratio.
//!
//! Per layer the pipeline is bounded by the slower of two overlapped paths,
//! recomputing `rN` tokens or transferring `(1-r)N`, plus a fixed overhead.
//! The arms cross at `r0 = t_i / (t_c + t_i)`. Calibration takes `r0` as a
//! warm start for a golden-section search over a measured mean-TTFT objective.

use std::fmt::Write as _;
use std::time::Instant;

use crate::cachepool::{measure_transfer_cost, TierConfig};
use crate::error::{param_err, Error, Result};

/// `(sqrt(5) - 1) / 2`.
pub const PHI: f64 = 0.618_033_988_749_894_8;

/// Per-token, per-layer costs in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardwareProfile {
    /// Recompute one token through one layer.
    pub t_c: f64,
    /// Move one token's K and V for one layer from the cache pool.
    pub t_i: f64,
    /// Fixed per-layer pipeline overhead.
    pub t_o: f64,
}

impl HardwareProfile {
    pub fn new(t_c: f64, t_i: f64, t_o: f64) -> Result<Self> {
        let p = Self { t_c, t_i, t_o };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.t_c) || !pos(self.t_i) || !(self.t_o >= 0.0 && self.t_o.is_finite()) {
            return Err(param_err(format!(
                "profile needs t_c, t_i > 0 and t_o >= 0, got t_c={} t_i={} t_o={}",
                self.t_c, self.t_i, self.t_o
            )));
        }
        Ok(())
    }

    /// Unclipped crossover of the two roofline arms.
    pub fn crossover(&self) -> f64 {
        self.t_i / (self.t_c + self.t_i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchConfig {
    pub r_min: f64,
    pub r_max: f64,
    pub epsilon: f64,
    pub phi: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { r_min: 0.15, r_max: 0.9, epsilon: 0.01, phi: PHI }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.r_min && self.r_min <= self.r_max && self.r_max <= 1.0) {
            return Err(param_err(format!("need 0 <= r_min <= r_max <= 1, got [{}, {}]", self.r_min, self.r_max)));
        }
        if !(self.epsilon > 0.0) {
            return Err(param_err(format!("epsilon {} must be positive", self.epsilon)));
        }
        if (self.phi - PHI).abs() > 1e-12 {
            return Err(param_err(format!("phi {} is not the golden ratio conjugate", self.phi)));
        }
        Ok(())
    }

    /// `ceil(log_{1/phi}((r_max - r_min) / epsilon)) + 2`.
    pub fn eval_budget(&self) -> usize {
        let span = self.r_max - self.r_min;
        if span < self.epsilon {
            return 2;
        }
        ((span / self.epsilon).ln() / (1.0 / self.phi).ln()).ceil() as usize + 2
    }
}

/// `max(r N t_c, (1-r) N t_i) + t_o`.
pub fn per_layer_latency(r: f64, n: usize, p: &HardwareProfile) -> f64 {
    let n = n as f64;
    (r * n * p.t_c).max((1.0 - r) * n * p.t_i) + p.t_o
}

/// Steady-state prefill latency over `n_layers`, start-up bubble excluded.
pub fn ttft_model(r: f64, n: usize, n_layers: usize, p: &HardwareProfile) -> f64 {
    let n = n as f64;
    let l = n_layers as f64;
    l * (r * n * p.t_c).max((1.0 - r) * n * p.t_i) + l * p.t_o
}

/// Crossover ratio clipped into `[r_min, r_max]`.
pub fn roofline_r0(p: &HardwareProfile, cfg: &SearchConfig) -> f64 {
    p.crossover().clamp(cfg.r_min, cfg.r_max)
}

/// One synthetic calibration request: chunk token counts plus a suffix.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CalRequest {
    pub chunk_lens: Vec<usize>,
    pub suffix_len: usize,
}

impl CalRequest {
    pub fn total_tokens(&self) -> usize {
        self.chunk_lens.iter().sum::<usize>() + self.suffix_len
    }

    pub fn context_tokens(&self) -> usize {
        self.chunk_lens.iter().sum()
    }
}

/// `n` requests whose chunk lengths vary deterministically around `chunk_len`.
pub fn synthetic_cal_set(n: usize, chunks: usize, chunk_len: usize, suffix_len: usize) -> Vec<CalRequest> {
    (0..n)
        .map(|i| CalRequest {
            chunk_lens: (0..chunks).map(|j| chunk_len + ((i * 7 + j * 3) % 5) * chunk_len / 16).collect(),
            suffix_len,
        })
        .collect()
}

/// Mean of `evaluator(s, r)` over the calibration set.
pub fn eval_mean_ttft<F>(mut evaluator: F, cal_set: &[CalRequest], r: f64) -> Result<f64>
where
    F: FnMut(&CalRequest, f64) -> Result<f64>,
{
    if cal_set.is_empty() {
        return Err(param_err("calibration set is empty"));
    }
    let mut sum = 0.0;
    for s in cal_set {
        sum += evaluator(s, r)?;
    }
    Ok(sum / cal_set.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    /// 0 for the two initial probes.
    pub iter: usize,
    pub a: f64,
    pub b: f64,
    pub probe: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub r_star: f64,
    pub eval_count: usize,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
}

struct Probe<F> {
    f: F,
    trace: Vec<TraceRow>,
}

impl<F: FnMut(f64) -> Result<f64>> Probe<F> {
    fn eval(&mut self, iter: usize, a: f64, b: f64, x: f64) -> Result<f64> {
        let v = (self.f)(x)?;
        if !v.is_finite() {
            return Err(Error::Objective { ratio: x, value: v });
        }
        self.trace.push(TraceRow { iter, a, b, probe: x, f: v });
        Ok(v)
    }
}

fn golden_loop<F>(mut probe: Probe<F>, mut a: f64, mut b: f64, x: (f64, f64), cfg: &SearchConfig) -> Result<SearchResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    let phi = cfg.phi;
    let (mut x1, mut x2) = x;
    let mut f1 = probe.eval(0, a, b, x1)?;
    let mut f2 = probe.eval(0, a, b, x2)?;
    let mut iter = 0;
    while (b - a).abs() >= cfg.epsilon {
        iter += 1;
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = probe.eval(iter, a, b, x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = probe.eval(iter, a, b, x2)?;
        }
        // An off-golden warm start can leave the carried probe on the wrong
        // side of the new one; keep x1 <= x2 so the bracket update stays valid.
        if x1 > x2 {
            std::mem::swap(&mut x1, &mut x2);
            std::mem::swap(&mut f1, &mut f2);
        }
    }
    Ok(SearchResult { r_star: (a + b) / 2.0, eval_count: probe.trace.len(), iterations: iter, trace: probe.trace })
}

/// Golden-section search with one initial probe placed at the prior `r0`.
pub fn gss_optimize<F>(f: F, r0: f64, cfg: &SearchConfig) -> Result<SearchResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    cfg.validate()?;
    let (a, b) = (cfg.r_min, cfg.r_max);
    if !(a <= r0 && r0 <= b) {
        return Err(param_err(format!("warm start {r0} outside [{a}, {b}]")));
    }
    let x = if r0 <= (a + b) / 2.0 { (r0, a + cfg.phi * (b - a)) } else { (b - cfg.phi * (b - a), r0) };
    golden_loop(Probe { f, trace: Vec::new() }, a, b, x, cfg)
}

/// Textbook golden-section search with both probes at golden points.
pub fn gss_plain<F>(f: F, cfg: &SearchConfig) -> Result<SearchResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    cfg.validate()?;
    let (a, b) = (cfg.r_min, cfg.r_max);
    let x = (b - cfg.phi * (b - a), a + cfg.phi * (b - a));
    golden_loop(Probe { f, trace: Vec::new() }, a, b, x, cfg)
}

/// Argmin of `f` on `lo, lo+step, ..., hi`; the first minimum wins ties.
pub fn grid_argmin<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, step: f64) -> (f64, f64) {
    let steps = ((hi - lo) / step + 1e-9).floor() as usize;
    let mut best = (lo, f(lo));
    for k in 1..=steps {
        let r = (lo + k as f64 * step).min(hi);
        let v = f(r);
        if v < best.1 {
            best = (r, v);
        }
    }
    best
}

/// Where a profiled cost comes from.
pub enum CostSource<'a> {
    Injected(f64),
    /// A timed measurement returning seconds for the quantity directly.
    Timed(Box<dyn FnMut() -> Result<f64> + 'a>),
}

impl CostSource<'_> {
    fn resolve(self, name: &str) -> Result<f64> {
        let v = match self {
            CostSource::Injected(v) => v,
            CostSource::Timed(mut f) => f().map_err(|e| Error::Profile(format!("{name}: {e}")))?,
        };
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Profile(format!("{name} profiled as {v}")));
        }
        Ok(v)
    }

    fn label(&self) -> &'static str {
        match self {
            CostSource::Injected(_) => "injected",
            CostSource::Timed(_) => "measured",
        }
    }
}

/// Where `t_i` comes from.
pub enum TransferSource {
    Injected(f64),
    /// `measure_transfer_cost` on the tier; `token_bytes` is one token's K+V for one layer.
    Tier { tier: TierConfig, sample_bytes: usize, token_bytes: usize },
}

pub struct CalibrationSetup<'a> {
    pub t_c: CostSource<'a>,
    pub t_i: TransferSource,
    pub t_o: CostSource<'a>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub profile: HardwareProfile,
    pub sources: [String; 3],
    pub r0_unclipped: f64,
    pub r0: f64,
    pub cfg: SearchConfig,
    pub cal_size: usize,
    pub search: SearchResult,
    pub wall_time_s: f64,
}

impl CalibrationReport {
    pub fn r_star(&self) -> f64 {
        self.search.r_star
    }

    /// Line-oriented report. Everything except the final `meta` line is a
    /// pure function of the inputs.
    pub fn to_text(&self) -> String {
        let p = &self.profile;
        let mut s = String::new();
        let _ = writeln!(s, "t_c {:.6e} {}", p.t_c, self.sources[0]);
        let _ = writeln!(s, "t_i {:.6e} {}", p.t_i, self.sources[1]);
        let _ = writeln!(s, "t_o {:.6e} {}", p.t_o, self.sources[2]);
        let _ = writeln!(s, "interval {:.6} {:.6} epsilon {}", self.cfg.r_min, self.cfg.r_max, self.cfg.epsilon);
        let _ = writeln!(s, "cal_size {}", self.cal_size);
        let _ = writeln!(s, "r0 {:.6} unclipped {:.6}", self.r0, self.r0_unclipped);
        let _ = writeln!(s, "trace iter a b probe f");
        for t in &self.search.trace {
            let _ = writeln!(s, "trace {} {:.6} {:.6} {:.6} {:.9e}", t.iter, t.a, t.b, t.probe, t.f);
        }
        let _ = writeln!(s, "evals {} budget {}", self.search.eval_count, self.cfg.eval_budget());
        let _ = writeln!(s, "r_star {:.6}", self.search.r_star);
        let _ = writeln!(s, "meta wall_time_s {:.6}", self.wall_time_s);
        s
    }
}

/// Profiles `t_c`, `t_i`, `t_o`, then searches `[r_min, r_max]` warm-started
/// at the clipped roofline prior. `evaluator(profile, request, r)` returns one
/// request's TTFT.
pub fn calibrate<F>(setup: CalibrationSetup<'_>, mut evaluator: F, cal_set: &[CalRequest], cfg: &SearchConfig) -> Result<CalibrationReport>
where
    F: FnMut(&HardwareProfile, &CalRequest, f64) -> Result<f64>,
{
    let start = Instant::now();
    cfg.validate()?;
    if cal_set.is_empty() {
        return Err(param_err("calibration set is empty"));
    }
    let sources = [
        setup.t_c.label().to_string(),
        match &setup.t_i {
            TransferSource::Injected(_) => "injected".to_string(),
            TransferSource::Tier { tier, .. } => format!("tier:{}", tier.kind),
        },
        setup.t_o.label().to_string(),
    ];
    let t_c = setup.t_c.resolve("t_c")?;
    let t_i = match setup.t_i {
        TransferSource::Injected(v) => v,
        TransferSource::Tier { tier, sample_bytes, token_bytes } => measure_transfer_cost(&tier, sample_bytes, token_bytes)
            .map_err(|e| Error::Profile(format!("t_i: {e}")))?,
    };
    let t_o = setup.t_o.resolve("t_o")?;
    let profile = HardwareProfile::new(t_c, t_i, t_o).map_err(|e| Error::Profile(e.to_string()))?;
    let r0 = roofline_r0(&profile, cfg);
    let search = gss_optimize(|r| eval_mean_ttft(|s, r| evaluator(&profile, s, r), cal_set, r), r0, cfg)?;
    Ok(CalibrationReport {
        profile,
        sources,
        r0_unclipped: profile.crossover(),
        r0,
        cfg: *cfg,
        cal_size: cal_set.len(),
        search,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Evaluator backed by the closed-form steady-state model.
pub fn model_evaluator(n_layers: usize) -> impl FnMut(&HardwareProfile, &CalRequest, f64) -> Result<f64> {
    move |p, s, r| Ok(ttft_model(r, s.context_tokens(), n_layers, p))
}
