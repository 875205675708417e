//! Event-driven model of the three-stream prefill pipeline.
//!
//! Streams are FIFO queues. A task starts when its stream is free and every
//! dependency has finished. Per layer `l` the forward stream runs a `sync`
//! step of length `t_o`, then the recompute stream works on the selected
//! tokens while the transfer stream prefetches layer `l+1`. Fusion of layer `l`
//! waits for its own transfer and recompute. The layer-0 transfer runs before
//! anything else, so the simulated total exceeds the steady-state model by
//! `min(C, T)` for uniform layers.

use std::fmt::{self, Write as _};

use crate::cachepool::TierConfig;
use crate::error::{shape_err, Error, Result};
use crate::kvcore::{ChunkGeometry, ChunkId, DType, KvChunk, SeqTensor};
use crate::rope::{rope_apply, RopeParams};
use crate::scheduler::{CalRequest, HardwareProfile};
use crate::spectral::ImportanceRanking;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerClass {
    /// Layer 0: gathers the reused chunks.
    Collection,
    /// Layer 1: forwards only the selected queries.
    Check,
    /// Every later layer.
    Fusion,
}

impl LayerClass {
    pub fn for_layer(layer: usize) -> Self {
        match layer {
            0 => LayerClass::Collection,
            1 => LayerClass::Check,
            _ => LayerClass::Fusion,
        }
    }
}

/// Shape of one cached chunk, without its tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkMeta {
    pub chunk_id: ChunkId,
    pub geometry: ChunkGeometry,
    pub dtype: DType,
}

impl ChunkMeta {
    pub fn of(chunk: &KvChunk) -> Self {
        Self { chunk_id: chunk.chunk_id.clone(), geometry: chunk.geometry(), dtype: chunk.dtype }
    }
}

/// One chunk's share of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkLayerPlan {
    pub chunk_id: ChunkId,
    /// Global position of the chunk's first token.
    pub offset: usize,
    pub n_tokens: usize,
    /// Local indices recomputed online, ascending.
    pub recompute_indices: Vec<usize>,
    /// Local indices fetched from the pool, ascending.
    pub keep_indices: Vec<usize>,
    /// Global RoPE positions of the fetched keys, aligned with `keep_indices`.
    pub keep_positions: Vec<usize>,
    pub fetch_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub layer: usize,
    pub class: LayerClass,
    pub chunks: Vec<ChunkLayerPlan>,
}

impl LayerPlan {
    pub fn recompute_tokens(&self) -> usize {
        self.chunks.iter().map(|c| c.recompute_indices.len()).sum()
    }

    pub fn keep_tokens(&self) -> usize {
        self.chunks.iter().map(|c| c.keep_indices.len()).sum()
    }

    pub fn fetch_bytes(&self) -> usize {
        self.chunks.iter().map(|c| c.fetch_bytes).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelinePlan {
    pub r: f64,
    pub n_heads: usize,
    pub head_dim: usize,
    pub context_tokens: usize,
    /// New prompt tokens after the chunks; always forwarded.
    pub suffix_len: usize,
    pub layers: Vec<LayerPlan>,
}

impl PipelinePlan {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Concatenates chunks on one global token axis and splits every layer into
/// recomputed and fetched tokens from each chunk's aggregate ranking.
pub fn build_plan(
    metas: &[ChunkMeta],
    rankings: &[&ImportanceRanking],
    r: f64,
    n_layers: usize,
    suffix_len: usize,
) -> Result<PipelinePlan> {
    if metas.is_empty() {
        return Err(shape_err("a plan needs at least one chunk"));
    }
    if metas.len() != rankings.len() {
        return Err(shape_err(format!("{} chunks but {} rankings", metas.len(), rankings.len())));
    }
    if n_layers == 0 {
        return Err(shape_err("a plan needs at least one layer"));
    }
    let (h, d) = (metas[0].geometry.n_heads, metas[0].geometry.head_dim);
    let mut per_chunk = Vec::with_capacity(metas.len());
    let mut offset = 0;
    for (m, rk) in metas.iter().zip(rankings) {
        let g = &m.geometry;
        if (g.n_heads, g.head_dim) != (h, d) {
            return Err(shape_err(format!(
                "chunk {} has (H, D) = ({}, {}), expected ({h}, {d})",
                m.chunk_id, g.n_heads, g.head_dim
            )));
        }
        if g.n_layers != n_layers {
            return Err(shape_err(format!("chunk {} has {} layers, plan has {n_layers}", m.chunk_id, g.n_layers)));
        }
        if rk.n_tokens != g.n_tokens {
            return Err(shape_err(format!(
                "ranking covers {} tokens, chunk {} has {}",
                rk.n_tokens, m.chunk_id, g.n_tokens
            )));
        }
        let recompute = rk.indices_for_ratio(r)?;
        let keep = rk.complement_for_ratio(r)?;
        let keep_positions = keep.iter().map(|&i| offset + i).collect();
        let fetch_bytes = keep.len() * g.token_layer_bytes(m.dtype);
        per_chunk.push(ChunkLayerPlan {
            chunk_id: m.chunk_id.clone(),
            offset,
            n_tokens: g.n_tokens,
            recompute_indices: recompute,
            keep_indices: keep,
            keep_positions,
            fetch_bytes,
        });
        offset += g.n_tokens;
    }
    let layers = (0..n_layers)
        .map(|layer| LayerPlan { layer, class: LayerClass::for_layer(layer), chunks: per_chunk.clone() })
        .collect();
    Ok(PipelinePlan { r, n_heads: h, head_dim: d, context_tokens: offset, suffix_len, layers })
}

/// Plan for a request described only by token counts. Tokens are ranked by
/// index, which leaves every timing and byte count unchanged.
pub fn build_count_plan(
    chunk_lens: &[usize],
    n_heads: usize,
    head_dim: usize,
    r: f64,
    n_layers: usize,
    suffix_len: usize,
) -> Result<PipelinePlan> {
    let metas: Vec<ChunkMeta> = chunk_lens
        .iter()
        .enumerate()
        .map(|(i, &n)| ChunkMeta {
            chunk_id: ChunkId::new(format!("chunk{i}")),
            geometry: ChunkGeometry { n_layers, n_tokens: n, n_heads, head_dim },
            dtype: DType::F32,
        })
        .collect();
    let rankings = chunk_lens
        .iter()
        .map(|&n| ImportanceRanking::from_order((0..n as u32).collect(), n_layers, 0.5))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ImportanceRanking> = rankings.iter().collect();
    build_plan(&metas, &refs, r, n_layers, suffix_len)
}

/// Bytes moved from the pool across all layers and chunks.
pub fn transferred_bytes(plan: &PipelinePlan) -> usize {
    plan.layers.iter().map(LayerPlan::fetch_bytes).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Forward,
    Transfer,
    Recompute,
}

impl Stream {
    fn idx(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Forward => "forward",
            Stream::Transfer => "transfer",
            Stream::Recompute => "recompute",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub stream: Stream,
    pub layer: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub label: String,
    /// Indices of events that must finish first.
    pub deps: Vec<usize>,
}

impl Event {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timeline {
    pub events: Vec<Event>,
    pub ttft_s: f64,
}

impl Timeline {
    /// TTFT if every event ran back to back on one stream.
    pub fn serialized_ttft(&self) -> f64 {
        self.events.iter().map(Event::duration).sum()
    }

    pub fn find(&self, label: &str) -> Option<&Event> {
        self.events.iter().find(|e| e.label == label)
    }

    /// Checks dependency edges and per-stream ordering.
    pub fn verify(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            if !(e.end_s >= e.start_s) {
                return Err(Error::InvalidPlan(format!("event {} ends before it starts", e.label)));
            }
            for &d in &e.deps {
                let dep = self.events.get(d).ok_or_else(|| Error::InvalidPlan(format!("dangling dependency {d}")))?;
                if d >= i || dep.end_s > e.start_s {
                    return Err(Error::InvalidPlan(format!("{} starts before {} ends", e.label, dep.label)));
                }
            }
        }
        for s in [Stream::Forward, Stream::Transfer, Stream::Recompute] {
            let mut last_end = f64::NEG_INFINITY;
            for e in self.events.iter().filter(|e| e.stream == s) {
                if e.start_s < last_end {
                    return Err(Error::InvalidPlan(format!("{} overlaps its predecessor on {s}", e.label)));
                }
                last_end = e.end_s;
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stream,layer,start_s,end_s,label\n");
        for e in &self.events {
            let _ = writeln!(s, "{},{},{:.9e},{:.9e},{}", e.stream, e.layer, e.start_s, e.end_s, e.label);
        }
        s
    }
}

/// How a layer's fetch is charged.
#[derive(Clone, Debug, PartialEq)]
pub enum TransferModel {
    /// `keep_tokens * t_i`.
    PerToken,
    /// `fixed_latency + bytes / read_bw` once per chunk fetch.
    Tier(TierConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimParams {
    pub profile: HardwareProfile,
    pub transfer: TransferModel,
}

impl SimParams {
    pub fn per_token(profile: HardwareProfile) -> Self {
        Self { profile, transfer: TransferModel::PerToken }
    }

    fn transfer_time(&self, layer: &LayerPlan) -> f64 {
        match &self.transfer {
            TransferModel::PerToken => layer.keep_tokens() as f64 * self.profile.t_i,
            TransferModel::Tier(t) => layer
                .chunks
                .iter()
                .filter(|c| c.fetch_bytes > 0)
                .map(|c| t.read_time(c.fetch_bytes))
                .sum(),
        }
    }

    fn recompute_time(&self, plan: &PipelinePlan, layer: &LayerPlan) -> f64 {
        (layer.recompute_tokens() + plan.suffix_len) as f64 * self.profile.t_c
    }
}

struct Scheduler {
    events: Vec<Event>,
    free: [f64; 3],
}

impl Scheduler {
    fn push(&mut self, stream: Stream, layer: usize, duration: f64, label: String, deps: &[usize]) -> usize {
        let ready = deps.iter().map(|&d| self.events[d].end_s).fold(self.free[stream.idx()], f64::max);
        let end = ready + duration;
        self.free[stream.idx()] = end;
        self.events.push(Event { stream, layer, start_s: ready, end_s: end, label, deps: deps.to_vec() });
        self.events.len() - 1
    }
}

/// Schedules the plan and returns its timeline; deterministic.
pub fn simulate(plan: &PipelinePlan, params: &SimParams) -> Timeline {
    let mut s = Scheduler { events: Vec::new(), free: [0.0; 3] };
    let n = plan.n_layers();
    if n == 0 {
        return Timeline { events: Vec::new(), ttft_s: 0.0 };
    }
    let mut transfer = s.push(Stream::Transfer, 0, params.transfer_time(&plan.layers[0]), "transfer[0]".into(), &[]);
    let mut prev_fusion: Option<usize> = None;
    for (l, layer) in plan.layers.iter().enumerate() {
        let mut deps = vec![transfer];
        deps.extend(prev_fusion);
        let sync = s.push(Stream::Forward, l, params.profile.t_o, format!("sync[{l}]"), &deps);
        let recompute =
            s.push(Stream::Recompute, l, params.recompute_time(plan, layer), format!("recompute[{l}]"), &[sync]);
        let next_transfer = plan
            .layers
            .get(l + 1)
            .map(|next| s.push(Stream::Transfer, l + 1, params.transfer_time(next), format!("transfer[{}]", l + 1), &[sync]));
        let rope = s.push(Stream::Recompute, l, 0.0, format!("rope[{l}]"), &[recompute, transfer]);
        let fusion = s.push(Stream::Forward, l, 0.0, format!("fusion[{l}]"), &[recompute, rope, transfer]);
        prev_fusion = Some(fusion);
        if let Some(t) = next_transfer {
            transfer = t;
        }
    }
    let ttft_s = s.events.iter().map(|e| e.end_s).fold(0.0, f64::max);
    Timeline { events: s.events, ttft_s }
}

/// Short text summary of a simulated plan.
pub fn summary(plan: &PipelinePlan, timeline: &Timeline) -> String {
    let recompute: usize = plan.layers.iter().map(LayerPlan::recompute_tokens).sum();
    format!(
        "r {:.4}\nlayers {}\ncontext_tokens {}\nsuffix_tokens {}\nrecompute_tokens {}\ntransferred_bytes {}\nttft_s {:.9e}\nserialized_s {:.9e}\n",
        plan.r,
        plan.n_layers(),
        plan.context_tokens,
        plan.suffix_len,
        recompute,
        transferred_bytes(plan),
        timeline.ttft_s,
        timeline.serialized_ttft()
    )
}

/// Evaluator for calibration: simulates each request's count plan.
pub fn sim_evaluator(
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    transfer: TransferModel,
) -> impl FnMut(&HardwareProfile, &CalRequest, f64) -> Result<f64> {
    move |profile, req, r| {
        let plan = build_count_plan(&req.chunk_lens, n_heads, head_dim, r, n_layers, req.suffix_len)?;
        let params = SimParams { profile: *profile, transfer: transfer.clone() };
        Ok(simulate(&plan, &params).ttft_s)
    }
}

/// Fetched rows of one chunk layer: pre-RoPE keys, values, local indices.
pub struct Reused<'a> {
    pub keys_raw: &'a SeqTensor,
    pub values: &'a SeqTensor,
    pub indices: &'a [usize],
}

/// Freshly computed rows: post-RoPE keys, values, local indices.
pub struct Recomputed<'a> {
    pub keys: &'a SeqTensor,
    pub values: &'a SeqTensor,
    pub indices: &'a [usize],
}

/// Scatter fusion of one layer into an `n`-token working buffer.
///
/// Reused keys are rotated to `positions[i]` for their local index `i`;
/// `positions` has one entry per token of the chunk.
pub fn fuse_layer(
    reused: Reused<'_>,
    recomputed: Recomputed<'_>,
    positions: &[usize],
    rope: &RopeParams,
    n: usize,
) -> Result<(SeqTensor, SeqTensor)> {
    if positions.len() != n {
        return Err(shape_err(format!("{} positions for {n} tokens", positions.len())));
    }
    let mut seen = vec![false; n];
    for &i in reused.indices.iter().chain(recomputed.indices) {
        let slot = seen.get_mut(i).ok_or_else(|| Error::InvalidPlan(format!("token {i} outside [0, {n})")))?;
        if *slot {
            return Err(Error::InvalidPlan(format!("token {i} is both reused and recomputed")));
        }
        *slot = true;
    }
    if let Some(gap) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidPlan(format!("token {gap} is neither reused nor recomputed")));
    }
    let (h, d) = (reused.keys_raw.n_heads(), reused.keys_raw.head_dim());
    let reused_pos: Vec<usize> = reused.indices.iter().map(|&i| positions[i]).collect();
    let rotated = rope_apply(reused.keys_raw, &reused_pos, rope)?;
    let mut k = SeqTensor::filled(n, h, d, f32::NAN)?;
    let mut v = SeqTensor::filled(n, h, d, f32::NAN)?;
    k.scatter_tokens_in_place(&rotated, reused.indices)?;
    v.scatter_tokens_in_place(reused.values, reused.indices)?;
    k.scatter_tokens_in_place(recomputed.keys, recomputed.indices)?;
    v.scatter_tokens_in_place(recomputed.values, recomputed.indices)?;
    if k.data().iter().chain(v.data()).any(|x| x.is_nan()) {
        return Err(Error::InvalidPlan("fused buffer has untouched rows".into()));
    }
    Ok((k, v))
}
