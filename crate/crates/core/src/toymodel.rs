//! Seeded toy causal transformer used as a ground-truth oracle.
//!
//! Blocks are pre-norm (RMSNorm) attention with a residual connection and an
//! optional MLP. There is no positional embedding besides RoPE, so the first
//! layer's pre-RoPE keys depend on the token alone.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, shape_err, Error, Result};
use crate::kvcore::{ChunkId, DType, KvChunk, SeqTensor};
use crate::pipesim::{fuse_layer, Recomputed, Reused};
use crate::rope::{rope_apply, RopeParams};
use crate::spectral::{band_energy_fractions, rank_chunk_band, rfft_seq, Band, ImportanceRanking};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyModelConfig {
    pub seed: u64,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub rope: RopeParams,
    pub mlp: bool,
}

impl ToyModelConfig {
    /// L=4, H=2, D=8, vocab 256, attention-only.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            n_layers: 4,
            n_heads: 2,
            head_dim: 8,
            vocab_size: 256,
            rope: RopeParams::new(8).expect("even head_dim"),
            mlp: false,
        }
    }

    pub fn hidden(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(param_err("toy model dimensions must be >= 1"));
        }
        if self.rope.head_dim != self.head_dim {
            return Err(param_err("rope head_dim differs from the model head_dim"));
        }
        self.rope.validate()
    }
}

/// Row-major `[in][out]` weight.
#[derive(Clone, Debug)]
struct Linear {
    n_in: usize,
    n_out: usize,
    w: Vec<f32>,
}

impl Linear {
    fn random(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, scale: f32) -> Self {
        let w = (0..n_in * n_out).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
        Self { n_in, n_out, w }
    }

    fn apply(&self, x: &[f32]) -> Vec<f32> {
        let rows = x.len() / self.n_in;
        let mut out = vec![0f32; rows * self.n_out];
        let mut acc = vec![0f64; self.n_out];
        for (xr, or) in x.chunks_exact(self.n_in).zip(out.chunks_exact_mut(self.n_out)) {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (&xi, wrow) in xr.iter().zip(self.w.chunks_exact(self.n_out)) {
                let xi = f64::from(xi);
                for (a, &wv) in acc.iter_mut().zip(wrow) {
                    *a += xi * f64::from(wv);
                }
            }
            for (o, a) in or.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
        out
    }
}

fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let d = gain.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let ms = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        out.extend(row.iter().zip(gain).map(|(&v, &g)| (f64::from(v) * inv) as f32 * g));
    }
    out
}

fn gelu(x: f32) -> f32 {
    let x = f64::from(x);
    (0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044_715 * x.powi(3))).tanh())) as f32
}

#[derive(Clone, Debug)]
struct Mlp {
    norm: Vec<f32>,
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
struct Block {
    norm: Vec<f32>,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    mlp: Option<Mlp>,
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub cfg: ToyModelConfig,
    embed: Vec<f32>,
    blocks: Vec<Block>,
    final_norm: Vec<f32>,
    unembed: Linear,
}

/// Attention weights of a set of query rows over all key positions.
///
/// `weights` is laid out `[layer][head][query][key]`; keys after a query's
/// position carry weight 0.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_keys: usize,
    pub query_positions: Vec<usize>,
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    fn new(n_layers: usize, n_heads: usize, n_keys: usize, query_positions: Vec<usize>) -> Self {
        let len = n_layers * n_heads * query_positions.len() * n_keys;
        Self { n_layers, n_heads, n_keys, query_positions, weights: vec![0.0; len] }
    }

    fn offset(&self, layer: usize, head: usize, q: usize) -> usize {
        ((layer * self.n_heads + head) * self.query_positions.len() + q) * self.n_keys
    }

    pub fn row(&self, layer: usize, head: usize, q: usize) -> &[f64] {
        let o = self.offset(layer, head, q);
        &self.weights[o..o + self.n_keys]
    }

    fn row_mut(&mut self, layer: usize, head: usize, q: usize) -> &mut [f64] {
        let o = self.offset(layer, head, q);
        &mut self.weights[o..o + self.n_keys]
    }

    /// Keeps only query rows at positions `>= from`.
    pub fn queries_from(&self, from: usize) -> AttentionRecord {
        let keep: Vec<usize> = (0..self.query_positions.len()).filter(|&q| self.query_positions[q] >= from).collect();
        let mut out = AttentionRecord::new(
            self.n_layers,
            self.n_heads,
            self.n_keys,
            keep.iter().map(|&q| self.query_positions[q]).collect(),
        );
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                for (dst, &q) in keep.iter().enumerate() {
                    out.row_mut(l, h, dst).copy_from_slice(self.row(l, h, q));
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,query,key,weight\n");
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                for (q, &pos) in self.query_positions.iter().enumerate() {
                    for (k, w) in self.row(l, h, q).iter().enumerate().take(pos + 1) {
                        s.push_str(&format!("{l},{h},{pos},{k},{w:.9e}\n"));
                    }
                }
            }
        }
        s
    }
}

/// Mean over layers and heads of the Frobenius norm of `a - b`.
pub fn attention_deviation(a: &AttentionRecord, b: &AttentionRecord) -> Result<f64> {
    if (a.n_layers, a.n_heads, a.n_keys) != (b.n_layers, b.n_heads, b.n_keys) || a.query_positions != b.query_positions {
        return Err(shape_err("attention records cover different layers, heads or queries"));
    }
    let q = a.query_positions.len();
    let mut total = 0.0;
    for l in 0..a.n_layers {
        for h in 0..a.n_heads {
            let o = a.offset(l, h, 0);
            let sq: f64 = a.weights[o..o + q * a.n_keys]
                .iter()
                .zip(&b.weights[o..o + q * b.n_keys])
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            total += sq.sqrt();
        }
    }
    Ok(total / (a.n_layers * a.n_heads) as f64)
}

/// Result of a prefill pass.
#[derive(Clone, Debug)]
pub struct Prefill {
    /// Per layer: post-RoPE keys and values over every position.
    pub kv: Vec<(SeqTensor, SeqTensor)>,
    pub attention: AttentionRecord,
    /// Next-token logits of the last position, when that position was forwarded.
    pub logits: Option<Vec<f32>>,
}

/// One cached chunk placed in a new prompt.
#[derive(Clone, Copy, Debug)]
pub struct ReuseChunk<'a> {
    pub chunk: &'a KvChunk,
    pub tokens: &'a [u32],
    pub ranking: &'a ImportanceRanking,
}

/// Per-layer projections of the forwarded rows.
struct LayerRows {
    k_raw: SeqTensor,
    k: SeqTensor,
    v: SeqTensor,
}

impl ToyModel {
    pub fn new(cfg: ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let hid = cfg.hidden();
        let scale = 1.0 / (hid as f32).sqrt();
        let embed = (0..cfg.vocab_size * hid).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                norm: vec![1.0; hid],
                wq: Linear::random(&mut rng, hid, hid, scale),
                wk: Linear::random(&mut rng, hid, hid, scale),
                wv: Linear::random(&mut rng, hid, hid, scale),
                wo: Linear::random(&mut rng, hid, hid, scale),
                mlp: cfg.mlp.then(|| Mlp {
                    norm: vec![1.0; hid],
                    up: Linear::random(&mut rng, hid, 4 * hid, scale),
                    down: Linear::random(&mut rng, 4 * hid, hid, 1.0 / (4.0 * hid as f32).sqrt()),
                }),
            })
            .collect();
        let unembed = Linear::random(&mut rng, hid, cfg.vocab_size, scale);
        Ok(Self { cfg, embed, blocks, final_norm: vec![1.0; hid], unembed })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(param_err(format!("token id {t} >= vocab size {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    fn embed_rows(&self, tokens: &[u32]) -> Vec<f32> {
        let hid = self.cfg.hidden();
        tokens.iter().flat_map(|&t| &self.embed[t as usize * hid..(t as usize + 1) * hid]).copied().collect()
    }

    fn project(&self, block: &Block, x: &[f32], positions: &[usize]) -> Result<(Vec<f32>, LayerRows)> {
        let (n, h, d) = (positions.len(), self.cfg.n_heads, self.cfg.head_dim);
        let xn = rms_norm(x, &block.norm);
        let q = SeqTensor::new(block.wq.apply(&xn), n, h, d)?;
        let k_raw = SeqTensor::new(block.wk.apply(&xn), n, h, d)?;
        let v = SeqTensor::new(block.wv.apply(&xn), n, h, d)?;
        let q = rope_apply(&q, positions, &self.cfg.rope)?;
        let k = rope_apply(&k_raw, positions, &self.cfg.rope)?;
        Ok((q.into_data(), LayerRows { k_raw, k, v }))
    }

    /// Forwards `tokens` at `positions` through every layer. `fill` turns the
    /// forwarded rows of a layer into keys/values over `n_keys` positions.
    fn forward<F>(&self, tokens: &[u32], positions: &[usize], n_keys: usize, mut fill: F) -> Result<(Prefill, Vec<LayerRows>)>
    where
        F: FnMut(usize, &LayerRows) -> Result<(SeqTensor, SeqTensor)>,
    {
        self.check_tokens(tokens)?;
        let (h, d, hid) = (self.cfg.n_heads, self.cfg.head_dim, self.cfg.hidden());
        let mut x = self.embed_rows(tokens);
        let mut record = AttentionRecord::new(self.cfg.n_layers, h, n_keys, positions.to_vec());
        let mut kv = Vec::with_capacity(self.cfg.n_layers);
        let mut rows_out = Vec::with_capacity(self.cfg.n_layers);
        let scale = 1.0 / (d as f64).sqrt();
        for (l, block) in self.blocks.iter().enumerate() {
            let (q, rows) = self.project(block, &x, positions)?;
            let (kf, vf) = fill(l, &rows)?;
            if kf.n_tokens() != n_keys || vf.n_tokens() != n_keys {
                return Err(shape_err("filled keys/values do not cover every position"));
            }
            let mut o = vec![0f32; positions.len() * hid];
            let mut scores = vec![0f64; n_keys];
            for (qi, &pos) in positions.iter().enumerate() {
                for head in 0..h {
                    let qv = &q[qi * hid + head * d..qi * hid + (head + 1) * d];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(pos + 1) {
                        let kv_row = &kf.row(j)[head * d..(head + 1) * d];
                        let dot: f64 = qv.iter().zip(kv_row).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                        *s = dot * scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut().take(pos + 1) {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let row = record.row_mut(l, head, qi);
                    let mut acc = vec![0f64; d];
                    for j in 0..=pos {
                        let w = scores[j] / z;
                        row[j] = w;
                        let vr = &vf.row(j)[head * d..(head + 1) * d];
                        for (a, &vv) in acc.iter_mut().zip(vr) {
                            *a += w * f64::from(vv);
                        }
                    }
                    for (dst, a) in o[qi * hid + head * d..qi * hid + (head + 1) * d].iter_mut().zip(&acc) {
                        *dst = *a as f32;
                    }
                }
            }
            let proj = block.wo.apply(&o);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            if let Some(mlp) = &block.mlp {
                let up: Vec<f32> = mlp.up.apply(&rms_norm(&x, &mlp.norm)).into_iter().map(gelu).collect();
                let down = mlp.down.apply(&up);
                x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
            }
            kv.push((kf, vf));
            rows_out.push(rows);
        }
        let logits = (positions.last() == Some(&(n_keys - 1))).then(|| {
            let last = &x[(positions.len() - 1) * hid..];
            self.unembed.apply(&rms_norm(last, &self.final_norm))
        });
        Ok((Prefill { kv, attention: record, logits }, rows_out))
    }

    /// Standard causal prefill over `tokens` at positions `0..n`.
    pub fn full_prefill(&self, tokens: &[u32]) -> Result<Prefill> {
        if tokens.is_empty() {
            return Err(shape_err("prefill needs at least one token"));
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let (out, _) = self.forward(tokens, &positions, tokens.len(), |_, rows| Ok((rows.k.clone(), rows.v.clone())))?;
        Ok(out)
    }

    /// Encodes a chunk on its own and keeps its pre-RoPE keys.
    pub fn encode_chunk_isolated(&self, id: impl Into<ChunkId>, tokens: &[u32]) -> Result<KvChunk> {
        if tokens.is_empty() {
            return Err(shape_err("a chunk needs at least one token"));
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let (_, rows) = self.forward(tokens, &positions, tokens.len(), |_, rows| Ok((rows.k.clone(), rows.v.clone())))?;
        let (keys, values) = rows.into_iter().map(|r| (r.k_raw, r.v)).unzip();
        KvChunk::new(id.into(), keys, values, DType::F32)
    }

    /// Prefill of `chunks ++ suffix` that forwards only the ratio-`r`
    /// selection of every chunk plus the suffix, reusing cached rows for the
    /// rest. Reused keys are rotated to their global positions.
    pub fn selective_prefill(&self, chunks: &[ReuseChunk<'_>], suffix: &[u32], r: f64) -> Result<Prefill> {
        for c in chunks {
            self.check_chunk(c)?;
        }
        self.selective_prefill_with(
            &chunks.iter().map(|c| (c.tokens, c.ranking)).collect::<Vec<_>>(),
            suffix,
            r,
            |ci, layer, keep| {
                let c = chunks[ci].chunk;
                Ok((c.keys_raw(layer).slice_tokens(keep)?, c.values(layer).slice_tokens(keep)?))
            },
        )
    }

    fn check_chunk(&self, c: &ReuseChunk<'_>) -> Result<()> {
        let g = c.chunk.geometry();
        if (g.n_layers, g.n_heads, g.head_dim) != (self.cfg.n_layers, self.cfg.n_heads, self.cfg.head_dim) {
            return Err(Error::InvalidPlan(format!("chunk {} was not encoded by this model config", c.chunk.chunk_id)));
        }
        if c.tokens.len() != g.n_tokens {
            return Err(Error::InvalidPlan(format!("chunk {} has {} tokens, got {} ids", c.chunk.chunk_id, g.n_tokens, c.tokens.len())));
        }
        Ok(())
    }

    /// As [`ToyModel::selective_prefill`], with reused rows supplied by
    /// `fetch(chunk_index, layer, keep_indices) -> (keys_raw, values)`, e.g.
    /// sparse reads from a cache pool.
    pub fn selective_prefill_with<F>(
        &self,
        chunks: &[(&[u32], &ImportanceRanking)],
        suffix: &[u32],
        r: f64,
        mut fetch: F,
    ) -> Result<Prefill>
    where
        F: FnMut(usize, usize, &[usize]) -> Result<(SeqTensor, SeqTensor)>,
    {
        struct Slot {
            offset: usize,
            n: usize,
            recompute: Vec<usize>,
            keep: Vec<usize>,
            /// Index of each recomputed token among the forwarded rows.
            active_rows: Vec<usize>,
        }
        let mut slots = Vec::with_capacity(chunks.len());
        let mut active_tokens = Vec::new();
        let mut active_pos = Vec::new();
        let mut offset = 0;
        for (tokens, ranking) in chunks {
            if ranking.n_tokens != tokens.len() {
                return Err(Error::InvalidPlan(format!(
                    "ranking covers {} tokens, chunk has {}",
                    ranking.n_tokens,
                    tokens.len()
                )));
            }
            let recompute = ranking.indices_for_ratio(r)?;
            let keep = ranking.complement_for_ratio(r)?;
            let mut active_rows = Vec::with_capacity(recompute.len());
            for &i in &recompute {
                active_rows.push(active_tokens.len());
                active_tokens.push(tokens[i]);
                active_pos.push(offset + i);
            }
            slots.push(Slot { offset, n: tokens.len(), recompute, keep, active_rows });
            offset += tokens.len();
        }
        let ctx = offset;
        let suffix_row0 = active_tokens.len();
        active_tokens.extend_from_slice(suffix);
        active_pos.extend(ctx..ctx + suffix.len());
        let total = ctx + suffix.len();
        let (h, d) = (self.cfg.n_heads, self.cfg.head_dim);
        let rope = self.cfg.rope;

        let (out, _) = self.forward(&active_tokens, &active_pos, total, |layer, rows| {
            let mut k = SeqTensor::filled(total, h, d, f32::NAN)?;
            let mut v = SeqTensor::filled(total, h, d, f32::NAN)?;
            for (ci, s) in slots.iter().enumerate() {
                let (kr, vr) = fetch(ci, layer, &s.keep)?;
                if kr.n_tokens() != s.keep.len() || vr.n_tokens() != s.keep.len() {
                    return Err(Error::InvalidPlan(format!("fetch for chunk {ci} returned the wrong row count")));
                }
                let rk = rows.k.slice_tokens(&s.active_rows)?;
                let rv = rows.v.slice_tokens(&s.active_rows)?;
                let positions: Vec<usize> = (s.offset..s.offset + s.n).collect();
                let (fk, fv) = fuse_layer(
                    Reused { keys_raw: &kr, values: &vr, indices: &s.keep },
                    Recomputed { keys: &rk, values: &rv, indices: &s.recompute },
                    &positions,
                    &rope,
                    s.n,
                )?;
                k.scatter_tokens_in_place(&fk, &positions)?;
                v.scatter_tokens_in_place(&fv, &positions)?;
            }
            let suffix_rows: Vec<usize> = (suffix_row0..suffix_row0 + suffix.len()).collect();
            let suffix_pos: Vec<usize> = (ctx..total).collect();
            k.scatter_tokens_in_place(&rows.k.slice_tokens(&suffix_rows)?, &suffix_pos)?;
            v.scatter_tokens_in_place(&rows.v.slice_tokens(&suffix_rows)?, &suffix_pos)?;
            Ok((k, v))
        })?;
        Ok(out)
    }
}

/// Energy fraction per frequency decile of keys and values, averaged over
/// layers, heads and dims.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

impl SpectrumReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("decile,keys,values\n");
        for (i, (k, v)) in self.keys.iter().zip(&self.values).enumerate() {
            s.push_str(&format!("{},{k:.9},{v:.9}\n", i + 1));
        }
        s
    }
}

pub fn spectrum_report(chunk: &KvChunk) -> Result<SpectrumReport> {
    let mut keys = vec![0.0; 10];
    let mut values = vec![0.0; 10];
    let l = chunk.n_layers() as f64;
    for (k, v) in chunk.layers() {
        for (acc, t) in [(&mut keys, k), (&mut values, v)] {
            let f = band_energy_fractions(&rfft_seq(t)?, 10)?;
            acc.iter_mut().zip(f).for_each(|(a, x)| *a += x / l);
        }
    }
    Ok(SpectrumReport { keys, values })
}

/// Token selection policy for the attention-recovery experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Highest low-pass reconstruction energy.
    LowFreq,
    /// Highest high-pass reconstruction energy.
    HighFreq,
    /// Uniformly random tokens at the same budget.
    Random,
    /// Reuse everything (r = 0).
    None,
    /// Recompute everything (r = 1).
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::LowFreq, Strategy::HighFreq, Strategy::Random, Strategy::None, Strategy::Full];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::LowFreq => "lowfreq",
            Strategy::HighFreq => "highfreq",
            Strategy::Random => "random",
            Strategy::None => "none",
            Strategy::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| param_err(format!("unknown strategy `{s}`")))
    }
}

/// Seeds of the committed attention-recovery run.
pub const COMMITTED_SEEDS: [u64; 25] = [
    1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25,
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub n_chunks: usize,
    pub chunk_len: usize,
    pub suffix_len: usize,
    pub r: f64,
    pub alpha: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { n_chunks: 3, chunk_len: 64, suffix_len: 8, r: 0.15, alpha: 0.5 }
    }
}

/// A seeded request: model, chunk token ids, suffix ids.
pub struct Workload {
    pub model: ToyModel,
    pub chunk_tokens: Vec<Vec<u32>>,
    pub suffix: Vec<u32>,
}

impl Workload {
    pub fn new(seed: u64, cfg: &ExperimentConfig) -> Result<Self> {
        let model = ToyModel::new(ToyModelConfig::desk(seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a3d_5e11_c0ff_ee00);
        let vocab = model.cfg.vocab_size as u32;
        let chunk_tokens = (0..cfg.n_chunks)
            .map(|_| (0..cfg.chunk_len).map(|_| rng.random_range(0..vocab)).collect())
            .collect();
        let suffix = (0..cfg.suffix_len).map(|_| rng.random_range(0..vocab)).collect();
        Ok(Self { model, chunk_tokens, suffix })
    }

    pub fn prompt(&self) -> Vec<u32> {
        self.chunk_tokens.iter().flatten().chain(&self.suffix).copied().collect()
    }

    pub fn context_len(&self) -> usize {
        self.chunk_tokens.iter().map(Vec::len).sum()
    }

    pub fn encode_chunks(&self) -> Result<Vec<KvChunk>> {
        self.chunk_tokens
            .iter()
            .enumerate()
            .map(|(i, t)| self.model.encode_chunk_isolated(format!("chunk{i}"), t))
            .collect()
    }
}

/// Ranking used by `strategy` for one chunk; `salt` seeds the random order.
pub fn strategy_ranking(strategy: Strategy, chunk: &KvChunk, alpha: f64, salt: u64) -> Result<ImportanceRanking> {
    match strategy {
        Strategy::HighFreq => rank_chunk_band(chunk, alpha, Band::High),
        Strategy::Random => {
            let mut order: Vec<u32> = (0..chunk.token_count() as u32).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(salt));
            ImportanceRanking::from_order(order, chunk.n_layers(), alpha)
        }
        _ => rank_chunk_band(chunk, alpha, Band::Low),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviationRow {
    pub seed: u64,
    pub strategy: Strategy,
    pub r: f64,
    pub deviation: f64,
}

/// Suffix-query attention deviation from full prefill for each strategy.
pub fn attention_experiment(seed: u64, cfg: &ExperimentConfig, strategies: &[Strategy]) -> Result<Vec<DeviationRow>> {
    let w = Workload::new(seed, cfg)?;
    let ctx = w.context_len();
    let full = w.model.full_prefill(&w.prompt())?.attention.queries_from(ctx);
    let chunks = w.encode_chunks()?;
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let r = match strategy {
            Strategy::None => 0.0,
            Strategy::Full => 1.0,
            _ => cfg.r,
        };
        let rankings = chunks
            .iter()
            .enumerate()
            .map(|(i, c)| strategy_ranking(strategy, c, cfg.alpha, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let reuse: Vec<ReuseChunk<'_>> = chunks
            .iter()
            .zip(&w.chunk_tokens)
            .zip(&rankings)
            .map(|((chunk, tokens), ranking)| ReuseChunk { chunk, tokens, ranking })
            .collect();
        let sel = w.model.selective_prefill(&reuse, &w.suffix, r)?;
        let deviation = attention_deviation(&full, &sel.attention.queries_from(ctx))?;
        rows.push(DeviationRow { seed, strategy, r, deviation });
    }
    Ok(rows)
}

pub fn mean_deviation(rows: &[DeviationRow], strategy: Strategy) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.strategy == strategy).map(|r| r.deviation).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Timed recompute cost: seconds per token per layer of a full prefill over
/// `n_tokens`, best of `reps`.
pub fn profile_recompute(model: &ToyModel, n_tokens: usize, reps: usize) -> Result<f64> {
    let tokens: Vec<u32> = (0..n_tokens).map(|i| (i * 31 % model.cfg.vocab_size) as u32).collect();
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        model.full_prefill(&tokens)?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best / (n_tokens * model.cfg.n_layers) as f64)
}

/// Timed per-layer fixed cost: a one-token prefill divided by the layer count.
pub fn profile_overhead(model: &ToyModel, reps: usize) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        model.full_prefill(&[0])?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best / model.cfg.n_layers as f64)
}
