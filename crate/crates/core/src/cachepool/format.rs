//! CTKV chunk files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic "CTKV" | version u32 = 1 | n_layers u32 | n_tokens u32 | n_heads u32
//! | head_dim u32 | dtype u32 (0 = f32) | flags u32 (bit 0: keys are pre-RoPE)
//! per layer: K rows [token][head][dim] f32, then V rows f32
//! ranking block (optional): alpha f64 | per-layer orders L*N u32
//!     | aggregate order N u32 | per-layer scores L*N f64
//! ```
//!
//! A file either ends right after the last V block or carries exactly one
//! ranking block; any other length is rejected.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kvcore::{ChunkGeometry, ChunkId, DType, KvChunk, SeqTensor};
use crate::spectral::ImportanceRanking;

pub const MAGIC: &[u8; 4] = b"CTKV";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
pub const FLAG_KEYS_PRE_ROPE: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CtkvHeader {
    pub version: u32,
    pub geometry: ChunkGeometry,
    pub dtype: DType,
    pub flags: u32,
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} does not fit in u32")))
}

impl CtkvHeader {
    pub fn for_chunk(chunk: &KvChunk) -> Self {
        Self { version: VERSION, geometry: chunk.geometry(), dtype: chunk.dtype, flags: FLAG_KEYS_PRE_ROPE }
    }

    pub fn to_bytes(&self) -> Result<[u8; HEADER_LEN]> {
        let g = &self.geometry;
        let fields = [
            self.version,
            u32_field(g.n_layers, "n_layers")?,
            u32_field(g.n_tokens, "n_tokens")?,
            u32_field(g.n_heads, "n_heads")?,
            u32_field(g.head_dim, "head_dim")?,
            self.dtype.code(),
            self.flags,
        ];
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(MAGIC);
        for (i, f) in fields.iter().enumerate() {
            out[4 + 4 * i..8 + 4 * i].copy_from_slice(&f.to_le_bytes());
        }
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("{} bytes is shorter than a CTKV header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, not a CTKV file".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = field(0);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported CTKV version {version}")));
        }
        let geometry = ChunkGeometry {
            n_layers: field(1) as usize,
            n_tokens: field(2) as usize,
            n_heads: field(3) as usize,
            head_dim: field(4) as usize,
        };
        if geometry.n_layers == 0 || geometry.n_tokens == 0 || geometry.n_heads == 0 || geometry.head_dim == 0 {
            return Err(Error::Format(format!("degenerate geometry {geometry:?}")));
        }
        let dtype = DType::from_code(field(5))
            .ok_or_else(|| Error::Format(format!("unknown dtype code {}", field(5))))?;
        Ok(Self { version, geometry, dtype, flags: field(6) })
    }
}

/// Byte offsets inside a CTKV file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CtkvLayout {
    pub geometry: ChunkGeometry,
    pub dtype: DType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KvPart {
    Keys,
    Values,
}

impl CtkvLayout {
    pub fn new(geometry: ChunkGeometry, dtype: DType) -> Self {
        Self { geometry, dtype }
    }

    pub fn row_bytes(&self) -> usize {
        self.geometry.row_bytes(self.dtype)
    }

    fn block_bytes(&self) -> usize {
        self.geometry.n_tokens * self.row_bytes()
    }

    /// Offset of `token`'s row in the K or V block of `layer`.
    pub fn row_offset(&self, layer: usize, part: KvPart, token: usize) -> usize {
        let part_idx = match part {
            KvPart::Keys => 0,
            KvPart::Values => 1,
        };
        HEADER_LEN + (2 * layer + part_idx) * self.block_bytes() + token * self.row_bytes()
    }

    pub fn kv_end(&self) -> usize {
        HEADER_LEN + 2 * self.geometry.n_layers * self.block_bytes()
    }

    pub fn ranking_bytes(&self) -> usize {
        let (l, n) = (self.geometry.n_layers, self.geometry.n_tokens);
        8 + l * n * 4 + n * 4 + l * n * 8
    }

    pub fn file_len(&self, with_ranking: bool) -> usize {
        self.kv_end() + if with_ranking { self.ranking_bytes() } else { 0 }
    }
}

fn check_ranking_fits(g: &ChunkGeometry, r: &ImportanceRanking) -> Result<()> {
    if r.n_tokens != g.n_tokens || r.n_layers() != g.n_layers {
        return Err(Error::Shape(format!(
            "ranking covers {} layers x {} tokens, chunk has {} x {}",
            r.n_layers(),
            r.n_tokens,
            g.n_layers,
            g.n_tokens
        )));
    }
    Ok(())
}

pub fn encode_ranking(r: &ImportanceRanking) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&r.alpha.to_le_bytes());
    for order in &r.per_layer_order {
        order.iter().for_each(|i| out.extend_from_slice(&i.to_le_bytes()));
    }
    r.aggregate_order.iter().for_each(|i| out.extend_from_slice(&i.to_le_bytes()));
    for scores in &r.per_layer_scores {
        scores.iter().for_each(|s| out.extend_from_slice(&s.to_le_bytes()));
    }
    out
}

/// Serializes a chunk (and optionally its ranking) to CTKV bytes.
pub fn encode_chunk(chunk: &KvChunk, ranking: Option<&ImportanceRanking>) -> Result<Vec<u8>> {
    let header = CtkvHeader::for_chunk(chunk);
    let layout = CtkvLayout::new(header.geometry, header.dtype);
    if let Some(r) = ranking {
        check_ranking_fits(&header.geometry, r)?;
    }
    let mut out = Vec::with_capacity(layout.file_len(ranking.is_some()));
    out.extend_from_slice(&header.to_bytes()?);
    for (k, v) in chunk.layers() {
        for x in k.data().iter().chain(v.data()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(r) = ranking {
        out.extend_from_slice(&encode_ranking(r));
    }
    debug_assert_eq!(out.len(), layout.file_len(ranking.is_some()));
    Ok(out)
}

pub(crate) fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()
}

fn u32s(bytes: &[u8]) -> Vec<u32> {
    bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect()
}

fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()
}

fn check_permutation(order: &[u32], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in order {
        let i = i as usize;
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Format("ranking order is not a permutation".into()));
        }
    }
    Ok(())
}

pub fn decode_ranking(bytes: &[u8], g: &ChunkGeometry) -> Result<ImportanceRanking> {
    let (l, n) = (g.n_layers, g.n_tokens);
    let expected = CtkvLayout::new(*g, DType::F32).ranking_bytes();
    if bytes.len() != expected {
        return Err(Error::Format(format!("ranking block is {} bytes, expected {expected}", bytes.len())));
    }
    let alpha = f64::from_le_bytes(bytes[..8].try_into().unwrap());
    let mut at = 8;
    let mut per_layer_order = Vec::with_capacity(l);
    for _ in 0..l {
        let order = u32s(&bytes[at..at + 4 * n]);
        check_permutation(&order, n)?;
        per_layer_order.push(order);
        at += 4 * n;
    }
    let aggregate_order = u32s(&bytes[at..at + 4 * n]);
    check_permutation(&aggregate_order, n)?;
    at += 4 * n;
    let mut per_layer_scores = Vec::with_capacity(l);
    for _ in 0..l {
        per_layer_scores.push(f64s(&bytes[at..at + 8 * n]));
        at += 8 * n;
    }
    Ok(ImportanceRanking { per_layer_scores, per_layer_order, aggregate_order, alpha, n_tokens: n })
}

/// Parses CTKV bytes into a chunk and its ranking, if present.
pub fn decode_chunk(bytes: &[u8], chunk_id: ChunkId) -> Result<(KvChunk, Option<ImportanceRanking>)> {
    let header = CtkvHeader::parse(bytes)?;
    let g = header.geometry;
    let layout = CtkvLayout::new(g, header.dtype);
    let with_ranking = if bytes.len() == layout.file_len(false) {
        false
    } else if bytes.len() == layout.file_len(true) {
        true
    } else {
        return Err(Error::Format(format!(
            "file is {} bytes; geometry implies {} (no ranking) or {} (with ranking)",
            bytes.len(),
            layout.file_len(false),
            layout.file_len(true)
        )));
    };
    let block = g.n_tokens * layout.row_bytes();
    let mut keys = Vec::with_capacity(g.n_layers);
    let mut values = Vec::with_capacity(g.n_layers);
    for layer in 0..g.n_layers {
        let k0 = layout.row_offset(layer, KvPart::Keys, 0);
        let v0 = layout.row_offset(layer, KvPart::Values, 0);
        keys.push(SeqTensor::new(f32s(&bytes[k0..k0 + block]), g.n_tokens, g.n_heads, g.head_dim)?);
        values.push(SeqTensor::new(f32s(&bytes[v0..v0 + block]), g.n_tokens, g.n_heads, g.head_dim)?);
    }
    let chunk = KvChunk::new(chunk_id, keys, values, header.dtype)?;
    let ranking = if with_ranking { Some(decode_ranking(&bytes[layout.kv_end()..], &g)?) } else { None };
    Ok((chunk, ranking))
}

/// Chunk id derived from a file name (`docs/a.ctkv` -> `a`).
pub fn chunk_id_for_path(path: &Path) -> ChunkId {
    ChunkId::new(path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
}

pub fn read_chunk_file(path: &Path) -> Result<(KvChunk, Option<ImportanceRanking>)> {
    let bytes = fs::read(path)?;
    decode_chunk(&bytes, chunk_id_for_path(path))
}

/// Writes via a sibling temp file and rename, so readers never observe a
/// partially written chunk.
pub fn write_chunk_file(path: &Path, chunk: &KvChunk, ranking: Option<&ImportanceRanking>) -> Result<usize> {
    let bytes = encode_chunk(chunk, ranking)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
