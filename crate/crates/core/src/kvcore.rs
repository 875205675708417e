//! Dense sequence-major tensors and reusable KV chunks.
//!
//! Every tensor is laid out row-major as `[token][head][dim]` so that one
//! token's row is a contiguous `heads * head_dim` slice. Both the
//! sequence-axis FFT (strided lanes) and token-granular cache I/O (whole
//! rows) rely on this layout.

use std::collections::HashSet;
use std::fmt;

use crate::error::{param_err, shape_err, Error, Result};

/// A `[tokens][heads][head_dim]` tensor of `f32`.
///
/// A tensor may hold zero tokens (an empty slice of a larger tensor); every
/// stored [`KvChunk`] holds at least one.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqTensor {
    data: Vec<f32>,
    n_tokens: usize,
    n_heads: usize,
    head_dim: usize,
}

impl SeqTensor {
    pub fn new(data: Vec<f32>, n_tokens: usize, n_heads: usize, head_dim: usize) -> Result<Self> {
        check_head_geometry(n_heads, head_dim)?;
        let expected = n_tokens * n_heads * head_dim;
        if data.len() != expected {
            return Err(shape_err(format!(
                "data length {} != {n_tokens}x{n_heads}x{head_dim} = {expected}",
                data.len()
            )));
        }
        Ok(Self { data, n_tokens, n_heads, head_dim })
    }

    pub fn zeros(n_tokens: usize, n_heads: usize, head_dim: usize) -> Result<Self> {
        Self::filled(n_tokens, n_heads, head_dim, 0.0)
    }

    pub fn filled(n_tokens: usize, n_heads: usize, head_dim: usize, value: f32) -> Result<Self> {
        Self::new(vec![value; n_tokens * n_heads * head_dim], n_tokens, n_heads, head_dim)
    }

    /// Builds a tensor element by element from `f(token, head, dim)`.
    pub fn from_fn(
        n_tokens: usize,
        n_heads: usize,
        head_dim: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        check_head_geometry(n_heads, head_dim)?;
        let mut data = Vec::with_capacity(n_tokens * n_heads * head_dim);
        for t in 0..n_tokens {
            for h in 0..n_heads {
                for d in 0..head_dim {
                    data.push(f(t, h, d));
                }
            }
        }
        Ok(Self { data, n_tokens, n_heads, head_dim })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Elements per token row (`heads * head_dim`).
    pub fn row_len(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, token: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[token * w..(token + 1) * w]
    }

    pub fn row_mut(&mut self, token: usize) -> &mut [f32] {
        let w = self.row_len();
        &mut self.data[token * w..(token + 1) * w]
    }

    pub fn get(&self, token: usize, head: usize, dim: usize) -> f32 {
        self.data[(token * self.n_heads + head) * self.head_dim + dim]
    }

    pub fn same_row_shape(&self, other: &SeqTensor) -> bool {
        self.n_heads == other.n_heads && self.head_dim == other.head_dim
    }

    /// Copies the rows at `indices` (in the given order) into a new tensor.
    pub fn slice_tokens(&self, indices: &[usize]) -> Result<SeqTensor> {
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= self.n_tokens {
                return Err(Error::Index { index: i, len: self.n_tokens });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(SeqTensor { data, n_tokens: indices.len(), n_heads: self.n_heads, head_dim: self.head_dim })
    }

    /// Returns a copy of `self` whose rows at `indices` are replaced by the
    /// rows of `src`, in order.
    pub fn scatter_tokens(&self, src: &SeqTensor, indices: &[usize]) -> Result<SeqTensor> {
        let mut out = self.clone();
        out.scatter_tokens_in_place(src, indices)?;
        Ok(out)
    }

    pub fn scatter_tokens_in_place(&mut self, src: &SeqTensor, indices: &[usize]) -> Result<()> {
        if !self.same_row_shape(src) {
            return Err(shape_err(format!(
                "scatter source rows are {}x{}, destination rows are {}x{}",
                src.n_heads, src.head_dim, self.n_heads, self.head_dim
            )));
        }
        if indices.len() != src.n_tokens {
            return Err(shape_err(format!(
                "{} indices for a {}-token source",
                indices.len(),
                src.n_tokens
            )));
        }
        let mut seen = HashSet::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n_tokens {
                return Err(Error::Index { index: i, len: self.n_tokens });
            }
            if !seen.insert(i) {
                return Err(Error::InvalidPlan(format!("duplicate scatter index {i}")));
            }
        }
        for (row, &i) in indices.iter().enumerate() {
            self.row_mut(i).copy_from_slice(src.row(row));
        }
        Ok(())
    }

    /// Largest absolute element-wise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &SeqTensor) -> Result<f32> {
        if self.n_tokens != other.n_tokens || !self.same_row_shape(other) {
            return Err(shape_err("max_abs_diff on tensors of different shape"));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

fn check_head_geometry(n_heads: usize, head_dim: usize) -> Result<()> {
    if n_heads == 0 || head_dim == 0 {
        return Err(shape_err(format!("heads ({n_heads}) and head_dim ({head_dim}) must be >= 1")));
    }
    if head_dim % 2 != 0 {
        return Err(shape_err(format!("head_dim {head_dim} must be even for rotary pairing")));
    }
    Ok(())
}

/// Complex spectrum of a [`SeqTensor`] along the token axis, `[freq][head][dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub n_freqs: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// Length of the signal the spectrum was taken from.
    pub origin_len: usize,
}

impl ComplexSpectrum {
    pub fn zeros(origin_len: usize, n_heads: usize, head_dim: usize) -> Self {
        let n_freqs = origin_len / 2 + 1;
        let len = n_freqs * n_heads * head_dim;
        Self { re: vec![0.0; len], im: vec![0.0; len], n_freqs, n_heads, head_dim, origin_len }
    }

    pub fn lanes(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn index(&self, freq: usize, lane: usize) -> usize {
        freq * self.lanes() + lane
    }

    pub fn bin(&self, freq: usize, lane: usize) -> (f64, f64) {
        let i = self.index(freq, lane);
        (self.re[i], self.im[i])
    }
}

/// Identifier of a reusable chunk. Printable, filesystem-safe names are
/// expected when chunks are stored on file-backed tiers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkId(pub String);

impl ChunkId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ChunkId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for ChunkId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// How stored values were produced. Both variants occupy 4 bytes per element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    /// Values rounded to half precision, stored as `f32`.
    F16AsF32,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F16AsF32 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F16AsF32),
            _ => None,
        }
    }

    /// Bytes per stored element.
    pub fn size(self) -> usize {
        4
    }
}

/// Shape of a chunk, shared by every layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkGeometry {
    pub n_layers: usize,
    pub n_tokens: usize,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl ChunkGeometry {
    /// Bytes of one token's K (or V) row at one layer.
    pub fn row_bytes(&self, dtype: DType) -> usize {
        self.n_heads * self.head_dim * dtype.size()
    }

    /// K plus V bytes for one token at one layer.
    pub fn token_layer_bytes(&self, dtype: DType) -> usize {
        2 * self.row_bytes(dtype)
    }

    pub fn kv_bytes(&self, dtype: DType) -> usize {
        self.n_layers * self.n_tokens * self.token_layer_bytes(dtype)
    }
}

/// Per-layer pre-RoPE keys and values of one reusable text segment.
#[derive(Clone, Debug, PartialEq)]
pub struct KvChunk {
    pub chunk_id: ChunkId,
    keys_raw: Vec<SeqTensor>,
    values: Vec<SeqTensor>,
    pub dtype: DType,
}

impl KvChunk {
    pub fn new(
        chunk_id: ChunkId,
        keys_raw: Vec<SeqTensor>,
        values: Vec<SeqTensor>,
        dtype: DType,
    ) -> Result<Self> {
        if keys_raw.is_empty() {
            return Err(param_err("a chunk needs at least one layer"));
        }
        if keys_raw.len() != values.len() {
            return Err(shape_err(format!(
                "{} key layers but {} value layers",
                keys_raw.len(),
                values.len()
            )));
        }
        let first = &keys_raw[0];
        if first.n_tokens() == 0 {
            return Err(shape_err("a chunk needs at least one token"));
        }
        for t in keys_raw.iter().chain(&values) {
            if t.n_tokens() != first.n_tokens() || !t.same_row_shape(first) {
                return Err(shape_err("all layers of a chunk must share (N, H, D)"));
            }
        }
        Ok(Self { chunk_id, keys_raw, values, dtype })
    }

    pub fn n_layers(&self) -> usize {
        self.keys_raw.len()
    }

    pub fn token_count(&self) -> usize {
        self.keys_raw[0].n_tokens()
    }

    pub fn n_heads(&self) -> usize {
        self.keys_raw[0].n_heads()
    }

    pub fn head_dim(&self) -> usize {
        self.keys_raw[0].head_dim()
    }

    pub fn geometry(&self) -> ChunkGeometry {
        ChunkGeometry {
            n_layers: self.n_layers(),
            n_tokens: self.token_count(),
            n_heads: self.n_heads(),
            head_dim: self.head_dim(),
        }
    }

    pub fn keys_raw(&self, layer: usize) -> &SeqTensor {
        &self.keys_raw[layer]
    }

    pub fn values(&self, layer: usize) -> &SeqTensor {
        &self.values[layer]
    }

    pub fn layers(&self) -> impl Iterator<Item = (&SeqTensor, &SeqTensor)> {
        self.keys_raw.iter().zip(&self.values)
    }

    /// Applies `f` to every stored element (keys and values, all layers).
    pub fn map_elements(&self, mut f: impl FnMut(f32) -> f32) -> KvChunk {
        let mut out = self.clone();
        for t in out.keys_raw.iter_mut().chain(out.values.iter_mut()) {
            for x in t.data_mut() {
                *x = f(*x);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, h: usize, d: usize) -> SeqTensor {
        SeqTensor::from_fn(n, h, d, |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(matches!(SeqTensor::zeros(2, 1, 3), Err(Error::Shape(_))));
        assert!(matches!(SeqTensor::zeros(2, 0, 2), Err(Error::Shape(_))));
        assert!(matches!(SeqTensor::new(vec![0.0; 7], 2, 1, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn slice_full_range_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, 6, 2, 4);
        let all: Vec<usize> = (0..6).collect();
        assert_eq!(t.slice_tokens(&all).unwrap(), t);
    }

    #[test]
    fn slice_single_row() {
        let t = SeqTensor::from_fn(4, 1, 2, |tok, _, d| (tok * 10 + d) as f32).unwrap();
        let s = t.slice_tokens(&[2]).unwrap();
        assert_eq!(s.n_tokens(), 1);
        assert_eq!(s.row(0), t.row(2));
    }

    #[test]
    fn slice_matches_direct_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tensor(&mut rng, 8, 2, 4);
        let idx = [1usize, 5, 6];
        let s = t.slice_tokens(&idx).unwrap();
        for (row, &tok) in idx.iter().enumerate() {
            for h in 0..2 {
                for d in 0..4 {
                    assert_eq!(s.get(row, h, d), t.data()[(tok * 2 + h) * 4 + d]);
                }
            }
        }
    }

    #[test]
    fn slice_out_of_range() {
        let t = SeqTensor::zeros(3, 1, 2).unwrap();
        assert!(matches!(t.slice_tokens(&[0, 3]), Err(Error::Index { index: 3, len: 3 })));
    }

    #[test]
    fn scatter_own_slice_restores_dst() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&mut rng, 10, 2, 2);
        let idx = [7usize, 0, 3];
        let s = t.slice_tokens(&idx).unwrap();
        assert_eq!(t.scatter_tokens(&s, &idx).unwrap(), t);
    }

    #[test]
    fn scatter_nothing_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_tensor(&mut rng, 5, 1, 2);
        let empty = t.slice_tokens(&[]).unwrap();
        assert_eq!(t.scatter_tokens(&empty, &[]).unwrap(), t);
    }

    #[test]
    fn scatter_errors() {
        let dst = SeqTensor::zeros(4, 2, 2).unwrap();
        let src = SeqTensor::zeros(2, 2, 2).unwrap();
        assert!(matches!(dst.scatter_tokens(&src, &[1, 1]), Err(Error::InvalidPlan(_))));
        let other = SeqTensor::zeros(2, 1, 4).unwrap();
        assert!(matches!(dst.scatter_tokens(&other, &[0, 1]), Err(Error::Shape(_))));
        assert!(matches!(dst.scatter_tokens(&src, &[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn chunk_requires_uniform_layers() {
        let a = SeqTensor::zeros(3, 1, 2).unwrap();
        let b = SeqTensor::zeros(4, 1, 2).unwrap();
        let err = KvChunk::new("c".into(), vec![a.clone(), b], vec![a.clone(), a.clone()], DType::F32);
        assert!(matches!(err, Err(Error::Shape(_))));
        let ok = KvChunk::new("c".into(), vec![a.clone()], vec![a], DType::F32).unwrap();
        assert_eq!(ok.geometry().kv_bytes(DType::F32), 3 * 2 * 4 * 2);
    }

    proptest! {
        #[test]
        fn partition_reassembly(seed in any::<u64>(), mask in proptest::collection::vec(any::<bool>(), 16)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tensor(&mut rng, 16, 2, 2);
            let a: Vec<usize> = (0..16).filter(|&i| mask[i]).collect();
            let b: Vec<usize> = (0..16).filter(|&i| !mask[i]).collect();
            let zeros = SeqTensor::zeros(16, 2, 2).unwrap();
            let out = zeros
                .scatter_tokens(&t.slice_tokens(&a).unwrap(), &a).unwrap()
                .scatter_tokens(&t.slice_tokens(&b).unwrap(), &b).unwrap();
            prop_assert_eq!(out, t);
        }
    }
}
