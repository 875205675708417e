//! External KV cache pool.
//!
//! Chunks are stored as CTKV images (pre-RoPE keys, values, ranking) on a
//! tier. The stored ranking doubles as an I/O plan: for a recompute ratio `r`
//! only the complement of the selected tokens is read, as coalesced
//! token-granular byte ranges.
//!
//! The pool is `Sync`. Readers share the index; `put_chunk` takes the writer
//! lock. Fetches may run on a transfer worker while compute proceeds.

mod format;
mod tier;

pub use format::{
    chunk_id_for_path, decode_chunk, decode_ranking, encode_chunk, encode_ranking, read_chunk_file,
    write_chunk_file, CtkvHeader, CtkvLayout, KvPart, FLAG_KEYS_PRE_ROPE, HEADER_LEN, MAGIC, VERSION,
};
pub use tier::{Backing, TierConfig, TierKind, HDD_READ_BW, HDD_WRITE_BW, SSD_READ_BW, SSD_WRITE_BW};

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use crate::error::{param_err, Error, Result};
use crate::kvcore::{ChunkGeometry, ChunkId, DType, KvChunk, SeqTensor};
use crate::spectral::ImportanceRanking;

pub const CHUNK_EXT: &str = "ctkv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ByteRange {
    pub offset: usize,
    pub len: usize,
}

/// Which bytes of one layer to read so that only reused tokens are moved.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFetchPlan {
    pub chunk_id: ChunkId,
    pub layer: usize,
    /// Tokens to fetch, ascending; the complement of the recompute set.
    pub keep_indices: Vec<usize>,
    /// Key ranges followed by value ranges, each coalesced over runs.
    pub byte_ranges: Vec<ByteRange>,
    pub expected_bytes: usize,
}

/// Rows returned by [`CachePool::fetch_sparse`].
#[derive(Clone, Debug)]
pub struct SparseFetch {
    pub keys_raw: SeqTensor,
    pub values: SeqTensor,
    pub keep_indices: Vec<usize>,
    pub bytes_read: usize,
    /// `fixed_latency + expected_bytes / read_bw` on the chunk's tier.
    pub modeled_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PutReceipt {
    pub chunk_id: ChunkId,
    pub bytes_written: usize,
    pub modeled_write_seconds: f64,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug)]
enum Store {
    Memory(Arc<Vec<u8>>),
    File(PathBuf),
}

#[derive(Clone, Debug)]
struct Entry {
    tier: TierConfig,
    store: Store,
    layout: CtkvLayout,
    ranking: Arc<ImportanceRanking>,
}

#[derive(Debug, Default)]
pub struct CachePool {
    entries: RwLock<HashMap<ChunkId, Entry>>,
}

/// Coalesces ascending token indices into runs of consecutive tokens.
fn token_runs(indices: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &i in indices {
        match runs.last_mut() {
            Some((start, len)) if *start + *len == i => *len += 1,
            _ => runs.push((i, 1)),
        }
    }
    runs
}

fn plan_ranges(layout: &CtkvLayout, layer: usize, keep: &[usize]) -> Vec<ByteRange> {
    let runs = token_runs(keep);
    let rb = layout.row_bytes();
    [KvPart::Keys, KvPart::Values]
        .iter()
        .flat_map(|&part| {
            runs.iter().map(move |&(start, len)| ByteRange {
                offset: layout.row_offset(layer, part, start),
                len: len * rb,
            })
        })
        .collect()
}

impl CachePool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens a file-backed tier directory and registers every ranked `.ctkv`
    /// file in it. Files without a ranking block cannot be planned against and
    /// are reported as an error.
    pub fn open_dir(tier: &TierConfig) -> Result<Self> {
        let Backing::Dir(dir) = &tier.backing else {
            return Err(param_err("open_dir needs a directory-backed tier"));
        };
        let pool = Self::new();
        if !dir.exists() {
            return Ok(pool);
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == CHUNK_EXT))
            .collect();
        paths.sort();
        let mut entries = pool.entries.write().unwrap();
        for path in paths {
            let bytes = fs::read(&path)?;
            let header = CtkvHeader::parse(&bytes)?;
            let layout = CtkvLayout::new(header.geometry, header.dtype);
            if bytes.len() != layout.file_len(true) {
                return Err(Error::Format(format!("{} has no ranking block", path.display())));
            }
            let ranking = decode_ranking(&bytes[layout.kv_end()..], &header.geometry)?;
            entries.insert(
                chunk_id_for_path(&path),
                Entry { tier: tier.clone(), store: Store::File(path), layout, ranking: Arc::new(ranking) },
            );
        }
        drop(entries);
        Ok(pool)
    }

    pub fn chunk_ids(&self) -> Vec<ChunkId> {
        let mut ids: Vec<ChunkId> = self.entries.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn contains(&self, id: &ChunkId) -> bool {
        self.entries.read().unwrap().contains_key(id)
    }

    fn entry(&self, id: &ChunkId) -> Result<Entry> {
        self.entries
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(id.to_string()))
    }

    /// Serializes `chunk` with its ranking onto `tier`.
    pub fn put_chunk(&self, chunk: &KvChunk, ranking: &ImportanceRanking, tier: &TierConfig) -> Result<PutReceipt> {
        tier.validate()?;
        let g = chunk.geometry();
        if ranking.n_tokens != g.n_tokens || ranking.n_layers() != g.n_layers {
            return Err(Error::Shape(format!(
                "ranking ({} layers, {} tokens) does not match chunk ({} layers, {} tokens)",
                ranking.n_layers(),
                ranking.n_tokens,
                g.n_layers,
                g.n_tokens
            )));
        }
        let bytes = encode_chunk(chunk, Some(ranking))?;
        let id = chunk.chunk_id.clone();
        let mut entries = self.entries.write().unwrap();
        if entries.contains_key(&id) {
            return Err(Error::AlreadyExists(id.to_string()));
        }
        let (store, path) = match &tier.backing {
            Backing::InMemory => (Store::Memory(Arc::new(bytes.clone())), None),
            Backing::Dir(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(format!("{}.{CHUNK_EXT}", id.as_str()));
                if path.exists() {
                    return Err(Error::AlreadyExists(id.to_string()));
                }
                format::write_atomic(&path, &bytes)?;
                (Store::File(path.clone()), Some(path))
            }
        };
        entries.insert(
            id.clone(),
            Entry {
                tier: tier.clone(),
                store,
                layout: CtkvLayout::new(g, chunk.dtype),
                ranking: Arc::new(ranking.clone()),
            },
        );
        Ok(PutReceipt {
            chunk_id: id,
            bytes_written: bytes.len(),
            modeled_write_seconds: tier.write_time(bytes.len()),
            path,
        })
    }

    /// Dense read of a stored chunk and its ranking.
    pub fn get_full(&self, id: &ChunkId) -> Result<(KvChunk, ImportanceRanking)> {
        let entry = self.entry(id)?;
        let bytes = match &entry.store {
            Store::Memory(b) => b.as_ref().clone(),
            Store::File(p) => fs::read(p)?,
        };
        let (chunk, ranking) = decode_chunk(&bytes, id.clone())?;
        let ranking = ranking.ok_or_else(|| Error::Format(format!("chunk {id} lost its ranking block")))?;
        Ok((chunk, ranking))
    }

    pub fn ranking(&self, id: &ChunkId) -> Result<Arc<ImportanceRanking>> {
        Ok(self.entry(id)?.ranking)
    }

    pub fn geometry(&self, id: &ChunkId) -> Result<(ChunkGeometry, DType)> {
        let e = self.entry(id)?;
        Ok((e.layout.geometry, e.layout.dtype))
    }

    pub fn tier(&self, id: &ChunkId) -> Result<TierConfig> {
        Ok(self.entry(id)?.tier)
    }

    /// Plans the read of the tokens not selected for recomputation at ratio `r`.
    pub fn plan_sparse_fetch(&self, id: &ChunkId, layer: usize, r: f64) -> Result<SparseFetchPlan> {
        let entry = self.entry(id)?;
        let g = entry.layout.geometry;
        if layer >= g.n_layers {
            return Err(param_err(format!("layer {layer} out of range for {} layers", g.n_layers)));
        }
        let keep = entry.ranking.complement_for_ratio(r)?;
        let byte_ranges = plan_ranges(&entry.layout, layer, &keep);
        let expected_bytes = keep.len() * g.token_layer_bytes(entry.layout.dtype);
        Ok(SparseFetchPlan { chunk_id: id.clone(), layer, keep_indices: keep, byte_ranges, expected_bytes })
    }

    /// Executes a plan, reading exactly `plan.expected_bytes` from storage.
    pub fn fetch_sparse(&self, plan: &SparseFetchPlan) -> Result<SparseFetch> {
        let entry = self.entry(&plan.chunk_id)?;
        let layout = entry.layout;
        let g = layout.geometry;
        if plan.layer >= g.n_layers {
            return Err(Error::InvalidPlan(format!("layer {} out of range", plan.layer)));
        }
        if plan.keep_indices.windows(2).any(|w| w[0] >= w[1])
            || plan.keep_indices.last().is_some_and(|&i| i >= g.n_tokens)
        {
            return Err(Error::InvalidPlan("keep indices must be ascending, distinct and < N".into()));
        }
        if plan.byte_ranges != plan_ranges(&layout, plan.layer, &plan.keep_indices)
            || plan.expected_bytes != plan.keep_indices.len() * g.token_layer_bytes(layout.dtype)
        {
            return Err(Error::InvalidPlan("byte ranges do not match the chunk layout".into()));
        }

        let mut buf = vec![0u8; plan.expected_bytes];
        let mut filled = 0;
        match &entry.store {
            Store::Memory(bytes) => {
                for r in &plan.byte_ranges {
                    let src = bytes
                        .get(r.offset..r.offset + r.len)
                        .ok_or_else(|| Error::InvalidPlan("range past end of stored chunk".into()))?;
                    buf[filled..filled + r.len].copy_from_slice(src);
                    filled += r.len;
                }
            }
            Store::File(path) => {
                let mut f = File::open(path)?;
                let file_len = f.metadata()?.len() as usize;
                if file_len != layout.file_len(true) {
                    return Err(Error::Io(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{} is {file_len} bytes, expected {}", path.display(), layout.file_len(true)),
                    )));
                }
                for r in &plan.byte_ranges {
                    f.seek(SeekFrom::Start(r.offset as u64))?;
                    f.read_exact(&mut buf[filled..filled + r.len])?;
                    filled += r.len;
                }
            }
        }
        debug_assert_eq!(filled, plan.expected_bytes);

        let half = filled / 2;
        let n = plan.keep_indices.len();
        let keys_raw = SeqTensor::new(format::f32s(&buf[..half]), n, g.n_heads, g.head_dim)?;
        let values = SeqTensor::new(format::f32s(&buf[half..]), n, g.n_heads, g.head_dim)?;
        Ok(SparseFetch {
            keys_raw,
            values,
            keep_indices: plan.keep_indices.clone(),
            bytes_read: filled,
            modeled_seconds: entry.tier.read_time(plan.expected_bytes),
        })
    }
}

/// Seconds to move one token's K+V for one layer from `tier`.
///
/// In-memory tiers return the model value
/// `token_bytes / read_bw + fixed_latency * token_bytes / sample_bytes`.
/// Directory tiers write a `sample_bytes` scratch file and time sequential
/// reads of it (best of three).
pub fn measure_transfer_cost(tier: &TierConfig, sample_bytes: usize, token_bytes: usize) -> Result<f64> {
    tier.validate()?;
    if sample_bytes == 0 || token_bytes == 0 {
        return Err(param_err("sample and token sizes must be positive"));
    }
    let tokens = sample_bytes as f64 / token_bytes as f64;
    match &tier.backing {
        Backing::InMemory => Ok(token_bytes as f64 / tier.read_bw + tier.fixed_latency / tokens),
        Backing::Dir(dir) => {
            let secs = timed_sequential_read(dir, sample_bytes)?;
            Ok(secs.max(1e-9) / tokens)
        }
    }
}

fn timed_sequential_read(dir: &Path, sample_bytes: usize) -> Result<f64> {
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    let block: Vec<u8> = (0..1 << 16).map(|i: u32| (i.wrapping_mul(2_654_435_761) >> 24) as u8).collect();
    let mut left = sample_bytes;
    while left > 0 {
        let n = left.min(block.len());
        tmp.write_all(&block[..n])?;
        left -= n;
    }
    tmp.as_file().sync_all()?;
    let mut best = f64::INFINITY;
    let mut buf = vec![0u8; 1 << 20];
    for _ in 0..3 {
        let mut f = File::open(tmp.path())?;
        let start = Instant::now();
        let mut total = 0;
        loop {
            let n = f.read(&mut buf)?;
            if n == 0 {
                break;
            }
            total += n;
        }
        let secs = start.elapsed().as_secs_f64();
        if total != sample_bytes {
            return Err(Error::Profile(format!("read {total} of {sample_bytes} sample bytes")));
        }
        best = best.min(secs);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::rank_chunk;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chunk(id: &str, seed: u64, l: usize, n: usize, h: usize, d: usize) -> KvChunk {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = || SeqTensor::from_fn(n, h, d, |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap();
        let ks = (0..l).map(|_| t()).collect();
        let vs = (0..l).map(|_| t()).collect();
        KvChunk::new(ChunkId::new(id), ks, vs, DType::F32).unwrap()
    }

    fn put(pool: &CachePool, c: &KvChunk, tier: &TierConfig) -> PutReceipt {
        pool.put_chunk(c, &rank_chunk(c, 0.5).unwrap(), tier).unwrap()
    }

    #[test]
    fn run_coalescing() {
        assert_eq!(token_runs(&[0, 1, 2, 5, 7, 8]), vec![(0, 3), (5, 1), (7, 2)]);
        assert!(token_runs(&[]).is_empty());
    }

    #[test]
    fn put_and_get_round_trip_in_memory() {
        let pool = CachePool::new();
        let c = chunk("a", 1, 2, 6, 2, 4);
        let receipt = put(&pool, &c, &TierConfig::cpu_mem());
        assert_eq!(receipt.bytes_written, CtkvLayout::new(c.geometry(), DType::F32).file_len(true));
        let (back, _) = pool.get_full(&ChunkId::new("a")).unwrap();
        assert_eq!(back, c);
        let dup = pool.put_chunk(&c, &rank_chunk(&c, 0.5).unwrap(), &TierConfig::cpu_mem());
        assert!(matches!(dup, Err(Error::AlreadyExists(_))));
    }

    #[test]
    fn hdd_write_time_model() {
        let pool = CachePool::new();
        let c = chunk("w", 2, 1, 4, 1, 2);
        let r = put(&pool, &c, &TierConfig::hdd());
        let expected = r.bytes_written as f64 / 201e6 + TierConfig::hdd().fixed_latency;
        assert_eq!(r.modeled_write_seconds, expected);
    }

    #[test]
    fn plan_boundaries() {
        let pool = CachePool::new();
        let c = chunk("p", 3, 3, 20, 2, 4);
        put(&pool, &c, &TierConfig::ssd());
        let id = ChunkId::new("p");
        let full = pool.plan_sparse_fetch(&id, 1, 0.0).unwrap();
        assert_eq!(full.keep_indices, (0..20).collect::<Vec<_>>());
        assert_eq!(full.expected_bytes, 20 * 2 * 4 * 4 * 2);
        assert_eq!(full.byte_ranges.len(), 2);
        let none = pool.plan_sparse_fetch(&id, 1, 1.0).unwrap();
        assert!(none.keep_indices.is_empty() && none.byte_ranges.is_empty());
        assert_eq!(none.expected_bytes, 0);
        let p15 = pool.plan_sparse_fetch(&id, 2, 0.15).unwrap();
        assert_eq!(p15.keep_indices.len(), 17);
        assert_eq!(p15.expected_bytes, 17 * 2 * 4 * 4 * 2);
        assert!(matches!(pool.plan_sparse_fetch(&ChunkId::new("zz"), 0, 0.1), Err(Error::NotFound(_))));
        assert!(pool.plan_sparse_fetch(&id, 3, 0.1).is_err());
    }

    #[test]
    fn sparse_fetch_reassembles_chunk() {
        let pool = CachePool::new();
        let c = chunk("s", 4, 2, 24, 2, 4);
        put(&pool, &c, &TierConfig::hdd());
        let id = ChunkId::new("s");
        let ranking = pool.ranking(&id).unwrap();
        for layer in 0..2 {
            let plan = pool.plan_sparse_fetch(&id, layer, 0.3).unwrap();
            let got = pool.fetch_sparse(&plan).unwrap();
            assert_eq!(got.bytes_read, plan.expected_bytes);
            let recompute = ranking.indices_for_ratio(0.3).unwrap();
            let zeros = SeqTensor::zeros(24, 2, 4).unwrap();
            let k = zeros
                .scatter_tokens(&got.keys_raw, &got.keep_indices)
                .unwrap()
                .scatter_tokens(&c.keys_raw(layer).slice_tokens(&recompute).unwrap(), &recompute)
                .unwrap();
            assert_eq!(&k, c.keys_raw(layer));
            let v = zeros
                .scatter_tokens(&got.values, &got.keep_indices)
                .unwrap()
                .scatter_tokens(&c.values(layer).slice_tokens(&recompute).unwrap(), &recompute)
                .unwrap();
            assert_eq!(&v, c.values(layer));
        }
        let full = pool.fetch_sparse(&pool.plan_sparse_fetch(&id, 0, 0.0).unwrap()).unwrap();
        assert_eq!(&full.keys_raw, c.keys_raw(0));
        assert_eq!(&full.values, c.values(0));
    }

    #[test]
    fn hdd_fetch_time_model() {
        // 64 tokens x 8 heads x 128 dims x 4 B x 2 = 512 KiB per layer; two layers' worth = 1 MiB.
        let pool = CachePool::new();
        let c = chunk("m", 5, 1, 128, 8, 128);
        put(&pool, &c, &TierConfig::hdd());
        let plan = pool.plan_sparse_fetch(&ChunkId::new("m"), 0, 0.0).unwrap();
        assert_eq!(plan.expected_bytes, 1 << 20);
        let got = pool.fetch_sparse(&plan).unwrap();
        let hdd = TierConfig::hdd();
        assert_eq!(got.modeled_seconds, hdd.fixed_latency + (1u64 << 20) as f64 / 205e6);
    }

    #[test]
    fn tampered_plans_are_rejected() {
        let pool = CachePool::new();
        let c = chunk("t", 6, 1, 10, 1, 2);
        put(&pool, &c, &TierConfig::ssd());
        let mut plan = pool.plan_sparse_fetch(&ChunkId::new("t"), 0, 0.2).unwrap();
        plan.expected_bytes += 4;
        assert!(matches!(pool.fetch_sparse(&plan), Err(Error::InvalidPlan(_))));
        let mut plan = pool.plan_sparse_fetch(&ChunkId::new("t"), 0, 0.2).unwrap();
        plan.keep_indices.swap(0, 1);
        assert!(matches!(pool.fetch_sparse(&plan), Err(Error::InvalidPlan(_))));
        let mut plan = pool.plan_sparse_fetch(&ChunkId::new("t"), 0, 0.2).unwrap();
        plan.byte_ranges[0].offset += 1;
        assert!(matches!(pool.fetch_sparse(&plan), Err(Error::InvalidPlan(_))));
    }

    #[test]
    fn file_backed_round_trip_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let tier = TierConfig::hdd().with_dir(dir.path());
        let pool = CachePool::new();
        let c = chunk("f", 7, 2, 12, 2, 2);
        let receipt = put(&pool, &c, &tier);
        let path = receipt.path.unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, receipt.bytes_written);

        let reopened = CachePool::open_dir(&tier).unwrap();
        assert_eq!(reopened.chunk_ids(), vec![ChunkId::new("f")]);
        let (back, _) = reopened.get_full(&ChunkId::new("f")).unwrap();
        assert_eq!(back, c);
        let plan = reopened.plan_sparse_fetch(&ChunkId::new("f"), 1, 0.25).unwrap();
        let got = reopened.fetch_sparse(&plan).unwrap();
        assert_eq!(got.keys_raw, c.keys_raw(1).slice_tokens(&plan.keep_indices).unwrap());

        // Truncated file on disk surfaces as an I/O error.
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(reopened.fetch_sparse(&plan), Err(Error::Io(_))));
        fs::remove_file(&path).unwrap();
        assert!(matches!(reopened.fetch_sparse(&plan), Err(Error::Io(_))));
    }

    #[test]
    fn concurrent_readers() {
        let pool = Arc::new(CachePool::new());
        let c = chunk("cc", 8, 4, 32, 2, 4);
        put(&pool, &c, &TierConfig::cpu_mem());
        let handles: Vec<_> = (0..4)
            .map(|layer| {
                let pool = Arc::clone(&pool);
                std::thread::spawn(move || {
                    let plan = pool.plan_sparse_fetch(&ChunkId::new("cc"), layer, 0.15).unwrap();
                    pool.fetch_sparse(&plan).unwrap().bytes_read
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), 27 * 2 * 4 * 4 * 2);
        }
    }

    #[test]
    fn transfer_cost_model() {
        let tier = TierConfig::new(TierKind::Custom, 1e9, 1e9, 0.0, Backing::InMemory).unwrap();
        let t = measure_transfer_cost(&tier, 1 << 20, 128).unwrap();
        assert_eq!(t, 128.0 / 1e9);
        let faster = TierConfig { read_bw: 2e9, ..tier };
        assert_eq!(measure_transfer_cost(&faster, 1 << 20, 128).unwrap(), t / 2.0);
        assert!(measure_transfer_cost(&faster, 0, 128).is_err());
    }

    #[test]
    fn measured_transfer_cost_is_positive() {
        let dir = tempfile::tempdir().unwrap();
        let tier = TierConfig::ssd().with_dir(dir.path());
        let t = measure_transfer_cost(&tier, 4 << 20, 8192).unwrap();
        assert!(t.is_finite() && t > 0.0);
    }
}
