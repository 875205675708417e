//! Put a chunk into memory- and directory-backed tiers, then fetch a sparse
//! layer and compare bytes read with the plan.

use kvtune::cachepool::{CachePool, TierConfig};
use kvtune::spectral::rank_chunk;
use kvtune::toymodel::{ToyModel, ToyModelConfig};

fn main() -> kvtune::Result<()> {
    let model = ToyModel::new(ToyModelConfig::desk(5))?;
    let tokens: Vec<u32> = (0..96u32).map(|i| (i * 71 + 3) % 256).collect();
    let chunk = model.encode_chunk_isolated("manual", &tokens)?;
    let ranking = rank_chunk(&chunk, 0.5)?;
    let dir = tempfile::tempdir()?;

    for tier in [TierConfig::cpu_mem(), TierConfig::ssd().with_dir(dir.path()), TierConfig::hdd().with_dir(dir.path())] {
        let pool = CachePool::new();
        let receipt = pool.put_chunk(&chunk, &ranking, &tier)?;
        let plan = pool.plan_sparse_fetch(&chunk.chunk_id, 2, 0.15)?;
        let got = pool.fetch_sparse(&plan)?;
        println!(
            "{:<8} wrote {} B ({:.2e} s)  kept {} tokens in {} ranges  read {} B of {} expected ({:.2e} s)",
            tier.kind,
            receipt.bytes_written,
            receipt.modeled_write_seconds,
            plan.keep_indices.len(),
            plan.byte_ranges.len(),
            got.bytes_read,
            plan.expected_bytes,
            got.modeled_seconds,
        );
        assert_eq!(&got.keys_raw, &chunk.keys_raw(2).slice_tokens(&plan.keep_indices)?);
        std::fs::remove_file(dir.path().join("manual.ctkv")).ok();
    }
    Ok(())
}
