//! Keys cached without rotation can be placed at any global offset: rotating
//! them at fetch time gives the same layer-1 keys as a full prefill.

use kvtune::rope::rope_apply;
use kvtune::toymodel::{ToyModel, ToyModelConfig};

fn main() -> kvtune::Result<()> {
    let model = ToyModel::new(ToyModelConfig::desk(3))?;
    let prefix: Vec<u32> = (0..40u32).map(|i| (i * 13 + 1) % 256).collect();
    let doc: Vec<u32> = (0..24u32).map(|i| (i * 29 + 7) % 256).collect();

    let chunk = model.encode_chunk_isolated("doc", &doc)?;
    let prompt: Vec<u32> = prefix.iter().chain(&doc).copied().collect();
    let full = model.full_prefill(&prompt)?;

    let offset = prefix.len();
    let positions: Vec<usize> = (offset..offset + doc.len()).collect();
    let placed = rope_apply(chunk.keys_raw(0), &positions, &model.cfg.rope)?;
    let reference = full.kv[0].0.slice_tokens(&positions)?;
    println!("doc placed at offset {offset}");
    println!("layer-1 key max |diff|: {:.3e}", placed.max_abs_diff(&reference)?);

    let wrong = rope_apply(chunk.keys_raw(0), &(0..doc.len()).collect::<Vec<_>>(), &model.cfg.rope)?;
    println!("same keys rotated at local positions: {:.3e}", wrong.max_abs_diff(&reference)?);
    Ok(())
}
