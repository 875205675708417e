//! Rank the tokens of a toy-model chunk by low-pass energy and show how the
//! selection moves with the cutoff.

use kvtune::spectral::{alpha_stability, rank_chunk, DEFAULT_ALPHA};
use kvtune::toymodel::{ToyModel, ToyModelConfig};

fn main() -> kvtune::Result<()> {
    let model = ToyModel::new(ToyModelConfig::desk(11))?;
    let tokens: Vec<u32> = (0..64u32).map(|i| (i * 37 + 5) % 256).collect();
    let chunk = model.encode_chunk_isolated("doc", &tokens)?;

    let ranking = rank_chunk(&chunk, DEFAULT_ALPHA)?;
    let scores = ranking.aggregate_scores();
    println!("top tokens (alpha {DEFAULT_ALPHA}):");
    for &t in ranking.aggregate_order.iter().take(8) {
        println!("  token {t:>2}  score {:.4}", scores[t as usize]);
    }
    println!("recompute at r=0.15: {:?}", ranking.indices_for_ratio(0.15)?);

    println!("alpha_a  alpha_b  jaccard");
    for (a, b, j) in alpha_stability(&chunk, &[0.25, 0.5, 0.75, 1.0], 0.15)? {
        println!("{a:<8} {b:<8} {j:.3}");
    }
    Ok(())
}
