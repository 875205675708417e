//! Energy per frequency decile for toy-model keys and values against white
//! noise, where every decile holds about a tenth.

use kvtune::kvcore::{ChunkId, DType, KvChunk, SeqTensor};
use kvtune::toymodel::{spectrum_report, ToyModel, ToyModelConfig};
use rand::{Rng, SeedableRng};

fn main() -> kvtune::Result<()> {
    let model = ToyModel::new(ToyModelConfig::desk(9))?;
    let tokens: Vec<u32> = (0..128u32).map(|i| (i * 53 + 11) % 256).collect();
    let chunk = model.encode_chunk_isolated("doc", &tokens)?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let mut noise = || SeqTensor::from_fn(128, 2, 8, |_, _, _| rng.random_range(-1.0f32..1.0));
    let keys = (0..4).map(|_| noise()).collect::<kvtune::Result<Vec<_>>>()?;
    let values = (0..4).map(|_| noise()).collect::<kvtune::Result<Vec<_>>>()?;
    let white = KvChunk::new(ChunkId::new("noise"), keys, values, DType::F32)?;

    let (toy, flat) = (spectrum_report(&chunk)?, spectrum_report(&white)?);
    println!("decile  toy_keys  toy_values  noise_keys");
    for i in 0..10 {
        println!("{:<7} {:<9.4} {:<11.4} {:.4}", i + 1, toy.keys[i], toy.values[i], flat.keys[i]);
    }
    Ok(())
}
