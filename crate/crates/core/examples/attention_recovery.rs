//! Suffix attention deviation from full prefill for each selection strategy
//! over the committed seed list.

use kvtune::toymodel::{attention_experiment, mean_deviation, ExperimentConfig, Strategy, COMMITTED_SEEDS};

fn main() -> kvtune::Result<()> {
    let cfg = ExperimentConfig::default();
    let mut rows = Vec::new();
    for seed in COMMITTED_SEEDS {
        rows.extend(attention_experiment(seed, &cfg, &Strategy::ALL)?);
    }
    println!("strategy   r      mean_deviation");
    for s in Strategy::ALL {
        let r = rows.iter().find(|row| row.strategy == s).map_or(0.0, |row| row.r);
        println!("{:<10} {:.2}   {:.6}", s.name(), r, mean_deviation(&rows, s).unwrap_or(f64::NAN));
    }
    let low = rows.iter().filter(|r| r.strategy == Strategy::LowFreq);
    let none = rows.iter().filter(|r| r.strategy == Strategy::None);
    let wins = low.zip(none).filter(|(l, n)| l.deviation < n.deviation).count();
    println!("lowfreq beats full reuse on {wins}/{} seeds", COMMITTED_SEEDS.len());
    Ok(())
}
