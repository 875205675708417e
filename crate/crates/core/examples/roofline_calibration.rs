//! Warm-started golden-section search against the analytic TTFT model on two
//! storage tiers, compared with a cold search and a dense grid.

use kvtune::cachepool::{measure_transfer_cost, TierConfig};
use kvtune::scheduler::{
    calibrate, grid_argmin, gss_plain, model_evaluator, synthetic_cal_set, ttft_model, CalibrationSetup, CostSource,
    HardwareProfile, SearchConfig, TransferSource,
};

fn main() -> kvtune::Result<()> {
    let token_bytes = 8 * 128 * 4 * 2;
    let cfg = SearchConfig::default();
    let cal = synthetic_cal_set(10, 4, 1024, 32);
    for tier in [TierConfig::hdd(), TierConfig::ssd(), TierConfig::cpu_mem()] {
        let setup = CalibrationSetup {
            t_c: CostSource::Injected(40e-6),
            t_i: TransferSource::Tier { tier: tier.clone(), sample_bytes: 1024 * token_bytes, token_bytes },
            t_o: CostSource::Injected(20e-6),
        };
        let rep = calibrate(setup, model_evaluator(32), &cal, &cfg)?;
        let p = rep.profile;
        let n = 4 * 1024;
        let cold = gss_plain(|r| Ok(ttft_model(r, n, 32, &p)), &cfg)?;
        let (grid, _) = grid_argmin(|r| ttft_model(r, n, 32, &p), cfg.r_min, cfg.r_max, 0.001);
        println!(
            "{:<8} t_i {:.2e}  r0 {:.3} (unclipped {:.3})  r* {:.3} in {} evals  cold {} evals  grid {:.3}",
            tier.kind,
            p.t_i,
            rep.r0,
            rep.r0_unclipped,
            rep.r_star(),
            rep.search.eval_count,
            cold.eval_count,
            grid,
        );
    }
    let p = HardwareProfile::new(1e-6, 3e-6, 0.0)?;
    let t_i = measure_transfer_cost(&TierConfig::hdd(), 1 << 20, token_bytes)?;
    println!("hdd per-token transfer over a 1 MiB read: {t_i:.3e} s; crossover for t_c=1us,t_i=3us: {:.2}", p.crossover());
    Ok(())
}
