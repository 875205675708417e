//! Simulate the layer pipeline for one request and print the first events and
//! the overlap gain.

use kvtune::pipesim::{build_count_plan, simulate, summary, SimParams};
use kvtune::scheduler::{ttft_model, HardwareProfile};

fn main() -> kvtune::Result<()> {
    let p = HardwareProfile::new(40e-6, 60e-6, 20e-6)?;
    let plan = build_count_plan(&[512, 512, 256], 8, 128, 0.3, 8, 16)?;
    let tl = simulate(&plan, &SimParams::per_token(p));
    tl.verify()?;
    for line in tl.to_csv().lines().take(12) {
        println!("{line}");
    }
    print!("{}", summary(&plan, &tl));
    println!("model ttft_s {:.6e}", ttft_model(0.3, plan.context_tokens, plan.n_layers(), &p));
    println!("overlap saves {:.1}%", 100.0 * (1.0 - tl.ttft_s / tl.serialized_ttft()));
    Ok(())
}
