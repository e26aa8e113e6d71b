//! Full toy experiment: `cargo run --release -p funkflow --example toy -- [seed] [out.json]`.

use std::time::Instant;

use funkflow::pipeline::run_toy_pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let start = Instant::now();
    let report = run_toy_pipeline(seed)?;
    let secs = start.elapsed().as_secs_f64();
    for e in &report.loss_history {
        println!("epoch {:>2} loss {:.5e}", e.epoch, e.mean_loss);
    }
    println!("loss drop      {:.3}", report.loss_drop);
    println!(
        "win fraction   {:.3} over {} subjects",
        report.win_fraction,
        report.trained.rows.len()
    );
    println!("coverage       {:?}", report.coverage.fractions);
    println!(
        "vpc coverage   {:.3} monotone {}",
        report.vpc_coverage, report.vpc_monotone
    );
    println!(
        "mmd2 trained   {:.4e} baseline {:.4e}",
        report.mmd2_trained, report.mmd2_baseline
    );
    println!("runtime        {secs:.1} s");
    if let Some(path) = args.next() {
        std::fs::write(path, report.to_json()?)?;
    }
    Ok(())
}
