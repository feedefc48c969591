//! Runs the cross-validated phantom comparison and prints per-method means.
//!
//! `cargo run --release --example phantom_experiment [config.json]`

use colearn::experiment::{run_experiment, ExperimentConfig};
use colearn::io::read_json;

fn main() -> colearn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg: ExperimentConfig = match std::env::args().nth(1) {
        Some(p) => read_json(p.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let start = std::time::Instant::now();
    let report = run_experiment(&cfg)?;
    println!("{:<14} {:>16} {:>12}", "method", "foreground dice", "tumor dice");
    for m in report.methods.iter().chain([&report.oracle]) {
        println!(
            "{:<14} {:>16.4} {:>12.4}",
            m.name,
            m.mean_over_folds("foreground", "dice").unwrap_or(f64::NAN),
            m.mean_over_folds("tumors", "dice").unwrap_or(f64::NAN)
        );
    }
    if let Some(best) = report.best_fs() {
        println!("best fs: {}", best.name);
    }
    println!("elapsed: {:.0} s", start.elapsed().as_secs_f64());
    Ok(())
}
