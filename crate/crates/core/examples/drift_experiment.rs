//! Train the attention-only baseline and the focusing model on the drift
//! corpus with identical seeds, and compare accuracy and center error.
//!
//!     cargo run --release --example drift_experiment -- [steps] [runs] [lambda]

use fan::experiment::{paired_run, PairedConfig};

fn main() -> fan::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(3000, |s| s.parse().expect("steps"));
    let runs: u64 = args.next().map_or(3, |s| s.parse().expect("runs"));
    let lambda: f64 = args.next().map_or(0.01, |s| s.parse().expect("lambda"));

    let base = PairedConfig::drift(steps);
    println!("{:>4} {:>8} {:>9} {:>10} {:>8}", "run", "lambda", "accuracy", "center_err", "seconds");
    for r in 0..runs {
        let (an, fan) = paired_run(&base.for_run(r), lambda)?;
        for arm in [&an, &fan] {
            println!(
                "{r:>4} {:>8} {:>9.4} {:>10.4} {:>8.0}",
                arm.lambda,
                arm.report.accuracy,
                arm.report.mean_center_error.unwrap_or(f64::NAN),
                arm.seconds
            );
        }
    }
    Ok(())
}
