//! Train the toy recognizer on a generated corpus and report held-out
//! accuracy as training goes.
//!
//!     cargo run --release --example train_toy -- [steps] [eval_every]

use std::time::Instant;

use fan::corpus::{make_dataset, CorpusConfig};
use fan::evalkit::{evaluate, DecodeMode};
use fan::model::{FanConfig, FanModel};
use fan::train::{TrainConfig, Trainer};

fn main() -> fan::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(1500, |s| s.parse().expect("steps"));
    let every: u64 = args.next().map_or(250, |s| s.parse().expect("eval_every"));

    let train = make_dataset(&CorpusConfig::default())?;
    let held_out = make_dataset(&CorpusConfig {
        count: 200,
        ratio: 1.0,
        seed: 1001,
        ..CorpusConfig::default()
    })?;

    let mut model = FanModel::new(FanConfig::toy(), 1)?;
    model.set_crop(train.crop);
    let mut trainer = Trainer::new(model, TrainConfig::default())?;
    let start = Instant::now();
    trainer.run(&train, steps, |t, log| {
        if log.step % 50 == 0 {
            println!("{log}  ({:.0}s)", start.elapsed().as_secs_f64());
        }
        if t.step % every == 0 {
            let r = evaluate(&t.model, &held_out, &DecodeMode::Free)?;
            println!(
                "eval step={} accuracy={:.3} total_ned={:.2} center_err={:.2}",
                t.step,
                r.accuracy,
                r.total_ned,
                r.mean_center_error.unwrap_or(f64::NAN)
            );
        }
        Ok(())
    })?;
    Ok(())
}
