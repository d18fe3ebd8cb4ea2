//! Train briefly on a few words, then compare free and lexicon decoding.
//!
//!     cargo run --example lexicon_decode -- [steps]

use fan::corpus::{make_dataset, CorpusConfig};
use fan::evalkit::{evaluate, DecodeMode};
use fan::model::{FanConfig, FanModel};
use fan::train::{TrainConfig, Trainer};

fn main() -> fan::Result<()> {
    let steps: u64 = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    let data = make_dataset(&CorpusConfig {
        count: 40,
        ratio: 0.3,
        ..CorpusConfig::default()
    })?;
    let mut model = FanModel::new(FanConfig::toy(), 1)?;
    model.set_crop(data.crop);
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            batch: 8,
            ..TrainConfig::default()
        },
    )?;
    trainer.run(&data, steps, |_, log| {
        if log.step % 100 == 0 {
            println!("{log}");
        }
        Ok(())
    })?;

    let lexicon: Vec<String> = data.samples.iter().map(|s| s.text.clone()).collect();
    let free = evaluate(&trainer.model, &data, &DecodeMode::Free)?;
    let lex = evaluate(&trainer.model, &data, &DecodeMode::Lexicon(lexicon.clone()))?;
    println!("free accuracy {:.3}, lexicon accuracy {:.3}", free.accuracy, lex.accuracy);
    for (f, l) in free.records.iter().zip(&lex.records).take(8) {
        println!("{:<6} free {:<6} lexicon {:<6}", f.truth, f.prediction, l.prediction);
    }
    Ok(())
}
