//! Generate a corpus on disk and print a few records.
//!
//!     cargo run --release --example gen_corpus -- OUT_DIR [toy|drift] [count]

use std::path::PathBuf;

use fan::corpus::{make_dataset, CorpusConfig};

fn main() -> fan::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "corpus".into()));
    let mut cfg = match args.next().as_deref() {
        Some("drift") => CorpusConfig::drift(),
        _ => CorpusConfig::default(),
    };
    cfg.count = args.next().map_or(100, |s| s.parse().expect("count"));

    let data = make_dataset(&cfg)?;
    data.write(&out)?;
    println!(
        "{} samples, {} annotated, crop {}x{} (WxH) -> {}",
        data.len(),
        data.samples.iter().filter(|s| s.annotated()).count(),
        data.crop.w,
        data.crop.h,
        out.display()
    );
    for s in data.samples.iter().take(5) {
        println!("{:<6} boxes={:?}", s.text, s.boxes.as_ref().map(|b| b.len()));
    }
    Ok(())
}
