//! Draw the greedy attention centers of an untrained model over a rendered
//! word and write the overlay as PPM.
//!
//!     cargo run --example viz_overlay -- [OUT.ppm]

use fan::cli::{draw_overlay, marker_positions};
use fan::corpus::{generate_sample, CorpusConfig, GlyphSet};
use fan::model::{FanConfig, FanModel};
use fan::netpbm::write_ppm;

fn main() -> fan::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "overlay.ppm".into());
    let cfg = CorpusConfig::default();
    let sample = generate_sample(&cfg, &GlyphSet::default(), 0, true)?;
    let model = FanModel::new(FanConfig::toy(), 2)?;
    let rec = model.recognize(&sample.image)?;
    let markers = marker_positions(&rec.centers, sample.image.width, sample.image.height);
    write_ppm(std::path::Path::new(&out), &draw_overlay(&sample.image, &markers))?;
    println!("truth {} prediction {:?}", sample.text, rec.text);
    for (c, b) in rec.centers.iter().zip(sample.boxes.iter().flatten()) {
        println!("center ({:.1}, {:.1}) box center ({:.1}, {:.1})", c.x, c.y, b.center().x, b.center().y);
    }
    println!("wrote {out}");
    Ok(())
}
