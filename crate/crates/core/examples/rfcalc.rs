//! Receptive fields and feature centers of the built-in encoders.
//!
//!     cargo run --example rfcalc -- [toy|paper]

use fan::encoder::EncoderConfig;
use fan::rfgeom::feature_centers;

fn main() -> fan::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "toy".into());
    let enc = EncoderConfig::preset(&name)?;
    let stack = enc.layer_stack();
    print!("{}", stack.describe(Some(enc.input)));
    let out = stack.output_size(enc.input)?;
    println!("# {} features, net stride {:?}", out.w, stack.net_stride());
    let centers = feature_centers(&stack, enc.input)?;
    for (j, c) in centers.iter().enumerate().take(8) {
        let b = stack.column_field(j + 1, enc.input)?;
        println!(
            "feature {:>3}: x {:>4}..{:<4} y {:>3}..{:<3} center ({}, {})",
            j + 1,
            b.x_min,
            b.x_max,
            b.y_min,
            b.y_max,
            c.x,
            c.y
        );
    }
    if centers.len() > 8 {
        println!("... {} more", centers.len() - 8);
    }
    Ok(())
}
