//! Background light estimate of an image file, or of a synthetic
//! blue-green scene when no path is given.

use std::path::PathBuf;

use uie::gbl::estimate_background_light_detailed;
use uie::io::load_image;
use uie::ImageTensor;

fn main() -> uie::Result<()> {
    let img = match std::env::args().nth(1) {
        Some(p) => load_image(&PathBuf::from(p))?,
        None => ImageTensor::from_fn(32, 32, |c, y, x| {
            let t = (x * 3 + y * 5) as f64 / 248.0;
            [0.08 + 0.1 * t, 0.45 + 0.2 * t, 0.55 + 0.15 * t][c]
        })?,
    };
    let est = estimate_background_light_detailed(&img)?;
    for (c, name) in ["r", "g", "b"].iter().enumerate() {
        let s = est.stats[c];
        println!(
            "{name}: avg {:7.2} std {:6.2} median {:7.2} -> raw {:7.2} clamped {:7.2}",
            s.avg, s.std, s.median, est.raw[c], est.clamped[c]
        );
    }
    println!("A (unit scale) = {:.4?}", est.unit());
    Ok(())
}
