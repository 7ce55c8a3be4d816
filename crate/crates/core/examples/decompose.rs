//! Runs a freshly initialized model on an image and writes the five
//! estimated components to `out/decompose_example/`.

use std::path::Path;

use uie::io::{load_image, resize_bilinear, save_image};
use uie::nets::{ModelConfig, ModelWeights};
use uie::trainer::decompose;
use uie::ImageTensor;

fn main() -> uie::Result<()> {
    let cfg = ModelConfig::toy(32);
    let weights = ModelWeights::init(&cfg, 7)?;
    println!("{} tensors, {} parameters", weights.len(), weights.num_params());

    let raw = match std::env::args().nth(1) {
        Some(p) => resize_bilinear(&load_image(Path::new(&p))?, cfg.height, cfg.width)?,
        None => ImageTensor::from_fn(32, 32, |c, y, x| [0.1, 0.5, 0.6][c] + 0.01 * ((x + y) % 20) as f64)?,
    };
    let d = decompose(&weights, &cfg, &raw)?;
    let out = Path::new("out/decompose_example");
    let light = ImageTensor::uniform(raw.height(), raw.width(), d.a)?;
    for (name, img) in [
        ("scene_radiance", &d.j),
        ("direct_transmission", &d.t_d),
        ("backscatter_transmission", &d.t_b),
        ("background_light", &light),
        ("reconstructed", &d.reconstruction),
    ] {
        save_image(img, &out.join(format!("{name}.png")))?;
    }
    println!("A = {:.4?}, reconstruction clamped: {}", d.a, d.reconstruction_clamped);
    println!("wrote {}", out.display());
    Ok(())
}
