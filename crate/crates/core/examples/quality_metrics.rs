//! Full-reference and no-reference scores of an image pair.
//!
//! `cargo run --example quality_metrics -- enhanced.png reference.png`

use std::path::PathBuf;

use uie::io::load_image;
use uie::metrics::{cumulative_histogram, image_metrics, uciqe_parts, uiqm_parts};
use uie::ImageTensor;

fn main() -> uie::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let (img, reference) = match args.as_slice() {
        [a, b, ..] => (load_image(a)?, load_image(b)?),
        _ => {
            let r = ImageTensor::from_fn(32, 32, |c, y, x| ((x * 9 + y * 4 + c * 60) % 200) as f64 / 255.0)?;
            let i = ImageTensor::from_fn(32, 32, |c, y, x| (0.8 * r.get(c, y, x) + 0.1).min(1.0))?;
            (i, r)
        }
    };
    let m = image_metrics("image", &img, Some(&reference))?;
    println!("{}", serde_json::to_string_pretty(&m).expect("serialize"));
    let u = uiqm_parts(&img, 8)?;
    println!("uicm {:.4} uism {:.4} uiconm {:.4}", u.uicm, u.uism, u.uiconm);
    let q = uciqe_parts(&img);
    println!("chroma std {:.4} contrast {:.4} saturation {:.4}", q.chroma_std, q.luminance_contrast, q.mean_saturation);
    let h = cumulative_histogram(&[img])?;
    println!("histogram totals {:?}", h.totals());
    Ok(())
}
