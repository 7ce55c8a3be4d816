//! Degrades a clean image through the revised formation model, then
//! recomposes it under each of the four supported models.

use uie::formation::{
    reconstruct_jaffe, reconstruct_koschmieder, reconstruct_retinex, reconstruct_revised, synthesize_degraded, PSF_SIZE,
};
use uie::metrics::mse_psnr;
use uie::{ImageTensor, Tensor};

fn main() -> uie::Result<()> {
    let (h, w) = (24, 32);
    let j = ImageTensor::from_fn(h, w, |c, y, x| [0.8, 0.6, 0.4][c] * (0.5 + 0.5 * ((x + 2 * y) % 9) as f64 / 8.0))?;
    let depth: Vec<f64> = (0..h * w).map(|i| 1.0 + 3.0 * (i % w) as f64 / w as f64).collect();
    let a = [0.05, 0.45, 0.55];
    let s = synthesize_degraded(&j, &depth, [0.6, 0.15, 0.1], [0.5, 0.2, 0.15], a)?;

    let c = &s.components;
    let revised = reconstruct_revised(c)?;
    let kosch = reconstruct_koschmieder(&c.j, &c.t_d, a)?;
    let retinex = reconstruct_retinex(&c.j, &c.t_d)?;
    let psf = Tensor::from_fn(&[PSF_SIZE, PSF_SIZE], |i| if i == PSF_SIZE * PSF_SIZE / 2 { 0.1 } else { 0.0 });
    let jaffe = reconstruct_jaffe(&c.j, &c.t_d, a, &psf)?;

    for (name, r) in [("revised", &revised), ("koschmieder", &kosch), ("retinex", &retinex), ("jaffe-mcglamery", &jaffe)] {
        let (_, psnr) = mse_psnr(&r.image, &s.image)?;
        println!("{name:16} psnr vs degraded {psnr:6.2} dB  clamped {}", r.clamped);
    }
    Ok(())
}
