//! Fits the toy model to one synthetic 32x32 pair.
//!
//! `cargo run --release --example overfit -- [steps] [seed]`

use uie::formation::synthesize_degraded;
use uie::trainer::{overfit_single, TrainConfig};
use uie::ImageTensor;

fn main() -> uie::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().ok());
    let steps = args.next().flatten().unwrap_or(500);
    let seed = args.next().flatten().unwrap_or(0);

    let n = 32;
    let label = ImageTensor::from_fn(n, n, |c, y, x| {
        let t = (x + y) as f64 / (2 * n) as f64;
        [0.2 + 0.6 * t, 0.5 + 0.3 * (y as f64 / n as f64), 0.7 - 0.4 * t][c]
    })?;
    let depth: Vec<f64> = (0..n * n).map(|i| 0.5 + (i % n) as f64 / n as f64).collect();
    let raw = synthesize_degraded(&label, &depth, [0.9, 0.3, 0.2], [0.8, 0.4, 0.3], [0.1, 0.5, 0.6])?.image;

    let mut cfg = TrainConfig::toy(n);
    cfg.steps = steps as usize;
    cfg.seed = seed;
    let start = std::time::Instant::now();
    let report = overfit_single(&raw, &label, &cfg)?;
    for (i, b) in report.curve.iter().enumerate().step_by(50) {
        println!(
            "step {i:4}  total {:.4}  l2 {:.5}  ssim {:.4}  edge {:.4}  uiqm {:.4}  l2_R {:.5}  ssim_R {:.4}",
            b.total, b.l2, b.l_ssim, b.l_edge, b.l_uiqm, b.l2_r, b.l_ssim_r
        );
    }
    println!(
        "l2(J, label) {:.6} -> {:.6} ({:.1}%), psnr {:.2} -> {:.2} dB in {:.1}s",
        report.initial_l2,
        report.final_l2,
        100.0 * report.final_l2 / report.initial_l2,
        report.initial_psnr,
        report.final_psnr,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
