//! Reverse-mode gradients of a small conv + norm + Mish stack checked
//! against central differences.

use uie::autodiff::{grad_check, Graph};
use uie::Tensor;

fn main() -> uie::Result<()> {
    let kernel = Tensor::from_fn(&[2, 3, 3, 3], |i| ((i * 7919) % 23) as f64 / 23.0 - 0.5);
    let gamma = Tensor::full(&[2], 1.3);
    let beta = Tensor::full(&[2], -0.2);
    let point = Tensor::from_fn(&[3, 6, 6], |i| ((i * 104729) % 31) as f64 / 31.0);

    let report = grad_check(
        |g: &mut Graph, x| {
            let k = g.constant(kernel.clone())?;
            let ga = g.constant(gamma.clone())?;
            let be = g.constant(beta.clone())?;
            let y = g.conv2d(x, k, 1)?;
            let y = g.instance_norm(y, ga, be, 1e-5)?;
            let y = g.mish(y);
            let y = g.square(y);
            Ok(g.mean(y))
        },
        &point,
        1e-5,
    )?;
    println!(
        "checked {} coordinates, max relative error {:.3e} (analytic {:.6}, numeric {:.6} at {})",
        report.checked, report.max_rel_error, report.analytic, report.numeric, report.worst_index
    );
    Ok(())
}
