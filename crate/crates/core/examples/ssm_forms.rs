//! Zero-order-hold discretization and the three equivalent ways of running
//! a linear state-space model over a sequence.

use uie::ssm::{discretize_zoh, scan_chunked, scan_conv, scan_recurrent, SsmParams, StateMatrix};

fn main() -> uie::Result<()> {
    let zoh = discretize_zoh(&StateMatrix::Diagonal(vec![-1.0]), &[1.0], std::f64::consts::LN_2)?;
    println!("A=-1, delta=ln 2: A_bar {:?}, B_bar {:?}", zoh.a_bar, zoh.b_bar);

    let params = SsmParams::new(
        StateMatrix::Diagonal(vec![-0.5, -1.0, -2.0, -4.0]),
        vec![1.0, 0.5, -0.3, 0.2],
        vec![0.4, -0.2, 0.9, 0.1],
        0.25,
        0.1,
    )?;
    let sys = params.discretize()?;
    let x: Vec<f64> = (0..64).map(|k| (k as f64 * 0.3).sin()).collect();
    let rec = scan_recurrent(&sys, &x);
    let conv = scan_conv(&sys, &x);
    let chunked = scan_chunked(&sys, &x, 10);
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    println!("recurrent vs convolution: {:.2e}", diff(&rec, &conv));
    println!("recurrent vs chunked:     {:.2e}", diff(&rec, &chunked));
    println!("y[..8] = {:.4?}", &rec[..8]);
    Ok(())
}
