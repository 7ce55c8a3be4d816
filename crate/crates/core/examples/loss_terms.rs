//! Every term of the training objective for a prediction and its label.

use uie::losses::{total_loss, LossWeights};
use uie::ImageTensor;

fn main() -> uie::Result<()> {
    let label = ImageTensor::from_fn(32, 32, |c, y, x| ((x + y + 10 * c) % 32) as f64 / 32.0)?;
    let j = ImageTensor::from_fn(32, 32, |c, y, x| 0.9 * label.get(c, y, x) + 0.05)?;
    let input = ImageTensor::from_fn(32, 32, |c, y, x| 0.6 * label.get(c, y, x) + 0.2)?;
    let recon = ImageTensor::from_fn(32, 32, |c, y, x| 0.62 * label.get(c, y, x) + 0.19)?;
    for w in [
        LossWeights::default(),
        LossWeights { enable_reconstruction: false, ..Default::default() },
        LossWeights { enable_uiqm: false, ..Default::default() },
    ] {
        let b = total_loss(&j, &label, &input, &recon, &w)?;
        println!("{}", serde_json::to_string(&b).expect("serialize"));
        assert_eq!(b.total, b.weighted_sum(w.lambda_edge));
    }
    Ok(())
}
