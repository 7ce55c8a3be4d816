//! Trains a few steps, saves a checkpoint, reloads it and resumes.

use uie::formation::FormationModel;
use uie::nets::ModelWeights;
use uie::trainer::{load_checkpoint_for, save_checkpoint, train, AdamState, TrainConfig};
use uie::ImageTensor;

fn main() -> uie::Result<()> {
    let mut cfg = TrainConfig::toy(16);
    cfg.model.formation = FormationModel::Koschmieder;
    cfg.steps = 3;
    let label = ImageTensor::from_fn(16, 16, |c, y, x| ((x * 5 + y * 3 + c * 40) % 64) as f64 / 64.0)?;
    let raw = ImageTensor::from_fn(16, 16, |c, y, x| 0.5 * label.get(c, y, x) + [0.05, 0.3, 0.35][c])?;
    let pairs = [(raw, label)];

    let mut weights = ModelWeights::init(&cfg.model, cfg.seed)?;
    let mut state = AdamState::new(&weights);
    train(&pairs, &mut weights, &mut state, &cfg, |s| println!("{}", s.to_json()))?;

    let dir = std::env::temp_dir().join("uie_checkpoint_example");
    let path = dir.join("toy.muie");
    save_checkpoint(&weights, &state, &cfg, &path)?;
    println!("saved {} ({} bytes)", path.display(), std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));

    let mut ck = load_checkpoint_for(&path, &cfg.model)?;
    println!("resuming at step {}", ck.state.step);
    train(&pairs, &mut ck.weights, &mut ck.state, &cfg, |s| println!("{}", s.to_json()))?;
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
