//! Writes a small paired dataset, then scores it from its JSON-lines
//! manifest the same way `uie evaluate` does.

use uie::io::{save_image, write_file, DatasetManifest};
use uie::metrics::{evaluate_dataset, EvalInput};
use uie::ImageTensor;

fn main() -> uie::Result<()> {
    let dir = std::env::temp_dir().join("uie_manifest_example");
    let mut lines = String::new();
    for k in 0..3 {
        let label = ImageTensor::from_fn(24, 24, |c, y, x| ((x * (k + 2) + y * 3 + c * 30) % 100) as f64 / 100.0)?;
        let raw = ImageTensor::from_fn(24, 24, |c, y, x| 0.7 * label.get(c, y, x) + 0.1 * k as f64)?;
        save_image(&raw, &dir.join(format!("raw{k}.png")))?;
        save_image(&label, &dir.join(format!("label{k}.png")))?;
        lines.push_str(&format!("{{\"id\": \"img{k}\", \"raw_path\": \"raw{k}.png\", \"label_path\": \"label{k}.png\"}}\n"));
    }
    write_file(&dir.join("pairs.jsonl"), lines.as_bytes())?;

    let manifest = DatasetManifest::load(&dir.join("pairs.jsonl"))?;
    let inputs: Vec<EvalInput> = manifest
        .entries
        .iter()
        .map(|e| EvalInput { id: e.id.clone(), image: e.raw_path.clone(), reference: e.label_path.clone() })
        .collect();
    let report = evaluate_dataset(&inputs, manifest.is_paired())?;
    print!("{}", report.to_json_lines());
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
