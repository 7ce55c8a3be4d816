//! Command-line surface. Every command writes only below `--out`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formation::FormationModel;
use crate::gbl::estimate_background_light_detailed;
use crate::image_tensor::ImageTensor;
use crate::io::{load_image, resize_bilinear, save_image, write_file, DatasetManifest, Overrides, RunConfig};
use crate::metrics::{cumulative_histogram, evaluate_dataset, EvalInput};
use crate::nets::ModelWeights;
use crate::selftest;
use crate::trainer::{decompose, load_checkpoint, save_checkpoint, train, AdamState, Decomposition};

#[derive(Debug, Parser)]
#[command(name = "uie", version, about = "Underwater image enhancement toolkit")]
pub struct Cli {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Square working resolution (default 256).
    #[arg(long, global = true)]
    pub size: Option<usize>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance images with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Write the five estimated components of each image.
    Decompose(DecomposeArgs),
    /// Score images listed in a manifest.
    Evaluate(EvaluateArgs),
    /// Train from a paired manifest.
    Train(TrainArgs),
    /// Print the estimated background light of an image.
    Gbl(GblArgs),
    /// Cumulative RGB histogram of a set of images as CSV.
    Histogram(HistogramArgs),
    /// Run the built-in property suites.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write J, T_D, T_B, A and the reconstruction.
    #[arg(long)]
    pub dump_components: bool,
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSON-lines manifest; `raw_path` is the image to score and
    /// `label_path` its reference.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Skip reference metrics even when labels are present.
    #[arg(long)]
    pub no_reference: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub formation: Option<FormationModel>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GblArgs {
    pub input: PathBuf,
    /// Also write a flat image filled with the estimated light.
    #[arg(long)]
    pub image: bool,
}

#[derive(Debug, Args)]
pub struct HistogramArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Suites to run (1-6); all when omitted.
    #[arg(long = "suite")]
    pub suites: Vec<usize>,
}

/// Suffixes of the component files, in dump order.
pub const COMPONENT_SUFFIXES: [&str; 5] = [
    "scene_radiance",
    "direct_transmission",
    "backscatter_transmission",
    "background_light",
    "reconstructed",
];

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let mut over = Overrides {
        seed: cli.seed,
        size: cli.size,
        out: cli.out.clone(),
        ..Default::default()
    };
    match &cli.command {
        Command::Enhance(a) => over.checkpoint = a.checkpoint.clone(),
        Command::Decompose(a) => over.checkpoint = a.checkpoint.clone(),
        Command::Evaluate(a) => over.manifest = a.manifest.clone(),
        Command::Train(a) => {
            over.manifest = a.manifest.clone();
            over.steps = a.steps;
            over.lr = a.lr;
            over.formation = a.formation;
        }
        _ => {}
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &over)?;
    match cli.command {
        Command::Enhance(a) => enhance(&cfg, &a.inputs, a.dump_components),
        Command::Decompose(a) => decompose_cmd(&cfg, &a.inputs),
        Command::Evaluate(a) => evaluate(&cfg, a.no_reference),
        Command::Train(a) => train_cmd(&cfg, a.resume.as_deref()),
        Command::Gbl(a) => gbl(&cfg, &a.input, a.image),
        Command::Histogram(a) => histogram(&cfg, &a.inputs),
        Command::Selftest(a) => Ok(selftest_cmd(&a.suites)),
    }
}

fn stem_and_ext(path: &Path) -> (String, String) {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let ext = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(e) if e == "png" => "png",
        _ => "ppm",
    };
    (stem, ext.to_string())
}

fn require_checkpoint(cfg: &RunConfig) -> Result<&Path> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("a checkpoint is required (--checkpoint or `checkpoint` in the config)".into()))
}

/// Components of `path` at its original resolution.
fn decompose_file(weights: &ModelWeights, cfg: &crate::nets::ModelConfig, path: &Path) -> Result<Decomposition> {
    let raw = load_image(path)?;
    let small = resize_bilinear(&raw, cfg.height, cfg.width)?;
    let d = decompose(weights, cfg, &small)?;
    let back = |img: &ImageTensor| resize_bilinear(img, raw.height(), raw.width());
    Ok(Decomposition {
        j: back(&d.j)?,
        t_d: back(&d.t_d)?,
        t_b: back(&d.t_b)?,
        a: d.a,
        reconstruction: back(&d.reconstruction)?,
        reconstruction_clamped: d.reconstruction_clamped,
    })
}

fn write_components(out: &Path, stem: &str, ext: &str, d: &Decomposition) -> Result<Vec<PathBuf>> {
    let light = ImageTensor::uniform(d.j.height(), d.j.width(), d.a)?;
    let images = [&d.j, &d.t_d, &d.t_b, &light, &d.reconstruction];
    let mut written = Vec::new();
    for (suffix, img) in COMPONENT_SUFFIXES.iter().zip(images) {
        let path = out.join(format!("{stem}_{suffix}.{ext}"));
        save_image(img, &path)?;
        written.push(path);
    }
    Ok(written)
}

fn for_each_input(cfg: &RunConfig, inputs: &[PathBuf], f: impl Fn(&ModelWeights, &crate::nets::ModelConfig, &Path) -> Result<()> + Sync) -> Result<ExitCode> {
    let ck = load_checkpoint(require_checkpoint(cfg)?)?;
    let model = ck.config.model.clone();
    let results: Vec<Result<()>> = inputs.par_iter().map(|p| f(&ck.weights, &model, p)).collect();
    let mut failed = false;
    for (p, r) in inputs.iter().zip(results) {
        if let Err(e) = r {
            eprintln!("{}: {e}", p.display());
            failed = true;
        }
    }
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

pub fn enhance(cfg: &RunConfig, inputs: &[PathBuf], dump: bool) -> Result<ExitCode> {
    for_each_input(cfg, inputs, |w, model, path| {
        let d = decompose_file(w, model, path)?;
        let (stem, ext) = stem_and_ext(path);
        save_image(&d.j, &cfg.out.join(format!("{stem}.{ext}")))?;
        if dump {
            write_components(&cfg.out, &stem, &ext, &d)?;
        }
        Ok(())
    })
}

pub fn decompose_cmd(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<ExitCode> {
    for_each_input(cfg, inputs, |w, model, path| {
        let d = decompose_file(w, model, path)?;
        let (stem, ext) = stem_and_ext(path);
        write_components(&cfg.out, &stem, &ext, &d)?;
        Ok(())
    })
}

pub fn evaluate(cfg: &RunConfig, no_reference: bool) -> Result<ExitCode> {
    let path = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("evaluate needs a manifest".into()))?;
    let manifest = DatasetManifest::load(path)?;
    let inputs: Vec<EvalInput> = manifest
        .entries
        .iter()
        .map(|e| EvalInput {
            id: e.id.clone(),
            image: e.raw_path.clone(),
            reference: e.label_path.clone(),
        })
        .collect();
    let report = evaluate_dataset(&inputs, manifest.is_paired() && !no_reference)?;
    let text = report.to_json_lines();
    write_file(&cfg.out.join("metrics.jsonl"), text.as_bytes())?;
    print!("{text}");
    for f in &report.failures {
        eprintln!("{}: {}", f.id, f.error);
    }
    Ok(if report.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

pub fn train_cmd(cfg: &RunConfig, resume: Option<&Path>) -> Result<ExitCode> {
    let path = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("train needs a manifest".into()))?;
    let manifest = DatasetManifest::load(path)?;
    if !manifest.is_paired() || manifest.entries.is_empty() {
        return Err(Error::Manifest("training needs a non-empty paired manifest".into()));
    }
    let tc = cfg.train_config();
    let pairs = manifest
        .entries
        .iter()
        .map(|e| {
            let raw = resize_bilinear(&load_image(&e.raw_path)?, cfg.size, cfg.size)?;
            let label = load_image(e.label_path.as_ref().expect("paired"))?;
            Ok((raw, resize_bilinear(&label, cfg.size, cfg.size)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut weights, mut state) = match resume {
        Some(p) => {
            let ck = crate::trainer::load_checkpoint_for(p, &tc.model)?;
            (ck.weights, ck.state)
        }
        None => {
            let w = ModelWeights::init(&tc.model, tc.seed)?;
            let s = AdamState::new(&w);
            (w, s)
        }
    };
    let mut log = String::new();
    train(&pairs, &mut weights, &mut state, &tc, |rec| {
        let line = rec.to_json();
        log::info!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    write_file(&cfg.out.join("train_log.jsonl"), log.as_bytes())?;
    let ck = cfg.out.join("checkpoint.muie");
    save_checkpoint(&weights, &state, &tc, &ck)?;
    println!("wrote {}", ck.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gbl(cfg: &RunConfig, input: &Path, image: bool) -> Result<ExitCode> {
    let img = load_image(input)?;
    let est = estimate_background_light_detailed(&img)?;
    let [r, g, b] = est.clamped;
    println!("{r:.4} {g:.4} {b:.4}");
    if image {
        let (stem, ext) = stem_and_ext(input);
        let flat = ImageTensor::uniform(img.height(), img.width(), est.unit())?;
        save_image(&flat, &cfg.out.join(format!("{stem}_background_light.{ext}")))?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn histogram(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<ExitCode> {
    let images = inputs.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
    let h = cumulative_histogram(&images)?;
    write_file(&cfg.out.join("histogram.csv"), h.to_csv().as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

pub fn selftest_cmd(suites: &[usize]) -> ExitCode {
    let results = if suites.is_empty() {
        selftest::run_all()
    } else {
        selftest::run(suites)
    };
    let mut ok = true;
    for r in &results {
        ok &= r.passed;
        println!(
            "{} [suite {}] {}: {} ({:.2}s)",
            if r.passed { "PASS" } else { "FAIL" },
            r.suite,
            r.name,
            r.detail,
            r.seconds
        );
    }
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} checks passed", results.len());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
