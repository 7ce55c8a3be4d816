//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uie::autodiff::Graph;
use uie::formation::{
    reconstruct_jaffe, reconstruct_koschmieder, reconstruct_revised, synthesize_degraded, ComponentSet, PSF_SIZE,
};
use uie::gbl::{estimate_background_light_detailed, estimate_gb, estimate_r, ChannelStats, LIGHT_MAX, LIGHT_MIN};
use uie::io::{load_image, save_image};
use uie::losses::{total_loss, total_loss_var, LossWeights};
use uie::metrics::{mse_psnr, ssim_index, uciqe, uiqm, uiqm_parts};
use uie::selftest::{suite_grad, uiqm_fixture, UIQM_FIXTURES, UIQM_REFERENCE};
use uie::ssm::{discretize_zoh, scan_conv, scan_recurrent, SsmParams, StateMatrix};
use uie::trainer::{
    compute_gradients, decode_checkpoint, encode_checkpoint, overfit_single, round_to_stored, train, AdamState,
    TrainConfig,
};
use uie::formation::FormationModel;
use uie::nets::ModelWeights;
use uie::{ImageTensor, Tensor};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn within_time(start: Instant, budget: Duration, detail: String) -> Outcome {
    let t = start.elapsed();
    ensure(t <= budget, format!("{detail}, {:.1}s (budget {}s)", t.as_secs_f64(), budget.as_secs()))
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
}

// 1. Recurrent and convolutional forms against each other and against a
// direct double sum over modes.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let len = rng.random_range(1..=64);
        let a: Vec<f64> = (0..n).map(|_| -rng.random_range(0.05..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = rng.random_range(-1.0..1.0);
        let delta = rng.random_range(0.01..0.5);
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sys = SsmParams::new(StateMatrix::Diagonal(a.clone()), b.clone(), c.clone(), d, delta)
            .and_then(|p| p.discretize())
            .map_err(err)?;
        let rec = scan_recurrent(&sys, &x);
        let conv = scan_conv(&sys, &x);
        let oracle: Vec<f64> = (0..len)
            .map(|k| {
                let mut y = d * x[k];
                for i in 0..n {
                    let ab = (delta * a[i]).exp();
                    let bb = (ab - 1.0) / a[i] * b[i];
                    for j in 0..=k {
                        y += c[i] * ab.powi(j as i32) * bb * x[k - j];
                    }
                }
                y
            })
            .collect();
        for k in 0..len {
            worst = worst.max((rec[k] - conv[k]).abs()).max((rec[k] - oracle[k]).abs());
        }
    }
    ensure(worst <= 1e-8, format!("max |recurrent - conv| {worst:.3e} over 200 draws"))
        .and_then(|d| within_time(start, Duration::from_secs(5), d))
}

fn criterion_2() -> Outcome {
    let b = 0.7;
    let z = discretize_zoh(&StateMatrix::Diagonal(vec![-1.0]), &[b], std::f64::consts::LN_2).map_err(err)?;
    let StateMatrix::Diagonal(a_bar) = &z.a_bar else {
        return Err("diagonal input gave a dense A_bar".into());
    };
    let e1 = (a_bar[0] - 0.5).abs().max((z.b_bar[0] - 0.5 * b).abs());
    let delta = 0.3;
    let mut e2 = 0.0f64;
    for a in [-1e-7, -1e-10, 0.0] {
        let z = discretize_zoh(&StateMatrix::Diagonal(vec![a]), &[b], delta).map_err(err)?;
        e2 = e2.max((z.b_bar[0] - delta * b).abs());
    }
    let dense = discretize_zoh(&StateMatrix::Dense(nalgebra::DMatrix::zeros(2, 2)), &[b, -b], delta).map_err(err)?;
    e2 = e2.max((dense.b_bar[0] - delta * b).abs());
    ensure(
        e1 <= 1e-12 && e2 <= 1e-6,
        format!("A=-1, delta=ln 2 error {e1:.2e}; A->0 limit error {e2:.2e}"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(2..12), rng.random_range(2..12));
        let j = random_image(&mut rng, h, w);
        let depth: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..5.0)).collect();
        let mut coef = || [0; 3].map(|_| rng.random_range(0.05..2.0));
        let (bd, bb) = (coef(), coef());
        let a = [0; 3].map(|_| rng.random_range(0.0..1.0));
        let s = synthesize_degraded(&j, &depth, bd, bb, a).map_err(err)?;
        let r = reconstruct_revised(&s.components).map_err(err)?;
        for c in 0..3 {
            for p in 0..h * w {
                let i = c * h * w + p;
                let (td, tb) = ((-bd[c] * depth[p]).exp(), (-bb[c] * depth[p]).exp());
                let oracle = j.data()[i] * td + (1.0 - tb) * a[c];
                worst = worst.max((r.raw.data()[i] - s.raw.data()[i]).abs()).max((oracle - s.raw.data()[i]).abs());
            }
        }
    }
    let j = random_image(&mut rng, 8, 8);
    let t = random_image(&mut rng, 8, 8);
    let a = [0.2, 0.5, 0.7];
    let kosch = reconstruct_koschmieder(&j, &t, a).map_err(err)?;
    let revised = reconstruct_revised(&ComponentSet { j: j.clone(), t_d: t.clone(), t_b: t.clone(), a }).map_err(err)?;
    let jaffe = reconstruct_jaffe(&j, &t, a, &Tensor::zeros(&[PSF_SIZE, PSF_SIZE])).map_err(err)?;
    let same_kr = kosch.raw.data() == revised.raw.data();
    let same_jk = jaffe.raw.data() == kosch.raw.data();
    ensure(
        worst <= 1e-12 && same_kr && same_jk,
        format!("round trip {worst:.2e}; Koschmieder == revised: {same_kr}; Jaffe(0 PSF) == Koschmieder: {same_jk}"),
    )
}

// The total-loss reference uses forward evaluations only, so it shares no
// code with the reverse pass.
fn criterion_4() -> Outcome {
    let start = Instant::now();
    let results = suite_grad(4);
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| format!("{}: {}", r.name, r.detail)).collect();
    if !failed.is_empty() {
        return Err(failed.join("; "));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 16;
    let (j, label, input, recon) = (
        random_image(&mut rng, n, n),
        random_image(&mut rng, n, n),
        random_image(&mut rng, n, n),
        random_image(&mut rng, n, n),
    );
    let mut worst = 0.0f64;
    for enable_uiqm in [false, true] {
        let w = LossWeights { enable_uiqm, ..Default::default() };
        let mut g = Graph::new();
        let jv = g.param(j.tensor().clone()).map_err(err)?;
        let lv = g.constant(label.tensor().clone()).map_err(err)?;
        let iv = g.constant(input.tensor().clone()).map_err(err)?;
        let rv = g.constant(recon.tensor().clone()).map_err(err)?;
        let loss = total_loss_var(&mut g, jv, lv, Some((iv, rv)), &w).map_err(err)?;
        let grads = g.backward(loss.total).map_err(err)?;
        let analytic = grads.get(jv).ok_or("no gradient for J")?.clone();
        let tol = if enable_uiqm { 1e-3 } else { 1e-4 };
        let eps = 1e-5;
        for _ in 0..24 {
            let k = rng.random_range(0..j.data().len());
            let eval = |dx: f64| -> Result<f64, String> {
                let mut d = j.data().to_vec();
                d[k] += dx;
                let jj = ImageTensor::new(n, n, d).map_err(err)?;
                Ok(total_loss(&jj, &label, &input, &recon, &w).map_err(err)?.total)
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > tol {
                return Err(format!("total loss (uiqm {enable_uiqm}) coordinate {k}: rel error {rel:.2e}"));
            }
            worst = worst.max(rel);
        }
    }
    let detail = format!("{} op and network checks passed; total loss rel error {worst:.2e}", results.len());
    within_time(start, Duration::from_secs(60), detail)
}

fn criterion_5() -> Outcome {
    let gb = estimate_gb(&ChannelStats { avg: 100.0, std: 50.0, median: 0.0 });
    let r = estimate_r(&ChannelStats { avg: 0.0, std: 0.0, median: 0.0 });
    let e_gb = (gb - 142.9).abs();
    let e_r = (r - 140.0 / 15.4).abs();
    let black = estimate_background_light_detailed(&ImageTensor::uniform(16, 16, [0.0; 3]).unwrap()).map_err(err)?;
    let white = estimate_background_light_detailed(&ImageTensor::uniform(16, 16, [1.0; 3]).unwrap()).map_err(err)?;
    let bounded = black.clamped.iter().chain(&white.clamped).all(|v| (LIGHT_MIN..=LIGHT_MAX).contains(v));
    let hit = black.clamped[1] == LIGHT_MIN && black.clamped[2] == LIGHT_MIN && white.clamped[1] == LIGHT_MAX;
    let below = black.raw[1] < LIGHT_MIN && white.raw[1] > LIGHT_MAX;
    ensure(
        e_gb <= 1e-9 && e_r <= 1e-9 && bounded && hit && below,
        format!(
            "gb(100, 50) error {e_gb:.1e}; r(0) error {e_r:.1e}; black {:?}, white {:?}",
            black.clamped, white.clamped
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_image(&mut rng, 24, 24);
    let s = ssim_index(&x, &x).map_err(err)?;
    let base = ImageTensor::from_fn(24, 24, |_, _, _| rng.random_range(0.0..0.9)).unwrap();
    let shifted = ImageTensor::new(24, 24, base.data().iter().map(|v| v + 0.1).collect()).map_err(err)?;
    let (_, psnr) = mse_psnr(&base, &shifted).map_err(err)?;
    let gray = ImageTensor::uniform(32, 32, [0.5; 3]).unwrap();
    let (ug, cg) = (uiqm(&gray).map_err(err)?, uciqe(&gray));
    let mut worst = 0.0f64;
    for (name, reference) in UIQM_FIXTURES.iter().zip(UIQM_REFERENCE) {
        let img = uiqm_fixture(name).ok_or("missing fixture")?;
        let p = uiqm_parts(&img, 8).map_err(err)?;
        for (got, want) in [p.uicm, p.uism, p.uiconm, p.uiqm].iter().zip(reference) {
            worst = worst.max((got - want).abs());
        }
    }
    ensure(
        (s - 1.0).abs() <= 1e-12 && (psnr - 20.0).abs() <= 1e-6 && ug.abs() <= 1e-12 && cg.abs() <= 1e-12 && worst <= 1e-6,
        format!("ssim(x,x) {s}; psnr {psnr:.9} dB; gray uiqm {ug:.1e} uciqe {cg:.1e}; reference mismatch {worst:.2e}"),
    )
}

fn overfit_pair() -> (ImageTensor, ImageTensor) {
    let n = 32;
    let label = ImageTensor::from_fn(n, n, |c, y, x| {
        let t = (x + y) as f64 / (2 * n) as f64;
        [0.2 + 0.6 * t, 0.5 + 0.3 * (y as f64 / n as f64), 0.7 - 0.4 * t][c]
    })
    .unwrap();
    let depth: Vec<f64> = (0..n * n).map(|i| 0.5 + (i % n) as f64 / n as f64).collect();
    let raw = synthesize_degraded(&label, &depth, [0.9, 0.3, 0.2], [0.8, 0.4, 0.3], [0.1, 0.5, 0.6])
        .unwrap()
        .image;
    (raw, label)
}

fn overfit_config() -> TrainConfig {
    let mut cfg = TrainConfig::toy(32);
    cfg.optim.lr = 1e-3;
    cfg.steps = 500;
    cfg
}

fn criterion_7(first: &mut Option<Vec<u8>>) -> Outcome {
    let start = Instant::now();
    let (raw, label) = overfit_pair();
    let cfg = overfit_config();
    let r = overfit_single(&raw, &label, &cfg).map_err(err)?;
    *first = Some(encode_checkpoint(&r.weights, &r.state, &cfg).map_err(err)?);
    let ratio = r.final_l2 / r.initial_l2;
    let gain = r.final_psnr - r.initial_psnr;
    let detail = format!(
        "l2 {:.5} -> {:.5} ({:.1}% of initial, need <= 10%); psnr {:.2} -> {:.2} dB ({gain:+.2}, need >= +6)",
        r.initial_l2,
        r.final_l2,
        100.0 * ratio,
        r.initial_psnr,
        r.final_psnr
    );
    ensure(ratio <= 0.1 && gain >= 6.0, detail).and_then(|d| within_time(start, Duration::from_secs(300), d))
}

fn criterion_8() -> Outcome {
    let (raw, label) = overfit_pair();
    let pair = [(raw.clone(), label.clone())];
    let mut lines = Vec::new();
    let runs = [
        (FormationModel::Revised, true),
        (FormationModel::Koschmieder, true),
        (FormationModel::Retinex, true),
        (FormationModel::JaffeMcGlamery, true),
        (FormationModel::Revised, false),
    ];
    for (formation, recon) in runs {
        let mut cfg = TrainConfig::toy(32);
        cfg.model.formation = formation;
        cfg.loss.enable_reconstruction = recon;
        cfg.steps = 5;
        let mut weights = ModelWeights::init(&cfg.model, 8).map_err(err)?;
        let mut state = AdamState::new(&weights);
        let curve = train(&pair, &mut weights, &mut state, &cfg, |_| {}).map_err(err)?;
        if curve.len() != cfg.steps || !curve.iter().all(|b| b.is_finite()) {
            return Err(format!("{formation} (reconstruction {recon}): non-finite or missing losses"));
        }
        let g = compute_gradients(&raw, &label, &weights, &cfg, 0).map_err(err)?;
        if !recon {
            let zero = g.grads.iter().filter(|(n, _)| n.starts_with("tdnet.") || n.starts_with("tbnet.")).all(|(_, t)| {
                t.data().iter().all(|v| *v == 0.0)
            });
            if !zero {
                return Err(format!("reconstruction off but T-Net gradients nonzero: {:?}", g.group_norms));
            }
            lines.push(format!("recon off: tdnet/tbnet grad norm {:?}/{:?}", g.group_norms.get("tdnet"), g.group_norms.get("tbnet")));
        } else {
            lines.push(format!("{formation} final total {:.4}", curve.last().unwrap().total));
        }
    }
    Ok(lines.join("; "))
}

fn criterion_9(first: Option<Vec<u8>>) -> Outcome {
    let (raw, label) = overfit_pair();
    let cfg = overfit_config();
    let first = match first {
        Some(b) => b,
        None => {
            let r = overfit_single(&raw, &label, &cfg).map_err(err)?;
            encode_checkpoint(&r.weights, &r.state, &cfg).map_err(err)?
        }
    };
    let r = overfit_single(&raw, &label, &cfg).map_err(err)?;
    let second = encode_checkpoint(&r.weights, &r.state, &cfg).map_err(err)?;
    let identical = first == second;
    let ck = decode_checkpoint(&second).map_err(err)?;
    let exact = ck.weights == round_to_stored(&r.weights) && ck.config == cfg && ck.state.step == r.state.step;
    let reencoded = encode_checkpoint(&ck.weights, &ck.state, &ck.config).map_err(err)? == second;
    ensure(
        identical && exact && reencoded,
        format!(
            "two runs bitwise identical: {identical} ({} bytes); load exact at f32: {exact}; re-encode identical: {reencoded}",
            second.len()
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_uie")).args(args).output().map_err(err)
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

/// Raw 8-bit RGB samples, read without the library's decoders. Our PPM
/// writer emits no comments, so the header is four whitespace tokens.
fn rgb_bytes(path: &Path) -> Result<Vec<u8>, String> {
    if path.extension().is_some_and(|e| e == "png") {
        return Ok(image::open(path).map_err(err)?.to_rgb8().into_raw());
    }
    let bytes = fs::read(path).map_err(err)?;
    let mut pos = 0;
    for _ in 0..4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
    }
    Ok(bytes[pos + 1..].to_vec())
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    let s = |p: &Path| p.to_string_lossy().into_owned();

    let st = run_cli(&["selftest"])?;
    let stdout = String::from_utf8_lossy(&st.stdout);
    let suites: std::collections::BTreeSet<&str> =
        stdout.lines().filter_map(|l| l.split("[suite ").nth(1)).map(|r| &r[..1]).collect();
    if !st.status.success() || suites.len() != 6 {
        return Err(format!("selftest status {:?}, suites seen {suites:?}", st.status.code()));
    }

    let (raw, label) = overfit_pair();
    let data = root.join("data");
    save_image(&raw, &data.join("raw.ppm")).map_err(err)?;
    save_image(&label, &data.join("label.ppm")).map_err(err)?;
    let other = ImageTensor::from_fn(20, 28, |c, y, x| ((c * 37 + y * 11 + x * 5) % 256) as f64 / 255.0).unwrap();
    save_image(&other, &data.join("other.png")).map_err(err)?;
    fs::write(
        data.join("manifest.jsonl"),
        "{\"id\": \"a\", \"raw_path\": \"raw.ppm\", \"label_path\": \"label.ppm\"}\n",
    )
    .map_err(err)?;

    let train_out = root.join("train");
    let t = run_cli(&[
        "train",
        "--manifest",
        &s(&data.join("manifest.jsonl")),
        "--steps",
        "2",
        "--size",
        "32",
        "--out",
        &s(&train_out),
    ])?;
    if !t.status.success() {
        return Err(format!("train failed: {}", String::from_utf8_lossy(&t.stderr)));
    }
    let ck = train_out.join("checkpoint.muie");

    let dec_out = root.join("decompose");
    let d = run_cli(&["decompose", "--checkpoint", &s(&ck), "--out", &s(&dec_out), &s(&data.join("other.png"))])?;
    let written = files_in(&dec_out);
    if !d.status.success() || written.len() != 5 {
        return Err(format!("decompose wrote {written:?}: {}", String::from_utf8_lossy(&d.stderr)));
    }
    for f in &written {
        let img = load_image(&dec_out.join(f)).map_err(err)?;
        if (img.height(), img.width()) != (20, 28) {
            return Err(format!("{f} is {}x{}", img.height(), img.width()));
        }
    }

    let hist_out = root.join("hist");
    let inputs = [data.join("raw.ppm"), data.join("other.png")];
    let mut args = vec!["histogram".to_string(), "--out".into(), s(&hist_out)];
    args.extend(inputs.iter().map(|p| s(p)));
    let h = run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
    if !h.status.success() {
        return Err(format!("histogram failed: {}", String::from_utf8_lossy(&h.stderr)));
    }
    let csv = fs::read_to_string(hist_out.join("histogram.csv")).map_err(err)?;
    let mut totals = [0u64; 3];
    let mut bins = [[0u64; 256]; 3];
    for line in csv.lines().skip(1) {
        let f: Vec<u64> = line.split(',').map(|v| v.trim().parse().unwrap_or(u64::MAX)).collect();
        for c in 0..3 {
            totals[c] += f[c + 1];
            bins[c][f[0] as usize] = f[c + 1];
        }
    }
    let mut oracle = [[0u64; 256]; 3];
    let mut pixels = 0u64;
    for p in &inputs {
        let rgb = rgb_bytes(p)?;
        pixels += (rgb.len() / 3) as u64;
        for px in rgb.chunks(3) {
            for c in 0..3 {
                oracle[c][px[c] as usize] += 1;
            }
        }
    }
    ensure(
        totals == [pixels; 3] && bins == oracle,
        format!("selftest 6 suites ok; decompose wrote {written:?}; histogram totals {totals:?} for {pixels} pixels"),
    )
}

fn main() {
    let mut first = None;
    let mut results: Vec<(usize, Outcome, f64)> = Vec::new();
    let mut timed = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let out = f();
        results.push((n, out, start.elapsed().as_secs_f64()));
    };
    timed(1, &mut criterion_1);
    timed(2, &mut criterion_2);
    timed(3, &mut criterion_3);
    timed(4, &mut criterion_4);
    timed(5, &mut criterion_5);
    timed(6, &mut criterion_6);
    timed(7, &mut || criterion_7(&mut first));
    timed(8, &mut criterion_8);
    timed(9, &mut || criterion_9(first.take()));
    timed(10, &mut criterion_10);

    let mut failed = 0;
    for (n, out, secs) in &results {
        match out {
            Ok(d) => println!("criterion {n:2}: PASS ({secs:.1}s) {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:2}: FAIL ({secs:.1}s) {d}");
            }
        }
    }
    println!("{}/{} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
