//! Training loop, Adam, inference helpers and checkpoints.
//!
//! One step runs J-Net on the raw image, the transmission networks, the
//! closed-form background light (a constant, never differentiated), rebuilds
//! the input through the selected formation model and applies the total
//! loss. The transmission networks only receive gradient through the
//! reconstruction terms.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::formation::{light_var, reconstruct_on_graph, ComponentVars, FormationModel};
use crate::gbl::estimate_background_light;
use crate::image_tensor::{expect_same_size, ImageTensor};
use crate::losses::{total_loss_var, LossBreakdown, LossWeights};
use crate::metrics::mse_psnr;
use crate::nets::{jnet_forward, tnet_forward, Binding, ModelConfig, ModelWeights};
use crate::tensor::Tensor;

/// Learning rate used for the full-scale training runs in the literature;
/// too small to move a freshly initialized toy model.
pub const FULL_SCALE_LR: f64 = 2e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: AdamConfig::default(),
            batch_size: 1,
            steps: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Small square model for quick runs.
    pub fn toy(size: usize) -> Self {
        TrainConfig {
            model: ModelConfig::toy(size),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", o.lr)));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(weights: &ModelWeights) -> Self {
        let zeros: BTreeMap<String, Tensor> = weights
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(
    weights: &mut ModelWeights,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, w) in weights.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{name}`")))?;
        let (m, v) = match (state.m.get_mut(name), state.v.get_mut(name)) {
            (Some(m), Some(v)) => (m, v),
            _ => return Err(Error::InvalidArgument(format!("no optimizer state for `{name}`"))),
        };
        if g.shape() != w.shape() || m.shape() != w.shape() || v.shape() != w.shape() {
            return Err(Error::shape("adam_step", format!("`{name}` {:?} vs gradient {:?}", w.shape(), g.shape())));
        }
        let (w, m, v) = (w.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..w.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            w[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Component estimates for one image as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub j: Var,
    /// Direct transmission, unified transmission or illumination, depending
    /// on the formation model.
    pub t_d: Option<Var>,
    pub t_b: Option<Var>,
    pub a: [f64; 3],
    /// Reconstruction before clamping.
    pub recon_raw: Option<Var>,
    /// Reconstruction clamped to `[0, 1]`.
    pub recon: Option<Var>,
}

/// Runs the networks on `raw`. The transmission networks and the
/// reconstruction are skipped when `with_reconstruction` is false.
pub fn forward(
    g: &mut Graph,
    b: &Binding,
    cfg: &ModelConfig,
    raw: Var,
    a: [f64; 3],
    with_reconstruction: bool,
) -> Result<ForwardVars> {
    let j = jnet_forward(g, b, cfg, raw)?;
    if !with_reconstruction {
        return Ok(ForwardVars { j, t_d: None, t_b: None, a, recon_raw: None, recon: None });
    }
    let t_d = tnet_forward(g, b, "tdnet", raw)?;
    let t_b = match cfg.formation.uses_backscatter() {
        true => Some(tnet_forward(g, b, "tbnet", raw)?),
        false => None,
    };
    let (_, h, w) = g.value(raw).dims3()?;
    let light = match cfg.formation.uses_background_light() {
        true => Some(light_var(g, a, h, w)?),
        false => None,
    };
    let psf = match cfg.formation.uses_psf() {
        true => Some(b.var("psf.g")?),
        false => None,
    };
    let vars = ComponentVars { j, t_d, t_b, a: light, psf };
    let recon_raw = reconstruct_on_graph(g, cfg.formation, &vars)?;
    let recon = g.clamp(recon_raw, 0.0, 1.0);
    Ok(ForwardVars {
        j,
        t_d: Some(t_d),
        t_b,
        a,
        recon_raw: Some(recon_raw),
        recon: Some(recon),
    })
}

/// Loss, gradients and per-network gradient norms for one pair.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub breakdown: LossBreakdown,
    pub grads: BTreeMap<String, Tensor>,
    /// L2 norm of the gradient of every weight group (`jnet`, `tdnet`, ...).
    pub group_norms: BTreeMap<String, f64>,
    pub reconstruction_clamped: bool,
}

fn stats(t: &Tensor) -> String {
    let d = t.data();
    let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let finite = d.iter().filter(|v| v.is_finite()).count();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    format!("min {lo:.4e} max {hi:.4e} mean {mean:.4e} finite {finite}/{}", d.len())
}

fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

pub fn compute_gradients(
    raw: &ImageTensor,
    label: &ImageTensor,
    weights: &ModelWeights,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepGradients> {
    expect_same_size("train_step", raw, label)?;
    let a = estimate_background_light(raw)?;
    let mut g = Graph::new();
    let b = Binding::new(&mut g, weights, true)?;
    let x = g.constant(raw.tensor().clone())?;
    let y = g.constant(label.tensor().clone())?;
    let fw = forward(&mut g, &b, &cfg.model, x, a, cfg.loss.enable_reconstruction)?;
    let recon = fw.recon.map(|r| (x, r));
    let loss = total_loss_var(&mut g, fw.j, y, recon, &cfg.loss)?;
    let breakdown = loss.breakdown(&g);
    if !breakdown.is_finite() {
        let mut diag = format!("loss {breakdown:?}; A {a:?}; J {}", stats(g.value(fw.j)));
        for (label, v) in [("T_D", fw.t_d), ("T_B", fw.t_b), ("I'", fw.recon_raw)] {
            if let Some(v) = v {
                diag.push_str(&format!("; {label} {}", stats(g.value(v))));
            }
        }
        return Err(Error::NonFiniteLoss { step, diagnostics: diag });
    }
    let mut all = g.backward(loss.total)?;
    let mut grads = BTreeMap::new();
    let mut group_sq: BTreeMap<String, f64> = BTreeMap::new();
    for (name, &v) in b.iter() {
        let t = all
            .take(v)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{name}`")))?;
        if !t.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                diagnostics: format!("gradient of `{name}` is not finite"),
            });
        }
        *group_sq.entry(group_of(name).to_string()).or_default() += t.data().iter().map(|v| v * v).sum::<f64>();
        grads.insert(name.clone(), t);
    }
    let reconstruction_clamped = fw
        .recon_raw
        .is_some_and(|r| g.value(r).data().iter().any(|v| !(0.0..=1.0).contains(v)));
    Ok(StepGradients {
        breakdown,
        grads,
        group_norms: group_sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect(),
        reconstruction_clamped,
    })
}

/// One optimizer step on a single pair; returns the loss before the update.
pub fn train_step(
    raw: &ImageTensor,
    label: &ImageTensor,
    weights: &mut ModelWeights,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<StepGradients> {
    let out = compute_gradients(raw, label, weights, cfg, state.step)?;
    adam_step(weights, &out.grads, state, &cfg.optim)?;
    Ok(out)
}

/// One training-log record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

impl StepLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }
}

/// Trains for `cfg.steps` optimizer steps, cycling through `pairs` in order.
/// With `batch_size > 1` the gradients of consecutive pairs are averaged.
pub fn train(
    pairs: &[(ImageTensor, ImageTensor)],
    weights: &mut ModelWeights,
    state: &mut AdamState,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one pair".into()));
    }
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut next = 0;
    for _ in 0..cfg.steps {
        let mut acc: Option<(LossBreakdown, BTreeMap<String, Tensor>)> = None;
        for _ in 0..cfg.batch_size {
            let (raw, label) = &pairs[next % pairs.len()];
            next += 1;
            let out = compute_gradients(raw, label, weights, cfg, state.step)?;
            acc = Some(match acc {
                None => (out.breakdown, out.grads),
                Some((mut loss, mut grads)) => {
                    add_breakdown(&mut loss, &out.breakdown);
                    for (n, g) in grads.iter_mut() {
                        let o = &out.grads[n];
                        g.data_mut().iter_mut().zip(o.data()).for_each(|(a, b)| *a += b);
                    }
                    (loss, grads)
                }
            });
        }
        let (mut loss, mut grads) = acc.expect("batch_size >= 1");
        if cfg.batch_size > 1 {
            let k = cfg.batch_size as f64;
            scale_breakdown(&mut loss, 1.0 / k);
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v /= k);
            }
        }
        on_step(&StepLog { step: state.step, loss });
        adam_step(weights, &grads, state, &cfg.optim)?;
        curve.push(loss);
    }
    Ok(curve)
}

fn add_breakdown(a: &mut LossBreakdown, b: &LossBreakdown) {
    a.l2 += b.l2;
    a.l_ssim += b.l_ssim;
    a.l_edge += b.l_edge;
    a.l_uiqm += b.l_uiqm;
    a.l2_r += b.l2_r;
    a.l_ssim_r += b.l_ssim_r;
    a.total += b.total;
}

fn scale_breakdown(a: &mut LossBreakdown, s: f64) {
    for v in [
        &mut a.l2,
        &mut a.l_ssim,
        &mut a.l_edge,
        &mut a.l_uiqm,
        &mut a.l2_r,
        &mut a.l_ssim_r,
        &mut a.total,
    ] {
        *v *= s;
    }
}

/// Result of repeatedly fitting one pair.
#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub curve: Vec<LossBreakdown>,
    /// `l2(J, label)` before the first and after the last step.
    pub initial_l2: f64,
    pub final_l2: f64,
    pub initial_psnr: f64,
    pub final_psnr: f64,
    pub weights: ModelWeights,
    pub state: AdamState,
}

/// Initializes from `cfg.seed` and trains `cfg.steps` steps on one pair.
pub fn overfit_single(raw: &ImageTensor, label: &ImageTensor, cfg: &TrainConfig) -> Result<OverfitReport> {
    let mut weights = ModelWeights::init(&cfg.model, cfg.seed)?;
    let mut state = AdamState::new(&weights);
    let score = |w: &ModelWeights| -> Result<(f64, f64)> {
        let j = crate::nets::jnet_eval(w, &cfg.model, raw)?;
        let (mse, psnr) = mse_psnr(&j, label)?;
        Ok((mse / (255.0 * 255.0), psnr))
    };
    let (initial_l2, initial_psnr) = score(&weights)?;
    let pair = [(raw.clone(), label.clone())];
    let curve = train(&pair, &mut weights, &mut state, cfg, |_| {})?;
    let (final_l2, final_psnr) = if cfg.steps == 0 {
        (initial_l2, initial_psnr)
    } else {
        score(&weights)?
    };
    Ok(OverfitReport {
        curve,
        initial_l2,
        final_l2,
        initial_psnr,
        final_psnr,
        weights,
        state,
    })
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Every estimated component for one image. For models without a separate
/// backscatter map, `t_b` repeats the single transmission (Koschmieder,
/// Jaffe-McGlamery) or is all ones (Retinex, whose `t_d` is the
/// illumination).
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub j: ImageTensor,
    pub t_d: ImageTensor,
    pub t_b: ImageTensor,
    pub a: [f64; 3],
    pub reconstruction: ImageTensor,
    pub reconstruction_clamped: bool,
}

pub fn decompose(weights: &ModelWeights, cfg: &ModelConfig, raw: &ImageTensor) -> Result<Decomposition> {
    let a = estimate_background_light(raw)?;
    let mut g = Graph::new();
    let b = Binding::new(&mut g, weights, false)?;
    let x = g.constant(raw.tensor().clone())?;
    let fw = forward(&mut g, &b, cfg, x, a, true)?;
    let img = |v: Option<Var>| -> Result<ImageTensor> {
        let v = v.expect("reconstruction enabled");
        ImageTensor::from_tensor(g.value(v).clone())
    };
    let j = ImageTensor::from_tensor(g.value(fw.j).clone())?;
    let t_d = img(fw.t_d)?;
    let t_b = match (fw.t_b, cfg.formation) {
        (Some(v), _) => img(Some(v))?,
        (None, FormationModel::Retinex) => ImageTensor::uniform(raw.height(), raw.width(), [1.0; 3])?,
        (None, _) => t_d.clone(),
    };
    let reconstruction = img(fw.recon)?;
    let reconstruction_clamped = g
        .value(fw.recon_raw.expect("reconstruction enabled"))
        .data()
        .iter()
        .any(|v| !(0.0..=1.0).contains(v));
    Ok(Decomposition { j, t_d, t_b, a, reconstruction, reconstruction_clamped })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MUIE1";
const STEP_TENSOR: &str = "adam.step";

/// Weights, optimizer state and the configuration they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub weights: ModelWeights,
    pub state: AdamState,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

/// Layout: magic, `u32` config length, TOML config, `u32` tensor count,
/// then per tensor `u32` name length, name, `u32` rank, `u32` extents and
/// little-endian `f32` values. All integers are little-endian.
pub fn encode_checkpoint(weights: &ModelWeights, state: &AdamState, config: &TrainConfig) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    let text = toml::to_string(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, 3 * weights.len() + 1)?;
    for (name, t) in weights.iter() {
        put_tensor(&mut out, name, t)?;
    }
    for (prefix, moments) in [("adam.m.", &state.m), ("adam.v.", &state.v)] {
        for (name, _) in weights.iter() {
            let t = moments
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks `{name}`")))?;
            put_tensor(&mut out, &format!("{prefix}{name}"), t)?;
        }
    }
    put_tensor(&mut out, STEP_TENSOR, &Tensor::scalar(state.step as f64))?;
    Ok(out)
}

pub fn save_checkpoint(weights: &ModelWeights, state: &AdamState, config: &TrainConfig, path: &Path) -> Result<()> {
    crate::io::write_file(path, &encode_checkpoint(weights, state, config)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let config: TrainConfig = toml::from_str(r.text()?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    config.validate().map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.text()?.to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }

    let step = tensors
        .remove(STEP_TENSOR)
        .ok_or_else(|| Error::Checkpoint("missing optimizer step".into()))?
        .item() as u64;
    let expected = ModelWeights::expected_shapes(&config.model);
    let mut split = |prefix: &str| -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, shape) in &expected {
            let key = format!("{prefix}{name}");
            let t = tensors
                .remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::CheckpointShape {
                    name: key,
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            out.insert(name.clone(), t);
        }
        Ok(out)
    };
    let weights = ModelWeights::from_map(split("")?);
    let m = split("adam.m.")?;
    let v = split("adam.v.")?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint { config, weights, state: AdamState { m, v, step } })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks every tensor against the shapes `model`
/// requires.
pub fn load_checkpoint_for(path: &Path, model: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let expected = ModelWeights::expected_shapes(model);
    for (name, shape) in &expected {
        match ck.weights.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                })
            }
            None => return Err(Error::Checkpoint(format!("checkpoint lacks `{name}` required by the model"))),
        }
    }
    if ck.weights.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} weight tensors, model needs {}",
            ck.weights.len(),
            expected.len()
        )));
    }
    Ok(ck)
}

/// Rounds every value to `f32`, the precision checkpoints store.
pub fn round_to_stored(weights: &ModelWeights) -> ModelWeights {
    let mut w = weights.clone();
    for (_, t) in w.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    w
}
