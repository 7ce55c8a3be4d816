//! The three learned estimators.
//!
//! * J-Net estimates scene radiance: a 1x1 stem, a stack of 3x3
//!   conv + instance norm + Mish blocks, a parallel branch of MIC blocks fed
//!   from selected backbone stages, a fusion block (SE gate + 3x3 conv + IN +
//!   Mish) over the concatenated backbone and MIC features, and a 1x1 head
//!   with a sigmoid.
//! * TD-Net and TB-Net share one six-layer architecture with independent
//!   weights: 1x1 conv, four 3x3 conv + IN + Mish layers, then SE + 1x1 conv +
//!   sigmoid.
//!
//! Nothing downsamples, so every stage keeps the input resolution.
//!
//! The CSS module runs one selective SSM (shared weights) along two axes:
//! spatially, as a raster-order sequence of `H*W` steps with `C` features,
//! and across channels, as a sequence of `C` steps whose `H*W` features are
//! projected to width `C` and back by learned adapters. The adapters tie a
//! J-Net to the image size it was configured for.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::formation::{FormationModel, PSF_SIZE};
use crate::image_tensor::{ImageTensor, CHANNELS};
use crate::ssm::{selective_param_shapes, selective_scan, SelectiveVars};
use crate::tensor::Tensor;

pub const IN_EPS: f64 = 1e-5;
pub const SE_REDUCTION: usize = 4;
pub const TNET_LAYERS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JNetConfig {
    pub base_channels: usize,
    pub num_blocks: usize,
    pub ssm_state_size: usize,
    /// Backbone stages (0-based) whose output feeds the MIC branch. Empty
    /// disables the branch and leaves a plain CNN.
    pub mic_injection: Vec<usize>,
}

impl Default for JNetConfig {
    fn default() -> Self {
        JNetConfig {
            base_channels: 16,
            num_blocks: 4,
            ssm_state_size: 8,
            mic_injection: vec![1, 3],
        }
    }
}

/// Everything that fixes the set and shapes of learnable tensors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub jnet: JNetConfig,
    pub tnet_channels: usize,
    /// Working resolution; the CSS channel adapters depend on it.
    pub height: usize,
    pub width: usize,
    pub formation: FormationModel,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            jnet: JNetConfig::default(),
            tnet_channels: 16,
            height: 32,
            width: 32,
            formation: FormationModel::Revised,
        }
    }
}

impl ModelConfig {
    pub fn toy(size: usize) -> Self {
        ModelConfig {
            height: size,
            width: size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = &self.jnet;
        let bad = |m: String| Err(Error::Config(m));
        if j.base_channels < 4 || !j.base_channels.is_multiple_of(SE_REDUCTION) {
            return bad(format!(
                "base_channels must be a multiple of {SE_REDUCTION} and at least 4, got {}",
                j.base_channels
            ));
        }
        if self.tnet_channels < 4 || !self.tnet_channels.is_multiple_of(SE_REDUCTION) {
            return bad(format!(
                "tnet_channels must be a multiple of {SE_REDUCTION} and at least 4, got {}",
                self.tnet_channels
            ));
        }
        if j.num_blocks == 0 {
            return bad("num_blocks must be at least 1".into());
        }
        if j.ssm_state_size == 0 {
            return bad("ssm_state_size must be at least 1".into());
        }
        if j.mic_injection.windows(2).any(|w| w[0] >= w[1]) {
            return bad("mic_injection must be strictly increasing".into());
        }
        if let Some(&i) = j.mic_injection.iter().find(|&&i| i >= j.num_blocks) {
            return bad(format!("mic_injection stage {i} >= num_blocks {}", j.num_blocks));
        }
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        Ok(())
    }

    fn fused_channels(&self) -> usize {
        let c = self.jnet.base_channels;
        if self.jnet.mic_injection.is_empty() {
            c
        } else {
            2 * c
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform in `+-1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
    Uniform(f64, f64),
    /// Inverse softplus of a log-uniform step size in `[1e-3, 1e-1]`.
    StepBias,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let c = cfg.jnet.base_channels;
    let conv = |v: &mut Vec<_>, name: &str, co: usize, ci: usize, k: usize| {
        v.push((format!("{name}.w"), vec![co, ci, k, k], Init::FanIn(ci * k * k)));
    };
    let norm = |v: &mut Vec<(String, Vec<usize>, Init)>, name: &str, ch: usize| {
        v.push((format!("{name}.gamma"), vec![ch], Init::Ones));
        v.push((format!("{name}.beta"), vec![ch], Init::Zeros));
    };
    let se = |v: &mut Vec<(String, Vec<usize>, Init)>, name: &str, ch: usize| {
        let hidden = ch / SE_REDUCTION;
        v.push((format!("{name}.w1"), vec![hidden, ch], Init::FanIn(ch)));
        v.push((format!("{name}.w2"), vec![ch, hidden], Init::FanIn(hidden)));
    };

    conv(&mut v, "jnet.stem", c, CHANNELS, 1);
    v.push(("jnet.stem.b".into(), vec![c], Init::FanIn(CHANNELS)));
    for i in 0..cfg.jnet.num_blocks {
        let name = format!("jnet.block{i}");
        conv(&mut v, &name, c, c, 3);
        norm(&mut v, &name, c);
    }
    let plane = cfg.height * cfg.width;
    for k in 0..cfg.jnet.mic_injection.len() {
        for part in ["in", "out"] {
            let name = format!("jnet.mic{k}.{part}");
            conv(&mut v, &name, c, c, 1);
            norm(&mut v, &name, c);
        }
        let n = cfg.jnet.ssm_state_size;
        for (pname, shape) in selective_param_shapes(c, n) {
            let init = match pname {
                "a_raw" => Init::Uniform(0.0, 1.0),
                "d_skip" => Init::Ones,
                "b_delta" => Init::StepBias,
                "b_b" | "b_c" => Init::Zeros,
                _ => Init::FanIn(c),
            };
            v.push((format!("jnet.mic{k}.css.{pname}"), shape, init));
        }
        v.push((format!("jnet.mic{k}.css.chan_in"), vec![plane, c], Init::FanIn(plane)));
        v.push((format!("jnet.mic{k}.css.chan_out"), vec![c, plane], Init::FanIn(c)));
    }
    let fused = cfg.fused_channels();
    se(&mut v, "jnet.fuse.se", fused);
    conv(&mut v, "jnet.fuse", c, fused, 3);
    norm(&mut v, "jnet.fuse", c);
    conv(&mut v, "jnet.head", CHANNELS, c, 1);
    v.push(("jnet.head.b".into(), vec![CHANNELS], Init::FanIn(c)));

    let t = cfg.tnet_channels;
    let tnets: &[&str] = if cfg.formation.uses_backscatter() {
        &["tdnet", "tbnet"]
    } else {
        &["tdnet"]
    };
    for net in tnets {
        conv(&mut v, &format!("{net}.conv1"), t, CHANNELS, 1);
        v.push((format!("{net}.conv1.b"), vec![t], Init::FanIn(CHANNELS)));
        for i in 1..=TNET_LAYERS {
            let name = format!("{net}.layer{i}");
            conv(&mut v, &name, t, t, 3);
            norm(&mut v, &name, t);
        }
        se(&mut v, &format!("{net}.se"), t);
        conv(&mut v, &format!("{net}.head"), CHANNELS, t, 1);
        v.push((format!("{net}.head.b"), vec![CHANNELS], Init::FanIn(t)));
    }
    if cfg.formation.uses_psf() {
        v.push(("psf.g".into(), vec![PSF_SIZE, PSF_SIZE], Init::Zeros));
    }
    v
}

/// Named learnable tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    /// Seeded initialization for `cfg`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(cfg) {
            let t = Tensor::from_fn(&shape, |_| match init {
                Init::FanIn(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    rng.random_range(-bound..bound)
                }
                Init::Zeros => 0.0,
                Init::Ones => 1.0,
                Init::Uniform(lo, hi) => rng.random_range(lo..hi),
                Init::StepBias => {
                    let step = rng.random_range((1e-3f64).ln()..(1e-1f64).ln()).exp();
                    step + (-(-step).exp_m1()).ln()
                }
            });
            tensors.insert(name, t);
        }
        Ok(ModelWeights { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ModelWeights { tensors }
    }

    /// Names and shapes `cfg` requires, ordered by name.
    pub fn expected_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (_, t) in self.tensors.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Weights placed on a graph, by name.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    /// Adds every tensor as a trainable leaf (`trainable`) or a constant.
    pub fn new(g: &mut Graph, weights: &ModelWeights, trainable: bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in weights.iter() {
            let v = if trainable {
                g.param(t.clone())?
            } else {
                g.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(Binding { vars })
    }

    /// Replaces the node used for `name`.
    pub fn set(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing weight `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn prefixed(&self, prefix: &str, name: &str) -> Result<Var> {
        self.var(&format!("{prefix}.{name}"))
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Squeeze-and-excitation: `x * sigmoid(W2 relu(W1 avgpool(x)))` per channel.
pub fn se_layer(g: &mut Graph, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let (c, _, _) = g.value(x).dims3()?;
    let (hidden, c1) = g.value(w1).dims2()?;
    if c1 != c || g.shape(w2) != [c, hidden] || c % SE_REDUCTION != 0 {
        return Err(Error::shape(
            "se_layer",
            format!("{c} channels, w1 {:?}, w2 {:?}", g.shape(w1), g.shape(w2)),
        ));
    }
    let pooled = g.global_avg_pool(x)?;
    let z = g.matvec(w1, pooled)?;
    let z = g.relu(z);
    let s = g.matvec(w2, z)?;
    let s = g.sigmoid(s);
    g.scale_channels(x, s)
}

/// Convolution followed by instance norm and Mish, "same" padding.
pub fn conv_norm_mish(g: &mut Graph, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let w = b.prefixed(prefix, "w")?;
    let k = g.shape(w)[2];
    let y = g.conv2d(x, w, k / 2)?;
    let y = g.instance_norm(y, b.prefixed(prefix, "gamma")?, b.prefixed(prefix, "beta")?, IN_EPS)?;
    Ok(g.mish(y))
}

fn conv_bias(g: &mut Graph, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let w = b.prefixed(prefix, "w")?;
    let k = g.shape(w)[2];
    let y = g.conv2d(x, w, k / 2)?;
    g.add_channel_bias(y, b.prefixed(prefix, "b")?)
}

/// Graph nodes of one CSS module.
#[derive(Clone, Copy, Debug)]
pub struct CssVars {
    pub ssm: SelectiveVars,
    /// `[H*W, C]`
    pub chan_in: Var,
    /// `[C, H*W]`
    pub chan_out: Var,
}

impl CssVars {
    pub fn bind(b: &Binding, prefix: &str) -> Result<Self> {
        let p = |n: &str| b.prefixed(prefix, n);
        Ok(CssVars {
            ssm: SelectiveVars {
                a_raw: p("a_raw")?,
                d_skip: p("d_skip")?,
                w_delta: p("w_delta")?,
                b_delta: p("b_delta")?,
                w_b: p("w_b")?,
                b_b: p("b_b")?,
                w_c: p("w_c")?,
                b_c: p("b_c")?,
            },
            chan_in: p("chan_in")?,
            chan_out: p("chan_out")?,
        })
    }
}

/// Spatial-branch output of CSS (raster-order scan over pixels).
pub fn css_spatial(g: &mut Graph, x: Var, css: &CssVars) -> Result<Var> {
    let (c, h, w) = g.value(x).dims3()?;
    let seq = g.reshape(x, &[c, h * w])?;
    let seq = g.transpose(seq)?;
    let y = selective_scan(g, seq, &css.ssm)?;
    let y = g.transpose(y)?;
    g.reshape(y, &[c, h, w])
}

/// Channel-branch output of CSS (scan over channels, shared SSM).
pub fn css_channel(g: &mut Graph, x: Var, css: &CssVars) -> Result<Var> {
    let (c, h, w) = g.value(x).dims3()?;
    if g.shape(css.chan_in) != [h * w, c] {
        return Err(Error::shape(
            "css_channel",
            format!(
                "adapter {:?} was built for a different resolution than {h}x{w} with {c} channels",
                g.shape(css.chan_in)
            ),
        ));
    }
    let seq = g.reshape(x, &[c, h * w])?;
    let seq = g.matmul(seq, css.chan_in)?;
    let y = selective_scan(g, seq, &css.ssm)?;
    let y = g.matmul(y, css.chan_out)?;
    g.reshape(y, &[c, h, w])
}

pub fn css_forward(g: &mut Graph, x: Var, css: &CssVars) -> Result<Var> {
    let spatial = css_spatial(g, x, css)?;
    let channel = css_channel(g, x, css)?;
    g.add(spatial, channel)
}

/// `Conv.O(CSS(Conv.I(x)) + Conv.I(x))`.
pub fn mic_forward(g: &mut Graph, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let inner = conv_norm_mish(g, b, &format!("{prefix}.in"), x)?;
    let css = CssVars::bind(b, &format!("{prefix}.css"))?;
    let global = css_forward(g, inner, &css)?;
    let sum = g.add(global, inner)?;
    conv_norm_mish(g, b, &format!("{prefix}.out"), sum)
}

fn expect_image(g: &Graph, x: Var, op: &'static str) -> Result<(usize, usize)> {
    let (c, h, w) = g.value(x).dims3()?;
    if c != CHANNELS {
        return Err(Error::shape(op, format!("expected 3 input channels, got {c}")));
    }
    Ok((h, w))
}

/// Scene radiance estimate for `input: [3, H, W]`, values in `[0, 1]`.
pub fn jnet_forward(g: &mut Graph, b: &Binding, cfg: &ModelConfig, input: Var) -> Result<Var> {
    let (h, w) = expect_image(g, input, "jnet_forward")?;
    if !cfg.jnet.mic_injection.is_empty() && (h, w) != (cfg.height, cfg.width) {
        return Err(Error::shape(
            "jnet_forward",
            format!("input {h}x{w}, model configured for {}x{}", cfg.height, cfg.width),
        ));
    }
    let mut f = conv_bias(g, b, "jnet.stem", input)?;
    let mut mic: Option<Var> = None;
    let mut k = 0;
    for i in 0..cfg.jnet.num_blocks {
        f = conv_norm_mish(g, b, &format!("jnet.block{i}"), f)?;
        if cfg.jnet.mic_injection.contains(&i) {
            let feed = match mic {
                Some(m) => g.add(f, m)?,
                None => f,
            };
            mic = Some(mic_forward(g, b, &format!("jnet.mic{k}"), feed)?);
            k += 1;
        }
    }
    let fused = match mic {
        Some(m) => g.concat_channels(f, m)?,
        None => f,
    };
    let fused = se_layer(g, fused, b.var("jnet.fuse.se.w1")?, b.var("jnet.fuse.se.w2")?)?;
    let fused = conv_norm_mish(g, b, "jnet.fuse", fused)?;
    let out = conv_bias(g, b, "jnet.head", fused)?;
    Ok(g.sigmoid(out))
}

/// Transmission (or illumination) map from the network under `prefix`
/// (`"tdnet"` or `"tbnet"`).
pub fn tnet_forward(g: &mut Graph, b: &Binding, prefix: &str, input: Var) -> Result<Var> {
    expect_image(g, input, "tnet_forward")?;
    let mut f = conv_bias(g, b, &format!("{prefix}.conv1"), input)?;
    for i in 1..=TNET_LAYERS {
        f = conv_norm_mish(g, b, &format!("{prefix}.layer{i}"), f)?;
    }
    let f = se_layer(g, f, b.prefixed(prefix, "se.w1")?, b.prefixed(prefix, "se.w2")?)?;
    let out = conv_bias(g, b, &format!("{prefix}.head"), f)?;
    Ok(g.sigmoid(out))
}

fn eval_image(
    weights: &ModelWeights,
    image: &ImageTensor,
    f: impl FnOnce(&mut Graph, &Binding, Var) -> Result<Var>,
) -> Result<ImageTensor> {
    let mut g = Graph::new();
    let b = Binding::new(&mut g, weights, false)?;
    let x = g.constant(image.tensor().clone())?;
    let y = f(&mut g, &b, x)?;
    ImageTensor::from_tensor(g.value(y).clone())
}

pub fn jnet_eval(weights: &ModelWeights, cfg: &ModelConfig, image: &ImageTensor) -> Result<ImageTensor> {
    eval_image(weights, image, |g, b, x| jnet_forward(g, b, cfg, x))
}

pub fn tnet_eval(weights: &ModelWeights, prefix: &str, image: &ImageTensor) -> Result<ImageTensor> {
    eval_image(weights, image, |g, b, x| tnet_forward(g, b, prefix, x))
}
