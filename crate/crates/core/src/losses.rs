//! Training losses.
//!
//! The total objective is
//! `l2 + l_ssim + lambda * l_edge + l_uiqm + l2_R + l_ssim_R`, where the `_R`
//! terms compare the input with its reconstruction from the estimated
//! components. Every term is built on the autodiff graph; the plain-value
//! functions evaluate the same graph on constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image_tensor::{expect_same_size, ImageTensor, CHANNELS};
use crate::metrics::{
    alpha_trimmed_mean, block_extrema, eme, log_amee, SOBEL_X, SOBEL_Y, UICM_MEAN_COEF, UICM_SPREAD_COEF,
    UICM_WEIGHT, UICONM_WEIGHT, UIQM_BLOCK, UISM_CHANNEL_WEIGHTS, UISM_WEIGHT,
};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const EDGE_EPS: f64 = 1e-3;
pub const LAPLACIAN: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
pub const UIQM_FLOOR: f64 = 0.1;
/// Smoothing inside square roots of the UIQM surrogate.
pub const SURROGATE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_edge: f64,
    pub enable_reconstruction: bool,
    pub enable_uiqm: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_edge: 0.05,
            enable_reconstruction: true,
            enable_uiqm: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_edge >= 0.0 && self.lambda_edge.is_finite()) {
            return Err(Error::Config(format!("lambda_edge must be >= 0, got {}", self.lambda_edge)));
        }
        Ok(())
    }
}

/// Values of every loss term; disabled terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l2: f64,
    pub l_ssim: f64,
    pub l_edge: f64,
    pub l_uiqm: f64,
    #[serde(rename = "l2_R")]
    pub l2_r: f64,
    #[serde(rename = "l_ssim_R")]
    pub l_ssim_r: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted sum, in the same order the graph adds the terms.
    pub fn weighted_sum(&self, lambda_edge: f64) -> f64 {
        self.l2 + self.l_ssim + self.l_edge * lambda_edge + self.l_uiqm + self.l2_r + self.l_ssim_r
    }

    pub fn is_finite(&self) -> bool {
        [self.l2, self.l_ssim, self.l_edge, self.l_uiqm, self.l2_r, self.l_ssim_r, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn expect_same(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Mean squared difference.
pub fn l2_loss_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Normalized 11x11 Gaussian window with sigma 1.5.
pub fn gaussian_window() -> Tensor {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut t = Tensor::from_fn(&[SSIM_WINDOW, SSIM_WINDOW], |i| {
        let dy = (i / SSIM_WINDOW) as f64 - r;
        let dx = (i % SSIM_WINDOW) as f64 - r;
        (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s = t.sum();
    t.data_mut().iter_mut().for_each(|v| *v /= s);
    t
}

/// Mean SSIM over every valid window position and channel, on `[C, H, W]`
/// inputs with dynamic range 1.
pub fn ssim_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    expect_same(g, "ssim", a, b)?;
    let (_, h, w) = g.value(a).dims3()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let win = g.constant(gaussian_window())?;
    let mu_a = g.depthwise_conv2d(a, win, 0)?;
    let mu_b = g.depthwise_conv2d(b, win, 0)?;
    let aa = g.square(a);
    let bb = g.square(b);
    let ab = g.mul(a, b)?;
    let e_aa = g.depthwise_conv2d(aa, win, 0)?;
    let e_bb = g.depthwise_conv2d(bb, win, 0)?;
    let e_ab = g.depthwise_conv2d(ab, win, 0)?;
    let mu_aa = g.square(mu_a);
    let mu_bb = g.square(mu_b);
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let lum_num = g.scale(mu_ab, 2.0);
    let lum_num = g.add_scalar(lum_num, SSIM_C1);
    let cs_num = g.scale(cov, 2.0);
    let cs_num = g.add_scalar(cs_num, SSIM_C2);
    let lum_den = g.add(mu_aa, mu_bb)?;
    let lum_den = g.add_scalar(lum_den, SSIM_C1);
    let cs_den = g.add(var_a, var_b)?;
    let cs_den = g.add_scalar(cs_den, SSIM_C2);
    let num = g.mul(lum_num, cs_num)?;
    let den = g.mul(lum_den, cs_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// `1 - ssim`.
pub fn ssim_loss_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let s = ssim_var(g, a, b)?;
    let n = g.neg(s);
    Ok(g.add_scalar(n, 1.0))
}

/// `sqrt(mean((Lap a - Lap b)^2) + eps^2)` with a zero-padded 3x3 Laplacian.
pub fn edge_loss_var(g: &mut Graph, a: Var, b: Var, eps: f64) -> Result<Var> {
    expect_same(g, "edge_loss", a, b)?;
    let lap = g.constant(Tensor::new(vec![3, 3], LAPLACIAN.to_vec())?)?;
    let d = g.sub(a, b)?;
    let ld = g.depthwise_conv2d(d, lap, 1)?;
    let sq = g.square(ld);
    let m = g.mean(sq);
    let m = g.add_scalar(m, eps * eps);
    Ok(g.sqrt(m))
}

/// Alpha-trimmed mean of all elements; the gradient is spread evenly over
/// the kept values.
pub fn trimmed_mean_var(g: &mut Graph, x: Var) -> Var {
    let (mean, kept) = alpha_trimmed_mean(g.value(x).data());
    let n = kept.len() as f64;
    g.record(
        "trimmed_mean",
        &[x],
        Tensor::scalar(mean),
        Box::new(move |inp, _, gout| {
            let mut gx = vec![0.0; inp[0].numel()];
            for &i in &kept {
                gx[i] = gout[0] / n;
            }
            vec![Some(gx)]
        }),
    )
}

/// EME of an `[H, W]` map over `block`-sized tiles.
pub fn eme_var(g: &mut Graph, x: Var, block: usize) -> Result<Var> {
    let (h, w) = g.value(x).dims2()?;
    let blocks = block_extrema(g.value(x).data(), 1, h, w, block);
    let value = eme(&blocks);
    let scale = 2.0 / blocks.len() as f64;
    Ok(g.record(
        "eme",
        &[x],
        Tensor::scalar(value),
        Box::new(move |inp, _, gout| {
            let mut gx = vec![0.0; inp[0].numel()];
            for b in blocks.iter().filter(|b| b.min > 0.0 && b.max > 0.0) {
                gx[b.argmax] += gout[0] * scale / b.max;
                gx[b.argmin] -= gout[0] * scale / b.min;
            }
            vec![Some(gx)]
        }),
    ))
}

/// logAMEE contrast of a `[C, H, W]` tensor, tiles spanning all channels.
pub fn log_amee_var(g: &mut Graph, x: Var, block: usize) -> Result<Var> {
    let (c, h, w) = g.value(x).dims3()?;
    let blocks = block_extrema(g.value(x).data(), c, h, w, block);
    let value = log_amee(&blocks);
    let scale = -1.0 / blocks.len() as f64;
    Ok(g.record(
        "log_amee",
        &[x],
        Tensor::scalar(value),
        Box::new(move |inp, _, gout| {
            let mut gx = vec![0.0; inp[0].numel()];
            for b in &blocks {
                let (top, bot) = (b.max - b.min, b.max + b.min);
                if top <= 0.0 || bot <= 0.0 {
                    continue;
                }
                let dr = gout[0] * scale * ((top / bot).ln() + 1.0) / (bot * bot);
                gx[b.argmax] += dr * 2.0 * b.min;
                gx[b.argmin] -= dr * 2.0 * b.max;
            }
            vec![Some(gx)]
        }),
    ))
}

/// Differentiable UIQM of a `[3, H, W]` image in `[0, 1]`. Matches the
/// metric except that square roots are smoothed by [`SURROGATE_EPS`].
pub fn uiqm_surrogate_var(g: &mut Graph, img: Var) -> Result<Var> {
    let (c, h, w) = g.value(img).dims3()?;
    if c != CHANNELS || h < 2 * UIQM_BLOCK || w < 2 * UIQM_BLOCK {
        return Err(Error::ImageTooSmall(format!(
            "UIQM needs a 3-channel image of at least {0}x{0}, got {c}x{h}x{w}",
            2 * UIQM_BLOCK
        )));
    }
    let x = g.scale(img, 255.0);
    let r = g.channel(x, 0)?;
    let gr = g.channel(x, 1)?;
    let b = g.channel(x, 2)?;

    // colorfulness
    let rg = g.sub(r, gr)?;
    let rpg = g.add(r, gr)?;
    let half = g.scale(rpg, 0.5);
    let yb = g.sub(half, b)?;
    let mut mus = Vec::new();
    let mut vars = Vec::new();
    for opp in [rg, yb] {
        let mu = trimmed_mean_var(g, opp);
        let mu_full = g.broadcast_scalar(mu, &[h, w])?;
        let d = g.sub(opp, mu_full)?;
        let d2 = g.square(d);
        vars.push(g.mean(d2));
        mus.push(g.square(mu));
    }
    let mu2 = g.add(mus[0], mus[1])?;
    let mu2 = g.add_scalar(mu2, SURROGATE_EPS);
    let mu_term = g.sqrt(mu2);
    let var = g.add(vars[0], vars[1])?;
    let var = g.add_scalar(var, SURROGATE_EPS);
    let var_term = g.sqrt(var);
    let a = g.scale(mu_term, UICM_MEAN_COEF);
    let bterm = g.scale(var_term, UICM_SPREAD_COEF);
    let uicm = g.add(a, bterm)?;

    // sharpness
    let padded = g.pad_circular(x, 1)?;
    let kx = g.constant(Tensor::new(vec![3, 3], SOBEL_X.to_vec())?)?;
    let ky = g.constant(Tensor::new(vec![3, 3], SOBEL_Y.to_vec())?)?;
    let gx = g.depthwise_conv2d(padded, kx, 0)?;
    let gy = g.depthwise_conv2d(padded, ky, 0)?;
    let gx2 = g.square(gx);
    let gy2 = g.square(gy);
    let m2 = g.add(gx2, gy2)?;
    let m2 = g.add_scalar(m2, SURROGATE_EPS);
    let mag = g.sqrt(m2);
    let mut uism: Option<Var> = None;
    for (ch, &weight) in UISM_CHANNEL_WEIGHTS.iter().enumerate() {
        let m = g.channel(mag, ch)?;
        let peak = g.max_all(m);
        let inv = g.recip(peak);
        let inv = g.scale(inv, 255.0);
        let inv = g.broadcast_scalar(inv, &[h, w])?;
        let norm = g.mul(m, inv)?;
        let chan = g.channel(x, ch)?;
        let edge = g.mul(norm, chan)?;
        let e = eme_var(g, edge, UIQM_BLOCK)?;
        let e = g.scale(e, weight);
        uism = Some(match uism {
            Some(acc) => g.add(acc, e)?,
            None => e,
        });
    }
    let uism = uism.expect("three channels");

    let uiconm = log_amee_var(g, x, UIQM_BLOCK)?;

    let t1 = g.scale(uicm, UICM_WEIGHT);
    let t2 = g.scale(uism, UISM_WEIGHT);
    let t3 = g.scale(uiconm, UICONM_WEIGHT);
    let s = g.add(t1, t2)?;
    g.add(s, t3)
}

/// `1 / max(u, 0.1)`.
pub fn uiqm_loss_from_value(u: f64) -> f64 {
    1.0 / u.max(UIQM_FLOOR)
}

pub fn uiqm_loss_var(g: &mut Graph, img: Var) -> Result<Var> {
    let u = uiqm_surrogate_var(g, img)?;
    let u = g.max_scalar(u, UIQM_FLOOR);
    Ok(g.recip(u))
}

/// Graph nodes of every active loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l2: Var,
    pub l_ssim: Var,
    pub l_edge: Var,
    pub l_uiqm: Option<Var>,
    pub l2_r: Option<Var>,
    pub l_ssim_r: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let val = |v: Var| g.value(v).item();
        let opt = |v: Option<Var>| v.map(val).unwrap_or(0.0);
        LossBreakdown {
            l2: val(self.l2),
            l_ssim: val(self.l_ssim),
            l_edge: val(self.l_edge),
            l_uiqm: opt(self.l_uiqm),
            l2_r: opt(self.l2_r),
            l_ssim_r: opt(self.l_ssim_r),
            total: val(self.total),
        }
    }
}

/// Builds the full objective. `recon` is `(input, reconstruction)` and is
/// required when reconstruction is enabled.
pub fn total_loss_var(
    g: &mut Graph,
    j: Var,
    label: Var,
    recon: Option<(Var, Var)>,
    w: &LossWeights,
) -> Result<LossVars> {
    w.validate()?;
    let l2 = l2_loss_var(g, j, label)?;
    let l_ssim = ssim_loss_var(g, j, label)?;
    let l_edge = edge_loss_var(g, j, label, EDGE_EPS)?;
    let mut total = g.add(l2, l_ssim)?;
    let weighted = g.scale(l_edge, w.lambda_edge);
    total = g.add(total, weighted)?;
    let l_uiqm = if w.enable_uiqm {
        let u = uiqm_loss_var(g, j)?;
        total = g.add(total, u)?;
        Some(u)
    } else {
        None
    };
    let (l2_r, l_ssim_r) = if w.enable_reconstruction {
        let (input, rec) = recon.ok_or_else(|| {
            Error::InvalidArgument("reconstruction loss enabled without a reconstruction".into())
        })?;
        let a = l2_loss_var(g, input, rec)?;
        total = g.add(total, a)?;
        let b = ssim_loss_var(g, input, rec)?;
        total = g.add(total, b)?;
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    Ok(LossVars { l2, l_ssim, l_edge, l_uiqm, l2_r, l_ssim_r, total })
}

fn eval_pair(a: &ImageTensor, b: &ImageTensor, f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let av = g.constant(a.tensor().clone())?;
    let bv = g.constant(b.tensor().clone())?;
    let out = f(&mut g, av, bv)?;
    Ok(g.value(out).item())
}

pub fn l2_loss(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    expect_same_size("l2_loss", a, b)?;
    eval_pair(a, b, l2_loss_var)
}

/// Mean SSIM with an 11x11 Gaussian window; images must be at least 11x11.
pub fn ssim_index(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    expect_same_size("ssim_index", a, b)?;
    eval_pair(a, b, ssim_var)
}

pub fn edge_loss(a: &ImageTensor, b: &ImageTensor, eps: f64) -> Result<f64> {
    expect_same_size("edge_loss", a, b)?;
    eval_pair(a, b, |g, x, y| edge_loss_var(g, x, y, eps))
}

/// Smoothed UIQM as used by the loss.
pub fn uiqm_surrogate(img: &ImageTensor) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(img.tensor().clone())?;
    let u = uiqm_surrogate_var(&mut g, x)?;
    Ok(g.value(u).item())
}

pub fn uiqm_loss(img: &ImageTensor) -> Result<f64> {
    Ok(uiqm_loss_from_value(uiqm_surrogate(img)?))
}

pub fn total_loss(
    j: &ImageTensor,
    label: &ImageTensor,
    input: &ImageTensor,
    reconstruction: &ImageTensor,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    expect_same_size("total_loss", j, label)?;
    expect_same_size("total_loss", input, reconstruction)?;
    let mut g = Graph::new();
    let jv = g.constant(j.tensor().clone())?;
    let lv = g.constant(label.tensor().clone())?;
    let iv = g.constant(input.tensor().clone())?;
    let rv = g.constant(reconstruction.tensor().clone())?;
    let loss = total_loss_var(&mut g, jv, lv, Some((iv, rv)), w)?;
    Ok(loss.breakdown(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::uiqm_parts;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> ImageTensor {
        ImageTensor::from_fn(h, w, f).unwrap()
    }

    #[test]
    fn l2_at_offset() {
        let a = ImageTensor::uniform(4, 4, [0.6; 3]).unwrap();
        let b = ImageTensor::uniform(4, 4, [0.5; 3]).unwrap();
        assert!((l2_loss(&a, &b).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(l2_loss(&a, &b).unwrap(), l2_loss(&b, &a).unwrap());
    }

    #[test]
    fn ssim_constant_images() {
        let a = ImageTensor::uniform(12, 12, [0.3; 3]).unwrap();
        let b = ImageTensor::uniform(12, 12, [0.7; 3]).unwrap();
        let want = (2.0 * 0.3 * 0.7 + SSIM_C1) / (0.09 + 0.49 + SSIM_C1);
        assert!((ssim_index(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((ssim_index(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ImageTensor::uniform(10, 12, [0.3; 3]).unwrap();
        assert!(matches!(ssim_index(&a, &a), Err(Error::ImageTooSmall(_))));
    }

    #[test]
    fn edge_loss_of_equal_images_is_eps() {
        let a = img(8, 8, |c, y, x| ((c + y * x) % 7) as f64 / 7.0);
        assert_eq!(edge_loss(&a, &a, EDGE_EPS).unwrap(), EDGE_EPS);
    }

    #[test]
    fn uiqm_floor() {
        assert_eq!(uiqm_loss_from_value(2.0), 0.5);
        assert_eq!(uiqm_loss_from_value(4.0), 0.25);
        assert_eq!(uiqm_loss_from_value(0.05), 10.0);
        assert_eq!(uiqm_loss_from_value(-3.0), 10.0);
    }

    #[test]
    fn surrogate_tracks_exact_uiqm() {
        let a = img(16, 24, |c, y, x| 0.1 + 0.8 * (((c * 31 + y * 7 + x * 13) % 17) as f64 / 17.0));
        let exact = uiqm_parts(&a, UIQM_BLOCK).unwrap().uiqm;
        let smooth = uiqm_surrogate(&a).unwrap();
        assert!((exact - smooth).abs() < 1e-3, "{exact} vs {smooth}");
    }

    #[test]
    fn breakdown_sums_exactly() {
        let j = img(16, 16, |c, y, x| ((c * 5 + y * 3 + x) % 11) as f64 / 11.0);
        let l = img(16, 16, |c, y, x| ((c + y + 2 * x) % 9) as f64 / 9.0);
        let w = LossWeights::default();
        let b = total_loss(&j, &l, &l, &j, &w).unwrap();
        assert_eq!(b.total, b.weighted_sum(w.lambda_edge));
        let off = LossWeights { enable_reconstruction: false, ..w.clone() };
        let b = total_loss(&j, &l, &l, &j, &off).unwrap();
        assert_eq!((b.l2_r, b.l_ssim_r), (0.0, 0.0));
        assert_eq!(b.total, b.weighted_sum(w.lambda_edge));
    }
}
