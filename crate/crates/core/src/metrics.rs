//! Evaluation metrics: MSE/PSNR on the 0-255 scale, SSIM, UIQM, UCIQE and
//! cumulative RGB histograms.
//!
//! UIQM follows Panetta, Gao and Agaian (IEEE J. Oceanic Eng., 2016):
//! colorfulness from alpha-trimmed opponent-channel statistics, sharpness as
//! the EME of Sobel-weighted channels, contrast as the logAMEE of RGB blocks.
//! UCIQE follows Yang and Sowmya (IEEE TIP, 2015) computed in CIELab.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image_tensor::{expect_same_size, ImageTensor, CHANNELS};
use crate::io::load_image;
pub use crate::losses::ssim_index;

pub const PSNR_CAP_DB: f64 = 99.0;

/// UIQM weights (Panetta et al. 2016).
pub const UICM_WEIGHT: f64 = 0.0282;
pub const UISM_WEIGHT: f64 = 0.2953;
pub const UICONM_WEIGHT: f64 = 3.5753;
/// Colorfulness coefficients for the trimmed mean and spread terms.
pub const UICM_MEAN_COEF: f64 = -0.0268;
pub const UICM_SPREAD_COEF: f64 = 0.1586;
pub const UICM_TRIM: f64 = 0.1;
/// Luma weights applied to the per-channel sharpness EME.
pub const UISM_CHANNEL_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];
pub const UIQM_BLOCK: usize = 8;

/// UCIQE weights (Yang and Sowmya 2015).
pub const UCIQE_CHROMA_WEIGHT: f64 = 0.4680;
pub const UCIQE_CONTRAST_WEIGHT: f64 = 0.2745;
pub const UCIQE_SATURATION_WEIGHT: f64 = 0.2576;

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// `(mse_255, psnr_db)`; PSNR is capped at 99 dB for identical images.
pub fn mse_psnr(a: &ImageTensor, b: &ImageTensor) -> Result<(f64, f64)> {
    expect_same_size("mse_psnr", a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = 255.0 * x - 255.0 * y;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok((mse, psnr_from_mse(mse)))
}

pub fn psnr_from_mse(mse_255: f64) -> f64 {
    if mse_255 <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (255.0f64 * 255.0 / mse_255).log10()).min(PSNR_CAP_DB)
    }
}

// ---------------------------------------------------------------------------
// UIQM building blocks, shared with the differentiable surrogate
// ---------------------------------------------------------------------------

/// Number of values dropped from the low and high end of `k` sorted values.
pub(crate) fn trim_counts(k: usize) -> (usize, usize) {
    let f = UICM_TRIM * k as f64;
    (f.ceil() as usize, f.floor() as usize)
}

/// Alpha-trimmed mean and the (unsorted) indices of the values it keeps.
pub(crate) fn alpha_trimmed_mean(values: &[f64]) -> (f64, Vec<usize>) {
    let k = values.len();
    let (lo, hi) = trim_counts(k);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let kept = order[lo..k - hi].to_vec();
    let mean = kept.iter().map(|&i| values[i]).sum::<f64>() / kept.len() as f64;
    (mean, kept)
}

/// Extremes of one block.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockExtrema {
    pub max: f64,
    pub min: f64,
    pub argmax: usize,
    pub argmin: usize,
}

/// Extremes over non-overlapping `block x block` tiles of `[planes, h, w]`
/// data, each tile spanning every plane. Partial tiles at the right and
/// bottom edges are ignored.
pub(crate) fn block_extrema(data: &[f64], planes: usize, h: usize, w: usize, block: usize) -> Vec<BlockExtrema> {
    let (k1, k2) = (w / block, h / block);
    let mut out = Vec::with_capacity(k1 * k2);
    for by in 0..k2 {
        for bx in 0..k1 {
            let mut e = BlockExtrema {
                max: f64::NEG_INFINITY,
                min: f64::INFINITY,
                argmax: 0,
                argmin: 0,
            };
            for p in 0..planes {
                for y in by * block..(by + 1) * block {
                    for x in bx * block..(bx + 1) * block {
                        let i = (p * h + y) * w + x;
                        let v = data[i];
                        if v > e.max {
                            e.max = v;
                            e.argmax = i;
                        }
                        if v < e.min {
                            e.min = v;
                            e.argmin = i;
                        }
                    }
                }
            }
            out.push(e);
        }
    }
    out
}

/// EME of a single-plane map: `2/(k1 k2) * sum ln(max/min)`, skipping tiles
/// with a zero extreme.
pub(crate) fn eme(blocks: &[BlockExtrema]) -> f64 {
    let w = 2.0 / blocks.len() as f64;
    w * blocks
        .iter()
        .filter(|b| b.min > 0.0 && b.max > 0.0)
        .map(|b| (b.max / b.min).ln())
        .sum::<f64>()
}

/// logAMEE contrast: `-1/(k1 k2) * sum r ln r` with `r = (max-min)/(max+min)`.
pub(crate) fn log_amee(blocks: &[BlockExtrema]) -> f64 {
    let w = -1.0 / blocks.len() as f64;
    w * blocks
        .iter()
        .map(|b| (b.max - b.min, b.max + b.min))
        .filter(|&(top, bot)| top > 0.0 && bot > 0.0)
        .map(|(top, bot)| {
            let r = top / bot;
            r * r.ln()
        })
        .sum::<f64>()
}

/// Sobel responses of an `h x w` plane with wrap-around borders.
pub(crate) fn sobel_wrap(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for ky in 0..3 {
                let yy = (y + h + ky - 1) % h;
                for kx in 0..3 {
                    let xx = (x + w + kx - 1) % w;
                    let v = plane[yy * w + xx];
                    sx += SOBEL_X[ky * 3 + kx] * v;
                    sy += SOBEL_Y[ky * 3 + kx] * v;
                }
            }
            gx[y * w + x] = sx;
            gy[y * w + x] = sy;
        }
    }
    (gx, gy)
}

/// The three UIQM components and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UiqmParts {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub uiqm: f64,
}

fn check_uiqm_size(img: &ImageTensor, block: usize) -> Result<()> {
    if block == 0 || img.height() < 2 * block || img.width() < 2 * block {
        return Err(Error::ImageTooSmall(format!(
            "UIQM with {block}x{block} blocks needs at least {0}x{0} pixels, got {1}x{2}",
            2 * block,
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

pub fn uiqm_parts(img: &ImageTensor, block: usize) -> Result<UiqmParts> {
    check_uiqm_size(img, block)?;
    let (h, w) = (img.height(), img.width());
    let px: Vec<f64> = img.data().iter().map(|v| v * 255.0).collect();
    let plane = h * w;
    let (r, g, b) = (&px[..plane], &px[plane..2 * plane], &px[2 * plane..]);

    let rg: Vec<f64> = r.iter().zip(g).map(|(r, g)| r - g).collect();
    let yb: Vec<f64> = r.iter().zip(g).zip(b).map(|((r, g), b)| 0.5 * (r + g) - b).collect();
    let (mu_rg, _) = alpha_trimmed_mean(&rg);
    let (mu_yb, _) = alpha_trimmed_mean(&yb);
    let var = |v: &[f64], mu: f64| v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64;
    let uicm = UICM_MEAN_COEF * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt()
        + UICM_SPREAD_COEF * (var(&rg, mu_rg) + var(&yb, mu_yb)).sqrt();

    let mut uism = 0.0;
    for c in 0..CHANNELS {
        let ch = &px[c * plane..(c + 1) * plane];
        let (gx, gy) = sobel_wrap(ch, h, w);
        let mut mag: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();
        let peak = mag.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            mag.iter_mut().for_each(|m| *m *= 255.0 / peak);
        }
        let edge: Vec<f64> = mag.iter().zip(ch).map(|(m, v)| m * v).collect();
        uism += UISM_CHANNEL_WEIGHTS[c] * eme(&block_extrema(&edge, 1, h, w, block));
    }

    let uiconm = log_amee(&block_extrema(&px, CHANNELS, h, w, block));
    let uiqm = UICM_WEIGHT * uicm + UISM_WEIGHT * uism + UICONM_WEIGHT * uiconm;
    Ok(UiqmParts { uicm, uism, uiconm, uiqm })
}

/// UIQM with the default 8x8 blocks; needs at least 16x16 pixels.
pub fn uiqm(img: &ImageTensor) -> Result<f64> {
    Ok(uiqm_parts(img, UIQM_BLOCK)?.uiqm)
}

// ---------------------------------------------------------------------------
// UCIQE
// ---------------------------------------------------------------------------

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// CIELab of an sRGB triple in `[0, 1]`, white point D65 taken from the
/// matrix row sums so that white maps to `L = 100`. Neutral colors get
/// `a = b = 0` exactly.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz = SRGB_TO_XYZ.map(|row| row.iter().zip(&lin).map(|(m, c)| m * c).sum::<f64>() / row.iter().sum::<f64>());
    let [fx, fy, fz] = xyz.map(lab_f);
    let l = 116.0 * fy - 16.0;
    if rgb[0] == rgb[1] && rgb[1] == rgb[2] {
        return [l, 0.0, 0.0];
    }
    [l, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UciqeParts {
    pub chroma_std: f64,
    pub luminance_contrast: f64,
    pub mean_saturation: f64,
    pub uciqe: f64,
}

/// UCIQE components. Lightness and chroma are scaled to roughly `[0, 1]`
/// (`L/100`, `sqrt(a^2+b^2)/100`); saturation is `C / sqrt(C^2 + L^2)`;
/// luminance contrast is the spread between the 1st and 99th percentiles.
pub fn uciqe_parts(img: &ImageTensor) -> UciqeParts {
    let n = img.pixels();
    let mut light = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat_sum = 0.0;
    for i in 0..n {
        let [l, a, b] = srgb_to_lab([0, 1, 2].map(|c| img.channel(c)[i]));
        let (l, c) = (l / 100.0, a.hypot(b) / 100.0);
        let s = c.hypot(l);
        if s > 0.0 {
            sat_sum += c / s;
        }
        light.push(l);
        chroma.push(c);
    }
    let mean = chroma.iter().sum::<f64>() / n as f64;
    let chroma_std = (chroma.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n as f64).sqrt();
    light.sort_by(f64::total_cmp);
    let lo = (0.01 * n as f64).floor() as usize;
    let hi = ((0.99 * n as f64).ceil() as usize).clamp(1, n) - 1;
    let luminance_contrast = light[hi] - light[lo.min(hi)];
    let mean_saturation = sat_sum / n as f64;
    UciqeParts {
        chroma_std,
        luminance_contrast,
        mean_saturation,
        uciqe: UCIQE_CHROMA_WEIGHT * chroma_std
            + UCIQE_CONTRAST_WEIGHT * luminance_contrast
            + UCIQE_SATURATION_WEIGHT * mean_saturation,
    }
}

pub fn uciqe(img: &ImageTensor) -> f64 {
    uciqe_parts(img).uciqe
}

// ---------------------------------------------------------------------------
// Dataset evaluation
// ---------------------------------------------------------------------------

/// One image to score, optionally with a reference.
#[derive(Clone, Debug)]
pub struct EvalInput {
    pub id: String,
    pub image: PathBuf,
    pub reference: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_255: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub uiqm: f64,
    pub uciqe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub id: String,
    pub error: String,
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Summary { mean, std: var.sqrt(), count: values.len() })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Aggregate {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_255: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<Summary>,
    pub uiqm: Option<Summary>,
    pub uciqe: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub records: Vec<ImageMetrics>,
    pub failures: Vec<Failure>,
    pub aggregate: Aggregate,
}

impl MetricReport {
    pub fn from_records(records: Vec<ImageMetrics>, failures: Vec<Failure>) -> Self {
        let col = |f: &dyn Fn(&ImageMetrics) -> Option<f64>| {
            Summary::of(&records.iter().filter_map(f).collect::<Vec<_>>())
        };
        let aggregate = Aggregate {
            mse_255: col(&|r| r.mse_255),
            psnr_db: col(&|r| r.psnr_db),
            ssim: col(&|r| r.ssim),
            uiqm: col(&|r| Some(r.uiqm)),
            uciqe: col(&|r| Some(r.uciqe)),
        };
        MetricReport { records, failures, aggregate }
    }

    /// One JSON object per image, then one for the failures and aggregate.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
            out.push('\n');
        }
        let tail = serde_json::json!({ "failures": self.failures, "aggregate": self.aggregate });
        out.push_str(&tail.to_string());
        out.push('\n');
        out
    }
}

/// Metrics for one image; reference metrics only when `reference` is given.
pub fn image_metrics(id: &str, image: &ImageTensor, reference: Option<&ImageTensor>) -> Result<ImageMetrics> {
    let (mut mse_255, mut psnr_db, mut ssim) = (None, None, None);
    if let Some(r) = reference {
        let (m, p) = mse_psnr(image, r)?;
        mse_255 = Some(m);
        psnr_db = Some(p);
        ssim = Some(ssim_index(image, r)?);
    }
    Ok(ImageMetrics {
        id: id.to_string(),
        mse_255,
        psnr_db,
        ssim,
        uiqm: uiqm(image)?,
        uciqe: uciqe(image),
    })
}

/// Scores every input in parallel; records keep input order. Unreadable or
/// mismatched images become failures rather than aborting the run.
pub fn evaluate_dataset(inputs: &[EvalInput], with_reference: bool) -> Result<MetricReport> {
    if inputs.is_empty() {
        return Err(Error::Manifest("nothing to evaluate".into()));
    }
    let results: Vec<Result<ImageMetrics>> = inputs
        .par_iter()
        .map(|inp| {
            let image = load_image(&inp.image)?;
            let reference = match (&inp.reference, with_reference) {
                (Some(p), true) => Some(load_image(p)?),
                (None, true) => {
                    return Err(Error::Manifest(format!("`{}` has no reference image", inp.id)))
                }
                _ => None,
            };
            image_metrics(&inp.id, &image, reference.as_ref())
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (inp, r) in inputs.iter().zip(results) {
        match r {
            Ok(m) => records.push(m),
            Err(e) => failures.push(Failure { id: inp.id.clone(), error: e.to_string() }),
        }
    }
    Ok(MetricReport::from_records(records, failures))
}

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

/// Per-channel counts of 8-bit intensities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram {
    pub counts: [[u64; 256]; 3],
}

impl Default for Histogram {
    fn default() -> Self {
        Histogram { counts: [[0; 256]; 3] }
    }
}

impl Histogram {
    pub fn of(img: &ImageTensor) -> Self {
        let mut h = Histogram::default();
        h.add(img);
        h
    }

    /// Values are quantized as `round(v * 255)`.
    pub fn add(&mut self, img: &ImageTensor) {
        for c in 0..CHANNELS {
            for &v in img.channel(c) {
                self.counts[c][(v * 255.0).round() as usize] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &Histogram) {
        for c in 0..CHANNELS {
            for b in 0..256 {
                self.counts[c][b] += other.counts[c][b];
            }
        }
    }

    pub fn totals(&self) -> [u64; 3] {
        self.counts.map(|c| c.iter().sum())
    }

    /// CSV with header `bin,r,g,b` and one row per intensity.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,r,g,b\n");
        for b in 0..256 {
            out.push_str(&format!(
                "{b},{},{},{}\n",
                self.counts[0][b], self.counts[1][b], self.counts[2][b]
            ));
        }
        out
    }
}

pub fn cumulative_histogram(images: &[ImageTensor]) -> Result<Histogram> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("histogram needs at least one image".into()));
    }
    let mut h = Histogram::default();
    for img in images {
        h.add(img);
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: f64) -> ImageTensor {
        ImageTensor::uniform(32, 32, [v; 3]).unwrap()
    }

    #[test]
    fn psnr_at_uniform_offset() {
        let (mse, psnr) = mse_psnr(&gray(0.3), &gray(0.2)).unwrap();
        assert!((mse - 650.25).abs() < 1e-9);
        assert!((psnr - 20.0).abs() < 1e-6);
        assert_eq!(mse_psnr(&gray(0.3), &gray(0.3)).unwrap(), (0.0, PSNR_CAP_DB));
        assert!((psnr_from_mse(260.0) - 23.98).abs() < 0.01);
    }

    #[test]
    fn trim_counts_are_asymmetric() {
        assert_eq!(trim_counts(10), (1, 1));
        assert_eq!(trim_counts(15), (2, 1));
        let (m, kept) = alpha_trimmed_mean(&[5.0, 1.0, 4.0, 2.0, 3.0, 100.0, 0.0, 6.0, 7.0, 8.0, 9.0]);
        // 11 values: drop 2 low (0, 1) and 1 high (100)
        assert_eq!(kept.len(), 8);
        assert!((m - 5.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_images_score_zero() {
        for v in [0.0, 0.5, 1.0] {
            let p = uiqm_parts(&gray(v), UIQM_BLOCK).unwrap();
            assert_eq!(p.uiqm, 0.0, "{v}");
        }
        assert!(uciqe(&gray(0.5)).abs() < 1e-12);
    }

    #[test]
    fn uiqm_needs_two_blocks() {
        let img = ImageTensor::uniform(15, 32, [0.5; 3]).unwrap();
        assert!(matches!(uiqm(&img), Err(Error::ImageTooSmall(_))));
    }

    #[test]
    fn black_and_white_uciqe() {
        let img = ImageTensor::from_fn(16, 16, |_, y, x| ((x + y) % 2) as f64).unwrap();
        let p = uciqe_parts(&img);
        assert!((p.luminance_contrast - 1.0).abs() < 1e-9);
        assert!((p.uciqe - UCIQE_CONTRAST_WEIGHT).abs() < 1e-6);
    }

    #[test]
    fn summary_two_points() {
        let s = Summary::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.count), (2.0, 1.0, 2));
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn histogram_mass() {
        let img = ImageTensor::uniform(4, 5, [128.0 / 255.0; 3]).unwrap();
        let h = Histogram::of(&img);
        assert_eq!(h.counts[1][128], 20);
        assert_eq!(h.totals(), [20; 3]);
        assert_eq!(h.to_csv().lines().count(), 257);
    }
}
