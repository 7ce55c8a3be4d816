//! Closed-form global background light estimation.
//!
//! Statistics are taken per channel over the middle 80% of pixels by rank.
//! Green and blue use a linear regression on mean and standard deviation,
//! red a logistic curve of the median; each estimate is clamped to
//! `[5, 250]` on the 0-255 scale.

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;

pub const TRIM_FRACTION: f64 = 0.1;
pub const MIN_PIXELS: usize = 10;
pub const LIGHT_MIN: f64 = 5.0;
pub const LIGHT_MAX: f64 = 250.0;

/// Regression coefficients for the green and blue channels.
const GB_AVG: f64 = 1.13;
const GB_STD: f64 = 1.11;
const GB_OFFSET: f64 = -25.6;

/// Logistic curve for the red channel.
const R_CEIL: f64 = 140.0;
const R_SCALE: f64 = 14.4;
const R_RATE: f64 = 0.034;

/// Trimmed statistics of one channel on the 0-255 scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub avg: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
}

/// Sorts the intensities and drops `floor(0.1 n)` values from each end.
pub fn trimmed_stats(channel: &[f64]) -> Result<ChannelStats> {
    let n = channel.len();
    if n < MIN_PIXELS {
        return Err(Error::ImageTooSmall(format!(
            "background light needs at least {MIN_PIXELS} pixels, got {n}"
        )));
    }
    if channel.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("trimmed_stats"));
    }
    let mut sorted = channel.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut = (TRIM_FRACTION * n as f64).floor() as usize;
    let kept = &sorted[cut..n - cut];
    let m = kept.len() as f64;
    let avg = kept.iter().sum::<f64>() / m;
    let var = kept.iter().map(|v| (v - avg) * (v - avg)).sum::<f64>() / m;
    let mid = kept.len() / 2;
    let median = if kept.len() % 2 == 1 {
        kept[mid]
    } else {
        0.5 * (kept[mid - 1] + kept[mid])
    };
    Ok(ChannelStats { avg, std: var.sqrt(), median })
}

/// Green/blue estimate before clamping.
pub fn estimate_gb(stats: &ChannelStats) -> f64 {
    GB_AVG * stats.avg + GB_STD * stats.std + GB_OFFSET
}

/// Red estimate from the trimmed median.
pub fn estimate_r(stats: &ChannelStats) -> f64 {
    R_CEIL / (1.0 + R_SCALE * (-R_RATE * stats.median).exp())
}

pub fn clamp_light(raw: f64) -> f64 {
    raw.clamp(LIGHT_MIN, LIGHT_MAX)
}

/// Per-channel estimates on the 0-255 scale, before and after clamping.
#[derive(Clone, Copy, Debug)]
pub struct LightEstimate {
    pub stats: [ChannelStats; 3],
    pub raw: [f64; 3],
    pub clamped: [f64; 3],
}

impl LightEstimate {
    /// Background light on the unit scale.
    pub fn unit(&self) -> [f64; 3] {
        self.clamped.map(|v| v / 255.0)
    }
}

pub fn estimate_background_light_detailed(image: &ImageTensor) -> Result<LightEstimate> {
    let mut stats = [ChannelStats { avg: 0.0, std: 0.0, median: 0.0 }; 3];
    for (c, s) in stats.iter_mut().enumerate() {
        let scaled: Vec<f64> = image.channel(c).iter().map(|v| v * 255.0).collect();
        *s = trimmed_stats(&scaled)?;
    }
    let raw = [estimate_r(&stats[0]), estimate_gb(&stats[1]), estimate_gb(&stats[2])];
    Ok(LightEstimate { stats, raw, clamped: raw.map(clamp_light) })
}

/// Background light `A` on the unit scale, each channel in `[5/255, 250/255]`.
pub fn estimate_background_light(image: &ImageTensor) -> Result<[f64; 3]> {
    Ok(estimate_background_light_detailed(image)?.unit())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel() {
        let s = trimmed_stats(&[100.0; 37]).unwrap();
        assert_eq!(s, ChannelStats { avg: 100.0, std: 0.0, median: 100.0 });
    }

    #[test]
    fn ten_pixel_trim() {
        let v: Vec<f64> = (0..10).map(|i| 10.0 * i as f64).collect();
        let s = trimmed_stats(&v).unwrap();
        assert!((s.avg - 45.0).abs() < 1e-12);
        assert!((s.median - 45.0).abs() < 1e-12);
        // population std of 10..=80 step 10
        let want = (v[1..9].iter().map(|x| (x - 45.0) * (x - 45.0)).sum::<f64>() / 8.0).sqrt();
        assert!((s.std - want).abs() < 1e-12);
    }

    #[test]
    fn too_few_pixels() {
        assert!(matches!(trimmed_stats(&[1.0; 9]), Err(Error::ImageTooSmall(_))));
    }

    #[test]
    fn regression_values() {
        let s = |avg, std| ChannelStats { avg, std, median: 0.0 };
        assert!((estimate_gb(&s(100.0, 50.0)) - 142.9).abs() < 1e-9);
        assert!((estimate_gb(&s(0.0, 0.0)) + 25.6).abs() < 1e-12);
        assert!(estimate_gb(&s(25.6 / 1.13, 0.0)).abs() < 1e-12);
    }

    #[test]
    fn red_curve_values() {
        let s = |median| ChannelStats { avg: 0.0, std: 0.0, median };
        assert!((estimate_r(&s(0.0)) - 140.0 / 15.4).abs() < 1e-9);
        assert!((estimate_r(&s(1e4)) - 140.0).abs() < 1e-6);
        let want = 140.0 / (1.0 + 14.4 * (-3.4f64).exp());
        assert!((estimate_r(&s(100.0)) - want).abs() < 1e-12);
        assert!((want - 94.56).abs() < 0.01);
    }

    #[test]
    fn clamp_bounds() {
        assert_eq!(clamp_light(300.0), 250.0);
        assert_eq!(clamp_light(-25.6), 5.0);
        let black = ImageTensor::uniform(8, 8, [0.0; 3]).unwrap();
        let e = estimate_background_light_detailed(&black).unwrap();
        assert_eq!(e.clamped[1], 5.0);
        assert_eq!(e.clamped[2], 5.0);
        let white = ImageTensor::uniform(8, 8, [1.0; 3]).unwrap();
        let e = estimate_background_light_detailed(&white).unwrap();
        assert_eq!(e.clamped[1], 250.0);
        assert_eq!(e.clamped[2], 250.0);
    }
}
