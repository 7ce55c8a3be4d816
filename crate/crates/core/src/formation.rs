//! Underwater image formation models and image reconstruction from components.
//!
//! The revised model separates the attenuation of the direct signal from the
//! backscatter:
//!
//! ```text
//! I = J * T_D + (1 - T_B) * A,   T_D = exp(-beta_D d),  T_B = exp(-beta_B d)
//! ```
//!
//! The alternatives are the single-transmission Koschmieder model, Retinex
//! (`I = R * L`) and Jaffe-McGlamery, which adds a forward-scatter term
//! `(J * T) conv g` with a 9x9 point spread function `g` shared by all channels.
//!
//! Transmission maps are three-channel. Reconstructions are clamped to
//! `[0, 1]`; the pre-clamp values are kept alongside.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image_tensor::{expect_same_size, ImageTensor, CHANNELS};
use crate::tensor::Tensor;

pub const PSF_SIZE: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FormationModel {
    #[default]
    Revised,
    Koschmieder,
    Retinex,
    JaffeMcGlamery,
}

impl FormationModel {
    pub const ALL: [FormationModel; 4] = [
        FormationModel::Revised,
        FormationModel::Koschmieder,
        FormationModel::Retinex,
        FormationModel::JaffeMcGlamery,
    ];

    /// Whether a separate backscatter transmission map is estimated.
    pub fn uses_backscatter(self) -> bool {
        matches!(self, FormationModel::Revised)
    }

    pub fn uses_background_light(self) -> bool {
        !matches!(self, FormationModel::Retinex)
    }

    pub fn uses_psf(self) -> bool {
        matches!(self, FormationModel::JaffeMcGlamery)
    }

    pub fn name(self) -> &'static str {
        match self {
            FormationModel::Revised => "revised",
            FormationModel::Koschmieder => "koschmieder",
            FormationModel::Retinex => "retinex",
            FormationModel::JaffeMcGlamery => "jaffe-mcglamery",
        }
    }
}

impl std::str::FromStr for FormationModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FormationModel::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown formation model `{s}`")))
    }
}

impl std::fmt::Display for FormationModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Latent components of an underwater image.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentSet {
    /// Scene radiance.
    pub j: ImageTensor,
    /// Direct transmission.
    pub t_d: ImageTensor,
    /// Backscatter transmission.
    pub t_b: ImageTensor,
    /// Global background light (RGB).
    pub a: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub image: ImageTensor,
    /// Values before clamping.
    pub raw: Tensor,
    pub clamped: bool,
}

impl Reconstruction {
    fn from_raw(raw: Tensor) -> Result<Self> {
        let (image, clamped) = ImageTensor::from_tensor_clamped(raw.clone())?;
        Ok(Reconstruction { image, raw, clamped })
    }
}

fn check_light(a: &[f64; 3]) -> Result<()> {
    if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(format!("background light {a:?} outside [0, 1]")));
    }
    Ok(())
}

fn combine(
    j: &ImageTensor,
    t_d: &ImageTensor,
    t_b: &ImageTensor,
    a: &[f64; 3],
) -> Tensor {
    let plane = j.pixels();
    Tensor::from_fn(&[CHANNELS, j.height(), j.width()], |i| {
        let c = i / plane;
        j.data()[i] * t_d.data()[i] + (1.0 - t_b.data()[i]) * a[c]
    })
}

/// `I' = J T_D + (1 - T_B) A`.
pub fn reconstruct_revised(c: &ComponentSet) -> Result<Reconstruction> {
    expect_same_size("reconstruct_revised", &c.j, &c.t_d)?;
    expect_same_size("reconstruct_revised", &c.j, &c.t_b)?;
    check_light(&c.a)?;
    Reconstruction::from_raw(combine(&c.j, &c.t_d, &c.t_b, &c.a))
}

/// `I = J T + (1 - T) A`.
pub fn reconstruct_koschmieder(j: &ImageTensor, t: &ImageTensor, a: [f64; 3]) -> Result<Reconstruction> {
    expect_same_size("reconstruct_koschmieder", j, t)?;
    check_light(&a)?;
    Reconstruction::from_raw(combine(j, t, t, &a))
}

/// `I = R L`.
pub fn reconstruct_retinex(r: &ImageTensor, l: &ImageTensor) -> Result<Reconstruction> {
    expect_same_size("reconstruct_retinex", r, l)?;
    let raw = Tensor::new(
        r.tensor().shape().to_vec(),
        r.data().iter().zip(l.data()).map(|(a, b)| a * b).collect(),
    )?;
    Reconstruction::from_raw(raw)
}

/// `I = J T + (1 - T) A + (J T) conv g`, zero-padded "same" correlation with
/// a single `g` applied to every channel.
pub fn reconstruct_jaffe(j: &ImageTensor, t: &ImageTensor, a: [f64; 3], psf: &Tensor) -> Result<Reconstruction> {
    expect_same_size("reconstruct_jaffe", j, t)?;
    check_light(&a)?;
    let mut g = Graph::new();
    let vars = ComponentVars {
        j: g.constant(j.tensor().clone())?,
        t_d: g.constant(t.tensor().clone())?,
        t_b: None,
        a: Some(light_var(&mut g, a, j.height(), j.width())?),
        psf: Some(g.constant(psf.clone())?),
    };
    let out = reconstruct_on_graph(&mut g, FormationModel::JaffeMcGlamery, &vars)?;
    Reconstruction::from_raw(g.value(out).clone())
}

/// Components as graph nodes. `t_d` doubles as the unified transmission
/// (Koschmieder, Jaffe-McGlamery) and the illumination (Retinex).
#[derive(Clone, Copy, Debug)]
pub struct ComponentVars {
    pub j: Var,
    pub t_d: Var,
    pub t_b: Option<Var>,
    /// Background light expanded to `[3, H, W]`.
    pub a: Option<Var>,
    /// `[9, 9]` point spread function.
    pub psf: Option<Var>,
}

/// Background light as a detached `[3, H, W]` constant.
pub fn light_var(g: &mut Graph, a: [f64; 3], h: usize, w: usize) -> Result<Var> {
    let v = g.constant(Tensor::new(vec![CHANNELS], a.to_vec())?)?;
    g.expand_channels(v, h, w)
}

/// Builds the pre-clamp reconstruction for `model` on the graph.
pub fn reconstruct_on_graph(g: &mut Graph, model: FormationModel, c: &ComponentVars) -> Result<Var> {
    let missing = |what: &str| Error::InvalidArgument(format!("{model} reconstruction needs {what}"));
    match model {
        FormationModel::Retinex => g.mul(c.j, c.t_d),
        FormationModel::Revised | FormationModel::Koschmieder | FormationModel::JaffeMcGlamery => {
            let a = c.a.ok_or_else(|| missing("background light"))?;
            let t_b = match model {
                FormationModel::Revised => c.t_b.ok_or_else(|| missing("a backscatter map"))?,
                _ => c.t_d,
            };
            let direct = g.mul(c.j, c.t_d)?;
            let neg = g.neg(t_b);
            let veil = g.add_scalar(neg, 1.0);
            let veil = g.mul(veil, a)?;
            let base = g.add(direct, veil)?;
            if model != FormationModel::JaffeMcGlamery {
                return Ok(base);
            }
            let psf = c.psf.ok_or_else(|| missing("a point spread function"))?;
            if g.shape(psf) != [PSF_SIZE, PSF_SIZE] {
                return Err(Error::shape("reconstruct_jaffe", format!("psf {:?}", g.shape(psf))));
            }
            let scatter = g.depthwise_conv2d(direct, psf, PSF_SIZE / 2)?;
            g.add(base, scatter)
        }
    }
}

/// A degraded image synthesized from known components.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub image: ImageTensor,
    /// Degraded values before clamping.
    pub raw: Tensor,
    pub components: ComponentSet,
}

/// Degrades `j` through the revised model with per-channel coefficients
/// and a depth map given row-major as `H x W` values.
pub fn synthesize_degraded(
    j: &ImageTensor,
    depth: &[f64],
    beta_d: [f64; 3],
    beta_b: [f64; 3],
    a: [f64; 3],
) -> Result<Synthesis> {
    let (h, w) = (j.height(), j.width());
    if depth.len() != h * w {
        return Err(Error::shape("synthesize_degraded", format!("depth has {} values for {h}x{w}", depth.len())));
    }
    if depth.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::InvalidArgument("depth must be finite and non-negative".into()));
    }
    if beta_d.iter().chain(&beta_b).any(|b| !(b.is_finite() && *b > 0.0)) {
        return Err(Error::InvalidArgument("attenuation coefficients must be positive".into()));
    }
    check_light(&a)?;
    let t_d = ImageTensor::from_fn(h, w, |c, y, x| (-beta_d[c] * depth[y * w + x]).exp())?;
    let t_b = ImageTensor::from_fn(h, w, |c, y, x| (-beta_b[c] * depth[y * w + x]).exp())?;
    let raw = combine(j, &t_d, &t_b, &a);
    let (image, _) = ImageTensor::from_tensor_clamped(raw.clone())?;
    Ok(Synthesis {
        image,
        raw,
        components: ComponentSet { j: j.clone(), t_d, t_b, a },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uni(v: f64) -> ImageTensor {
        ImageTensor::uniform(4, 5, [v; 3]).unwrap()
    }

    #[test]
    fn full_transmission_returns_radiance() {
        let c = ComponentSet { j: uni(0.5), t_d: uni(1.0), t_b: uni(1.0), a: [0.3, 0.9, 0.1] };
        let r = reconstruct_revised(&c).unwrap();
        assert!(r.image.data().iter().all(|&v| v == 0.5));
        assert!(!r.clamped);
    }

    #[test]
    fn zero_transmission_returns_light() {
        let a = [0.2, 0.6, 0.8];
        let c = ComponentSet { j: uni(0.7), t_d: uni(0.0), t_b: uni(0.0), a };
        let r = reconstruct_revised(&c).unwrap();
        for ch in 0..3 {
            assert!(r.image.channel(ch).iter().all(|&v| v == a[ch]));
        }
    }

    #[test]
    fn revised_direct_evaluation() {
        let c = ComponentSet { j: uni(0.5), t_d: uni(0.5), t_b: uni(0.5), a: [0.8; 3] };
        let r = reconstruct_revised(&c).unwrap();
        assert!(r.image.data().iter().all(|&v| (v - 0.65).abs() < 1e-15));
    }

    #[test]
    fn koschmieder_cases() {
        let r = reconstruct_koschmieder(&uni(0.2), &uni(0.25), [0.6; 3]).unwrap();
        assert!(r.image.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let j = ImageTensor::from_fn(4, 5, |c, y, x| ((c + y + x) % 7) as f64 / 7.0).unwrap();
        let r = reconstruct_koschmieder(&j, &uni(1.0), [0.4; 3]).unwrap();
        assert_eq!(r.image, j);
    }

    #[test]
    fn retinex_cases() {
        let r = reconstruct_retinex(&uni(0.5), &uni(0.5)).unwrap();
        assert!(r.image.data().iter().all(|&v| v == 0.25));
        let j = ImageTensor::from_fn(4, 5, |c, y, x| ((c + y * x) % 5) as f64 / 5.0).unwrap();
        assert_eq!(reconstruct_retinex(&j, &uni(1.0)).unwrap().image, j);
        assert!(reconstruct_retinex(&uni(0.0), &j).unwrap().image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jaffe_delta_psf_doubles_direct_term() {
        let j = ImageTensor::from_fn(6, 6, |c, y, x| ((c * 3 + y * 2 + x) % 9) as f64 / 9.0).unwrap();
        let t = ImageTensor::from_fn(6, 6, |_, y, x| 0.2 + 0.1 * ((y + x) % 4) as f64).unwrap();
        let a = [0.3, 0.5, 0.7];
        let mut psf = Tensor::zeros(&[9, 9]);
        psf.data_mut()[4 * 9 + 4] = 1.0;
        let r = reconstruct_jaffe(&j, &t, a, &psf).unwrap();
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    let (jv, tv) = (j.get(c, y, x), t.get(c, y, x));
                    let want = 2.0 * jv * tv + (1.0 - tv) * a[c];
                    let got = r.raw.data()[(c * 6 + y) * 6 + x];
                    assert!((got - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn synthesis_direct_evaluation() {
        let j = uni(0.4);
        let ln2 = std::f64::consts::LN_2;
        let s = synthesize_degraded(&j, &[1.0; 20], [ln2; 3], [ln2; 3], [0.8; 3]).unwrap();
        assert!(s.components.t_d.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(s.image.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
    }

    #[test]
    fn synthesis_depth_extremes() {
        let j = ImageTensor::from_fn(4, 5, |c, y, x| ((c + 2 * y + x) % 6) as f64 / 6.0).unwrap();
        let a = [0.1, 0.5, 0.9];
        let near = synthesize_degraded(&j, &[0.0; 20], [0.5; 3], [0.3; 3], a).unwrap();
        assert_eq!(near.image, j);
        let far = synthesize_degraded(&j, &[1e6; 20], [0.5; 3], [0.3; 3], a).unwrap();
        for c in 0..3 {
            assert!(far.image.channel(c).iter().all(|&v| v == a[c]));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let c = ComponentSet {
            j: uni(0.5),
            t_d: ImageTensor::uniform(3, 3, [0.5; 3]).unwrap(),
            t_b: uni(0.5),
            a: [0.5; 3],
        };
        assert!(matches!(reconstruct_revised(&c), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn model_names_round_trip() {
        for m in FormationModel::ALL {
            assert_eq!(m.name().parse::<FormationModel>().unwrap(), m);
        }
        assert!("beer-lambert".parse::<FormationModel>().is_err());
    }
}
