//! Image files, dataset manifests and run configuration.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formation::FormationModel;
use crate::image_tensor::{ImageTensor, CHANNELS};
use crate::losses::LossWeights;
use crate::nets::{JNetConfig, ModelConfig};
use crate::trainer::{AdamConfig, TrainConfig};

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

fn unsupported(path: &Path, reason: impl Into<String>) -> Error {
    Error::UnsupportedImage {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a binary PPM (P6, maxval 255) or an 8-bit PNG. The format is taken
/// from the file contents, not the extension.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|reason| unsupported(path, reason))
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor, String> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes)
    } else {
        Err("not a binary PPM (P6) or PNG file".into())
    }
}

fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<ImageTensor, String> {
    let plane = width * height;
    let mut data = vec![0.0; CHANNELS * plane];
    for (i, px) in rgb.chunks_exact(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(height, width, data).map_err(|e| e.to_string())
}

/// Parses a P6 header and raster. Comments (`#` to end of line) are allowed
/// between header fields.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor, String> {
    let mut pos = 2;
    let mut field = || -> Result<usize, String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated PPM header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "malformed PPM header".to_string())
    };
    let width = field()?;
    let height = field()?;
    let maxval = field()?;
    if maxval != 255 {
        return Err(format!("PPM maxval {maxval} is not supported, only 255"));
    }
    if width == 0 || height == 0 {
        return Err("PPM has zero size".into());
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed PPM header".into());
    }
    let raster = &bytes[pos + 1..];
    let need = width * height * CHANNELS;
    if raster.len() < need {
        return Err(format!("PPM raster has {} bytes, expected {need}", raster.len()));
    }
    from_rgb8(width, height, &raster[..need])
}

fn decode_png(bytes: &[u8]) -> Result<ImageTensor, String> {
    use image::DynamicImage;
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| e.to_string())?;
    let rgb = match img {
        DynamicImage::ImageRgb8(i) => i,
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => img.to_rgb8(),
        other => return Err(format!("unsupported PNG pixel format {:?}, expected 8-bit", other.color())),
    };
    from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
}

/// `round(v * 255)` with halves away from zero, clamped to `[0, 255]`.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn to_rgb8(img: &ImageTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.data().len());
    for i in 0..img.pixels() {
        for c in 0..CHANNELS {
            out.push(quantize(img.channel(c)[i]));
        }
    }
    out
}

pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(to_rgb8(img));
    out
}

/// Writes `.ppm` or `.png` by extension, creating parent directories.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("ppm") => encode_ppm(img),
        Some("png") => {
            let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, to_rgb8(img))
                .expect("buffer matches dimensions");
            let mut out = std::io::Cursor::new(Vec::new());
            buf.write_to(&mut out, image::ImageFormat::Png)
                .map_err(|e| unsupported(path, e.to_string()))?;
            out.into_inner()
        }
        _ => return Err(unsupported(path, "output extension must be .ppm or .png")),
    };
    write_file(path, &bytes)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling with corner pixels aligned. A target extent of 1
/// samples the center of the source.
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("resize target {height}x{width} must be positive")));
    }
    let (h, w) = (img.height(), img.width());
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = if out == 1 {
            (inp - 1) as f64 / 2.0
        } else {
            i as f64 * (inp - 1) as f64 / (out - 1) as f64
        };
        let i0 = (s.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..height).map(|y| coord(y, height, h)).collect();
    let xs: Vec<_> = (0..width).map(|x| coord(x, width, w)).collect();
    ImageTensor::from_fn(height, width, |c, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let p = img.channel(c);
        let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
        let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
        (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0)
    })
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub raw_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<PathBuf>,
}

/// Dataset listing, one JSON object per line. Relative paths resolve
/// against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::Manifest(format!("line {}: {err}", n + 1)))?;
            e.raw_path = base.join(&e.raw_path);
            e.label_path = e.label_path.map(|p| base.join(p));
            entries.push(e);
        }
        let m = DatasetManifest { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.id.is_empty() || e.raw_path.as_os_str().is_empty() {
                return Err(Error::Manifest("entries need a nonempty id and raw_path".into()));
            }
            if e.label_path.as_ref().is_some_and(|p| p.as_os_str().is_empty()) {
                return Err(Error::Manifest(format!("`{}` has an empty label_path", e.id)));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id `{}`", e.id)));
            }
        }
        let labelled = self.entries.iter().filter(|e| e.label_path.is_some()).count();
        if labelled != 0 && labelled != self.entries.len() {
            return Err(Error::Manifest(
                "either every entry or no entry may have a label_path".into(),
            ));
        }
        Ok(())
    }

    pub fn is_paired(&self) -> bool {
        self.entries.first().is_some_and(|e| e.label_path.is_some())
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub jnet: JNetConfig,
    pub tnet_channels: usize,
    pub formation: FormationModel,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            jnet: m.jnet,
            tnet_channels: m.tnet_channels,
            formation: m.formation,
        }
    }
}

/// TOML run configuration. Every field has a default and unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Square working resolution.
    pub size: usize,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub steps: usize,
    pub batch_size: usize,
    pub model: ModelSection,
    pub loss: LossWeights,
    pub optim: AdamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            size: 256,
            out: PathBuf::from("out"),
            checkpoint: None,
            manifest: None,
            steps: 200,
            batch_size: 1,
            model: ModelSection::default(),
            loss: LossWeights::default(),
            optim: AdamConfig::default(),
        }
    }
}

/// Values given on the command line; `None` leaves the file or default.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub size: Option<usize>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub formation: Option<FormationModel>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Defaults, then the file (if any), then `over`.
    pub fn resolve(file: Option<&Path>, over: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(over);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, over: &Overrides) {
        if let Some(v) = over.seed {
            self.seed = v;
        }
        if let Some(v) = over.size {
            self.size = v;
        }
        if let Some(v) = &over.out {
            self.out = v.clone();
        }
        if let Some(v) = &over.checkpoint {
            self.checkpoint = Some(v.clone());
        }
        if let Some(v) = &over.manifest {
            self.manifest = Some(v.clone());
        }
        if let Some(v) = over.steps {
            self.steps = v;
        }
        if let Some(v) = over.lr {
            self.optim.lr = v;
        }
        if let Some(v) = over.formation {
            self.model.formation = v;
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            jnet: self.model.jnet.clone(),
            tnet_channels: self.model.tnet_channels,
            height: self.size,
            width: self.size,
            formation: self.model.formation,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model_config(),
            loss: self.loss.clone(),
            optim: self.optim.clone(),
            batch_size: self.batch_size,
            steps: self.steps,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_ppm() {
        let mut bytes = b"P6 1 1 255\n".to_vec();
        bytes.extend([0xFF, 0xFF, 0xFF]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn ppm_header_comments() {
        let mut bytes = b"P6\n# made by hand\n2 1\n# depth\n255\n".to_vec();
        bytes.extend([0, 51, 102, 153, 204, 255]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.get(0, 0, 1), 153.0 / 255.0);
    }

    #[test]
    fn ppm_rejects_other_depths_and_truncation() {
        let mut bytes = b"P6 1 1 65535\n".to_vec();
        bytes.extend([0; 6]);
        assert!(decode_ppm(&bytes).unwrap_err().contains("maxval"));
        assert!(decode_ppm(b"P6 2 2 255\n\x00\x00\x00").is_err());
        assert!(decode_image(b"GIF89a").is_err());
    }

    #[test]
    fn quantize_rounds_half_away() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(1.5), 255);
        assert_eq!(quantize(-0.2), 0);
    }

    #[test]
    fn resize_hand_values() {
        let img = ImageTensor::from_fn(2, 2, |_, _, x| x as f64).unwrap();
        let r = resize_bilinear(&img, 2, 4).unwrap();
        for y in 0..2 {
            for (x, want) in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].iter().enumerate() {
                assert!((r.get(0, y, x) - want).abs() < 1e-12);
            }
        }
        assert_eq!(resize_bilinear(&img, 2, 2).unwrap(), img);
        let one = resize_bilinear(&img, 1, 1).unwrap();
        assert!((one.get(1, 0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn manifest_rules() {
        let base = Path::new("/data");
        let m = DatasetManifest::parse(
            "{\"id\":\"a\",\"raw_path\":\"raw/a.ppm\",\"label_path\":\"gt/a.ppm\"}\n\n",
            base,
        )
        .unwrap();
        assert_eq!(m.entries[0].raw_path, Path::new("/data/raw/a.ppm"));
        assert!(m.is_paired());
        let dup = "{\"id\":\"a\",\"raw_path\":\"x\"}\n{\"id\":\"a\",\"raw_path\":\"y\"}";
        assert!(DatasetManifest::parse(dup, base).is_err());
        let mixed = "{\"id\":\"a\",\"raw_path\":\"x\",\"label_path\":\"z\"}\n{\"id\":\"b\",\"raw_path\":\"y\"}";
        assert!(DatasetManifest::parse(mixed, base).is_err());
        assert!(DatasetManifest::parse("{\"id\":\"a\",\"raw\":\"x\"}", base).is_err());
    }

    #[test]
    fn config_precedence() {
        let file = "seed = 7\nsize = 64\n[optim]\nlr = 0.01\n";
        let mut cfg = RunConfig::parse(file).unwrap();
        assert_eq!((cfg.seed, cfg.size, cfg.optim.lr), (7, 64, 0.01));
        assert_eq!(cfg.steps, RunConfig::default().steps);
        cfg.apply(&Overrides {
            seed: Some(9),
            ..Default::default()
        });
        assert_eq!((cfg.seed, cfg.size), (9, 64));
        assert!(RunConfig::parse("sede = 1").is_err());
        assert!(RunConfig::parse("[model]\nformation = \"koschmieder\"\n").is_ok());
    }
}
