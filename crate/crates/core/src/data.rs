//! Image and tensor I/O, preprocessing and the synthetic phantom corpus.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Example;
use crate::rng::{derive_seed, CounterRng};
use crate::tensor::Tensor;

/// An image in `[0, 1]` with `C ∈ {1, 3}` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: Tensor,
    pub label: usize,
    pub source_id: String,
}

impl ImageSample {
    pub fn new(image: Tensor, label: usize, source_id: impl Into<String>) -> Result<Self> {
        match image.dims() {
            [1 | 3, _, _] => {}
            d => {
                return Err(Error::invalid(format!(
                    "images must be [1|3, H, W], got {d:?}"
                )))
            }
        }
        Ok(ImageSample {
            image: image.clamp(0.0, 1.0),
            label,
            source_id: source_id.into(),
        })
    }
}

// ---------------------------------------------------------------------------
// PGM / PPM

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.display().to_string(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len()
                        && self.bytes[self.pos] != b'\n'
                        && self.bytes[self.pos] != b'\r'
                    {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("{what} out of range")))
    }
}

/// Decodes a binary PGM (`P5`) or PPM (`P6`) with maxval 255 into `[C, H, W]` in `[0, 1]`.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut h = Header {
        bytes,
        pos: 0,
        path,
    };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(h.err("bad magic, expected P5 or P6")),
    };
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(h.err("zero image dimension"));
    }
    if maxval != 255 {
        return Err(h.err(format!("maxval {maxval} unsupported, expected 255")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(h.err("expected a single whitespace byte before the raster")),
    }
    let need = width * height * channels;
    let raster = &bytes[h.pos..];
    if raster.len() < need {
        return Err(h.err(format!(
            "truncated raster: expected {need} bytes, found {}",
            raster.len()
        )));
    }
    let mut data = vec![0f32; need];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                data[(c * height + y) * width + x] =
                    raster[(y * width + x) * channels + c] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::from_parts(vec![channels, height, width], data))
}

/// Encodes `[1|3, H, W]` values in `[0, 1]` with round-half-up quantization.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match image.dims() {
        [c @ (1 | 3), h, w] => (*c, *h, *w),
        [h, w] => (1, *h, *w),
        d => {
            return Err(Error::invalid(format!(
                "cannot encode dims {d:?} as PGM/PPM"
            )))
        }
    };
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = d[(ch * h + y) * w + x].clamp(0.0, 1.0) as f64;
                out.push((v * 255.0 + 0.5).floor().min(255.0) as u8);
            }
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<ImageSample> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let image = decode_pnm(&bytes, path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ImageSample::new(image, 0, id)
}

pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_pnm(image)?).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// MPFT tensor container

const MPFT_MAGIC: &[u8; 4] = b"MPFT";
const MPFT_VERSION: u8 = 1;
const MPFT_F32: u8 = 0;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if !t.is_finite() {
        return Err(Error::invalid("refusing to serialize a non-finite tensor"));
    }
    let mut out = Vec::with_capacity(12 + 4 * t.dims().len() + 4 * t.len());
    out.extend_from_slice(MPFT_MAGIC);
    out.push(MPFT_VERSION);
    out.push(MPFT_F32);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let perr = |offset: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        offset,
        msg,
    };
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != MPFT_MAGIC {
        return Err(perr(0, "bad magic, expected MPFT".into()));
    }
    if bytes[4] != MPFT_VERSION {
        return Err(perr(4, format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != MPFT_F32 {
        return Err(perr(5, format!("unsupported dtype {}", bytes[5])));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let ndim = u32_at(8);
    let header = 12 + 4 * ndim;
    if ndim == 0 {
        return Err(perr(8, "ndim must be >= 1".into()));
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndim).map(|i| u32_at(12 + 4 * i)).collect();
    let n: usize = dims.iter().product();
    let expected = header + 4 * n;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Bilinear resize with half-pixel centres: `s = (d + 0.5)·in/out − 0.5`,
/// clamped to the valid source range.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match image.dims() {
        [c, h, w] => (*c, *h, *w),
        d => {
            return Err(Error::invalid(format!(
                "resize expects [C, H, W], got {d:?}"
            )))
        }
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "target size must be positive, got {out_h}×{out_w}"
        )));
    }
    let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|d| {
                let s =
                    ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * w + x0] as f64 * (1.0 - fx) + p[y0 * w + x1] as f64 * fx;
                let bot = p[y1 * w + x0] as f64 * (1.0 - fx) + p[y1 * w + x1] as f64 * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Per-channel affine normalization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::invalid("mean and std need one entry per channel"));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!(
                "std entries must be positive, got {std:?}"
            )));
        }
        Ok(Normalization { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Two-pass per-channel mean and population standard deviation.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let images: Vec<&Tensor> = images.into_iter().collect();
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("no images to compute statistics from"))?;
        let c = first.dims()[0];
        let mut sum = vec![0f64; c];
        let mut count = vec![0usize; c];
        for t in &images {
            if t.dims()[0] != c {
                return Err(Error::shape(
                    "normalization statistics",
                    first.dims(),
                    t.dims(),
                ));
            }
            let hw = t.len() / c;
            for (ch, chunk) in t.data().chunks(hw).enumerate() {
                sum[ch] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                count[ch] += hw;
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, n)| s / *n as f64).collect();
        let mut ss = vec![0f64; c];
        for t in &images {
            let hw = t.len() / c;
            for (ch, chunk) in t.data().chunks(hw).enumerate() {
                ss[ch] += chunk
                    .iter()
                    .map(|&v| (v as f64 - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let std: Vec<f32> = ss
            .iter()
            .zip(&count)
            .map(|(s, n)| (s / *n as f64).sqrt().max(1e-6) as f32)
            .collect();
        Normalization::new(mean.into_iter().map(|m| m as f32).collect(), std)
    }

    fn check(&self, image: &Tensor) -> Result<usize> {
        let c = image.dims()[0];
        if image.dims().len() != 3 || c != self.mean.len() {
            return Err(Error::shape("normalize", image.dims(), &[self.mean.len()]));
        }
        Ok(image.len() / c)
    }

    /// Computed as `(x − mean) · (1/std)` in f32, the same arithmetic as the
    /// in-graph version built from [`Normalization::maps`].
    pub fn normalize(&self, image: &Tensor) -> Result<Tensor> {
        let hw = self.check(image)?;
        let inv = self.inv_std();
        let data = image
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i / hw]) * inv[i / hw])
            .collect();
        Tensor::new(image.dims().to_vec(), data)
    }

    pub fn denormalize(&self, image: &Tensor) -> Result<Tensor> {
        let hw = self.check(image)?;
        let data = image
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v as f64 * self.std[i / hw] as f64 + self.mean[i / hw] as f64) as f32)
            .collect();
        Tensor::new(image.dims().to_vec(), data)
    }

    /// Channel-expanded `(mean, 1/std)` maps for an `[C, H, W]` grid.
    pub fn maps(&self, h: usize, w: usize) -> (Tensor, Tensor) {
        let c = self.mean.len();
        let expand = |v: &dyn Fn(usize) -> f32| {
            let mut out = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                out.extend(std::iter::repeat_n(v(ch), h * w));
            }
            Tensor::from_parts(vec![c, h, w], out)
        };
        let inv = self.inv_std();
        (expand(&|ch| self.mean[ch]), expand(&|ch| inv[ch]))
    }

    fn inv_std(&self) -> Vec<f32> {
        self.std.iter().map(|&s| (1.0 / s as f64) as f32).collect()
    }
}

/// Replicates a grayscale image to three channels, or averages RGB to one.
pub fn convert_channels(image: &Tensor, channels: usize) -> Result<Tensor> {
    let (c, h, w) = image.chw();
    match (c, channels) {
        (a, b) if a == b => Ok(image.clone()),
        (1, 3) => {
            let mut v = image.data().to_vec();
            v.extend_from_slice(image.data());
            v.extend_from_slice(image.data());
            Tensor::new(vec![3, h, w], v)
        }
        (3, 1) => {
            let d = image.data();
            let n = h * w;
            Tensor::new(
                vec![1, h, w],
                (0..n)
                    .map(|i| (d[i] + d[n + i] + d[2 * n + i]) / 3.0)
                    .collect(),
            )
        }
        _ => Err(Error::invalid(format!(
            "cannot convert {c} channels to {channels}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Synthetic phantoms

pub const PHANTOM_CLASSES: [&str; 4] = ["ellipse", "two_ellipses", "ring", "ring_blob"];
pub const PHANTOM_SIZE: usize = 32;

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalized radial coordinate; 1 on the boundary.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        (u * u + v * v).sqrt()
    }
}

/// Soft indicator of `r <= 1` with an edge about one pixel wide.
fn soft_inside(r: f64, scale: f64) -> f64 {
    1.0 / (1.0 + ((r - 1.0) * scale).exp())
}

/// A deterministic 3×32×32 phantom of class `class_id`:
///
/// * 0: one bright ellipse
/// * 1: two bright ellipses, one per half of the image
/// * 2: a ring
/// * 3: a ring with an interior blob
///
/// on a smooth, dim, low-frequency background. Centres, radii, tint and
/// intensities are jittered from `seed`. Class 1 always carries more bright
/// area and edge length than class 0.
pub fn generate_phantom(class_id: usize, seed: u64) -> Result<ImageSample> {
    if class_id >= PHANTOM_CLASSES.len() {
        return Err(Error::invalid(format!(
            "phantom class must be 0..=3, got {class_id}"
        )));
    }
    let n = PHANTOM_SIZE;
    let mut r = CounterRng::new(derive_seed(&[0xFA57, class_id as u64, seed]));
    let base = r.uniform(0.10, 0.20);
    let tint = [
        r.uniform(0.9, 1.1),
        r.uniform(0.9, 1.1),
        r.uniform(0.9, 1.1),
    ];
    let (fx, fy, phase, amp) = (
        r.uniform(0.5, 1.5),
        r.uniform(0.5, 1.5),
        r.uniform(0.0, std::f64::consts::TAU),
        r.uniform(0.02, 0.05),
    );
    let bright = r.uniform(0.65, 0.85);
    let mid = n as f64 / 2.0;
    let mut shapes: Vec<(Ellipse, f64)> = Vec::new();
    let mut rings: Vec<(Ellipse, f64, f64)> = Vec::new();
    let jitter = |r: &mut CounterRng, c: f64, j: f64| c + r.uniform(-j, j);
    match class_id {
        0 => {
            let e = Ellipse {
                cx: jitter(&mut r, mid, 3.0),
                cy: jitter(&mut r, mid, 3.0),
                rx: r.uniform(4.0, 5.5),
                ry: r.uniform(4.0, 5.5),
                angle: r.uniform(0.0, std::f64::consts::PI),
            };
            shapes.push((e, bright));
        }
        1 => {
            for cx in [mid - 7.5, mid + 7.5] {
                let e = Ellipse {
                    cx: jitter(&mut r, cx, 1.0),
                    cy: jitter(&mut r, mid, 5.0),
                    rx: r.uniform(5.0, 6.0),
                    ry: r.uniform(5.0, 6.5),
                    angle: r.uniform(0.0, std::f64::consts::PI),
                };
                shapes.push((e, bright));
            }
        }
        _ => {
            let outer = r.uniform(9.0, 11.0);
            let e = Ellipse {
                cx: jitter(&mut r, mid, 2.0),
                cy: jitter(&mut r, mid, 2.0),
                rx: outer,
                ry: outer * r.uniform(0.85, 1.0),
                angle: r.uniform(0.0, std::f64::consts::PI),
            };
            let thickness = r.uniform(0.25, 0.35);
            if class_id == 3 {
                let blob = Ellipse {
                    cx: e.cx + r.uniform(-1.5, 1.5),
                    cy: e.cy + r.uniform(-1.5, 1.5),
                    rx: r.uniform(2.5, 3.5),
                    ry: r.uniform(2.5, 3.5),
                    angle: 0.0,
                };
                shapes.push((blob, bright * r.uniform(0.8, 1.0)));
            }
            rings.push((e, thickness, bright));
        }
    }
    let mut data = vec![0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let bg = base
                + amp
                    * ((fx * xf / n as f64 * std::f64::consts::TAU + phase).sin()
                        + (fy * yf / n as f64 * std::f64::consts::TAU).cos())
                    * 0.5;
            let mut fg: f64 = 0.0;
            for (e, level) in &shapes {
                fg = fg.max(level * soft_inside(e.radius(xf, yf), e.rx.min(e.ry)));
            }
            for (e, thick, level) in &rings {
                let rr = e.radius(xf, yf);
                let inside = soft_inside(rr, e.rx.min(e.ry))
                    * (1.0 - soft_inside(rr / (1.0 - thick), e.rx.min(e.ry) * (1.0 - thick)));
                fg = fg.max(level * inside);
            }
            let v = bg + fg * (1.0 - bg);
            for ch in 0..3 {
                data[(ch * n + y) * n + x] = (v * tint[ch]).clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImageSample::new(
        Tensor::from_parts(vec![3, n, n], data),
        class_id,
        format!("phantom-c{class_id}-s{seed}"),
    )
}

/// `n` phantoms cycling through the first `classes` classes.
pub fn phantom_corpus(n: usize, classes: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if classes == 0 || classes > PHANTOM_CLASSES.len() {
        return Err(Error::invalid(format!(
            "phantom classes must be 1..=4, got {classes}"
        )));
    }
    (0..n)
        .map(|i| {
            let mut s = generate_phantom(i % classes, derive_seed(&[seed, i as u64]))?;
            s.source_id = format!("{i:05}");
            Ok(s)
        })
        .collect()
}

/// First `train_fraction` of every class goes to train, the rest to test.
pub fn train_test_split(
    samples: &[ImageSample],
    train_fraction: f64,
) -> (Vec<ImageSample>, Vec<ImageSample>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut seen = std::collections::BTreeMap::<usize, (usize, usize)>::new();
    for s in samples {
        seen.entry(s.label).or_default().1 += 1;
    }
    for s in samples {
        let e = seen.get_mut(&s.label).unwrap();
        if (e.0 as f64) < (e.1 as f64 * train_fraction).round() {
            train.push(s.clone());
        } else {
            test.push(s.clone());
        }
        e.0 += 1;
    }
    (train, test)
}

pub fn to_examples(samples: &[ImageSample], num_classes: usize) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            if s.label >= num_classes {
                return Err(Error::invalid(format!(
                    "{}: label {} >= {num_classes} classes",
                    s.source_id, s.label
                )));
            }
            Ok(Example::labeled(s.image.clone(), s.label, num_classes))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset directories: root/<class_name>/<id>.ppm plus root/manifest.json

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub normalization: Normalization,
    pub samples: Vec<ManifestEntry>,
}

pub fn write_dataset(
    root: &Path,
    name: &str,
    class_names: &[String],
    samples: &[ImageSample],
) -> Result<DatasetManifest> {
    let normalization = Normalization::from_images(samples.iter().map(|s| &s.image))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let class = class_names
            .get(s.label)
            .ok_or_else(|| Error::invalid(format!("label {} has no class name", s.label)))?;
        let ext = if s.image.dims()[0] == 1 { "pgm" } else { "ppm" };
        let rel = format!("{class}/{}.{ext}", s.source_id);
        save_image(&s.image, &root.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel,
            label: s.label,
            source_id: s.source_id.clone(),
        });
    }
    let manifest = DatasetManifest {
        name: name.to_string(),
        class_names: class_names.to_vec(),
        normalization,
        samples: entries,
    };
    let path = root.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a dataset directory. Without a manifest, every subdirectory is a
/// class (sorted by name) and every `.pgm`/`.ppm` inside it a sample.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<ImageSample>)> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let manifest_path = root.join("manifest.json");
    let entries_and_names = if manifest_path.exists() {
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        Some(m)
    } else {
        None
    };
    let (name, class_names, entries) = match &entries_and_names {
        Some(m) => (m.name.clone(), m.class_names.clone(), m.samples.clone()),
        None => scan_dataset(root)?,
    };
    let mut samples = Vec::with_capacity(entries.len());
    for e in &entries {
        let mut s = load_image(&root.join(&e.path))?;
        s.label = e.label;
        s.source_id = e.source_id.clone();
        samples.push(s);
    }
    if samples.is_empty() {
        return Err(Error::invalid(format!(
            "dataset {} contains no images",
            root.display()
        )));
    }
    let normalization = match &entries_and_names {
        Some(m) => m.normalization.clone(),
        None => Normalization::from_images(samples.iter().map(|s| &s.image))?,
    };
    Ok((
        DatasetManifest {
            name,
            class_names,
            normalization,
            samples: entries,
        },
        samples,
    ))
}

fn scan_dataset(root: &Path) -> Result<(String, Vec<String>, Vec<ManifestEntry>)> {
    let read_sorted = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let mut class_names = Vec::new();
    let mut entries = Vec::new();
    for dir in read_sorted(root)?.into_iter().filter(|p| p.is_dir()) {
        let class = dir.file_name().unwrap().to_string_lossy().into_owned();
        let label = class_names.len();
        for f in read_sorted(&dir)? {
            let ext = f.extension().map(|e| e.to_string_lossy().to_lowercase());
            if matches!(ext.as_deref(), Some("pgm" | "ppm")) {
                let stem = f.file_stem().unwrap().to_string_lossy().into_owned();
                entries.push(ManifestEntry {
                    path: format!("{class}/{}", f.file_name().unwrap().to_string_lossy()),
                    label,
                    source_id: format!("{class}-{stem}"),
                });
            }
        }
        class_names.push(class);
    }
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((name, class_names, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_bytes_decode_by_hand() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\x80\x40";
        let t = decode_pnm(bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(t.dims(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn ppm_comments_are_ignored() {
        let plain = b"P6\n1 1\n255\n\x01\x02\x03".to_vec();
        let commented = b"P6 # rgb\n# a full comment line\n1\t1 255\n\x01\x02\x03".to_vec();
        assert_eq!(
            decode_pnm(&plain, Path::new("a")).unwrap(),
            decode_pnm(&commented, Path::new("b")).unwrap()
        );
    }

    #[test]
    fn pnm_errors_carry_offsets() {
        let err = decode_pnm(b"P3\n1 1\n255\n", Path::new("f")).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
        let err = decode_pnm(b"P5\n2 2\n65535\n\x00", Path::new("f")).unwrap_err();
        assert!(err.to_string().contains("maxval"));
        let err = decode_pnm(b"P5\n2 2\n255\n\x00\x01", Path::new("f")).unwrap_err();
        match err {
            Error::Parse { offset, msg, .. } => {
                assert_eq!(offset, 11);
                assert!(msg.contains("expected 4"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn pnm_quantization_roundtrip() {
        let s = generate_phantom(3, 1).unwrap();
        let back = decode_pnm(&encode_pnm(&s.image).unwrap(), Path::new("x")).unwrap();
        assert!(back.max_abs_diff(&s.image) <= 1.0 / 510.0 + 1e-7);
        // a second trip is exact
        let again = decode_pnm(&encode_pnm(&back).unwrap(), Path::new("x")).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn mpft_scalar_is_twenty_bytes() {
        let b = encode_tensor(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(b.len(), 20);
        assert_eq!(&b[..4], b"MPFT");
        assert_eq!(&b[16..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn mpft_rejects_damage() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = encode_tensor(&t).unwrap();
        assert_eq!(decode_tensor(&b, Path::new("t")).unwrap(), t);
        match decode_tensor(&b[..b.len() - 2], Path::new("t")).unwrap_err() {
            Error::Truncated { expected, actual } => {
                assert_eq!(expected, b.len());
                assert_eq!(actual, b.len() - 2);
            }
            e => panic!("{e}"),
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad, Path::new("t")).is_err());
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(decode_tensor(&bad, Path::new("t")).is_err());
        let mut bad = b;
        bad[5] = 1;
        assert!(decode_tensor(&bad, Path::new("t")).is_err());
        assert!(encode_tensor(&Tensor::scalar(f32::NAN)).is_err());
    }

    #[test]
    fn resize_half_pixel_oracle() {
        let img = Tensor::new(vec![1, 2, 2], vec![0., 1., 0., 1.]).unwrap();
        let r = resize_bilinear(&img, 2, 4).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resize_identity_and_constants() {
        let s = generate_phantom(0, 4).unwrap().image;
        assert_eq!(resize_bilinear(&s, 32, 32).unwrap(), s);
        let c = Tensor::full(&[3, 5, 7], 0.3);
        let r = resize_bilinear(&c, 11, 2).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
        assert!(resize_bilinear(&c, 0, 2).is_err());
    }

    #[test]
    fn normalization_inverse_and_statistics() {
        let samples = phantom_corpus(12, 4, 0).unwrap();
        let norm = Normalization::from_images(samples.iter().map(|s| &s.image)).unwrap();
        let normed: Vec<Tensor> = samples
            .iter()
            .map(|s| norm.normalize(&s.image).unwrap())
            .collect();
        let stats = Normalization::from_images(normed.iter()).unwrap();
        for c in 0..3 {
            assert!(stats.mean[c].abs() < 1e-4);
            assert!((stats.std[c] - 1.0).abs() < 1e-4);
        }
        let back = norm.denormalize(&normed[0]).unwrap();
        assert!(back.max_abs_diff(&samples[0].image) < 1e-6);
        let id = Normalization::identity(3);
        assert_eq!(id.normalize(&samples[1].image).unwrap(), samples[1].image);
        assert!(Normalization::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn phantoms_are_deterministic_and_in_range() {
        for c in 0..4 {
            let a = generate_phantom(c, 9).unwrap();
            assert_eq!(a, generate_phantom(c, 9).unwrap());
            assert_eq!(a.image.dims(), &[3, 32, 32]);
            assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_ne!(a.image, generate_phantom(c, 10).unwrap().image);
        }
        assert!(generate_phantom(4, 0).is_err());
    }

    #[test]
    fn split_keeps_three_to_one_per_class() {
        let s = phantom_corpus(40, 2, 1).unwrap();
        let (tr, te) = train_test_split(&s, 0.75);
        assert_eq!(tr.len(), 30);
        assert_eq!(te.len(), 10);
        assert_eq!(tr.iter().filter(|s| s.label == 0).count(), 15);
    }
}
