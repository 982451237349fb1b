//! Reconstruction quality: MSE, SSIM, PSNR and attack success rate.
//!
//! All metrics assume a dynamic range of 1. SSIM statistics use population
//! (1/N) moments and are computed per channel, then averaged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimMode {
    #[default]
    Global,
    Windowed(usize),
}

fn check_pair(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, a.dims(), b.dims()));
    }
    if a.is_empty() {
        return Err(Error::invalid(format!("{op} of empty tensors")));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b, "mse")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(1/mse)`; `+∞` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

/// Views `[C, H, W]`, `[H, W]` and `[N]` tensors as channel planes.
fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.dims() {
        [c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        [n] => Ok((1, 1, n)),
        ref d => Err(Error::invalid(format!(
            "ssim expects at most 3 dims, got {d:?}"
        ))),
    }
}

fn ssim_window(a: &[f32], b: &[f32], w: usize, y0: usize, x0: usize, wh: usize, ww: usize) -> f64 {
    let n = (wh * ww) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for y in y0..y0 + wh {
        for x in x0..x0 + ww {
            sa += a[y * w + x] as f64;
            sb += b[y * w + x] as f64;
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for y in y0..y0 + wh {
        for x in x0..x0 + ww {
            let da = a[y * w + x] as f64 - ma;
            let db = b[y * w + x] as f64 - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
        }
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

pub fn ssim(a: &Tensor, b: &Tensor, mode: SsimMode) -> Result<f64> {
    check_pair(a, b, "ssim")?;
    let (c, h, w) = planes(a)?;
    let (wh, ww) = match mode {
        SsimMode::Global => (h, w),
        SsimMode::Windowed(0) => return Err(Error::invalid("ssim window must be positive")),
        SsimMode::Windowed(k) => {
            let (kh, kw) = if h == 1 { (1, k) } else { (k, k) };
            if kh > h || kw > w {
                return Err(Error::invalid(format!(
                    "ssim window {k} exceeds image {h}×{w}"
                )));
            }
            (kh, kw)
        }
    };
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let mut sum = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                sum += ssim_window(pa, pb, w, y0, x0, wh, ww);
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / c as f64)
}

/// Fraction of `values` at or above `threshold`.
pub fn asr(values: &[f64], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "threshold must be in (0, 1], got {threshold}"
        )));
    }
    if values.is_empty() {
        return Err(Error::invalid("asr of an empty list"));
    }
    Ok(values.iter().filter(|&&v| v >= threshold).count() as f64 / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub mse: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub asr: f64,
    pub threshold: f64,
}

impl MetricReport {
    /// Scores `(image_id, truth, reconstruction)` triples.
    pub fn evaluate<'a>(
        pairs: impl IntoIterator<Item = (String, &'a Tensor, &'a Tensor)>,
        threshold: f64,
        mode: SsimMode,
    ) -> Result<Self> {
        let mut per_image = Vec::new();
        for (image_id, truth, recon) in pairs {
            let s = ssim(truth, recon, mode)?;
            per_image.push(ImageMetrics {
                image_id,
                mse: mse(truth, recon)?,
                ssim: s,
                psnr: psnr(truth, recon)?,
                success: s >= threshold,
            });
        }
        let ssims: Vec<f64> = per_image.iter().map(|m| m.ssim).collect();
        Ok(MetricReport {
            asr: asr(&ssims, threshold)?,
            per_image,
            threshold,
        })
    }
}
