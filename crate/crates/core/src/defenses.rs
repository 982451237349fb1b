//! Client-side gradient transformations: additive noise and top-k compression.
//!
//! Noise is drawn per entry over the whole flattened update, parameters in
//! order, from one seeded [`CounterRng`] stream.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flsim::GradientUpdate;
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Noise magnitude, either a raw scale or a level mapped by [`level_to_scale`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseAmount {
    Scale(f64),
    Level(u32),
}

impl NoiseAmount {
    pub fn resolve(self) -> Result<f64> {
        match self {
            NoiseAmount::Scale(s) if s >= 0.0 && s.is_finite() => Ok(s),
            NoiseAmount::Scale(s) => Err(Error::invalid(format!(
                "noise scale must be finite and >= 0, got {s}"
            ))),
            NoiseAmount::Level(l) => level_to_scale(l as i64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DefenseConfig {
    #[default]
    None,
    Laplace {
        amount: NoiseAmount,
    },
    Gaussian {
        amount: NoiseAmount,
    },
    TopK {
        keep_fraction: f64,
    },
}

impl DefenseConfig {
    pub fn laplace(scale: f64) -> Self {
        DefenseConfig::Laplace {
            amount: NoiseAmount::Scale(scale),
        }
    }

    pub fn gaussian(sigma: f64) -> Self {
        DefenseConfig::Gaussian {
            amount: NoiseAmount::Scale(sigma),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            DefenseConfig::None => "none",
            DefenseConfig::Laplace { .. } => "laplace",
            DefenseConfig::Gaussian { .. } => "gaussian",
            DefenseConfig::TopK { .. } => "topk",
        }
    }

    /// Noise scale, keep fraction for top-k, 0 for none.
    pub fn strength(&self) -> Result<f64> {
        match self {
            DefenseConfig::None => Ok(0.0),
            DefenseConfig::Laplace { amount } | DefenseConfig::Gaussian { amount } => {
                amount.resolve()
            }
            DefenseConfig::TopK { keep_fraction } => check_fraction(*keep_fraction),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.strength().map(|_| ())
    }

    pub fn apply(&self, update: &GradientUpdate, seed: u64) -> Result<GradientUpdate> {
        match self {
            DefenseConfig::None => Ok(update.clone()),
            DefenseConfig::Laplace { amount } => laplace_perturb(update, amount.resolve()?, seed),
            DefenseConfig::Gaussian { amount } => gaussian_perturb(update, amount.resolve()?, seed),
            DefenseConfig::TopK { keep_fraction } => topk_compress(update, *keep_fraction),
        }
    }
}

impl fmt::Display for DefenseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DefenseConfig::None => write!(f, "none"),
            DefenseConfig::Laplace { amount } | DefenseConfig::Gaussian { amount } => {
                match amount {
                    NoiseAmount::Scale(s) => write!(f, "{}:{s}", self.kind_name()),
                    NoiseAmount::Level(l) => write!(f, "{}:level{l}", self.kind_name()),
                }
            }
            DefenseConfig::TopK { keep_fraction } => write!(f, "topk:{keep_fraction}"),
        }
    }
}

/// `b = level × 1e-4`.
pub fn level_to_scale(level: i64) -> Result<f64> {
    if level <= 0 {
        return Err(Error::invalid(format!(
            "noise level must be positive, got {level}"
        )));
    }
    Ok(level as f64 * 1e-4)
}

#[derive(Clone, Copy)]
enum Noise {
    Laplace,
    Gaussian,
}

/// The noise tensors a perturbation with these arguments adds, one per entry.
fn noise_like(update: &GradientUpdate, kind: Noise, scale: f64, seed: u64) -> Vec<Tensor> {
    let mut rng = CounterRng::new(seed);
    update
        .entries
        .iter()
        .map(|(_, t)| {
            let data = (0..t.len())
                .map(|_| match kind {
                    Noise::Laplace => rng.laplace(scale),
                    Noise::Gaussian => rng.normal() * scale,
                } as f32)
                .collect();
            Tensor::from_parts(t.dims().to_vec(), data)
        })
        .collect()
}

fn perturb(
    update: &GradientUpdate,
    kind: Noise,
    scale: f64,
    seed: u64,
    what: &str,
) -> Result<GradientUpdate> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!(
            "{what} must be finite and >= 0, got {scale}"
        )));
    }
    if scale == 0.0 {
        return Ok(update.clone());
    }
    let noise = noise_like(update, kind, scale, seed);
    let entries = update
        .entries
        .iter()
        .zip(noise)
        .map(|((n, t), z)| Ok((n.clone(), t.zip_map(&z, "perturb", |a, b| a + b)?)))
        .collect::<Result<_>>()?;
    Ok(GradientUpdate {
        entries,
        batch_size: update.batch_size,
    })
}

/// Adds i.i.d. `Laplace(0, b)` noise to every entry.
pub fn laplace_perturb(update: &GradientUpdate, b: f64, seed: u64) -> Result<GradientUpdate> {
    perturb(update, Noise::Laplace, b, seed, "laplace scale")
}

/// Adds i.i.d. `N(0, σ²)` noise to every entry.
pub fn gaussian_perturb(update: &GradientUpdate, sigma: f64, seed: u64) -> Result<GradientUpdate> {
    perturb(update, Noise::Gaussian, sigma, seed, "gaussian sigma")
}

/// Regenerates the noise a defense added, entry by entry. Empty for
/// non-noise defenses.
pub fn regenerate_noise(
    defense: &DefenseConfig,
    update: &GradientUpdate,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let (kind, scale) = match defense {
        DefenseConfig::Laplace { amount } => (Noise::Laplace, amount.resolve()?),
        DefenseConfig::Gaussian { amount } => (Noise::Gaussian, amount.resolve()?),
        _ => return Ok(Vec::new()),
    };
    if scale == 0.0 {
        return Ok(update
            .entries
            .iter()
            .map(|(_, t)| Tensor::zeros(t.dims()))
            .collect());
    }
    Ok(noise_like(update, kind, scale, seed))
}

fn check_fraction(f: f64) -> Result<f64> {
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err(Error::invalid(format!(
            "keep_fraction must be in (0, 1], got {f}"
        )))
    }
}

/// `⌈f·n⌉`, tolerant of representation error in `f`.
fn keep_count(f: f64, n: usize) -> usize {
    ((f * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Keeps the `⌈keep_fraction·n⌉` largest magnitudes of each tensor; among equal
/// magnitudes the lower flat index wins.
pub fn topk_compress(update: &GradientUpdate, keep_fraction: f64) -> Result<GradientUpdate> {
    check_fraction(keep_fraction)?;
    let entries = update
        .entries
        .iter()
        .map(|(name, t)| {
            let k = keep_count(keep_fraction, t.len());
            if k == t.len() {
                return (name.clone(), t.clone());
            }
            let d = t.data();
            let mut order: Vec<usize> = (0..d.len()).collect();
            order.sort_by(|&a, &b| d[b].abs().total_cmp(&d[a].abs()).then(a.cmp(&b)));
            let mut out = vec![0f32; d.len()];
            for &i in &order[..k] {
                out[i] = d[i];
            }
            (name.clone(), Tensor::from_parts(t.dims().to_vec(), out))
        })
        .collect();
    Ok(GradientUpdate {
        entries,
        batch_size: update.batch_size,
    })
}
