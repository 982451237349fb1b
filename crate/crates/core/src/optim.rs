//! Minimizers used by the reconstruction attacks and by local training.
//!
//! Iterates live in `f32` tensors; search directions, curvature pairs and
//! moment estimates are kept in `f64`. Optional per-tensor box bounds are
//! enforced by projection: L-BFGS projects every trial point before the
//! Armijo test, Adam projects after each step.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flsim::GradientUpdate;
use crate::nn::ParamSet;
use crate::tensor::Tensor;

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK_SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 20;
const CURVATURE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lbfgs,
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lbfgs" => Ok(OptimizerKind::Lbfgs),
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Lbfgs => "lbfgs",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub max_iters: usize,
    /// Step size for Adam/SGD; initial trial step for L-BFGS once curvature is known.
    pub lr: f32,
    pub lbfgs_history: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Stop once the (projected) gradient norm drops below this.
    pub tolerance: f64,
}

impl OptimizerConfig {
    pub fn lbfgs(max_iters: usize) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Lbfgs,
            max_iters,
            lr: 1.0,
            lbfgs_history: 10,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            tolerance: 1e-12,
        }
    }

    pub fn adam(max_iters: usize, lr: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            ..OptimizerConfig::lbfgs(max_iters)
        }
    }

    pub fn sgd(max_iters: usize, lr: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            ..OptimizerConfig::lbfgs(max_iters)
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.adam_betas;
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return Err(Error::invalid(format!(
                "adam betas must lie in (0, 1), got {:?}",
                self.adam_betas
            )));
        }
        if self.kind == OptimizerKind::Lbfgs && self.lbfgs_history == 0 {
            return Err(Error::invalid("lbfgs_history must be >= 1"));
        }
        if !(self.adam_eps > 0.0) || self.tolerance < 0.0 {
            return Err(Error::invalid(
                "adam_eps must be positive and tolerance nonnegative",
            ));
        }
        Ok(())
    }
}

/// A differentiable scalar function of a list of tensors.
pub trait Objective {
    /// Returns the value and one gradient per input tensor.
    fn evaluate(&mut self, x: &[Tensor]) -> Result<(f64, Vec<Tensor>)>;
}

impl<F> Objective for F
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    fn evaluate(&mut self, x: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        self(x)
    }
}

/// Optional inclusive box `[lo, hi]` for every entry of one input tensor.
pub type Bounds = Option<(f32, f32)>;

/// Called with `(iteration, iterate)` after every accepted step.
pub type IterHook<'a> = &'a mut dyn FnMut(usize, &[Tensor]);

/// Per-run extras: box bounds (one per input tensor, missing = unbounded) and
/// an iteration callback.
#[derive(Default)]
pub struct Hooks<'a> {
    pub bounds: Vec<Bounds>,
    pub on_iter: Option<IterHook<'a>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    Converged,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct Minimization {
    pub x: Vec<Tensor>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss after each executed iteration (L-BFGS, SGD) or at each iterate
    /// before its step (Adam).
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
}

/// Flat working copy of a tensor list.
struct Flat {
    dims: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    lo: Vec<f32>,
    hi: Vec<f32>,
}

impl Flat {
    fn new(x0: &[Tensor], bounds: &[Bounds]) -> Result<(Self, Vec<f32>)> {
        if x0.is_empty() {
            return Err(Error::invalid("nothing to optimize"));
        }
        if bounds.len() > x0.len() {
            return Err(Error::invalid("more bounds than optimization variables"));
        }
        let mut offsets = vec![0];
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let mut x = Vec::new();
        for (i, t) in x0.iter().enumerate() {
            let (l, h) = bounds
                .get(i)
                .copied()
                .flatten()
                .unwrap_or((f32::NEG_INFINITY, f32::INFINITY));
            if l > h {
                return Err(Error::invalid(format!("empty bound [{l}, {h}]")));
            }
            lo.extend(std::iter::repeat_n(l, t.len()));
            hi.extend(std::iter::repeat_n(h, t.len()));
            x.extend_from_slice(t.data());
            offsets.push(x.len());
        }
        let flat = Flat {
            dims: x0.iter().map(|t| t.dims().to_vec()).collect(),
            offsets,
            lo,
            hi,
        };
        flat.project(&mut x);
        Ok((flat, x))
    }

    fn project(&self, x: &mut [f32]) {
        for ((v, &l), &h) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(l, h);
        }
    }

    fn tensors(&self, x: &[f32]) -> Vec<Tensor> {
        self.dims
            .iter()
            .enumerate()
            .map(|(i, d)| {
                Tensor::from_parts(d.clone(), x[self.offsets[i]..self.offsets[i + 1]].to_vec())
            })
            .collect()
    }

    fn eval(&self, f: &mut dyn Objective, x: &[f32], iteration: usize) -> Result<(f64, Vec<f64>)> {
        let (v, grads) = f.evaluate(&self.tensors(x))?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                iteration,
            });
        }
        if grads.len() != self.dims.len() {
            return Err(Error::invalid(format!(
                "objective returned {} gradients for {} variables",
                grads.len(),
                self.dims.len()
            )));
        }
        let mut g = Vec::with_capacity(x.len());
        for (t, d) in grads.iter().zip(&self.dims) {
            if t.dims() != d.as_slice() {
                return Err(Error::shape("objective gradient", t.dims(), d));
            }
            g.extend(t.data().iter().map(|&v| v as f64));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                iteration,
            });
        }
        Ok((v, g))
    }

    /// Norm of `P(x − g) − x`; equals ‖g‖ away from the bounds.
    fn projected_grad_norm(&self, x: &[f32], g: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..x.len() {
            let xi = x[i] as f64;
            let moved = (xi - g[i]).clamp(self.lo[i] as f64, self.hi[i] as f64);
            acc += (moved - xi) * (moved - xi);
        }
        acc.sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// `-H g` by the two-loop recursion.
fn two_loop(g: &[f64], history: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for (p, a) in history.iter().zip(alphas.iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

pub fn lbfgs_minimize(
    f: &mut dyn Objective,
    x0: &[Tensor],
    cfg: &OptimizerConfig,
    hooks: Hooks<'_>,
) -> Result<Minimization> {
    cfg.validate()?;
    let Hooks {
        bounds,
        mut on_iter,
    } = hooks;
    let (flat, mut x) = Flat::new(x0, &bounds)?;
    let (mut fx, mut g) = flat.eval(f, &x, 0)?;
    let initial_loss = fx;
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(cfg.lbfgs_history);
    let mut trace = Vec::new();
    let mut stop = StopReason::MaxIters;

    let mut iter = 0;
    while iter < cfg.max_iters {
        if flat.projected_grad_norm(&x, &g) < cfg.tolerance {
            stop = StopReason::Converged;
            break;
        }
        let mut accepted = None;
        // first attempt follows the quasi-Newton direction, the retry plain −g
        for attempt in 0..2 {
            if attempt == 1 {
                if history.is_empty() {
                    break;
                }
                history.clear();
            }
            let mut d = if history.is_empty() {
                g.iter().map(|v| -v).collect()
            } else {
                two_loop(&g, &history)
            };
            if dot(&g, &d) >= 0.0 {
                history.clear();
                d = g.iter().map(|v| -v).collect();
            }
            let mut alpha = if history.is_empty() {
                let l1: f64 = g.iter().map(|v| v.abs()).sum();
                cfg.lr as f64 / l1
            } else {
                cfg.lr as f64
            };
            for _ in 0..=MAX_BACKTRACKS {
                let mut xt: Vec<f32> = x
                    .iter()
                    .zip(&d)
                    .map(|(&xi, &di)| (xi as f64 + alpha * di) as f32)
                    .collect();
                flat.project(&mut xt);
                let step: Vec<f64> = xt
                    .iter()
                    .zip(&x)
                    .map(|(&a, &b)| a as f64 - b as f64)
                    .collect();
                let decrease = dot(&g, &step);
                if decrease < 0.0 {
                    let (ft, gt) = flat.eval(f, &xt, iter + 1)?;
                    if ft <= fx + ARMIJO_C * decrease {
                        accepted = Some((xt, ft, gt, step));
                        break;
                    }
                }
                alpha *= BACKTRACK_SHRINK;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((xt, ft, gt, s)) = accepted else {
            stop = StopReason::LineSearchFailed;
            break;
        };
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > CURVATURE_EPS {
            if history.len() == cfg.lbfgs_history {
                history.pop_front();
            }
            history.push_back(Pair {
                s,
                y,
                rho: 1.0 / sy,
            });
        }
        x = xt;
        fx = ft;
        g = gt;
        iter += 1;
        trace.push(fx);
        if let Some(cb) = on_iter.as_mut() {
            cb(iter, &flat.tensors(&x));
        }
    }
    Ok(Minimization {
        x: flat.tensors(&x),
        initial_loss,
        final_loss: fx,
        trace,
        iterations: iter,
        stop,
    })
}

pub fn adam_minimize(
    f: &mut dyn Objective,
    x0: &[Tensor],
    cfg: &OptimizerConfig,
    hooks: Hooks<'_>,
) -> Result<Minimization> {
    cfg.validate()?;
    let Hooks {
        bounds,
        mut on_iter,
    } = hooks;
    let (flat, mut x) = Flat::new(x0, &bounds)?;
    let (b1, b2) = cfg.adam_betas;
    let lr = cfg.lr as f64;
    let mut m = vec![0f64; x.len()];
    let mut v = vec![0f64; x.len()];
    let mut trace = Vec::new();
    let mut stop = StopReason::MaxIters;
    let mut initial_loss = None;
    let mut iter = 0;
    let mut last = None;
    while iter < cfg.max_iters {
        let (fx, g) = flat.eval(f, &x, iter)?;
        initial_loss.get_or_insert(fx);
        if flat.projected_grad_norm(&x, &g) < cfg.tolerance {
            stop = StopReason::Converged;
            last = Some(fx);
            break;
        }
        trace.push(fx);
        iter += 1;
        let c1 = 1.0 - b1.powi(iter as i32);
        let c2 = 1.0 - b2.powi(iter as i32);
        for i in 0..x.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            x[i] = (x[i] as f64 - step) as f32;
        }
        flat.project(&mut x);
        if let Some(cb) = on_iter.as_mut() {
            cb(iter, &flat.tensors(&x));
        }
    }
    let final_loss = match last {
        Some(v) => v,
        None => flat.eval(f, &x, iter)?.0,
    };
    Ok(Minimization {
        x: flat.tensors(&x),
        initial_loss: initial_loss.unwrap_or(final_loss),
        final_loss,
        trace,
        iterations: iter,
        stop,
    })
}

/// Fixed-step projected gradient descent.
pub fn sgd_minimize(
    f: &mut dyn Objective,
    x0: &[Tensor],
    cfg: &OptimizerConfig,
    hooks: Hooks<'_>,
) -> Result<Minimization> {
    cfg.validate()?;
    let Hooks {
        bounds,
        mut on_iter,
    } = hooks;
    let (flat, mut x) = Flat::new(x0, &bounds)?;
    let (mut fx, mut g) = flat.eval(f, &x, 0)?;
    let initial_loss = fx;
    let mut trace = Vec::new();
    let mut stop = StopReason::MaxIters;
    let mut iter = 0;
    while iter < cfg.max_iters {
        if flat.projected_grad_norm(&x, &g) < cfg.tolerance {
            stop = StopReason::Converged;
            break;
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi = (*xi as f64 - cfg.lr as f64 * gi) as f32;
        }
        flat.project(&mut x);
        iter += 1;
        (fx, g) = flat.eval(f, &x, iter)?;
        trace.push(fx);
        if let Some(cb) = on_iter.as_mut() {
            cb(iter, &flat.tensors(&x));
        }
    }
    Ok(Minimization {
        x: flat.tensors(&x),
        initial_loss,
        final_loss: fx,
        trace,
        iterations: iter,
        stop,
    })
}

/// Dispatches on `cfg.kind`.
pub fn minimize(
    f: &mut dyn Objective,
    x0: &[Tensor],
    cfg: &OptimizerConfig,
    hooks: Hooks<'_>,
) -> Result<Minimization> {
    match cfg.kind {
        OptimizerKind::Lbfgs => lbfgs_minimize(f, x0, cfg, hooks),
        OptimizerKind::Adam => adam_minimize(f, x0, cfg, hooks),
        OptimizerKind::Sgd => sgd_minimize(f, x0, cfg, hooks),
    }
}

/// `p' = p − lr·g` for every parameter.
pub fn sgd_step(params: &ParamSet, grads: &GradientUpdate, lr: f32) -> Result<ParamSet> {
    if params.entries.len() != grads.entries.len() {
        return Err(Error::invalid(format!(
            "{} parameters but {} gradients",
            params.entries.len(),
            grads.entries.len()
        )));
    }
    let lr = lr as f64;
    let entries = params
        .entries
        .iter()
        .zip(&grads.entries)
        .map(|((name, p), (_, g))| {
            let t = p.zip_map(g, "sgd_step", |pv, gv| (pv as f64 - lr * gv as f64) as f32)?;
            Ok((name.clone(), t))
        })
        .collect::<Result<_>>()?;
    Ok(ParamSet {
        entries,
        step_count: params.step_count + 1,
    })
}
