//! Gradient inversion attacks.
//!
//! All three attacks optimize a dummy image in pixel space `[0, 1]`. When the
//! target model was trained on normalized inputs, the attack applies the same
//! normalization inside the graph so the dummy gradients are directly
//! comparable with the intercepted ones.
//!
//! * `dlg` jointly optimizes the image and an unconstrained label vector `u`
//!   whose softmax is the dummy label, by L-BFGS on the squared gradient
//!   distance.
//! * `cpl` fixes the label to the one read off the final bias gradient and
//!   starts from a constant image, then runs the same L-BFGS loop on the image
//!   alone.
//! * `gradinv` minimizes `1 − cos(∇θL, g) + λ·TV(x)` with Adam, label fixed
//!   as in `cpl`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{softmax_cross_entropy, Graph, Var};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::flsim::GradientUpdate;
use crate::metrics::{mse, ssim, SsimMode};
use crate::nn::{argmax, forward_graph, param_leaves, ModelSpec, ParamSet};
use crate::optim::{minimize, Hooks, Objective, OptimizerConfig, StopReason};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Dlg,
    Cpl,
    GradInv,
}

impl FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dlg" => Ok(AttackMethod::Dlg),
            "cpl" => Ok(AttackMethod::Cpl),
            "gradinv" => Ok(AttackMethod::GradInv),
            other => Err(Error::invalid(format!(
                "unknown attack `{other}` (expected dlg, cpl or gradinv)"
            ))),
        }
    }
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMethod::Dlg => "dlg",
            AttackMethod::Cpl => "cpl",
            AttackMethod::GradInv => "gradinv",
        })
    }
}

/// Dummy image initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    /// `N(0.5, 0.1)` clamped to `[0, 1]`.
    Gaussian,
    Uniform,
    Constant(f32),
    /// Constant 0.5.
    Patterned,
}

impl FromStr for InitKind {
    type Err = Error;

    /// `gaussian`, `uniform`, `patterned` or `constant(v)`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(InitKind::Gaussian),
            "uniform" => Ok(InitKind::Uniform),
            "patterned" => Ok(InitKind::Patterned),
            other => other
                .strip_prefix("constant(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|v| v.trim().parse::<f32>().ok())
                .filter(|v| (0.0..=1.0).contains(v))
                .map(InitKind::Constant)
                .ok_or_else(|| Error::invalid(format!("unknown init `{other}` (expected gaussian, uniform, patterned or constant(v) with v in [0, 1])"))),
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitKind::Gaussian => f.write_str("gaussian"),
            InitKind::Uniform => f.write_str("uniform"),
            InitKind::Patterned => f.write_str("patterned"),
            InitKind::Constant(v) => write!(f, "constant({v})"),
        }
    }
}

impl InitKind {
    pub fn sample(self, dims: &[usize], seed: u64) -> Tensor {
        let n = dims.iter().product();
        let mut rng = CounterRng::new(seed);
        let data = match self {
            InitKind::Gaussian => (0..n)
                .map(|_| (0.5 + 0.1 * rng.normal()).clamp(0.0, 1.0) as f32)
                .collect(),
            InitKind::Uniform => (0..n).map(|_| rng.open01() as f32).collect(),
            InitKind::Constant(v) => vec![v; n],
            InitKind::Patterned => vec![0.5; n],
        };
        Tensor::from_parts(dims.to_vec(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub optimizer: OptimizerConfig,
    pub init: InitKind,
    pub tv_weight: f64,
    pub checkpoint_every: usize,
    pub success_ssim: f64,
    pub ssim_mode: SsimMode,
    pub seed: u64,
    /// Input normalization of the target model, if any.
    pub normalization: Option<Normalization>,
}

impl AttackConfig {
    pub fn dlg() -> Self {
        AttackConfig {
            method: AttackMethod::Dlg,
            optimizer: OptimizerConfig::lbfgs(200),
            init: InitKind::Gaussian,
            tv_weight: 0.0,
            checkpoint_every: 20,
            success_ssim: 0.9,
            ssim_mode: SsimMode::Global,
            seed: 0,
            normalization: None,
        }
    }

    pub fn cpl() -> Self {
        AttackConfig {
            method: AttackMethod::Cpl,
            init: InitKind::Patterned,
            ..Self::dlg()
        }
    }

    pub fn gradinv() -> Self {
        AttackConfig {
            method: AttackMethod::GradInv,
            optimizer: OptimizerConfig::adam(24_000, 0.1),
            tv_weight: 1e-4,
            ..Self::dlg()
        }
    }

    pub fn for_method(method: AttackMethod) -> Self {
        match method {
            AttackMethod::Dlg => Self::dlg(),
            AttackMethod::Cpl => Self::cpl(),
            AttackMethod::GradInv => Self::gradinv(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_iters(mut self, iters: usize) -> Self {
        self.optimizer.max_iters = iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.success_ssim > 0.0 && self.success_ssim <= 1.0) {
            return Err(Error::invalid(format!(
                "success_ssim must be in (0, 1], got {}",
                self.success_ssim
            )));
        }
        if !(self.tv_weight >= 0.0) || !self.tv_weight.is_finite() {
            return Err(Error::invalid(format!(
                "tv_weight must be >= 0, got {}",
                self.tv_weight
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint_every must be >= 1"));
        }
        Ok(())
    }
}

/// The attacker's label: read off the gradients, or optimized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelEstimate {
    Inferred(usize),
    Optimized(Vec<f32>),
}

impl LabelEstimate {
    pub fn class(&self) -> usize {
        match self {
            LabelEstimate::Inferred(c) => *c,
            LabelEstimate::Optimized(p) => argmax(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub method: AttackMethod,
    pub reconstructed: Tensor,
    pub label: LabelEstimate,
    pub loss_trace: Vec<f64>,
    pub checkpoints: Vec<(usize, Tensor)>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    pub final_mse: f64,
    pub final_ssim: f64,
    pub success: bool,
    pub wall_time_s: f64,
    /// Set when the optimizer aborted; the reconstruction is then the start image.
    pub failure: Option<String>,
}

/// Decimal string with 9 significant digits, or `"inf"`/`"-inf"`/`"nan"`.
pub fn fmt_sig9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let s = format!("{v:.8e}");
    let (mant, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..=15).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        if fixed.contains('.') {
            fixed
                .trim_end_matches('0')
                .trim_end_matches('.')
                .to_string()
        } else {
            fixed
        }
    } else {
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        format!("{mant}e{exp}")
    }
}

/// Parses a [`fmt_sig9`] value back; exact for the printed digits.
pub fn round_sig9(v: f64) -> f64 {
    match fmt_sig9(v).as_str() {
        "inf" => f64::INFINITY,
        "-inf" => f64::NEG_INFINITY,
        "nan" => f64::NAN,
        s => s.parse().expect("formatted float"),
    }
}

fn num9(v: f64) -> Value {
    if v.is_finite() {
        // serde_json would print the shortest round-trip form; keep exactly 9 digits
        serde_json::from_str(&fmt_sig9(v)).unwrap_or(Value::Null)
    } else {
        Value::String(fmt_sig9(v))
    }
}

impl AttackResult {
    /// JSON summary with floats printed to 9 significant digits. Images are
    /// not embedded; checkpoints are listed by iteration.
    pub fn to_json(&self) -> Value {
        json!({
            "method": self.method.to_string(),
            "label": match &self.label {
                LabelEstimate::Inferred(c) => json!({ "inferred": c }),
                LabelEstimate::Optimized(p) => json!({ "optimized": p.iter().map(|&v| num9(v as f64)).collect::<Vec<_>>() }),
            },
            "iterations": self.iterations,
            "stop": self.stop,
            "initial_loss": num9(self.initial_loss),
            "final_loss": num9(self.final_loss),
            "final_mse": num9(self.final_mse),
            "final_ssim": num9(self.final_ssim),
            "success": self.success,
            "wall_time_s": num9(self.wall_time_s),
            "checkpoints": self.checkpoints.iter().map(|(i, _)| *i).collect::<Vec<_>>(),
            "loss_trace": self.loss_trace.iter().map(|&v| num9(v)).collect::<Vec<_>>(),
            "failure": self.failure,
        })
    }
}

// ---------------------------------------------------------------------------
// Losses

fn check_target(g_target: &GradientUpdate, spec: &ModelSpec) -> Result<()> {
    g_target.check_spec(spec)
}

/// Dummy parameter gradients `∇θ CE(f(x), y)` as differentiable nodes.
fn dummy_gradients(x: &Var, y: &Var, params: &[Var], spec: &ModelSpec) -> Result<Vec<Var>> {
    let logits = forward_graph(spec, params, x)?;
    let loss = softmax_cross_entropy(&logits, y)?;
    x.graph().grad_graph(&loss, params)
}

/// `Σ_p ‖∇θ_p L(x, y) − g_p‖²`, differentiable in `dummy_x` and `dummy_y`.
/// `params` must be leaves of the same graph.
pub fn gradient_match_loss(
    dummy_x: &Var,
    dummy_y: &Var,
    params: &[Var],
    spec: &ModelSpec,
    g_target: &GradientUpdate,
) -> Result<Var> {
    check_target(g_target, spec)?;
    let g = dummy_x.graph();
    let grads = dummy_gradients(dummy_x, dummy_y, params, spec)?;
    let mut total: Option<Var> = None;
    for (d, (_, t)) in grads.iter().zip(&g_target.entries) {
        let term = d.sub(&g.constant(t.clone()))?.sum_sq()?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    total.ok_or_else(|| Error::invalid("model has no parameters"))
}

/// Value of [`gradient_match_loss`] for concrete tensors.
pub fn gradient_match_value(
    x: &Tensor,
    y: &Tensor,
    params: &ParamSet,
    spec: &ModelSpec,
    g_target: &GradientUpdate,
) -> Result<f64> {
    let g = Graph::new();
    let p = param_leaves(&g, params);
    let l = gradient_match_loss(
        &g.constant(x.clone()),
        &g.constant(y.clone()),
        &p,
        spec,
        g_target,
    )?;
    Ok(l.value().item() as f64)
}

/// `v / ‖v‖` over the concatenation of all tensors, as graph nodes.
fn unit_direction(vs: &[Var]) -> Result<Vec<Var>> {
    let mut sq: Option<Var> = None;
    for v in vs {
        let s = v.sum_sq()?;
        sq = Some(match sq {
            None => s,
            Some(acc) => acc.add(&s)?,
        });
    }
    let inv = sq
        .ok_or_else(|| Error::invalid("empty gradient"))?
        .sqrt()
        .recip();
    vs.iter().map(|v| v.scale_by(&inv)).collect()
}

/// `1 − cos(a, b)` computed as `½‖a/‖a‖ − b/‖b‖‖²`.
fn cosine_distance(a: &[Var], b: &[Var]) -> Result<Var> {
    let ua = unit_direction(a)?;
    let ub = unit_direction(b)?;
    let mut total: Option<Var> = None;
    for (x, y) in ua.iter().zip(&ub) {
        let t = x.sub(y)?.sum_sq()?;
        total = Some(match total {
            None => t,
            Some(acc) => acc.add(&t)?,
        });
    }
    Ok(total.expect("nonempty").scale(0.5))
}

/// Anisotropic total variation `Σ |Δ_row| + |Δ_col|` over all channels.
pub fn total_variation_var(x: &Var) -> Result<Var> {
    let dims = x.dims();
    if dims.len() != 3 || dims[1] < 2 || dims[2] < 2 {
        return Err(Error::invalid(format!(
            "total variation needs [C, H>=2, W>=2], got {dims:?}"
        )));
    }
    x.shift_diff(0)?
        .abs()
        .sum()
        .add(&x.shift_diff(1)?.abs().sum())
}

pub fn total_variation(x: &Tensor) -> Result<f64> {
    let g = Graph::new();
    Ok(total_variation_var(&g.constant(x.clone()))?.value().item() as f64)
}

/// The class whose final-layer bias gradient is most negative; lowest index
/// among equal values. Under cross-entropy with batch 1 that gradient is
/// `softmax − onehot`, negative only at the true class.
pub fn infer_label_from_gradients(g_target: &GradientUpdate, spec: &ModelSpec) -> Result<usize> {
    let bias = g_target
        .get("fc.bias")
        .ok_or_else(|| Error::invalid("label inference needs a final `fc.bias` gradient"))?;
    if bias.dims() != [spec.num_classes] {
        return Err(Error::shape(
            "infer_label",
            bias.dims(),
            &[spec.num_classes],
        ));
    }
    let d = bias.data();
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v < d[best] {
            best = i;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Attack driver

/// Optional explicit starting point, overriding `cfg.init`.
#[derive(Debug, Clone, PartialEq)]
pub struct StartPoint {
    pub image: Tensor,
    /// Unconstrained label logits for `dlg`; ignored by the other methods.
    pub label_logits: Option<Tensor>,
}

impl StartPoint {
    /// Starts at a known image with (for `dlg`) a sharply peaked label.
    pub fn exact(image: Tensor, class: usize, num_classes: usize) -> Self {
        let mut u = vec![0f32; num_classes];
        u[class] = 40.0;
        StartPoint {
            image,
            label_logits: Some(Tensor::vector(&u)),
        }
    }
}

struct Setup<'a> {
    spec: &'a ModelSpec,
    params: &'a ParamSet,
    target: &'a GradientUpdate,
    norm: Option<(Tensor, Tensor)>,
}

impl Setup<'_> {
    fn model_input(&self, x: &Var) -> Result<Var> {
        match &self.norm {
            None => Ok(x.clone()),
            Some((mean, inv)) => {
                let g = x.graph();
                x.sub(&g.constant(mean.clone()))?
                    .mul(&g.constant(inv.clone()))
            }
        }
    }
}

fn start_image(cfg: &AttackConfig, spec: &ModelSpec, start: Option<&StartPoint>) -> Result<Tensor> {
    let dims = spec.input_shape();
    match start {
        Some(s) if s.image.dims() != dims => {
            Err(Error::shape("attack start", s.image.dims(), &dims))
        }
        Some(s) => Ok(s.image.clamp(0.0, 1.0)),
        None => Ok(cfg.init.sample(&dims, cfg.seed)),
    }
}

pub fn dlg_attack(
    g_target: &GradientUpdate,
    params: &ParamSet,
    spec: &ModelSpec,
    cfg: &AttackConfig,
    truth: &Tensor,
) -> Result<AttackResult> {
    expect_method(cfg, AttackMethod::Dlg)?;
    run_attack_from(g_target, params, spec, cfg, truth, None)
}

pub fn cpl_attack(
    g_target: &GradientUpdate,
    params: &ParamSet,
    spec: &ModelSpec,
    cfg: &AttackConfig,
    truth: &Tensor,
) -> Result<AttackResult> {
    expect_method(cfg, AttackMethod::Cpl)?;
    run_attack_from(g_target, params, spec, cfg, truth, None)
}

pub fn gradinv_attack(
    g_target: &GradientUpdate,
    params: &ParamSet,
    spec: &ModelSpec,
    cfg: &AttackConfig,
    truth: &Tensor,
) -> Result<AttackResult> {
    expect_method(cfg, AttackMethod::GradInv)?;
    run_attack_from(g_target, params, spec, cfg, truth, None)
}

fn expect_method(cfg: &AttackConfig, m: AttackMethod) -> Result<()> {
    if cfg.method != m {
        return Err(Error::invalid(format!(
            "{m} attack called with method {}",
            cfg.method
        )));
    }
    Ok(())
}

/// Runs `cfg.method`.
pub fn run_attack(
    g_target: &GradientUpdate,
    params: &ParamSet,
    spec: &ModelSpec,
    cfg: &AttackConfig,
    truth: &Tensor,
) -> Result<AttackResult> {
    run_attack_from(g_target, params, spec, cfg, truth, None)
}

/// Runs `cfg.method` from `start` (or `cfg.init` when absent) and scores the
/// reconstruction against `truth`, given in `[0, 1]` pixel space.
pub fn run_attack_from(
    g_target: &GradientUpdate,
    params: &ParamSet,
    spec: &ModelSpec,
    cfg: &AttackConfig,
    truth: &Tensor,
    start: Option<&StartPoint>,
) -> Result<AttackResult> {
    cfg.validate()?;
    params.check(spec)?;
    check_target(g_target, spec)?;
    if truth.dims() != spec.input_shape() {
        return Err(Error::shape(
            "attack truth",
            truth.dims(),
            &spec.input_shape(),
        ));
    }
    let norm = match &cfg.normalization {
        None => None,
        Some(n) => {
            if n.mean.len() != spec.input_dims.0 {
                return Err(Error::invalid(format!(
                    "normalization has {} channels, model expects {}",
                    n.mean.len(),
                    spec.input_dims.0
                )));
            }
            Some(n.maps(spec.input_dims.1, spec.input_dims.2))
        }
    };
    let setup = Setup {
        spec,
        params,
        target: g_target,
        norm,
    };
    let x0 = start_image(cfg, spec, start)?;
    let k = spec.num_classes;

    let started = Instant::now();
    let (x_start, label, outcome) = match cfg.method {
        AttackMethod::Dlg => {
            let u0 = match start.and_then(|s| s.label_logits.clone()) {
                Some(u) if u.dims() != [k] => {
                    return Err(Error::shape("dlg label start", u.dims(), &[k]))
                }
                Some(u) => u,
                None => Tensor::zeros(&[k]),
            };
            let mut f = |v: &[Tensor]| dlg_objective(&setup, &v[0], &v[1]);
            let outcome = optimize(&mut f, vec![x0.clone(), u0.clone()], cfg);
            let label = match &outcome {
                Ok(m) => m.rest[0].clone(),
                Err(_) => u0,
            };
            let probs = crate::tensor::softmax(&label);
            (x0, LabelEstimate::Optimized(probs.into_vec()), outcome)
        }
        AttackMethod::Cpl => {
            let class = infer_label_from_gradients(g_target, spec)?;
            let y = Tensor::one_hot(k, class);
            let mut f = |v: &[Tensor]| cpl_objective(&setup, &v[0], &y);
            let outcome = optimize(&mut f, vec![x0.clone()], cfg);
            (x0, LabelEstimate::Inferred(class), outcome)
        }
        AttackMethod::GradInv => {
            if g_target.norm() == 0.0 {
                return Err(Error::invalid(
                    "gradinv needs a target gradient with nonzero norm",
                ));
            }
            let class = infer_label_from_gradients(g_target, spec)?;
            let y = Tensor::one_hot(k, class);
            let mut f = |v: &[Tensor]| gradinv_objective(&setup, &v[0], &y, cfg.tv_weight);
            let outcome = optimize(&mut f, vec![x0.clone()], cfg);
            (x0, LabelEstimate::Inferred(class), outcome)
        }
    };
    let wall_time_s = started.elapsed().as_secs_f64();

    let (recon, trace, checkpoints, initial_loss, final_loss, iterations, stop, failure) =
        match outcome {
            Ok(run) => (
                run.x,
                run.trace,
                run.checkpoints,
                run.initial_loss,
                run.final_loss,
                run.iterations,
                Some(run.stop),
                None,
            ),
            Err(Error::NonFinite { what, iteration }) => (
                x_start.clone(),
                Vec::new(),
                vec![(0, x_start)],
                f64::NAN,
                f64::NAN,
                iteration,
                None,
                Some(format!(
                    "optimizer aborted: non-finite {what} at iteration {iteration}"
                )),
            ),
            Err(e) => return Err(e),
        };
    let final_mse = mse(truth, &recon)?;
    let final_ssim = ssim(truth, &recon, cfg.ssim_mode)?;
    Ok(AttackResult {
        method: cfg.method,
        reconstructed: recon,
        label,
        loss_trace: trace,
        checkpoints,
        initial_loss,
        final_loss,
        iterations,
        stop,
        final_mse,
        final_ssim,
        success: failure.is_none() && final_ssim >= cfg.success_ssim,
        wall_time_s,
        failure,
    })
}

struct Run {
    x: Tensor,
    /// Optimized variables after the image.
    rest: Vec<Tensor>,
    trace: Vec<f64>,
    checkpoints: Vec<(usize, Tensor)>,
    initial_loss: f64,
    final_loss: f64,
    iterations: usize,
    stop: StopReason,
}

/// Minimizes with the image bounded to `[0, 1]`, recording checkpoints.
fn optimize(f: &mut dyn Objective, x0: Vec<Tensor>, cfg: &AttackConfig) -> Result<Run> {
    let every = cfg.checkpoint_every;
    let mut checkpoints = vec![(0, x0[0].clone())];
    let mut record = |iter: usize, x: &[Tensor]| {
        if iter.is_multiple_of(every) {
            checkpoints.push((iter, x[0].clone()));
        }
    };
    let mut bounds = vec![Some((0.0, 1.0))];
    bounds.resize(x0.len(), None);
    let m = minimize(
        f,
        &x0,
        &cfg.optimizer,
        Hooks {
            bounds,
            on_iter: Some(&mut record),
        },
    )?;
    if checkpoints.last().map(|(i, _)| *i) != Some(m.iterations) {
        checkpoints.push((m.iterations, m.x[0].clone()));
    }
    let mut rest = m.x;
    let x = rest.remove(0);
    Ok(Run {
        x,
        rest,
        trace: m.trace,
        checkpoints,
        initial_loss: m.initial_loss,
        final_loss: m.final_loss,
        iterations: m.iterations,
        stop: m.stop,
    })
}

fn dlg_objective(s: &Setup, x: &Tensor, u: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let g = Graph::new();
    let p = param_leaves(&g, s.params);
    let xv = g.leaf(x.clone());
    let uv = g.leaf(u.clone());
    let loss = gradient_match_loss(&s.model_input(&xv)?, &uv.softmax(), &p, s.spec, s.target)?;
    let grads = g.grad(&loss, &[xv, uv])?;
    Ok((loss.value().item() as f64, grads))
}

fn cpl_objective(s: &Setup, x: &Tensor, y: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let g = Graph::new();
    let p = param_leaves(&g, s.params);
    let xv = g.leaf(x.clone());
    let loss = gradient_match_loss(
        &s.model_input(&xv)?,
        &g.constant(y.clone()),
        &p,
        s.spec,
        s.target,
    )?;
    let grads = g.grad(&loss, &[xv])?;
    Ok((loss.value().item() as f64, grads))
}

/// Cosine distance between dummy and target gradients, plus weighted TV.
fn gradinv_objective(
    s: &Setup,
    x: &Tensor,
    y: &Tensor,
    tv_weight: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let g = Graph::new();
    let p = param_leaves(&g, s.params);
    let xv = g.leaf(x.clone());
    let model_x = s.model_input(&xv)?;
    let dummy = dummy_gradients(&model_x, &g.constant(y.clone()), &p, s.spec)?;
    let target: Vec<Var> = s.target.tensors().map(|t| g.constant(t.clone())).collect();
    let mut loss = cosine_distance(&dummy, &target)?;
    if tv_weight != 0.0 {
        loss = loss.add(&total_variation_var(&xv)?.scale(tv_weight as f32))?;
    }
    let grads = g.grad(&loss, &[xv])?;
    Ok((loss.value().item() as f64, grads))
}
