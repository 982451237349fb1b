//! Attack-target architectures.
//!
//! | arch      | layout |
//! |-----------|--------|
//! | `mlp`     | flatten → 256 → act → K |
//! | `cnn4`    | 4 × [conv k3 s1 p1, act], 2×2 avg-pool after layers 2 and 4, channels 12,12,12,12, FC → K |
//! | `cnn7`    | 7 × [conv k3 s1 p1, act], 2×2 avg-pool after layers 2, 4, 6, channels 16,16,32,32,64,64,64, FC → K |
//! | `tinyres` | conv stem (16) + 3 residual blocks (16, 32, 64; stride-2 entry) + global avg-pool + FC → K |
//!
//! Residual shortcuts are parameter free: stride-2 subsampling followed by
//! zero-padding of the extra channels.
//!
//! Weights are drawn from `U(-√(1/fan_in), √(1/fan_in))`, biases start at zero.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_cross_entropy, Graph, Var};
use crate::data::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::flsim::GradientUpdate;
use crate::optim::sgd_step;
use crate::rng::{derive_seed, CounterRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Cnn4,
    Cnn7,
    TinyRes,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "cnn4" => Ok(Arch::Cnn4),
            "cnn7" => Ok(Arch::Cnn7),
            "tinyres" => Ok(Arch::TinyRes),
            other => Err(Error::invalid(format!("unknown arch `{other}`"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::Cnn4 => "cnn4",
            Arch::Cnn7 => "cnn7",
            Arch::TinyRes => "tinyres",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        })
    }
}

impl Activation {
    fn apply(self, v: &Var) -> Var {
        match self {
            Activation::Sigmoid => v.sigmoid(),
            Activation::Relu => v.relu(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    /// `(channels, height, width)`
    pub input_dims: (usize, usize, usize),
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    /// Sigmoid model on 3-channel square images.
    pub fn new(arch: Arch, size: usize, num_classes: usize) -> Self {
        ModelSpec {
            arch,
            input_dims: (3, size, size),
            num_classes,
            activation: Activation::Sigmoid,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_input(mut self, c: usize, h: usize, w: usize) -> Self {
        self.input_dims = (c, h, w);
        self
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let (c, h, w) = self.input_dims;
        [c, h, w]
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_dims;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "input dims must be positive, got {:?}",
                self.input_dims
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        let pools = match self.arch {
            Arch::Cnn4 => 2,
            Arch::Cnn7 => 3,
            _ => 0,
        };
        if (h >> pools) == 0 || (w >> pools) == 0 {
            return Err(Error::invalid(format!(
                "{} needs inputs of at least {}×{}, got {h}×{w}",
                self.arch,
                1 << pools,
                1 << pools
            )));
        }
        Ok(())
    }

    /// Parameter names, shapes and fan-ins in canonical order.
    pub fn param_layout(&self) -> Result<Vec<ParamShape>> {
        self.validate()?;
        let (c, h, w) = self.input_dims;
        let k = self.num_classes;
        let mut out = Vec::new();
        let conv = |out: &mut Vec<ParamShape>, name: &str, cin: usize, cout: usize| {
            out.push(ParamShape::new(
                format!("{name}.weight"),
                vec![cout, cin, 3, 3],
                cin * 9,
            ));
            out.push(ParamShape::new(format!("{name}.bias"), vec![cout], cin * 9));
        };
        let fc = |out: &mut Vec<ParamShape>, name: &str, fin: usize, fout: usize| {
            out.push(ParamShape::new(
                format!("{name}.weight"),
                vec![fout, fin],
                fin,
            ));
            out.push(ParamShape::new(format!("{name}.bias"), vec![fout], fin));
        };
        match self.arch {
            Arch::Mlp => {
                fc(&mut out, "fc1", c * h * w, MLP_HIDDEN);
                fc(&mut out, "fc", MLP_HIDDEN, k);
            }
            Arch::Cnn4 | Arch::Cnn7 => {
                let stack = ConvStack::for_arch(self.arch);
                let mut cin = c;
                for (i, &cout) in stack.channels.iter().enumerate() {
                    conv(&mut out, &format!("conv{}", i + 1), cin, cout);
                    cin = cout;
                }
                let (fh, fw) = stack.spatial_out(h, w);
                fc(&mut out, "fc", cin * fh * fw, k);
            }
            Arch::TinyRes => {
                conv(&mut out, "stem", c, RES_STEM);
                let mut cin = RES_STEM;
                for (i, &cout) in RES_BLOCKS.iter().enumerate() {
                    conv(&mut out, &format!("block{}.conv_a", i + 1), cin, cout);
                    conv(&mut out, &format!("block{}.conv_b", i + 1), cout, cout);
                    cin = cout;
                }
                fc(&mut out, "fc", cin, k);
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_layout()?
            .iter()
            .map(|p| p.dims.iter().product::<usize>())
            .sum())
    }
}

const MLP_HIDDEN: usize = 256;
const RES_STEM: usize = 16;
const RES_BLOCKS: [usize; 3] = [16, 32, 64];

struct ConvStack {
    channels: &'static [usize],
    /// 1-based layer indices followed by a 2×2 average pool.
    pool_after: &'static [usize],
}

impl ConvStack {
    fn for_arch(arch: Arch) -> Self {
        match arch {
            Arch::Cnn4 => ConvStack {
                channels: &[12, 12, 12, 12],
                pool_after: &[2, 4],
            },
            Arch::Cnn7 => ConvStack {
                channels: &[16, 16, 32, 32, 64, 64, 64],
                pool_after: &[2, 4, 6],
            },
            _ => unreachable!("not a plain conv stack"),
        }
    }

    fn spatial_out(&self, mut h: usize, mut w: usize) -> (usize, usize) {
        for _ in self.pool_after {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub dims: Vec<usize>,
    pub fan_in: usize,
}

impl ParamShape {
    fn new(name: String, dims: Vec<usize>, fan_in: usize) -> Self {
        ParamShape { name, dims, fan_in }
    }
}

/// Flat, ordered model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub entries: Vec<(String, Tensor)>,
    pub step_count: u64,
}

impl ParamSet {
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Same names and shapes, every value zero.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.dims())))
                .collect(),
            step_count: self.step_count,
        }
    }

    /// Checks names and shapes against `spec`.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let layout = spec.param_layout()?;
        if layout.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "parameter set has {} entries, {} expects {}",
                self.entries.len(),
                spec.arch,
                layout.len()
            )));
        }
        for (shape, (name, t)) in layout.iter().zip(&self.entries) {
            if &shape.name != name || shape.dims != t.dims() {
                return Err(Error::shape("params", &shape.dims, t.dims()));
            }
        }
        Ok(())
    }

    /// Writes one MPFT file per parameter plus an `index.json` with order and step count.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names: Vec<&str> = self.entries.iter().map(|(n, _)| n.as_str()).collect();
        for (name, t) in &self.entries {
            write_tensor(&dir.join(format!("{name}.mpft")), t)?;
        }
        let index = serde_json::json!({ "params": names, "step_count": self.step_count });
        let path = dir.join("index.json");
        std::fs::write(&path, serde_json::to_string_pretty(&index)?)
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<ParamSet> {
        #[derive(Deserialize)]
        struct Index {
            params: Vec<String>,
            step_count: u64,
        }
        let path = dir.join("index.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: Index = serde_json::from_str(&text)?;
        let entries = index
            .params
            .into_iter()
            .map(|n| {
                let t = read_tensor(&dir.join(format!("{n}.mpft")))?;
                Ok((n, t))
            })
            .collect::<Result<_>>()?;
        Ok(ParamSet {
            entries,
            step_count: index.step_count,
        })
    }
}

/// One labelled training example; `target` is a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Tensor,
    pub target: Tensor,
}

impl Example {
    pub fn labeled(image: Tensor, class: usize, num_classes: usize) -> Self {
        Example {
            image,
            target: Tensor::one_hot(num_classes, class),
        }
    }

    /// Index of the largest target entry, lowest index on ties.
    pub fn class(&self) -> usize {
        argmax(self.target.data())
    }
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    let layout = spec.param_layout()?;
    let entries = layout
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let n: usize = p.dims.iter().product();
            let t = if p.name.ends_with(".bias") {
                Tensor::zeros(&p.dims)
            } else {
                let bound = (1.0 / p.fan_in as f64).sqrt();
                let mut rng = CounterRng::new(derive_seed(&[seed, i as u64]));
                Tensor::from_parts(
                    p.dims,
                    (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect(),
                )
            };
            (p.name, t)
        })
        .collect();
    Ok(ParamSet {
        entries,
        step_count: 0,
    })
}

/// Places every parameter on `g` as a differentiable leaf.
pub fn param_leaves(g: &Graph, params: &ParamSet) -> Vec<Var> {
    params.tensors().map(|t| g.leaf(t.clone())).collect()
}

/// Records the forward pass of `spec` on `g`, returning the `[K]` logits.
pub fn forward_graph(spec: &ModelSpec, params: &[Var], x: &Var) -> Result<Var> {
    if x.dims() != spec.input_shape() {
        return Err(Error::shape("forward", &x.dims(), &spec.input_shape()));
    }
    let layout = spec.param_layout()?;
    if layout.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} expects {} parameter tensors, got {}",
            spec.arch,
            layout.len(),
            params.len()
        )));
    }
    for (shape, p) in layout.iter().zip(params) {
        if shape.dims != p.dims() {
            return Err(Error::shape("params", &shape.dims, &p.dims()));
        }
    }
    let act = spec.activation;
    let mut it = params.iter();
    let mut next = || it.next().expect("layout checked above");
    let conv = |x: &Var, w: &Var, b: &Var, stride: usize| -> Result<Var> {
        let y = x.conv2d(w, stride, 1)?;
        let d = y.dims();
        y.add(&b.expand_channels(d[1], d[2])?)
    };
    let linear = |x: &Var, w: &Var, b: &Var| -> Result<Var> {
        let n = x.dims().iter().product::<usize>();
        let y = w.matmul(&x.reshape(&[n, 1])?)?;
        let out = y.dims()[0];
        y.reshape(&[out])?.add(b)
    };

    match spec.arch {
        Arch::Mlp => {
            let (w1, b1) = (next(), next());
            let h = act.apply(&linear(x, w1, b1)?);
            let (w2, b2) = (next(), next());
            linear(&h, w2, b2)
        }
        Arch::Cnn4 | Arch::Cnn7 => {
            let stack = ConvStack::for_arch(spec.arch);
            let mut h = x.clone();
            for layer in 1..=stack.channels.len() {
                let (w, b) = (next(), next());
                h = act.apply(&conv(&h, w, b, 1)?);
                if stack.pool_after.contains(&layer) {
                    h = h.avg_pool2()?;
                }
            }
            let (w, b) = (next(), next());
            linear(&h, w, b)
        }
        Arch::TinyRes => {
            let (w, b) = (next(), next());
            let mut h = act.apply(&conv(x, w, b, 1)?);
            for _ in RES_BLOCKS {
                let (wa, ba) = (next(), next());
                let (wb, bb) = (next(), next());
                let a = act.apply(&conv(&h, wa, ba, 2)?);
                let r = conv(&a, wb, bb, 1)?;
                let cout = r.dims()[0];
                let cin = h.dims()[0];
                let short = h.subsample2()?.pad_channels(0, cout.max(cin))?;
                h = act.apply(&r.add(&short)?);
            }
            let d = h.dims();
            let pooled = h.sum_spatial()?.scale(1.0 / (d[1] * d[2]) as f32);
            let (w, b) = (next(), next());
            linear(&pooled, w, b)
        }
    }
}

/// Logits for one image.
pub fn forward(params: &ParamSet, spec: &ModelSpec, x: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let p: Vec<Var> = params.tensors().map(|t| g.constant(t.clone())).collect();
    Ok(forward_graph(spec, &p, &g.constant(x.clone()))?.value())
}

pub fn predict(params: &ParamSet, spec: &ModelSpec, x: &Tensor) -> Result<usize> {
    Ok(argmax(forward(params, spec, x)?.data()))
}

/// Cross-entropy and its parameter gradient for one example.
pub fn loss_and_grad(
    params: &ParamSet,
    spec: &ModelSpec,
    x: &Tensor,
    y: &Tensor,
) -> Result<(f32, GradientUpdate)> {
    batch_loss_and_grad(params, spec, &[(x, y)])
}

/// Mean cross-entropy over a batch and its parameter gradient.
pub fn batch_loss_and_grad(
    params: &ParamSet,
    spec: &ModelSpec,
    batch: &[(&Tensor, &Tensor)],
) -> Result<(f32, GradientUpdate)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if batch.iter().any(|(_, y)| y.dims() != [spec.num_classes]) {
        return Err(Error::invalid(format!(
            "targets must have length {}",
            spec.num_classes
        )));
    }
    let g = Graph::new();
    let p = param_leaves(&g, params);
    let inv = 1.0 / batch.len() as f32;
    let mut total: Option<Var> = None;
    for (x, y) in batch {
        let logits = forward_graph(spec, &p, &g.constant((*x).clone()))?;
        let l = softmax_cross_entropy(&logits, &g.constant((*y).clone()))?;
        total = Some(match total {
            None => l,
            Some(t) => t.add(&l)?,
        });
    }
    let loss = total.expect("non-empty batch").scale(inv);
    let grads = g.grad(&loss, &p)?;
    let update = GradientUpdate {
        entries: params
            .entries
            .iter()
            .map(|(n, _)| n.clone())
            .zip(grads)
            .collect(),
        batch_size: batch.len(),
    };
    Ok((loss.value().item(), update))
}

pub fn mean_loss(params: &ParamSet, spec: &ModelSpec, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut total = 0.0;
    for ex in data {
        let g = Graph::new();
        let p: Vec<Var> = params.tensors().map(|t| g.constant(t.clone())).collect();
        let logits = forward_graph(spec, &p, &g.constant(ex.image.clone()))?;
        total += softmax_cross_entropy(&logits, &g.constant(ex.target.clone()))?
            .value()
            .item() as f64;
    }
    Ok(total / data.len() as f64)
}

pub fn accuracy(params: &ParamSet, spec: &ModelSpec, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut hits = 0usize;
    for ex in data {
        if predict(params, spec, &ex.image)? == ex.class() {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Plain per-example SGD over a freshly shuffled dataset each epoch.
pub fn train_local(
    params: &ParamSet,
    spec: &ModelSpec,
    data: &[Example],
    epochs: usize,
    lr: f32,
    seed: u64,
) -> Result<ParamSet> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if epochs == 0 {
        return Ok(params.clone());
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    params.check(spec)?;
    let mut current = params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..epochs {
        CounterRng::new(derive_seed(&[seed, epoch as u64])).shuffle(&mut order);
        for &i in &order {
            let (loss, g) = loss_and_grad(&current, spec, &data[i].image, &data[i].target)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "training loss",
                    iteration: step,
                });
            }
            current = sgd_step(&current, &g, lr)?;
            if current.entries.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    what: "parameter after training step",
                    iteration: step,
                });
            }
            step += 1;
        }
    }
    Ok(current)
}

/// `∇ₓ ‖∇θ L(x, y) − g0‖²` evaluated at `x0`, obtained by differentiating
/// through the recorded backward pass.
pub fn gradient_distance_input_grad(
    params: &ParamSet,
    spec: &ModelSpec,
    x0: &Tensor,
    y: &Tensor,
    g0: &GradientUpdate,
) -> Result<Tensor> {
    if g0.entries.len() != params.len() {
        return Err(Error::invalid(format!(
            "target gradient has {} entries, model has {}",
            g0.entries.len(),
            params.len()
        )));
    }
    for ((_, p), (_, t)) in params.entries.iter().zip(&g0.entries) {
        if p.dims() != t.dims() {
            return Err(Error::shape("gradient_distance", p.dims(), t.dims()));
        }
    }
    let g = Graph::new();
    let p = param_leaves(&g, params);
    let x = g.leaf(x0.clone());
    let logits = forward_graph(spec, &p, &x)?;
    let loss = softmax_cross_entropy(&logits, &g.constant(y.clone()))?;
    let grads = g.grad_graph(&loss, &p)?;
    let mut dist: Option<Var> = None;
    for (gv, (_, t)) in grads.iter().zip(&g0.entries) {
        let d = gv.sub(&g.constant(t.clone()))?.sum_sq()?;
        dist = Some(match dist {
            None => d,
            Some(acc) => acc.add(&d)?,
        });
    }
    let dist = dist.ok_or_else(|| Error::invalid("model has no parameters"))?;
    Ok(g.grad(&dist, &[x])?.remove(0))
}
