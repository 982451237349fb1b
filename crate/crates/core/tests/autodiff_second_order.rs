//! Input gradients of the gradient-matching distance `Σ‖∇θ L(x) − g0‖²`,
//! obtained by differentiating through a recorded backward pass.
#![allow(clippy::needless_range_loop)]

mod common;

use common::{max_fd_error, uniform, GraphFn};
use gradleak::autodiff::{softmax_cross_entropy, Graph, Var};
use gradleak::Tensor;

const TOL: f64 = 1e-3;

/// A model as a function of its input and parameter leaves.
type Model = fn(&Var, &[Var]) -> Var;

fn linear(x: &Var, w: &Var, b: &Var) -> Var {
    let n: usize = x.dims().iter().product();
    let y = w.matmul(&x.reshape(&[n, 1]).unwrap()).unwrap();
    let out = y.dims()[0];
    y.reshape(&[out]).unwrap().add(b).unwrap()
}

fn conv(x: &Var, w: &Var, b: &Var, stride: usize) -> Var {
    let y = x.conv2d(w, stride, 1).unwrap();
    let d = y.dims();
    y.add(&b.expand_channels(d[1], d[2]).unwrap()).unwrap()
}

/// 6 → 4 → 3, sigmoid hidden layer: 43 parameters.
fn tiny_mlp(x: &Var, p: &[Var]) -> Var {
    linear(&linear(x, &p[0], &p[1]).sigmoid(), &p[2], &p[3])
}

/// conv 2→3, pool, strided conv 3→3, linear: 159 parameters.
fn tiny_cnn(x: &Var, p: &[Var]) -> Var {
    let h = conv(x, &p[0], &p[1], 1).sigmoid().avg_pool2().unwrap();
    let h = conv(&h, &p[2], &p[3], 2).sigmoid();
    linear(&h, &p[4], &p[5])
}

/// Stem 2→2, one residual block 2→4 with a subsampled, zero-padded
/// shortcut, global average pool: 186 parameters.
fn tiny_res(x: &Var, p: &[Var]) -> Var {
    let h = conv(x, &p[0], &p[1], 1).tanh();
    let a = conv(&h, &p[2], &p[3], 2).tanh();
    let r = conv(&a, &p[4], &p[5], 1);
    let short = h.subsample2().unwrap().pad_channels(0, 4).unwrap();
    let h = r.add(&short).unwrap().tanh();
    let d = h.dims();
    let pooled = h.sum_spatial().unwrap().scale(1.0 / (d[1] * d[2]) as f32);
    linear(&pooled, &p[6], &p[7])
}

struct Case {
    name: &'static str,
    model: Model,
    input: Vec<usize>,
    params: Vec<Vec<usize>>,
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "tiny_mlp",
            model: tiny_mlp,
            input: vec![6],
            params: vec![vec![4, 6], vec![4], vec![3, 4], vec![3]],
        },
        Case {
            name: "tiny_cnn",
            model: tiny_cnn,
            input: vec![2, 4, 4],
            params: vec![
                vec![3, 2, 3, 3],
                vec![3],
                vec![3, 3, 3, 3],
                vec![3],
                vec![3, 3],
                vec![3],
            ],
        },
        Case {
            name: "tiny_res",
            model: tiny_res,
            input: vec![2, 4, 4],
            params: vec![
                vec![2, 2, 3, 3],
                vec![2],
                vec![4, 2, 3, 3],
                vec![4],
                vec![4, 4, 3, 3],
                vec![4],
                vec![3, 4],
                vec![3],
            ],
        },
    ]
}

fn matching_loss(
    g: &Graph,
    model: Model,
    x: &Var,
    params: &[Tensor],
    y: &Tensor,
    g0: &[Tensor],
) -> Var {
    let p: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = softmax_cross_entropy(&model(x, &p), &g.constant(y.clone())).unwrap();
    let grads = g.grad_graph(&loss, &p).unwrap();
    let mut total: Option<Var> = None;
    for (gv, t) in grads.iter().zip(g0) {
        let d = gv.sub(&g.constant(t.clone())).unwrap().sum_sq().unwrap();
        total = Some(match total {
            None => d,
            Some(acc) => acc.add(&d).unwrap(),
        });
    }
    total.unwrap()
}

#[test]
pub fn models_stay_under_a_thousand_parameters() {
    for c in cases() {
        let n: usize = c.params.iter().map(|d| d.iter().product::<usize>()).sum();
        assert!(n <= 1000, "{} has {n} parameters", c.name);
    }
}

#[test]
pub fn input_gradient_of_matching_loss_matches_finite_differences() {
    for (ci, c) in cases().into_iter().enumerate() {
        let seed = 1000 * ci as u64;
        let params: Vec<Tensor> = c
            .params
            .iter()
            .enumerate()
            .map(|(i, d)| uniform(d, seed + i as u64, -0.8, 0.8))
            .collect();
        let g0: Vec<Tensor> = c
            .params
            .iter()
            .enumerate()
            .map(|(i, d)| uniform(d, seed + 50 + i as u64, -0.3, 0.3))
            .collect();
        let x = uniform(&c.input, seed + 99, 0.0, 1.0);
        let y = Tensor::vector(&[0.2, 0.5, 0.3]);
        let model = c.model;
        let f = move |g: &Graph, v: &[Var]| matching_loss(g, model, &v[0], &params, &y, &g0);
        let f: &GraphFn<'_> = &f;
        let (err, at) = max_fd_error(f, &[x], 1.0 / 8.0, 1e-2, 64, 8);
        assert!(err < TOL, "{}: relative error {err:.3e} at {at}", c.name);
    }
}

#[test]
pub fn soft_label_gradient_of_matching_loss_matches_finite_differences() {
    // The label enters through softmax(u), as in the label-optimizing attack.
    let params: Vec<Tensor> = [vec![4, 6], vec![4], vec![3, 4], vec![3]]
        .iter()
        .enumerate()
        .map(|(i, d)| uniform(d, 300 + i as u64, -0.8, 0.8))
        .collect();
    let g0: Vec<Tensor> = params
        .iter()
        .enumerate()
        .map(|(i, t)| uniform(t.dims(), 400 + i as u64, -0.3, 0.3))
        .collect();
    let f = move |g: &Graph, v: &[Var]| {
        let p: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = softmax_cross_entropy(&tiny_mlp(&v[0], &p), &v[1].softmax()).unwrap();
        let grads = g.grad_graph(&loss, &p).unwrap();
        let mut total = grads[0]
            .sub(&g.constant(g0[0].clone()))
            .unwrap()
            .sum_sq()
            .unwrap();
        for (gv, t) in grads.iter().zip(&g0).skip(1) {
            total = total
                .add(&gv.sub(&g.constant(t.clone())).unwrap().sum_sq().unwrap())
                .unwrap();
        }
        total
    };
    let xs = [uniform(&[6], 500, 0.0, 1.0), uniform(&[3], 501, -1.0, 1.0)];
    let (err, at) = max_fd_error(&f, &xs, 1.0 / 16.0, 1e-2, 64, 8);
    assert!(err < TOL, "relative error {err:.3e} at {at}");
}

// ---------------------------------------------------------------------------
// Independent double-precision reference for the tiny MLP.

struct Mlp64 {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

const D: usize = 6;
const HID: usize = 4;
const K: usize = 3;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Mlp64 {
    /// Hand-derived parameter gradient of cross-entropy, flattened in
    /// `(w1, b1, w2, b2)` order.
    fn param_grad(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let a: Vec<f64> = (0..HID)
            .map(|j| sigmoid(self.b1[j] + (0..D).map(|i| self.w1[j * D + i] * x[i]).sum::<f64>()))
            .collect();
        let z2: Vec<f64> = (0..K)
            .map(|k| self.b2[k] + (0..HID).map(|j| self.w2[k * HID + j] * a[j]).sum::<f64>())
            .collect();
        let m = z2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z2.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let ysum: f64 = y.iter().sum();
        let d2: Vec<f64> = (0..K).map(|k| e[k] / s * ysum - y[k]).collect();
        let d1: Vec<f64> = (0..HID)
            .map(|j| {
                (0..K).map(|k| self.w2[k * HID + j] * d2[k]).sum::<f64>() * a[j] * (1.0 - a[j])
            })
            .collect();
        let mut g = Vec::new();
        for j in 0..HID {
            for i in 0..D {
                g.push(d1[j] * x[i]);
            }
        }
        g.extend(&d1);
        for k in 0..K {
            for j in 0..HID {
                g.push(d2[k] * a[j]);
            }
        }
        g.extend(&d2);
        g
    }

    fn distance(&self, x: &[f64], y: &[f64], g0: &[f64]) -> f64 {
        self.param_grad(x, y)
            .iter()
            .zip(g0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

#[test]
pub fn tiny_mlp_matches_double_precision_reference() {
    let params: Vec<Tensor> = [vec![HID, D], vec![HID], vec![K, HID], vec![K]]
        .iter()
        .enumerate()
        .map(|(i, d)| uniform(d, 700 + i as u64, -0.8, 0.8))
        .collect();
    let g0: Vec<Tensor> = params
        .iter()
        .enumerate()
        .map(|(i, t)| uniform(t.dims(), 800 + i as u64, -0.3, 0.3))
        .collect();
    let x = uniform(&[D], 900, 0.0, 1.0);
    let y = Tensor::vector(&[0.0, 1.0, 0.0]);

    let reference = Mlp64 {
        w1: to64(&params[0]),
        b1: to64(&params[1]),
        w2: to64(&params[2]),
        b2: to64(&params[3]),
    };
    let g0_flat: Vec<f64> = g0.iter().flat_map(to64).collect();
    let x64 = to64(&x);
    let y64 = to64(&y);

    // First order: the tape's parameter gradient against the hand derivation.
    let g = Graph::new();
    let p: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = softmax_cross_entropy(
        &tiny_mlp(&g.constant(x.clone()), &p),
        &g.constant(y.clone()),
    )
    .unwrap();
    let tape: Vec<f64> = g.grad(&loss, &p).unwrap().iter().flat_map(to64).collect();
    let exact = reference.param_grad(&x64, &y64);
    for (i, (a, b)) in tape.iter().zip(&exact).enumerate() {
        assert!(
            (a - b).abs() <= 1e-6 + 1e-5 * b.abs(),
            "param grad {i}: tape {a} reference {b}"
        );
    }

    // Second order: ∇ₓ of the distance against double-precision central
    // differences of the reference.
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let dist = matching_loss(&g, tiny_mlp, &xv, &params, &y, &g0);
    let tape_dx = to64(&g.grad(&dist, &[xv]).unwrap()[0]);
    let h = 1e-5;
    for i in 0..D {
        let mut xp = x64.clone();
        let mut xm = x64.clone();
        xp[i] += h;
        xm[i] -= h;
        let fd = (reference.distance(&xp, &y64, &g0_flat)
            - reference.distance(&xm, &y64, &g0_flat))
            / (2.0 * h);
        let err = (tape_dx[i] - fd).abs() / fd.abs().max(1e-2);
        assert!(
            err < TOL,
            "d/dx{i}: tape {} reference {fd} (relative error {err:.3e})",
            tape_dx[i]
        );
    }
}
