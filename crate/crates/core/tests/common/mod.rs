//! Helpers shared by the integration tests.
#![allow(dead_code)]

use gradleak::autodiff::{Graph, Op, Var};
use gradleak::rng::CounterRng;
use gradleak::Tensor;

pub fn uniform(dims: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = CounterRng::new(seed);
    let n = dims.iter().product();
    Tensor::new(
        dims.to_vec(),
        (0..n).map(|_| rng.uniform(lo, hi) as f32).collect(),
    )
    .unwrap()
}

/// Uniform values with magnitude in `[lo, hi]` and random sign.
pub fn away_from_zero(dims: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = CounterRng::new(seed);
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform(lo, hi);
            (if rng.open01() < 0.5 { -m } else { m }) as f32
        })
        .collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

pub fn with_entry(t: &Tensor, i: usize, v: f32) -> Tensor {
    let mut d = t.data().to_vec();
    d[i] = v;
    Tensor::new(t.dims().to_vec(), d).unwrap()
}

/// Central difference with one Richardson step: `(4·D(h/2) − D(h)) / 3`.
/// `f(d)` returns the step actually taken (after rounding) and the value.
pub fn richardson(f: &mut dyn FnMut(f64) -> (f64, f64), h: f64) -> f64 {
    let d = |f: &mut dyn FnMut(f64) -> (f64, f64), h: f64| {
        let (sp, fp) = f(h);
        let (sm, fm) = f(-h);
        (fp - fm) / (sp - sm)
    };
    let d1 = d(f, h);
    let d2 = d(f, h / 2.0);
    (4.0 * d2 - d1) / 3.0
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Scalar function of several tensors recorded on a graph.
pub type GraphFn<'a> = dyn Fn(&Graph, &[Var]) -> Var + 'a;

pub fn eval(f: &GraphFn<'_>, xs: &[Tensor]) -> f64 {
    let g = Graph::new();
    let vs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    f(&g, &vs).value().item() as f64
}

pub fn analytic(f: &GraphFn<'_>, xs: &[Tensor]) -> Vec<Tensor> {
    let g = Graph::new();
    let vs: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&g, &vs);
    g.grad(&out, &vs).unwrap()
}

/// Worst relative error between the tape gradient and central differences,
/// over every coordinate of tensors with at most `dense` entries and over the
/// `sampled` largest-gradient coordinates of bigger ones.
pub fn max_fd_error(
    f: &GraphFn<'_>,
    xs: &[Tensor],
    h: f64,
    floor: f64,
    dense: usize,
    sampled: usize,
) -> (f64, String) {
    let grads = analytic(f, xs);
    let mut worst = (0.0, String::new());
    for (k, (x, gk)) in xs.iter().zip(&grads).enumerate() {
        assert_eq!(x.dims(), gk.dims());
        let coords: Vec<usize> = if x.len() <= dense {
            (0..x.len()).collect()
        } else {
            let mut idx: Vec<usize> = (0..x.len()).collect();
            idx.sort_by(|&a, &b| {
                gk.data()[b]
                    .abs()
                    .total_cmp(&gk.data()[a].abs())
                    .then(a.cmp(&b))
            });
            let mut pick: Vec<usize> = idx[..sampled].to_vec();
            let step = (x.len() / sampled).max(1);
            pick.extend((0..x.len()).step_by(step).take(sampled));
            pick
        };
        for i in coords {
            let base = x.data()[i] as f64;
            let mut probe = |d: f64| {
                let mut moved = xs.to_vec();
                let v = (base + d) as f32;
                moved[k] = with_entry(x, i, v);
                (v as f64 - base, eval(f, &moved))
            };
            let fd = richardson(&mut probe, h);
            let e = rel_err(gk.data()[i] as f64, fd, floor);
            if e > worst.0 {
                worst = (
                    e,
                    format!("input {k} coord {i}: tape {} fd {fd}", gk.data()[i]),
                );
            }
        }
    }
    worst
}

/// Value of `f` and the sign pattern of every ReLU input on its tape.
pub fn eval_with_pattern(f: &GraphFn<'_>, xs: &[Tensor]) -> (f64, Vec<bool>) {
    let g = Graph::new();
    let vs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let out = f(&g, &vs).value().item() as f64;
    let mut pattern = Vec::new();
    for id in 0..g.len() {
        let node = g.node_at(id).unwrap();
        if matches!(node.op, Op::Relu) {
            let input = g.node_at(node.parents[0]).unwrap().value;
            pattern.extend(input.data().iter().map(|&v| v > 0.0));
        }
    }
    (out, pattern)
}

/// Like [`max_fd_error`] for ReLU networks. Probes that flip any ReLU input
/// sign cross a kink, where the derivative is undefined; such coordinates are
/// skipped. Returns the worst error, its location, the number of coordinates
/// compared per input and the number skipped overall.
pub fn max_fd_error_piecewise(
    f: &GraphFn<'_>,
    xs: &[Tensor],
    h: f64,
    floor: f64,
    sampled: usize,
) -> (f64, String, Vec<usize>, usize) {
    let grads = analytic(f, xs);
    let (_, base_pattern) = eval_with_pattern(f, xs);
    let mut worst = (0.0, String::new());
    let mut checked = vec![0; xs.len()];
    let mut skipped = 0;
    for (k, (x, gk)) in xs.iter().zip(&grads).enumerate() {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&a, &b| {
            gk.data()[b]
                .abs()
                .total_cmp(&gk.data()[a].abs())
                .then(a.cmp(&b))
        });
        // Evenly spaced coordinates, then the largest gradients, until enough
        // kink-free ones are found.
        let step = (x.len() / sampled).max(1);
        let order: Vec<usize> = (0..x.len())
            .step_by(step)
            .chain(idx.iter().copied())
            .collect();
        for (tried, &i) in order.iter().enumerate() {
            if checked[k] >= sampled || tried >= 32 * sampled {
                break;
            }
            let base = x.data()[i] as f64;
            let mut crossed = false;
            let mut probe = |d: f64| {
                let mut moved = xs.to_vec();
                let v = (base + d) as f32;
                moved[k] = with_entry(x, i, v);
                let (val, pattern) = eval_with_pattern(f, &moved);
                crossed |= pattern != base_pattern;
                (v as f64 - base, val)
            };
            // Plain central difference: inside one linear region the
            // truncation error is tiny, and Richardson would triple the
            // round-off.
            let (sp, fp) = probe(h);
            let (sm, fm) = probe(-h);
            let fd = (fp - fm) / (sp - sm);
            if crossed {
                skipped += 1;
                continue;
            }
            checked[k] += 1;
            let e = rel_err(gk.data()[i] as f64, fd, floor);
            if e > worst.0 {
                worst = (
                    e,
                    format!("input {k} coord {i}: tape {} fd {fd}", gk.data()[i]),
                );
            }
        }
    }
    (worst.0, worst.1, checked, skipped)
}
