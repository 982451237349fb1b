//! Minimizers on objectives with known minimizers.

use gradleak::flsim::GradientUpdate;
use gradleak::nn::ParamSet;
use gradleak::optim::{
    adam_minimize, lbfgs_minimize, minimize, sgd_step, Hooks, Minimization, OptimizerConfig,
};
use gradleak::{Result, Tensor};

type Fx = Box<dyn FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>>;

fn values(x: &Tensor) -> Vec<f64> {
    x.data().iter().map(|&v| v as f64).collect()
}

fn rosenbrock() -> Fx {
    Box::new(|x: &[Tensor]| {
        let v = values(&x[0]);
        let (a, b) = (v[0], v[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let ga = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        let gb = 200.0 * (b - a * a);
        Ok((f, vec![Tensor::vector(&[ga as f32, gb as f32])]))
    })
}

const A: [[f64; 3]; 3] = [[4.0, 1.0, 0.5], [1.0, 3.0, -0.5], [0.5, -0.5, 2.0]];
const B: [f64; 3] = [1.0, -2.0, 0.5];

/// `½xᵀAx − bᵀx`.
fn spd_quadratic() -> Fx {
    Box::new(|x: &[Tensor]| {
        let v = values(&x[0]);
        let ax: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| A[i][j] * v[j]).sum())
            .collect();
        let f = 0.5 * (0..3).map(|i| v[i] * ax[i]).sum::<f64>()
            - (0..3).map(|i| B[i] * v[i]).sum::<f64>();
        let g: Vec<f32> = (0..3).map(|i| (ax[i] - B[i]) as f32).collect();
        Ok((f, vec![Tensor::vector(&g)]))
    })
}

/// Cramer's rule.
fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for i in 0..3 {
            m[i][k] = b[i];
        }
        *o = det(m) / d;
    }
    out
}

fn sum_sq() -> Fx {
    Box::new(|x: &[Tensor]| {
        let v = values(&x[0]);
        let g: Vec<f32> = v.iter().map(|a| (2.0 * a) as f32).collect();
        Ok((v.iter().map(|a| a * a).sum(), vec![Tensor::vector(&g)]))
    })
}

/// Smooth convex but not quadratic: `Σ log cosh(xᵢ − cᵢ) + ½‖x‖²`, over two tensors.
fn logcosh() -> Fx {
    Box::new(|x: &[Tensor]| {
        let mut f = 0.0;
        let mut grads = Vec::new();
        for (k, t) in x.iter().enumerate() {
            let mut g = Vec::new();
            for (i, &v) in t.data().iter().enumerate() {
                let (v, c) = (v as f64, (i as f64 - 1.5) * (k as f64 + 1.0));
                f += (v - c).cosh().ln() + 0.5 * v * v;
                g.push(((v - c).tanh() + v) as f32);
            }
            grads.push(Tensor::new(t.dims().to_vec(), g).unwrap());
        }
        Ok((f, grads))
    })
}

#[test]
pub fn lbfgs_solves_rosenbrock() {
    let r = lbfgs_minimize(
        &mut rosenbrock(),
        &[Tensor::vector(&[-1.2, 1.0])],
        &OptimizerConfig::lbfgs(200),
        Hooks::default(),
    )
    .unwrap();
    assert!(r.iterations <= 200);
    for v in r.x[0].data() {
        assert!(
            (*v as f64 - 1.0).abs() <= 1e-5,
            "ended at {:?} after {} iterations",
            r.x[0].data(),
            r.iterations
        );
    }
}

#[test]
pub fn lbfgs_matches_linear_solve_on_spd_quadratic() {
    let expect = solve3(A, B);
    let r = lbfgs_minimize(
        &mut spd_quadratic(),
        &[Tensor::vector(&[0.0, 0.0, 0.0])],
        &OptimizerConfig::lbfgs(100),
        Hooks::default(),
    )
    .unwrap();
    for (a, b) in r.x[0].data().iter().zip(expect) {
        assert!(
            (*a as f64 - b).abs() <= 1e-6,
            "{:?} vs {expect:?}",
            r.x[0].data()
        );
    }
}

#[test]
pub fn adam_shrinks_norm_below_threshold() {
    let cfg = OptimizerConfig::adam(500, 0.05);
    let x0 = Tensor::vector(&[1.0, -0.5, 0.75, 2.0]);
    let mut reached = None;
    let mut hook = |i: usize, x: &[Tensor]| {
        if reached.is_none() && values(&x[0]).iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-3 {
            reached = Some(i);
        }
    };
    let hooks = Hooks {
        bounds: vec![],
        on_iter: Some(&mut hook),
    };
    adam_minimize(&mut sum_sq(), &[x0], &cfg, hooks).unwrap();
    assert!(
        reached.is_some(),
        "‖x‖ never dropped below 1e-3 in 500 steps"
    );
}

type Case = (&'static str, fn() -> Fx, Vec<Tensor>);

fn convex_suite() -> Vec<Case> {
    vec![
        (
            "sum_sq",
            sum_sq as fn() -> Fx,
            vec![Tensor::vector(&[1.0, -2.0, 0.5])],
        ),
        (
            "spd",
            spd_quadratic,
            vec![Tensor::vector(&[3.0, -1.0, 2.0])],
        ),
        (
            "logcosh",
            logcosh,
            vec![
                Tensor::vector(&[0.0; 4]),
                Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
            ],
        ),
        ("rosenbrock", rosenbrock, vec![Tensor::vector(&[-1.2, 1.0])]),
    ]
}

fn configs() -> Vec<OptimizerConfig> {
    vec![
        OptimizerConfig::lbfgs(40),
        OptimizerConfig::adam(200, 0.01),
        OptimizerConfig::sgd(100, 1e-3),
    ]
}

fn check_trace(name: &str, r: &Minimization) {
    assert_eq!(r.trace.len(), r.iterations, "{name}");
    assert!(r.trace.iter().all(|v| v.is_finite()), "{name}");
    assert!(r.final_loss.is_finite());
}

#[test]
pub fn minimizers_never_end_above_the_start() {
    for (name, make, x0) in convex_suite() {
        for cfg in configs() {
            let r = minimize(&mut make(), &x0, &cfg, Hooks::default()).unwrap();
            check_trace(name, &r);
            assert!(
                r.final_loss <= r.initial_loss,
                "{name} {}: {} > {}",
                cfg.kind,
                r.final_loss,
                r.initial_loss
            );
            // The reported final loss is the loss at the returned iterate.
            let (at_x, _) = make()(&r.x).unwrap();
            assert_eq!(at_x, r.final_loss, "{name} {}", cfg.kind);
        }
    }
}

#[test]
pub fn lbfgs_trace_never_increases() {
    for (name, make, x0) in convex_suite() {
        let r = lbfgs_minimize(
            &mut make(),
            &x0,
            &OptimizerConfig::lbfgs(40),
            Hooks::default(),
        )
        .unwrap();
        assert!(r.initial_loss >= r.trace[0], "{name}");
        assert!(
            r.trace.windows(2).all(|w| w[1] <= w[0]),
            "{name}: {:?}",
            r.trace
        );
    }
}

#[test]
pub fn runs_are_bit_identical() {
    for (name, make, x0) in convex_suite() {
        for cfg in configs() {
            let a = minimize(&mut make(), &x0, &cfg, Hooks::default()).unwrap();
            let b = minimize(&mut make(), &x0, &cfg, Hooks::default()).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.trace), bits(&b.trace), "{name} {}", cfg.kind);
            assert_eq!(a.x, b.x);
        }
    }
}

#[test]
pub fn iteration_hook_sees_every_iteration() {
    for cfg in configs() {
        let mut seen = Vec::new();
        let mut hook = |i: usize, _: &[Tensor]| seen.push(i);
        let hooks = Hooks {
            bounds: vec![],
            on_iter: Some(&mut hook),
        };
        let r = minimize(
            &mut spd_quadratic(),
            &[Tensor::vector(&[3.0, -1.0, 2.0])],
            &cfg.clone().with_tolerance(0.0),
            hooks,
        )
        .unwrap();
        assert_eq!(seen.len(), r.iterations, "{}", cfg.kind);
        assert!(seen.windows(2).all(|w| w[1] == w[0] + 1));
    }
}

#[test]
pub fn invalid_configs_are_rejected() {
    let mut bad = vec![
        OptimizerConfig::lbfgs(0),
        OptimizerConfig::adam(10, 0.0),
        OptimizerConfig::sgd(10, -1.0),
    ];
    let mut betas = OptimizerConfig::adam(10, 0.1);
    betas.adam_betas = (0.9, 1.0);
    bad.push(betas);
    for cfg in bad {
        assert!(
            minimize(
                &mut sum_sq(),
                &[Tensor::vector(&[1.0])],
                &cfg,
                Hooks::default()
            )
            .is_err(),
            "{cfg:?}"
        );
    }
}

#[test]
pub fn non_finite_gradient_reports_the_iteration() {
    let mut calls = 0;
    let mut f = move |x: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        calls += 1;
        let v = x[0].data()[0];
        let g = if calls > 3 { f32::NAN } else { 2.0 * v };
        Ok(((v * v) as f64, vec![Tensor::vector(&[g])]))
    };
    let err = adam_minimize(
        &mut f,
        &[Tensor::vector(&[1.0])],
        &OptimizerConfig::adam(10, 0.1),
        Hooks::default(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("iteration"), "{err}");
}

fn params(v: &[f32]) -> ParamSet {
    ParamSet {
        entries: vec![("w".into(), Tensor::vector(v))],
        step_count: 0,
    }
}

fn grads(v: &[f32]) -> GradientUpdate {
    GradientUpdate {
        entries: vec![("w".into(), Tensor::vector(v))],
        batch_size: 1,
    }
}

#[test]
pub fn two_sgd_steps_equal_one_summed_step() {
    let p = params(&[0.3, -1.2, 2.5, 0.0]);
    let (g1, g2) = ([0.5, 1.5, -0.25, 2.0], [-1.0, 0.75, 0.5, 0.125]);
    let lr = 0.1;
    let twice = sgd_step(&sgd_step(&p, &grads(&g1), lr).unwrap(), &grads(&g2), lr).unwrap();
    let sum: Vec<f32> = g1.iter().zip(g2).map(|(a, b)| a + b).collect();
    let once = sgd_step(&p, &grads(&sum), lr).unwrap();
    let (a, b) = (&twice.entries[0].1, &once.entries[0].1);
    assert!(a.max_abs_diff(b) <= 1e-6, "{a:?} vs {b:?}");
}

#[test]
pub fn sgd_step_rejects_mismatched_shapes() {
    assert!(sgd_step(&params(&[1.0, 2.0]), &grads(&[1.0]), 0.1).is_err());
}
