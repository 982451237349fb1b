//! Property tests over randomly generated inputs.

mod common;

use std::path::Path;

use common::{max_fd_error, GraphFn};
use gradleak::autodiff::{Graph, Var};
use gradleak::data::{
    decode_pnm, decode_tensor, encode_pnm, encode_tensor, resize_bilinear, ImageSample,
};
use gradleak::defenses::topk_compress;
use gradleak::flsim::{fedavg_aggregate, GradientUpdate};
use gradleak::metrics::{asr, mse, ssim, SsimMode};
use gradleak::nn::{build_model, forward, Arch, ModelSpec};
use gradleak::Tensor;
use proptest::prelude::*;

fn tensor(dims: Vec<usize>, lo: f32, hi: f32) -> impl Strategy<Value = Tensor> {
    let n: usize = dims.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(dims.clone(), d).unwrap())
}

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    tensor(vec![c, h, w], 0.0, 1.0)
}

fn update(dims: Vec<Vec<usize>>) -> impl Strategy<Value = GradientUpdate> {
    let parts: Vec<_> = dims.into_iter().map(|d| tensor(d, -1.0, 1.0)).collect();
    parts.prop_map(|ts| GradientUpdate {
        entries: ts
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t))
            .collect(),
        batch_size: 1,
    })
}

fn small_loss(x: &Var, w: &Var) -> Var {
    let h = x.conv2d(w, 1, 1).unwrap().sigmoid().add_scalar(-0.5);
    h.mul(&h)
        .unwrap()
        .sum()
        .add(&x.tanh().scale(0.2).sum())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn op_gradients_match_finite_differences(
        x in tensor(vec![2, 3, 3], -1.5, 1.5),
        w in tensor(vec![2, 2, 3, 3], -0.7, 0.7),
        v in tensor(vec![3, 3], -1.5, 1.5),
        t in tensor(vec![9], 0.0, 1.0),
    ) {
        // Each loss stays O(1) so single-precision round-off in its value is
        // well below the tolerance.
        let conv = |_: &Graph, p: &[Var]| small_loss(&p[0], &p[1]);
        let mm = |_: &Graph, p: &[Var]| p[0].matmul(&p[0].transpose().unwrap()).unwrap().scale(0.3).tanh().sum();
        let target = t.clone();
        let sm = move |g: &Graph, p: &[Var]| p[0].reshape(&[9]).unwrap().log_softmax().mul(&g.constant(target.clone())).unwrap().scale(0.2).sum();
        let pooled = |_: &Graph, p: &[Var]| p[0].pad_channels(0, 2).unwrap().avg_pool2().unwrap().sum_sq().unwrap();
        let cases: [(&str, &GraphFn<'_>, Vec<Tensor>); 4] = [
            ("conv", &conv, vec![x.clone(), w]),
            ("matmul", &mm, vec![v.clone()]),
            ("log_softmax", &sm, vec![v]),
            ("pool", &pooled, vec![x]),
        ];
        for (name, f, xs) in cases {
            let (err, at) = max_fd_error(f, &xs, 1.0 / 16.0, 1e-2, 64, 8);
            prop_assert!(err < 1e-3, "{name}: relative error {err:.3e} at {at}");
        }
    }

    #[test]
    fn tape_replay_is_bit_identical(x in tensor(vec![2, 3, 3], -1.0, 1.0), w in tensor(vec![2, 2, 3, 3], -1.0, 1.0)) {
        let run = || {
            let g = Graph::new();
            let (xv, wv) = (g.leaf(x.clone()), g.leaf(w.clone()));
            let out = small_loss(&xv, &wv);
            let grads = g.grad(&out, &[xv, wv]).unwrap();
            (out.value(), grads)
        };
        let (a, ga) = run();
        let (b, gb) = run();
        prop_assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        for (p, q) in ga.iter().zip(&gb) {
            prop_assert!(p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn adjoint_is_linear(x in tensor(vec![6], -1.0, 1.0), a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let f = |v: &Var| v.sigmoid().sum_sq().unwrap();
        let h = |v: &Var| v.tanh().mul(v).unwrap().sum();
        let g = Graph::new();
        let xv = g.leaf(x.clone());
        let gf = g.grad(&f(&xv), std::slice::from_ref(&xv)).unwrap().remove(0);
        let gh = g.grad(&h(&xv), std::slice::from_ref(&xv)).unwrap().remove(0);
        let combo = f(&xv).scale(a).add(&h(&xv).scale(b)).unwrap();
        let gc = g.grad(&combo, &[xv]).unwrap().remove(0);
        for i in 0..6 {
            let expect = a as f64 * gf.data()[i] as f64 + b as f64 * gh.data()[i] as f64;
            prop_assert!((gc.data()[i] as f64 - expect).abs() <= 1e-6, "entry {i}: {} vs {expect}", gc.data()[i]);
        }
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in image(2, 5, 5), b in image(2, 5, 5), w in 1usize..=5) {
        for mode in [SsimMode::Global, SsimMode::Windowed(w)] {
            let ab = ssim(&a, &b, mode).unwrap();
            let ba = ssim(&b, &a, mode).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn windowed_ssim_over_the_full_image_is_global(a in image(3, 4, 6), b in image(3, 4, 6)) {
        // A window covering the whole image; the window is square, so use a
        // square image.
        let a = resize_bilinear(&a, 6, 6).unwrap();
        let b = resize_bilinear(&b, 6, 6).unwrap();
        let g = ssim(&a, &b, SsimMode::Global).unwrap();
        let w = ssim(&a, &b, SsimMode::Windowed(6)).unwrap();
        prop_assert!((g - w).abs() <= 1e-9);
    }

    #[test]
    fn mse_is_zero_exactly_for_equal_images(a in image(1, 3, 3), i in 0usize..9, d in 1e-3f32..0.5) {
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let mut other = a.data().to_vec();
        other[i] = if other[i] > 0.5 { other[i] - d } else { other[i] + d };
        let b = Tensor::new(vec![1, 3, 3], other).unwrap();
        prop_assert!(mse(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn asr_does_not_increase_with_threshold(values in prop::collection::vec(-1.0f64..1.0, 1..50), t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(asr(&values, lo).unwrap() >= asr(&values, hi).unwrap());
    }

    #[test]
    fn topk_keeps_the_requested_count_per_tensor(u in update(vec![vec![7], vec![2, 5]]), f in 0.01f64..=1.0) {
        let out = topk_compress(&u, f).unwrap();
        for ((_, raw), (_, kept)) in u.entries.iter().zip(&out.entries) {
            let n = raw.len();
            let k = (((f * n as f64) - 1e-9).ceil() as usize).min(n);
            let nonzero_in = raw.data().iter().filter(|v| **v != 0.0).count();
            let nonzero_out = kept.data().iter().filter(|v| **v != 0.0).count();
            prop_assert_eq!(nonzero_out, k.min(nonzero_in));
            // Kept entries are unchanged and no smaller than any dropped one.
            let min_kept = raw.data().iter().zip(kept.data()).filter(|(_, k)| **k != 0.0).map(|(r, _)| r.abs()).fold(f32::INFINITY, f32::min);
            for (r, k) in raw.data().iter().zip(kept.data()) {
                if *k != 0.0 {
                    prop_assert_eq!(r, k);
                } else {
                    prop_assert!(r.abs() <= min_kept);
                }
            }
        }
    }

    #[test]
    fn fedavg_ignores_input_order(a in update(vec![vec![3], vec![2, 2]]), b in update(vec![vec![3], vec![2, 2]]), c in update(vec![vec![3], vec![2, 2]]),
                                  wa in 0.1f64..5.0, wb in 0.1f64..5.0, wc in 0.1f64..5.0) {
        let fwd = fedavg_aggregate(&[(a.clone(), wa), (b.clone(), wb), (c.clone(), wc)]).unwrap();
        let rev = fedavg_aggregate(&[(c, wc), (a, wa), (b, wb)]).unwrap();
        for (x, y) in fwd.tensors().zip(rev.tensors()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                prop_assert!((p - q).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn tensor_container_round_trips_bit_exactly(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let t = common::uniform(&dims, seed, -1e3, 1e3);
        prop_assert_eq!(t.len(), n);
        let back = decode_tensor(&encode_tensor(&t).unwrap(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn pnm_round_trip_is_exact_on_quantized_images(c in prop::sample::select(vec![1usize, 3]), h in 1usize..6, w in 1usize..6,
                                                   bytes in prop::collection::vec(any::<u8>(), 75)) {
        let data: Vec<f32> = bytes[..c * h * w].iter().map(|&b| b as f32 / 255.0).collect();
        let t = Tensor::new(vec![c, h, w], data).unwrap();
        let encoded = encode_pnm(&t).unwrap();
        let back = decode_pnm(&encoded, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(encode_pnm(&back).unwrap(), encoded);
    }

    #[test]
    fn pnm_round_trip_error_is_within_half_a_level(img in image(3, 4, 4)) {
        let back = decode_pnm(&encode_pnm(&img).unwrap(), Path::new("mem")).unwrap();
        prop_assert!(back.max_abs_diff(&img) as f64 <= 1.0 / 510.0 + 1e-7);
    }

    #[test]
    fn resize_is_identity_at_the_same_size(img in image(3, 5, 4)) {
        prop_assert_eq!(resize_bilinear(&img, 5, 4).unwrap(), img);
    }

    #[test]
    fn resize_commutes_with_channel_permutation(img in image(3, 4, 5), oh in 1usize..9, ow in 1usize..9) {
        let permute = |t: &Tensor| {
            let (_, h, w) = t.chw();
            let plane = h * w;
            let d = t.data();
            let out: Vec<f32> = [2, 0, 1].iter().flat_map(|&c| d[c * plane..(c + 1) * plane].to_vec()).collect();
            Tensor::new(t.dims().to_vec(), out).unwrap()
        };
        let a = permute(&resize_bilinear(&img, oh, ow).unwrap());
        let b = resize_bilinear(&permute(&img), oh, ow).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn image_samples_are_clamped(raw in tensor(vec![3, 2, 2], -2.0, 2.0)) {
        let s = ImageSample::new(raw, 0, "x").unwrap();
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn forward_depends_only_on_params_and_input(seed in any::<u64>(), x in image(3, 8, 8)) {
        for arch in [Arch::Mlp, Arch::Cnn4, Arch::Cnn7, Arch::TinyRes] {
            let spec = ModelSpec::new(arch, 8, 3);
            let p = build_model(&spec, seed).unwrap();
            let a = forward(&p, &spec, &x).unwrap();
            // Unrelated work in between must not change the result.
            let other = build_model(&spec, seed ^ 1).unwrap();
            forward(&other, &spec, &x).unwrap();
            let b = forward(&p, &spec, &x).unwrap();
            prop_assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
}

/// Closed-form parameter counts written out from the layer tables.
#[test]
fn parameter_counts_match_closed_forms() {
    let conv = |cin: usize, cout: usize| cout * cin * 9 + cout;
    let fc = |fin: usize, fout: usize| fout * fin + fout;
    for (size, c, k) in [(32, 3, 4), (16, 1, 2), (8, 3, 10)] {
        let spec = |arch| ModelSpec::new(arch, size, k).with_input(c, size, size);
        let mlp = fc(c * size * size, 256) + fc(256, k);
        let q = size / 4;
        let cnn4 = conv(c, 12) + 3 * conv(12, 12) + fc(12 * q * q, k);
        let e = size / 8;
        let cnn7 = conv(c, 16)
            + conv(16, 16)
            + conv(16, 32)
            + conv(32, 32)
            + conv(32, 64)
            + 2 * conv(64, 64)
            + fc(64 * e * e, k);
        let tinyres = conv(c, 16)
            + conv(16, 16)
            + conv(16, 16)
            + conv(16, 32)
            + conv(32, 32)
            + conv(32, 64)
            + conv(64, 64)
            + fc(64, k);
        assert_eq!(spec(Arch::Mlp).param_count().unwrap(), mlp);
        assert_eq!(spec(Arch::Cnn4).param_count().unwrap(), cnn4);
        assert_eq!(spec(Arch::Cnn7).param_count().unwrap(), cnn7);
        assert_eq!(spec(Arch::TinyRes).param_count().unwrap(), tinyres);
    }
}
