use proptest::prelude::*;

use skipconv::engine::{run_stream, Network, ResetPeriod, SkipEngine};
use skipconv::gates::{input_norm_gate, output_norm_gate, structure_mask, GateConfig, GateMask};
use skipconv::tensor::{conv2d, conv2d_im2col, relative_deviation, ConvGeometry, ConvLayerSpec, Tensor};

fn geometry() -> impl Strategy<Value = ConvGeometry> {
    (1..=4usize, 1..=4usize, 1..=3usize, 1..=3usize, 0..=2usize, 0..=2usize, 1..=2usize, 1..=2usize).prop_map(
        |(kh, kw, sh, sw, ph, pw, dh, dw)| ConvGeometry {
            kernel: (kh, kw),
            stride: (sh, sw),
            padding: (ph, pw),
            dilation: (dh, dw),
        },
    )
}

fn values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, n)
}

/// A layer plus an input it accepts.
fn layer_and_input(bias: bool) -> impl Strategy<Value = (ConvLayerSpec, Tensor)> {
    (geometry(), 1..=3usize, 1..=3usize, 0..=6usize, 0..=6usize).prop_flat_map(move |(g, ci, co, eh, ew)| {
        let h = (g.kernel.0 - 1) * g.dilation.0 + 1 + eh;
        let w = (g.kernel.1 - 1) * g.dilation.1 + 1 + ew;
        let nw = co * ci * g.kernel.0 * g.kernel.1;
        (values(nw), values(co), values(ci * h * w)).prop_map(move |(wv, bv, xv)| {
            let mut layer = ConvLayerSpec::new(co, ci, g, wv).unwrap();
            if bias {
                layer = layer.with_bias(bv).unwrap();
            }
            (layer, Tensor::new(ci, h, w, xv).unwrap())
        })
    })
}

/// Residual where about half the pixels are exactly zero.
fn sparse(x: &Tensor) -> Tensor {
    let w = x.width();
    Tensor::from_fn(x.channels(), x.height(), w, |c, y, xx| {
        let v = x.get(c, y, xx);
        if (y * w + xx) % 2 == 0 && v > 0.0 {
            0.0
        } else {
            v * 1e-2
        }
    })
}

fn l1(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v.abs() as f64).sum()
}

fn frames(seed: u64, n: usize, drift: f32) -> Vec<Tensor> {
    (0..n)
        .map(|t| {
            Tensor::from_fn(2, 10, 10, |c, y, x| {
                let base = ((seed as usize + c * 7 + y * 3 + x * 5) % 11) as f32 / 11.0;
                base + drift * t as f32 * ((x + y) % 3) as f32
            })
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn im2col_matches_direct_conv((layer, x) in layer_and_input(true)) {
        let a = conv2d(&x, &layer).unwrap();
        let b = conv2d_im2col(&x, &layer).unwrap();
        prop_assert!(relative_deviation(&a, &b).unwrap() <= 1e-5);
    }
}

proptest! {
    #[test]
    fn conv_without_bias_is_linear((layer, x) in layer_and_input(false), k in -3.0f32..3.0) {
        let y = x.map(|v| v * 0.5 - 0.1);
        let lhs = conv2d(&x.add(&y.map(|v| v * k)).unwrap(), &layer).unwrap();
        let rhs = conv2d(&x, &layer).unwrap().add(&conv2d(&y, &layer).unwrap().map(|v| v * k)).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs().max(b.abs())));
        }
    }

    #[test]
    fn young_bound_holds((layer, x) in layer_and_input(false)) {
        let out = conv2d(&x, &layer).unwrap();
        let wl1: f64 = layer.weights.iter().map(|v| v.abs() as f64).sum();
        prop_assert!(l1(&out) <= wl1 * l1(&x) * (1.0 + 1e-5));
    }

    #[test]
    fn raising_epsilon_never_fires_more(
        (layer, x) in layer_and_input(false),
        e1 in 0.0f32..0.05,
        de in 0.0f32..0.05,
    ) {
        let r = sparse(&x);
        for (gate, cfg) in [
            (input_norm_gate as fn(&_, &_, &_) -> _, GateConfig::input_norm as fn(f32) -> GateConfig),
            (output_norm_gate, GateConfig::output_norm),
        ] {
            let lo: GateMask = gate(&r, &layer, &cfg(e1)).unwrap();
            let hi: GateMask = gate(&r, &layer, &cfg(e1 + de)).unwrap();
            prop_assert!(hi.positions().all(|p| lo.values()[p]));
        }
    }

    #[test]
    fn zero_residual_never_fires((layer, x) in layer_and_input(false), eps in 1e-6f32..1.0) {
        let r = x.map(|_| 0.0);
        prop_assert_eq!(output_norm_gate(&r, &layer, &GateConfig::output_norm(eps)).unwrap().fired(), 0);
        prop_assert_eq!(input_norm_gate(&r, &layer, &GateConfig::input_norm(eps)).unwrap().fired(), 0);
    }

    #[test]
    fn structuring_is_idempotent_superset(
        h in 1..40usize,
        w in 1..40usize,
        b in prop::sample::select(vec![1usize, 2, 4, 8]),
        seed in any::<u64>(),
    ) {
        let values = (0..h * w).map(|i| (seed.rotate_left(i as u32 % 64) ^ i as u64) % 7 == 0).collect();
        let m = GateMask::new(h, w, values).unwrap();
        let s = structure_mask(&m, b);
        prop_assert!(s.is_block_constant(b));
        prop_assert_eq!(&structure_mask(&s, b), &s);
        prop_assert!(m.positions().all(|p| s.values()[p]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn all_ones_gates_track_dense(seed in 0..1000u64, drift in 0.0f32..0.2) {
        let net = Network::random(&[2, 4, 3], ConvGeometry::same(3), GateConfig::all_ones(), seed).unwrap();
        let fs = frames(seed, 6, drift);
        let res = run_stream(&SkipEngine::new(net.clone()).unwrap(), &fs, ResetPeriod::Never).unwrap();
        for (o, f) in res.outputs.iter().zip(&fs) {
            prop_assert!(relative_deviation(o, &net.dense_forward(f).unwrap()).unwrap() <= 1e-4);
        }
    }

    #[test]
    fn reference_frames_are_exactly_dense(seed in 0..1000u64, period in 1..4usize, eps in 0.0f32..0.5) {
        let net = Network::random(&[2, 4, 3], ConvGeometry::same(3), GateConfig::input_norm(eps), seed).unwrap();
        let fs = frames(seed, 7, 0.05);
        let reset = ResetPeriod::every(period).unwrap();
        let res = run_stream(&SkipEngine::new(net.clone()).unwrap(), &fs, reset).unwrap();
        for (t, (o, f)) in res.outputs.iter().zip(&fs).enumerate() {
            if reset.is_reference(t) {
                prop_assert_eq!(o, &net.dense_forward(f).unwrap());
            }
        }
    }

    #[test]
    fn replay_is_deterministic(seed in 0..1000u64, eps in 0.0f32..0.05) {
        let net = Network::random(&[2, 4, 3], ConvGeometry::same(3), GateConfig::output_norm(eps), seed).unwrap();
        let engine = SkipEngine::new(net).unwrap();
        let fs = frames(seed, 5, 0.03);
        let a = run_stream(&engine, &fs, ResetPeriod::Never).unwrap();
        let b = run_stream(&engine, &fs, ResetPeriod::Never).unwrap();
        prop_assert_eq!(&a.outputs, &b.outputs);
        prop_assert_eq!(a.report.total_effective_macs(), b.report.total_effective_macs());

        let mut stream = engine.stream();
        let (first, _) = stream.reference(&fs[0]).unwrap();
        prop_assert_eq!(&first, &a.outputs[0]);
        for (f, expect) in fs.iter().zip(&a.outputs).skip(1) {
            let (out, _) = stream.step(f).unwrap();
            prop_assert_eq!(&out, expect);
        }
    }
}
