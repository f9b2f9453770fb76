use amcn::grid::{bilinear_resample, GeoGrid, GeoTransform, Ratio};
use amcn::nn::{gradcheck, Evaluation, Fault, GradcheckOptions, Graph, NnError, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn store_of(rng: &mut ChaCha8Rng, shapes: &[(&str, Vec<usize>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        let n = shape.iter().product();
        s.insert(*name, shape.clone(), rand_vec(rng, n)).unwrap();
    }
    s
}

/// Gradcheck of `build` with every store entry as a differentiable leaf. The
/// scalar objective is a Charbonnier distance of the output to a fixed random
/// target, so every output element matters.
fn check_op<F>(store: &mut ParamStore<f64>, tol: f64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> amcn::nn::Result<Var>,
{
    let target: std::cell::RefCell<Option<Tensor<f64>>> = Default::default();
    let report = gradcheck(
        store,
        &GradcheckOptions {
            tolerance: tol,
            ..Default::default()
        },
        |p, want| {
            let mut g = Graph::new();
            let vars: Vec<Var> = (0..p.len()).map(|i| g.param(p, i).unwrap()).collect();
            let out = build(&mut g, &vars)?;
            let shape = g.value(out).shape().to_vec();
            let t = target
                .borrow_mut()
                .get_or_insert_with(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(99);
                    let n = shape.iter().product();
                    Tensor::new(shape.clone(), rand_vec(&mut rng, n)).unwrap()
                })
                .clone();
            let t = g.input(t)?;
            let loss = g.charbonnier(out, t, 1e-3, false)?;
            let value = g.value(loss).data()[0];
            let grads = want.then(|| g.backward(loss).unwrap().for_params(p));
            Ok(Evaluation { loss: value, grads })
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    report.max_rel_error
}

fn t4(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = t4([2, 3, 4, 5], rand_vec(&mut rng, 120));
    let mut w = vec![0.0; 9];
    for c in 0..3 {
        w[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let wv = g.input(t4([3, 3, 1, 1], w)).unwrap();
    let bv = g.input(Tensor::zeros(vec![3])).unwrap();
    let y = g.conv2d(xv, wv, bv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_ones_kernel_sums_stencil() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(vec![1, 1, 4, 4], 1.0f32)).unwrap();
    let w = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0)).unwrap();
    let b = g.input(Tensor::zeros(vec![1])).unwrap();
    let y = g.conv2d(x, w, b).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[5], 9.0);
    assert_eq!(v[0], 4.0);
    assert_eq!(v[1], 6.0);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.input(Tensor::<f32>::zeros(vec![1, 2, 4, 4])).unwrap();
    let w = g.input(Tensor::zeros(vec![1, 3, 3, 3])).unwrap();
    let b = g.input(Tensor::zeros(vec![1])).unwrap();
    assert!(matches!(g.conv2d(x, w, b), Err(NnError::Shape { .. })));
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = store_of(
        &mut rng,
        &[("x", vec![2, 2, 5, 6]), ("w", vec![3, 2, 3, 3]), ("b", vec![3])],
    );
    check_op(&mut s, 1e-6, |g, v| g.conv2d(v[0], v[1], v[2]));
    let mut s = store_of(
        &mut rng,
        &[("x", vec![1, 4, 3, 3]), ("w", vec![2, 4, 1, 1]), ("b", vec![2])],
    );
    check_op(&mut s, 1e-6, |g, v| g.conv2d(v[0], v[1], v[2]));
}

#[test]
fn elementwise_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let z = g.input(Tensor::zeros(vec![1, 1, 1, 1])).unwrap();
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.5]);

    let x = t4([1, 2, 3, 3], rand_vec(&mut rng, 18));
    let xv = g.input(x.clone()).unwrap();
    let ones = g.input(Tensor::full(vec![1, 2, 3, 3], 1.0)).unwrap();
    let m = g.mul(xv, ones).unwrap();
    assert_eq!(g.value(m), &x);

    let a = g.input(t4([2, 3, 2, 2], rand_vec(&mut rng, 24))).unwrap();
    let b = g.input(t4([2, 7, 2, 2], rand_vec(&mut rng, 56))).unwrap();
    let c = g.concat(&[a, b]).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 10, 2, 2]);
    let a2 = g.slice_channels(c, 0, 3).unwrap();
    let b2 = g.slice_channels(c, 3, 7).unwrap();
    assert_eq!(g.value(a2), g.value(a));
    assert_eq!(g.value(b2), g.value(b));

    let bad = g.input(Tensor::zeros(vec![1, 2, 3, 4])).unwrap();
    assert!(g.add(xv, bad).is_err());
    let bad = g.input(Tensor::zeros(vec![2, 1, 3, 3])).unwrap();
    assert!(g.concat(&[a, bad]).is_err());
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shapes = [("a", vec![2, 2, 3, 3]), ("b", vec![2, 2, 3, 3])];
    let mut s = store_of(&mut rng, &shapes);
    check_op(&mut s, 1e-6, |g, v| {
        let p = g.mul(v[0], v[1])?;
        let q = g.sigmoid(v[1])?;
        let r = g.sub(p, q)?;
        let r = g.scale(r, 1.7)?;
        let r = g.add(r, v[0])?;
        g.relu(r)
    });
    let mut s = store_of(&mut rng, &shapes);
    check_op(&mut s, 1e-6, |g, v| {
        let c = g.concat(&[v[0], v[1], v[0]])?;
        g.slice_channels(c, 1, 4)
    });
}

#[test]
fn pool_and_fc_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(vec![2, 3, 4, 4], 2.5f64)).unwrap();
    let p = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(p).shape(), &[2, 3]);
    assert!(g.value(p).data().iter().all(|&v| v == 2.5));

    let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    let w = g.input(Tensor::new(vec![3, 3], eye).unwrap()).unwrap();
    let b = g.input(Tensor::zeros(vec![3])).unwrap();
    let xin = g.input(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap()).unwrap();
    let y = g.fully_connected(xin, w, b).unwrap();
    assert_eq!(g.value(y), g.value(xin));

    let mut g = Graph::new();
    let x = g.variable(Tensor::full(vec![1, 2, 3, 5], 1.0f64)).unwrap();
    let p = g.global_avg_pool(x).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().iter().all(|&d| (d - 1.0 / 15.0).abs() < 1e-15));
}

#[test]
fn pool_fc_and_gate_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = store_of(
        &mut rng,
        &[("x", vec![2, 3, 4, 4]), ("w", vec![3, 3]), ("b", vec![3])],
    );
    check_op(&mut s, 1e-6, |g, v| {
        let p = g.global_avg_pool(v[0])?;
        let f = g.fully_connected(p, v[1], v[2])?;
        let gate = g.sigmoid(f)?;
        g.mul_channel_gate(v[0], gate)
    });
    let mut s = store_of(&mut rng, &[("x", vec![2, 3, 4, 4]), ("m", vec![2, 1, 4, 4])]);
    check_op(&mut s, 1e-6, |g, v| {
        let gate = g.sigmoid(v[1])?;
        g.mul_spatial_gate(v[0], gate)
    });
}

#[test]
fn resize_matches_raster_resampler() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vals: Vec<f32> = (0..144).map(|_| rng.gen_range(0.0..10.0)).collect();
    let grid = GeoGrid::new(12, 12, GeoTransform::new(0.0, 0.0, 1.0).unwrap(), vals.clone(), -9999.0).unwrap();
    let want = bilinear_resample(&grid, Ratio::down(3)).unwrap();

    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f32(vec![1, 1, 12, 12], &vals).unwrap()).unwrap();
    let y = g.resize(x, Ratio::down(3)).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
    for (a, b) in g.value(y).data().iter().zip(want.values()) {
        assert!((a - *b as f64).abs() < 1e-6, "{a} vs {b}");
    }

    let mut g32 = Graph::<f32>::new();
    let x = g32.input(Tensor::from_f32(vec![1, 1, 12, 12], &vals).unwrap()).unwrap();
    let y = g32.resize(x, Ratio::down(3)).unwrap();
    for (a, b) in g32.value(y).data().iter().zip(want.values()) {
        assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
    }

    let up = g32.resize(x, Ratio::up(2)).unwrap();
    assert_eq!(g32.value(up).shape(), &[1, 1, 24, 24]);
    assert!(matches!(g32.resize(x, Ratio::down(5)), Err(NnError::Resize(_))));
}

#[test]
fn resize_of_constant_and_its_transpose() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::full(vec![1, 2, 8, 8], 3.25)).unwrap();
    let y = g.resize(x, Ratio::down(2)).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 3.25));
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    // each output pixel averages the central 2x2 pair, so each input gets 1/4
    assert!(grads.get(x).unwrap().iter().all(|&d| (d - 0.25).abs() < 1e-15));
}

#[test]
fn resize_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = store_of(&mut rng, &[("x", vec![2, 1, 8, 8])]);
    check_op(&mut s, 1e-6, |g, v| g.resize(v[0], Ratio::down(2)));
    let mut s = store_of(&mut rng, &[("x", vec![1, 2, 3, 4])]);
    check_op(&mut s, 1e-6, |g, v| g.resize(v[0], Ratio::up(3)));
}

#[test]
fn charbonnier_per_pixel_and_weighted_sum_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut s = store_of(&mut rng, &[("a", vec![3, 1, 4, 4]), ("b", vec![3, 1, 4, 4])]);
    check_op(&mut s, 1e-6, |g, v| {
        let l1 = g.charbonnier(v[0], v[1], 1e-3, true)?;
        let l2 = g.charbonnier(v[1], v[0], 1e-3, false)?;
        let w = g.weighted_sum(&[(l1, 0.3), (l2, 0.7)])?;
        let lt = g.sum(v[0])?;
        g.weighted_sum(&[(w, 1.0), (lt, 0.01)])
    });
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::full(vec![1, 1, 2, 2], 1e30)).unwrap();
    assert!(matches!(g.scale(x, 1e30), Err(NnError::NonFinite { op: "scale" })));
    let bad = Tensor::new(vec![1, 1, 1, 1], vec![f32::NAN]).unwrap();
    assert!(matches!(g.input(bad), Err(NnError::NonFinite { .. })));
}

#[test]
fn gradcheck_linear_quadratic_is_exact() {
    // loss = sum((W x - y)^2) through conv with a 1x1 kernel
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut s = store_of(&mut rng, &[("w", vec![2, 3, 1, 1]), ("b", vec![2])]);
    let x = Tensor::new(vec![1, 3, 2, 2], rand_vec(&mut rng, 12)).unwrap();
    let report = gradcheck(
        &mut s,
        &GradcheckOptions {
            tolerance: 1e-9,
            ..Default::default()
        },
        |p, want| {
            let mut g = Graph::new();
            let xv = g.input(x.clone())?;
            let w = g.param(p, 0)?;
            let b = g.param(p, 1)?;
            let y = g.conv2d(xv, w, b)?;
            let sq = g.mul(y, y)?;
            let loss = g.sum(sq)?;
            Ok(Evaluation {
                loss: g.value(loss).data()[0],
                grads: want.then(|| g.backward(loss).unwrap().for_params(p)),
            })
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.checked, 8);
}

#[test]
fn gradcheck_flags_corrupted_conv_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut s = store_of(&mut rng, &[("w", vec![2, 2, 3, 3]), ("b", vec![2])]);
    let x = Tensor::new(vec![1, 2, 4, 4], rand_vec(&mut rng, 32)).unwrap();
    let report = gradcheck(&mut s, &GradcheckOptions::default(), |p, want| {
        let mut g = Graph::new();
        g.inject_fault(Fault::ConvWeightGrad);
        let xv = g.input(x.clone())?;
        let w = g.param(p, 0)?;
        let b = g.param(p, 1)?;
        let y = g.conv2d(xv, w, b)?;
        let y = g.sigmoid(y)?;
        let loss = g.sum(y)?;
        Ok(Evaluation {
            loss: g.value(loss).data()[0],
            grads: want.then(|| g.backward(loss).unwrap().for_params(p)),
        })
    })
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.worst_param, "w");
    assert!(report.max_rel_error > 0.3);
}

#[test]
fn gradcheck_detects_non_determinism() {
    let mut s = ParamStore::new();
    s.insert("w", vec![1], vec![1.0]).unwrap();
    let mut calls = 0;
    let err = gradcheck(&mut s, &GradcheckOptions::default(), |p, _| {
        calls += 1;
        Ok(Evaluation {
            loss: p.get(0).data[0] + calls as f64 * 1e-3,
            grads: Some(vec![vec![1.0]]),
        })
    })
    .unwrap_err();
    assert!(matches!(err, NnError::NonDeterministic(_)));
}

#[test]
fn gradcheck_subsamples_large_stores() {
    let mut s = ParamStore::new();
    s.insert("big", vec![20_000], vec![0.5; 20_000]).unwrap();
    s.insert("small", vec![3], vec![0.1; 3]).unwrap();
    let report = gradcheck(&mut s, &GradcheckOptions::default(), |p, want| {
        let loss: f64 = p.iter().flat_map(|q| q.data.iter()).map(|v| v * v).sum();
        Ok(Evaluation {
            loss,
            grads: want.then(|| p.iter().map(|q| q.data.iter().map(|v| 2.0 * v).collect()).collect()),
        })
    })
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.total, 20_003);
    assert!(report.checked < 1_100 && report.checked >= 1_000, "{}", report.checked);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Every op composed on random small inputs agrees with central
    /// differences.
    #[test]
    fn composite_graph_gradcheck(seed in 0u64..10_000, k in prop::sample::select(vec![1usize, 3])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = store_of(&mut rng, &[
            ("x", vec![2, 2, 4, 4]),
            ("w", vec![3, 2, k, k]),
            ("b", vec![3]),
            ("fw", vec![3, 3]),
            ("fb", vec![3]),
            ("sw", vec![1, 3, 3, 3]),
            ("sb", vec![1]),
        ]);
        check_op(&mut s, 1e-4, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            let y = g.relu(y)?;
            let p = g.global_avg_pool(y)?;
            let f = g.fully_connected(p, v[3], v[4])?;
            let f = g.sigmoid(f)?;
            let ca = g.mul_channel_gate(y, f)?;
            let sg = g.conv2d(y, v[5], v[6])?;
            let sg = g.sigmoid(sg)?;
            let sa = g.mul_spatial_gate(y, sg)?;
            let z = g.add(ca, sa)?;
            let z = g.concat(&[z, v[0]])?;
            let d = g.resize(z, Ratio::down(2))?;
            g.resize(d, Ratio::up(2))
        });
    }

    #[test]
    fn gates_never_amplify(vals in proptest::collection::vec(-50f64..50.0, 2 * 3 * 9), gates in proptest::collection::vec(-30f64..30.0, 2 * 3)) {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 3, 3, 3], vals).unwrap()).unwrap();
        let gv = g.input(Tensor::new(vec![2, 3], gates).unwrap()).unwrap();
        let s = g.sigmoid(gv).unwrap();
        prop_assert!(g.value(s).data().iter().all(|&v| v >= 0.0 && v <= 1.0));
        let y = g.mul_channel_gate(x, s).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            prop_assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn ops_are_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::<f32>::new();
            let x = g.variable(Tensor::new(vec![1, 2, 5, 5], (0..50).map(|_| rng.gen::<f32>()).collect()).unwrap()).unwrap();
            let w = g.variable(Tensor::new(vec![2, 2, 3, 3], (0..36).map(|_| rng.gen::<f32>()).collect()).unwrap()).unwrap();
            let b = g.input(Tensor::zeros(vec![2])).unwrap();
            let y = g.conv2d(x, w, b).unwrap();
            let l = g.sum(y).unwrap();
            let gr = g.backward(l).unwrap();
            (g.value(y).clone(), gr.get(w).unwrap().to_vec())
        };
        prop_assert_eq!(run(), run());
    }
}
