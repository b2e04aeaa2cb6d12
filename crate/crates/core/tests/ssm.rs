//! Selective scan, time-invariant convolution and cross-scan properties.

use icemamba::ssm::*;
use icemamba_tensor::gradcheck::{check_gradients, GradCheckConfig};
use icemamba::init::Initializer;
use icemamba_tensor::{Graph, ParamStore, Tensor};
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(lo..hi))
}

fn random_lti(rng: &mut ChaCha8Rng, d: usize, n: usize) -> LtiParams<f64> {
    let a = random_matrix(rng, d, n, -3.0, -0.05);
    let delta = Array1::from_shape_fn(d, |_| rng.gen_range(0.01..1.5));
    let b = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
    let c = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
    let skip = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
    LtiParams::discretize(a.view(), delta.view(), b.view(), c.view(), skip.view()).unwrap()
}

/// Plain loop over the discretized recurrence with fixed parameters.
fn fixed_recurrence(x: &Array2<f64>, p: &LtiParams<f64>) -> Array2<f64> {
    let (l, d) = x.dim();
    let n = p.c.len();
    let mut y = Array2::zeros((l, d));
    for ch in 0..d {
        let mut h = vec![0.0; n];
        for k in 0..l {
            let mut out = p.d_skip[ch] * x[[k, ch]];
            for s in 0..n {
                h[s] = p.a_bar[[ch, s]] * h[s] + p.b_bar[[ch, s]] * x[[k, ch]];
                out += p.c[s] * h[s];
            }
            y[[k, ch]] = out;
        }
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lti_convolution_matches_recurrence(seed in any::<u64>(), l in 1usize..=64, n in 1usize..=16, d in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_lti(&mut rng, d, n);
        let x = random_matrix(&mut rng, l, d, -1.0, 1.0);
        let conv = lti_conv_scan(&ScanSequence::new(x.clone(), ScanOrder::RowMajor), &p).unwrap().x;
        let rec = fixed_recurrence(&x, &p);
        for (a, b) in conv.iter().zip(rec.iter()) {
            prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn selective_scan_with_fixed_steps_matches_convolution(seed in any::<u64>(), l in 1usize..=64, n in 1usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2;
        let a = random_matrix(&mut rng, d, n, -3.0, -0.05);
        let delta = Array1::from_shape_fn(d, |_| rng.gen_range(0.01..1.5));
        let b = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let c = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let skip = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
        let x = random_matrix(&mut rng, l, d, -1.0, 1.0);
        let steps = StepParams::constant(l, delta.view(), b.view(), c.view());
        let sel = scan_recurrence(x.view(), a.view(), &steps, skip.view()).unwrap();
        let lti = LtiParams::discretize(a.view(), delta.view(), b.view(), c.view(), skip.view()).unwrap();
        let conv = lti_conv_scan(&ScanSequence::new(x, ScanOrder::RowMajor), &lti).unwrap().x;
        for (s, v) in sel.iter().zip(conv.iter()) {
            prop_assert!((s - v).abs() <= 1e-10 * v.abs().max(1.0), "{s} vs {v}");
        }
    }

    #[test]
    fn hidden_state_stays_within_geometric_bound(seed in any::<u64>(), l in 1usize..=200, n in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, 1, n, -2.0, -0.1);
        let delta = Array1::from_elem(1, rng.gen_range(0.05..1.0));
        let b = Array1::from_shape_fn(n, |_| rng.gen_range(-2.0..2.0));
        let c = Array1::zeros(n);
        let x = random_matrix(&mut rng, l, 1, -1.0, 1.0);
        let steps = StepParams::constant(l, delta.view(), b.view(), c.view());
        let states = scan_states(x.view(), a.view(), &steps);
        let max_x = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for s in 0..n {
            let a_bar = (delta[0] * a[[0, s]]).exp();
            let bound = (delta[0] * b[s]).abs() * max_x / (1.0 - a_bar);
            for k in 0..l {
                prop_assert!(states[[k, 0, s]].abs() <= bound * (1.0 + 1e-12) + 1e-15);
            }
        }
    }

    #[test]
    fn selective_scan_is_causal(seed in any::<u64>(), l in 2usize..=24, cut in 0usize..23) {
        let cut = cut % (l - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let n = 4;
        let params = SsmParams {
            a: random_matrix(&mut rng, d, n, -2.0, -0.1),
            d_skip: Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0)),
            delta_proj: random_matrix(&mut rng, d, d, -0.5, 0.5),
            delta_bias: Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0)),
            b_proj: random_matrix(&mut rng, d, n, -0.5, 0.5),
            c_proj: random_matrix(&mut rng, d, n, -0.5, 0.5),
        };
        let x = random_matrix(&mut rng, l, d, -1.0, 1.0);
        let mut x2 = x.clone();
        for k in cut + 1..l {
            for ch in 0..d {
                x2[[k, ch]] += rng.gen_range(-5.0..5.0);
            }
        }
        let y1 = selective_scan(&ScanSequence::new(x, ScanOrder::RowMajor), &params).unwrap().x;
        let y2 = selective_scan(&ScanSequence::new(x2, ScanOrder::RowMajor), &params).unwrap().x;
        for k in 0..=cut {
            prop_assert_eq!(y1.row(k), y2.row(k));
        }
    }

    #[test]
    fn cross_scan_outputs_are_permutations(c in 1usize..4, h in 1usize..9, w in 1usize..9) {
        let f = Array3::from_shape_fn((c, h, w), |(k, i, j)| (k * 1000 + i * 31 + j) as f64);
        let mut cells: Vec<f64> = f.iter().copied().collect();
        cells.sort_by(f64::total_cmp);
        for seq in cross_scan(&f) {
            prop_assert_eq!(seq.len(), h * w);
            let mut got: Vec<f64> = seq.x.iter().copied().collect();
            got.sort_by(f64::total_cmp);
            prop_assert_eq!(&got, &cells);
        }
        let merged = cross_merge(&cross_scan(&f), h, w).unwrap();
        prop_assert_eq!(merged, f.mapv(|v| 4.0 * v));
    }

    #[test]
    fn cross_merge_is_linear(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, s in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array3::from_shape_fn((2, h, w), |_| rng.gen_range(-1.0..1.0));
        let b = Array3::from_shape_fn((2, h, w), |_| rng.gen_range(-1.0..1.0));
        let sa = cross_scan(&a);
        let sb = cross_scan(&b);
        let combo: Vec<ScanSequence<f64>> = sa
            .iter()
            .zip(&sb)
            .map(|(x, y)| ScanSequence::new(&x.x * s + &y.x, x.order))
            .collect();
        let lhs = cross_merge(&combo, h, w).unwrap();
        let rhs = cross_merge(&sa, h, w).unwrap() * s + cross_merge(&sb, h, w).unwrap();
        for (p, q) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn one_by_one_grid_gives_identical_sequences() {
    let f = Array3::from_shape_vec((2, 1, 1), vec![3.0f64, -1.0]).unwrap();
    let seqs = cross_scan(&f);
    for s in &seqs {
        assert_eq!(s.x, seqs[0].x);
    }
}

#[test]
fn kernel_decays_geometrically() {
    let lti = LtiParams {
        a_bar: ndarray::array![[0.6f64]],
        b_bar: ndarray::array![[2.0]],
        c: ndarray::array![1.5],
        d_skip: ndarray::array![0.0],
    };
    let k = lti.kernel(10);
    for j in 1..10 {
        assert!((k[[j, 0]] / k[[j - 1, 0]] - 0.6).abs() < 1e-12);
    }
}

#[test]
fn lti_parameters_from_constant_selective_parameters() {
    // With zero projections the selective scan is time-invariant, so the
    // convolution must reproduce it.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (d, n, l) = (2, 3, 20);
    let params = SsmParams {
        a: random_matrix(&mut rng, d, n, -2.0, -0.1),
        d_skip: Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0)),
        delta_proj: Array2::zeros((d, d)),
        delta_bias: Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0)),
        b_proj: Array2::zeros((d, n)),
        c_proj: Array2::zeros((d, n)),
    };
    let x = random_matrix(&mut rng, l, d, -1.0, 1.0);
    let seq = ScanSequence::new(x, ScanOrder::ColumnMajor);
    let sel = selective_scan(&seq, &params).unwrap().x;
    let conv = lti_conv_scan(&seq, &LtiParams::try_from(&params).unwrap()).unwrap().x;
    for (a, b) in sel.iter().zip(conv.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn projection_shape_mismatch_is_rejected() {
    let params = SsmParams {
        a: Array2::from_elem((2, 2), -1.0f64),
        d_skip: Array1::zeros(2),
        delta_proj: Array2::zeros((2, 2)),
        delta_bias: Array1::zeros(2),
        b_proj: Array2::zeros((2, 2)),
        c_proj: Array2::zeros((2, 2)),
    };
    let seq = ScanSequence::new(Array2::zeros((4, 3)), ScanOrder::RowMajor);
    assert!(selective_scan(&seq, &params).is_err());
    let positive = SsmParams { a: Array2::from_elem((2, 2), 0.5), ..params };
    let seq = ScanSequence::new(Array2::zeros((4, 2)), ScanOrder::RowMajor);
    assert!(selective_scan(&seq, &positive).is_err());
}

#[test]
fn scan_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (l, d, n) = (7, 3, 4);
    let t = |rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64| {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    };
    let inputs = vec![
        t(&mut rng, &[l, d], -1.0, 1.0),
        t(&mut rng, &[l, d], 0.1, 1.0),
        t(&mut rng, &[d, n], -2.0, -0.2),
        t(&mut rng, &[l, n], -1.0, 1.0),
        t(&mut rng, &[l, n], -1.0, 1.0),
        t(&mut rng, &[d], -1.0, 1.0),
    ];
    let report = check_gradients::<icemamba::Error, _>(
        &ParamStore::new(),
        &inputs,
        |g, _, v| scan_var(g, v[0], v[1], v[2], v[3], v[4], v[5]),
        GradCheckConfig { probes: 40, ..Default::default() },
    )
    .unwrap();
    assert!(report.worst_relative_error < 1e-6, "{report:?}");
}

#[test]
fn recorded_scan_matches_reference_ss2d() {
    let (c, h, w, n) = (3, 3, 4, 4);
    let vssb = Vssb::new("v", c, n);
    let mut store = ParamStore::<f64>::new();
    vssb.init(&mut store, &mut Initializer::new(2));
    // Enlarge the projections so the selective terms matter.
    for (name, t) in store.iter_mut() {
        if name.contains("proj") && name.ends_with("weight") || name.ends_with("b_proj") || name.ends_with("c_proj") {
            t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0));
    let params = [0, 1, 2, 3].map(|d| SsmParams::from_store(&store, &format!("v.dir{d}")).unwrap());
    let reference = ss2d_reference(&x, &params).unwrap();
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(Tensor::new(&[c, h, w], x.iter().copied().collect()).unwrap());
    let y = vssb.ss2d(&mut g, &store, xv).unwrap();
    for (a, b) in g.value(y).iter().zip(reference.iter()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn vssb_preserves_shape_and_zeroed_block_is_identity() {
    for (c, h, w) in [(1, 1, 1), (2, 3, 5), (4, 4, 4), (3, 1, 6)] {
        let vssb = Vssb::new("v", c, 3);
        let mut store = ParamStore::<f64>::new();
        vssb.init(&mut store, &mut Initializer::new(0));
        let mut rng = ChaCha8Rng::seed_from_u64(c as u64);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::new(&[c, h, w], x.clone()).unwrap());
        let y = vssb.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.shape(y), [c, h, w]);

        for (name, t) in store.iter_mut() {
            if name.contains("out_proj") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::new(&[c, h, w], x.clone()).unwrap());
        let y = vssb.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), x.as_slice());
    }
}

#[test]
fn vssb_gradients_match_finite_differences() {
    let (c, h, w) = (4, 3, 3);
    let vssb = Vssb::new("v", c, 3);
    let mut store = ParamStore::<f64>::new();
    vssb.init(&mut store, &mut Initializer::new(4));
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= if v.abs() < 0.1 { 15.0 } else { 1.0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let report = check_gradients::<icemamba::Error, _>(
        &store,
        &[x],
        |g, s, v| vssb.forward(g, s, v[0]),
        GradCheckConfig { probes: 48, seed: 1, ..Default::default() },
    )
    .unwrap();
    assert!(report.worst_relative_error < 1e-5, "{report:?}");
}
