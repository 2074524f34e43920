use hyperpc::diagnostics::orthogonality_residual;
use hyperpc::hypersphere::{
    hyper_forward, normalize, normalize_backward_l2, normalize_generic, p_norm, sgd_norm_trace, HypersphereConfig,
    DEFAULT_EPS_GUARD,
};
use hyperpc::netblocks::ModelParams;
use hyperpc::optim::NamedTensors;
use hyperpc::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn row(v: &[f64]) -> Tensor {
    Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
}

fn params(entries: &[(&str, Tensor)]) -> ModelParams {
    let mut p = NamedTensors::new();
    for (name, t) in entries {
        p.insert(name.to_string(), t.clone());
    }
    ModelParams { params: p, buffers: NamedTensors::new() }
}

fn cfg(mlp_layers: usize, dim: usize) -> HypersphereConfig {
    HypersphereConfig { mlp_layers, ..HypersphereConfig::standard(dim) }
}

#[test]
fn hyper_forward_examples() {
    let x = row(&[3.0, 4.0]);
    let bare = hyper_forward(&x, &ModelParams::default(), &cfg(0, 2)).unwrap();
    assert_eq!(bare.post_norm.data(), &[0.6, 0.8]);
    assert_eq!(bare.norms.data(), &[5.0]);
    assert_eq!(bare.pre_norm, x);

    let identity = params(&[("hyper.fc1.weight", Tensor::eye(2)), ("hyper.fc1.bias", Tensor::zeros(&[2]))]);
    let one = hyper_forward(&x, &identity, &cfg(1, 2)).unwrap();
    assert_eq!(one, bare);

    let double = params(&[
        ("hyper.fc1.weight", Tensor::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap()),
        ("hyper.fc1.bias", Tensor::zeros(&[2])),
    ]);
    let out = hyper_forward(&x, &double, &cfg(1, 2)).unwrap();
    assert_eq!(out.pre_norm.data(), &[6.0, 8.0]);
    assert_eq!(out.post_norm.data(), &[0.6, 0.8]);
    assert_eq!(out.norms.data(), &[10.0]);

    assert!(hyper_forward(&row(&[1.0, 2.0, 3.0]), &double, &cfg(1, 2)).is_err());
}

#[test]
fn p1_example_and_degenerate_rows() {
    assert_eq!(normalize(&row(&[1.0, -3.0]), 1, DEFAULT_EPS_GUARD).unwrap().data(), &[0.25, -0.75]);
    let batch = Tensor::from_rows(&[[1.0, 1.0], [0.0, 0.0]]).unwrap();
    match normalize(&batch, 2, DEFAULT_EPS_GUARD) {
        Err(hyperpc::Error::DegenerateEmbedding { row, .. }) => assert_eq!(row, 1),
        other => panic!("expected a degenerate-embedding error, got {other:?}"),
    }
}

#[test]
fn norm_trace_pythagorean_example() {
    let trace = sgd_norm_trace(&Tensor::vector(vec![3.0, 4.0]).unwrap(), |_, _| {
        Tensor::vector(vec![1.0, 0.0]).unwrap()
    }, 1.0, 1)
    .unwrap();
    assert!((trace[1] * trace[1] - 25.0256).abs() < 1e-12);
}

/// Random `[b,d]` batch whose row norms are log-uniform in `[0.1, 100]`.
fn scaled_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(b * d);
    for _ in 0..b {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = p_norm(&v, 2);
        let target = 10f64.powf(rng.random_range(-1.0..2.0));
        data.extend(v.iter().map(|x| x * target / n));
    }
    Tensor::matrix(b, d, data).unwrap()
}

#[test]
fn analytic_rule_matches_generic_tape_route() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for d in [2, 8, 128] {
        for _ in 0..20 {
            let f = scaled_rows(&mut rng, 3, d);
            let w: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = Tensor::matrix(3, d, w).unwrap();

            // downstream loss Σ w⊙f̂ + Σ w⊙f̂²
            let mut tape = Tape::new();
            let x = tape.leaf(f.clone());
            let n = normalize_generic(&mut tape, x, 2, DEFAULT_EPS_GUARD).unwrap();
            let wl = tape.leaf(w.clone());
            let lin = tape.mul(n, wl).unwrap();
            let sq = tape.mul(lin, n).unwrap();
            let both = tape.add(lin, sq).unwrap();
            let loss = tape.sum(both).unwrap();
            let generic = tape.backward(loss).unwrap().get(x).unwrap().clone();

            // ∂L/∂f̂ = w + 2 w ⊙ f̂
            let fhat = normalize(&f, 2, DEFAULT_EPS_GUARD).unwrap();
            let g: Vec<f64> = w.data().iter().zip(fhat.data()).map(|(w, h)| w + 2.0 * w * h).collect();
            let analytic = normalize_backward_l2(&f, &Tensor::matrix(3, d, g).unwrap(), DEFAULT_EPS_GUARD).unwrap();
            for (a, b) in analytic.data().iter().zip(generic.data()) {
                assert!((a - b).abs() < 1e-8, "d={d}: {a} vs {b}");
            }
        }
    }
}

fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|d| {
        (
            proptest::collection::vec(-50.0f64..50.0, d),
            proptest::collection::vec(-5.0f64..5.0, d),
        )
    })
}

proptest! {
    #[test]
    fn gradient_is_orthogonal_to_embedding((f, g) in vec_pair()) {
        let n = p_norm(&f, 2);
        prop_assume!(n > 1e-3);
        let grad = normalize_backward_l2(&row(&f), &row(&g), DEFAULT_EPS_GUARD).unwrap();
        let gn = grad.norm_l2();
        let dot: f64 = f.iter().zip(grad.data()).map(|(a, b)| a * b).sum();
        prop_assert!(dot.abs() / (n * gn + DEFAULT_EPS_GUARD) < 1e-10);
        if gn > 0.0 {
            prop_assert!(orthogonality_residual(&f, grad.data()).unwrap() < 1e-10);
        }
    }

    #[test]
    fn gradient_scales_inversely((f, g) in vec_pair(), c in prop::sample::select(vec![0.5, 2.0, 10.0])) {
        prop_assume!(p_norm(&f, 2) > 1e-3);
        let base = normalize_backward_l2(&row(&f), &row(&g), DEFAULT_EPS_GUARD).unwrap();
        let cf: Vec<f64> = f.iter().map(|v| c * v).collect();
        let scaled = normalize_backward_l2(&row(&cf), &row(&g), DEFAULT_EPS_GUARD).unwrap();
        let scale = base.norm_l2().max(1e-300);
        for (s, b) in scaled.data().iter().zip(base.data()) {
            prop_assert!((s - b / c).abs() <= 1e-10 * scale / c);
        }
    }

    #[test]
    fn sgd_never_shrinks_the_norm(seed in any::<u64>(), d in 2usize..16, lr in 0.01f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        prop_assume!(p_norm(&f0, 2) > 1e-3);
        let trace = sgd_norm_trace(&Tensor::vector(f0).unwrap(), |_, _| {
            Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        }, lr, 200).unwrap();
        for w in trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn zero_upstream_keeps_the_norm(f in proptest::collection::vec(-3.0f64..3.0, 2..10)) {
        prop_assume!(p_norm(&f, 2) > 1e-3);
        let d = f.len();
        let trace = sgd_norm_trace(&Tensor::vector(f).unwrap(), |_, _| Tensor::zeros(&[d]), 0.5, 20).unwrap();
        prop_assert!(trace.iter().all(|&n| n == trace[0]));
    }

    #[test]
    fn normalization_is_idempotent_and_reconstructs((f, _) in vec_pair()) {
        let n = p_norm(&f, 2);
        prop_assume!(n > 1e-3);
        let once = normalize(&row(&f), 2, DEFAULT_EPS_GUARD).unwrap();
        let twice = normalize(&once, 2, DEFAULT_EPS_GUARD).unwrap();
        prop_assert!((once.norm_l2() - 1.0).abs() < 1e-9);
        for ((a, b), orig) in once.data().iter().zip(twice.data()).zip(&f) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((a * n - orig).abs() < 1e-9 * n.max(1.0));
        }
    }

    #[test]
    fn p_norm_rows_are_unit((f, _) in vec_pair(), p in 1u8..=3) {
        prop_assume!(p_norm(&f, p) > 1e-3);
        let out = normalize(&row(&f), p, DEFAULT_EPS_GUARD).unwrap();
        prop_assert!((p_norm(out.data(), p) - 1.0).abs() < 1e-12);
    }
}
