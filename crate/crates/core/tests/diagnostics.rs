use hyperpc::diagnostics::{
    gradient_conflict, interpolate_embeddings, norm_histogram, orthogonality_residual, pairwise_cosine_stats,
    weight_svd, Histogram, InterpMode,
};
use hyperpc::svd::svd;
use hyperpc::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
    Tensor::matrix(m, n, (0..m * n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor {
    let mut t = gaussian(rng, b, d);
    for row in t.data_mut().chunks_exact_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Max |⟨cᵢ, cⱼ⟩ - δᵢⱼ| over the columns of `q`.
fn orthonormality_gap(q: &Tensor) -> f64 {
    let (m, k) = (q.rows(), q.cols());
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let d: f64 = (0..m).map(|r| q.data()[r * k + i] * q.data()[r * k + j]).sum();
            worst = worst.max((d - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    worst
}

#[test]
fn svd_of_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..100 {
        let (m, n) = (rng.random_range(1..=64), rng.random_range(1..=128));
        let a = gaussian(&mut rng, m, n);
        let dec = svd(&a).unwrap();
        let k = m.min(n);
        assert_eq!((dec.u.shape(), dec.s.len(), dec.v.shape()), (&[m, k][..], k, &[n, k][..]));
        assert!(dec.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(dec.s.iter().all(|&s| s >= 0.0));

        // reconstruct by a plain triple loop
        let mut diff = 0.0;
        for i in 0..m {
            for j in 0..n {
                let r: f64 = (0..k).map(|l| dec.u.data()[i * k + l] * dec.s[l] * dec.v.data()[j * k + l]).sum();
                diff += (r - a.data()[i * n + j]).powi(2);
            }
        }
        assert!(diff.sqrt() / a.norm_l2() < 1e-8);
        assert!(orthonormality_gap(&dec.u) < 1e-8 && orthonormality_gap(&dec.v) < 1e-8);
        let energy: f64 = dec.s.iter().map(|s| s * s).sum();
        assert!((energy - a.norm_l2().powi(2)).abs() < 1e-8 * energy);
    }
}

#[test]
fn spectrum_examples() {
    let diag = Tensor::from_rows(&[[0.0, -3.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 0.5]]).unwrap();
    let s = weight_svd(&diag).unwrap();
    for (a, b) in s.singular_values.iter().zip([3.0, 2.0, 0.5]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((s.condition_number.unwrap() - 6.0).abs() < 1e-12);
    assert!((s.mean_sv - 5.5 / 3.0).abs() < 1e-12);

    let eye = weight_svd(&Tensor::eye(4)).unwrap();
    assert!((eye.condition_number.unwrap() - 1.0).abs() < 1e-12);
    assert!(weight_svd(&Tensor::zeros(&[3, 2])).unwrap().condition_number.is_none());

    // rank one: the zero singular value is ignored
    let rank1 = Tensor::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
    assert!((weight_svd(&rank1).unwrap().condition_number.unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn histogram_examples() {
    let h = Histogram::from_values(&[0.0, 1.0, 2.0, 3.0], 3).unwrap();
    assert_eq!(h.counts, vec![1, 1, 2]);
    assert_eq!(h.bin_edges, vec![0.0, 1.0, 2.0, 3.0]);
    assert_eq!((h.summary.mean, h.summary.count), (1.5, 4));
    let flat = Histogram::from_values(&[2.0; 5], 2).unwrap();
    assert_eq!(flat.counts.iter().sum::<u64>(), 5);
    assert!(Histogram::from_values(&[], 2).is_err());

    let e = Tensor::from_rows(&[[3.0, 4.0], [0.0, 1.0]]).unwrap();
    let nh = norm_histogram(&e, 4).unwrap();
    assert_eq!((nh.summary.min, nh.summary.max), (1.0, 5.0));
}

#[test]
fn cosine_examples() {
    let e = Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0]]).unwrap();
    let stats = pairwise_cosine_stats(&e, Some(&[0, 1, 0]), 4).unwrap();
    assert_eq!(stats.overall.summary.count, 3);
    assert_eq!((stats.overall.summary.min, stats.overall.summary.max), (-1.0, 0.0));
    assert_eq!(stats.per_class.len(), 1);
    assert_eq!(stats.per_class[0].class_id, 0);
    assert_eq!(stats.per_class[0].histogram.summary.mean, -1.0);

    assert!(pairwise_cosine_stats(&Tensor::from_rows(&[[1.0, 0.0]]).unwrap(), None, 4).is_err());
    let zero = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
    assert!(matches!(
        pairwise_cosine_stats(&zero, None, 4),
        Err(hyperpc::Error::DegenerateEmbedding { row: 1, .. })
    ));
}

#[test]
fn unit_rows_have_unit_mean_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = norm_histogram(&unit_rows(&mut rng, 1000, 128), 10).unwrap();
    assert!((0.999..=1.001).contains(&h.summary.mean));
}

#[test]
fn conflict_and_orthogonality_examples() {
    let c = gradient_conflict(&[1.0, 0.0], &[-1.0, 1.0]).unwrap();
    assert!((c.cosine + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    assert_eq!(c.mag1, 1.0);
    assert!(gradient_conflict(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    assert_eq!(orthogonality_residual(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
    assert_eq!(orthogonality_residual(&[2.0, 0.0], &[-3.0, 0.0]).unwrap(), 1.0);
}

#[test]
fn interpolation_examples() {
    let a = Tensor::vector(vec![1.0, 0.0]).unwrap();
    let b = Tensor::vector(vec![0.0, 1.0]).unwrap();
    let lin = interpolate_embeddings(&a, &b, 3, InterpMode::Linear).unwrap();
    assert_eq!(lin[1].data(), &[0.5, 0.5]);
    let sph = interpolate_embeddings(&a, &b, 3, InterpMode::Spherical).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert!((sph[1].data()[0] - h).abs() < 1e-15 && (sph[1].data()[1] - h).abs() < 1e-15);
    assert_eq!((&sph[0], &sph[2]), (&a, &b));

    assert!(interpolate_embeddings(&a, &b, 1, InterpMode::Linear).is_err());
    let off = Tensor::vector(vec![2.0, 0.0]).unwrap();
    assert!(interpolate_embeddings(&off, &b, 3, InterpMode::Spherical).is_err());
    let anti = Tensor::vector(vec![-1.0, 0.0]).unwrap();
    assert!(interpolate_embeddings(&a, &anti, 3, InterpMode::Spherical).is_err());
    let same = interpolate_embeddings(&a, &a, 4, InterpMode::Spherical).unwrap();
    assert!(same.iter().all(|t| t == &a));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosines_ignore_positive_row_scaling(seed in any::<u64>(), b in 2usize..12, d in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = gaussian(&mut rng, b, d);
        let mut scaled = e.clone();
        for row in scaled.data_mut().chunks_exact_mut(d) {
            let c: f64 = rng.random_range(0.01..100.0);
            row.iter_mut().for_each(|v| *v *= c);
        }
        let (x, y) = (pairwise_cosine_stats(&e, None, 5).unwrap(), pairwise_cosine_stats(&scaled, None, 5).unwrap());
        prop_assert!((x.overall.summary.mean - y.overall.summary.mean).abs() < 1e-12);
        prop_assert!((x.overall.summary.std - y.overall.summary.std).abs() < 1e-12);

        // flipping every row keeps each pair's cosine
        let neg = e.map(|v| -v);
        let z = pairwise_cosine_stats(&neg, None, 5).unwrap();
        prop_assert!((x.overall.summary.mean - z.overall.summary.mean).abs() < 1e-12);
    }

    #[test]
    fn cosines_of_unit_rows_are_inner_products(seed in any::<u64>(), b in 2usize..10, d in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = unit_rows(&mut rng, b, d);
        let mut dots = Vec::new();
        for i in 0..b {
            for j in i + 1..b {
                dots.push((0..d).map(|k| e.data()[i * d + k] * e.data()[j * d + k]).sum::<f64>());
            }
        }
        let mean = dots.iter().sum::<f64>() / dots.len() as f64;
        let stats = pairwise_cosine_stats(&e, None, 3).unwrap();
        prop_assert!((stats.overall.summary.mean - mean).abs() < 1e-12);
        prop_assert_eq!(stats.overall.summary.count, b * (b - 1) / 2);
    }

    #[test]
    fn spherical_steps_stay_on_the_sphere(seed in any::<u64>(), d in 2usize..32, steps in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = unit_rows(&mut rng, 2, d);
        let (a, b) = (Tensor::vector(e.row(0).to_vec()).unwrap(), Tensor::vector(e.row(1).to_vec()).unwrap());
        prop_assume!(e.row(0).iter().zip(e.row(1)).map(|(x, y)| x * y).sum::<f64>() > -0.999);
        let path = interpolate_embeddings(&a, &b, steps, InterpMode::Spherical).unwrap();
        prop_assert_eq!(path.len(), steps);
        prop_assert_eq!(&path[0], &a);
        prop_assert_eq!(&path[steps - 1], &b);
        for p in &path {
            prop_assert!((p.norm_l2() - 1.0).abs() < 1e-12);
        }
    }
}
