use hyperpc::hypersphere::HypersphereConfig;
use hyperpc::netblocks::{
    classify, encode, fold_decode, load_checkpoint, pipeline_forward, read_checkpoint, save_checkpoint,
    write_checkpoint, ModelConfig, ModelParams, PointCloud,
};
use hyperpc::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(seed: u64, n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(n, 3, (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small(hyper: bool) -> ModelConfig {
    let mut cfg = ModelConfig::completion(hyper);
    cfg.embed_dim = 12;
    cfg.encoder_hidden = [8, 10];
    cfg.decoder_hidden = [9, 7];
    cfg.classifier_hidden = 6;
    cfg.grid_side = 3;
    cfg.hypersphere = HypersphereConfig::standard(12);
    cfg
}

fn set(p: &mut ModelParams, name: &str, t: Tensor) {
    let slot = p.params.get_mut(name).unwrap_or_else(|| panic!("no parameter {name}"));
    assert_eq!(slot.shape(), t.shape(), "{name}");
    *slot = t;
}

#[test]
fn encode_by_hand() {
    let mut cfg = small(false);
    cfg.embed_dim = 3;
    cfg.encoder_hidden = [3, 3];
    let mut p = ModelParams::init(&cfg, 0).unwrap();
    for (layer, bias) in [("fc1", [0.0, 0.0, -1.0]), ("fc2", [0.5, 0.0, 0.0]), ("fc3", [0.0, 1.0, 0.0])] {
        set(&mut p, &format!("encoder.{layer}.weight"), Tensor::eye(3));
        set(&mut p, &format!("encoder.{layer}.bias"), Tensor::vector(bias.to_vec()).unwrap());
    }
    let x = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
    // relu(x + b1) = [1,0,0]; relu(· + b2) = [1.5,0,0]; + b3
    assert_eq!(encode(&x, &p).unwrap().data(), &[1.5, 1.0, 0.0]);
    assert!(encode(&Tensor::zeros(&[0, 3]), &p).is_err());
}

#[test]
fn decoder_examples() {
    let cfg = small(false);
    let mut p = ModelParams::init(&cfg, 1).unwrap();
    let out = fold_decode(&Tensor::vector(vec![0.1; 12]).unwrap(), &p, 2).unwrap();
    assert_eq!(out.shape(), &[4, 3]);

    let a = fold_decode(&Tensor::vector(vec![0.3; 12]).unwrap(), &p, 3).unwrap();
    let b = fold_decode(&Tensor::vector((0..12).map(|i| i as f64 / 6.0 - 1.0).collect()).unwrap(), &p, 3).unwrap();
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 0.0);

    for name in ["decoder.fc1.weight", "decoder.fc2.weight", "decoder.fc3.weight", "decoder.fc1.bias", "decoder.fc2.bias"] {
        let shape = p.get(name).unwrap().shape().to_vec();
        set(&mut p, name, Tensor::zeros(&shape));
    }
    set(&mut p, "decoder.fc3.bias", Tensor::vector(vec![0.25, -1.0, 0.5]).unwrap());
    let flat = fold_decode(&Tensor::zeros(&[12]), &p, 3).unwrap();
    assert_eq!(flat.rows(), 9);
    assert!(flat.iter_rows().all(|r| r == [0.25, -1.0, 0.5]));
}

#[test]
fn classifier_examples() {
    let mut cfg = small(false);
    cfg.completion = false;
    cfg.classification = true;
    cfg.embed_dim = 2;
    cfg.classifier_hidden = 2;
    cfg.num_classes = 2;
    let mut p = ModelParams::init(&cfg, 2).unwrap();
    set(&mut p, "classifier.fc1.weight", Tensor::eye(2));
    set(&mut p, "classifier.fc2.weight", Tensor::eye(2));
    set(&mut p, "classifier.fc2.bias", Tensor::vector(vec![0.5, 0.0]).unwrap());
    // relu([1,-1]) = [1,0], then + [0.5, 0]
    assert_eq!(classify(&Tensor::vector(vec![1.0, -1.0]).unwrap(), &p).unwrap().data(), &[1.5, 0.0]);

    cfg.embed_dim = 4;
    cfg.num_classes = 3;
    let mut p = ModelParams::init(&cfg, 3).unwrap();
    set(&mut p, "classifier.fc2.weight", Tensor::zeros(&[2, 3]));
    set(&mut p, "classifier.fc2.bias", Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    assert_eq!(classify(&Tensor::vector(vec![0.3, -0.2, 0.9, 1.0]).unwrap(), &p).unwrap().data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn pipeline_examples() {
    let x = random_cloud(4, 20);

    let off = small(false);
    let p = ModelParams::init(&off, 5).unwrap();
    let out = pipeline_forward(&x, &p, &off).unwrap();
    let raw = encode(&x, &p).unwrap();
    assert_eq!(out.embedding.post_norm.data(), raw.data());
    assert!(out.logits.is_none());

    let mut both = small(true);
    both.classification = true;
    let p = ModelParams::init(&both, 6).unwrap();
    let out = pipeline_forward(&x, &p, &both).unwrap();
    let emb = out.embedding.post_norm.reshape(&[12]).unwrap();
    assert!((emb.norm_l2() - 1.0).abs() < 1e-9);
    assert_eq!(out.completion.unwrap(), fold_decode(&emb, &p, both.grid_side).unwrap());
    assert_eq!(out.logits.unwrap(), classify(&emb, &p).unwrap());
}

#[test]
fn parameter_count_formula() {
    // encoder 4·64 + 65·128 + 129·128, decoder 131·128 + 129·64 + 65·3, hyper 129·128
    assert_eq!(ModelConfig::completion(false).param_count(), 25_088 + 25_219);
    assert_eq!(ModelConfig::completion(true).param_count(), 25_088 + 25_219 + 16_512);

    for (hyper, layers, bn, classification) in
        [(false, 1, false, true), (true, 0, false, true), (true, 2, true, false), (true, 2, false, true)]
    {
        let mut cfg = small(hyper);
        cfg.hypersphere.mlp_layers = layers;
        cfg.hypersphere.use_relu_bn = bn;
        cfg.classification = classification;
        let (d, e1, e2, k1, k2, h, c) = (12, 8, 10, 9, 7, 6, 4);
        let mut expected = 4 * e1 + (e1 + 1) * e2 + (e2 + 1) * d + (d + 3) * k1 + (k1 + 1) * k2 + (k2 + 1) * 3;
        if hyper {
            expected += layers * ((d + 1) * d + if bn { 2 * d } else { 0 });
        }
        if classification {
            expected += (d + 1) * h + (h + 1) * c;
        }
        assert_eq!(cfg.param_count(), expected);
        assert_eq!(ModelParams::init(&cfg, 0).unwrap().count(), expected);
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut cfg = small(true);
    cfg.hypersphere.use_relu_bn = true;
    cfg.classification = true;
    let p = ModelParams::init(&cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.hckp");
    save_checkpoint(&path, &cfg, &p).unwrap();
    let (cfg2, p2) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(p2, p);

    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &cfg, &p).unwrap();
    bytes[0] = b'X';
    assert!(matches!(read_checkpoint(&mut bytes.as_slice()), Err(hyperpc::Error::Format(_))));
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &cfg, &p).unwrap();
    bytes.truncate(bytes.len() - 5);
    assert!(read_checkpoint(&mut bytes.as_slice()).is_err());
}

#[test]
fn point_cloud_validation() {
    let loose = PointCloud::new(Tensor::from_rows(&[[0.0, 1.6, 0.0]]).unwrap(), Some(1)).unwrap();
    assert!(!loose.is_normalized());
    assert!(PointCloud::new(Tensor::from_rows(&[[0.0, 1.5, -1.5]]).unwrap(), None).unwrap().is_normalized());
    assert!(PointCloud::new(Tensor::zeros(&[4, 2]), None).is_err());
    assert!(PointCloud::new(Tensor::zeros(&[0, 3]), None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pipeline_ignores_point_order(seed in any::<u64>(), n in 1usize..30, hyper in any::<bool>()) {
        let mut cfg = small(hyper);
        cfg.classification = true;
        let p = ModelParams::init(&cfg, seed).unwrap();
        let x = random_cloud(seed ^ 1, n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let rows: Vec<&[f64]> = order.iter().map(|&i| x.row(i)).collect();
        let shuffled = Tensor::from_rows(&rows).unwrap();
        prop_assert_eq!(pipeline_forward(&x, &p, &cfg).unwrap(), pipeline_forward(&shuffled, &p, &cfg).unwrap());

        // duplicating every point changes nothing either
        let doubled: Vec<&[f64]> = (0..n).flat_map(|i| [x.row(i), x.row(i)]).collect();
        let doubled = Tensor::from_rows(&doubled).unwrap();
        prop_assert_eq!(encode(&x, &p).unwrap(), encode(&doubled, &p).unwrap());
    }

    #[test]
    fn hyper_embeddings_are_unit(seed in any::<u64>(), n in 1usize..30, layers in 0usize..3) {
        let mut cfg = small(true);
        cfg.hypersphere.mlp_layers = layers;
        let p = ModelParams::init(&cfg, seed).unwrap();
        let out = pipeline_forward(&random_cloud(seed, n), &p, &cfg).unwrap();
        prop_assert!((out.embedding.post_norm.norm_l2() - 1.0).abs() < 1e-9);
    }
}
