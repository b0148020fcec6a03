use super::*;
use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec() -> ModelSpec {
    ModelSpec {
        name: "small".into(),
        backbones: vec![BackboneKind::Stub],
        head: HeadSpec { conv_filters: vec![4, 6, 8], dense_units: 10, ..HeadSpec::default() },
        stub_channels: 4,
        ..ModelSpec::default()
    }
}

fn random_maps(n: usize, c: usize, seed: u64) -> Vec<Array3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Array3::from_shape_simple_fn((GRID, GRID, c), || rng.random_range(-2.0..2.0)))
        .collect()
}

#[test]
fn table_shape_chain() {
    let spec = ModelSpec { backbones: vec![BackboneKind::Stub], ..ModelSpec::default() };
    let net = Network::new(spec.arch(8, 0.3), 1);
    let x = network::stack_inputs(&random_maps(2, 8, 0));
    let cache = net.forward(&x, Mode::Infer, None).unwrap();
    let shapes: Vec<Vec<usize>> = cache.shapes.iter().map(|(_, s)| s.clone()).collect();
    assert_eq!(
        shapes,
        vec![vec![8, 8, 64], vec![8, 8, 128], vec![8, 8, 256], vec![16384], vec![1024], vec![1]]
    );
}

#[test]
fn zero_input_gives_one_half() {
    let spec = small_spec();
    let net = Network::new(spec.arch(4, 0.3), 3);
    let x = ndarray::Array2::zeros((GRID * GRID, 4));
    assert_eq!(net.predict(&x).unwrap()[0], 0.5);
}

#[test]
fn inference_is_deterministic_and_bounded() {
    let spec = small_spec();
    let net = Network::new(spec.arch(4, 0.3), 5);
    let maps = random_maps(50, 4, 9);
    let x = network::stack_inputs(&maps);
    let a = net.predict(&x).unwrap();
    let b = net.predict(&x).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn dropout_only_in_training() {
    let spec = small_spec();
    let net = Network::new(spec.arch(4, 0.5), 5);
    let x = network::stack_inputs(&random_maps(6, 4, 2));
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(2);
    let t1 = net.forward(&x, Mode::Train, Some(&mut r1)).unwrap().probs;
    let t2 = net.forward(&x, Mode::Train, Some(&mut r2)).unwrap().probs;
    assert_ne!(t1, t2);
    let i1 = net.forward(&x, Mode::Infer, Some(&mut r1)).unwrap().probs;
    assert_eq!(i1, net.predict(&x).unwrap());
}

/// Central finite differences of L = Σ c_i · logit_i against backprop.
fn check_gradients(spec: &ModelSpec, channels: usize) {
    let mut net = Network::new(spec.arch(channels, 0.3), 11);
    let x = network::stack_inputs(&random_maps(3, channels, 4));
    let coef = ndarray::arr1(&[0.7, -1.3, 0.4]);
    let loss = |n: &Network| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let c = n.forward(&x, Mode::Train, Some(&mut rng)).unwrap();
        (&c.logits * &coef).sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cache = net.forward(&x, Mode::Train, Some(&mut rng)).unwrap();
    let grads = net.backward(&cache, &coef);
    let h = 1e-5;
    let mut checked = 0;
    for t in 0..net.params.len() {
        let len = net.params.tensors[t].len();
        for k in (0..len).step_by((len / 7).max(1)) {
            let orig = net.params.tensors[t].as_slice().unwrap()[k];
            net.params.tensors[t].as_slice_mut().unwrap()[k] = orig + h;
            let up = loss(&net);
            net.params.tensors[t].as_slice_mut().unwrap()[k] = orig - h;
            let down = loss(&net);
            net.params.tensors[t].as_slice_mut().unwrap()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensors[t].as_slice().unwrap()[k];
            let scale = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / scale < 1e-4,
                "{}[{k}]: numeric {numeric} analytic {analytic}",
                net.params.names[t]
            );
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn backprop_matches_finite_differences() {
    check_gradients(&small_spec(), 4);
}

#[test]
fn backprop_through_embedding() {
    let spec = ModelSpec { backbones: vec![], embedding_channels: 3, ..small_spec() };
    check_gradients(&spec, 1);
}

#[test]
fn running_stats_move_toward_batch() {
    let spec = small_spec();
    let mut net = Network::new(spec.arch(4, 0.0), 5);
    let maps: Vec<_> = random_maps(4, 4, 1).into_iter().map(|m| m + 3.0).collect();
    let x = network::stack_inputs(&maps);
    let before = net.bn_stats[0].mean.clone();
    let cache = net.forward(&x, Mode::Train, None).unwrap();
    net.update_running_stats(&cache);
    assert_ne!(net.bn_stats[0].mean, before);
}

#[test]
fn predict_image_paths() {
    let spec = ModelSpec { instruments: vec![Instrument::Eit], ..small_spec() };
    let weights = ModelWeights::init(&spec, 4, 0.3).unwrap();
    let extractor = FeatureExtractor::new(&spec, &BackboneSource::Stub { seed: 1 }).unwrap();
    let img = ndarray::Array2::from_shape_fn((64, 64), |(r, c)| ((r + c) % 7) as f32 / 7.0);
    let p = predict_image(&img, Instrument::Eit, &weights, &extractor).unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert!(matches!(predict_image(&img, Instrument::C2, &weights, &extractor), Err(ModelError::Usage(_))));
}

#[test]
fn rn_only_spec_uses_only_rn_features() {
    let spec = ModelSpec { backbones: vec![BackboneKind::Rn], stub_channels: 5, ..small_spec() };
    let ex = FeatureExtractor::new(&spec, &BackboneSource::Stub { seed: 3 }).unwrap();
    assert_eq!(ex.input_channels(), 5);
    let both = ModelSpec { backbones: vec![BackboneKind::Irn, BackboneKind::Rn], stub_channels: 5, ..small_spec() };
    let ex2 = FeatureExtractor::new(&both, &BackboneSource::Stub { seed: 3 }).unwrap();
    let img = ndarray::Array2::from_shape_fn((40, 40), |(r, c)| (r * c % 11) as f32);
    let rn_map = ex.input_map(&img).unwrap();
    let fused = ex2.input_map(&img).unwrap();
    // RN comes first in the fused map regardless of declaration order
    assert_eq!(fused.slice(ndarray::s![.., .., 0..5]), rn_map);
}

#[test]
fn spec_validation() {
    assert!(ModelSpec::default().validate().is_ok());
    assert!(ModelSpec { instruments: vec![], ..ModelSpec::default() }.validate().is_err());
    assert!(ModelSpec { threshold: 1.0, ..ModelSpec::default() }.validate().is_err());
    assert!(ModelSpec { backbones: vec![BackboneKind::Rn, BackboneKind::Rn], ..ModelSpec::default() }.validate().is_err());
}

#[test]
fn checkpoint_round_trip() {
    let spec = ModelSpec { backbones: vec![], ..small_spec() };
    let mut weights = ModelWeights::init(&spec, 1, 0.3).unwrap();
    weights.pipelines.get_mut(&Instrument::Mdi).unwrap().bn_stats[1].var[2] = 4.5;
    let dir = tempfile::tempdir().unwrap();
    weights.save(dir.path()).unwrap();
    let back = ModelWeights::load(dir.path()).unwrap();
    assert_eq!(back, weights);
    std::fs::remove_file(dir.path().join("EIT/conv2.w.f64")).unwrap();
    assert!(ModelWeights::load(dir.path()).is_err());
}
