use mtnet::dataset::ImageSample;
use mtnet::model::{
    audio_autoencoder_forward, audio_generator_forward, cross_modal_map, generator_block_1d, image_encoder_forward,
    init_audio_params, init_joint_params, residual_block_2d, Checkpoint, CheckpointKind, FeatureRole, FeatureVector,
    Forward, ImageShape, InferenceModel, Mode, ModelConfig, FEATURE_DIM,
};
use mtnet::tensor::{Graph, ParameterStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPE_16: ImageShape = ImageShape {
    height: 16,
    width: 16,
    channels: 1,
};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn residual_store(c: usize, rng: Option<&mut ChaCha8Rng>) -> ParameterStore<f64> {
    let mut s = ParameterStore::new();
    match rng {
        Some(rng) => {
            s.insert("r.conv1.w", random(rng, &[c, c, 3, 3], -0.3, 0.3), true).unwrap();
            s.insert("r.conv1.b", random(rng, &[c], -0.1, 0.1), false).unwrap();
            s.insert("r.conv2.w", random(rng, &[c, c, 3, 3], -0.3, 0.3), true).unwrap();
            s.insert("r.conv2.b", random(rng, &[c], -0.1, 0.1), false).unwrap();
            s.insert("r.bn.gamma", random(rng, &[c], 0.5, 1.5), false).unwrap();
            s.insert("r.bn.beta", random(rng, &[c], -0.2, 0.2), false).unwrap();
        }
        None => {
            s.insert_constant("r.conv1.w", &[c, c, 3, 3], 0.0).unwrap();
            s.insert_constant("r.conv1.b", &[c], 0.0).unwrap();
            s.insert_constant("r.conv2.w", &[c, c, 3, 3], 0.0).unwrap();
            s.insert_constant("r.conv2.b", &[c], 0.0).unwrap();
            s.insert_constant("r.bn.gamma", &[c], 1.0).unwrap();
            s.insert_constant("r.bn.beta", &[c], 0.0).unwrap();
        }
    }
    s
}

#[test]
fn residual_block_with_zero_mapping_is_identity_on_nonnegative_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = residual_store(3, None);
    let x = random(&mut rng, &[2, 3, 5, 5], 0.0, 2.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = residual_block_2d(&mut Forward::new(&mut g, &store, Mode::Train), xv, "r", 2).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn residual_block_with_zero_mapping_rectifies_negative_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = residual_store(3, None);
    let x = random(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = residual_block_2d(&mut Forward::new(&mut g, &store, Mode::Train), xv, "r", 2).unwrap();
    let relu: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(g.value(y).data(), relu.as_slice());
}

#[test]
fn residual_block_matches_composed_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = residual_store(4, Some(&mut rng));
    let x = random(&mut rng, &[2, 4, 6, 6], -1.0, 1.0);

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = residual_block_2d(&mut Forward::new(&mut g, &store, Mode::Train), xv, "r", 2).unwrap();
    let got = g.value(y).data().to_vec();

    let mut o = Graph::new();
    let p = |o: &mut Graph<f64>, n: &str| o.input(store.get(n).unwrap().clone());
    let xv = o.input(x);
    let (w1, b1, w2, b2) = (p(&mut o, "r.conv1.w"), p(&mut o, "r.conv1.b"), p(&mut o, "r.conv2.w"), p(&mut o, "r.conv2.b"));
    let (gm, bt) = (p(&mut o, "r.bn.gamma"), p(&mut o, "r.bn.beta"));
    let h = o.conv2d(xv, w1, b1, 1, 2).unwrap();
    let h = o.batch_norm_train(h, gm, bt, "oracle").unwrap();
    let h = o.relu(h);
    let h = o.conv2d(h, w2, b2, 1, 2).unwrap();
    let s = o.add(h, xv).unwrap();
    let want = o.relu(s);
    assert!(max_abs_diff(&got, o.value(want).data()) < 1e-12);
}

fn gate_store(c: usize, zero_filter: bool, gate_bias: f64, rng: &mut ChaCha8Rng) -> ParameterStore<f64> {
    let mut s = ParameterStore::new();
    if zero_filter {
        s.insert_constant("b.filter.w", &[c, c, 3], 0.0).unwrap();
        s.insert_constant("b.filter.b", &[c], 0.0).unwrap();
    } else {
        s.insert("b.filter.w", random(rng, &[c, c, 3], -0.5, 0.5), true).unwrap();
        s.insert("b.filter.b", random(rng, &[c], -0.5, 0.5), false).unwrap();
    }
    s.insert("b.gate.w", random(rng, &[c, c, 3], -0.5, 0.5), true).unwrap();
    s.insert_constant("b.gate.b", &[c], gate_bias).unwrap();
    s
}

#[test]
fn generator_block_with_zero_filter_is_tanh() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = gate_store(4, true, 0.0, &mut rng);
    let x = random(&mut rng, &[2, 4, 16], -3.0, 3.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = generator_block_1d(&mut Forward::new(&mut g, &store, Mode::Train), xv, "b", 2).unwrap();
    let want: Vec<f64> = x.data().iter().map(|v| v.tanh()).collect();
    assert_eq!(g.value(y).data(), want.as_slice());
}

#[test]
fn generator_block_with_closed_gate_is_tanh() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = gate_store(4, false, -1e4, &mut rng);
    let x = random(&mut rng, &[2, 4, 16], -3.0, 3.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = generator_block_1d(&mut Forward::new(&mut g, &store, Mode::Train), xv, "b", 2).unwrap();
    let want: Vec<f64> = x.data().iter().map(|v| v.tanh()).collect();
    assert_eq!(g.value(y).data(), want.as_slice());
}

fn mapper_store(w1: Tensor<f64>, w2: Tensor<f64>) -> ParameterStore<f64> {
    let mut s = ParameterStore::new();
    s.insert("map.fc1.w", w1, true).unwrap();
    s.insert_constant("map.fc1.b", &[FEATURE_DIM], 0.0).unwrap();
    s.insert("map.fc2.w", w2, true).unwrap();
    s.insert_constant("map.fc2.b", &[FEATURE_DIM], 0.0).unwrap();
    s
}

fn identity() -> Tensor<f64> {
    Tensor::from_fn(&[FEATURE_DIM, FEATURE_DIM], |i| if i / FEATURE_DIM == i % FEATURE_DIM { 1.0 } else { 0.0 })
}

#[test]
fn cross_modal_map_with_identity_weights_is_tanh() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let store = mapper_store(identity(), identity());
    let x = random(&mut rng, &[2, FEATURE_DIM], -0.1, 0.1);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = cross_modal_map(&mut Forward::new(&mut g, &store, Mode::Train), xv).unwrap();
    let want: Vec<f64> = x.data().iter().map(|v| v.tanh()).collect();
    assert!(max_abs_diff(g.value(y).data(), &want) < 1e-15);

    let mut g = Graph::new();
    let zero = g.input(Tensor::zeros(&[1, FEATURE_DIM]));
    let random_store = mapper_store(
        random(&mut rng, &[FEATURE_DIM, FEATURE_DIM], -0.1, 0.1),
        random(&mut rng, &[FEATURE_DIM, FEATURE_DIM], -0.1, 0.1),
    );
    let y = cross_modal_map(&mut Forward::new(&mut g, &random_store, Mode::Train), zero).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn cross_modal_map_matches_composed_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (w1, w2) = (
        random(&mut rng, &[FEATURE_DIM, FEATURE_DIM], -0.05, 0.05),
        random(&mut rng, &[FEATURE_DIM, FEATURE_DIM], -0.05, 0.05),
    );
    let store = mapper_store(w1.clone(), w2.clone());
    let x = random(&mut rng, &[3, FEATURE_DIM], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = cross_modal_map(&mut Forward::new(&mut g, &store, Mode::Train), xv).unwrap();

    let mut want = vec![0.0; 3 * FEATURE_DIM];
    for n in 0..3 {
        let h: Vec<f64> = (0..FEATURE_DIM)
            .map(|j| (0..FEATURE_DIM).map(|k| x.data()[n * FEATURE_DIM + k] * w1.data()[k * FEATURE_DIM + j]).sum::<f64>().tanh())
            .collect();
        for j in 0..FEATURE_DIM {
            want[n * FEATURE_DIM + j] = (0..FEATURE_DIM).map(|k| h[k] * w2.data()[k * FEATURE_DIM + j]).sum();
        }
    }
    assert!(max_abs_diff(g.value(y).data(), &want) < 1e-12);
}

#[test]
fn image_encoder_full_width_shapes() {
    let shape = ImageShape {
        height: 32,
        width: 32,
        channels: 3,
    };
    let cfg = ModelConfig::new(10, 64, shape);
    assert_eq!(cfg.stage_sizes(), [(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)]);
    let store = init_joint_params::<f32>(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(&[2, 3, 32, 32], |_| rng.random_range(-1.0f32..1.0));
    let mut g = Graph::new();
    let xv = g.input(x);
    let out = image_encoder_forward(&mut Forward::new(&mut g, &store, Mode::Train), &cfg, xv).unwrap();
    assert_eq!(g.shape(out.feature), &[2, FEATURE_DIM]);
    assert_eq!(g.shape(out.logits), &[2, 10]);
    assert!(g.value(out.feature).is_finite());
    assert_eq!(store.get("enc.trans4.w").unwrap().shape(), &[1024, 512, 1, 1]);
    assert_eq!(store.get("enc.res0.conv1.w").unwrap().shape(), &[32, 32, 3, 3]);

    let feats = FeatureVector::from_batch(g.value(out.feature), FeatureRole::Image).unwrap();
    assert_eq!(feats.len(), 2);
    assert_eq!(feats[0].values().len(), FEATURE_DIM);
}

#[test]
fn image_encoder_rejects_wrong_shape() {
    let cfg = ModelConfig::desk(4, 64, SHAPE_16);
    let store = init_joint_params::<f32>(&cfg, 1).unwrap();
    let mut g = Graph::new();
    let xv = g.input(Tensor::zeros(&[2, 1, 8, 8]));
    assert!(image_encoder_forward(&mut Forward::new(&mut g, &store, Mode::Train), &cfg, xv).is_err());
}

#[test]
fn zero_image_gives_finite_features() {
    let cfg = ModelConfig::desk(4, 64, SHAPE_16);
    let store = init_joint_params::<f64>(&cfg, 3).unwrap();
    let mut g = Graph::new();
    let xv = g.input(Tensor::zeros(&[2, 1, 16, 16]));
    let out = image_encoder_forward(&mut Forward::new(&mut g, &store, Mode::Train), &cfg, xv).unwrap();
    assert!(g.value(out.feature).is_finite());
    assert!(g.value(out.logits).is_finite());
}

#[test]
fn autoencoder_layer_sizes_and_bottleneck_range() {
    let cfg = ModelConfig::desk(4, 3000, SHAPE_16);
    let store = init_audio_params::<f32>(&cfg, 9).unwrap();
    let sizes: Vec<Vec<usize>> = (1..=6).map(|i| store.get(&format!("ae.fc{i}.w")).unwrap().shape().to_vec()).collect();
    assert_eq!(
        sizes,
        [[3000, 4096], [4096, 2048], [2048, 1024], [1024, 2048], [2048, 4096], [4096, 3000]]
    );
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = Tensor::from_fn(&[2, 3000], |_| rng.random_range(-1.0f32..1.0));
    let mut g = Graph::new();
    let av = g.input(a);
    let out = audio_autoencoder_forward(&mut Forward::new(&mut g, &store, Mode::Train), &cfg, av).unwrap();
    assert_eq!(g.shape(out.feature), &[2, FEATURE_DIM]);
    assert_eq!(g.shape(out.reconstruction), &[2, 3000]);
    assert!(g.value(out.feature).data().iter().all(|v| v.abs() < 1.0));

    let mut g = Graph::new();
    let zero = g.input(Tensor::zeros(&[2, 3000]));
    let out = audio_autoencoder_forward(&mut Forward::new(&mut g, &store, Mode::Train), &cfg, zero).unwrap();
    assert!(g.value(out.reconstruction).data().iter().all(|&v| v == 0.0));

    let mut g = Graph::new();
    let short = g.input(Tensor::zeros(&[2, 2999]));
    assert!(audio_autoencoder_forward(&mut Forward::new(&mut g, &store, Mode::Train), &cfg, short).is_err());
}

#[test]
fn generator_output_length_matches_each_dataset_config() {
    for len in [18140, 24020, 29356] {
        let cfg = ModelConfig::desk(10, len, SHAPE_16);
        let store = init_joint_params::<f32>(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let phi = g.input(Tensor::full(&[2, FEATURE_DIM], 0.1f32));
        let a = audio_generator_forward(&mut Forward::frozen(&mut g, &store, Mode::Infer), &cfg, phi).unwrap();
        assert_eq!(g.shape(a), &[2, len]);
        assert!(g.value(a).is_finite());
    }
}

#[test]
fn autoencoder_generator_variant_has_fc_decoder() {
    let mut cfg = ModelConfig::desk(3, 500, SHAPE_16);
    cfg.ablation.autoencoder_generator = true;
    let store = init_joint_params::<f32>(&cfg, 2).unwrap();
    assert_eq!(store.get("gen.dec3.w").unwrap().shape(), &[4096, 500]);
    assert!(!store.contains("gen.block0.filter.w"));
    let mut g = Graph::new();
    let phi = g.input(Tensor::full(&[2, FEATURE_DIM], 0.1f32));
    let a = audio_generator_forward(&mut Forward::frozen(&mut g, &store, Mode::Infer), &cfg, phi).unwrap();
    assert_eq!(g.shape(a), &[2, 500]);
}

fn test_image(id: &str, seed: u64) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageSample::new(id, 0, SHAPE_16, (0..256).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap()
}

#[test]
fn inference_is_deterministic_and_batch_independent() {
    let cfg = ModelConfig::desk(3, 800, SHAPE_16);
    let model = InferenceModel::new(cfg.clone(), init_joint_params::<f32>(&cfg, 4).unwrap()).unwrap();
    let img = test_image("a", 1);
    let out = model.generate(&[img.clone(), img.clone()]).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].len(), 800);
    assert_eq!(out[0], out[1]);
    assert_eq!(model.generate(&[img]).unwrap()[0], out[0]);
}

#[test]
fn inference_rejects_partial_and_phase1_checkpoints() {
    let cfg = ModelConfig::desk(3, 100, SHAPE_16);
    let mut ckpt = Checkpoint::new(CheckpointKind::Joint, cfg.clone(), init_joint_params::<f32>(&cfg, 4).unwrap());
    assert!(InferenceModel::from_checkpoint(ckpt.clone()).is_err());
    ckpt.complete = true;
    assert!(InferenceModel::from_checkpoint(ckpt).is_ok());
    let mut audio = Checkpoint::new(CheckpointKind::Audio, cfg.clone(), init_audio_params::<f32>(&cfg, 4).unwrap());
    audio.complete = true;
    assert!(InferenceModel::from_checkpoint(audio).is_err());
}

#[test]
fn checkpoint_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::desk(3, 100, SHAPE_16);
    let mut ckpt = Checkpoint::new(CheckpointKind::Joint, cfg.clone(), init_joint_params::<f32>(&cfg, 4).unwrap());
    ckpt.seed = 42;
    ckpt.step = 7;
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ckpt.save(&p1).unwrap();
    let loaded = Checkpoint::<f32>::load(&p1).unwrap();
    assert_eq!(loaded, ckpt);
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let mut bytes = std::fs::read(&p1).unwrap();
    bytes[0] = b'X';
    std::fs::write(&p2, &bytes).unwrap();
    assert!(Checkpoint::<f32>::load(&p2).is_err());
    let whole = std::fs::read(&p1).unwrap();
    std::fs::write(&p2, &whole[..whole.len() - 3]).unwrap();
    assert!(Checkpoint::<f32>::load(&p2).is_err());
    // a 32-bit checkpoint widens losslessly into a 64-bit store
    let wide = Checkpoint::<f64>::load(&p1).unwrap();
    assert_eq!(wide.params.get("map.fc1.w").unwrap(), &ckpt.params.get("map.fc1.w").unwrap().cast::<f64>());
}
