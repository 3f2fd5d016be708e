use ulbsc::codec_train::{train_codec, CodecTrainConfig};
use ulbsc::dataset::{generate_pair_sized, SaliencyMap, SceneSpec, ShapeKind};
use ulbsc::saliency::{loss_sal, Arch, SaliencyCodec};
use ulbsc::vq;
use ulbsc_autodiff::gradcheck::check_store;

fn small_arch() -> Arch {
    Arch {
        height: 16,
        width: 16,
        channels: [2, 3],
        latent_channels: 2,
    }
}

fn maps(n: usize, size: usize) -> Vec<SaliencyMap> {
    (0..n)
        .map(|i| {
            let spec = SceneSpec {
                shape: ShapeKind::ALL[i % 3],
                center: (0.25 + 0.03 * i as f64, 0.75 - 0.03 * i as f64),
                size: 0.4,
                blur: 0.8,
                seed: i as u64,
            };
            generate_pair_sized(&spec, size, size).unwrap().0
        })
        .collect()
}

#[test]
fn codec_gradients_match_finite_differences() {
    let codec = SaliencyCodec::<f32>::new(small_arch(), 3).unwrap().cast::<f64>();
    let data = maps(2, 16);
    let refs: Vec<&SaliencyMap> = data.iter().collect();
    let input = codec.batch_tensor(&refs).unwrap();
    let mut store = codec.store().clone();
    let report = check_store(&mut store, 1e-5, |g, store| {
        let p = g.bind(store, true)?;
        let x = g.constant(input.clone())?;
        let z = codec.encode_graph(g, &p, x)?;
        let y = codec.decode_graph(g, &p, z)?;
        let mse = g.mse(x, y)?;
        let prior = g.mean_square(z)?;
        let prior = g.scale(prior, 0.0005)?;
        g.add(mse, prior)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.checked > 100);
}

#[test]
fn smoke_training_round_trips_checkpoint() {
    let data = maps(8, 16);
    let cfg = CodecTrainConfig {
        arch: small_arch(),
        epochs: 1,
        warmup_epochs: 0,
        batch: 4,
        n_idx: 4,
        ..Default::default()
    };
    let trained = train_codec(&data, &cfg).unwrap();
    assert!(trained.report.epochs.iter().all(|e| e.loss.is_finite()));
    let (before, after) = trained.report.index_assignment.unwrap();
    assert!(after.is_finite() && before.is_finite());
    let dir = tempfile::tempdir().unwrap();
    trained.codec.save(dir.path(), Some(&trained.codebook)).unwrap();
    let (codec, cb) = SaliencyCodec::load(dir.path()).unwrap();
    let cb = cb.unwrap();
    assert_eq!(cb, trained.codebook);
    for (a, b) in codec.store().iter().zip(trained.codec.store().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor.data(), b.tensor.data());
    }
    let z = codec.encode(&data[0]).unwrap();
    assert_eq!(z, trained.codec.encode(&data[0]).unwrap());
    assert_eq!(vq::quantize(&z, &cb).unwrap(), vq::quantize(&z, &trained.codebook).unwrap());
}

#[test]
fn training_lowers_the_codec_loss() {
    let data = maps(16, 16);
    let cfg = CodecTrainConfig {
        arch: small_arch(),
        epochs: 8,
        warmup_epochs: 4,
        batch: 4,
        lr: 3e-3,
        n_idx: 4,
        ..Default::default()
    };
    let trained = train_codec(&data, &cfg).unwrap();
    assert!(trained.report.probe_final < trained.report.probe_initial, "{:?}", trained.report);
    assert!(trained.codebook.min_distance() > 0.0);
    let z = trained.codec.encode(&data[0]).unwrap();
    let m = trained.codec.decode(&z).unwrap();
    assert!(loss_sal(&data[0], &m, &z, 0.001).unwrap().is_finite());
    assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let codec = SaliencyCodec::<f32>::new(small_arch(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    codec.save(dir.path(), None).unwrap();
    let weights = dir.path().join("weights.bin");
    let bytes = std::fs::read(&weights).unwrap();
    std::fs::write(&weights, &bytes[..bytes.len() - 4]).unwrap();
    assert!(SaliencyCodec::load(dir.path()).is_err());
}
