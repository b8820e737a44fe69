//! Training loop determinism, schedule, checkpoints and inference.

use volseg::model::{load_checkpoint, Network, NetworkConfig};
use volseg::preprocess::PreprocessConfig;
use volseg::trainer::{cosine_lr, infer, infer_prepared, predict_prepared, prepare_image, train, Case, Dataset, TrainConfig};
use volseg::volume::{generate_synthetic, SyntheticSpec};
use volseg::Error;

fn case(seed: u64) -> Case {
    let spec = SyntheticSpec { seed, extents: [24; 3], radius_mm: (3.0, 6.0), ..Default::default() };
    let (hu, label) = generate_synthetic(&spec).unwrap();
    let image = prepare_image(&hu, &PreprocessConfig::default()).unwrap();
    Case { id: format!("case{seed}"), image, label }
}

fn tiny_net(seed: u64) -> Network {
    Network::new(NetworkConfig { base_width: 2, ..Default::default() }, seed).unwrap()
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig { max_epochs: epochs, patch_size: 16, batch_size: 2, val_every: 2, seed: 3, ..Default::default() }
}

fn dataset() -> Dataset {
    Dataset { train: vec![case(1), case(2), case(3)], validation: vec![case(4)] }
}

#[test]
fn same_seed_same_run_record() {
    let data = dataset();
    let cfg = tiny_config(3);
    let (mut a, mut b) = (tiny_net(1), tiny_net(1));
    let ra = train(&mut a, &data, &cfg).unwrap();
    let rb = train(&mut b, &data, &cfg).unwrap();
    assert_eq!(ra.epoch_losses, rb.epoch_losses);
    assert_eq!(ra.loss_csv(), rb.loss_csv());
    assert_eq!(ra.manifest(), rb.manifest());
    assert_eq!(a.params(), b.params());
    assert_eq!(a.buffers(), b.buffers());
    assert!(ra.epoch_losses.iter().all(|l| l.is_finite()));

    let mut c = tiny_net(1);
    let rc = train(&mut c, &data, &TrainConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(rc.epoch_losses, ra.epoch_losses);
}

#[test]
fn learning_rate_follows_the_cosine() {
    let cfg = TrainConfig { lr_min: 1e-4, ..tiny_config(4) };
    let r = train(&mut tiny_net(2), &Dataset { train: vec![case(1)], validation: vec![] }, &cfg).unwrap();
    let want: Vec<f64> = (0..4).map(|e| cosine_lr(e, 4, cfg.initial_lr, cfg.lr_min)).collect();
    assert_eq!(r.lr_trace, want);
    assert_eq!(r.lr_trace[0], cfg.initial_lr);
    assert!(r.validation.is_empty());
}

#[test]
fn validation_runs_on_schedule() {
    let r = train(&mut tiny_net(2), &dataset(), &tiny_config(3)).unwrap();
    let epochs: Vec<usize> = r.validation.iter().map(|v| v.epoch).collect();
    assert_eq!(epochs, vec![2, 3]);
    assert_eq!(r.validation[0].cases.len(), 1);
}

#[test]
fn checkpoint_then_infer_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_dir: Some(dir.path().to_path_buf()), ..tiny_config(2) };
    let mut net = tiny_net(5);
    let record = train(&mut net, &dataset(), &cfg).unwrap();
    for f in ["final.ckpt", "best.ckpt", "manifest.txt", "loss.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("loss.csv")).unwrap(), record.loss_csv());

    let (loaded, meta) = load_checkpoint(dir.path().join("final.ckpt")).unwrap();
    assert_eq!(meta.get("patch_size"), Some("16"));
    assert_eq!(loaded.params(), net.params());
    assert_eq!(loaded.buffers(), net.buffers());
    let image = &case(7).image;
    let a = predict_prepared(&net, image, 16, 8).unwrap();
    let b = predict_prepared(&loaded, image, 16, 8).unwrap();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn tiled_prediction_with_one_tile_equals_direct_forward() {
    let net = tiny_net(6);
    let image = case(8).image;
    let tiled = predict_prepared(&net, &image, 24, 0).unwrap();
    let x = volseg::tensor::Tensor::new(vec![1, 1, 24, 24, 24], image.data.clone()).unwrap();
    assert_eq!(tiled, net.predict(&x).unwrap());
}

#[test]
fn inference_returns_target_geometry() {
    let net = tiny_net(6);
    let spec = SyntheticSpec { seed: 2, extents: [20, 24, 30], radius_mm: (3.0, 6.0), spacing: 1.0, ..Default::default() };
    let (hu, _) = generate_synthetic(&spec).unwrap();
    let pre = PreprocessConfig { patch_size: 16, patch_overlap: 4, ..Default::default() };
    let a = infer(&net, &hu, &pre).unwrap();
    // 1.0 mm → 0.8 mm
    assert_eq!(a.extents(), [25, 30, 38]);
    assert_eq!(a.spacing(), [0.8; 3]);
    assert_eq!(a, infer(&net, &hu, &pre).unwrap());
    let prepared = prepare_image(&hu, &pre).unwrap();
    assert_eq!(infer_prepared(&net, &prepared, 16, 4).unwrap(), a);
}

#[test]
fn diverging_training_aborts_with_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { initial_lr: 1e30, checkpoint_dir: Some(dir.path().to_path_buf()), ..tiny_config(5) };
    match train(&mut tiny_net(1), &dataset(), &cfg) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch")),
        other => panic!("expected a non-finite abort, got {:?}", other.map(|r| r.epoch_losses)),
    }
    assert!(dir.path().join("nonfinite.ckpt").exists());
}

#[test]
fn empty_training_set_is_an_error() {
    assert!(train(&mut tiny_net(1), &Dataset::default(), &tiny_config(1)).is_err());
}
