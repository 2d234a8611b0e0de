//! End-to-end training behaviour on small generated datasets.

use std::path::Path;
use std::time::Instant;

use sgpsam::backbone::{EncoderConfig, LayerRange, ModelConfig, SegmentationModel};
use sgpsam::checkpoint;
use sgpsam::harness::{train, RunConfig, RunPaths};
use sgpsam::synthdata::{generate_dataset, GenSpec};
use sgpsam::zoomloss::LossConfig;
use sgpsam::Error;

fn dataset(dir: &Path, spec: GenSpec) {
    generate_dataset(&spec, dir).unwrap();
}

fn small_spec(count: usize) -> GenSpec {
    GenSpec {
        count,
        seed: 17,
        volume_shape: [16, 16, 16],
        lesion_fraction_range: (0.01, 0.04),
        ..GenSpec::default()
    }
}

fn config(data: &Path, out: &Path, name: &str) -> RunConfig {
    RunConfig {
        name: name.into(),
        train_manifest: data.join("train.json"),
        test_manifest: data.join("test.json"),
        out_dir: out.to_path_buf(),
        val_samples: 2,
        model: ModelConfig {
            volume_shape: [16, 16, 16],
            encoder: EncoderConfig {
                embed_channels: 16,
                num_blocks: 2,
                sgpm_layers: Some(LayerRange::new(1, 2).unwrap()),
                ..EncoderConfig::default()
            },
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn one_epoch_on_eight_small_volumes_is_quick() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, small_spec(10));
    let mut cfg = config(&data, tmp.path(), "smoke");
    cfg.epochs = 1;
    cfg.max_train_samples = Some(8);
    cfg.model.encoder = EncoderConfig::default();
    let start = Instant::now();
    let out = train(&cfg, |_| {}).unwrap();
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert_eq!(out.epochs.len(), 1);
    let paths = RunPaths::new(&out.run_dir);
    for f in [paths.metrics(), paths.gates(), paths.checkpoint_bin(), paths.config_echo()] {
        assert!(f.exists(), "{} missing", f.display());
    }
}

#[test]
fn identical_configs_give_identical_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, small_spec(6));
    let mut a = config(&data, tmp.path(), "a");
    a.epochs = 2;
    let mut b = a.clone();
    b.name = "b".into();
    let ra = train(&a, |_| {}).unwrap();
    let rb = train(&b, |_| {}).unwrap();
    assert_eq!(ra.epochs, rb.epochs);
    let read = |r: &Path| std::fs::read(RunPaths::new(r).checkpoint_bin()).unwrap();
    assert_eq!(read(&ra.run_dir), read(&rb.run_dir));

    let mut c = a.clone();
    c.name = "c".into();
    c.seed = 1;
    let rc = train(&c, |_| {}).unwrap();
    assert_ne!(ra.epochs, rc.epochs);
}

#[test]
fn loss_decreases_over_first_epochs_on_easy_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(
        &data,
        GenSpec {
            lesion_fraction_range: (0.09, 0.11),
            intensity_contrast: 4.0,
            noise_sigma: 0.05,
            ..small_spec(10)
        },
    );
    let mut cfg = config(&data, tmp.path(), "easy");
    cfg.epochs = 5;
    cfg.lr = 1e-3;
    cfg.loss = LossConfig::dice_bce();
    let out = train(&cfg, |_| {}).unwrap();
    let losses: Vec<f64> = out.epochs.iter().map(|m| m.train_loss).collect();
    assert!(
        losses.windows(2).all(|w| w[1] < w[0]),
        "loss not strictly decreasing: {losses:?}"
    );
}

#[test]
fn non_finite_loss_aborts_with_loadable_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, small_spec(6));
    let mut cfg = config(&data, tmp.path(), "blowup");
    cfg.epochs = 3;
    cfg.lr = 1e300;
    let err = train(&cfg, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    assert_eq!(err.exit_code(), 2);

    let paths = RunPaths::new(cfg.run_dir());
    let (store, _) = checkpoint::load(&paths.checkpoint_bin(), &paths.checkpoint_index()).unwrap();
    let (_, mut fresh) = SegmentationModel::new(cfg.model.clone(), cfg.seed).unwrap();
    fresh.load_from(&store).unwrap();
    let bad: Vec<String> = fresh
        .iter()
        .filter(|(_, _, t)| t.first_non_finite().is_some())
        .map(|(_, name, _)| name.to_string())
        .collect();
    assert!(bad.is_empty(), "{err}; non-finite after reload: {bad:?}");
}
