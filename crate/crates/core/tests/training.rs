//! Training loop behaviour on a tiny model: resume, zero steps, logging and
//! frozen modules.

use kvmix::adapters::EncoderMix;
use kvmix::checkpoint::{Checkpoint, Stage};
use kvmix::model::{DenoiserConfig, Model, ModelConfig};
use kvmix::sprite_world::SceneDistribution;
use kvmix::trainer::{fit, Dataset, FitOptions, TrainConfig, FINAL_CHECKPOINT, METRICS_FILE};
use tempfile::tempdir;

fn tiny() -> (Model, Dataset) {
    let model = Model::init(&ModelConfig {
        denoiser: DenoiserConfig {
            base_channels: 8,
            ..DenoiserConfig::default()
        },
        ..ModelConfig::default()
    })
    .unwrap();
    let dist = SceneDistribution {
        canvas_size: 32,
        ..SceneDistribution::default()
    };
    let data = Dataset::new(&model, dist.generate(6, 21).unwrap(), true).unwrap();
    (model, data)
}

fn cfg(total: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        total_steps: total,
        pretrain_steps: total,
        learning_rate: 1e-3,
        checkpoint_every: 2,
        log_every: 1,
        ..TrainConfig::default()
    }
}

fn opts(stage: Stage, dir: &std::path::Path) -> FitOptions {
    FitOptions {
        stage,
        mix: EncoderMix::Mixed,
        out_dir: dir.to_path_buf(),
        seed: 5,
        resume: None,
        stop_at: None,
    }
}

fn same_params(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.params.checksum(|_| true) == b.params.checksum(|_| true)
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (model, data) = tiny();
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let full = fit(&model, &data, &cfg(4), &opts(Stage::Adapters, a.path())).unwrap();

    let first = fit(
        &model,
        &data,
        &cfg(4),
        &FitOptions {
            stop_at: Some(2),
            ..opts(Stage::Adapters, b.path())
        },
    )
    .unwrap();
    assert_eq!(first.step, 2);
    let resumed = fit(
        &model,
        &data,
        &cfg(4),
        &FitOptions {
            resume: Some(b.path().join("step_000002.ckpt")),
            ..opts(Stage::Adapters, b.path())
        },
    )
    .unwrap();
    assert_eq!(resumed.step, 4);
    assert!(same_params(&full, &resumed));
    assert_eq!(full.optimizer, resumed.optimizer);

    // Metrics continue rather than restart.
    let rows = std::fs::read_to_string(b.path().join(METRICS_FILE)).unwrap();
    let steps: Vec<&str> = rows.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4"]);
    assert!(rows.starts_with("step,loss_diffusion,loss_xa,loss_total,lr,wall_time_s"));
}

#[test]
fn zero_steps_leaves_the_initial_weights() {
    let (model, data) = tiny();
    let dir = tempdir().unwrap();
    let ck = fit(&model, &data, &cfg(0), &opts(Stage::Adapters, dir.path())).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.params.checksum(|_| true), model.params.checksum(|_| true));
    let loaded = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT), Some(&model.cfg)).unwrap();
    assert!(same_params(&ck, &loaded));
}

#[test]
fn checkpoint_records_the_configured_learning_rate() {
    let (model, data) = tiny();
    let dir = tempdir().unwrap();
    let ck = fit(&model, &data, &cfg(1), &opts(Stage::Adapters, dir.path())).unwrap();
    assert_eq!(ck.optimizer.as_ref().unwrap().lr, 1e-3);
    assert_eq!(ck.train_config["learning_rate"].as_f64().unwrap() as f32, 1e-3);
    let base = fit(
        &model,
        &data,
        &TrainConfig {
            pretrain_learning_rate: 2e-3,
            ..cfg(1)
        },
        &opts(Stage::Base, dir.path()),
    )
    .unwrap();
    assert_eq!(base.optimizer.unwrap().lr, 2e-3);
    assert_eq!(base.mix, None);
}

#[test]
fn stages_touch_only_their_modules() {
    let (model, data) = tiny();
    let dir = tempdir().unwrap();
    let ck = fit(&model, &data, &cfg(2), &opts(Stage::Adapters, dir.path())).unwrap();
    for (k, t) in ck.params.iter() {
        let changed = t.data() != model.params.get(k).data();
        let trainable = kvmix::model::is_adapter_trainable(k);
        assert!(trainable || !changed, "frozen {k} changed");
    }
    assert!(ck.params.iter().any(|(k, t)| kvmix::model::is_adapter_trainable(k) && t.data() != model.params.get(k).data()));

    let ck = fit(&model, &data, &cfg(2), &opts(Stage::Base, dir.path())).unwrap();
    for (k, t) in ck.params.iter() {
        if t.data() != model.params.get(k).data() {
            assert!(kvmix::model::is_base_trainable(k), "{k} is not part of the base stage");
        }
    }
}

#[test]
fn resuming_with_other_frozen_weights_is_refused() {
    let (model, data) = tiny();
    let dir = tempdir().unwrap();
    fit(&model, &data, &cfg(2), &opts(Stage::Adapters, dir.path())).unwrap();
    let mut other = model.params.clone();
    let key = other.keys().find(|k| k.starts_with("enc_fine.")).unwrap().clone();
    let n = other.get(&key).numel();
    other.replace(&key, vec![0.5; n]).unwrap();
    let moved = model.with_params(other);
    let err = fit(
        &moved,
        &data,
        &cfg(4),
        &FitOptions {
            resume: Some(dir.path().join(FINAL_CHECKPOINT)),
            ..opts(Stage::Adapters, dir.path())
        },
    )
    .unwrap_err();
    assert!(matches!(err, kvmix::Error::FrozenChecksum { .. }), "{err}");
}
