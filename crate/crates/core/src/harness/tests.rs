use super::*;
use crate::datagen::generate;
use serde_json::json;

fn small(task: Task) -> Dataset {
    generate(task, Some(json!({"train_size": 64, "query_count": 16})), 5).unwrap()
}

fn quick(task: Task, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs: Some(epochs),
        batch_size: 16,
        ..TrainConfig::new(task)
    }
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(TrainConfig::from_json(br#"{"task": "ped", "batch_sise": 4}"#).is_err());
    assert!(TrainConfig::from_json(br#"{"task": "ped", "batch_size": 1}"#).is_err());
    assert!(TrainConfig::from_json(br#"{"task": "veh", "optimizer": {"lr": 0}}"#).is_err());
    let c = TrainConfig::from_json(br#"{"task": "veh"}"#).unwrap();
    assert_eq!(c.epochs(), 20);
    assert_eq!(c.batch_size, 32);
    assert!(c.augmentation);
    assert_eq!(TrainConfig::new(Task::Pedestrian).epochs(), 30);
    assert_ne!(c.hash(), TrainConfig::new(Task::Pedestrian).hash());
}

#[test]
fn zero_epochs_returns_initialization() {
    let d = small(Task::Pedestrian);
    let out = train(&quick(Task::Pedestrian, 0), &d).unwrap();
    let init = PedestrianModel::new(
        &ModelConfig::default(),
        &pedestrian_shape(d.as_pedestrian().unwrap()),
        0,
    );
    match out.checkpoint.model {
        TrainedModel::Pedestrian(m) => assert_eq!(m.flatten(), init.flatten()),
        TrainedModel::Vehicle(_) => panic!("wrong branch"),
    }
    assert!(out.record.epochs.is_empty());
}

#[test]
fn task_mismatch_is_rejected() {
    let d = small(Task::Pedestrian);
    assert!(matches!(
        train(&quick(Task::Vehicle, 1), &d),
        Err(Error::TaskDatasetMismatch { .. })
    ));
}

#[test]
fn training_is_deterministic_for_both_branches() {
    for task in [Task::Pedestrian, Task::Vehicle] {
        let d = small(task);
        let a = train(&quick(task, 2), &d).unwrap();
        let b = train(&quick(task, 2), &d).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.record.epochs, b.record.epochs);
        assert_eq!(a.record.epochs.len(), 2);
        assert_eq!(a.record.epochs[0].batches, 4);
        assert!(a.checkpoint.model.params().all_finite());
    }
}

#[test]
fn vehicle_temperature_respects_floor() {
    let d = small(Task::Vehicle);
    let mut cfg = quick(Task::Vehicle, 1);
    cfg.loss.tau_fitc_init = 1e-3;
    cfg.loss.tau_fitc_floor = 1e-3;
    cfg.optimizer.lr = 0.05;
    let out = train(&cfg, &d).unwrap();
    match out.checkpoint.model {
        TrainedModel::Vehicle(m) => assert!(m.tau >= 1e-3),
        TrainedModel::Pedestrian(_) => panic!("wrong branch"),
    }
}

#[test]
fn divergence_is_reported_with_epoch() {
    let d = small(Task::Pedestrian);
    let mut cfg = quick(Task::Pedestrian, 2);
    cfg.optimizer.lr = 1e300;
    match train(&cfg, &d) {
        Err(Error::DivergedLoss { epoch, .. }) => assert!(epoch <= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let d = small(Task::Vehicle);
    let out = train(&quick(Task::Vehicle, 1), &d).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&out.checkpoint, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.meta, out.checkpoint.meta);
    let a: Vec<u64> = back.model.params().flatten().iter().map(|x| x.to_bits()).collect();
    let b: Vec<u64> = out
        .checkpoint
        .model
        .params()
        .flatten()
        .iter()
        .map(|x| x.to_bits())
        .collect();
    assert_eq!(a, b);

    let file = dir.path().join("tensors/text.embed.f64");
    let mut bytes = std::fs::read(&file).unwrap();
    bytes[17] ^= 0x01;
    std::fs::write(&file, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(Error::CorruptCheckpoint { .. })
    ));

    std::fs::remove_file(dir.path().join(CHECKPOINT_MANIFEST)).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(Error::CorruptCheckpoint { .. })
    ));
}
