use super::*;
use crate::dataset::synthetic::{generate, SyntheticSpec};
use crate::dataset::{make_splits, partition_labels};
use crate::zoo::build_model;

struct Fixture {
    source: DatasetSource,
    split: SplitIndex,
    pre: PreprocessSpec,
}

impl Fixture {
    fn new(train: usize) -> Self {
        let source = generate(&SyntheticSpec {
            seed: 3,
            train,
            test: 20,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let split = make_splits(&source, 1).unwrap();
        let pre = PreprocessSpec::from_train_stats(&source, &split.train_idx).unwrap();
        Self { source, split, pre }
    }

    fn data(&self) -> RunData<'_> {
        RunData {
            source: &self.source,
            split: &self.split,
            preprocess: &self.pre,
        }
    }
}

fn small(seed: u64) -> ModelHandle {
    build_model(&ModelSpec::registered("desk-small").unwrap().with_seed(seed)).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        learning_rate: 0.02,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn zero_head(mut m: ModelHandle) -> ModelHandle {
    m.head.visit_mut(&mut |p| p.value.iter_mut().for_each(|v| *v = 0.0));
    m
}

fn weights(m: &ModelHandle) -> Vec<u8> {
    crate::zoo::weights_bytes(m).unwrap()
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { momentum: 1.0, ..Default::default() },
        TrainConfig { weight_decay: -1e-4, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::InvalidArgument(_))));
    }
    let fx = Fixture::new(100);
    let err = train_teacher(small(0), fx.data(), &fx.split.train_idx[..10], &config(0));
    assert!(err.is_err());
}

#[test]
fn teacher_training_is_deterministic_and_learns() {
    let fx = Fixture::new(300);
    let ids = &fx.split.train_idx[..160];
    let (a, ra) = train_teacher(small(1), fx.data(), ids, &config(3)).unwrap();
    let (b, rb) = train_teacher(small(1), fx.data(), ids, &config(3)).unwrap();
    assert_eq!(weights(&a), weights(&b));
    for (x, y) in ra.history.iter().zip(&rb.history) {
        assert_eq!(x.train_loss, y.train_loss);
        assert_eq!(x.val_accuracy, y.val_accuracy);
        assert_eq!(x.train_accuracy, y.train_accuracy);
    }
    let epochs: Vec<usize> = ra.history.iter().map(|m| m.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3]);
    assert!(ra.history.iter().all(|m| (0.0..=1.0).contains(&m.val_accuracy) && (0.0..=1.0).contains(&m.train_accuracy)));
    assert!(ra.history[2].train_loss < ra.history[0].train_loss);
    assert_eq!(ra.selected_epoch, best_val_epoch(&ra.history).unwrap());
}

#[test]
fn teacher_rejects_ids_outside_train_split() {
    let fx = Fixture::new(100);
    let leak = [fx.split.val_idx[0]];
    assert!(matches!(
        train_teacher(small(0), fx.data(), &leak, &config(1)),
        Err(Error::InvalidArgument(_))
    ));
    assert!(train_teacher(small(0), fx.data(), &[], &config(1)).is_err());
}

#[test]
fn best_val_prefers_earliest_tie() {
    let m = |epoch, val_accuracy| EpochMetrics {
        epoch,
        train_loss: 0.0,
        train_accuracy: 0.0,
        val_accuracy,
        wall_time: 0.0,
    };
    assert_eq!(best_val_epoch(&[m(1, 0.2), m(2, 0.5), m(3, 0.5), m(4, 0.1)]), Some(2));
    assert_eq!(best_val_epoch(&[m(1, 0.3), m(2, 0.3)]), Some(1));
    assert_eq!(best_val_epoch(&[]), None);
}

#[test]
fn last_policy_keeps_final_weights() {
    let fx = Fixture::new(100);
    let cfg = TrainConfig {
        checkpoint_policy: CheckpointPolicy::Last,
        ..config(2)
    };
    let (_, r) = train_teacher(small(0), fx.data(), &fx.split.train_idx[..40], &cfg).unwrap();
    assert_eq!(r.selected_epoch, 2);
}

#[test]
fn evaluate_oracles() {
    let fx = Fixture::new(200);
    // A zero head gives constant logits, so argmax is class 0 everywhere.
    let constant = zero_head(small(0));
    let mut balanced = Vec::new();
    for class in 0..10 {
        balanced.extend(fx.split.train_idx.iter().filter(|&&id| fx.source.label(id) == class).take(3));
    }
    assert_eq!(balanced.len(), 30);
    assert_eq!(evaluate(&constant, &fx.source, &balanced, &fx.pre).unwrap(), 0.1);

    // An oracle: bias the head towards the true class of one example.
    let id = balanced[17];
    let label = fx.source.label(id);
    let mut oracle = zero_head(small(0));
    oracle.head.visit_mut(&mut |p| {
        if p.name.ends_with("bias") {
            p.value[label] = 1.0;
        }
    });
    assert_eq!(evaluate(&oracle, &fx.source, &[id], &fx.pre).unwrap(), 1.0);
    let a = evaluate(&oracle, &fx.source, &balanced, &fx.pre).unwrap();
    assert_eq!(a, evaluate(&oracle, &fx.source, &balanced, &fx.pre).unwrap());
    assert!(evaluate(&oracle, &fx.source, &[], &fx.pre).is_err());
}

#[test]
fn soft_labels_rows_and_round_trip() {
    let fx = Fixture::new(150);
    let (teacher, _) = train_teacher(small(2), fx.data(), &fx.split.train_idx[..60], &config(1)).unwrap();
    let clean = fx.pre.without_augmentation();
    let soft = generate_soft_labels(&teacher, fx.source.images_only(), &fx.split, &clean, 1.0).unwrap();
    assert_eq!(soft.num_rows(), fx.split.train_idx.len());
    for i in 0..soft.num_rows() {
        let s: f64 = soft.row(i).iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() <= 1e-5);
    }
    let again = generate_soft_labels(&teacher, fx.source.images_only(), &fx.split, &clean, 1.0).unwrap();
    assert_eq!(soft.to_bytes(), again.to_bytes());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("soft.bin");
    soft.save(&path).unwrap();
    let loaded = SoftLabelSet::load(&path).unwrap();
    assert_eq!(loaded, soft);
    assert!(loaded.check(&fx.source.checksum, &fx.split, 1.0, Some(&teacher_id(&teacher).unwrap())).is_ok());
    assert!(matches!(loaded.check("other", &fx.split, 1.0, None), Err(Error::Provenance(_))));
    assert!(matches!(loaded.check(&fx.source.checksum, &fx.split, 2.0, None), Err(Error::Provenance(_))));
    let mut reseeded = fx.split.clone();
    reseeded.seed += 1;
    assert!(matches!(loaded.check(&fx.source.checksum, &reseeded, 1.0, None), Err(Error::Provenance(_))));
    assert!(matches!(
        loaded.check(&fx.source.checksum, &fx.split, 1.0, Some("feed")),
        Err(Error::Provenance(_))
    ));
    assert!(generate_soft_labels(&teacher, fx.source.images_only(), &fx.split, &fx.pre, 1.0).is_err());
}

#[test]
fn soft_label_file_rejects_corruption() {
    let prov = Provenance {
        teacher_id: "t".into(),
        dataset_checksum: "d".into(),
        split_seed: 0,
        temperature_used: 1.0,
    };
    let set = SoftLabelSet::new(prov.clone(), 2, vec![0.25, 0.75, 0.5, 0.5]).unwrap();
    let bytes = set.to_bytes();
    assert_eq!(&bytes[..4], b"SLBL");
    assert_eq!(bytes.len(), 16 + 4 * 4);
    assert!(SoftLabelSet::from_bytes(&bytes[..bytes.len() - 1], prov.clone()).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(SoftLabelSet::from_bytes(&bad_magic, prov.clone()).is_err());
    assert!(SoftLabelSet::new(prov.clone(), 2, vec![0.3, 0.3]).is_err());
    assert!(SoftLabelSet::new(prov, 2, vec![0.5, 0.5, 0.5]).is_err());
}

#[test]
fn constant_two_class_teacher_gives_uniform_rows() {
    let fx = Fixture::new(60);
    let mut spec = ModelSpec::registered("desk-small").unwrap();
    spec.num_classes = 2;
    let teacher = zero_head(build_model(&spec).unwrap());
    let soft = generate_soft_labels(
        &teacher,
        fx.source.images_only(),
        &fx.split,
        &fx.pre.without_augmentation(),
        1.0,
    )
    .unwrap();
    for i in 0..soft.num_rows() {
        assert_eq!(soft.row(i), &[0.5, 0.5]);
    }
}

#[test]
fn live_mimicry_at_zero_lr_has_zero_loss() {
    let fx = Fixture::new(120);
    let teacher = small(4);
    let mut student = small(9);
    student.copy_weights_from(&teacher).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..config(2)
    };
    let (_, r) = distill_student(student, TeacherSignal::Live(&teacher), fx.data(), &cfg).unwrap();
    assert!(r.history.iter().all(|m| m.train_loss == 0.0));
}

#[test]
fn cached_and_live_coincide_without_augmentation() {
    let fx = Fixture::new(200);
    let clean = fx.pre.without_augmentation();
    let data = RunData {
        preprocess: &clean,
        ..fx.data()
    };
    let (teacher, _) = train_teacher(small(6), data, &fx.split.train_idx[..80], &config(2)).unwrap();
    let soft = generate_soft_labels(&teacher, fx.source.images_only(), &fx.split, &clean, 1.0).unwrap();
    let (_, cached) = distill_student(small(7), TeacherSignal::Cached(&soft), data, &config(3)).unwrap();
    let (_, live) = distill_student(small(7), TeacherSignal::Live(&teacher), data, &config(3)).unwrap();
    for (c, l) in cached.history.iter().zip(&live.history) {
        assert!((c.train_loss - l.train_loss).abs() <= 1e-6, "{c:?} vs {l:?}");
        assert!((c.train_accuracy - l.train_accuracy).abs() <= 1e-6);
        assert!((c.val_accuracy - l.val_accuracy).abs() <= 1e-6);
    }
}

#[test]
fn poisoned_labels_leave_distillation_unchanged() {
    let fx = Fixture::new(200);
    let part = partition_labels(&fx.source, &fx.split, 0.5, 0, true).unwrap();
    let (teacher, _) = train_teacher(small(6), fx.data(), &part.labeled_idx, &config(1)).unwrap();
    let soft = generate_soft_labels(&teacher, fx.source.images_only(), &fx.split, &fx.pre.without_augmentation(), 1.0)
        .unwrap();
    let poisoned_source = fx.source.with_relabelled(&fx.split.train_idx, |y| y + 3);
    let poisoned = RunData {
        source: &poisoned_source,
        ..fx.data()
    };
    let (a, ra) = distill_student(small(8), TeacherSignal::Cached(&soft), fx.data(), &config(2)).unwrap();
    let (b, rb) = distill_student(small(8), TeacherSignal::Cached(&soft), poisoned, &config(2)).unwrap();
    assert_eq!(weights(&a), weights(&b));
    for (x, y) in ra.history.iter().zip(&rb.history) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_accuracy.to_bits(), y.val_accuracy.to_bits());
    }
}

#[test]
fn distill_rejects_mismatched_soft_labels() {
    let fx = Fixture::new(100);
    let teacher = small(0);
    let soft = generate_soft_labels(&teacher, fx.source.images_only(), &fx.split, &fx.pre.without_augmentation(), 1.0)
        .unwrap();
    let sub = fx.split.subset(40, 10).unwrap();
    let data = RunData {
        split: &sub,
        ..fx.data()
    };
    assert!(matches!(
        distill_student(small(1), TeacherSignal::Cached(&soft), data, &config(1)),
        Err(Error::Provenance(_))
    ));
    let hot = TrainConfig {
        temperature: 4.0,
        ..config(1)
    };
    assert!(matches!(
        distill_student(small(1), TeacherSignal::Cached(&soft), fx.data(), &hot),
        Err(Error::Provenance(_))
    ));
}

#[test]
fn checkpoint_round_trip() {
    let fx = Fixture::new(100);
    let cfg = config(2);
    let (m, r) = train_teacher(small(3), fx.data(), &fx.split.train_idx[..40], &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.safetensors");
    save_checkpoint(&path, &m, &r, &cfg).unwrap();
    let (back, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(weights(&back), weights(&m));
    assert_eq!(meta.epoch, r.selected_epoch);
    assert_eq!(meta.config, cfg);
    assert!(dir.path().join(&meta.optimizer_buffers).exists());
}
