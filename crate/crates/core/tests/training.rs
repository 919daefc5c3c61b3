mod common;

use common::{small_config, small_dataset};
use dclip::data::Dataset;
use dclip::fusion::FusionParams;
use dclip::training::{
    distill_student, epoch_sweep, load_student, load_teacher, train_teacher, train_teacher_with, Checkpoint, Frozen,
    StudentTrainer, Variant,
};
use dclip::Error;

#[test]
fn zero_teacher_epochs_keep_the_initialization() {
    let mut cfg = small_config(Variant::B, 5);
    cfg.teacher_epochs = 0;
    let run = train_teacher(&small_dataset(5), &cfg).unwrap();
    let init = FusionParams::new(cfg.embed_dim, cfg.num_heads, cfg.seed).unwrap();
    assert_eq!(run.fusion.hash(), init.hash());
    assert_eq!(run.log.epochs.len(), 1);
    assert!(run.log.steps.is_empty());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut cfg = small_config(Variant::B, 5);
    cfg.teacher_lr = 0.0;
    let run = train_teacher(&small_dataset(5), &cfg).unwrap();
    let init = FusionParams::new(cfg.embed_dim, cfg.num_heads, cfg.seed).unwrap();
    assert_eq!(run.fusion.hash(), init.hash());
    assert_eq!(run.tau_loss, 0.07);
    assert_eq!(run.log.steps.len(), 2 * 9);
    let v: Vec<f64> = run.log.epochs.iter().map(|e| e.val_loss).collect();
    assert!(v.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn teacher_learns_with_a_larger_step() {
    let cfg = small_config(Variant::B, 5);
    let run = train_teacher(&small_dataset(5), &cfg).unwrap();
    let first = run.log.first_val().unwrap().val_loss;
    let last = run.log.last_val().unwrap().val_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn frozen_parts_stay_frozen() {
    for variant in [Variant::B, Variant::L] {
        let cfg = small_config(variant, 9);
        let ds = small_dataset(9);
        let t = train_teacher(&ds, &cfg).unwrap();
        assert_eq!(t.frozen_before, t.frozen_after);
        let s = distill_student(&ds, &t.checkpoint, &cfg).unwrap();
        assert_eq!(s.frozen_before, s.frozen_after);
        assert_eq!(s.frozen_before[2], t.fusion.hash());
        let base = Frozen::new(cfg.encoder_config()).unwrap();
        assert_ne!(s.student.param_hash(), base.image.param_hash());
        assert!(!s.student.is_trainable());
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let cfg = small_config(Variant::L, 3);
    let ds = small_dataset(3);
    let once = || {
        let t = train_teacher(&ds, &cfg).unwrap();
        let s = distill_student(&ds, &t.checkpoint, &cfg).unwrap();
        (
            t.checkpoint.to_bytes().unwrap(),
            t.log.steps_csv().unwrap() + &t.log.epochs_csv().unwrap(),
            s.checkpoint.to_bytes().unwrap(),
            s.log.steps_csv().unwrap() + &s.log.epochs_csv().unwrap(),
        )
    };
    assert_eq!(once(), once());
}

#[test]
fn checkpoints_reload_to_the_same_models() {
    let cfg = small_config(Variant::B, 4);
    let ds = small_dataset(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.dckp");
    let t = train_teacher_with(&ds, &cfg, Some(&path)).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt, t.checkpoint);
    assert_eq!(ckpt.meta.epoch, cfg.teacher_epochs);
    let (fusion, tau) = load_teacher(&ckpt).unwrap();
    assert_eq!((fusion.hash(), tau), (t.fusion.hash(), t.tau_loss));

    let s = distill_student(&ds, &ckpt, &cfg).unwrap();
    let student = load_student(&s.checkpoint).unwrap();
    assert_eq!(student.param_hash(), s.student.param_hash());
    assert!(matches!(load_teacher(&s.checkpoint), Err(Error::Config(_))));
}

#[test]
fn untrained_student_has_zero_anchor() {
    let mut cfg = small_config(Variant::B, 2);
    cfg.anchor_enabled = true;
    let ds = small_dataset(2);
    let frozen = Frozen::new(cfg.encoder_config()).unwrap();
    let fusion = FusionParams::new(cfg.embed_dim, cfg.num_heads, cfg.seed).unwrap();
    let s = StudentTrainer::new(&ds, &fusion, &cfg, &frozen).unwrap();
    let v = s.val_loss().unwrap();
    assert_eq!(v.anchor, Some(0.0));
    assert_eq!(v.cos_t, Some(0.0));
}

#[test]
fn disabled_terms_are_absent_from_the_log() {
    let mut cfg = small_config(Variant::B, 2);
    cfg.teacher_epochs = 0;
    cfg.use_cos_t = false;
    cfg.use_cos_i = false;
    let ds = small_dataset(2);
    let t = train_teacher(&ds, &cfg).unwrap();
    let s = distill_student(&ds, &t.checkpoint, &cfg).unwrap();
    for row in &s.log.steps {
        assert_eq!((row.cos_t, row.cos_i, row.anchor), (None, None, None));
        assert_eq!(row.total, row.contrastive);
    }
}

#[test]
fn mismatched_variant_is_a_config_error() {
    let cfg = small_config(Variant::B, 1);
    let ds = small_dataset(1);
    let mut t_cfg = cfg.clone();
    t_cfg.teacher_epochs = 0;
    let t = train_teacher(&ds, &t_cfg).unwrap();
    let other = small_config(Variant::L, 1);
    assert!(matches!(distill_student(&ds, &t.checkpoint, &other), Err(Error::Config(_))));
}

#[test]
fn empty_or_tiny_datasets_are_input_errors() {
    let cfg = small_config(Variant::B, 1);
    let empty = Dataset {
        train: vec![],
        heldout: vec![],
        regions: Default::default(),
    };
    assert!(matches!(train_teacher(&empty, &cfg), Err(Error::Input(_))));
    let mut tiny = small_dataset(1);
    tiny.train.truncate(5);
    assert!(matches!(train_teacher(&tiny, &cfg), Err(Error::Input(_))));
}

#[test]
fn one_epoch_sweep_is_the_base_row() {
    let mut cfg = small_config(Variant::B, 6);
    cfg.anchor_enabled = true;
    let ds = small_dataset(6);
    let rows = epoch_sweep(&ds, &cfg, 1).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].epoch, 0);
    assert_eq!(rows[0].retention, 1.0);
    assert!(matches!(epoch_sweep(&ds, &cfg, 0), Err(Error::Config(_))));

    let rows = epoch_sweep(&ds, &cfg, 3).unwrap();
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(rows.iter().all(|r| r.retention <= 1.0 && r.retention > 0.5));
}
