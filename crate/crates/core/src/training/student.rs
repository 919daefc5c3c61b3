//! Distilling the teacher's image outputs into a trainable copy of the base
//! image encoder. The text encoder and the teacher stay frozen.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use super::adam::Adam;
use super::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, RngState};
use super::config::TrainConfig;
use super::features::{compute_features, stack, Frozen, SampleFeatures};
use super::log::{EpochRow, StepRow, TrainLog};
use super::teacher::{
    check_sizes, clamp_loss_tau, epoch_batches, load_teacher, loss_tau_params, tau_of, teacher_outputs, LOSS_PREFIX,
};
use crate::data::dataset::{Dataset, Sample};
use crate::encoders::ImageEncoder;
use crate::error::{Error, Result};
use crate::eval::t2i_r1;
use crate::fusion::{FusionParams, TeacherSettings, TAU_INIT};
use crate::losses::{student_loss, student_loss_on, LossValue, StudentBatch, StudentVars};
use crate::params::ParamSet;
use crate::region::ConfidenceAreaCosine;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const STUDENT_PREFIX: &str = "student.";

/// Normalized embeddings of `samples` under `image`, one row per sample.
pub fn image_embeddings(image: &ImageEncoder, samples: &[Sample]) -> Result<Tensor<f32>> {
    let rows: Vec<Vec<f32>> = samples
        .par_iter()
        .map_init(|| image.session(), |s, x| Ok(s.embed(&x.parts)?.l2_normalize()?.into_data()))
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

/// Mean cosine between matching rows of two normalized matrices, computed as
/// `1 − ½‖a − b‖²` so identical inputs give exactly 1.
pub fn mean_row_cosine(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (n, d) = a.dims2()?;
    let total: f64 = (0..n)
        .map(|i| {
            let sq: f64 = a.data()[i * d..(i + 1) * d]
                .iter()
                .zip(&b.data()[i * d..(i + 1) * d])
                .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                .sum();
            1.0 - 0.5 * sq
        })
        .sum();
    Ok(total / n as f64)
}

struct Split {
    samples: Vec<Sample>,
    feats: Vec<SampleFeatures>,
    targets: Tensor<f32>,
}

impl Split {
    fn new(samples: &[Sample], feats: Vec<SampleFeatures>, fusion: &FusionParams, settings: TeacherSettings) -> Result<Self> {
        let targets = teacher_outputs(fusion, settings, &feats)?;
        Ok(Split {
            samples: samples.to_vec(),
            feats,
            targets,
        })
    }

    fn rows<'a>(&'a self, idx: &'a [usize], f: impl Fn(&'a SampleFeatures) -> &'a Tensor<f32>) -> Result<Tensor<f32>> {
        stack(idx.iter().map(|&i| f(&self.feats[i]).data()))
    }
}

/// Student training state that can be advanced one epoch at a time.
pub struct StudentTrainer {
    cfg: TrainConfig,
    settings: TeacherSettings,
    teacher_tau: f32,
    train: Split,
    val: Split,
    student: ImageEncoder,
    loss: ParamSet,
    adam: Adam,
    epoch: usize,
    step: u64,
    rng: Vec<RngState>,
    log: TrainLog,
}

impl StudentTrainer {
    pub fn new(dataset: &Dataset, fusion: &FusionParams, cfg: &TrainConfig, frozen: &Frozen) -> Result<Self> {
        cfg.validate()?;
        let (train, val) = dataset.split_validation();
        check_sizes(train.len(), val.len(), cfg)?;
        let tf = compute_features(train, dataset, frozen, &ConfidenceAreaCosine)?;
        let vf = compute_features(val, dataset, frozen, &ConfidenceAreaCosine)?;
        Self::from_features(cfg, fusion, frozen, (train, tf), (val, vf))
    }

    /// Starts from precomputed features of the training and validation splits.
    pub fn from_features(
        cfg: &TrainConfig,
        fusion: &FusionParams,
        frozen: &Frozen,
        train: (&[Sample], Vec<SampleFeatures>),
        val: (&[Sample], Vec<SampleFeatures>),
    ) -> Result<Self> {
        if fusion.embed_dim() != cfg.embed_dim {
            return Err(Error::Config(format!(
                "teacher width {} does not match embed_dim {}",
                fusion.embed_dim(),
                cfg.embed_dim
            )));
        }
        let settings = TeacherSettings {
            clusters: cfg.clusters,
            seed: cfg.seed,
        };
        let mut adam = Adam::new(cfg.student_lr);
        adam.clip_grad_norm = cfg.clip_grad_norm;
        let mut s = StudentTrainer {
            cfg: cfg.clone(),
            settings,
            teacher_tau: fusion.tau(),
            train: Split::new(train.0, train.1, fusion, settings)?,
            val: Split::new(val.0, val.1, fusion, settings)?,
            student: frozen.image.trainable_copy(),
            loss: loss_tau_params(TAU_INIT),
            adam,
            epoch: 0,
            step: 0,
            rng: Vec::new(),
            log: TrainLog::default(),
        };
        let row = s.validate()?;
        s.log.push_epoch(row);
        Ok(s)
    }

    /// Recomputes the cached teacher targets from new fusion parameters.
    pub fn set_teacher(&mut self, fusion: &FusionParams) -> Result<()> {
        self.train.targets = teacher_outputs(fusion, self.settings, &self.train.feats)?;
        self.val.targets = teacher_outputs(fusion, self.settings, &self.val.feats)?;
        self.teacher_tau = fusion.tau();
        Ok(())
    }

    pub fn student(&self) -> &ImageEncoder {
        &self.student
    }

    pub fn tau_loss(&self) -> f32 {
        tau_of(&self.loss)
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Student objective over the whole validation split.
    pub fn val_loss(&self) -> Result<LossValue> {
        self.val_loss_with(&image_embeddings(&self.student, &self.val.samples)?)
    }

    fn val_loss_with(&self, emb: &Tensor<f32>) -> Result<LossValue> {
        let all: Vec<usize> = (0..self.val.samples.len()).collect();
        let text = self.val.rows(&all, |f| &f.text_unit)?;
        let base = self.val.rows(&all, |f| &f.base_image)?;
        student_loss(
            &StudentBatch {
                student_image: emb,
                student_text: &text,
                teacher_image: &self.val.targets,
                teacher_text: &text,
                base_image: self.cfg.anchor_enabled.then_some(&base),
            },
            self.tau_loss() as f64,
            &self.cfg.student_loss(),
        )
    }

    fn validate(&self) -> Result<EpochRow> {
        let emb = image_embeddings(&self.student, &self.val.samples)?;
        let v = self.val_loss_with(&emb)?;
        let all: Vec<usize> = (0..self.val.samples.len()).collect();
        let ids: Vec<String> = self.val.samples.iter().map(|s| s.id.clone()).collect();
        let r1 = t2i_r1(&self.val.rows(&all, |f| &f.text_unit)?, &emb, &ids)?;
        let cos_i = match v.cos_i {
            Some(c) => c,
            None => crate::losses::cosine_distill(&emb, &self.val.targets)?,
        };
        Ok(EpochRow {
            epoch: self.epoch,
            step: self.step,
            val_loss: v.total,
            val_cos_i: Some(cos_i),
            val_t2i_r1: Some(r1),
        })
    }

    fn train_step(&mut self, batch: &[usize]) -> Result<StepRow> {
        let mut tape = Tape::new();
        let (vars, named) = self.student.bind_named(&mut tape);
        let tau = tape.leaf_f32(self.loss.get("tau")?, true);
        let es = batch
            .iter()
            .map(|&i| {
                let raw = tape.leaf_f32(&self.train.samples[i].parts, false);
                self.student.forward_embed(&mut tape, &vars, raw)
            })
            .collect::<Result<Vec<_>>>()?;
        let si = tape.concat_rows(&es)?;
        let st = tape.leaf_f32(&self.train.rows(batch, |f| &f.text_unit)?, false);
        let ti = tape.leaf_f32(&self.train.targets.select_rows(batch)?, false);
        let bi = if self.cfg.anchor_enabled {
            Some(tape.leaf_f32(&self.train.rows(batch, |f| &f.base_image)?, false))
        } else {
            None
        };
        let vars = StudentVars {
            student_image: si,
            student_text: st,
            teacher_image: ti,
            // The student shares the frozen text encoder with the teacher.
            teacher_text: st,
            base_image: bi,
        };
        let lv = student_loss_on(&mut tape, &vars, tau, &self.cfg.student_loss())?;
        let value = LossValue::read(&tape, &lv, true);
        if !value.total.is_finite() {
            return Err(Error::numeric(format!("student loss is {} at step {}", value.total, self.step + 1)));
        }
        let g = tape.backward(lv.total)?;
        let mut grads = BTreeMap::new();
        for (name, v) in named {
            grads.insert(format!("{STUDENT_PREFIX}{name}"), g.get_or_zeros(v));
        }
        grads.insert(format!("{LOSS_PREFIX}tau"), g.get_or_zeros(tau));
        let params = self.student.params_mut().expect("student encoder is trainable");
        self.adam
            .step(&mut [(STUDENT_PREFIX, params), (LOSS_PREFIX, &mut self.loss)], &grads)?;
        clamp_loss_tau(&mut self.loss);
        self.step += 1;
        Ok(StepRow {
            epoch: self.epoch + 1,
            step: self.step,
            total: value.total,
            contrastive: value.contrastive,
            cos_t: value.cos_t,
            cos_i: value.cos_i,
            anchor: value.anchor,
            tau_loss: self.tau_loss() as f64,
            tau_agg: Some(self.teacher_tau as f64),
        })
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let stream = format!("student.shuffle.{}", self.epoch + 1);
        let (batches, state) = epoch_batches(self.train.samples.len(), self.cfg.batch_size, self.cfg.seed, &stream);
        for b in &batches {
            let row = self.train_step(b)?;
            self.log.push_step(row);
        }
        self.epoch += 1;
        self.rng = vec![state];
        let row = self.validate()?;
        self.log.push_epoch(row);
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        self.student.params().export_into(STUDENT_PREFIX, &mut tensors);
        self.loss.export_into(LOSS_PREFIX, &mut tensors);
        Checkpoint {
            meta: CheckpointMeta {
                kind: CheckpointKind::Student,
                variant: self.cfg.variant,
                epoch: self.epoch,
                step: self.step,
                config: self.cfg.clone(),
                rng: self.rng.clone(),
            },
            tensors,
        }
    }
}

pub struct StudentRun {
    /// The distilled image encoder, frozen.
    pub student: ImageEncoder,
    pub tau_loss: f32,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    /// Text encoder, base image encoder and teacher hashes before and after.
    pub frozen_before: [String; 3],
    pub frozen_after: [String; 3],
}

pub fn distill_student(dataset: &Dataset, teacher: &Checkpoint, cfg: &TrainConfig) -> Result<StudentRun> {
    distill_student_with(dataset, teacher, cfg, None)
}

/// Distills for `cfg.student_epochs`; with `save_to`, the checkpoint is
/// written atomically after every epoch.
pub fn distill_student_with(
    dataset: &Dataset,
    teacher: &Checkpoint,
    cfg: &TrainConfig,
    save_to: Option<&Path>,
) -> Result<StudentRun> {
    if teacher.meta.variant != cfg.variant {
        return Err(Error::Config(format!(
            "teacher checkpoint is variant {}, config is variant {}",
            teacher.meta.variant, cfg.variant
        )));
    }
    if dataset.train.is_empty() {
        return Err(Error::input("dataset has no training samples"));
    }
    let (fusion, _) = load_teacher(teacher)?;
    let frozen = Frozen::new(cfg.encoder_config())?;
    let hashes = |f: &Frozen| [f.text.param_hash(), f.image.param_hash(), fusion.hash()];
    let frozen_before = hashes(&frozen);
    let mut s = StudentTrainer::new(dataset, &fusion, cfg, &frozen)?;
    if let Some(p) = save_to {
        s.checkpoint().save(p)?;
    }
    for _ in 0..cfg.student_epochs {
        s.run_epoch()?;
        if let Some(p) = save_to {
            s.checkpoint().save(p)?;
        }
    }
    Ok(StudentRun {
        checkpoint: s.checkpoint(),
        tau_loss: s.tau_loss(),
        log: s.log.clone(),
        student: s.student.frozen_copy(),
        frozen_before,
        frozen_after: hashes(&frozen),
    })
}

/// The distilled image encoder from a student checkpoint, frozen.
pub fn load_student(ckpt: &Checkpoint) -> Result<ImageEncoder> {
    if ckpt.meta.kind != CheckpointKind::Student {
        return Err(Error::Config("checkpoint is not a student checkpoint".into()));
    }
    let mut enc = ImageEncoder::new(ckpt.meta.config.encoder_config())?.trainable_copy();
    enc.params_mut()
        .expect("trainable copy")
        .import_from(STUDENT_PREFIX, &ckpt.tensors)?;
    Ok(enc.frozen_copy())
}
