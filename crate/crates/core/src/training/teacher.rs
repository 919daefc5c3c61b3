//! Fine-tuning the fusion layers against frozen encoders.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::adam::Adam;
use super::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, RngState};
use super::config::TrainConfig;
use super::features::{compute_features, stack, Frozen, SampleFeatures};
use super::log::{EpochRow, StepRow, TrainLog};
use crate::data::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{clamp_tau, teacher_image_on, FusionParams, TeacherSession, TeacherSettings, TAU_INIT};
use crate::losses::{info_nce, teacher_loss_on};
use crate::params::ParamSet;
use crate::region::ConfidenceAreaCosine;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Checkpoint tensor prefixes.
pub const FUSION_PREFIX: &str = "fusion.";
pub const LOSS_PREFIX: &str = "loss.";

/// The loss temperature as a one-parameter set named `tau`.
pub(crate) fn loss_tau_params(tau: f32) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("tau", Tensor::scalar(tau));
    p
}

pub(crate) fn tau_of(p: &ParamSet) -> f32 {
    p.get("tau").expect("tau").data()[0]
}

pub(crate) fn clamp_loss_tau(p: &mut ParamSet) {
    let t = p.get_mut("tau").expect("tau");
    t.data_mut()[0] = clamp_tau(t.data()[0]);
}

/// Indices `0..n` in a seeded order, split into batches; a final batch
/// smaller than 2 is dropped since the contrastive loss needs two pairs.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, seed: u64, stream: &str) -> (Vec<Vec<usize>>, RngState) {
    let mut r = rng::stream(seed, stream);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let batches = order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect();
    let state = RngState {
        name: stream.to_string(),
        seed,
        word_pos: r.get_word_pos().to_string(),
    };
    (batches, state)
}

pub(crate) fn check_sizes(train: usize, val: usize, cfg: &TrainConfig) -> Result<()> {
    if train == 0 {
        return Err(Error::input("dataset has no training samples"));
    }
    if train < cfg.batch_size {
        return Err(Error::input(format!(
            "{train} training pairs is fewer than batch_size {}",
            cfg.batch_size
        )));
    }
    if val < 2 {
        return Err(Error::input(format!("validation split has {val} samples, need at least 2")));
    }
    Ok(())
}

/// Teacher training state that can be advanced one epoch at a time.
pub struct TeacherTrainer {
    cfg: TrainConfig,
    train: Vec<SampleFeatures>,
    val: Vec<SampleFeatures>,
    fusion: FusionParams,
    loss: ParamSet,
    adam: Adam,
    epoch: usize,
    step: u64,
    rng: Vec<RngState>,
    log: TrainLog,
}

impl TeacherTrainer {
    pub fn new(dataset: &Dataset, cfg: &TrainConfig, frozen: &Frozen) -> Result<Self> {
        cfg.validate()?;
        let (train, val) = dataset.split_validation();
        check_sizes(train.len(), val.len(), cfg)?;
        let train = compute_features(train, dataset, frozen, &ConfidenceAreaCosine)?;
        let val = compute_features(val, dataset, frozen, &ConfidenceAreaCosine)?;
        let mut adam = Adam::new(cfg.teacher_lr);
        adam.clip_grad_norm = cfg.clip_grad_norm;
        let mut t = TeacherTrainer {
            cfg: cfg.clone(),
            train,
            val,
            fusion: FusionParams::new(cfg.embed_dim, cfg.num_heads, cfg.seed)?,
            loss: loss_tau_params(TAU_INIT),
            adam,
            epoch: 0,
            step: 0,
            rng: Vec::new(),
            log: TrainLog::default(),
        };
        let v = t.val_loss()?;
        t.log.push_epoch(EpochRow {
            epoch: 0,
            step: 0,
            val_loss: v,
            val_cos_i: None,
            val_t2i_r1: None,
        });
        Ok(t)
    }

    pub fn settings(&self) -> TeacherSettings {
        TeacherSettings {
            clusters: self.cfg.clusters,
            seed: self.cfg.seed,
        }
    }

    pub fn fusion(&self) -> &FusionParams {
        &self.fusion
    }

    pub fn tau_loss(&self) -> f32 {
        tau_of(&self.loss)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// Frozen-encoder features of the `(train, validation)` splits.
    pub fn features(&self) -> (&[SampleFeatures], &[SampleFeatures]) {
        (&self.train, &self.val)
    }

    /// Teacher InfoNCE over the whole validation split.
    pub fn val_loss(&self) -> Result<f64> {
        let zi = teacher_outputs(&self.fusion, self.settings(), &self.val)?;
        let zt = stack(self.val.iter().map(|f| f.text_unit.data()))?;
        info_nce(&zi, &zt, self.tau_loss() as f64)
    }

    fn train_step(&mut self, batch: &[usize]) -> Result<StepRow> {
        let heads = self.fusion.num_heads();
        let settings = self.settings();
        let mut tape = Tape::new();
        let (vars, named) = self.fusion.bind_named(&mut tape);
        let tau = tape.leaf_f32(self.loss.get("tau")?, true);
        let zs = batch
            .iter()
            .map(|&i| teacher_image_on(&mut tape, &vars, heads, &self.train[i].teacher, settings))
            .collect::<Result<Vec<_>>>()?;
        let zi = tape.concat_rows(&zs)?;
        let zt = tape.leaf_f32(&stack(batch.iter().map(|&i| self.train[i].text_unit.data()))?, false);
        let loss = teacher_loss_on(&mut tape, zi, zt, tau)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::numeric(format!("teacher loss is {value} at step {}", self.step + 1)));
        }
        let g = tape.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, v) in named {
            grads.insert(format!("{FUSION_PREFIX}{name}"), g.get_or_zeros(v));
        }
        grads.insert(format!("{LOSS_PREFIX}tau"), g.get_or_zeros(tau));
        self.adam.step(
            &mut [(FUSION_PREFIX, self.fusion.params_mut()), (LOSS_PREFIX, &mut self.loss)],
            &grads,
        )?;
        let t = self.fusion.tau();
        self.fusion.set_tau(t);
        clamp_loss_tau(&mut self.loss);
        self.step += 1;
        Ok(StepRow {
            epoch: self.epoch + 1,
            step: self.step,
            total: value,
            contrastive: value,
            cos_t: None,
            cos_i: None,
            anchor: None,
            tau_loss: self.tau_loss() as f64,
            tau_agg: Some(self.fusion.tau() as f64),
        })
    }

    /// One pass over the shuffled training split, then a validation pass.
    pub fn run_epoch(&mut self) -> Result<()> {
        let stream = format!("teacher.shuffle.{}", self.epoch + 1);
        let (batches, state) = epoch_batches(self.train.len(), self.cfg.batch_size, self.cfg.seed, &stream);
        for b in &batches {
            let row = self.train_step(b)?;
            self.log.push_step(row);
        }
        self.epoch += 1;
        self.rng = vec![state];
        let v = self.val_loss()?;
        self.log.push_epoch(EpochRow {
            epoch: self.epoch,
            step: self.step,
            val_loss: v,
            val_cos_i: None,
            val_t2i_r1: None,
        });
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        self.fusion.params().export_into(FUSION_PREFIX, &mut tensors);
        self.loss.export_into(LOSS_PREFIX, &mut tensors);
        Checkpoint {
            meta: CheckpointMeta {
                kind: CheckpointKind::Teacher,
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

/// Normalized teacher image outputs, one row per sample, in order.
pub fn teacher_outputs(fusion: &FusionParams, settings: TeacherSettings, feats: &[SampleFeatures]) -> Result<Tensor<f32>> {
    let rows: Vec<Vec<f32>> = feats
        .par_iter()
        .map_init(
            || TeacherSession::new(fusion, settings),
            |s, f| Ok(s.forward(&f.teacher)?.z_i.into_data()),
        )
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

pub struct TeacherRun {
    pub fusion: FusionParams,
    pub tau_loss: f32,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    /// `(text, image)` encoder hashes before and after training.
    pub frozen_before: (String, String),
    pub frozen_after: (String, String),
}

pub fn train_teacher(dataset: &Dataset, cfg: &TrainConfig) -> Result<TeacherRun> {
    train_teacher_with(dataset, cfg, None)
}

/// Trains for `cfg.teacher_epochs`; with `save_to`, the checkpoint is written
/// atomically after every epoch, so a failure leaves the last one intact.
pub fn train_teacher_with(dataset: &Dataset, cfg: &TrainConfig, save_to: Option<&Path>) -> Result<TeacherRun> {
    if dataset.train.is_empty() {
        return Err(Error::input("dataset has no training samples"));
    }
    let frozen = Frozen::new(cfg.encoder_config())?;
    let frozen_before = frozen.hashes();
    let mut t = TeacherTrainer::new(dataset, cfg, &frozen)?;
    if let Some(p) = save_to {
        t.checkpoint().save(p)?;
    }
    for _ in 0..cfg.teacher_epochs {
        t.run_epoch()?;
        if let Some(p) = save_to {
            t.checkpoint().save(p)?;
        }
    }
    Ok(TeacherRun {
        checkpoint: t.checkpoint(),
        tau_loss: t.tau_loss(),
        log: t.log.clone(),
        fusion: t.fusion,
        frozen_before,
        frozen_after: frozen.hashes(),
    })
}

/// Fusion parameters and loss temperature from a teacher checkpoint.
pub fn load_teacher(ckpt: &Checkpoint) -> Result<(FusionParams, f32)> {
    if ckpt.meta.kind != CheckpointKind::Teacher {
        return Err(Error::Config("checkpoint is not a teacher checkpoint".into()));
    }
    let c = &ckpt.meta.config;
    let mut fusion = FusionParams::new(c.embed_dim, c.num_heads, c.seed)?;
    fusion.params_mut().import_from(FUSION_PREFIX, &ckpt.tensors)?;
    let mut loss = loss_tau_params(TAU_INIT);
    loss.import_from(LOSS_PREFIX, &ckpt.tensors)?;
    Ok((fusion, tau_of(&loss)))
}
