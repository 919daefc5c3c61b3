//! Retrieval against retention as the teacher trains longer.

use std::path::Path;

use serde::Serialize;

use super::config::TrainConfig;
use super::features::{stack, Frozen};
use super::student::{image_embeddings, mean_row_cosine, StudentTrainer};
use super::teacher::TeacherTrainer;
use crate::data::dataset::Dataset;
use crate::data::dataset::csv_err;
use crate::error::{Error, Result};
use crate::eval::t2i_r1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    /// Teacher epochs completed.
    pub epoch: usize,
    /// Heldout text-to-image R@1 of the student.
    pub t2i_r1: f64,
    /// Mean heldout cosine between student and base image embeddings.
    pub retention: f64,
    pub teacher_val_loss: f64,
    pub student_val_cos_i: Option<f64>,
}

/// One row per teacher epoch `0..max_epochs`. Row 0 is the untouched base
/// encoder. After each further teacher epoch the same student is distilled
/// for `cfg.student_epochs` more epochs against the updated teacher.
pub fn epoch_sweep(dataset: &Dataset, cfg: &TrainConfig, max_epochs: usize) -> Result<Vec<SweepRow>> {
    if max_epochs == 0 {
        return Err(Error::Config("max_epochs must be at least 1".into()));
    }
    let frozen = Frozen::new(cfg.encoder_config())?;
    let mut teacher = TeacherTrainer::new(dataset, cfg, &frozen)?;
    let (train, val) = dataset.split_validation();
    let (tf, vf) = teacher.features();
    let mut student = StudentTrainer::from_features(cfg, teacher.fusion(), &frozen, (train, tf.to_vec()), (val, vf.to_vec()))?;

    let heldout = &dataset.heldout;
    if heldout.len() < 2 {
        return Err(Error::input("sweep needs at least 2 heldout samples"));
    }
    let ids: Vec<String> = heldout.iter().map(|s| s.id.clone()).collect();
    let mut ts = frozen.text.session();
    let texts = stack(
        heldout
            .iter()
            .map(|s| Ok(ts.encode(&s.tokens)?.embedding.l2_normalize()?.into_data()))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let base = image_embeddings(&frozen.image, heldout)?;

    let mut rows = vec![SweepRow {
        epoch: 0,
        t2i_r1: t2i_r1(&texts, &base, &ids)?,
        retention: mean_row_cosine(&base, &base)?,
        teacher_val_loss: teacher.log().first_val().expect("initial validation").val_loss,
        student_val_cos_i: None,
    }];
    for epoch in 1..max_epochs {
        teacher.run_epoch()?;
        student.set_teacher(teacher.fusion())?;
        for _ in 0..cfg.student_epochs {
            student.run_epoch()?;
        }
        let emb = image_embeddings(student.student(), heldout)?;
        rows.push(SweepRow {
            epoch,
            t2i_r1: t2i_r1(&texts, &emb, &ids)?,
            retention: mean_row_cosine(&emb, &base)?,
            teacher_val_loss: teacher.log().last_val().expect("validation").val_loss,
            student_val_cos_i: student.log().last_val().and_then(|r| r.val_cos_i),
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let here = Path::new("<sweep>");
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(here, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::input(format!("sweep buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, sweep_csv(rows)?).map_err(|e| Error::io(path, e))
}
