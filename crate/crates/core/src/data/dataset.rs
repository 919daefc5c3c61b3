//! Dataset directories: `train.jsonl`, `heldout.jsonl`, `regions.jsonl`, `labels.csv`.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{RAW_PATCH_DIM, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::region::{self, RegionSet};
use crate::tensor::Tensor;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const REGIONS_FILE: &str = "regions.jsonl";
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `P×32` raw parts.
    pub parts: Tensor<f32>,
    pub tokens: Vec<u32>,
    pub class: usize,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    parts: Vec<Vec<f32>>,
    tokens: Vec<u32>,
    class: usize,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Validation {
            id: self.id.clone(),
            field: field.into(),
            message,
        };
        if self.id.is_empty() {
            return Err(bad("id", "is empty".into()));
        }
        if self.parts.cols() != RAW_PATCH_DIM || self.parts.rank() != 2 {
            return Err(bad("parts", format!("rows must have {RAW_PATCH_DIM} values")));
        }
        if !self.parts.is_finite() {
            return Err(bad("parts", "contains a non-finite value".into()));
        }
        if self.tokens.is_empty() {
            return Err(bad("tokens", "is empty".into()));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(bad("tokens", format!("id {t} is outside the vocabulary")));
        }
        Ok(())
    }

    fn to_record(&self) -> SampleRecord {
        SampleRecord {
            id: self.id.clone(),
            parts: (0..self.parts.rows()).map(|i| self.parts.row(i).to_vec()).collect(),
            tokens: self.tokens.clone(),
            class: self.class,
        }
    }

    fn from_record(r: SampleRecord) -> Result<Self> {
        if r.parts.is_empty() {
            return Err(Error::Validation {
                id: r.id,
                field: "parts".into(),
                message: "is empty".into(),
            });
        }
        let parts = Tensor::from_rows(&r.parts).map_err(|e| Error::Validation {
            id: r.id.clone(),
            field: "parts".into(),
            message: e.to_string(),
        })?;
        let s = Sample {
            id: r.id,
            parts,
            tokens: r.tokens,
            class: r.class,
        };
        s.validate()?;
        Ok(s)
    }
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::ParseLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(Sample::from_record(rec)?);
    }
    Ok(out)
}

pub fn write_samples(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        let line = serde_json::to_string(&s.to_record()).expect("sample json");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    id: String,
    class: usize,
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<(String, usize)>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: LabelRow = row.map_err(|e| csv_err(path, e))?;
        out.push((row.id, row.class));
    }
    Ok(out)
}

pub fn write_labels<'a>(path: impl AsRef<Path>, rows: impl IntoIterator<Item = (&'a str, usize)>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for (id, class) in rows {
        w.serialize(LabelRow {
            id: id.to_string(),
            class,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::ParseLine {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
    /// Region sets by image id. Samples without an entry have no regions.
    pub regions: BTreeMap<String, RegionSet>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in self.train.iter().chain(&self.heldout) {
            s.validate()?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation {
                    id: s.id.clone(),
                    field: "id".into(),
                    message: "appears more than once across train and heldout".into(),
                });
            }
        }
        for (id, set) in &self.regions {
            if !seen.contains(id.as_str()) || *id != set.image_id {
                return Err(Error::Validation {
                    id: id.clone(),
                    field: "image_id".into(),
                    message: "region entry does not match any sample".into(),
                });
            }
            set.validate()?;
        }
        Ok(())
    }

    /// Number of classes, one more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.train
            .iter()
            .chain(&self.heldout)
            .map(|s| s.class + 1)
            .max()
            .unwrap_or(0)
    }

    /// `(train, validation)`: the validation split is the last tenth
    /// (rounded down) of the training file.
    pub fn split_validation(&self) -> (&[Sample], &[Sample]) {
        let n_val = self.train.len() / 10;
        self.train.split_at(self.train.len() - n_val)
    }

    pub fn regions_for(&self, id: &str) -> Option<&RegionSet> {
        self.regions.get(id)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_samples(dir.join(TRAIN_FILE), &self.train)?;
        write_samples(dir.join(HELDOUT_FILE), &self.heldout)?;
        let sets: Vec<RegionSet> = self
            .train
            .iter()
            .chain(&self.heldout)
            .filter_map(|s| self.regions.get(&s.id).cloned())
            .collect();
        region::write_regions(dir.join(REGIONS_FILE), &sets)?;
        write_labels(
            dir.join(LABELS_FILE),
            self.train.iter().chain(&self.heldout).map(|s| (s.id.as_str(), s.class)),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let train = read_samples(dir.join(TRAIN_FILE))?;
        let heldout = read_samples(dir.join(HELDOUT_FILE))?;
        let regions_path = dir.join(REGIONS_FILE);
        let mut regions = BTreeMap::new();
        if regions_path.exists() {
            for mut set in region::load_regions(&regions_path)? {
                set.cap(region::MAX_REGIONS);
                let id = set.image_id.clone();
                if regions.insert(id.clone(), set).is_some() {
                    return Err(Error::Validation {
                        id,
                        field: "image_id".into(),
                        message: "appears more than once in the regions file".into(),
                    });
                }
            }
        }
        let ds = Dataset {
            train,
            heldout,
            regions,
        };
        ds.validate()?;
        let labels_path = dir.join(LABELS_FILE);
        if labels_path.exists() {
            let by_id: BTreeMap<&str, usize> = ds
                .train
                .iter()
                .chain(&ds.heldout)
                .map(|s| (s.id.as_str(), s.class))
                .collect();
            for (id, class) in read_labels(&labels_path)? {
                match by_id.get(id.as_str()) {
                    Some(&c) if c == class => {}
                    Some(&c) => {
                        return Err(Error::Validation {
                            id,
                            field: "class".into(),
                            message: format!("labels file says {class}, sample says {c}"),
                        })
                    }
                    None => {
                        return Err(Error::Validation {
                            id,
                            field: "id".into(),
                            message: "label for an unknown sample".into(),
                        })
                    }
                }
            }
        }
        Ok(ds)
    }
}
