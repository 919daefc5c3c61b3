//! Detector regions, their penalty weights, and the region file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Regions kept per image, highest confidence first.
pub const MAX_REGIONS: usize = 10;

/// Slack allowed on `x + w ≤ 1` and `y + h ≤ 1` for rounding in written files.
pub const BBOX_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// `[x, y, w, h]` in normalized image coordinates.
    pub bbox: [f64; 4],
    pub confidence: f64,
    pub class_id: u32,
}

impl Region {
    pub fn validate(&self, image_id: &str) -> Result<()> {
        let [x, y, w, h] = self.bbox;
        let bad = |msg: String| Error::Validation {
            id: image_id.to_string(),
            field: "bbox".into(),
            message: msg,
        };
        if !self.bbox.iter().all(|v| v.is_finite()) {
            return Err(bad("has a non-finite coordinate".into()));
        }
        if x < 0.0 || y < 0.0 {
            return Err(bad(format!("origin ({x}, {y}) is negative")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(bad(format!("size ({w}, {h}) must be positive")));
        }
        if x + w > 1.0 + BBOX_TOLERANCE {
            return Err(bad(format!("x + w = {} exceeds 1", x + w)));
        }
        if y + h > 1.0 + BBOX_TOLERANCE {
            return Err(bad(format!("y + h = {} exceeds 1", y + h)));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Validation {
                id: image_id.to_string(),
                field: "confidence".into(),
                message: format!("{} is outside [0, 1]", self.confidence),
            });
        }
        Ok(())
    }

    /// Fraction of the image covered, clamped to `(0, 1]`.
    pub fn area(&self) -> f64 {
        (self.bbox[2] * self.bbox[3]).min(1.0)
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        let [x, y, w, h] = self.bbox;
        px >= x && px <= x + w && py >= y && py <= y + h
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub image_id: String,
    pub regions: Vec<Region>,
    #[serde(skip)]
    pub weights: Option<Vec<f64>>,
}

impl RegionSet {
    pub fn validate(&self) -> Result<()> {
        self.regions.iter().try_for_each(|r| r.validate(&self.image_id))?;
        if let Some(w) = &self.weights {
            if w.len() != self.regions.len() || w.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::Validation {
                    id: self.image_id.clone(),
                    field: "weights".into(),
                    message: "must be one non-negative value per region".into(),
                });
            }
        }
        Ok(())
    }

    /// Keeps the `max` most confident regions. Equal confidences keep file order.
    pub fn cap(&mut self, max: usize) {
        if self.regions.len() <= max {
            return;
        }
        let mut idx: Vec<usize> = (0..self.regions.len()).collect();
        idx.sort_by(|&a, &b| {
            self.regions[b]
                .confidence
                .total_cmp(&self.regions[a].confidence)
                .then(a.cmp(&b))
        });
        idx.truncate(max);
        self.regions = idx.iter().map(|&i| self.regions[i].clone()).collect();
        if let Some(w) = &self.weights {
            self.weights = Some(idx.iter().map(|&i| w[i]).collect());
        }
    }
}

/// How confidence, box area and region-caption agreement combine into a weight.
pub trait WeightStrategy: Send + Sync {
    fn weight(&self, confidence: f64, area_frac: f64, cos_to_text: f64) -> Result<f64>;
}

/// `confidence · √area · max(cos, 0)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConfidenceAreaCosine;

impl WeightStrategy for ConfidenceAreaCosine {
    fn weight(&self, confidence: f64, area_frac: f64, cos_to_text: f64) -> Result<f64> {
        region_weight(confidence, area_frac, cos_to_text)
    }
}

pub fn region_weight(confidence: f64, area_frac: f64, cos_to_text: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::param(format!("confidence {confidence} outside [0, 1]")));
    }
    if !(area_frac > 0.0 && area_frac <= 1.0) {
        return Err(Error::param(format!("area fraction {area_frac} outside (0, 1]")));
    }
    if !(-1.0..=1.0).contains(&cos_to_text) {
        return Err(Error::param(format!("cosine {cos_to_text} outside [-1, 1]")));
    }
    Ok(confidence * area_frac.sqrt() * cos_to_text.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedRegions<T: Scalar = f32> {
    pub embeddings: Tensor<T>,
    /// Set when every weight was zero and uniform weights were used instead.
    pub uniform_fallback: bool,
}

/// Scales row `i` by `weights[i] / max(weights)`.
pub fn apply_region_weights<T: Scalar>(embs: &Tensor<T>, weights: &[f64]) -> Result<WeightedRegions<T>> {
    let (r, d) = embs.dims2()?;
    if weights.len() != r {
        return Err(Error::shape(format!("{r} regions but {} weights", weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::param(format!("region weight {w} is not a finite non-negative value")));
    }
    let max = weights.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(WeightedRegions {
            embeddings: embs.clone(),
            uniform_fallback: true,
        });
    }
    let mut out = embs.clone();
    for (row, &w) in out.data_mut().chunks_mut(d).zip(weights) {
        let f = w / max;
        if f != 1.0 {
            let f = T::from(f).expect("weight factor");
            row.iter_mut().for_each(|x| *x = *x * f);
        }
    }
    Ok(WeightedRegions {
        embeddings: out,
        uniform_fallback: false,
    })
}

/// Row-major grid on which an image's parts are laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartGrid {
    pub rows: usize,
    pub cols: usize,
    pub parts: usize,
}

impl PartGrid {
    pub fn new(parts: usize) -> Self {
        let cols = ((parts as f64).sqrt().ceil() as usize).max(1);
        let rows = parts.div_ceil(cols).max(1);
        PartGrid { rows, cols, parts }
    }

    pub fn cell_bbox(&self, part: usize) -> [f64; 4] {
        let (r, c) = (part / self.cols, part % self.cols);
        let (w, h) = (1.0 / self.cols as f64, 1.0 / self.rows as f64);
        [c as f64 * w, r as f64 * h, w, h]
    }

    pub fn center(&self, part: usize) -> (f64, f64) {
        let [x, y, w, h] = self.cell_bbox(part);
        (x + w / 2.0, y + h / 2.0)
    }

    /// Parts whose cell centers lie inside `region`.
    pub fn covered(&self, region: &Region) -> Vec<usize> {
        (0..self.parts)
            .filter(|&p| {
                let (x, y) = self.center(p);
                region.contains(x, y)
            })
            .collect()
    }
}

pub fn parse_regions<R: BufRead>(reader: R, path: &Path) -> Result<Vec<RegionSet>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let set: RegionSet = serde_json::from_str(&line).map_err(|e| Error::ParseLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        set.validate()?;
        out.push(set);
    }
    Ok(out)
}

pub fn load_regions(path: impl AsRef<Path>) -> Result<Vec<RegionSet>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_regions(BufReader::new(f), path)
}

pub fn write_regions(path: impl AsRef<Path>, sets: &[RegionSet]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in sets {
        let line = serde_json::to_string(s).expect("region json");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
