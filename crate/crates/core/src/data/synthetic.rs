//! Seeded synthetic image/caption pairs built from shared concepts.
//!
//! An image mixes one to three concepts, the first of which is its class.
//! Each part is a noisy copy of its concept's signature laid out on a grid,
//! and each part becomes one detector region whose confidence is the part's
//! salience. The caption names every concept of the image, padded with
//! filler words and shuffled.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::dataset::{Dataset, Sample};
use crate::data::vocab::{self, MAX_CONCEPTS, RAW_PATCH_DIM};
use crate::encoders::TOKEN_CAP;
use crate::error::{Error, Result};
use crate::region::{PartGrid, Region, RegionSet};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_concepts: usize,
    pub parts_per_image: usize,
    pub caption_len_min: usize,
    pub caption_len_max: usize,
    pub noise_sigma: f64,
    pub train_size: usize,
    pub heldout_size: usize,
    pub num_classes: usize,
    /// Most concepts mixed into one image.
    pub max_concepts_per_image: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_concepts: 16,
            parts_per_image: 6,
            caption_len_min: 3,
            caption_len_max: 8,
            noise_sigma: 0.1,
            train_size: 512,
            heldout_size: 128,
            num_classes: 10,
            max_concepts_per_image: 3,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn with_seed(seed: u64) -> Self {
        SyntheticSpec {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_concepts == 0 || self.num_concepts > MAX_CONCEPTS {
            return fail(format!("num_concepts must be in 1..={MAX_CONCEPTS}"));
        }
        if self.num_classes == 0 || self.num_classes > self.num_concepts {
            return fail("num_classes must be in 1..=num_concepts".into());
        }
        if self.parts_per_image == 0 {
            return fail("parts_per_image must be positive".into());
        }
        if self.caption_len_min == 0 || self.caption_len_min > self.caption_len_max || self.caption_len_max > TOKEN_CAP {
            return fail(format!("caption length range must satisfy 1 ≤ min ≤ max ≤ {TOKEN_CAP}"));
        }
        if self.max_concepts_per_image == 0 {
            return fail("max_concepts_per_image must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and non-negative".into());
        }
        if self.train_size == 0 {
            return fail("train_size must be positive".into());
        }
        Ok(())
    }

    fn concepts_per_image(&self) -> usize {
        self.max_concepts_per_image
            .min(self.parts_per_image)
            .min(self.caption_len_min)
            .min(self.num_concepts)
    }
}

struct Generated {
    sample: Sample,
    regions: RegionSet,
}

fn generate_one(spec: &SyntheticSpec, split: &str, index: usize) -> Generated {
    let id = format!("{split}-{index:05}");
    let mut r = rng::stream(spec.seed, &format!("data.{id}"));

    let primary = r.random_range(0..spec.num_classes);
    let n_concepts = r.random_range(1..=spec.concepts_per_image());
    let mut concepts = vec![primary];
    while concepts.len() < n_concepts {
        let c = r.random_range(0..spec.num_concepts);
        if !concepts.contains(&c) {
            concepts.push(c);
        }
    }

    // every concept gets a part; the rest lean towards the primary concept
    let mut part_concepts = concepts.clone();
    while part_concepts.len() < spec.parts_per_image {
        let c = if r.random_bool(0.5) {
            primary
        } else {
            concepts[r.random_range(0..concepts.len())]
        };
        part_concepts.push(c);
    }
    part_concepts.shuffle(&mut r);

    let mut parts = Vec::with_capacity(spec.parts_per_image * RAW_PATCH_DIM);
    let mut salience = Vec::with_capacity(spec.parts_per_image);
    for &c in &part_concepts {
        for v in vocab::concept_prototype(c) {
            let z: f64 = StandardNormal.sample(&mut r);
            parts.push(v + (spec.noise_sigma * z) as f32);
        }
        salience.push((r.random_range(0.25..1.0f64) * 1e4).round() / 1e4);
    }

    let len = r.random_range(spec.caption_len_min..=spec.caption_len_max);
    let mut tokens: Vec<u32> = concepts.iter().map(|&c| vocab::concept_token(c)).collect();
    while tokens.len() < len {
        tokens.push(r.random_range(vocab::FILLERS));
    }
    tokens.shuffle(&mut r);

    let grid = PartGrid::new(spec.parts_per_image);
    let regions = part_concepts
        .iter()
        .enumerate()
        .map(|(p, &c)| Region {
            bbox: grid.cell_bbox(p),
            confidence: salience[p],
            class_id: c as u32,
        })
        .collect();

    Generated {
        sample: Sample {
            id: id.clone(),
            parts: Tensor::new(vec![spec.parts_per_image, RAW_PATCH_DIM], parts).expect("parts shape"),
            tokens,
            class: primary,
        },
        regions: RegionSet {
            image_id: id,
            regions,
            weights: None,
        },
    }
}

/// Builds the dataset in memory. Identical specs give identical datasets.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut regions = BTreeMap::new();
    let mut split = |name: &str, n: usize| -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let g = generate_one(spec, name, i);
                regions.insert(g.sample.id.clone(), g.regions);
                g.sample
            })
            .collect()
    };
    let train = split("train", spec.train_size);
    let heldout = split("heldout", spec.heldout_size);
    Ok(Dataset {
        train,
        heldout,
        regions,
    })
}

pub fn gen_synthetic(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<Dataset> {
    let ds = generate(spec)?;
    ds.save(dir)?;
    Ok(ds)
}
