//! Frozen-encoder features, computed once per run.

use rayon::prelude::*;

use crate::data::dataset::{Dataset, Sample};
use crate::encoders::{EncoderConfig, ImageEncoder, ImageSession, TextEncoder};
use crate::error::Result;
use crate::fusion::TeacherInput;
use crate::region::{apply_region_weights, PartGrid, RegionSet, WeightStrategy};
use crate::tensor::Tensor;

/// The frozen base encoders of a run.
#[derive(Clone, Debug)]
pub struct Frozen {
    pub text: TextEncoder,
    pub image: ImageEncoder,
}

impl Frozen {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        Ok(Frozen {
            text: TextEncoder::new(config.clone())?,
            image: ImageEncoder::new(config)?,
        })
    }

    /// `(text, image)` parameter hashes.
    pub fn hashes(&self) -> (String, String) {
        (self.text.param_hash(), self.image.param_hash())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleFeatures {
    pub teacher: TeacherInput,
    /// Normalized caption embedding, `[d]`.
    pub text_unit: Tensor<f32>,
    /// Normalized frozen image embedding, `[d]`.
    pub base_image: Tensor<f32>,
}

/// Region embeddings for one image: pooled patch embeddings of the parts
/// each region covers, scaled by the strategy's weights. Falls back to the
/// per-part grid when no region covers a part or every weight is zero.
pub fn region_features(
    session: &mut ImageSession<'_>,
    patches: &Tensor<f32>,
    regions: Option<&RegionSet>,
    text_embedding: &Tensor<f32>,
    strategy: &dyn WeightStrategy,
) -> Result<(Tensor<f32>, bool)> {
    let parts = patches.rows();
    let grid = PartGrid::new(parts);
    let mut embs = Vec::new();
    let mut weights = Vec::new();
    for r in regions.map(|s| s.regions.as_slice()).unwrap_or_default() {
        let covered = grid.covered(r);
        if covered.is_empty() {
            continue;
        }
        let e = session.pool(&patches.select_rows(&covered)?)?;
        let cos = (e.cosine_sim(text_embedding)? as f64).clamp(-1.0, 1.0);
        weights.push(strategy.weight(r.confidence, r.area(), cos)?);
        embs.push(e.into_data());
    }
    if !embs.is_empty() {
        let weighted = apply_region_weights(&Tensor::from_rows(&embs)?, &weights)?;
        if !weighted.uniform_fallback {
            return Ok((weighted.embeddings, false));
        }
    }
    let grid_rows = (0..parts)
        .map(|p| Ok(session.pool(&patches.select_rows(&[p])?)?.into_data()))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::from_rows(&grid_rows)?, true))
}

/// Features for `samples`, in order. Runs in parallel over samples.
pub fn compute_features(
    samples: &[Sample],
    dataset: &Dataset,
    frozen: &Frozen,
    strategy: &dyn WeightStrategy,
) -> Result<Vec<SampleFeatures>> {
    samples
        .par_iter()
        .map_init(
            || (frozen.text.session(), frozen.image.session()),
            |(ts, is), s| {
                let text = ts.encode(&s.tokens)?;
                let patches = is.patches(&s.parts)?;
                // Same path as the student's own embedding, so an untrained
                // student matches its base rows bit for bit.
                let base = is.embed(&s.parts)?;
                let (regions, fallback) =
                    region_features(is, &patches, dataset.regions_for(&s.id), &text.embedding, strategy)?;
                Ok(SampleFeatures {
                    text_unit: text.embedding.l2_normalize()?,
                    base_image: base.l2_normalize()?,
                    teacher: TeacherInput {
                        id: s.id.clone(),
                        text_states: text.states,
                        text_embedding: text.embedding,
                        regions,
                        fallback,
                    },
                })
            },
        )
        .collect()
}

/// Stacks `[d]` rows into an `N×d` matrix.
pub fn stack(rows: impl IntoIterator<Item = impl AsRef<[f32]>>) -> Result<Tensor<f32>> {
    let rows: Vec<Vec<f32>> = rows.into_iter().map(|r| r.as_ref().to_vec()).collect();
    Tensor::from_rows(&rows)
}
