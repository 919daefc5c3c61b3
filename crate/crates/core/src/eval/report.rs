use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{self, SimilarityMatrix};
use crate::data::cache::EmbeddingCache;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Directions {
    pub t2i: DirectionMetrics,
    pub i2t: DirectionMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShot {
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Directions,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub zero_shot: Option<ZeroShot>,
    pub n_queries: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<serde_json::Value>,
}

impl RetrievalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report json") + "\n"
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Single-ground-truth metrics for one direction: query `i` matches candidate `i`.
pub fn direction_metrics(sim: &SimilarityMatrix) -> Result<DirectionMetrics> {
    if sim.candidate_ids.len() < sim.num_queries() {
        return Err(Error::shape("fewer candidates than queries"));
    }
    let gt: Vec<String> = sim.candidate_ids[..sim.num_queries()].to_vec();
    let rel: Vec<BTreeSet<String>> = gt.iter().map(|g| BTreeSet::from([g.clone()])).collect();
    Ok(DirectionMetrics {
        r1: metrics::recall_at_k(sim, 1, &gt)?,
        r5: metrics::recall_at_k(sim, 5, &gt)?,
        r10: metrics::recall_at_k(sim, 10, &gt)?,
        map: metrics::mean_average_precision(sim, &rel)?,
    })
}

/// Text-to-image R@1 for aligned rows: query `i` should retrieve image `i`.
pub fn t2i_r1<T: Scalar>(texts: &Tensor<T>, images: &Tensor<T>, ids: &[String]) -> Result<f64> {
    let sim = SimilarityMatrix::cosine(texts, images, ids.to_vec(), ids.to_vec())?;
    metrics::recall_at_k(&sim, 1, ids)
}

/// Labels and class prompt embeddings for the zero-shot metrics.
pub struct ZeroShotInputs<'a> {
    pub labels: &'a [usize],
    pub prompts: &'a Tensor<f32>,
}

/// Both retrieval directions from one image/text similarity matrix, plus
/// zero-shot accuracy on the images when labels are given.
pub fn build_report(images: &EmbeddingCache, texts: &EmbeddingCache, zero_shot: Option<ZeroShotInputs<'_>>) -> Result<RetrievalReport> {
    if images.ids() != texts.ids() {
        return Err(Error::Validation {
            id: first_mismatch(images.ids(), texts.ids()),
            field: "id".into(),
            message: "image and text caches are not id-aligned".into(),
        });
    }
    if images.dim() != texts.dim() {
        return Err(Error::shape(format!("image dim {} vs text dim {}", images.dim(), texts.dim())));
    }
    let ids = images.ids().to_vec();
    let t2i = SimilarityMatrix::cosine(&texts.matrix()?, &images.matrix()?, ids.clone(), ids)?;
    let i2t = t2i.transpose()?;
    let zero_shot = match zero_shot {
        None => None,
        Some(z) => {
            let m = images.matrix()?;
            Some(ZeroShot {
                top1: metrics::zero_shot_topk(&m, z.prompts, z.labels, 1)?,
                top5: metrics::zero_shot_topk(&m, z.prompts, z.labels, 5)?,
            })
        }
    };
    Ok(RetrievalReport {
        direction: Directions {
            t2i: direction_metrics(&t2i)?,
            i2t: direction_metrics(&i2t)?,
        },
        zero_shot,
        n_queries: images.len(),
        config: None,
    })
}

fn first_mismatch(a: &[String], b: &[String]) -> String {
    a.iter()
        .zip(b)
        .find(|(x, y)| x != y)
        .map(|(x, _)| x.clone())
        .unwrap_or_else(|| format!("<count {} vs {}>", a.len(), b.len()))
}
