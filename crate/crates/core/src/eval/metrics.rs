//! Rank-based retrieval and zero-shot metrics.
//!
//! Every ranking sorts by descending similarity and breaks ties by ascending
//! candidate id, so results never depend on sort stability.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor<f64>,
    pub query_ids: Vec<String>,
    pub candidate_ids: Vec<String>,
}

impl SimilarityMatrix {
    pub fn new(values: Tensor<f64>, query_ids: Vec<String>, candidate_ids: Vec<String>) -> Result<Self> {
        let (q, c) = values.dims2()?;
        if q != query_ids.len() || c != candidate_ids.len() {
            return Err(Error::shape(format!(
                "{q}×{c} similarities for {} queries and {} candidates",
                query_ids.len(),
                candidate_ids.len()
            )));
        }
        values.check_finite("similarity matrix")?;
        Ok(SimilarityMatrix {
            values,
            query_ids,
            candidate_ids,
        })
    }

    /// Cosine similarities between the rows of `queries` and `candidates`.
    pub fn cosine<T: Scalar>(
        queries: &Tensor<T>,
        candidates: &Tensor<T>,
        query_ids: Vec<String>,
        candidate_ids: Vec<String>,
    ) -> Result<Self> {
        let q = queries.cast::<f64>().l2_normalize()?;
        let c = candidates.cast::<f64>().l2_normalize()?;
        Self::new(q.matmul(&c.transpose()?)?, query_ids, candidate_ids)
    }

    pub fn transpose(&self) -> Result<Self> {
        Ok(SimilarityMatrix {
            values: self.values.transpose()?,
            query_ids: self.candidate_ids.clone(),
            candidate_ids: self.query_ids.clone(),
        })
    }

    pub fn num_queries(&self) -> usize {
        self.query_ids.len()
    }

    /// Candidate indices for query `q`, best first.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        rank_row(self.values.row(q), &self.candidate_ids)
    }
}

fn rank_row<K: Ord>(scores: &[f64], keys: &[K]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| keys[a].cmp(&keys[b])));
    idx
}

fn gt_index(sim: &SimilarityMatrix, q: usize, id: &str) -> Result<usize> {
    sim.candidate_ids
        .iter()
        .position(|c| c == id)
        .ok_or_else(|| Error::input(format!("ground truth `{id}` of query `{}` is not a candidate", sim.query_ids[q])))
}

/// 1-based rank of each query's ground-truth candidate.
pub fn ground_truth_ranks(sim: &SimilarityMatrix, ground_truth: &[String]) -> Result<Vec<usize>> {
    if ground_truth.len() != sim.num_queries() {
        return Err(Error::shape(format!(
            "{} ground-truth ids for {} queries",
            ground_truth.len(),
            sim.num_queries()
        )));
    }
    (0..sim.num_queries())
        .map(|q| {
            let g = gt_index(sim, q, &ground_truth[q])?;
            Ok(sim.ranking(q).iter().position(|&c| c == g).expect("ranked") + 1)
        })
        .collect()
}

pub fn recall_at_k(sim: &SimilarityMatrix, k: usize, ground_truth: &[String]) -> Result<f64> {
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    let ranks = ground_truth_ranks(sim, ground_truth)?;
    if ranks.is_empty() {
        return Err(Error::input("no queries"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean over queries of average precision over the full ranking.
pub fn mean_average_precision(sim: &SimilarityMatrix, relevance: &[BTreeSet<String>]) -> Result<f64> {
    if relevance.len() != sim.num_queries() {
        return Err(Error::shape(format!(
            "{} relevance sets for {} queries",
            relevance.len(),
            sim.num_queries()
        )));
    }
    if relevance.is_empty() {
        return Err(Error::input("no queries"));
    }
    let mut total = 0.0;
    for (q, rel) in relevance.iter().enumerate() {
        if rel.is_empty() {
            return Err(Error::input(format!("query `{}` has no relevant candidates", sim.query_ids[q])));
        }
        let rel_idx: BTreeSet<usize> = rel.iter().map(|id| gt_index(sim, q, id)).collect::<Result<_>>()?;
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (pos, c) in sim.ranking(q).into_iter().enumerate() {
            if rel_idx.contains(&c) {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        total += ap / rel_idx.len() as f64;
    }
    Ok(total / relevance.len() as f64)
}

fn class_scores<T: Scalar>(images: &Tensor<T>, prompts: &Tensor<T>, labels: &[usize]) -> Result<Tensor<f64>> {
    let (n, _) = images.dims2()?;
    let (c, _) = prompts.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} images", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::input(format!("label {l} is not one of {c} classes")));
    }
    let i = images.cast::<f64>().l2_normalize()?;
    let p = prompts.cast::<f64>().l2_normalize()?;
    i.matmul(&p.transpose()?)
}

fn class_ranking(scores: &[f64]) -> Vec<usize> {
    let keys: Vec<usize> = (0..scores.len()).collect();
    rank_row(scores, &keys)
}

/// Fraction of images whose label is among the `k` most similar class prompts.
/// Equal scores rank the lower class id first.
pub fn zero_shot_topk<T: Scalar>(images: &Tensor<T>, prompts: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    let s = class_scores(images, prompts, labels)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| class_ranking(s.row(i)).iter().take(k).any(|&c| c == l))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `counts[true][predicted]` with the top-1 prediction per image.
pub fn confusion_matrix<T: Scalar>(images: &Tensor<T>, prompts: &Tensor<T>, labels: &[usize]) -> Result<Vec<Vec<u64>>> {
    let s = class_scores(images, prompts, labels)?;
    let c = prompts.rows();
    let mut m = vec![vec![0u64; c]; c];
    for (i, &l) in labels.iter().enumerate() {
        m[l][class_ranking(s.row(i))[0]] += 1;
    }
    Ok(m)
}

/// CSV with a `true\pred` corner cell, class ids as header row and first column.
pub fn write_confusion_csv(path: impl AsRef<Path>, m: &[Vec<u64>]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    let mut header = vec!["true\\pred".to_string()];
    header.extend((0..m.len()).map(|c| c.to_string()));
    let wr = |e: csv::Error| Error::input(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(wr)?;
    for (t, row) in m.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(wr)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
