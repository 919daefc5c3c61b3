//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeSet;

use dclip::data::{Dataset, SyntheticSpec};
use dclip::eval::metrics::{mean_average_precision, recall_at_k, zero_shot_topk, SimilarityMatrix};
use dclip::fusion::{aggregate_global, aggregate_multicluster};
use dclip::rng;
use dclip::tensor::Tensor;
use dclip::training::{TrainConfig, Variant};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

pub const METRIC_FIXTURES: u64 = 100;
pub const AGGREGATION_INPUTS: u64 = 1000;

/// A tiny dataset and a matching small configuration, for tests that train.
pub fn small_dataset(seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        train_size: 80,
        heldout_size: 24,
        ..SyntheticSpec::with_seed(seed)
    };
    dclip::data::generate(&spec).expect("synthetic data")
}

pub fn small_config(variant: Variant, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::preset(variant, seed);
    cfg.embed_dim = 32;
    cfg.num_heads = 4;
    cfg.batch_size = 8;
    cfg.teacher_epochs = 2;
    cfg.student_epochs = 1;
    cfg.teacher_lr = 1e-3;
    cfg.student_lr = 1e-3;
    cfg
}

fn normal_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| r.sample(StandardNormal)).collect()
}

// ---------------------------------------------------------------- metrics

/// 1-based rank of candidate `g` under descending score, ascending key.
fn brute_rank<K: Ord>(scores: &[f64], keys: &[K], g: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[g] || (scores[j] == scores[g] && keys[j] < keys[g]))
        .count()
}

fn brute_recall(values: &Tensor<f64>, ids: &[String], gt: &[usize], k: usize) -> f64 {
    let hits = gt
        .iter()
        .enumerate()
        .filter(|&(q, &g)| brute_rank(values.row(q), ids, g) <= k)
        .count();
    hits as f64 / gt.len() as f64
}

fn brute_map(values: &Tensor<f64>, ids: &[String], rel: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for (q, r) in rel.iter().enumerate() {
        let mut ranks: Vec<usize> = r.iter().map(|&g| brute_rank(values.row(q), ids, g)).collect();
        ranks.sort_unstable();
        let mut ap = 0.0;
        for (i, &rank) in ranks.iter().enumerate() {
            ap += (i + 1) as f64 / rank as f64;
        }
        total += ap / ranks.len() as f64;
    }
    total / rel.len() as f64
}

fn brute_mrr(values: &Tensor<f64>, ids: &[String], gt: &[usize]) -> f64 {
    let mut total = 0.0;
    for (q, &g) in gt.iter().enumerate() {
        total += 1.0 / brute_rank(values.row(q), ids, g) as f64;
    }
    total / gt.len() as f64
}

fn brute_cosines(a: &[f64], rows: usize, b: &[f64], cols: usize, d: usize) -> Vec<Vec<f64>> {
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let a: Vec<Vec<f64>> = (0..rows).map(|i| unit(&a[i * d..(i + 1) * d])).collect();
    let b: Vec<Vec<f64>> = (0..cols).map(|j| unit(&b[j * d..(j + 1) * d])).collect();
    a.iter()
        .map(|x| b.iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect())
        .collect()
}

fn brute_zero_shot(scores: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let classes: Vec<usize> = (0..scores[0].len()).collect();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| brute_rank(&scores[i], &classes, l) <= k)
        .count();
    hits as f64 / labels.len() as f64
}

/// Compares the library metrics with the brute-force versions on one random
/// fixture. Scores are drawn from a coarse grid so ties are common.
pub fn check_metric_fixture(seed: u64) -> Result<(), String> {
    let mut r = rng::stream(seed, "fixture.metrics");
    let c = r.random_range(1..=16usize);
    let q = r.random_range(1..=16usize);
    let coarse = r.random_bool(0.7);
    let values: Vec<f64> = (0..q * c)
        .map(|_| {
            if coarse {
                r.random_range(0..5) as f64 / 4.0
            } else {
                r.random_range(-1.0..1.0)
            }
        })
        .collect();
    let values = Tensor::new(vec![q, c], values).map_err(|e| e.to_string())?;
    let mut ids: Vec<String> = (0..c).map(|j| format!("cand{j:02}")).collect();
    ids.shuffle(&mut r);
    let qids: Vec<String> = (0..q).map(|i| format!("q{i}")).collect();
    let sim = SimilarityMatrix::new(values.clone(), qids, ids.clone()).map_err(|e| e.to_string())?;

    let gt: Vec<usize> = (0..q).map(|_| r.random_range(0..c)).collect();
    let gt_ids: Vec<String> = gt.iter().map(|&g| ids[g].clone()).collect();
    for k in [1, 2, 5, 10] {
        let got = recall_at_k(&sim, k, &gt_ids).map_err(|e| e.to_string())?;
        let want = brute_recall(&values, &ids, &gt, k);
        if got != want {
            return Err(format!("fixture {seed}: R@{k} {got} != {want}"));
        }
    }

    let rel: Vec<Vec<usize>> = (0..q)
        .map(|_| {
            let mut all: Vec<usize> = (0..c).collect();
            all.shuffle(&mut r);
            all.truncate(r.random_range(1..=c));
            all
        })
        .collect();
    let rel_ids: Vec<BTreeSet<String>> = rel.iter().map(|s| s.iter().map(|&g| ids[g].clone()).collect()).collect();
    let got = mean_average_precision(&sim, &rel_ids).map_err(|e| e.to_string())?;
    let want = brute_map(&values, &ids, &rel);
    if got != want {
        return Err(format!("fixture {seed}: MAP {got} != {want}"));
    }

    let single: Vec<BTreeSet<String>> = gt_ids.iter().map(|g| BTreeSet::from([g.clone()])).collect();
    let map1 = mean_average_precision(&sim, &single).map_err(|e| e.to_string())?;
    let mrr = brute_mrr(&values, &ids, &gt);
    if map1 != mrr {
        return Err(format!("fixture {seed}: single-relevant MAP {map1} != MRR {mrr}"));
    }

    // Zero-shot: duplicated prompt rows force exact score ties between classes.
    let d = r.random_range(2..=8usize);
    let classes = r.random_range(1..=16usize);
    let n = r.random_range(1..=16usize);
    let images = normal_matrix(&mut r, n, d);
    let mut prompts = normal_matrix(&mut r, classes, d);
    for cl in 1..classes {
        if r.random_bool(0.3) {
            let src = r.random_range(0..cl);
            let row: Vec<f64> = prompts[src * d..(src + 1) * d].to_vec();
            prompts[cl * d..(cl + 1) * d].copy_from_slice(&row);
        }
    }
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    let scores = brute_cosines(&images, n, &prompts, classes, d);
    let it = Tensor::new(vec![n, d], images).map_err(|e| e.to_string())?;
    let pt = Tensor::new(vec![classes, d], prompts).map_err(|e| e.to_string())?;
    for k in [1, 3, 5] {
        let got = zero_shot_topk(&it, &pt, &labels, k).map_err(|e| e.to_string())?;
        let want = brute_zero_shot(&scores, &labels, k);
        if got != want {
            return Err(format!("fixture {seed}: zero-shot top-{k} {got} != {want}"));
        }
    }
    Ok(())
}

// ------------------------------------------------------------ aggregation

fn cos_to_mean(h: &[f64], l: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for i in 0..l {
        for j in 0..d {
            mean[j] += h[i * d + j] / l as f64;
        }
    }
    let nm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    (0..l)
        .map(|i| {
            let row = &h[i * d..(i + 1) * d];
            let nr = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>() / (nr * nm)
        })
        .collect()
}

/// Invariants of the temperature-weighted aggregation on one random input.
pub fn check_aggregation(seed: u64) -> Result<(), String> {
    let fail = |m: String| Err(format!("input {seed}: {m}"));
    let mut r = rng::stream(seed, "fixture.aggregation");
    let l = r.random_range(1..=16usize);
    let d = r.random_range(1..=32usize);
    // Positive shift keeps the row mean away from zero.
    let raw: Vec<f64> = normal_matrix(&mut r, l, d).into_iter().map(|x| x + 0.5).collect();
    let tau = 10f64.powf(r.random_range(-2.0..1.0));
    let h = Tensor::new(vec![l, d], raw.clone()).map_err(|e| e.to_string())?;

    let out = aggregate_global(&h, tau).map_err(|e| e.to_string())?;
    let alpha = out.alpha.data();
    if let Some(a) = alpha.iter().find(|&&a| a < 0.0) {
        return fail(format!("negative weight {a}"));
    }
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return fail(format!("weights sum to {sum}"));
    }

    let mut perm: Vec<usize> = (0..l).collect();
    perm.shuffle(&mut r);
    let hp = h.select_rows(&perm).map_err(|e| e.to_string())?;
    let zp = aggregate_global(&hp, tau).map_err(|e| e.to_string())?.z;
    let drift = out.z.data().iter().zip(zp.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if drift > 1e-6 {
        return fail(format!("row permutation moved z by {drift:e}"));
    }

    let z1 = aggregate_multicluster(&h, 1, tau, seed).map_err(|e| e.to_string())?;
    let same_bits = z1.data().iter().zip(out.z.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same_bits {
        return fail("one-cluster aggregation differs from the global one".into());
    }

    let hot = aggregate_global(&h, 1e6).map_err(|e| e.to_string())?;
    let u = 1.0 / l as f64;
    let spread = hot.alpha.data().iter().map(|a| (a - u).abs()).fold(0.0, f64::max);
    if spread > 1e-4 {
        return fail(format!("at tau 1e6 weights are {spread:e} from uniform"));
    }

    let cos = cos_to_mean(&raw, l, d);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| cos[b].total_cmp(&cos[a]));
    let unique = l == 1 || cos[order[0]] - cos[order[1]] > 1e-4;
    if unique {
        let cold = aggregate_global(&h, 1e-6).map_err(|e| e.to_string())?;
        let top = cold.alpha.data()[order[0]];
        if top < 1.0 - 1e-4 {
            return fail(format!("at tau 1e-6 the most central row has weight {top}"));
        }
    }
    Ok(())
}
