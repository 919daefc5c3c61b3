//! Deterministic k-means under cosine distance.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_ITERS: usize = 20;

/// Cluster rows of `x` into `k` groups. Returns the cluster of each row,
/// with clusters numbered in order of their lowest member row.
///
/// Seeding is k-means++ on `1 − cos` drawn from `rng`; assignment ties go to
/// the lower center index; an emptied cluster takes the row farthest from its
/// own center among clusters with more than one member.
pub fn kmeans_cosine<R: Rng>(x: &Tensor<f64>, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let (n, d) = x.dims2()?;
    if k == 0 || k > n {
        return Err(Error::param(format!("cannot form {k} clusters from {n} rows")));
    }
    let u = x.l2_normalize()?;
    let cos = |i: usize, c: &[f64]| -> f64 { crate::tensor::dot(u.row(i), c) };

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centers.push(u.row(first).to_vec());
    while centers.len() < k {
        let dist: Vec<f64> = (0..n)
            .map(|i| {
                if chosen[i] {
                    return 0.0;
                }
                let best = centers.iter().map(|c| cos(i, c)).fold(f64::NEG_INFINITY, f64::max);
                (1.0 - best).max(0.0).powi(2)
            })
            .collect();
        let pick = match WeightedIndex::new(&dist) {
            Ok(w) => w.sample(rng),
            Err(_) => (0..n).find(|&i| !chosen[i]).expect("k ≤ n"),
        };
        chosen[pick] = true;
        centers.push(u.row(pick).to_vec());
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..MAX_ITERS {
        let next: Vec<usize> = (0..n)
            .map(|i| {
                let mut best = 0;
                let mut best_cos = cos(i, &centers[0]);
                for (j, c) in centers.iter().enumerate().skip(1) {
                    let s = cos(i, c);
                    if s > best_cos {
                        best = j;
                        best_cos = s;
                    }
                }
                best
            })
            .collect();
        let next = repair_empty(next, k, |i, j| 1.0 - cos(i, &centers[j]));
        if next == assign {
            break;
        }
        assign = next;
        for (j, c) in centers.iter_mut().enumerate() {
            let mut m = vec![0.0; d];
            for i in (0..n).filter(|&i| assign[i] == j) {
                for (a, &b) in m.iter_mut().zip(u.row(i)) {
                    *a += b;
                }
            }
            let norm = crate::tensor::dot(&m, &m).sqrt();
            if norm > crate::tensor::EPS_NORM {
                *c = m.iter().map(|v| v / norm).collect();
            }
        }
    }
    Ok(relabel(&assign))
}

fn repair_empty(mut assign: Vec<usize>, k: usize, dist: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    loop {
        let mut counts = vec![0usize; k];
        assign.iter().for_each(|&a| counts[a] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return assign;
        };
        let mut donor: Option<(usize, f64)> = None;
        for (i, &a) in assign.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let di = dist(i, a);
            if donor.is_none_or(|(_, best)| di > best) {
                donor = Some((i, di));
            }
        }
        let (i, _) = donor.expect("k ≤ n leaves a donor");
        assign[i] = empty;
    }
}

fn relabel(assign: &[usize]) -> Vec<usize> {
    let mut map: Vec<Option<usize>> = vec![None; assign.len()];
    let mut next = 0;
    assign
        .iter()
        .map(|&a| {
            *map[a].get_or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn separates_duplicate_pairs() {
        let x = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 2.0],
            vec![2.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        for s in 0..10 {
            let a = kmeans_cosine(&x, 2, &mut rng::stream(s, "t")).unwrap();
            assert_eq!(a, vec![0, 1, 0, 1]);
        }
    }

    #[test]
    fn k_equal_rows_gives_singletons() {
        let x = Tensor::from_rows(&[vec![1.0, 0.2], vec![0.1, 1.0], vec![-1.0, 0.3]]).unwrap();
        let a = kmeans_cosine(&x, 3, &mut rng::stream(1, "t")).unwrap();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn duplicates_still_fill_every_cluster() {
        let x = Tensor::from_rows(&vec![vec![1.0, 1.0]; 4]).unwrap();
        let a = kmeans_cosine(&x, 3, &mut rng::stream(2, "t")).unwrap();
        let mut seen = a.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn rejects_too_many_clusters() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(kmeans_cosine(&x, 2, &mut rng::stream(0, "t")), Err(Error::Parameter(_))));
    }
}
