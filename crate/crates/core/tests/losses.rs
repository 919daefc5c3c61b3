use dclip::losses::{cosine_distill, info_nce, student_loss, StudentBatch, StudentLossConfig};
use dclip::rng;
use dclip::tensor::Tensor;
use rand::Rng;

/// Symmetric cross-entropy over cosine logits, one scalar at a time.
fn scalar_info_nce(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let a: Vec<Vec<f64>> = a.iter().map(unit).collect();
    let b: Vec<Vec<f64>> = b.iter().map(unit).collect();
    let n = a.len();
    let s = |i: usize, j: usize| a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| s(i, j).exp()).sum();
        let col: f64 = (0..n).map(|j| s(j, i).exp()).sum();
        total += (row.ln() - s(i, i)) + (col.ln() - s(i, i));
    }
    total / (2.0 * n as f64)
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[test]
fn identical_pair_gives_ln_2() {
    let z = Tensor::new(vec![2, 3], vec![0.3f64, -1.0, 2.0, 0.3, -1.0, 2.0]).unwrap();
    assert!((info_nce(&z, &z, 0.07).unwrap() - 0.693147).abs() < 1e-5);
}

#[test]
fn identity_fixture_matches_closed_form() {
    let eye = Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
    let want = (1.0 + (-1f64).exp()).ln();
    assert!((want - 0.313262).abs() < 1e-6);
    assert!((info_nce(&eye, &eye, 1.0).unwrap() - want).abs() < 1e-5);
}

#[test]
fn random_batches_match_scalar_oracle() {
    let mut r = rng::stream(3, "losses");
    for _ in 0..50 {
        let n = r.random_range(2..=8usize);
        let d = r.random_range(2..=16usize);
        let tau = r.random_range(0.05..2.0);
        let mut m = || Tensor::new(vec![n, d], (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let (a, b) = (m(), m());
        let got = info_nce(&a, &b, tau).unwrap();
        let want = scalar_info_nce(&rows(&a), &rows(&b), tau);
        assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
    }
}

#[test]
fn cosine_distill_is_one_minus_cosine() {
    let a = Tensor::vector(vec![1.0f64, 0.0]).unwrap();
    let b = Tensor::vector(vec![3.0f64, 3.0]).unwrap();
    assert!((cosine_distill(&a, &b).unwrap() - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
    let c = Tensor::vector(vec![-2.0f64, 0.0]).unwrap();
    assert!((cosine_distill(&a, &c).unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(cosine_distill(&b, &b).unwrap(), 0.0);
}

fn row_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

#[test]
fn disabled_terms_leave_plain_contrastive() {
    let a = Tensor::new(vec![2, 2], vec![1.0f64, 0.2, -0.4, 1.0]).unwrap();
    let b = Tensor::new(vec![2, 2], vec![0.5f64, 1.0, 1.0, -0.1]).unwrap();
    let batch = StudentBatch {
        student_image: &a,
        student_text: &b,
        teacher_image: &b,
        teacher_text: &a,
        base_image: Some(&b),
    };
    let off = StudentLossConfig {
        use_cos_t: false,
        use_cos_i: false,
        anchor: None,
    };
    let v = student_loss(&batch, 0.5, &off).unwrap();
    assert_eq!(v.total, info_nce(&a, &b, 0.5).unwrap());
    assert_eq!(v.components().len(), 1);

    let on = StudentLossConfig {
        anchor: Some(0.25),
        ..StudentLossConfig::default()
    };
    let v = student_loss(&batch, 0.5, &on).unwrap();
    let parts = v.contrastive + v.cos_t.unwrap() + v.cos_i.unwrap() + v.anchor.unwrap();
    assert!((v.total - parts).abs() < 1e-12);
    let mean = (0..2).map(|i| 1.0 - row_cos(a.row(i), b.row(i))).sum::<f64>() / 2.0;
    assert!((v.anchor.unwrap() - 0.25 * mean).abs() < 1e-12);
}

#[test]
fn stronger_matches_lower_the_loss() {
    let n = 4;
    let eye: Vec<f64> = (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
    let zi = Tensor::new(vec![n, n], eye.clone()).unwrap();
    let mut prev = f64::INFINITY;
    for a in [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let zt = Tensor::new(vec![n, n], eye.iter().map(|x| a * x + 1.0).collect()).unwrap();
        let l = info_nce(&zi, &zt, 0.1).unwrap();
        assert!(l > 0.0 && l < prev, "{a}: {l} after {prev}");
        prev = l;
    }
}
