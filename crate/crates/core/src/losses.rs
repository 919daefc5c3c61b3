//! Training objectives. The `_on` variants build on a tape; the plain
//! variants evaluate on tensors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Symmetric InfoNCE over row-paired `N×d` matrices. `tau` is a one-element var.
pub fn info_nce_on(tape: &mut Tape, zi: Var, zt: Var, tau: Var) -> Result<Var> {
    let (n, d) = tape.value(zi).dims2()?;
    if tape.value(zt).dims2()? != (n, d) {
        return Err(Error::shape(format!(
            "info_nce: {:?} vs {:?}",
            tape.value(zi).shape(),
            tape.value(zt).shape()
        )));
    }
    if n < 2 {
        return Err(Error::param(format!("info_nce needs at least 2 pairs, got {n}")));
    }
    if !(tape.value(tau).data()[0] > 0.0) {
        return Err(Error::param("info_nce temperature must be positive"));
    }
    let ni = tape.l2_normalize_rows(zi)?;
    let nt = tape.l2_normalize_rows(zt)?;
    let ntt = tape.transpose(nt)?;
    let sim = tape.matmul(ni, ntt)?;
    let inv = tape.recip(tau)?;
    let logits = tape.mul_scalar(sim, inv)?;
    let rows = tape.log_softmax_rows(logits)?;
    let lt = tape.transpose(logits)?;
    let cols = tape.log_softmax_rows(lt)?;
    let dr = tape.diag(rows)?;
    let dc = tape.diag(cols)?;
    let sr = tape.sum(dr);
    let sc = tape.sum(dc);
    let s = tape.add(sr, sc)?;
    Ok(tape.scale(s, -1.0 / (2 * n) as f64))
}

pub fn info_nce<T: Scalar>(zi: &Tensor<T>, zt: &Tensor<T>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::param(format!("temperature {tau} must be positive")));
    }
    let mut t = Tape::new();
    let a = t.leaf(zi.cast(), false);
    let b = t.leaf(zt.cast(), false);
    let tv = t.scalar(tau);
    let l = info_nce_on(&mut t, a, b, tv)?;
    Ok(t.value(l).data()[0])
}

/// Batch mean of `1 − cos(a_i, b_i)`, computed as `½‖â_i − b̂_i‖²` so that
/// identical rows give exactly zero.
pub fn cosine_distill_on(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (n, _) = tape.value(a).dims2()?;
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape(format!(
            "cosine_distill: {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    let na = tape.l2_normalize_rows(a)?;
    let nb = tape.l2_normalize_rows(b)?;
    let diff = tape.sub(na, nb)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 0.5 / n as f64))
}

/// `1 − cos(a, b)` for two vectors, in `[0, 2]`.
pub fn cosine_distill<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine_distill: {} vs {} values", a.len(), b.len())));
    }
    let mut t = Tape::new();
    let av = t.leaf(a.cast().reshape(vec![1, a.len()])?, false);
    let bv = t.leaf(b.cast().reshape(vec![1, b.len()])?, false);
    let l = cosine_distill_on(&mut t, av, bv)?;
    Ok(t.value(l).data()[0])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudentLossConfig {
    pub use_cos_t: bool,
    pub use_cos_i: bool,
    /// Anchor weight λ, or `None` when the anchor term is disabled.
    pub anchor: Option<f64>,
}

impl Default for StudentLossConfig {
    fn default() -> Self {
        StudentLossConfig {
            use_cos_t: true,
            use_cos_i: true,
            anchor: None,
        }
    }
}

/// Batch embeddings entering the student objective, all `N×d`.
#[derive(Clone, Copy, Debug)]
pub struct StudentVars {
    pub student_image: Var,
    pub student_text: Var,
    pub teacher_image: Var,
    pub teacher_text: Var,
    pub base_image: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct StudentLossVars {
    pub total: Var,
    pub contrastive: Var,
    pub cos_t: Option<Var>,
    pub cos_i: Option<Var>,
    /// Already multiplied by λ.
    pub anchor: Option<Var>,
}

pub fn student_loss_on(tape: &mut Tape, v: &StudentVars, tau: Var, cfg: &StudentLossConfig) -> Result<StudentLossVars> {
    let contrastive = info_nce_on(tape, v.student_image, v.student_text, tau)?;
    let cos_t = if cfg.use_cos_t {
        Some(cosine_distill_on(tape, v.student_text, v.teacher_text)?)
    } else {
        None
    };
    let cos_i = if cfg.use_cos_i {
        Some(cosine_distill_on(tape, v.student_image, v.teacher_image)?)
    } else {
        None
    };
    let anchor = match (cfg.anchor, v.base_image) {
        (Some(lambda), Some(base)) => {
            let a = cosine_distill_on(tape, v.student_image, base)?;
            Some(tape.scale(a, lambda))
        }
        (Some(_), None) => return Err(Error::param("anchor enabled without base embeddings")),
        _ => None,
    };
    let mut total = contrastive;
    for c in [cos_t, cos_i, anchor].into_iter().flatten() {
        total = tape.add(total, c)?;
    }
    Ok(StudentLossVars {
        total,
        contrastive,
        cos_t,
        cos_i,
        anchor,
    })
}

/// Scalar loss and its named parts.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub contrastive: f64,
    pub cos_t: Option<f64>,
    pub cos_i: Option<f64>,
    pub anchor: Option<f64>,
    pub has_gradient: bool,
}

impl LossValue {
    pub fn read(tape: &Tape, v: &StudentLossVars, has_gradient: bool) -> Self {
        let get = |x: Var| tape.value(x).data()[0];
        LossValue {
            total: get(v.total),
            contrastive: get(v.contrastive),
            cos_t: v.cos_t.map(get),
            cos_i: v.cos_i.map(get),
            anchor: v.anchor.map(get),
            has_gradient,
        }
    }

    pub fn components(&self) -> BTreeMap<&'static str, f64> {
        let mut m = BTreeMap::from([("contrastive", self.contrastive)]);
        for (k, v) in [("cos_T", self.cos_t), ("cos_I", self.cos_i), ("anchor", self.anchor)] {
            if let Some(v) = v {
                m.insert(k, v);
            }
        }
        m
    }
}

/// Student embeddings as plain tensors; see [`StudentVars`].
pub struct StudentBatch<'a, T: Scalar> {
    pub student_image: &'a Tensor<T>,
    pub student_text: &'a Tensor<T>,
    pub teacher_image: &'a Tensor<T>,
    pub teacher_text: &'a Tensor<T>,
    pub base_image: Option<&'a Tensor<T>>,
}

pub fn student_loss<T: Scalar>(b: &StudentBatch<'_, T>, tau: f64, cfg: &StudentLossConfig) -> Result<LossValue> {
    let mut t = Tape::new();
    let mut leaf = |x: &Tensor<T>| t.leaf(x.cast(), false);
    let v = StudentVars {
        student_image: leaf(b.student_image),
        student_text: leaf(b.student_text),
        teacher_image: leaf(b.teacher_image),
        teacher_text: leaf(b.teacher_text),
        base_image: b.base_image.map(leaf),
    };
    let tv = t.scalar(tau);
    let l = student_loss_on(&mut t, &v, tv, cfg)?;
    Ok(LossValue::read(&t, &l, false))
}

/// InfoNCE between teacher image outputs and frozen text embeddings.
pub fn teacher_loss_on(tape: &mut Tape, zi: Var, zt: Var, tau: Var) -> Result<Var> {
    info_nce_on(tape, zi, zt, tau)
}

pub fn teacher_loss<T: Scalar>(zi: &Tensor<T>, zt: &Tensor<T>, tau: f64) -> Result<f64> {
    info_nce(zi, zt, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_rows(m: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, "loss.test");
        Tensor::new(vec![m, d], (0..m * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn info_nce_fixed_values() {
        let same = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.3, -1.2, 2.0]]).unwrap();
        assert!((info_nce(&same, &same, 0.07).unwrap() - 2f64.ln()).abs() < 1e-12);
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let want = (1.0 + (-1f64).exp()).ln();
        assert!((info_nce(&eye, &eye, 1.0).unwrap() - want).abs() < 1e-12);
        let one = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(info_nce(&one, &one, 1.0), Err(Error::Parameter(_))));
        assert!(matches!(info_nce(&eye, &eye, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn info_nce_invariances() {
        let a = rand_rows(5, 6, 1);
        let b = rand_rows(5, 6, 2);
        let base = info_nce(&a, &b, 0.1).unwrap();
        assert!(base > 0.0);
        let p = [3, 0, 4, 1, 2];
        let pa = a.select_rows(&p).unwrap();
        let pb = b.select_rows(&p).unwrap();
        assert!((info_nce(&pa, &pb, 0.1).unwrap() - base).abs() < 1e-9);
        assert!((info_nce(&a.scale(3.7), &b, 0.1).unwrap() - base).abs() < 1e-9);

        // pulling matched pairs together lowers the loss
        let mut prev = base;
        for s in [0.3, 0.6, 0.9] {
            let mixed = b.scale(1.0 - s).add(&a.scale(s)).unwrap();
            let l = info_nce(&a, &mixed, 0.1).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn cosine_distill_values() {
        let v = Tensor::vector(vec![0.2, -1.0, 3.0]).unwrap();
        assert_eq!(cosine_distill(&v, &v).unwrap(), 0.0);
        let x = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let y = Tensor::vector(vec![0.0, 1.0]).unwrap();
        assert!((cosine_distill(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_distill(&x, &x.scale(-2.0)).unwrap() - 2.0).abs() < 1e-12);
        let a = Tensor::vector(vec![0.3, 0.9, -0.4]).unwrap();
        assert_eq!(cosine_distill(&a, &v).unwrap(), cosine_distill(&v, &a).unwrap());
        let want = 1.0 - a.cosine_sim(&v).unwrap();
        assert!((cosine_distill(&a, &v).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn student_total_is_sum_of_parts() {
        let (si, st, ti, base) = (rand_rows(4, 8, 3), rand_rows(4, 8, 4), rand_rows(4, 8, 5), rand_rows(4, 8, 6));
        let cfg = StudentLossConfig {
            anchor: Some(0.5),
            ..Default::default()
        };
        let b = StudentBatch {
            student_image: &si,
            student_text: &st,
            teacher_image: &ti,
            teacher_text: &st,
            base_image: Some(&base),
        };
        let l = student_loss(&b, 0.07, &cfg).unwrap();
        assert_eq!(l.cos_t, Some(0.0));
        let mut want = info_nce(&si, &st, 0.07).unwrap();
        for i in 0..4 {
            let r = |t: &Tensor<f64>| Tensor::vector(t.row(i).to_vec()).unwrap();
            want += cosine_distill(&r(&si), &r(&ti)).unwrap() / 4.0;
            want += 0.5 * cosine_distill(&r(&si), &r(&base)).unwrap() / 4.0;
        }
        assert!((l.total - want).abs() < 1e-9);
        assert!((l.components().values().sum::<f64>() - l.total).abs() < 1e-12);

        let teacher_equal = StudentBatch {
            teacher_image: &si,
            base_image: None,
            ..b
        };
        let l = student_loss(&teacher_equal, 0.07, &StudentLossConfig::default()).unwrap();
        assert_eq!(l.total, l.contrastive);
    }

    #[test]
    fn dropping_cosine_terms_leaves_contrastive_only() {
        let (si, st, ti) = (rand_rows(3, 4, 7), rand_rows(3, 4, 8), rand_rows(3, 4, 9));
        let b = StudentBatch {
            student_image: &si,
            student_text: &st,
            teacher_image: &ti,
            teacher_text: &ti,
            base_image: None,
        };
        let cfg = StudentLossConfig {
            use_cos_t: false,
            use_cos_i: false,
            anchor: None,
        };
        let l = student_loss(&b, 0.2, &cfg).unwrap();
        assert_eq!(l.total, info_nce(&si, &st, 0.2).unwrap());
        assert_eq!(l.components().len(), 1);
    }
}
