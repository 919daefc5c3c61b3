//! Central-difference gradient checking.

pub mod suite;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per input, chosen from a seeded stream.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst over inputs of `max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞)`.
    pub max_rel_err: f64,
    /// Worst single-coordinate `|analytic − numeric| / max(|analytic|, |numeric|)`.
    /// Informational: on coordinates whose gradient is tiny compared with the
    /// rest of the tensor it is dominated by the finite-difference truncation
    /// error rather than by the analytic gradient.
    pub max_coord_rel_err: f64,
    /// `(input index, flat coordinate)` of the largest absolute difference
    /// in the worst input.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Norm-wise relative error of the analytic gradient against central
/// differences, worst over inputs; see [`GradCheckReport::max_rel_err`].
///
/// `f` builds a scalar from leaves bound to `inputs` and must be deterministic.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        eps,
        ..Default::default()
    };
    Ok(grad_check_with(f, inputs, &opts)?.max_rel_err)
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eps = opts.eps;
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::param(format!("eps {eps} outside [1e-4, 1e-2]")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    for (i, g) in analytic.iter().enumerate() {
        g.check_finite(&format!("analytic gradient of input {i}"))?;
    }

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_coord_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut rng = rng::stream(opts.seed, &format!("gradcheck.coords.{i}"));
                let mut c = index::sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut scale = analytic[i].data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut max_diff = 0.0f64;
        let mut at = None;
        for c in coords {
            let x0 = input.data()[c];
            work[i].data_mut()[c] = x0 + eps;
            let up = eval(&work)?;
            work[i].data_mut()[c] = x0 - eps;
            let down = eval(&work)?;
            work[i].data_mut()[c] = x0;

            let cd = (up - down) / (2.0 * eps);
            if !cd.is_finite() {
                return Err(Error::numeric(format!("numeric gradient of input {i} at {c} is not finite")));
            }
            let a = analytic[i].data()[c];
            let diff = (a - cd).abs();
            scale = scale.max(cd.abs());
            if at.is_none() || diff > max_diff {
                max_diff = diff;
                at = Some(c);
            }
            let rel = diff / a.abs().max(cd.abs()).max(1e-8);
            report.max_coord_rel_err = report.max_coord_rel_err.max(rel);
            report.coords_checked += 1;
        }
        let rel = max_diff / scale.max(1e-8);
        if report.worst.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = at.map(|c| (i, c));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.5, 4.0, 0.0, -1.0]).unwrap();
        let err = grad_check(|t, v| Ok(t.sum(v[0])), &[x], 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[x], 0.5).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // recip of a value near zero breaks the difference quotient
        let x = Tensor::scalar(1.5e-3);
        let err = grad_check(|t, v| t.recip(v[0]), &[x], 1e-3).unwrap();
        assert!(err > 1e-3);
    }

    #[test]
    fn detects_a_detached_dependence() {
        // x · stop_gradient(x²): analytic x², true 3x²
        let x = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.value(v[0]).map(|a| a * a);
                let c = t.constant(sq);
                let p = t.mul(v[0], c)?;
                Ok(t.sum(p))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(err > 0.5, "{err}");
    }
}
