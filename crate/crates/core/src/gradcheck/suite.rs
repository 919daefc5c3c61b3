//! Named gradient checks over every differentiable piece of the model, each
//! repeated on fresh random inputs for a number of seeds.

use rand::Rng;
use rayon::prelude::*;

use super::{grad_check_with, GradCheckOptions};
use crate::attention::{attend, BlockVars, PositionMode};
use crate::encoders::{EncoderConfig, ImageEncoder, ImageVars};
use crate::error::{Error, Result};
use crate::fusion::{aggregate_global_on, aggregate_multicluster_on, cross_attend, teacher_image_on, FusionVars, TeacherInput, TeacherSettings};
use crate::losses::{cosine_distill_on, info_nce_on, student_loss_on, StudentLossConfig, StudentVars};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest relative error a check may report and still pass.
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: usize,
    pub eps: f64,
    pub base_seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: 20,
            eps: 1e-3,
            base_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub seeds: usize,
    pub coords: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    f: Loss,
}

struct Gen {
    r: rng::Stream,
}

impl Gen {
    fn t(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.r.random_range(lo..hi)).collect()).expect("shape")
    }

    fn m(&mut self, rows: usize, cols: usize) -> Tensor<f64> {
        self.t(&[rows, cols], -1.0, 1.0)
    }
}

/// `Σ v ⊙ c` for a fixed random `c`, so every output coordinate matters.
fn probe(t: &mut Tape, v: Var, c: &Tensor<f64>) -> Result<Var> {
    let cv = t.constant(c.clone());
    let p = t.mul(v, cv)?;
    Ok(t.sum(p))
}

/// A case whose output is probed by a random tensor of `out_shape`.
fn probed(
    inputs: Vec<Tensor<f64>>,
    out_shape: &[usize],
    g: &mut Gen,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> Case {
    let c = g.t(out_shape, -1.0, 1.0);
    Case {
        inputs,
        f: Box::new(move |t, v| {
            let y = op(t, v)?;
            probe(t, y, &c)
        }),
    }
}

fn block(v: &[Var]) -> BlockVars {
    BlockVars {
        wq: v[0],
        wk: v[1],
        wv: v[2],
        wo: v[3],
    }
}

fn weights(g: &mut Gen, d: usize) -> Vec<Tensor<f64>> {
    let s = 1.0 / (d as f64).sqrt();
    (0..4).map(|_| g.t(&[d, d], -s, s)).collect()
}

fn build(name: &str, g: &mut Gen) -> Case {
    match name {
        "matmul" => probed(vec![g.m(3, 4), g.m(4, 2)], &[3, 2], g, |t, v| t.matmul(v[0], v[1])),
        "transpose" => probed(vec![g.m(3, 4)], &[4, 3], g, |t, v| t.transpose(v[0])),
        "add" => probed(vec![g.m(3, 4), g.m(3, 4)], &[3, 4], g, |t, v| t.add(v[0], v[1])),
        "sub" => probed(vec![g.m(3, 4), g.m(3, 4)], &[3, 4], g, |t, v| t.sub(v[0], v[1])),
        "mul" => probed(vec![g.m(3, 4), g.m(3, 4)], &[3, 4], g, |t, v| t.mul(v[0], v[1])),
        "add_row" => {
            let b = g.t(&[4], -1.0, 1.0);
            probed(vec![g.m(3, 4), b], &[3, 4], g, |t, v| t.add_row(v[0], v[1]))
        }
        "linear" => {
            let b = g.t(&[5], -1.0, 1.0);
            probed(vec![g.m(3, 4), g.m(4, 5), b], &[3, 5], g, |t, v| t.linear(v[0], v[1], Some(v[2])))
        }
        "scale" => probed(vec![g.m(3, 4)], &[3, 4], g, |t, v| Ok(t.scale(v[0], -1.7))),
        "mul_scalar" => {
            let s = g.t(&[1], 0.5, 2.0);
            probed(vec![g.m(3, 4), s], &[3, 4], g, |t, v| t.mul_scalar(v[0], v[1]))
        }
        "recip" => {
            let x = g.t(&[3, 4], 0.5, 2.0);
            probed(vec![x], &[3, 4], g, |t, v| t.recip(v[0]))
        }
        "softmax_rows" => {
            let x = g.t(&[3, 5], -3.0, 3.0);
            probed(vec![x], &[3, 5], g, |t, v| t.softmax_rows(v[0]))
        }
        "log_softmax_rows" => {
            let x = g.t(&[3, 5], -3.0, 3.0);
            probed(vec![x], &[3, 5], g, |t, v| t.log_softmax_rows(v[0]))
        }
        "sum" => probed(vec![g.m(3, 4)], &[1], g, |t, v| Ok(t.sum(v[0]))),
        "mean" => probed(vec![g.m(3, 4)], &[1], g, |t, v| Ok(t.mean(v[0]))),
        "mean_axis0" => probed(vec![g.m(3, 4)], &[1, 4], g, |t, v| t.mean_axis(v[0], 0)),
        "mean_axis1" => probed(vec![g.m(3, 4)], &[3, 1], g, |t, v| t.mean_axis(v[0], 1)),
        "sum_cols" => probed(vec![g.m(3, 4)], &[3, 1], g, |t, v| t.sum_cols(v[0])),
        "row_dot" => probed(vec![g.m(3, 4), g.m(3, 4)], &[3, 1], g, |t, v| t.row_dot(v[0], v[1])),
        "concat_rows" => probed(vec![g.m(2, 4), g.m(3, 4)], &[5, 4], g, |t, v| t.concat_rows(&[v[0], v[1]])),
        "concat_cols" => probed(vec![g.m(3, 2), g.m(3, 4)], &[3, 6], g, |t, v| t.concat_cols(&[v[0], v[1]])),
        "select_rows" => probed(vec![g.m(3, 4)], &[4, 4], g, |t, v| t.select_rows(v[0], &[2, 0, 2, 1])),
        "slice_cols" => probed(vec![g.m(3, 6)], &[3, 3], g, |t, v| t.slice_cols(v[0], 2, 3)),
        "l2_normalize_rows" => probed(vec![g.m(3, 5)], &[3, 5], g, |t, v| t.l2_normalize_rows(v[0])),
        "layer_norm_rows" => probed(vec![g.m(3, 6)], &[3, 6], g, |t, v| t.layer_norm_rows(v[0])),
        "gelu" => {
            let x = g.t(&[3, 4], -3.0, 3.0);
            probed(vec![x], &[3, 4], g, |t, v| Ok(t.gelu(v[0])))
        }
        "rotary" => probed(vec![g.m(4, 8)], &[4, 8], g, |t, v| t.rotary(v[0], 2)),
        "diag" => probed(vec![g.m(4, 4)], &[4], g, |t, v| t.diag(v[0])),
        "reshape" => probed(vec![g.m(3, 4)], &[2, 6], g, |t, v| t.reshape(v[0], vec![2, 6])),
        "attend_absolute" | "attend_rotary" => {
            let mode = if name == "attend_rotary" {
                PositionMode::Rotary
            } else {
                PositionMode::Absolute
            };
            let mut inputs = vec![g.m(4, 8)];
            inputs.extend(weights(g, 8));
            probed(inputs, &[4, 8], g, move |t, v| {
                Ok(attend(t, v[0], v[0], &block(&v[1..]), 2, Some(mode))?.out)
            })
        }
        "cross_attend" => {
            let mut inputs = vec![g.m(3, 8), g.m(4, 8)];
            inputs.extend(weights(g, 8));
            probed(inputs, &[3, 8], g, |t, v| cross_attend(t, v[0], v[1], &block(&v[2..]), 2))
        }
        "aggregate_global" => {
            let tau = g.t(&[1], 0.3, 1.0);
            let cz = g.t(&[1, 6], -1.0, 1.0);
            let ca = g.t(&[1, 5], -1.0, 1.0);
            Case {
                inputs: vec![g.m(5, 6), tau],
                f: Box::new(move |t, v| {
                    let a = aggregate_global_on(t, v[0], v[1])?;
                    let pz = probe(t, a.z, &cz)?;
                    let pa = probe(t, a.alpha, &ca)?;
                    t.add(pz, pa)
                }),
            }
        }
        "aggregate_multicluster" => {
            // Two well-separated groups so small perturbations never move a row
            // to the other cluster.
            let mut h = g.t(&[6, 4], -0.1, 0.1);
            for i in 0..6 {
                let c = if i % 2 == 0 { 0 } else { 2 };
                h.data_mut()[i * 4 + c] += 2.0;
            }
            let tau = g.t(&[1], 0.3, 1.0);
            probed(vec![h, tau], &[1, 4], g, |t, v| aggregate_multicluster_on(t, v[0], 2, v[1], 5, "kmeans"))
        }
        "info_nce" => {
            let tau = g.t(&[1], 0.2, 1.0);
            Case {
                inputs: vec![g.m(4, 6), g.m(4, 6), tau],
                f: Box::new(|t, v| info_nce_on(t, v[0], v[1], v[2])),
            }
        }
        "cosine_distill" => Case {
            inputs: vec![g.m(3, 6), g.m(3, 6)],
            f: Box::new(|t, v| cosine_distill_on(t, v[0], v[1])),
        },
        "student_loss" => {
            let tau = g.t(&[1], 0.2, 1.0);
            let cfg = StudentLossConfig {
                use_cos_t: true,
                use_cos_i: true,
                anchor: Some(0.5),
            };
            Case {
                inputs: vec![g.m(4, 6), g.m(4, 6), g.m(4, 6), g.m(4, 6), tau],
                f: Box::new(move |t, v| {
                    let sv = StudentVars {
                        student_image: v[0],
                        student_text: v[1],
                        teacher_image: v[2],
                        teacher_text: v[1],
                        base_image: Some(v[3]),
                    };
                    Ok(student_loss_on(t, &sv, v[4], &cfg)?.total)
                }),
            }
        }
        "pool_global" => {
            let enc = ImageEncoder::new(EncoderConfig {
                embed_dim: 8,
                num_heads: 2,
                ..EncoderConfig::base(1)
            })
            .expect("encoder config");
            let mut inputs = vec![g.m(5, 8)];
            inputs.extend(weights(g, 8));
            inputs.push(g.t(&[1, 8], -0.35, 0.35));
            inputs.push(g.t(&[8, 8], -0.35, 0.35));
            let pp = enc.params().get("patch_proj").expect("patch_proj").cast::<f64>();
            probed(inputs, &[1, 8], g, move |t, v| {
                let vars = ImageVars {
                    patch_proj: t.constant(pp.clone()),
                    block: block(&v[1..5]),
                    pool_query: v[5],
                    proj: v[6],
                };
                enc.forward_pool(t, &vars, v[0])
            })
        }
        "teacher_loss" => teacher_case(g),
        other => unreachable!("unknown check {other}"),
    }
}

/// Teacher InfoNCE for three samples at width 16 as a function of every
/// fusion parameter and the loss temperature.
fn teacher_case(g: &mut Gen) -> Case {
    let d = 16;
    let samples: Vec<TeacherInput> = (0..3)
        .map(|i| TeacherInput {
            id: format!("s{i}"),
            text_states: g.m(4, d).cast(),
            text_embedding: g.t(&[d], -1.0, 1.0).cast(),
            regions: g.m(5, d).cast(),
            fallback: false,
        })
        .collect();
    let zt = Tensor::from_rows(
        &samples
            .iter()
            .map(|s| s.text_embedding.cast::<f64>().into_data())
            .collect::<Vec<_>>(),
    )
    .expect("rows");
    let mut inputs = weights(g, d);
    inputs.extend(weights(g, d));
    inputs.push(g.t(&[1], 0.3, 1.0));
    inputs.push(g.t(&[1], 0.2, 1.0));
    Case {
        inputs,
        f: Box::new(move |t, v| {
            let vars = FusionVars {
                t2r: block(&v[0..4]),
                r2t: block(&v[4..8]),
                tau: v[8],
            };
            let settings = TeacherSettings { clusters: 1, seed: 0 };
            let zs = samples
                .iter()
                .map(|s| teacher_image_on(t, &vars, 2, s, settings))
                .collect::<Result<Vec<_>>>()?;
            let zi = t.concat_rows(&zs)?;
            let ztv = t.constant(zt.clone());
            info_nce_on(t, zi, ztv, v[9])
        }),
    }
}

pub const CHECKS: [&str; 37] = [
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_row",
    "linear",
    "scale",
    "mul_scalar",
    "recip",
    "softmax_rows",
    "log_softmax_rows",
    "sum",
    "mean",
    "mean_axis0",
    "mean_axis1",
    "sum_cols",
    "row_dot",
    "concat_rows",
    "concat_cols",
    "select_rows",
    "slice_cols",
    "l2_normalize_rows",
    "layer_norm_rows",
    "gelu",
    "rotary",
    "diag",
    "reshape",
    "attend_absolute",
    "attend_rotary",
    "cross_attend",
    "aggregate_global",
    "aggregate_multicluster",
    "info_nce",
    "cosine_distill",
    "student_loss",
    "pool_global",
];

/// All checks, plus the full teacher loss.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().copied().chain(["teacher_loss"]).collect()
}

pub fn run_check(name: &'static str, opts: &SuiteOptions) -> Result<CheckResult> {
    if !check_names().contains(&name) {
        return Err(Error::input(format!("unknown gradient check `{name}`")));
    }
    if opts.seeds == 0 {
        return Err(Error::param("at least one seed is required"));
    }
    let reports = (0..opts.seeds)
        .into_par_iter()
        .map(|i| {
            let seed = opts.base_seed.wrapping_add(i as u64);
            let mut g = Gen {
                r: rng::stream(seed, &format!("gradcheck.{name}")),
            };
            let case = build(name, &mut g);
            let go = GradCheckOptions {
                eps: opts.eps,
                max_coords_per_input: None,
                seed,
            };
            grad_check_with(&case.f, &case.inputs, &go)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckResult {
        name,
        seeds: opts.seeds,
        coords: reports.iter().map(|r| r.coords_checked).sum(),
        max_rel_err: reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
    })
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    check_names().into_iter().map(|n| run_check(n, opts)).collect()
}
