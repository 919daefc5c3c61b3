//! Multi-head attention with a residual connection, shared by the encoders'
//! self-attention and the teacher's cross-attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How token/patch positions enter self-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionMode {
    /// Sinusoidal offsets added to the query/key inputs.
    Absolute,
    /// Pairwise rotation of query/key features.
    Rotary,
}

impl std::str::FromStr for PositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(PositionMode::Absolute),
            "rotary" => Ok(PositionMode::Rotary),
            other => Err(Error::Config(format!("unknown position mode `{other}`"))),
        }
    }
}

pub const PROJECTIONS: [&str; 4] = ["wq", "wk", "wv", "wo"];

/// Adds `{prefix}wq/wk/wv/wo` (each `d×d`) drawn from streams `{stream}.wq` etc.
pub fn init_block(params: &mut ParamSet, seed: u64, stream: &str, prefix: &str, d: usize) {
    for p in PROJECTIONS {
        let t = rng::init_uniform(seed, &format!("{stream}.{p}"), vec![d, d], d);
        params.insert(format!("{prefix}{p}"), t);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl BlockVars {
    pub fn from_bound(b: &Bound, prefix: &str) -> Self {
        BlockVars {
            wq: b.var(&format!("{prefix}wq")),
            wk: b.var(&format!("{prefix}wk")),
            wv: b.var(&format!("{prefix}wv")),
            wo: b.var(&format!("{prefix}wo")),
        }
    }
}

pub struct Attended {
    /// `queries + concat(heads) · Wo`, `Q×d`.
    pub out: Var,
    /// Per-head attention weights, each `Q×C` with rows summing to one.
    pub weights: Vec<Var>,
}

/// Sinusoidal table shifted so that position 0 is the zero vector:
/// `(sin(p·ω_i), cos(p·ω_i) − 1)` for feature pair `i`.
pub fn absolute_offsets(n: usize, d: usize) -> Tensor<f64> {
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for i in 0..d / 2 {
            let w = 10000f64.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = (p as f64 * w).sin_cos();
            data[p * d + 2 * i] = s;
            data[p * d + 2 * i + 1] = c - 1.0;
        }
    }
    Tensor::new(vec![n, d], data).expect("offset shape")
}

/// Scaled dot-product attention of `queries` (`Q×d`) over `context` (`C×d`)
/// with `heads` heads and a residual connection. `positions` is `None` for
/// cross-attention between unordered sets.
pub fn attend(
    tape: &mut Tape,
    queries: Var,
    context: Var,
    w: &BlockVars,
    heads: usize,
    positions: Option<PositionMode>,
) -> Result<Attended> {
    let (nq, d) = tape.value(queries).dims2()?;
    let (nc, dc) = tape.value(context).dims2()?;
    if d != dc || tape.value(w.wq).shape() != [d, d] {
        return Err(Error::shape(format!(
            "attention: queries {:?}, context {:?}, weights {:?}",
            tape.value(queries).shape(),
            tape.value(context).shape(),
            tape.value(w.wq).shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("{d} features do not split into {heads} heads")));
    }
    let hd = d / heads;

    let (qin, kin) = match positions {
        Some(PositionMode::Absolute) => {
            let pq = tape.constant(absolute_offsets(nq, d));
            let pk = tape.constant(absolute_offsets(nc, d));
            (tape.add(queries, pq)?, tape.add(context, pk)?)
        }
        _ => (queries, context),
    };
    let mut q = tape.matmul(qin, w.wq)?;
    let mut k = tape.matmul(kin, w.wk)?;
    let v = tape.matmul(context, w.wv)?;
    if positions == Some(PositionMode::Rotary) {
        q = tape.rotary(q, heads)?;
        k = tape.rotary(k, heads)?;
    }

    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax_rows(s)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let o = tape.matmul(cat, w.wo)?;
    let out = tape.add(queries, o)?;
    Ok(Attended { out, weights })
}
