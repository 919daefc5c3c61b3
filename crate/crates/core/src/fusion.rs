//! The teacher: bidirectional cross-attention between caption tokens and
//! weighted region embeddings, followed by temperature-scaled aggregation.

use crate::attention::{attend, init_block, BlockVars};
use crate::error::{Error, Result};
use crate::kmeans::kmeans_cosine;
use crate::params::ParamSet;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const TAU_INIT: f32 = 0.07;
pub const TAU_MIN: f32 = 1e-3;
pub const TAU_MAX: f32 = 10.0;

pub fn clamp_tau(t: f32) -> f32 {
    t.clamp(TAU_MIN, TAU_MAX)
}

/// Trainable teacher state: `t2r.*` (text queries over regions), `r2t.*`
/// (region queries over text) and the aggregation temperature `tau_agg`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    params: ParamSet,
    num_heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub t2r: BlockVars,
    pub r2t: BlockVars,
    pub tau: Var,
}

impl FusionParams {
    pub fn new(embed_dim: usize, num_heads: usize, seed: u64) -> Result<Self> {
        if num_heads == 0 || embed_dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {embed_dim} must be a positive multiple of num_heads {num_heads}"
            )));
        }
        let mut params = ParamSet::new();
        init_block(&mut params, seed, "fusion.t2r", "t2r.", embed_dim);
        init_block(&mut params, seed, "fusion.r2t", "r2t.", embed_dim);
        params.insert("tau_agg", Tensor::scalar(TAU_INIT));
        Ok(FusionParams { params, num_heads })
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn embed_dim(&self) -> usize {
        self.params.get("t2r.wq").expect("t2r.wq").rows()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn tau(&self) -> f32 {
        self.params.get("tau_agg").expect("tau_agg").data()[0]
    }

    pub fn set_tau(&mut self, tau: f32) {
        self.params.get_mut("tau_agg").expect("tau_agg").data_mut()[0] = clamp_tau(tau);
    }

    pub fn hash(&self) -> String {
        self.params.hash()
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> FusionVars {
        let b = self.params.bind(tape, requires_grad);
        FusionVars {
            t2r: BlockVars::from_bound(&b, "t2r."),
            r2t: BlockVars::from_bound(&b, "r2t."),
            tau: b.var("tau_agg"),
        }
    }

    /// Like [`FusionParams::bind`] but also returns each parameter's handle by name.
    pub fn bind_named(&self, tape: &mut Tape) -> (FusionVars, Vec<(String, Var)>) {
        let b = self.params.bind(tape, true);
        let named = b.iter().map(|(k, v)| (k.clone(), *v)).collect();
        let vars = FusionVars {
            t2r: BlockVars::from_bound(&b, "t2r."),
            r2t: BlockVars::from_bound(&b, "r2t."),
            tau: b.var("tau_agg"),
        };
        (vars, named)
    }
}

/// Multi-head attention of `queries` over `context` with a residual and no
/// position information.
pub fn cross_attend(tape: &mut Tape, queries: Var, context: Var, block: &BlockVars, heads: usize) -> Result<Var> {
    Ok(attend(tape, queries, context, block, heads, None)?.out)
}

/// Returns `(text_ctx, region_ctx)`.
pub fn bidirectional_fuse(
    tape: &mut Tape,
    text: Var,
    regions: Var,
    vars: &FusionVars,
    heads: usize,
) -> Result<(Var, Var)> {
    let text_ctx = cross_attend(tape, text, regions, &vars.t2r, heads)?;
    let region_ctx = cross_attend(tape, regions, text, &vars.r2t, heads)?;
    Ok((text_ctx, region_ctx))
}

pub struct Aggregated {
    /// `1×d`.
    pub z: Var,
    /// `1×L`.
    pub alpha: Var,
}

/// `α = softmax(cos(h_i, mean(h)) / τ)`, `z = Σ α_i h_i`. `tau` is a one-element var.
pub fn aggregate_global_on(tape: &mut Tape, h: Var, tau: Var) -> Result<Aggregated> {
    let hbar = tape.mean_axis(h, 0)?;
    let nh = tape.l2_normalize_rows(h)?;
    let nb = tape.l2_normalize_rows(hbar)?;
    let nbt = tape.transpose(nb)?;
    let cos = tape.matmul(nh, nbt)?;
    let cos = tape.transpose(cos)?;
    let inv = tape.recip(tau)?;
    let logits = tape.mul_scalar(cos, inv)?;
    let alpha = tape.softmax_rows(logits)?;
    let z = tape.matmul(alpha, h)?;
    Ok(Aggregated { z, alpha })
}

/// Mean of per-cluster aggregates over a seeded cosine k-means partition.
/// With `k = 1` this is exactly [`aggregate_global_on`].
pub fn aggregate_multicluster_on(tape: &mut Tape, h: Var, k: usize, tau: Var, rng_seed: u64, stream: &str) -> Result<Var> {
    let l = tape.value(h).rows();
    if k == 0 || l < k {
        return Err(Error::param(format!("cannot aggregate {l} rows into {k} clusters")));
    }
    if k == 1 {
        return Ok(aggregate_global_on(tape, h, tau)?.z);
    }
    let assign = kmeans_cosine(tape.value(h), k, &mut rng::stream(rng_seed, stream))?;
    let mut acc: Option<Var> = None;
    for c in 0..k {
        let rows: Vec<usize> = (0..l).filter(|&i| assign[i] == c).collect();
        let hc = tape.select_rows(h, &rows)?;
        let z = aggregate_global_on(tape, hc, tau)?.z;
        acc = Some(match acc {
            None => z,
            Some(a) => tape.add(a, z)?,
        });
    }
    Ok(tape.scale(acc.expect("k ≥ 1"), 1.0 / k as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedBatch {
    pub h: Tensor<f64>,
    /// `[d]`.
    pub z: Tensor<f64>,
    /// `[L]`.
    pub alpha: Tensor<f64>,
}

pub fn aggregate_global(h: &Tensor<f64>, tau: f64) -> Result<FusedBatch> {
    if !(tau > 0.0) {
        return Err(Error::param(format!("temperature {tau} must be positive")));
    }
    let h = h.reshape(vec![h.rows(), h.cols()])?;
    let mut t = Tape::new();
    let hv = t.constant(h.clone());
    let tv = t.scalar(tau);
    let a = aggregate_global_on(&mut t, hv, tv)?;
    Ok(FusedBatch {
        z: t.value(a.z).reshape(vec![h.cols()])?,
        alpha: t.value(a.alpha).reshape(vec![h.rows()])?,
        h,
    })
}

pub fn aggregate_multicluster(h: &Tensor<f64>, k: usize, tau: f64, seed: u64) -> Result<Tensor<f64>> {
    if !(tau > 0.0) {
        return Err(Error::param(format!("temperature {tau} must be positive")));
    }
    let mut t = Tape::new();
    let hv = t.constant(h.reshape(vec![h.rows(), h.cols()])?);
    let tv = t.scalar(tau);
    let z = aggregate_multicluster_on(&mut t, hv, k, tv, seed, "kmeans")?;
    t.value(z).reshape(vec![h.cols()])
}

/// Frozen-encoder inputs of one teacher forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherInput {
    pub id: String,
    /// Per-token text states, `T×d`.
    pub text_states: Tensor<f32>,
    /// Text embedding, `[d]`, as produced by the frozen text encoder.
    pub text_embedding: Tensor<f32>,
    /// Weighted region embeddings, or the patch grid on fallback, `R×d`.
    pub regions: Tensor<f32>,
    /// Set when no usable region was available and the patch grid stands in.
    pub fallback: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct TeacherSettings {
    pub clusters: usize,
    pub seed: u64,
}

/// Normalized `z_I` (`1×d`) on the tape.
pub fn teacher_image_on(
    tape: &mut Tape,
    vars: &FusionVars,
    heads: usize,
    input: &TeacherInput,
    settings: TeacherSettings,
) -> Result<Var> {
    let text = tape.leaf_f32(&input.text_states, false);
    let regions = tape.leaf_f32(&input.regions, false);
    let (_, region_ctx) = bidirectional_fuse(tape, text, regions, vars, heads)?;
    let k = settings.clusters.min(input.regions.rows());
    let z = aggregate_multicluster_on(
        tape,
        region_ctx,
        k,
        vars.tau,
        settings.seed,
        &format!("kmeans.{}", input.id),
    )?;
    tape.l2_normalize_rows(z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput {
    pub z_i: Tensor<f32>,
    pub z_t: Tensor<f32>,
    pub fallback: bool,
}

/// Forward-only teacher with parameters bound once.
pub struct TeacherSession<'a> {
    params: &'a FusionParams,
    tape: Tape,
    vars: FusionVars,
    mark: usize,
    settings: TeacherSettings,
}

impl<'a> TeacherSession<'a> {
    pub fn new(params: &'a FusionParams, settings: TeacherSettings) -> Self {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let mark = tape.len();
        TeacherSession {
            params,
            tape,
            vars,
            mark,
            settings,
        }
    }

    /// Both outputs L2-normalized; `z_t` is the normalized text embedding.
    pub fn forward(&mut self, input: &TeacherInput) -> Result<TeacherOutput> {
        let d = self.params.embed_dim();
        let r = teacher_image_on(&mut self.tape, &self.vars, self.params.num_heads, input, self.settings)
            .and_then(|z| self.tape.value(z).cast().reshape(vec![d]));
        self.tape.truncate(self.mark);
        Ok(TeacherOutput {
            z_i: r?,
            z_t: input.text_embedding.l2_normalize()?,
            fallback: input.fallback,
        })
    }
}

pub fn teacher_forward(input: &TeacherInput, params: &FusionParams, settings: TeacherSettings) -> Result<TeacherOutput> {
    TeacherSession::new(params, settings).forward(input)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_rows(m: usize, d: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut r = rng::stream(seed, "fusion.test");
        Tensor::new(vec![m, d], (0..m * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let f = aggregate_global(&h, 1.0).unwrap();
        assert!((f.alpha.data()[0] - 0.5).abs() < 1e-12);
        assert!((f.z.data()[0] - 0.5).abs() < 1e-12 && (f.z.data()[1] - 0.5).abs() < 1e-12);

        let one = rand_rows(1, 5, 1);
        let f = aggregate_global(&one, 0.07).unwrap();
        assert_eq!(f.alpha.data(), &[1.0]);
        assert_eq!(f.z.data(), one.data());

        let same = Tensor::concat_rows(&[&one, &one, &one]).unwrap();
        let f = aggregate_global(&same, 0.3).unwrap();
        for &a in f.alpha.data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        for (z, h) in f.z.data().iter().zip(one.data()) {
            assert!((z - h).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_rejects_degenerate_rows() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(aggregate_global(&h, 1.0), Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn multicluster_special_cases() {
        let h = rand_rows(5, 4, 3);
        let g = aggregate_global(&h, 0.5).unwrap().z;
        assert_eq!(aggregate_multicluster(&h, 1, 0.5, 9).unwrap(), g);

        let m = aggregate_multicluster(&h, 5, 0.5, 9).unwrap();
        let mean = h.mean_axis(0).unwrap();
        for (a, b) in m.data().iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(aggregate_multicluster(&h, 6, 0.5, 9), Err(Error::Parameter(_))));

        let pairs = Tensor::from_rows(&[
            vec![3.0, 0.0, 0.1],
            vec![0.0, 2.0, 0.0],
            vec![3.0, 0.0, 0.1],
            vec![0.0, 2.0, 0.0],
        ])
        .unwrap();
        let z = aggregate_multicluster(&pairs, 2, 0.07, 4).unwrap();
        let want = [1.5, 1.0, 0.05];
        for (a, b) in z.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_directions_are_disjoint_and_symmetric() {
        let d = 8;
        let base = FusionParams::new(d, 2, 5).unwrap();
        let text = rand_rows(3, d, 6);
        let regs = rand_rows(4, d, 7);
        let run = |p: &FusionParams, a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut t = Tape::new();
            let v = p.bind(&mut t, false);
            let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
            let (x, y) = bidirectional_fuse(&mut t, av, bv, &v, 2).unwrap();
            (t.value(x).clone(), t.value(y).clone())
        };
        let (tc, rc) = run(&base, &text, &regs);
        assert_eq!(run(&base, &text, &regs), (tc.clone(), rc.clone()));

        let mut bumped = base.clone();
        bumped.params_mut().get_mut("t2r.wv").unwrap().data_mut()[0] += 0.5;
        let (tc2, rc2) = run(&bumped, &text, &regs);
        assert_eq!(rc2, rc);
        assert_ne!(tc2, tc);

        let mut tied = base.clone();
        for p in crate::attention::PROJECTIONS {
            let w = tied.params().get(&format!("t2r.{p}")).unwrap().clone();
            tied.params_mut().insert(format!("r2t.{p}"), w);
        }
        let (a, b) = run(&tied, &text, &regs);
        let (c, e) = run(&tied, &regs, &text);
        assert_eq!((a, b), (e, c));
    }

    #[test]
    fn zero_value_projections_aggregate_the_inputs() {
        let d = 8;
        let mut p = FusionParams::new(d, 2, 1).unwrap();
        for n in ["r2t.wv", "r2t.wo"] {
            p.params_mut().insert(n, Tensor::zeros(vec![d, d]));
        }
        let input = TeacherInput {
            id: "s".into(),
            text_states: rand_rows(3, d, 2).cast(),
            text_embedding: rand_rows(1, d, 3).cast().reshape(vec![d]).unwrap(),
            regions: rand_rows(4, d, 4).cast(),
            fallback: false,
        };
        let out = teacher_forward(&input, &p, TeacherSettings { clusters: 1, seed: 0 }).unwrap();
        let want = aggregate_global(&input.regions.cast(), TAU_INIT as f64).unwrap().z;
        let want = want.l2_normalize().unwrap();
        for (a, b) in out.z_i.data().iter().zip(want.data()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        assert_eq!(out.z_t, input.text_embedding.l2_normalize().unwrap());
    }

    #[test]
    fn tau_is_clamped() {
        let mut p = FusionParams::new(4, 1, 0).unwrap();
        assert_eq!(p.tau(), TAU_INIT);
        p.set_tau(100.0);
        assert_eq!(p.tau(), TAU_MAX);
        p.set_tau(-1.0);
        assert_eq!(p.tau(), TAU_MIN);
    }
}
