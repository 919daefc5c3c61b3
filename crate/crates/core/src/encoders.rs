//! Mock frozen text/image encoders and the trainable student image encoder.
//!
//! Both encoders share the self-attention block, the output projection and
//! the patch projection through identically named init streams, and the text
//! token table is the patch projection applied to each token's raw-space
//! signature (see [`crate::data::vocab`]). The pair therefore starts out
//! aligned, the way a pretrained contrastive model would.

use serde::{Deserialize, Serialize};

use crate::attention::{attend, init_block, BlockVars, PositionMode};
use crate::data::vocab::{self, RAW_PATCH_DIM, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const TOKEN_CAP: usize = 77;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub token_cap: usize,
    pub position_mode: PositionMode,
    pub seed: u64,
}

impl EncoderConfig {
    /// 512 features, 8 heads, absolute positions.
    pub fn base(seed: u64) -> Self {
        EncoderConfig {
            embed_dim: 512,
            num_heads: 8,
            token_cap: TOKEN_CAP,
            position_mode: PositionMode::Absolute,
            seed,
        }
    }

    /// 768 features, 12 heads, rotary positions.
    pub fn large(seed: u64) -> Self {
        EncoderConfig {
            embed_dim: 768,
            num_heads: 12,
            token_cap: TOKEN_CAP,
            position_mode: PositionMode::Rotary,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.embed_dim, self.num_heads);
        if d == 0 || h == 0 || d % h != 0 {
            return Err(Error::Config(format!(
                "embed_dim {d} must be a positive multiple of num_heads {h}"
            )));
        }
        if (d / h) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for position encodings",
                d / h
            )));
        }
        if self.token_cap == 0 {
            return Err(Error::Config("token_cap must be positive".into()));
        }
        Ok(())
    }
}

fn shared_params(cfg: &EncoderConfig, params: &mut ParamSet) {
    let d = cfg.embed_dim;
    init_block(params, cfg.seed, "clip.block", "block.", d);
    params.insert("proj", rng::init_uniform(cfg.seed, "clip.proj", vec![d, d], d));
}

fn patch_projection(cfg: &EncoderConfig) -> Tensor<f32> {
    rng::init_uniform(
        cfg.seed,
        "clip.patch_proj",
        vec![RAW_PATCH_DIM, cfg.embed_dim],
        RAW_PATCH_DIM,
    )
}

/// Frozen text encoder: token table → self-attention block → per-token
/// projection → mean over tokens.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: EncoderConfig,
    params: ParamSet,
}

/// Output of [`TextEncoder::encode_text`].
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoding {
    /// Mean of `states`, shape `[d]`. Not normalized.
    pub embedding: Tensor<f32>,
    /// Projected per-token states, `T×d`.
    pub states: Tensor<f32>,
    /// Set when the input exceeded the token cap and was cut.
    pub truncated: bool,
}

pub struct TextForward {
    pub states: Var,
    pub pooled: Var,
    pub truncated: bool,
}

impl TextEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        shared_params(&config, &mut params);
        let sigs: Vec<f32> = (0..VOCAB_SIZE as u32).flat_map(vocab::signature).collect();
        let sigs = Tensor::new(vec![VOCAB_SIZE, RAW_PATCH_DIM], sigs)?;
        params.insert("token_table", sigs.matmul(&patch_projection(&config))?);
        Ok(TextEncoder { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn param_hash(&self) -> String {
        self.params.hash()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &TextVars, tokens: &[u32]) -> Result<TextForward> {
        if tokens.is_empty() {
            return Err(Error::input("empty token sequence"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::input(format!("token id {t} is outside the vocabulary")));
        }
        let truncated = tokens.len() > self.config.token_cap;
        let used = &tokens[..tokens.len().min(self.config.token_cap)];
        let rows: Vec<usize> = used.iter().map(|&t| t as usize).collect();
        let x = tape.select_rows(vars.table, &rows)?;
        let h = attend(
            tape,
            x,
            x,
            &vars.block,
            self.config.num_heads,
            Some(self.config.position_mode),
        )?
        .out;
        let states = tape.matmul(h, vars.proj)?;
        let pooled = tape.mean_axis(states, 0)?;
        Ok(TextForward {
            states,
            pooled,
            truncated,
        })
    }

    pub fn session(&self) -> TextSession<'_> {
        let mut tape = Tape::new();
        let vars = TextVars::bind(self, &mut tape);
        let mark = tape.len();
        TextSession {
            enc: self,
            tape,
            vars,
            mark,
        }
    }

    /// Encodes a caption. Sequences longer than the token cap are cut to the
    /// first `token_cap` tokens and flagged.
    pub fn encode_text(&self, tokens: &[u32]) -> Result<TextEncoding> {
        self.session().encode(tokens)
    }
}

pub struct TextVars {
    table: Var,
    block: BlockVars,
    proj: Var,
}

impl TextVars {
    pub fn bind(enc: &TextEncoder, tape: &mut Tape) -> Self {
        let b = enc.params.bind(tape, false);
        TextVars {
            table: b.var("token_table"),
            block: BlockVars::from_bound(&b, "block."),
            proj: b.var("proj"),
        }
    }
}

/// Reusable forward-only context: parameters are copied onto the tape once.
pub struct TextSession<'a> {
    enc: &'a TextEncoder,
    tape: Tape,
    vars: TextVars,
    mark: usize,
}

impl TextSession<'_> {
    pub fn encode(&mut self, tokens: &[u32]) -> Result<TextEncoding> {
        let r = self.enc.forward(&mut self.tape, &self.vars, tokens);
        let out = r.and_then(|f| {
            let d = self.enc.config.embed_dim;
            Ok(TextEncoding {
                embedding: self.tape.value(f.pooled).cast().reshape(vec![d])?,
                states: self.tape.value(f.states).cast(),
                truncated: f.truncated,
            })
        });
        self.tape.truncate(self.mark);
        out
    }
}

/// Image encoder: per-patch projection, then one self-attention block and
/// attention pooling with a learned query, then an output projection.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    config: EncoderConfig,
    params: ParamSet,
    trainable: bool,
}

pub struct ImageVars {
    pub patch_proj: Var,
    pub block: BlockVars,
    pub pool_query: Var,
    pub proj: Var,
}

impl ImageEncoder {
    /// The frozen base encoder.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut params = ParamSet::new();
        shared_params(&config, &mut params);
        params.insert("patch_proj", patch_projection(&config));
        params.insert(
            "pool_query",
            rng::init_uniform(config.seed, "clip.image.pool_query", vec![1, d], d),
        );
        Ok(ImageEncoder {
            config,
            params,
            trainable: false,
        })
    }

    pub fn trainable_copy(&self) -> Self {
        ImageEncoder {
            trainable: true,
            ..self.clone()
        }
    }

    pub fn frozen_copy(&self) -> Self {
        ImageEncoder {
            trainable: false,
            ..self.clone()
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameters, or `None` for a frozen encoder.
    pub fn params_mut(&mut self) -> Option<&mut ParamSet> {
        self.trainable.then_some(&mut self.params)
    }

    pub fn param_hash(&self) -> String {
        self.params.hash()
    }

    pub fn bind(&self, tape: &mut Tape) -> ImageVars {
        self.bind_named(tape).0
    }

    /// Like [`ImageEncoder::bind`] but also returns each parameter's handle by name.
    pub fn bind_named(&self, tape: &mut Tape) -> (ImageVars, Vec<(String, Var)>) {
        let b = self.params.bind(tape, self.trainable);
        let vars = ImageVars {
            patch_proj: b.var("patch_proj"),
            block: BlockVars::from_bound(&b, "block."),
            pool_query: b.var("pool_query"),
            proj: b.var("proj"),
        };
        (vars, b.iter().map(|(k, v)| (k.clone(), *v)).collect())
    }

    /// `P×32` raw patches to `P×d` patch embeddings, row by row.
    pub fn forward_patches(&self, tape: &mut Tape, vars: &ImageVars, raw: Var) -> Result<Var> {
        let (p, c) = tape.value(raw).dims2()?;
        if p == 0 || c != RAW_PATCH_DIM {
            return Err(Error::input(format!(
                "raw patches must be P×{RAW_PATCH_DIM} with P ≥ 1, got {:?}",
                tape.value(raw).shape()
            )));
        }
        tape.matmul(raw, vars.patch_proj)
    }

    /// `P×d` patch embeddings to one `1×d` global embedding.
    pub fn forward_pool(&self, tape: &mut Tape, vars: &ImageVars, patches: Var) -> Result<Var> {
        let d = self.config.embed_dim;
        let h = attend(
            tape,
            patches,
            patches,
            &vars.block,
            self.config.num_heads,
            Some(self.config.position_mode),
        )?
        .out;
        let qt = tape.transpose(vars.pool_query)?;
        let s = tape.matmul(h, qt)?;
        let s = tape.scale(s, 1.0 / (d as f64).sqrt());
        let s = tape.transpose(s)?;
        let alpha = tape.softmax_rows(s)?;
        let pooled = tape.matmul(alpha, h)?;
        tape.matmul(pooled, vars.proj)
    }

    pub fn forward_embed(&self, tape: &mut Tape, vars: &ImageVars, raw: Var) -> Result<Var> {
        let p = self.forward_patches(tape, vars, raw)?;
        self.forward_pool(tape, vars, p)
    }

    pub fn session(&self) -> ImageSession<'_> {
        let frozen = self.frozen_copy();
        let mut tape = Tape::new();
        let vars = frozen.bind(&mut tape);
        let mark = tape.len();
        ImageSession {
            enc: self,
            tape,
            vars,
            mark,
        }
    }

    pub fn encode_image_patches(&self, raw: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.session().patches(raw)
    }

    pub fn pool_global(&self, patch_embs: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.session().pool(patch_embs)
    }

    /// Raw patches straight to the global embedding, shape `[d]`.
    pub fn embed(&self, raw: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.session().embed(raw)
    }
}

/// Forward-only image context with parameters bound once.
pub struct ImageSession<'a> {
    enc: &'a ImageEncoder,
    tape: Tape,
    vars: ImageVars,
    mark: usize,
}

impl ImageSession<'_> {
    fn run(&mut self, f: impl FnOnce(&ImageEncoder, &mut Tape, &ImageVars) -> Result<Var>) -> Result<Tensor<f32>> {
        let r = f(self.enc, &mut self.tape, &self.vars).map(|v| self.tape.value(v).cast());
        self.tape.truncate(self.mark);
        r
    }

    pub fn patches(&mut self, raw: &Tensor<f32>) -> Result<Tensor<f32>> {
        let raw = raw.reshape(vec![raw.rows(), raw.cols()])?;
        self.run(|e, t, v| {
            let x = t.leaf_f32(&raw, false);
            e.forward_patches(t, v, x)
        })
    }

    pub fn pool(&mut self, patch_embs: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = self.enc.config.embed_dim;
        if patch_embs.cols() != d || patch_embs.rows() == 0 {
            return Err(Error::shape(format!(
                "pool_global expects P×{d}, got {:?}",
                patch_embs.shape()
            )));
        }
        let x = patch_embs.reshape(vec![patch_embs.rows(), d])?;
        self.run(|e, t, v| {
            let p = t.leaf_f32(&x, false);
            e.forward_pool(t, v, p)
        })?
        .reshape(vec![d])
    }

    pub fn embed(&mut self, raw: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = self.enc.config.embed_dim;
        let raw = raw.reshape(vec![raw.rows(), raw.cols()])?;
        self.run(|e, t, v| {
            let x = t.leaf_f32(&raw, false);
            e.forward_embed(t, v, x)
        })?
        .reshape(vec![d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: PositionMode) -> EncoderConfig {
        EncoderConfig {
            embed_dim: 16,
            num_heads: 2,
            token_cap: TOKEN_CAP,
            position_mode: mode,
            seed: 11,
        }
    }

    fn raw(p: usize, off: f32) -> Tensor<f32> {
        let d = (0..p * RAW_PATCH_DIM).map(|i| ((i as f32 + off) * 0.13).sin()).collect();
        Tensor::new(vec![p, RAW_PATCH_DIM], d).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::base(0).validate().is_ok());
        assert!(EncoderConfig::large(0).validate().is_ok());
        let mut c = small(PositionMode::Absolute);
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn text_is_deterministic_and_seeded() {
        let a = TextEncoder::new(small(PositionMode::Absolute)).unwrap();
        let b = TextEncoder::new(small(PositionMode::Absolute)).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        let toks = [0, 20, 21, 5];
        assert_eq!(a.encode_text(&toks).unwrap(), b.encode_text(&toks).unwrap());
    }

    #[test]
    fn text_rejects_bad_input_and_truncates() {
        let e = TextEncoder::new(small(PositionMode::Absolute)).unwrap();
        assert!(matches!(e.encode_text(&[]), Err(Error::Input(_))));
        assert!(matches!(e.encode_text(&[3, 256]), Err(Error::Input(_))));
        let long: Vec<u32> = (0..78).map(|i| (i % 200) as u32 + 16).collect();
        let out = e.encode_text(&long).unwrap();
        assert!(out.truncated);
        assert_eq!(out.states.rows(), 77);
        let capped = e.encode_text(&long[..77]).unwrap();
        assert!(!capped.truncated);
        assert_eq!(out.embedding, capped.embedding);
    }

    #[test]
    fn single_token_is_projected_table_row_after_block() {
        let e = TextEncoder::new(small(PositionMode::Rotary)).unwrap();
        let p = e.params();
        let x = p.get("token_table").unwrap().select_rows(&[40]).unwrap().cast::<f64>();
        let wv = p.get("block.wv").unwrap().cast::<f64>();
        let wo = p.get("block.wo").unwrap().cast::<f64>();
        let proj = p.get("proj").unwrap().cast::<f64>();
        // one token attends only to itself, so the block is x + x·Wv·Wo
        let h = x.add(&x.matmul(&wv).unwrap().matmul(&wo).unwrap()).unwrap();
        let want = h.matmul(&proj).unwrap();
        let got = e.encode_text(&[40]).unwrap().embedding;
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((*g as f64 - w).abs() < 1e-6);
        }
    }

    #[test]
    fn patches_map_row_by_row() {
        let e = ImageEncoder::new(small(PositionMode::Absolute)).unwrap();
        let x = raw(4, 0.0);
        let y = e.encode_image_patches(&x).unwrap();
        assert_eq!(y.shape(), &[4, 16]);
        let perm = [2, 0, 3, 1];
        let yp = e.encode_image_patches(&x.select_rows(&perm).unwrap()).unwrap();
        assert_eq!(yp, y.select_rows(&perm).unwrap());
        assert_eq!(e.encode_image_patches(&raw(1, 3.0)).unwrap().shape(), &[1, 16]);
    }

    #[test]
    fn pooling_identical_patches_equals_one_patch() {
        for mode in [PositionMode::Absolute, PositionMode::Rotary] {
            let e = ImageEncoder::new(small(mode)).unwrap();
            let one = e.encode_image_patches(&raw(1, 2.0)).unwrap();
            let many = Tensor::concat_rows(&[&one, &one, &one]).unwrap();
            let a = e.pool_global(&one).unwrap();
            let b = e.pool_global(&many).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rotary_and_absolute_agree_on_one_patch_only() {
        let a = ImageEncoder::new(small(PositionMode::Absolute)).unwrap();
        let r = ImageEncoder::new(small(PositionMode::Rotary)).unwrap();
        assert_eq!(a.embed(&raw(1, 0.5)).unwrap(), r.embed(&raw(1, 0.5)).unwrap());
        let (ea, er) = (a.embed(&raw(3, 0.5)).unwrap(), r.embed(&raw(3, 0.5)).unwrap());
        assert_eq!(ea.shape(), er.shape());
        assert_ne!(ea, er);
    }

    #[test]
    fn frozen_encoder_exposes_no_mutable_params() {
        let mut e = ImageEncoder::new(small(PositionMode::Absolute)).unwrap();
        assert!(e.params_mut().is_none());
        let mut s = e.trainable_copy();
        assert!(s.params_mut().is_some());
        assert_eq!(s.param_hash(), e.param_hash());
    }
}
