use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction. Moments are stored per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub clip_grad_norm: Option<f64>,
    step: u64,
    m: BTreeMap<String, Tensor<f32>>,
    v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            clip_grad_norm: None,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<f32>, &Tensor<f32>)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    /// Updates every parameter of every `(prefix, set)` group using
    /// `grads[prefix + name]`; a missing gradient counts as zero.
    ///
    /// Non-finite gradients abort before anything changes.
    pub fn step(&mut self, groups: &mut [(&str, &mut ParamSet)], grads: &BTreeMap<String, Tensor<f64>>) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        let mut sq = 0.0;
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::numeric(format!("gradient of `{name}` is not finite")));
            }
            sq += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        for (prefix, set) in groups.iter() {
            for (name, p) in set.iter() {
                if let Some(g) = grads.get(&format!("{prefix}{name}")) {
                    if g.shape() != p.shape() {
                        return Err(Error::shape(format!(
                            "gradient of `{prefix}{name}` is {:?}, parameter is {:?}",
                            g.shape(),
                            p.shape()
                        )));
                    }
                }
            }
        }
        let scale = match self.clip_grad_norm {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (prefix, set) in groups.iter_mut() {
            for (name, p) in set.iter_mut() {
                let full = format!("{prefix}{name}");
                let g = grads.get(&full);
                let m = self
                    .m
                    .entry(full.clone())
                    .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
                let v = self.v.entry(full).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
                for i in 0..p.len() {
                    let gi = g.map_or(0.0, |g| g.data()[i] * scale);
                    let mi = BETA1 * m.data()[i] as f64 + (1.0 - BETA1) * gi;
                    let vi = BETA2 * v.data()[i] as f64 + (1.0 - BETA2) * gi * gi;
                    m.data_mut()[i] = mi as f32;
                    v.data_mut()[i] = vi as f32;
                    let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + EPSILON);
                    let x = &mut p.data_mut()[i];
                    *x = (*x as f64 - update) as f32;
                }
            }
        }
        Ok(())
    }
}
