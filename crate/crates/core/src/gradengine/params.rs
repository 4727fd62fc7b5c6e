use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "fairpipe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Param<S> {
    name: String,
    value: Tensor<S>,
    grad: Tensor<S>,
    m: Tensor<S>,
    v: Tensor<S>,
}

/// Named parameters with gradient accumulators and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    step: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) -> Result<usize> {
        if self.index_of(name).is_some() {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.to_string(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
        });
        Ok(self.params.len() - 1)
    }

    /// Glorot-uniform weight matrix `[fan_in, fan_out]` plus a zero bias.
    pub fn insert_dense<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| S::of(rng.random_range(-limit..limit)))
            .collect();
        self.insert(&format!("{prefix}.weight"), Tensor::matrix(fan_in, fan_out, w)?)?;
        self.insert(&format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn value(&self, index: usize) -> &Tensor<S> {
        &self.params[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor<S> {
        &mut self.params[index].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    pub fn grad(&self, index: usize) -> &Tensor<S> {
        &self.params[index].grad
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Record every parameter on `tape` as a leaf, in insertion order.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect()
    }

    /// Add the gradients of the vars returned by [`ParamStore::bind`].
    pub fn accumulate(&mut self, grads: &Gradients<S>, bound: &[Var]) -> Result<()> {
        if bound.len() != self.params.len() {
            return Err(Error::State(format!(
                "{} bound vars for {} parameters",
                bound.len(),
                self.params.len()
            )));
        }
        for (p, &var) in self.params.iter_mut().zip(bound) {
            if let Some(g) = grads.get(var) {
                if g.shape() != p.grad.shape() {
                    return Err(Error::Shape(format!(
                        "gradient {:?} for parameter `{}` {:?}",
                        g.shape(),
                        p.name,
                        p.grad.shape()
                    )));
                }
                p.grad.add_assign(g);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// One AdamW update with bias-corrected moments; zeroes the gradients.
    pub fn adamw_step(&mut self, opt: &AdamW) -> Result<()> {
        if !(opt.lr > 0.0) || !opt.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be > 0", opt.lr)));
        }
        if !(0.0..1.0).contains(&opt.beta1) || !(0.0..1.0).contains(&opt.beta2) || opt.eps <= 0.0 {
            return Err(Error::Config("AdamW betas must lie in [0, 1) and eps > 0".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::of(opt.beta1), S::of(opt.beta2));
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);
        let (lr, eps) = (S::of(opt.lr), S::of(opt.eps));
        let decay = S::one() - lr * S::of(opt.weight_decay);
        for p in &mut self.params {
            let value = p.value.data_mut();
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for (i, g) in p.grad.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (S::one() - b1) * *g;
                v[i] = b2 * v[i] + (S::one() - b2) * *g * *g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] = value[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
                *g = S::zero();
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, meta: BTreeMap<String, serde_json::Value>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            meta,
            params: self
                .params
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    /// Rebuild a store from a checkpoint. Moments start at zero.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.validate()?;
        let mut store = Self::new();
        for rec in &ckpt.params {
            let data = rec.values.iter().map(|&v| S::of(v)).collect();
            store.insert(&rec.name, Tensor::new(rec.shape.clone(), data)?)?;
        }
        Ok(store)
    }
}

/// On-disk parameter file: name → shape → values, plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: Vec<ParamRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("not a checkpoint file (format `{}`)", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}
