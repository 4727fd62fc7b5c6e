//! The fusion network and its trainer.
//!
//! ```text
//! f_t ──affine+sigmoid──▶ h (300) ──dropout──▶ affine+sigmoid ──▶ h2 (20)
//!                                                                  │
//!                                         x (7) ──concat───────────┘
//!                                                   │
//!                                          affine+sigmoid ──▶ score
//! ```
//!
//! `h` is read before dropout by the adversary and by the projections.

mod encoded;
mod trainer;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

pub use encoded::EncodedSet;
pub use trainer::{fit, pearson, rmse, train, EpochRecord, History, TrainConfig};
pub(crate) use trainer::{dropout_rng, epoch_order};

use crate::datagen::N_COMPETENCIES;
use crate::error::{Error, Result};
use crate::gradengine::{Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::seed;

pub const HIDDEN1: usize = 300;
pub const HIDDEN2: usize = 20;
pub const DROPOUT: f64 = 0.3;

/// Dropout stream id for the first hidden layer.
pub(crate) const LAYER_H: u64 = 1;

// Parameter indices, in insertion order.
const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const WH: usize = 4;
const BH: usize = 5;

#[derive(Debug, Clone)]
pub struct ScoringModel<S> {
    pub params: ParamStore<S>,
    embed_dim: usize,
    pub dropout: f64,
}

/// Vars produced by one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub score: Var,
    pub latent: Var,
}

impl<S: Scalar> ScoringModel<S> {
    /// Glorot-initialized model for `embed_dim`-dimensional text vectors.
    pub fn new(embed_dim: usize, init_seed: u64) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        let mut rng = seed::rng_from(&[init_seed, seed::INIT]);
        let mut params = ParamStore::new();
        params.insert_dense("layer1", embed_dim, HIDDEN1, &mut rng)?;
        params.insert_dense("layer2", HIDDEN1, HIDDEN2, &mut rng)?;
        params.insert_dense("head", HIDDEN2 + N_COMPETENCIES, 1, &mut rng)?;
        Ok(Self {
            params,
            embed_dim,
            dropout: DROPOUT,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Record the forward pass for a batch. `bound` comes from
    /// `self.params.bind`. Dropout is applied to `h` only when `train` is set.
    pub fn forward_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        bound: &[Var],
        text: Var,
        competencies: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<ForwardVars> {
        if tape.value(text).cols() != self.embed_dim {
            return Err(Error::Shape(format!(
                "text features have {} columns, model expects {}",
                tape.value(text).cols(),
                self.embed_dim
            )));
        }
        if tape.value(competencies).cols() != N_COMPETENCIES {
            return Err(Error::Shape(format!(
                "competencies have {} columns, expected {N_COMPETENCIES}",
                tape.value(competencies).cols()
            )));
        }
        let a1 = tape.affine(text, bound[W1], bound[B1])?;
        let h = tape.sigmoid(a1)?;
        let dropped = tape.dropout(h, self.dropout, rng, train)?;
        let a2 = tape.affine(dropped, bound[W2], bound[B2])?;
        let h2 = tape.sigmoid(a2)?;
        let joined = tape.concat(h2, competencies)?;
        let a3 = tape.affine(joined, bound[WH], bound[BH])?;
        let score = tape.sigmoid(a3)?;
        Ok(ForwardVars { score, latent: h })
    }

    /// Scores and pre-dropout latents for a batch. Dropout is drawn from
    /// `rng` when `train` is set.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        text: &Tensor<S>,
        competencies: &Tensor<S>,
        train: bool,
        rng: &mut R,
    ) -> Result<(Vec<S>, Tensor<S>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let t = tape.constant(text.clone())?;
        let x = tape.constant(competencies.clone())?;
        let out = self.forward_tape(&mut tape, &bound, t, x, train, rng)?;
        Ok((tape.value(out.score).data().to_vec(), tape.value(out.latent).clone()))
    }

    /// Inference-mode scores.
    pub fn predict(&self, text: &Tensor<S>, competencies: &Tensor<S>) -> Result<Vec<S>> {
        let mut rng = seed::rng_from(&[0]);
        Ok(self.forward(text, competencies, false, &mut rng)?.0)
    }

    /// Pre-dropout first-layer activations `sigmoid(text · W1 + b1)`.
    pub fn latent(&self, text: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let w = tape.constant(self.params.value(W1).clone())?;
        let b = tape.constant(self.params.value(B1).clone())?;
        let t = tape.constant(text.clone())?;
        let a = tape.affine(t, w, b)?;
        let h = tape.sigmoid(a)?;
        Ok(tape.value(h).clone())
    }

    /// Scores for every profile of an encoded set, in set order.
    pub fn predict_scores(&self, set: &EncodedSet<S>) -> Result<Vec<S>> {
        if set.embed_dim() != self.embed_dim {
            return Err(Error::Config(format!(
                "encoded set has embedding dim {}, checkpoint has {}",
                set.embed_dim(),
                self.embed_dim
            )));
        }
        let mut out = Vec::with_capacity(set.len());
        for chunk in set.batches(512) {
            let (t, x) = set.gather(&chunk)?;
            out.extend(self.predict(&t, &x)?);
        }
        Ok(out)
    }

    /// Pre-dropout latents for every profile of an encoded set.
    pub fn latents(&self, set: &EncodedSet<S>) -> Result<Tensor<S>> {
        let mut data = Vec::with_capacity(set.len() * HIDDEN1);
        for chunk in set.batches(512) {
            let (t, _) = set.gather(&chunk)?;
            data.extend_from_slice(self.latent(&t)?.data());
        }
        Tensor::matrix(set.len(), HIDDEN1, data)
    }

    pub fn to_checkpoint(&self, mut meta: BTreeMap<String, serde_json::Value>) -> Checkpoint {
        meta.insert("model".into(), "scoring".into());
        meta.insert("embed_dim".into(), self.embed_dim.into());
        meta.insert("dropout".into(), self.dropout.into());
        self.params.to_checkpoint(meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("model").and_then(|v| v.as_str()) != Some("scoring") {
            return Err(Error::Data("checkpoint does not hold a scoring model".into()));
        }
        let embed_dim = ckpt
            .meta
            .get("embed_dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Data("checkpoint lacks embed_dim".into()))? as usize;
        let dropout = ckpt.meta.get("dropout").and_then(|v| v.as_f64()).unwrap_or(DROPOUT);
        let params = ParamStore::from_checkpoint(ckpt)?;
        let expected = [
            ("layer1.weight", vec![embed_dim, HIDDEN1]),
            ("layer1.bias", vec![HIDDEN1]),
            ("layer2.weight", vec![HIDDEN1, HIDDEN2]),
            ("layer2.bias", vec![HIDDEN2]),
            ("head.weight", vec![HIDDEN2 + N_COMPETENCIES, 1]),
            ("head.bias", vec![1]),
        ];
        if params.len() != expected.len() {
            return Err(Error::Data("unexpected parameter count in checkpoint".into()));
        }
        for (i, (name, shape)) in expected.iter().enumerate() {
            let idx = params.index_of(name);
            if idx != Some(i) || params.value(i).shape() != shape.as_slice() {
                return Err(Error::Data(format!("checkpoint parameter `{name}` missing or misshapen")));
            }
        }
        Ok(Self {
            params,
            embed_dim,
            dropout,
        })
    }

    pub fn save(&self, path: &Path, meta: BTreeMap<String, serde_json::Value>) -> Result<()> {
        self.to_checkpoint(meta).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(dim: usize, rows: usize, seed_: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = seed::rng_from(&[seed_]);
        let t = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = (0..rows * N_COMPETENCIES).map(|_| rng.random::<f64>()).collect();
        (
            Tensor::matrix(rows, dim, t).unwrap(),
            Tensor::matrix(rows, N_COMPETENCIES, x).unwrap(),
        )
    }

    #[test]
    fn scores_and_latents_are_in_the_unit_interval() {
        let m = ScoringModel::<f64>::new(16, 1).unwrap();
        let (t, x) = inputs(16, 8, 2);
        let mut rng = seed::rng_from(&[3]);
        let (s, h) = m.forward(&t, &x, true, &mut rng).unwrap();
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(h.shape(), &[8, HIDDEN1]);
        assert!(h.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn inference_is_deterministic() {
        let m = ScoringModel::<f64>::new(16, 1).unwrap();
        let (t, x) = inputs(16, 4, 2);
        assert_eq!(m.predict(&t, &x).unwrap(), m.predict(&t, &x).unwrap());
    }

    #[test]
    fn zero_parameters_score_one_half() {
        let mut m = ScoringModel::<f64>::new(16, 1).unwrap();
        for i in 0..m.params.len() {
            m.params.value_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (t, x) = inputs(16, 3, 2);
        assert!(m.predict(&t, &x).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let m = ScoringModel::<f64>::new(16, 1).unwrap();
        let (t, x) = inputs(8, 2, 2);
        assert!(matches!(m.predict(&t, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn f32_models_run_too() {
        let m = ScoringModel::<f32>::new(8, 1).unwrap();
        let t = Tensor::<f32>::matrix(1, 8, vec![0.1; 8]).unwrap();
        let x = Tensor::<f32>::matrix(1, N_COMPETENCIES, vec![0.5; N_COMPETENCIES]).unwrap();
        let s = m.predict(&t, &x).unwrap();
        assert!(s[0] > 0.0 && s[0] < 1.0);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_scores_bit_exactly() {
        let m = ScoringModel::<f64>::new(16, 4).unwrap();
        let (t, x) = inputs(16, 5, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path, BTreeMap::new()).unwrap();
        let back = ScoringModel::<f64>::load(&path).unwrap();
        assert_eq!(m.predict(&t, &x).unwrap(), back.predict(&t, &x).unwrap());
    }
}
