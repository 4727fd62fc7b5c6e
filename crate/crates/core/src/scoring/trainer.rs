use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncodedSet, ScoringModel, LAYER_H};
use crate::datagen::Target;
use crate::error::{Error, Result};
use crate::gradengine::{AdamW, Tape};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub target: Target,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamW::default();
        Self {
            epochs: 10,
            batch_size: 32,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            seed: 0,
            target: Target::Biased,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("lr {} must be >= 0", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_rmse: f64,
    pub val_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversary_train_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversary_val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl History {
    /// `epoch,train_rmse,val_rmse` (plus the adversary columns when
    /// `adversarial`).
    pub fn to_csv(&self, adversarial: bool) -> String {
        let mut out = String::from("epoch,train_rmse,val_rmse");
        if adversarial {
            out.push_str(",adversary_train_acc,adversary_val_acc");
        }
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!("{},{},{}", r.epoch, r.train_rmse, fmt_opt(r.val_rmse)));
            if adversarial {
                out.push_str(&format!(
                    ",{},{}",
                    fmt_opt(r.adversary_train_acc),
                    fmt_opt(r.adversary_val_acc)
                ));
            }
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

pub(crate) fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_from(&[seed, seed::SHUFFLE, epoch as u64]));
    order
}

pub(crate) fn dropout_rng(seed: u64, epoch: usize, batch: usize, layer: u64) -> ChaCha8Rng {
    seed::rng_from(&[seed, seed::DROPOUT, epoch as u64, batch as u64, layer])
}

/// Inference-mode RMSE against the chosen target.
pub fn rmse<S: Scalar>(model: &ScoringModel<S>, set: &EncodedSet<S>, target: Target) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Data("RMSE of an empty set".into()));
    }
    let scores = model.predict_scores(set)?;
    let mse = scores
        .iter()
        .zip(set.targets(target))
        .map(|(&s, &t)| (s.as_f64() - t).powi(2))
        .sum::<f64>()
        / set.len() as f64;
    Ok(mse.sqrt())
}

/// Per-batch forward/backward returning the batch loss; gradients land in
/// `model.params`.
pub(crate) fn rmse_batch<S: Scalar>(
    model: &mut ScoringModel<S>,
    set: &EncodedSet<S>,
    rows: &[usize],
    target: Target,
    dropout: &mut ChaCha8Rng,
) -> Result<f64> {
    let (t, x) = set.gather(rows)?;
    let y: Vec<S> = rows.iter().map(|&r| S::of(set.targets(target)[r])).collect();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true)?;
    let tv = tape.constant(t)?;
    let xv = tape.constant(x)?;
    let out = model.forward_tape(&mut tape, &bound, tv, xv, true, dropout)?;
    let loss = tape.rmse_loss(out.score, &y)?;
    let value = tape.value(loss).item()?.as_f64();
    let grads = tape.backward(loss)?;
    model.params.accumulate(&grads, &bound)?;
    Ok(value)
}

/// Minimize per-batch RMSE over shuffled mini-batches. The final-epoch
/// parameters are kept. With `lr = 0` no optimizer step is taken.
pub fn train<S: Scalar>(
    model: &mut ScoringModel<S>,
    train_set: &EncodedSet<S>,
    val_set: Option<&EncodedSet<S>>,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let opt = cfg.optimizer();
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = dropout_rng(cfg.seed, epoch, b, LAYER_H);
            rmse_batch(model, train_set, rows, cfg.target, &mut rng)?;
            if cfg.lr > 0.0 {
                model.params.adamw_step(&opt)?;
            } else {
                model.params.zero_grad();
            }
        }
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_rmse: rmse(model, train_set, cfg.target)?,
            val_rmse: val_set.map(|v| rmse(model, v, cfg.target)).transpose()?,
            adversary_train_acc: None,
            adversary_val_acc: None,
        });
    }
    Ok(history)
}

/// Build a fresh model seeded from `cfg.seed` and train it.
pub fn fit<S: Scalar>(
    train_set: &EncodedSet<S>,
    val_set: Option<&EncodedSet<S>>,
    cfg: &TrainConfig,
) -> Result<(ScoringModel<S>, History)> {
    let mut model = ScoringModel::new(train_set.embed_dim(), cfg.seed)?;
    let history = train(&mut model, train_set, val_set, cfg)?;
    Ok((model, history))
}

/// Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
