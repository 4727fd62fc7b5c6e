//! Learning-not-to-learn: an auxiliary gender classifier on the latent `h`,
//! trained in alternation with the scoring model so `h` stops encoding
//! gender.
//!
//! Each mini-batch runs two phases:
//!
//! * **A** updates the adversary on cross-entropy against the gender labels,
//!   with `h` held fixed.
//! * **B** updates the scoring model on
//!   `RMSE + λ · mean Σ_c q_c ln q_c − μ · CE(q, z)`, where `q` is the
//!   adversary's posterior (eval mode, parameters frozen).
//!
//! With `λ = μ = 0` phase B reduces to the plain trainer and the scoring
//! trajectory is identical bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradengine::{AdamW, Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::scoring::{dropout_rng, epoch_order, rmse, EncodedSet, EpochRecord, History, ScoringModel, TrainConfig, HIDDEN1};
use crate::seed;

pub const ADV_HIDDEN: usize = 20;
pub const ADV_DROPOUT: f64 = 0.3;

// Dropout stream ids for the adversary, clear of the scoring layers.
const LAYER_ADV_A: u64 = 10;
const LAYER_PROBE: u64 = 11;
const ADV_INIT: u64 = 0xAD;

#[derive(Debug, Clone)]
pub struct AdversaryHead<S> {
    pub params: ParamStore<S>,
    in_dim: usize,
    pub dropout: f64,
}

impl<S: Scalar> AdversaryHead<S> {
    pub fn new(in_dim: usize, init_seed: u64) -> Result<Self> {
        if in_dim == 0 {
            return Err(Error::Config("adversary input width must be positive".into()));
        }
        let mut rng = seed::rng_from(&[init_seed, seed::INIT, ADV_INIT]);
        let mut params = ParamStore::new();
        params.insert_dense("adv_hidden", in_dim, ADV_HIDDEN, &mut rng)?;
        params.insert_dense("adv_out", ADV_HIDDEN, 2, &mut rng)?;
        Ok(Self {
            params,
            in_dim,
            dropout: ADV_DROPOUT,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    /// Posterior rows `[p(male), p(female)]`.
    pub fn forward_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        bound: &[Var],
        h: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if tape.value(h).cols() != self.in_dim {
            return Err(Error::Shape(format!(
                "adversary expects {} inputs, got {}",
                self.in_dim,
                tape.value(h).cols()
            )));
        }
        let a1 = tape.affine(h, bound[0], bound[1])?;
        let z1 = tape.sigmoid(a1)?;
        let d1 = tape.dropout(z1, self.dropout, rng, train)?;
        let a2 = tape.affine(d1, bound[2], bound[3])?;
        tape.softmax(a2)
    }

    /// Inference-mode posteriors.
    pub fn predict(&self, h: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let hv = tape.constant(h.clone())?;
        let mut rng = seed::rng_from(&[0]);
        let q = self.forward_tape(&mut tape, &bound, hv, false, &mut rng)?;
        Ok(tape.value(q).clone())
    }

    /// Fraction of rows whose arg-max class equals the label.
    pub fn accuracy(&self, h: &Tensor<S>, labels: &[u8]) -> Result<f64> {
        Ok(count_correct(&self.predict(h)?, labels) as f64 / labels.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self, mut meta: BTreeMap<String, serde_json::Value>) -> Checkpoint {
        meta.insert("model".into(), "adversary".into());
        meta.insert("in_dim".into(), self.in_dim.into());
        meta.insert("dropout".into(), self.dropout.into());
        self.params.to_checkpoint(meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("model").and_then(|v| v.as_str()) != Some("adversary") {
            return Err(Error::Data("checkpoint does not hold an adversary".into()));
        }
        let in_dim = ckpt
            .meta
            .get("in_dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Data("checkpoint lacks in_dim".into()))? as usize;
        let params = ParamStore::from_checkpoint(ckpt)?;
        let expected = [vec![in_dim, ADV_HIDDEN], vec![ADV_HIDDEN], vec![ADV_HIDDEN, 2], vec![2]];
        if params.len() != expected.len() || (0..params.len()).any(|i| params.value(i).shape() != expected[i].as_slice())
        {
            return Err(Error::Data("adversary checkpoint has unexpected parameters".into()));
        }
        Ok(Self {
            params,
            in_dim,
            dropout: ckpt.meta.get("dropout").and_then(|v| v.as_f64()).unwrap_or(ADV_DROPOUT),
        })
    }

    pub fn save(&self, path: &Path, meta: BTreeMap<String, serde_json::Value>) -> Result<()> {
        self.to_checkpoint(meta).save(path)
    }
}

fn count_correct<S: Scalar>(q: &Tensor<S>, labels: &[u8]) -> usize {
    (0..q.rows())
        .filter(|&r| {
            let row = q.row(r);
            u8::from(row[1] > row[0]) == labels[r]
        })
        .count()
}

fn class_labels(genders: &[u8]) -> Result<Vec<usize>> {
    genders
        .iter()
        .map(|&g| match g {
            0 | 1 => Ok(usize::from(g)),
            other => Err(Error::Data(format!("gender label {other} is not binary"))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialConfig {
    /// Weight of the posterior negative-entropy term.
    pub lambda: f64,
    /// Scale of the reversed adversary cross-entropy.
    pub mu: f64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self { lambda: 0.1, mu: 1.0 }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.mu >= 0.0) {
            return Err(Error::Config("lambda and mu must be non-negative".into()));
        }
        Ok(())
    }
}

/// Min-max training of `model` against `adversary`. Shuffling and the
/// scoring model's dropout streams match `scoring::train` for the same
/// `train_cfg`.
pub fn adversarial_train<S: Scalar>(
    model: &mut ScoringModel<S>,
    adversary: &mut AdversaryHead<S>,
    train_set: &EncodedSet<S>,
    val_set: Option<&EncodedSet<S>>,
    cfg: &AdversarialConfig,
    train_cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    train_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if adversary.in_dim() != HIDDEN1 {
        return Err(Error::Config(format!("adversary must read the {HIDDEN1}-wide latent")));
    }
    let labels = class_labels(&train_set.genders)?;
    let opt = train_cfg.optimizer();
    let (lambda, mu) = (S::of(cfg.lambda), S::of(cfg.mu));
    let targets = train_set.targets(train_cfg.target);
    let mut history = History::default();

    for epoch in 0..train_cfg.epochs {
        let order = epoch_order(train_cfg.seed, epoch, train_set.len());
        let mut correct = 0usize;
        for (b, rows) in order.chunks(train_cfg.batch_size).enumerate() {
            let (t, x) = train_set.gather(rows)?;
            let z: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let y: Vec<S> = rows.iter().map(|&r| S::of(targets[r])).collect();

            // Phase A: adversary step on a fixed latent.
            let h = model.latent(&t)?;
            let mut tape = Tape::new();
            let adv_bound = adversary.params.bind(&mut tape, true)?;
            let hv = tape.constant(h)?;
            let mut rng = dropout_rng(train_cfg.seed, epoch, b, LAYER_ADV_A);
            let q = adversary.forward_tape(&mut tape, &adv_bound, hv, true, &mut rng)?;
            let ce = tape.cross_entropy(q, &z)?;
            let grads = tape.backward(ce)?;
            adversary.params.accumulate(&grads, &adv_bound)?;
            if train_cfg.lr > 0.0 {
                adversary.params.adamw_step(&opt)?;
            } else {
                adversary.params.zero_grad();
            }

            // Phase B: scoring step against the frozen adversary.
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true)?;
            let adv_bound = adversary.params.bind(&mut tape, false)?;
            let tv = tape.constant(t)?;
            let xv = tape.constant(x)?;
            let mut rng = dropout_rng(train_cfg.seed, epoch, b, crate::scoring::LAYER_H);
            let out = model.forward_tape(&mut tape, &bound, tv, xv, true, &mut rng)?;
            let q = adversary.forward_tape(&mut tape, &adv_bound, out.latent, false, &mut rng)?;
            correct += count_correct(tape.value(q), &rows.iter().map(|&r| train_set.genders[r]).collect::<Vec<_>>());
            let loss = tape.rmse_loss(out.score, &y)?;
            let negent = tape.neg_entropy(q)?;
            let ce = tape.cross_entropy(q, &z)?;
            let ent_term = tape.scale(negent, lambda)?;
            let rev_term = tape.scale(ce, -mu)?;
            let loss = tape.add(loss, ent_term)?;
            let loss = tape.add(loss, rev_term)?;
            let grads = tape.backward(loss)?;
            model.params.accumulate(&grads, &bound)?;
            if train_cfg.lr > 0.0 {
                model.params.adamw_step(&opt)?;
            } else {
                model.params.zero_grad();
            }
        }

        let val_acc = match val_set {
            Some(v) => Some(adversary.accuracy(&model.latents(v)?, &v.genders)?),
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_rmse: rmse(model, train_set, train_cfg.target)?,
            val_rmse: val_set.map(|v| rmse(model, v, train_cfg.target)).transpose()?,
            adversary_train_acc: Some(correct as f64 / train_set.len() as f64),
            adversary_val_acc: val_acc,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of rows held out for the reported accuracy.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-2,
            holdout: 0.3,
            seed: 0,
        }
    }
}

/// Held-out accuracy of a fresh adversary-shaped classifier trained to read
/// gender from `features`. The hold-out is stratified by label.
pub fn probe_gender<S: Scalar>(features: &Tensor<S>, genders: &[u8], cfg: &ProbeConfig) -> Result<f64> {
    let n = features.rows();
    if genders.len() != n {
        return Err(Error::Shape("features and labels differ in length".into()));
    }
    if !(cfg.holdout > 0.0 && cfg.holdout < 1.0) || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("invalid probe configuration".into()));
    }
    let labels = class_labels(genders)?;
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for class in 0..2 {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut seed::rng_from(&[cfg.seed, seed::PROBE, class as u64]));
        let n_test = (members.len() as f64 * cfg.holdout).round() as usize;
        test_rows.extend_from_slice(&members[..n_test]);
        train_rows.extend_from_slice(&members[n_test..]);
    }
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(Error::Data("too few rows to probe".into()));
    }
    // Standardise with training-split statistics so the probe sees the
    // same information regardless of how small the latent spread is.
    let cols = features.cols();
    let (mean, scale) = column_stats(features, &train_rows);
    let gather = |rows: &[usize]| -> Result<Tensor<S>> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend(features.row(r).iter().enumerate().map(|(c, &v)| (v - mean[c]) / scale[c]));
        }
        Tensor::matrix(rows.len(), cols, data)
    };

    let mut probe = AdversaryHead::new(features.cols(), cfg.seed)?;
    let opt = AdamW {
        lr: cfg.lr,
        ..AdamW::default()
    };
    for epoch in 0..cfg.epochs {
        let mut order = train_rows.clone();
        order.shuffle(&mut seed::rng_from(&[cfg.seed, seed::PROBE, seed::SHUFFLE, epoch as u64]));
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = probe.params.bind(&mut tape, true)?;
            let hv = tape.constant(gather(rows)?)?;
            let mut rng = seed::rng_from(&[cfg.seed, seed::PROBE, epoch as u64, b as u64, LAYER_PROBE]);
            let q = probe.forward_tape(&mut tape, &bound, hv, true, &mut rng)?;
            let z: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let ce = tape.cross_entropy(q, &z)?;
            let grads = tape.backward(ce)?;
            probe.params.accumulate(&grads, &bound)?;
            probe.params.adamw_step(&opt)?;
        }
    }
    let test_labels: Vec<u8> = test_rows.iter().map(|&r| genders[r]).collect();
    probe.accuracy(&gather(&test_rows)?, &test_labels)
}

fn column_stats<S: Scalar>(features: &Tensor<S>, rows: &[usize]) -> (Vec<S>, Vec<S>) {
    let cols = features.cols();
    let n = S::of(rows.len() as f64);
    let mut mean = vec![S::zero(); cols];
    for &r in rows {
        for (m, &v) in mean.iter_mut().zip(features.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![S::zero(); cols];
    for &r in rows {
        for ((s, &v), &m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > S::of(1e-12) { sd } else { S::one() }
        })
        .collect();
    (mean, scale)
}

/// `probe_gender` on a frozen model's latents for `set`.
pub fn probe_latents<S: Scalar>(model: &ScoringModel<S>, set: &EncodedSet<S>, cfg: &ProbeConfig) -> Result<f64> {
    probe_gender(&model.latents(set)?, &set.genders, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::N_COMPETENCIES;

    fn synthetic(n: usize, dim: usize, leak: f64, seed_: u64) -> EncodedSet<f64> {
        let mut rng = seed::rng_from(&[seed_]);
        let genders: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let mut text = Vec::with_capacity(n * dim);
        for &g in &genders {
            for d in 0..dim {
                let signal = if d == 0 { leak * (f64::from(g) * 2.0 - 1.0) } else { 0.0 };
                text.push(rng.random_range(-0.2..0.2) + signal);
            }
        }
        let comp: Vec<f64> = (0..n * N_COMPETENCIES).map(|_| rng.random()).collect();
        let mut set = EncodedSet::from_features(
            Tensor::matrix(n, dim, text).unwrap(),
            Tensor::matrix(n, N_COMPETENCIES, comp).unwrap(),
            genders.clone(),
        )
        .unwrap();
        let y: Vec<f64> = (0..n).map(|i| set.competency_row(i).iter().sum::<f64>() / 7.0).collect();
        let yb: Vec<f64> = y.iter().zip(&genders).map(|(&v, &g)| if g == 1 { (v - 0.2).max(0.0) } else { v }).collect();
        set.set_targets(crate::datagen::Target::Blind, y).unwrap();
        set.set_targets(crate::datagen::Target::Biased, yb).unwrap();
        set
    }

    #[test]
    fn posteriors_are_distributions() {
        let adv = AdversaryHead::<f64>::new(HIDDEN1, 1).unwrap();
        let h = Tensor::matrix(3, HIDDEN1, vec![0.4; 3 * HIDDEN1]).unwrap();
        let q = adv.predict(&h).unwrap();
        for r in 0..3 {
            assert!((q.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(q.row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn zero_weights_reduce_to_plain_training() {
        let set = synthetic(96, 12, 0.5, 1);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 4,
            ..TrainConfig::default()
        };
        let mut plain = ScoringModel::<f64>::new(12, cfg.seed).unwrap();
        let h_plain = crate::scoring::train(&mut plain, &set, Some(&set), &cfg).unwrap();
        let mut adv_model = ScoringModel::<f64>::new(12, cfg.seed).unwrap();
        let mut adv = AdversaryHead::new(HIDDEN1, cfg.seed).unwrap();
        let h_adv = adversarial_train(
            &mut adv_model,
            &mut adv,
            &set,
            Some(&set),
            &AdversarialConfig { lambda: 0.0, mu: 0.0 },
            &cfg,
        )
        .unwrap();
        for i in 0..plain.params.len() {
            assert_eq!(plain.params.value(i), adv_model.params.value(i));
        }
        for (a, b) in h_plain.epochs.iter().zip(&h_adv.epochs) {
            assert_eq!((a.train_rmse, a.val_rmse), (b.train_rmse, b.val_rmse));
        }
    }

    #[test]
    fn uniform_posterior_gives_minus_ln2_and_no_latent_gradient() {
        let mut adv = AdversaryHead::<f64>::new(4, 1).unwrap();
        for i in 0..adv.params.len() {
            adv.params.value_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let bound = adv.params.bind(&mut tape, false).unwrap();
        let h = tape.leaf(Tensor::matrix(2, 4, vec![0.3, 0.1, 0.9, 0.5, 0.2, 0.8, 0.7, 0.4]).unwrap(), true).unwrap();
        let mut rng = seed::rng_from(&[1]);
        let q = adv.forward_tape(&mut tape, &bound, h, false, &mut rng).unwrap();
        let ne = tape.neg_entropy(q).unwrap();
        assert!((tape.value(ne).item().unwrap() + 2f64.ln()).abs() < 1e-15);
        let g = tape.backward(ne).unwrap();
        assert!(g.get(h).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn probe_detects_perfect_leak_and_chance_on_noise() {
        let n = 400;
        let genders: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let leak = Tensor::matrix(
            n,
            HIDDEN1,
            genders.iter().flat_map(|&g| std::iter::repeat_n(f64::from(g), HIDDEN1)).collect(),
        )
        .unwrap();
        let cfg = ProbeConfig {
            epochs: 10,
            ..ProbeConfig::default()
        };
        assert!(probe_gender(&leak, &genders, &cfg).unwrap() >= 0.99);

        let mut rng = seed::rng_from(&[9]);
        let noise = Tensor::matrix(n * 4, 8, (0..n * 4 * 8).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mut shuffled: Vec<u8> = (0..n * 4).map(|i| (i % 2) as u8).collect();
        shuffled.shuffle(&mut rng);
        let acc = probe_gender(&noise, &shuffled, &cfg).unwrap();
        assert!((acc - 0.5).abs() <= 0.06, "chance-level probe scored {acc}");
    }

    #[test]
    fn non_binary_labels_are_a_data_error() {
        let mut set = synthetic(32, 6, 0.0, 2);
        set.genders[0] = 2;
        let mut model = ScoringModel::<f64>::new(6, 1).unwrap();
        let mut adv = AdversaryHead::new(HIDDEN1, 1).unwrap();
        assert!(matches!(
            adversarial_train(&mut model, &mut adv, &set, None, &AdversarialConfig::default(), &TrainConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn adversary_checkpoint_round_trip() {
        let adv = AdversaryHead::<f64>::new(HIDDEN1, 3).unwrap();
        let back = AdversaryHead::<f64>::from_checkpoint(&adv.to_checkpoint(BTreeMap::new())).unwrap();
        let h = Tensor::matrix(2, HIDDEN1, vec![0.25; 2 * HIDDEN1]).unwrap();
        assert_eq!(adv.predict(&h).unwrap(), back.predict(&h).unwrap());
    }
}
