//! Audit metrics: score-distribution divergence between genders, top-K
//! shortlist demographics, the four-fifths rule and per-group recall.
//!
//! Gender codes follow the dataset: 0 = male, 1 = female. Proportions and
//! recalls are reported as percentages.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::datagen::Target;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scoring::{EncodedSet, ScoringModel};

pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_SMOOTHING: f64 = 1e-6;
pub const FOUR_FIFTHS: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub top_k: usize,
    pub bins: usize,
    pub smoothing: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            top_k: 500,
            bins: DEFAULT_BINS,
            smoothing: DEFAULT_SMOOTHING,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        if self.bins == 0 {
            return Err(Error::Config("bins must be positive".into()));
        }
        if !(self.smoothing >= 0.0) {
            return Err(Error::Config("smoothing must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub prop_m: f64,
    pub prop_f: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub recall_m: f64,
    pub recall_f: f64,
    pub recall_overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub d_kl: f64,
    pub top_k: usize,
    pub prop_m: f64,
    pub prop_f: f64,
    pub ratio: f64,
    pub recall_m: f64,
    pub recall_f: f64,
    pub recall_overall: f64,
    pub four_fifths_pass: bool,
    pub eop_gap: f64,
}

/// Column names of a comparison-table row.
pub const TABLE_HEADER: [&str; 9] = [
    "Model",
    "Target/Method",
    "D_KL",
    "M%",
    "F%",
    "Ratio",
    "Recall M",
    "Recall F",
    "Recall Overall",
];

impl FairnessReport {
    pub fn table_row(&self, model: &str, method: &str) -> Vec<String> {
        vec![
            model.to_string(),
            method.to_string(),
            format!("{:.4}", self.d_kl),
            format!("{:.1}", self.prop_m),
            format!("{:.1}", self.prop_f),
            format!("{:.3}", self.ratio),
            format!("{:.1}", self.recall_m),
            format!("{:.1}", self.recall_f),
            format!("{:.1}", self.recall_overall),
        ]
    }
}

/// Counts over `bins` equal-width bins on [0, 1]; 1.0 lands in the last bin.
pub fn histogram(scores: &[f64], bins: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; bins];
    for &s in scores {
        if !s.is_finite() {
            return Err(Error::Numeric(format!("non-finite score {s}")));
        }
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Data(format!("score {s} outside [0, 1]")));
        }
        let b = ((s * bins as f64) as usize).min(bins - 1);
        counts[b] += 1.0;
    }
    Ok(counts)
}

/// `Σ p ln(p / q)` over two discrete distributions; terms with `p = 0`
/// contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("{} vs {} bins", p.len(), q.len())));
    }
    let mut d = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Ok(f64::INFINITY);
            }
            d += pi * (pi / qi).ln();
        }
    }
    Ok(d.max(0.0))
}

fn smoothed(counts: &[f64], smoothing: f64) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    let raw: Vec<f64> = counts.iter().map(|c| c / total + smoothing).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// `D_KL(P_male ‖ P_female)` in nats between the per-gender score histograms.
/// `smoothing` is added to every normalised bin frequency before
/// renormalising.
pub fn score_kl(scores: &[f64], genders: &[u8], bins: usize, smoothing: f64) -> Result<f64> {
    if scores.len() != genders.len() {
        return Err(Error::Shape("scores and genders differ in length".into()));
    }
    if bins == 0 {
        return Err(Error::Config("bins must be positive".into()));
    }
    let pick = |g: u8| -> Vec<f64> {
        scores.iter().zip(genders).filter(|(_, &z)| z == g).map(|(&s, _)| s).collect()
    };
    let (male, female) = (pick(0), pick(1));
    if male.is_empty() || female.is_empty() {
        return Err(Error::Data("score_kl needs both genders present".into()));
    }
    let p = smoothed(&histogram(&male, bins)?, smoothing);
    let q = smoothed(&histogram(&female, bins)?, smoothing);
    kl_divergence(&p, &q)
}

/// Ids of the `k` highest scores, best first; ties go to the smaller id.
pub fn shortlist(scores: &[f64], ids: &[u64], k: usize) -> Result<Vec<u64>> {
    if scores.len() != ids.len() {
        return Err(Error::Shape("scores and ids differ in length".into()));
    }
    if k == 0 {
        return Err(Error::Config("K must be positive".into()));
    }
    if k > scores.len() {
        return Err(Error::Config(format!("K = {k} exceeds population {}", scores.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s} cannot be ranked")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    Ok(order[..k].iter().map(|&i| ids[i]).collect())
}

fn gender_lookup(ids: &[u64], genders: &[u8]) -> HashMap<u64, u8> {
    ids.iter().copied().zip(genders.iter().copied()).collect()
}

fn gender_of(lookup: &HashMap<u64, u8>, id: u64) -> Result<u8> {
    lookup
        .get(&id)
        .copied()
        .ok_or_else(|| Error::Index(format!("id {id} has no gender annotation")))
}

/// Gender shares of a shortlist and the demographic ratio min/max.
pub fn proportions_and_ratio(shortlist: &[u64], genders: &HashMap<u64, u8>) -> Result<Proportions> {
    if shortlist.is_empty() {
        return Err(Error::Data("empty shortlist".into()));
    }
    let mut counts = [0usize; 2];
    for &id in shortlist {
        counts[usize::from(gender_of(genders, id)? != 0)] += 1;
    }
    let n = shortlist.len() as f64;
    let (m, f) = (counts[0] as f64, counts[1] as f64);
    Ok(Proportions {
        prop_m: 100.0 * m / n,
        prop_f: 100.0 * f / n,
        ratio: m.min(f) / m.max(f),
    })
}

/// Per-gender and pooled recall of `pred` against `truth`.
pub fn group_recall(pred: &[u64], truth: &[u64], genders: &HashMap<u64, u8>) -> Result<Recall> {
    let pred: HashSet<u64> = pred.iter().copied().collect();
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for &id in truth {
        let g = usize::from(gender_of(genders, id)? != 0);
        totals[g] += 1;
        if pred.contains(&id) {
            hits[g] += 1;
        }
    }
    if totals[0] == 0 || totals[1] == 0 {
        return Err(Error::Data("a gender is absent from the truth shortlist".into()));
    }
    let pct = |h: usize, t: usize| 100.0 * h as f64 / t as f64;
    Ok(Recall {
        recall_m: pct(hits[0], totals[0]),
        recall_f: pct(hits[1], totals[1]),
        recall_overall: pct(hits[0] + hits[1], totals[0] + totals[1]),
    })
}

/// Full report from predicted and ground-truth scores.
pub fn audit_scores(
    ids: &[u64],
    genders: &[u8],
    predicted: &[f64],
    truth: &[f64],
    cfg: &AuditConfig,
) -> Result<FairnessReport> {
    cfg.validate()?;
    if ids.len() != genders.len() || ids.len() != predicted.len() || ids.len() != truth.len() {
        return Err(Error::Shape("audit inputs differ in length".into()));
    }
    let lookup = gender_lookup(ids, genders);
    let d_kl = score_kl(predicted, genders, cfg.bins, cfg.smoothing)?;
    let pred = shortlist(predicted, ids, cfg.top_k)?;
    let gold = shortlist(truth, ids, cfg.top_k)?;
    let props = proportions_and_ratio(&pred, &lookup)?;
    let recall = group_recall(&pred, &gold, &lookup)?;
    Ok(FairnessReport {
        d_kl,
        top_k: cfg.top_k,
        prop_m: props.prop_m,
        prop_f: props.prop_f,
        ratio: props.ratio,
        recall_m: recall.recall_m,
        recall_f: recall.recall_f,
        recall_overall: recall.recall_overall,
        four_fifths_pass: props.ratio >= FOUR_FIFTHS,
        eop_gap: (recall.recall_m - recall.recall_f).abs(),
    })
}

/// Scores `set` with `model` and audits against its blind scores.
pub fn audit<S: Scalar>(model: &ScoringModel<S>, set: &EncodedSet<S>, cfg: &AuditConfig) -> Result<FairnessReport> {
    let predicted: Vec<f64> = model.predict_scores(set)?.into_iter().map(Scalar::as_f64).collect();
    audit_scores(&set.ids, &set.genders, &predicted, set.targets(Target::Blind), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lookup(n_m: usize, n_f: usize) -> (Vec<u64>, HashMap<u64, u8>) {
        let ids: Vec<u64> = (0..(n_m + n_f) as u64).collect();
        let genders = ids.iter().map(|&i| (i as usize >= n_m) as u8).collect::<Vec<_>>();
        let map = gender_lookup(&ids, &genders);
        (ids, map)
    }

    #[test]
    fn two_bin_kl_matches_hand_evaluation() {
        let d = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let hand = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((d - hand).abs() < 1e-15);
        assert!((d - 0.1438).abs() < 5e-5);
        // Same case through the histogram path.
        let scores = [0.2, 0.7, 0.2, 0.7, 0.7, 0.7];
        let genders = [0, 0, 1, 1, 1, 1];
        let s = score_kl(&scores, &genders, 2, DEFAULT_SMOOTHING).unwrap();
        assert!((s - 0.1438).abs() < 5e-5);
    }

    #[test]
    fn identical_distributions_have_zero_divergence() {
        let scores = [0.1, 0.5, 0.9, 0.1, 0.5, 0.9];
        let genders = [0, 0, 0, 1, 1, 1];
        assert!(score_kl(&scores, &genders, 50, 1e-6).unwrap() < 1e-9);
    }

    #[test]
    fn disjoint_supports_diverge_strongly() {
        let scores = [0.9; 10].iter().chain(&[0.1; 10]).copied().collect::<Vec<_>>();
        let genders = [0u8; 10].iter().chain(&[1u8; 10]).copied().collect::<Vec<_>>();
        let d = score_kl(&scores, &genders, 50, 1e-6).unwrap();
        // Analytic value: the male bin carries (1 + s) / (1 + 50 s) under P
        // and s / (1 + 50 s) under Q, and symmetrically for the female bin.
        let s = 1e-6f64;
        let z = 1.0 + 50.0 * s;
        let (big, small) = ((1.0 + s) / z, s / z);
        let expected = big * (big / small).ln() + small * (small / big).ln();
        assert!((d - expected).abs() < 1e-9);
        assert!(d > 3.0);
    }

    #[test]
    fn missing_gender_is_a_data_error() {
        assert!(matches!(score_kl(&[0.5, 0.6], &[0, 0], 50, 1e-6), Err(Error::Data(_))));
    }

    #[test]
    fn shortlist_tie_break_and_edges() {
        let ids = [5, 3, 9, 1, 7];
        assert_eq!(shortlist(&[0.5; 5], &ids, 3).unwrap(), vec![1, 3, 5]);
        let mut all = shortlist(&[0.1, 0.4, 0.3, 0.2, 0.9], &ids, 5).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![1, 3, 5, 7, 9]);
        assert!(matches!(shortlist(&[0.5; 5], &ids, 0), Err(Error::Config(_))));
    }

    #[test]
    fn table_one_proportions() {
        let (ids, map) = lookup(347, 153);
        let p = proportions_and_ratio(&ids, &map).unwrap();
        assert!((p.prop_m - 69.4).abs() < 5e-5);
        assert!((p.prop_f - 30.6).abs() < 5e-5);
        assert!((p.ratio - 153.0 / 347.0).abs() < 1e-15);
        assert_eq!(format!("{:.3}", p.ratio), "0.441");
    }

    #[test]
    fn balanced_and_skewed_ratios() {
        let (ids, map) = lookup(250, 250);
        assert_eq!(proportions_and_ratio(&ids, &map).unwrap().ratio, 1.0);
        let (ids, map) = lookup(400, 100);
        let p = proportions_and_ratio(&ids, &map).unwrap();
        assert_eq!(p.ratio, 0.25);
        assert!(p.ratio < FOUR_FIFTHS);
    }

    #[test]
    fn table_one_recalls() {
        let (truth, map) = lookup(250, 250);
        let pred: Vec<u64> = truth[..219].iter().chain(&truth[250..250 + 137]).copied().collect();
        let r = group_recall(&pred, &truth, &map).unwrap();
        assert!((r.recall_m - 87.6).abs() < 5e-5);
        assert!((r.recall_f - 54.8).abs() < 5e-5);
        assert!((r.recall_overall - 71.2).abs() < 5e-5);
        let full = group_recall(&truth, &truth, &map).unwrap();
        assert_eq!((full.recall_m, full.recall_f, full.recall_overall), (100.0, 100.0, 100.0));
        let none = group_recall(&[], &truth, &map).unwrap();
        assert_eq!((none.recall_m, none.recall_f, none.recall_overall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn oracle_predictor_has_full_recall() {
        let ids: Vec<u64> = (0..40).collect();
        let genders: Vec<u8> = ids.iter().map(|i| (i % 2) as u8).collect();
        let truth: Vec<f64> = ids.iter().map(|&i| ((i * 37) % 41) as f64 / 41.0).collect();
        let cfg = AuditConfig {
            top_k: 10,
            ..AuditConfig::default()
        };
        let r = audit_scores(&ids, &genders, &truth, &truth, &cfg).unwrap();
        assert_eq!(r.recall_overall, 100.0);
        let gold = shortlist(&truth, &ids, 10).unwrap();
        let expected = proportions_and_ratio(&gold, &gender_lookup(&ids, &genders)).unwrap();
        assert_eq!(r.ratio, expected.ratio);
        assert_eq!(r.four_fifths_pass, r.ratio >= 0.8);
        assert!((r.prop_m + r.prop_f - 100.0).abs() < 1e-12);
    }
}
