//! Integrated Gradients over the token-embedding input space, proxy-token
//! mining per gender × sector group, and mask-driven retraining.
//!
//! The baseline input is all-zero embedding rows (the `[PAD]` vector) with
//! zero competencies. Because pooling is a masked mean, the gradient with
//! respect to an active embedding row is the gradient with respect to the
//! pooled vector divided by the number of active rows, so one batched
//! forward/backward pass over the `m` path points suffices per resume.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{is_special, Lexicon, Profile, ProfileSet, TokenSequence, MASK, N_COMPETENCIES, N_SECTORS};
use crate::embed::{pool_mean, Embedder};
use crate::error::{Error, Result};
use crate::gradengine::{Tape, Tensor};
use crate::scalar::Scalar;
use crate::scoring::{train, EncodedSet, ScoringModel, TrainConfig};

/// A differentiable scorer of (pooled text vector, competencies).
pub trait Attributable<S: Scalar>: Sync {
    fn embed_dim(&self) -> usize;

    /// Scores of each row plus gradients with respect to the text and
    /// competency inputs of that row.
    fn value_and_grad(&self, text: &Tensor<S>, competencies: &Tensor<S>) -> Result<(Vec<S>, Tensor<S>, Tensor<S>)>;
}

impl<S: Scalar> Attributable<S> for ScoringModel<S> {
    fn embed_dim(&self) -> usize {
        ScoringModel::embed_dim(self)
    }

    fn value_and_grad(&self, text: &Tensor<S>, competencies: &Tensor<S>) -> Result<(Vec<S>, Tensor<S>, Tensor<S>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let t = tape.leaf(text.clone(), true)?;
        let x = tape.leaf(competencies.clone(), true)?;
        let mut rng = crate::seed::rng_from(&[0]);
        let out = self.forward_tape(&mut tape, &bound, t, x, false, &mut rng)?;
        let scores = tape.value(out.score).data().to_vec();
        let total = tape.sum(out.score)?;
        let mut grads = tape.backward(total)?;
        let gt = grads.take(t).ok_or_else(|| Error::State("no gradient for text input".into()))?;
        let gx = grads.take(x).ok_or_else(|| Error::State("no gradient for competencies".into()))?;
        Ok((scores, gt, gx))
    }
}

/// `F = w_text · f + w_comp · x + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScorer<S> {
    pub w_text: Vec<S>,
    pub w_comp: Vec<S>,
    pub bias: S,
}

impl<S: Scalar> Attributable<S> for LinearScorer<S> {
    fn embed_dim(&self) -> usize {
        self.w_text.len()
    }

    fn value_and_grad(&self, text: &Tensor<S>, competencies: &Tensor<S>) -> Result<(Vec<S>, Tensor<S>, Tensor<S>)> {
        let n = text.rows();
        if text.cols() != self.w_text.len() || competencies.cols() != self.w_comp.len() {
            return Err(Error::Shape("linear scorer input width mismatch".into()));
        }
        let scores = (0..n)
            .map(|r| {
                let a: S = text.row(r).iter().zip(&self.w_text).map(|(&u, &w)| u * w).sum();
                let b: S = competencies.row(r).iter().zip(&self.w_comp).map(|(&u, &w)| u * w).sum();
                a + b + self.bias
            })
            .collect();
        let gt = Tensor::matrix(n, self.w_text.len(), self.w_text.repeat(n))?;
        let gx = Tensor::matrix(n, self.w_comp.len(), self.w_comp.repeat(n))?;
        Ok((scores, gt, gx))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgResult<S> {
    /// One signed relevance per logical token, summed over embedding dims.
    pub token_attribution: Vec<S>,
    pub competency_attribution: Vec<S>,
    pub completeness_gap: f64,
    pub f_input: f64,
    pub f_baseline: f64,
}

/// Integrated Gradients of `model` for one profile with an `m`-point
/// midpoint rule.
pub fn integrated_gradients<S: Scalar, M: Attributable<S> + ?Sized>(
    model: &M,
    embedder: &Embedder<S>,
    profile: &Profile,
    m: usize,
) -> Result<IgResult<S>> {
    if m < 2 {
        return Err(Error::Config(format!("IG needs at least 2 steps, got {m}")));
    }
    let emb = embedder.embed_sequence(profile.id, &profile.bio)?;
    let pooled = pool_mean(&emb)?;
    let d = pooled.len();
    if d != model.embed_dim() {
        return Err(Error::Config(format!("embedding dim {d} does not match model dim {}", model.embed_dim())));
    }
    let x: Vec<S> = profile.competencies.iter().map(|&c| S::of(c)).collect();

    let mut text = Vec::with_capacity((m + 2) * d);
    let mut comp = Vec::with_capacity((m + 2) * N_COMPETENCIES);
    for k in 1..=m {
        let alpha = S::of((k as f64 - 0.5) / m as f64);
        text.extend(pooled.iter().map(|&v| v * alpha));
        comp.extend(x.iter().map(|&v| v * alpha));
    }
    // Endpoints for the completeness check.
    text.extend_from_slice(&pooled);
    comp.extend_from_slice(&x);
    text.extend(std::iter::repeat_n(S::zero(), d));
    comp.extend(std::iter::repeat_n(S::zero(), N_COMPETENCIES));
    let (scores, gt, gx) = model.value_and_grad(
        &Tensor::matrix(m + 2, d, text)?,
        &Tensor::matrix(m + 2, N_COMPETENCIES, comp)?,
    )?;

    let inv_m = S::one() / S::of(m as f64);
    let mut g_text = vec![S::zero(); d];
    let mut g_comp = vec![S::zero(); N_COMPETENCIES];
    for k in 0..m {
        g_text.iter_mut().zip(gt.row(k)).for_each(|(a, &g)| *a += g);
        g_comp.iter_mut().zip(gx.row(k)).for_each(|(a, &g)| *a += g);
    }
    g_text.iter_mut().for_each(|g| *g *= inv_m);
    g_comp.iter_mut().for_each(|g| *g *= inv_m);

    let inv_k = S::one() / S::of(emb.active_rows() as f64);
    let token_attribution: Vec<S> = (0..profile.bio.len().min(emb.rows))
        .map(|j| {
            if emb.mask[j] {
                emb.row(j).iter().zip(&g_text).map(|(&e, &g)| e * g).sum::<S>() * inv_k
            } else {
                S::zero()
            }
        })
        .collect();
    let competency_attribution: Vec<S> = x.iter().zip(&g_comp).map(|(&v, &g)| v * g).collect();

    let (f_input, f_baseline) = (scores[m].as_f64(), scores[m + 1].as_f64());
    let total: f64 = token_attribution
        .iter()
        .chain(&competency_attribution)
        .map(|v| v.as_f64())
        .sum();
    Ok(IgResult {
        token_attribution,
        competency_attribution,
        completeness_gap: (total - (f_input - f_baseline)).abs(),
        f_input,
        f_baseline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    pub steps: usize,
    pub per_resume_k: usize,
    pub per_group_k: usize,
    pub iterations: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            per_resume_k: 20,
            per_group_k: 30,
            iterations: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSet {
    pub gender: u8,
    pub sector: u8,
    /// `(token, number of resumes ranking it)`, most frequent first.
    pub tokens: Vec<(String, usize)>,
}

/// The eight gender × sector token sets, gender-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTokenSets {
    pub groups: Vec<GroupSet>,
}

impl GroupTokenSets {
    pub fn get(&self, gender: u8, sector: u8) -> Option<&GroupSet> {
        self.groups.iter().find(|g| g.gender == gender && g.sector == sector)
    }

    /// Union of the token sets of one gender across sectors.
    pub fn tokens_for_gender(&self, gender: u8) -> BTreeSet<&str> {
        self.groups
            .iter()
            .filter(|g| g.gender == gender)
            .flat_map(|g| g.tokens.iter().map(|t| t.0.as_str()))
            .collect()
    }

    pub fn all_tokens(&self) -> BTreeSet<&str> {
        self.groups.iter().flat_map(|g| g.tokens.iter().map(|t| t.0.as_str())).collect()
    }

    /// Fraction of the lexicon's planted proxies found in their own gender's
    /// sets.
    pub fn proxy_recovery(&self, lexicon: &Lexicon) -> f64 {
        let (mut found, mut total) = (0usize, 0usize);
        for g in 0..2 {
            let sets = self.tokens_for_gender(g);
            for p in lexicon.all_proxies(g) {
                total += 1;
                found += usize::from(sets.contains(p));
            }
        }
        if total == 0 {
            0.0
        } else {
            found as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAttribution {
    pub id: u64,
    pub token: String,
    pub position: usize,
    pub attribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mining {
    pub sets: GroupTokenSets,
    /// Each resume's top tokens by |attribution|.
    pub top: Vec<TokenAttribution>,
}

/// Top-`k` positions of one resume by |attribution|, ties by position.
fn top_positions<S: Scalar>(attr: &[S], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..attr.len()).collect();
    order.sort_by(|&a, &b| attr[b].as_f64().abs().total_cmp(&attr[a].as_f64().abs()).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// IG over every resume, keeping the `per_resume_k` most relevant tokens of
/// each; per gender × sector group, the `per_group_k` tokens most often kept
/// (function words and special tokens excluded; ties by token).
pub fn mine_group_tokens<S: Scalar, M: Attributable<S> + ?Sized>(
    model: &M,
    embedder: &Embedder<S>,
    validation: &ProfileSet,
    lexicon: &Lexicon,
    cfg: &AttributionConfig,
) -> Result<Mining> {
    if validation.is_empty() {
        return Err(Error::Data("cannot mine tokens from an empty validation set".into()));
    }
    let per_resume: Vec<Vec<TokenAttribution>> = validation
        .profiles
        .par_iter()
        .map(|p| {
            let ig = integrated_gradients(model, embedder, p, cfg.steps)?;
            Ok(top_positions(&ig.token_attribution, cfg.per_resume_k)
                .into_iter()
                .map(|pos| TokenAttribution {
                    id: p.id,
                    token: p.bio.tokens[pos].clone(),
                    position: pos,
                    attribution: ig.token_attribution[pos].as_f64(),
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut counts: BTreeMap<(u8, u8), BTreeMap<String, usize>> = BTreeMap::new();
    for (p, top) in validation.profiles.iter().zip(&per_resume) {
        let group = counts.entry((p.gender, p.sector)).or_default();
        let mut seen = HashSet::new();
        for t in top {
            let filtered = lexicon.tag(&t.token).is_some_and(|tag| tag.is_function_word());
            if is_special(&t.token) || filtered || !seen.insert(t.token.as_str()) {
                continue;
            }
            *group.entry(t.token.clone()).or_default() += 1;
        }
    }
    let mut groups = Vec::with_capacity(2 * N_SECTORS);
    for gender in 0..2u8 {
        for sector in 0..N_SECTORS as u8 {
            let mut tokens: Vec<(String, usize)> = counts
                .get(&(gender, sector))
                .map(|c| c.iter().map(|(t, &n)| (t.clone(), n)).collect())
                .unwrap_or_default();
            tokens.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            tokens.truncate(cfg.per_group_k);
            groups.push(GroupSet { gender, sector, tokens });
        }
    }
    Ok(Mining {
        sets: GroupTokenSets { groups },
        top: per_resume.into_iter().flatten().collect(),
    })
}

/// Tokens to replace with `[MASK]`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskList {
    pub tokens: BTreeSet<String>,
}

impl MaskList {
    /// Union of the group-set tokens and every name in the lexicon. Tokens
    /// outside the lexicon and special tokens are dropped.
    pub fn from_groups(sets: &GroupTokenSets, lexicon: &Lexicon) -> Self {
        let mut out = Self::default();
        out.extend(sets.all_tokens(), lexicon);
        out.extend(lexicon.all_names(), lexicon);
        out
    }

    pub fn extend<'a>(&mut self, tokens: impl IntoIterator<Item = &'a str>, lexicon: &Lexicon) {
        for t in tokens {
            if !is_special(t) && lexicon.contains(t) {
                self.tokens.insert(t.to_string());
            }
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains(token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }
}

/// Replace mask-list tokens and each profile's own name with `[MASK]`.
/// Lengths are unchanged.
pub fn apply_mask(profiles: &ProfileSet, mask: &MaskList) -> Result<ProfileSet> {
    let masked = profiles
        .profiles
        .iter()
        .map(|p| {
            let tokens = p
                .bio
                .tokens
                .iter()
                .map(|t| {
                    if t == &p.name_token || mask.contains(t) {
                        MASK.to_string()
                    } else {
                        t.clone()
                    }
                })
                .collect();
            Ok(Profile {
                bio: TokenSequence::new(tokens, p.bio.padded_len)?,
                ..p.clone()
            })
        })
        .collect::<Result<_>>()?;
    Ok(ProfileSet::new(masked))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub sets: GroupTokenSets,
    pub mask_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub iterations: Vec<IterationReport>,
    pub mask: MaskList,
    /// Per-resume top tokens from the last mining pass.
    pub top: Vec<TokenAttribution>,
}

impl AttributionReport {
    pub fn final_sets(&self) -> Option<&GroupTokenSets> {
        self.iterations.last().map(|i| &i.sets)
    }
}

/// Detect, mask and retrain `cfg.iterations` times. Each pass mines the
/// current model on the (masked) validation set, grows the mask list, and
/// trains a fresh model on the re-masked training set with `train_cfg`.
/// `baseline` skips training the first biased model when given.
pub fn mitigate_via_explainability<S: Scalar>(
    train_set: &ProfileSet,
    val_set: &ProfileSet,
    embedder: &Embedder<S>,
    lexicon: &Lexicon,
    cfg: &AttributionConfig,
    train_cfg: &TrainConfig,
    baseline: Option<ScoringModel<S>>,
) -> Result<(ScoringModel<S>, MaskList, AttributionReport)> {
    let mut model = match baseline {
        Some(m) => m,
        None => {
            let encoded = EncodedSet::encode(train_set, embedder)?;
            let mut m = ScoringModel::new(embedder.dim(), train_cfg.seed)?;
            train(&mut m, &encoded, None, train_cfg)?;
            m
        }
    };
    let mut mask = MaskList::default();
    let mut report = AttributionReport {
        iterations: Vec::new(),
        mask: MaskList::default(),
        top: Vec::new(),
    };
    let mut masked_val = val_set.clone();
    for iteration in 0..cfg.iterations {
        let mining = mine_group_tokens(&model, embedder, &masked_val, lexicon, cfg)?;
        mask.extend(MaskList::from_groups(&mining.sets, lexicon).tokens.iter().map(String::as_str), lexicon);
        let masked_train = apply_mask(train_set, &mask)?;
        masked_val = apply_mask(val_set, &mask)?;
        let encoded = EncodedSet::encode(&masked_train, embedder)?;
        model = ScoringModel::new(embedder.dim(), train_cfg.seed)?;
        train(&mut model, &encoded, None, train_cfg)?;
        report.iterations.push(IterationReport {
            iteration: iteration + 1,
            sets: mining.sets,
            mask_size: mask.len(),
        });
        report.top = mining.top;
    }
    report.mask = mask.clone();
    Ok((model, mask, report))
}
