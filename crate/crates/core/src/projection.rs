//! Exact t-SNE and latent-space projection.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradengine::Tensor;
use crate::scalar::Scalar;
use crate::scoring::{EncodedSet, ScoringModel};
use crate::seed;

const ENTROPY_TOL: f64 = 1e-5;
const MAX_BISECTION: usize = 50;
const MIN_GAIN: f64 = 0.01;
const INIT_STD: f64 = 1e-4;
const LOG_EVERY: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub seed: u64,
    /// Profiles drawn by `project_latents`.
    pub sample_size: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            seed: 0,
            sample_size: 1000,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if n < 10 {
            return Err(Error::Config(format!("t-SNE needs at least 10 points, got {n}")));
        }
        if !(self.perplexity > 1.0) || self.perplexity * 3.0 >= n as f64 {
            return Err(Error::Config(format!(
                "perplexity {} must be in (1, n/3) for n = {n}",
                self.perplexity
            )));
        }
        if self.iterations <= self.exaggeration_iters {
            return Err(Error::Config("iterations must exceed the exaggeration span".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    /// `n` rows of `[x, y]`, centred at the origin.
    pub coords: Vec<[f64; 2]>,
    /// `(iteration, KL(P ‖ Q))` pairs, unexaggerated.
    pub objectives: Vec<(usize, f64)>,
}

impl TsneResult {
    pub fn final_objective(&self) -> f64 {
        self.objectives.last().map_or(f64::NAN, |o| o.1)
    }

    pub fn objective_at(&self, iteration: usize) -> Option<f64> {
        self.objectives.iter().find(|o| o.0 == iteration).map(|o| o.1)
    }
}

fn squared_distances(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    d.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    });
    d
}

/// Gaussian conditional distribution of row `i` at precision `beta`, with its
/// entropy in nats. Distances are shifted by their minimum for stability.
fn conditional_row(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    let mut weighted = 0.0;
    for (j, (&d, p)) in dist.iter().zip(out.iter_mut()).enumerate() {
        *p = if j == i { 0.0 } else { (-(d - dmin) * beta).exp() };
        z += *p;
        weighted += (d - dmin) * *p;
    }
    for p in out.iter_mut() {
        *p /= z;
    }
    z.ln() + beta * weighted / z
}

/// Row-stochastic conditional affinities `p(j | i)` (row-major `n × n`), with
/// each bandwidth bisected to match `perplexity`.
pub fn conditional_affinities(points: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = points.len();
    let dist = squared_distances(points);
    if dist.iter().all(|&d| d == 0.0) {
        return Err(Error::Numeric("t-SNE input points are all identical".into()));
    }
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    p.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let d = &dist[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        for _ in 0..MAX_BISECTION {
            let h = conditional_row(d, i, beta, row);
            if (h - target).abs() < ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        conditional_row(d, i, beta, row);
    });
    Ok(p)
}

/// Symmetrised joint affinities `(p(j|i) + p(i|j)) / 2n`, summing to 1.
pub fn joint_affinities(points: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = points.len();
    let cond = conditional_affinities(points, perplexity)?;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(p)
}

fn student_t(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    num.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            if i != j {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                *v = 1.0 / (1.0 + dx * dx + dy * dy);
            }
        }
    });
    // Fixed-order reduction keeps the result independent of thread count.
    let z = num.chunks(n).map(|r| r.iter().sum::<f64>()).sum();
    (num, z)
}

fn kl_objective(p: &[f64], num: &[f64], z: f64) -> f64 {
    p.iter()
        .zip(num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| pij * (pij / (nij / z).max(1e-300)).ln())
        .sum()
}

/// Exact t-SNE of the rows of `points`.
pub fn tsne(points: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = points.len();
    cfg.validate(n)?;
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("t-SNE input contains non-finite values".into()));
    }
    let p = joint_affinities(points, cfg.perplexity)?;

    let mut rng = seed::rng_from(&[cfg.seed, seed::TSNE]);
    let normal = Normal::new(0.0, INIT_STD).map_err(|e| Error::Config(e.to_string()))?;
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut objectives = Vec::new();

    for iter in 0..cfg.iterations {
        let early = iter < cfg.exaggeration_iters;
        let exaggeration = if early { cfg.early_exaggeration } else { 1.0 };
        let momentum = if early { cfg.momentum_initial } else { cfg.momentum_final };
        let (num, z) = student_t(&y);

        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    let nij = num[i * n + j];
                    let m = (exaggeration * p[i * n + j] - nij / z) * nij;
                    g[0] += m * (y[i][0] - y[j][0]);
                    g[1] += m * (y[i][1] - y[j][1]);
                }
                [4.0 * g[0], 4.0 * g[1]]
            })
            .collect();

        for i in 0..n {
            for d in 0..2 {
                gains[i][d] = if (grad[i][d] > 0.0) != (update[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(MIN_GAIN)
                };
                update[i][d] = momentum * update[i][d] - cfg.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        }
        let mean = y.iter().fold([0.0; 2], |a, r| [a[0] + r[0], a[1] + r[1]]);
        for r in &mut y {
            r[0] -= mean[0] / n as f64;
            r[1] -= mean[1] / n as f64;
        }

        let done = iter + 1;
        if done % LOG_EVERY == 0 || done == cfg.exaggeration_iters || done == cfg.iterations {
            let (num, z) = student_t(&y);
            let kl = kl_objective(&p, &num, z);
            if !kl.is_finite() {
                return Err(Error::Numeric(format!("t-SNE objective became {kl} at iteration {done}")));
            }
            if objectives.last().map(|o: &(usize, f64)| o.0) != Some(done) {
                objectives.push((done, kl));
            }
        }
    }
    Ok(TsneResult { coords: y, objectives })
}

/// Mean fraction of each point's `k` nearest neighbours (Euclidean, ties by
/// index) sharing its label.
pub fn knn_agreement(coords: &[[f64; 2]], labels: &[u8], k: usize) -> Result<f64> {
    let n = coords.len();
    if labels.len() != n {
        return Err(Error::Shape("coords and labels differ in length".into()));
    }
    if k == 0 || k >= n {
        return Err(Error::Config(format!("k = {k} must be in 1..{n}")));
    }
    let agree: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let dx = coords[i][0] - coords[j][0];
                    let dy = coords[i][1] - coords[j][1];
                    (dx * dx + dy * dy, j)
                })
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others[..k].iter().filter(|&&(_, j)| labels[j] == labels[i]).count() as f64 / k as f64
        })
        .collect();
    Ok(agree.iter().sum::<f64>() / n as f64)
}

/// Row indices of a seeded sample stratified by gender × sector. Strata get
/// shares proportional to their size; returned indices are ascending.
pub fn stratified_sample(genders: &[u8], sectors: &[u8], size: usize, seed_: u64) -> Vec<usize> {
    let n = genders.len();
    if size >= n {
        return (0..n).collect();
    }
    let mut strata: std::collections::BTreeMap<(u8, u8), Vec<usize>> = Default::default();
    for i in 0..n {
        strata.entry((genders[i], sectors[i])).or_default().push(i);
    }
    let mut quotas: Vec<usize> = strata.values().map(|v| v.len() * size / n).collect();
    let mut left = size - quotas.iter().sum::<usize>();
    for (q, members) in quotas.iter_mut().zip(strata.values()) {
        if left == 0 {
            break;
        }
        if *q < members.len() {
            *q += 1;
            left -= 1;
        }
    }
    let mut out = Vec::with_capacity(size);
    for (((g, s), mut members), q) in strata.into_iter().zip(quotas) {
        members.shuffle(&mut seed::rng_from(&[seed_, seed::SAMPLE, u64::from(g), u64::from(s)]));
        out.extend_from_slice(&members[..q]);
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedRow {
    pub id: u64,
    pub gender: u8,
    pub sector: u8,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub rows: Vec<ProjectedRow>,
    pub config: TsneConfig,
    pub objectives: Vec<(usize, f64)>,
    pub final_objective: f64,
}

/// Latents of a stratified sample of `set`, embedded in 2-D with
/// annotations attached.
pub fn project_latents<S: Scalar>(model: &ScoringModel<S>, set: &EncodedSet<S>, cfg: &TsneConfig) -> Result<Projection> {
    let rows = stratified_sample(&set.genders, &set.sectors, cfg.sample_size, cfg.seed);
    let sample = set.select(&rows);
    let h = model.latents(&sample)?;
    let result = tsne(&tensor_to_rows(&h), cfg)?;
    let out = result
        .coords
        .iter()
        .enumerate()
        .map(|(i, c)| ProjectedRow {
            id: sample.ids[i],
            gender: sample.genders[i],
            sector: sample.sectors[i],
            x: c[0],
            y: c[1],
        })
        .collect();
    Ok(Projection {
        rows: out,
        config: cfg.clone(),
        final_objective: result.final_objective(),
        objectives: result.objectives,
    })
}

pub fn tensor_to_rows<S: Scalar>(t: &Tensor<S>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|v| v.as_f64()).collect()).collect()
}
