//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! The experiment-based criteria use the full 24000-profile dataset over
//! three seeds. Set `FAIRPIPE_ACCEPTANCE_QUICK=1` for the 4000-profile,
//! K = 100 variant.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{median, network_case, primitive_case, FD_TOLERANCE, NETWORKS, PRIMITIVES};
use fairpipe::attribution::{integrated_gradients, LinearScorer};
use fairpipe::cli::config::{Overrides, RunConfig};
use fairpipe::cli::experiment::{run_experiment, Experiment, KNN_K};
use fairpipe::datagen::N_COMPETENCIES;
use fairpipe::fairness::{group_recall, kl_divergence, proportions_and_ratio, FairnessReport};
use fairpipe::projection::{knn_agreement, tsne, TsneConfig};
use fairpipe::seed::rng_from;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

const SEEDS: [u64; 3] = [1, 2, 3];
const FD_TRIALS: u64 = 100;
const IG_RESUMES: usize = 100;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let line = format!(
        "criterion {}: {} {}\n",
        v.id,
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    );
    // Direct write so the line shows even when the harness captures output.
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn quick() -> bool {
    std::env::var("FAIRPIPE_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1")
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_name = "";
    let cases = PRIMITIVES
        .iter()
        .map(|&n| (n, primitive_case as fn(&str, u64) -> common::Case))
        .chain(NETWORKS.iter().map(|&n| (n, network_case as fn(&str, u64) -> common::Case)));
    for (name, make) in cases {
        for t in 0..FD_TRIALS {
            let e = make(name, t).max_error();
            if e > worst {
                (worst, worst_name) = (e, name);
            }
        }
    }
    let elapsed = start.elapsed();
    Verdict {
        id: 1,
        pass: worst <= FD_TOLERANCE && elapsed < Duration::from_secs(60),
        detail: format!(
            "max relative error {worst:.2e} ({worst_name}) over {} primitives and {} networks x {FD_TRIALS} trials in {:.1}s",
            PRIMITIVES.len(),
            NETWORKS.len(),
            elapsed.as_secs_f64()
        ),
    }
}

fn ig_axioms(exp: &Experiment) -> Verdict {
    let data = &exp.data;
    let dim = data.embedder.dim();

    let mut linear_err = 0.0f64;
    for t in 0..20u64 {
        let mut rng = rng_from(&[0x11, t]);
        let lin = LinearScorer {
            w_text: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            w_comp: (0..N_COMPETENCIES).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: rng.random_range(-1.0..1.0),
        };
        let p = &data.val.profiles[t as usize];
        let emb = data.embedder.embed_sequence(p.id, &p.bio).unwrap();
        let k = emb.active_rows() as f64;
        let ig = integrated_gradients(&lin, &data.embedder, p, 2 + t as usize).unwrap();
        for (j, &a) in ig.token_attribution.iter().enumerate() {
            let direct: f64 = emb.row(j).iter().zip(&lin.w_text).map(|(u, w)| u * w / k).sum();
            linear_err = linear_err.max((a - direct).abs());
        }
        for (i, &a) in ig.competency_attribution.iter().enumerate() {
            linear_err = linear_err.max((a - p.competencies[i] * lin.w_comp[i]).abs());
        }
    }

    let model = &exp.biased;
    let step = data.val.profiles.len() / IG_RESUMES;
    let results: Vec<(bool, bool)> = (0..IG_RESUMES)
        .into_par_iter()
        .map(|i| {
            let p = &data.val.profiles[i * step];
            let runs: Vec<_> = [25, 50, 200]
                .iter()
                .map(|&m| integrated_gradients(model, &data.embedder, p, m).unwrap())
                .collect();
            let gaps: Vec<f64> = runs.iter().map(|r| r.completeness_gap).collect();
            let fine = &runs[2];
            let bound = 1e-3 * (fine.f_input - fine.f_baseline).abs() + 1e-6;
            let slack = 1e-12;
            let monotone = gaps[0] + slack >= gaps[1] && gaps[1] + slack >= gaps[2];
            (fine.completeness_gap <= bound, monotone)
        })
        .collect();
    let within = results.iter().filter(|r| r.0).count();
    let monotone = results.iter().filter(|r| r.1).count();
    Verdict {
        id: 2,
        pass: linear_err <= 1e-10 && within == IG_RESUMES && monotone * 100 >= 95 * IG_RESUMES,
        detail: format!(
            "linear exactness error {linear_err:.1e}; completeness bound met on {within}/{IG_RESUMES}; gap non-increasing on {monotone}/{IG_RESUMES}"
        ),
    }
}

fn rows<'a>(exps: &'a [Experiment], method: &str) -> Vec<&'a FairnessReport> {
    exps.iter().map(|e| e.row(method).unwrap()).collect()
}

fn med(reports: &[&FairnessReport], f: impl Fn(&FairnessReport) -> f64) -> f64 {
    median(reports.iter().map(|r| f(r)).collect())
}

fn bias_learning(exps: &[Experiment], slowest: Duration) -> Verdict {
    let (u, b) = (rows(exps, "unbiased"), rows(exps, "biased"));
    let (u_ratio, u_kl) = (med(&u, |r| r.ratio), med(&u, |r| r.d_kl));
    let (b_ratio, b_kl) = (med(&b, |r| r.ratio), med(&b, |r| r.d_kl));
    let (b_rm, b_rf) = (med(&b, |r| r.recall_m), med(&b, |r| r.recall_f));
    let limit = Duration::from_secs(if quick() { 600 } else { 3600 });
    Verdict {
        id: 3,
        pass: u_ratio >= 0.9
            && u_kl <= 0.05
            && b_ratio < 0.8
            && b_kl >= 0.1
            && b_rf <= b_rm - 10.0
            && slowest < limit,
        detail: format!(
            "unbiased ratio {u_ratio:.3} D_KL {u_kl:.4}; biased ratio {b_ratio:.3} D_KL {b_kl:.4} recall M/F {b_rm:.1}/{b_rf:.1}; slowest run {:.0}s",
            slowest.as_secs_f64()
        ),
    }
}

fn approach1(exps: &[Experiment]) -> Verdict {
    let a = rows(exps, "approach-1");
    let (ratio, kl) = (med(&a, |r| r.ratio), med(&a, |r| r.d_kl));
    let recovery = median(exps.iter().map(|e| e.proxy_recovery).collect());
    Verdict {
        id: 4,
        pass: ratio >= 0.9 && kl <= 0.05 && recovery >= 0.8,
        detail: format!("ratio {ratio:.3} D_KL {kl:.4} proxy recovery {recovery:.3}"),
    }
}

fn approach2(exps: &[Experiment]) -> Verdict {
    let (a, b) = (rows(exps, "approach-2"), rows(exps, "biased"));
    let (ratio, kl) = (med(&a, |r| r.ratio), med(&a, |r| r.d_kl));
    let (recall, b_recall) = (med(&a, |r| r.recall_overall), med(&b, |r| r.recall_overall));
    let probe = |k: &str| median(exps.iter().map(|e| e.probes[k]).collect());
    let (p_b, p_a) = (probe("biased"), probe("approach-2"));
    let checks = [
        ("ratio", ratio >= 0.8),
        ("D_KL", kl <= 0.08),
        ("recall", recall >= b_recall),
        ("probe drop", p_b - p_a >= 0.20),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let suffix = if failed.is_empty() {
        String::new()
    } else {
        format!("; failing: {}", failed.join(", "))
    };
    Verdict {
        id: 5,
        pass: failed.is_empty(),
        detail: format!(
            "ratio {ratio:.3} D_KL {kl:.4} recall {recall:.1} (biased {b_recall:.1}) probe {p_a:.3} vs biased {p_b:.3}{suffix}"
        ),
    }
}

fn round_to(v: f64, places: i32) -> f64 {
    let s = 10f64.powi(places);
    (v * s).round() / s
}

fn genders(m: usize, f: usize) -> (Vec<u64>, HashMap<u64, u8>) {
    let ids: Vec<u64> = (0..(m + f) as u64).collect();
    let map = ids.iter().map(|&i| (i, u8::from(i as usize >= m))).collect();
    (ids, map)
}

fn fairness_arithmetic() -> Verdict {
    let (ids, map) = genders(347, 153);
    let p = proportions_and_ratio(&ids, &map).unwrap();
    // 153/347 = 0.44092, quoted to three places.
    let props_ok = round_to(p.prop_m, 4) == 69.4
        && round_to(p.prop_f, 4) == 30.6
        && round_to(p.ratio, 4) == round_to(153.0 / 347.0, 4)
        && round_to(p.ratio, 3) == 0.441;

    let (truth, map) = genders(250, 250);
    let pred: Vec<u64> = (0..219u64).chain(250..250 + 137).collect();
    let r = group_recall(&pred, &truth, &map).unwrap();
    let recall_ok = round_to(r.recall_m, 4) == 87.6
        && round_to(r.recall_f, 4) == 54.8
        && round_to(r.recall_overall, 4) == 71.2;

    let kl = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
    let kl_ok = round_to(kl, 4) == 0.1438;
    Verdict {
        id: 6,
        pass: props_ok && recall_ok && kl_ok,
        detail: format!(
            "proportions {:.1}/{:.1} ratio {:.4}; recall {:.1}/{:.1}/{:.1}; two-bin KL {kl:.4}",
            p.prop_m, p.prop_f, p.ratio, r.recall_m, r.recall_f, r.recall_overall
        ),
    }
}

fn tsne_sanity(exps: &[Experiment]) -> Verdict {
    let mut rng = rng_from(&[0x75, 0xE]);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let dim = 300;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for i in 0..150 {
        let c = i % 3;
        // Centres e_c / sqrt(2) are pairwise 1 apart.
        let p: Vec<f64> = (0..dim)
            .map(|d| if d == c { std::f64::consts::FRAC_1_SQRT_2 } else { 0.0 } + noise.sample(&mut rng))
            .collect();
        points.push(p);
        labels.push(c as u8);
    }
    // Point 150 duplicates point 7.
    points.push(points[7].clone());
    labels.push(labels[7]);
    let clusters = tsne(&points, &TsneConfig::default()).unwrap();
    let agreement = knn_agreement(&clusters.coords, &labels, KNN_K).unwrap();
    let (a, b) = (clusters.coords[7], clusters.coords[150]);
    let dup_dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();

    let gap = median(exps.iter().map(|e| e.knn_gender_biased - e.knn_gender_unbiased).collect());
    let unbiased = median(exps.iter().map(|e| e.knn_gender_unbiased).collect());
    let biased = median(exps.iter().map(|e| e.knn_gender_biased).collect());
    Verdict {
        id: 7,
        pass: agreement >= 0.9 && dup_dist <= 1e-3 && gap >= 0.15,
        detail: format!(
            "cluster {KNN_K}-NN agreement {agreement:.3}; duplicate distance {dup_dist:.1e}; gender {KNN_K}-NN biased {biased:.3} vs unbiased {unbiased:.3} (median gap {gap:.3})"
        ),
    }
}

fn repro(out: &Path, seed: u64) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fairpipe"));
    for (key, _) in std::env::vars().filter(|(k, _)| k.starts_with("FAIRPIPE_")) {
        cmd.env_remove(key);
    }
    let status = cmd
        .args(["repro", "--quick", "--seed", &seed.to_string(), "--out"])
        .arg(out)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("binary runs");
    assert!(status.success(), "repro failed");
}

fn files_under(dir: &Path, sub: &str) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir.join(sub))
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .map(|e| format!("{sub}/{}", e.file_name().to_string_lossy()))
                .collect()
        })
        .unwrap_or_default();
    names.sort();
    names
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    repro(&a, 5);
    repro(&b, 5);
    let mut files = files_under(&a, "data");
    files.extend(files_under(&a, "models"));
    files.extend(files_under(&a, "audit"));
    files.push("report.csv".into());
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
        .collect();
    Verdict {
        id: 8,
        pass: files.len() > 1 && differing.is_empty(),
        detail: format!("{} files compared, {} differ {differing:?}", files.len(), differing.len()),
    }
}

fn experiment(seed: u64) -> (Experiment, Duration) {
    let ov = Overrides {
        seed: Some(seed),
        quick: quick(),
        ..Overrides::default()
    };
    let cfg = RunConfig::resolve(None, &ov).unwrap();
    let start = Instant::now();
    let exp = run_experiment(&cfg, None).unwrap();
    (exp, start.elapsed())
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = vec![gradients(), fairness_arithmetic()];
    verdicts.iter().for_each(report);

    let runs: Vec<(Experiment, Duration)> = SEEDS.par_iter().map(|&s| experiment(s)).collect();
    let slowest = runs.iter().map(|r| r.1).max().unwrap();
    let exps: Vec<Experiment> = runs.into_iter().map(|r| r.0).collect();

    for v in [
        ig_axioms(&exps[0]),
        bias_learning(&exps, slowest),
        approach1(&exps),
        approach2(&exps),
        tsne_sanity(&exps),
        determinism(),
    ] {
        report(&v);
        verdicts.push(v);
    }

    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
