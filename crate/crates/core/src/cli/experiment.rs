use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::adversarial::{adversarial_train, probe_latents, AdversaryHead};
use crate::attribution::{apply_mask, mitigate_via_explainability, AttributionReport, MaskList, TokenAttribution};
use crate::datagen::{generate_profiles_with, split, Lexicon, ProfileSet, Target};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::fairness::{audit, FairnessReport, TABLE_HEADER};
use crate::projection::{knn_agreement, project_latents, Projection};
use crate::scoring::{train, EncodedSet, History, ScoringModel, TrainConfig, HIDDEN1};

pub const EMBEDDER_LABEL: &str = "hashing";
pub const KNN_K: usize = 10;

/// Output directory whose files are written once: rewriting a file with
/// different bytes is refused.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        if path.exists() && fs::read(&path)? != bytes {
            return Err(Error::State(format!(
                "{} already exists with different contents; use a fresh --out directory",
                path.display()
            )));
        }
        fs::write(&path, bytes)?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(rel, text.as_bytes())
    }

    pub fn write_checkpoint(&mut self, rel: &str, ckpt: &crate::gradengine::Checkpoint) -> Result<PathBuf> {
        self.write_json(rel, ckpt)
    }

    /// `manifest.json` listing every file written so far with its SHA-256.
    pub fn write_manifest(&mut self) -> Result<PathBuf> {
        let entries: Vec<_> = self.files.iter().map(|(p, h)| json!({"path": p, "sha256": h})).collect();
        let text = serde_json::to_string_pretty(&json!({ "files": entries }))? + "\n";
        let path = self.root.join("manifest.json");
        fs::write(&path, text)?;
        Ok(path)
    }
}

pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn attributions_csv(top: &[TokenAttribution]) -> Result<Vec<u8>> {
    let rows: Vec<Vec<String>> = top
        .iter()
        .map(|t| vec![t.id.to_string(), t.token.clone(), t.position.to_string(), t.attribution.to_string()])
        .collect();
    csv_bytes(&["id", "token", "position", "attribution"], &rows)
}

pub fn projection_csv(p: &Projection) -> Result<Vec<u8>> {
    let rows: Vec<Vec<String>> = p
        .rows
        .iter()
        .map(|r| vec![r.id.to_string(), r.gender.to_string(), r.sector.to_string(), r.x.to_string(), r.y.to_string()])
        .collect();
    csv_bytes(&["id", "gender", "sector", "x", "y"], &rows)
}

pub fn report_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let body: Vec<Vec<String>> = rows.iter().map(|r| r.report.table_row(&r.model, &r.method)).collect();
    csv_bytes(&TABLE_HEADER, &body)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub model: String,
    pub method: String,
    pub report: FairnessReport,
}

/// Profiles, split and encoded features of one run.
pub struct Data {
    pub lexicon: Lexicon,
    pub embedder: Embedder<f64>,
    pub all: ProfileSet,
    pub train: ProfileSet,
    pub val: ProfileSet,
    pub enc_train: EncodedSet<f64>,
    pub enc_val: EncodedSet<f64>,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Data> {
    let lexicon = Lexicon::builtin();
    let all = generate_profiles_with(&cfg.datagen, &lexicon)?;
    let (train, val) = split(&all, cfg.val_fraction, cfg.split_seed())?;
    let embedder = Embedder::from_config(&cfg.embedder, &lexicon)?;
    let enc_train = EncodedSet::encode(&train, &embedder)?;
    let enc_val = EncodedSet::encode(&val, &embedder)?;
    Ok(Data {
        lexicon,
        embedder,
        all,
        train,
        val,
        enc_train,
        enc_val,
    })
}

pub fn train_config(cfg: &RunConfig, target: Target) -> TrainConfig {
    TrainConfig {
        target,
        ..cfg.train.clone()
    }
}

pub fn model_meta(cfg: &RunConfig, method: &str) -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([
        ("method".to_string(), method.into()),
        ("seed".to_string(), cfg.seed.into()),
        ("train_seed".to_string(), cfg.train.seed.into()),
    ])
}

pub fn train_model(data: &Data, cfg: &TrainConfig) -> Result<(ScoringModel<f64>, History)> {
    let mut model = ScoringModel::new(data.embedder.dim(), cfg.seed)?;
    let history = train(&mut model, &data.enc_train, Some(&data.enc_val), cfg)?;
    Ok((model, history))
}

pub struct Approach1 {
    pub model: ScoringModel<f64>,
    pub mask: MaskList,
    pub report: AttributionReport,
    pub enc_val: EncodedSet<f64>,
}

pub fn run_approach1(data: &Data, cfg: &RunConfig, baseline: &ScoringModel<f64>) -> Result<Approach1> {
    let tc = train_config(cfg, Target::Biased);
    let (model, mask, report) = mitigate_via_explainability(
        &data.train,
        &data.val,
        &data.embedder,
        &data.lexicon,
        &cfg.attribution,
        &tc,
        Some(baseline.clone()),
    )?;
    let enc_val = EncodedSet::encode(&apply_mask(&data.val, &mask)?, &data.embedder)?;
    Ok(Approach1 {
        model,
        mask,
        report,
        enc_val,
    })
}

pub struct Approach2 {
    pub model: ScoringModel<f64>,
    pub adversary: AdversaryHead<f64>,
    pub history: History,
}

pub fn run_approach2(data: &Data, cfg: &RunConfig) -> Result<Approach2> {
    let tc = train_config(cfg, Target::Biased);
    let mut model = ScoringModel::new(data.embedder.dim(), tc.seed)?;
    let mut adversary = AdversaryHead::new(HIDDEN1, tc.seed)?;
    let history = adversarial_train(
        &mut model,
        &mut adversary,
        &data.enc_train,
        Some(&data.enc_val),
        &cfg.adversarial,
        &tc,
    )?;
    Ok(Approach2 {
        model,
        adversary,
        history,
    })
}

/// Everything the comparison grid produces.
pub struct Experiment {
    pub data: Data,
    pub unbiased: ScoringModel<f64>,
    pub biased: ScoringModel<f64>,
    pub history_unbiased: History,
    pub history_biased: History,
    pub approach1: Approach1,
    pub approach2: Approach2,
    pub rows: Vec<ReportRow>,
    pub probes: BTreeMap<String, f64>,
    pub proxy_recovery: f64,
    pub projection_unbiased: Projection,
    pub projection_biased: Projection,
    pub knn_gender_unbiased: f64,
    pub knn_gender_biased: f64,
}

impl Experiment {
    pub fn row(&self, method: &str) -> Option<&FairnessReport> {
        self.rows.iter().find(|r| r.method == method).map(|r| &r.report)
    }
}

fn knn_gender(p: &Projection) -> Result<f64> {
    let coords: Vec<[f64; 2]> = p.rows.iter().map(|r| [r.x, r.y]).collect();
    let genders: Vec<u8> = p.rows.iter().map(|r| r.gender).collect();
    knn_agreement(&coords, &genders, KNN_K)
}

/// The unbiased / biased / approach-1 / approach-2 grid. The biased model is
/// the baseline of both mitigations. Artifacts go under `out` when given.
pub fn run_experiment(cfg: &RunConfig, out: Option<&Path>) -> Result<Experiment> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;

    let ((unbiased, biased), approach2) = rayon::join(
        || {
            rayon::join(
                || train_model(&data, &train_config(cfg, Target::Blind)),
                || train_model(&data, &train_config(cfg, Target::Biased)),
            )
        },
        || run_approach2(&data, cfg),
    );
    let ((unbiased, history_unbiased), (biased, history_biased)) = (unbiased?, biased?);
    let approach2 = approach2?;
    let approach1 = run_approach1(&data, cfg, &biased)?;

    let rows = vec![
        ReportRow {
            model: EMBEDDER_LABEL.into(),
            method: "unbiased".into(),
            report: audit(&unbiased, &data.enc_val, &cfg.audit)?,
        },
        ReportRow {
            model: EMBEDDER_LABEL.into(),
            method: "biased".into(),
            report: audit(&biased, &data.enc_val, &cfg.audit)?,
        },
        ReportRow {
            model: EMBEDDER_LABEL.into(),
            method: "approach-1".into(),
            report: audit(&approach1.model, &approach1.enc_val, &cfg.audit)?,
        },
        ReportRow {
            model: EMBEDDER_LABEL.into(),
            method: "approach-2".into(),
            report: audit(&approach2.model, &data.enc_val, &cfg.audit)?,
        },
    ];

    let probes = BTreeMap::from([
        ("unbiased".to_string(), probe_latents(&unbiased, &data.enc_val, &cfg.probe)?),
        ("biased".to_string(), probe_latents(&biased, &data.enc_val, &cfg.probe)?),
        ("approach-2".to_string(), probe_latents(&approach2.model, &data.enc_val, &cfg.probe)?),
    ]);
    let proxy_recovery = approach1
        .report
        .final_sets()
        .map_or(0.0, |s| s.proxy_recovery(&data.lexicon));

    let (pu, pb) = rayon::join(
        || project_latents(&unbiased, &data.enc_val, &cfg.projection),
        || project_latents(&biased, &data.enc_val, &cfg.projection),
    );
    let (projection_unbiased, projection_biased) = (pu?, pb?);

    let exp = Experiment {
        knn_gender_unbiased: knn_gender(&projection_unbiased)?,
        knn_gender_biased: knn_gender(&projection_biased)?,
        data,
        unbiased,
        biased,
        history_unbiased,
        history_biased,
        approach1,
        approach2,
        rows,
        probes,
        proxy_recovery,
        projection_unbiased,
        projection_biased,
    };
    if let Some(dir) = out {
        write_experiment(&exp, cfg, dir)?;
    }
    Ok(exp)
}

fn write_experiment(exp: &Experiment, cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut run = RunDir::create(dir)?;
    run.write("resolved_config.json", cfg.to_json()?.as_bytes())?;
    run.write("data/dataset.jsonl", exp.data.all.to_jsonl()?.as_bytes())?;
    run.write("data/train.jsonl", exp.data.train.to_jsonl()?.as_bytes())?;
    run.write("data/val.jsonl", exp.data.val.to_jsonl()?.as_bytes())?;

    let models = [
        ("unbiased", &exp.unbiased),
        ("biased", &exp.biased),
        ("approach-1", &exp.approach1.model),
        ("approach-2", &exp.approach2.model),
    ];
    for (method, model) in models {
        run.write_checkpoint(&format!("models/scoring_{method}.json"), &model.to_checkpoint(model_meta(cfg, method)))?;
    }
    run.write_checkpoint(
        "models/adversary_approach-2.json",
        &exp.approach2.adversary.to_checkpoint(model_meta(cfg, "approach-2")),
    )?;
    run.write("histories/unbiased.csv", exp.history_unbiased.to_csv(false).as_bytes())?;
    run.write("histories/biased.csv", exp.history_biased.to_csv(false).as_bytes())?;
    run.write("histories/approach-2.csv", exp.approach2.history.to_csv(true).as_bytes())?;

    if let Some(sets) = exp.approach1.report.final_sets() {
        run.write_json("attribution/group_sets.json", sets)?;
    }
    run.write("attribution/attributions.csv", &attributions_csv(&exp.approach1.report.top)?)?;
    run.write("attribution/mask.txt", exp.approach1.mask.to_text().as_bytes())?;

    for r in &exp.rows {
        run.write_json(&format!("audit/{}.json", r.method), &r.report)?;
    }
    run.write_json("probe.json", &exp.probes)?;
    for (name, p) in [("unbiased", &exp.projection_unbiased), ("biased", &exp.projection_biased)] {
        run.write(&format!("projection/{name}.csv"), &projection_csv(p)?)?;
        run.write_json(
            &format!("projection/{name}_meta.json"),
            &json!({"config": p.config, "final_objective": p.final_objective, "objectives": p.objectives}),
        )?;
    }
    run.write_json(
        "summary.json",
        &json!({
            "proxy_recovery": exp.proxy_recovery,
            "knn_gender_agreement": {"unbiased": exp.knn_gender_unbiased, "biased": exp.knn_gender_biased},
            "probe_accuracy": exp.probes,
        }),
    )?;
    run.write("report.csv", &report_csv(&exp.rows)?)?;
    run.write_manifest()?;
    Ok(())
}
