//! The `fairpipe` command line.
//!
//! Every subcommand resolves a [`RunConfig`] (defaults, `--config`,
//! `--quick`, `FAIRPIPE_*` environment variables, `--seed`, `--out`), writes
//! it as `resolved_config.json` into the output directory, and then does its
//! work there. Exit codes: 0 success, 1 validation error, 2 runtime failure.

pub mod config;
pub mod experiment;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{Overrides, RunConfig};
pub use experiment::{run_experiment, Experiment, ReportRow, RunDir};

use crate::adversarial::{probe_latents, AdversaryHead};
use crate::attribution::{apply_mask, mine_group_tokens, mitigate_via_explainability};
use crate::datagen::{generate_profiles_with, split, Lexicon, ProfileSet, Target};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::fairness::{audit, TABLE_HEADER};
use crate::projection::project_latents;
use crate::scoring::{train, EncodedSet, ScoringModel, HIDDEN1};
use experiment::{attributions_csv, csv_bytes, model_meta, projection_csv, train_config};

pub const DEFAULT_OUT: &str = "fairpipe-out";

#[derive(Debug, Parser)]
#[command(name = "fairpipe", version, about = "Measure and mitigate gender bias in a resume-scoring model")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; per-stage seeds are derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Desk-scale run: 4000 profiles, K = 100.
    #[arg(long, global = true)]
    pub quick: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Directory holding train.jsonl and val.jsonl (default: the output directory).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArg {
    /// Scoring checkpoint.
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the dataset and its train/validation split.
    Gen,
    /// Train a scoring model.
    Train {
        #[command(flatten)]
        data: DataArg,
        /// blind (alias unbiased) or biased; defaults to the config.
        #[arg(long)]
        target: Option<String>,
    },
    /// Audit a model on the validation set.
    Audit {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelArg,
        /// Method label of the report row (default: from the checkpoint).
        #[arg(long)]
        method: Option<String>,
        /// Mask list applied to the validation set before scoring.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Mine proxy tokens with Integrated Gradients.
    Explain {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Detect, mask and retrain (Approach 1).
    MaskRetrain {
        #[command(flatten)]
        data: DataArg,
        /// Biased baseline checkpoint; trained from scratch when absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Adversarial training against a gender classifier (Approach 2).
    AdvTrain {
        #[command(flatten)]
        data: DataArg,
    },
    /// Held-out accuracy of a gender probe on a model's latents.
    Probe {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelArg,
    },
    /// t-SNE of a model's latents.
    Project {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Merge audit CSV rows into one comparison table.
    Report {
        /// Audit CSV files, or directories holding report.csv or audit.csv.
        inputs: Vec<PathBuf>,
    },
    /// Run the full comparison grid.
    Repro,
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let ov = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        quick: cli.quick,
        env: Vec::new(),
    }
    .with_process_env();
    RunConfig::resolve(cli.config.as_deref(), &ov)
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("missing input file {}", path.display())))
    }
}

struct Inputs {
    lexicon: Lexicon,
    embedder: Embedder<f64>,
    train: ProfileSet,
    val: ProfileSet,
}

fn load_inputs(cfg: &RunConfig, dir: &Path) -> Result<Inputs> {
    let (tp, vp) = (dir.join("train.jsonl"), dir.join("val.jsonl"));
    require_file(&tp)?;
    require_file(&vp)?;
    let lexicon = Lexicon::builtin();
    Ok(Inputs {
        embedder: Embedder::from_config(&cfg.embedder, &lexicon)?,
        lexicon,
        train: ProfileSet::load_jsonl(&tp)?,
        val: ProfileSet::load_jsonl(&vp)?,
    })
}

fn load_model(path: &Path) -> Result<ScoringModel<f64>> {
    require_file(path)?;
    ScoringModel::load(path)
}

fn checkpoint_method(path: &Path) -> Option<String> {
    let ckpt = crate::gradengine::Checkpoint::load(path).ok()?;
    ckpt.meta.get("method")?.as_str().map(str::to_string)
}

fn load_mask(path: &Path, lexicon: &Lexicon) -> Result<crate::attribution::MaskList> {
    require_file(path)?;
    let text = std::fs::read_to_string(path)?;
    let mut mask = crate::attribution::MaskList::default();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if !lexicon.contains(t) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("`{t}` is not a lexicon token"),
            });
        }
        mask.extend([t], lexicon);
    }
    Ok(mask)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    if let Command::Repro = cli.command {
        let exp = run_experiment(&cfg, Some(&out))?;
        print_rows(&exp.rows);
        return Ok(());
    }
    let mut run = RunDir::create(&out)?;
    run.write("resolved_config.json", cfg.to_json()?.as_bytes())?;
    let data_dir = |d: &DataArg| d.data.clone().unwrap_or_else(|| out.clone());

    match &cli.command {
        Command::Gen => {
            let lexicon = Lexicon::builtin();
            let all = generate_profiles_with(&cfg.datagen, &lexicon)?;
            let (tr, va) = split(&all, cfg.val_fraction, cfg.split_seed())?;
            run.write("dataset.jsonl", all.to_jsonl()?.as_bytes())?;
            run.write("train.jsonl", tr.to_jsonl()?.as_bytes())?;
            run.write("val.jsonl", va.to_jsonl()?.as_bytes())?;
            println!("{} profiles ({} train, {} val) in {}", all.len(), tr.len(), va.len(), out.display());
        }
        Command::Train { data, target } => {
            let inp = load_inputs(&cfg, &data_dir(data))?;
            let target: Target = match target {
                Some(t) => t.parse()?,
                None => cfg.train.target,
            };
            let method = if target == Target::Blind { "unbiased" } else { "biased" };
            let tc = train_config(&cfg, target);
            let enc_train = EncodedSet::encode(&inp.train, &inp.embedder)?;
            let enc_val = EncodedSet::encode(&inp.val, &inp.embedder)?;
            let mut model = ScoringModel::new(inp.embedder.dim(), tc.seed)?;
            let history = train(&mut model, &enc_train, Some(&enc_val), &tc)?;
            run.write_checkpoint(&format!("scoring_{method}.json"), &model.to_checkpoint(model_meta(&cfg, method)))?;
            run.write(&format!("history_{method}.csv"), history.to_csv(false).as_bytes())?;
            if let Some(last) = history.last() {
                println!("epoch {}: train_rmse {:.4}, val_rmse {:?}", last.epoch, last.train_rmse, last.val_rmse);
            }
        }
        Command::Audit {
            data,
            model,
            method,
            mask,
        } => {
            let inp = load_inputs(&cfg, &data_dir(data))?;
            let scorer = load_model(&model.model)?;
            let val = match mask {
                Some(p) => apply_mask(&inp.val, &load_mask(p, &inp.lexicon)?)?,
                None => inp.val,
            };
            let report = audit(&scorer, &EncodedSet::encode(&val, &inp.embedder)?, &cfg.audit)?;
            let label = method
                .clone()
                .or_else(|| checkpoint_method(&model.model))
                .unwrap_or_else(|| "model".into());
            let row = ReportRow {
                model: experiment::EMBEDDER_LABEL.into(),
                method: label,
                report,
            };
            run.write_json("audit.json", &row.report)?;
            run.write("audit.csv", &experiment::report_csv(std::slice::from_ref(&row))?)?;
            print_rows(std::slice::from_ref(&row));
        }
        Command::Explain { data, model } => {
            let inp = load_inputs(&cfg, &data_dir(data))?;
            let scorer = load_model(&model.model)?;
            let mining = mine_group_tokens(&scorer, &inp.embedder, &inp.val, &inp.lexicon, &cfg.attribution)?;
            let mask = crate::attribution::MaskList::from_groups(&mining.sets, &inp.lexicon);
            run.write_json("group_sets.json", &mining.sets)?;
            run.write("attributions.csv", &attributions_csv(&mining.top)?)?;
            run.write("mask.txt", mask.to_text().as_bytes())?;
            println!(
                "{} mask tokens; planted proxy recovery {:.1}%",
                mask.len(),
                100.0 * mining.sets.proxy_recovery(&inp.lexicon)
            );
        }
        Command::MaskRetrain { data, model } => {
            let inp = load_inputs(&cfg, &data_dir(data))?;
            let baseline = model.as_deref().map(load_model).transpose()?;
            let tc = train_config(&cfg, Target::Biased);
            let (scorer, mask, report) = mitigate_via_explainability(
                &inp.train,
                &inp.val,
                &inp.embedder,
                &inp.lexicon,
                &cfg.attribution,
                &tc,
                baseline,
            )?;
            run.write_checkpoint("scoring_approach-1.json", &scorer.to_checkpoint(model_meta(&cfg, "approach-1")))?;
            run.write("mask.txt", mask.to_text().as_bytes())?;
            run.write_json("attribution_report.json", &report)?;
            println!("masked {} tokens", mask.len());
        }
        Command::AdvTrain { data } => {
            let inp = load_inputs(&cfg, &data_dir(data))?;
            let tc = train_config(&cfg, Target::Biased);
            let enc_train = EncodedSet::encode(&inp.train, &inp.embedder)?;
            let enc_val = EncodedSet::encode(&inp.val, &inp.embedder)?;
            let mut scorer = ScoringModel::new(inp.embedder.dim(), tc.seed)?;
            let mut adversary = AdversaryHead::new(HIDDEN1, tc.seed)?;
            let history = crate::adversarial::adversarial_train(
                &mut scorer,
                &mut adversary,
                &enc_train,
                Some(&enc_val),
                &cfg.adversarial,
                &tc,
            )?;
            run.write_checkpoint("scoring_approach-2.json", &scorer.to_checkpoint(model_meta(&cfg, "approach-2")))?;
            run.write_checkpoint("adversary_approach-2.json", &adversary.to_checkpoint(model_meta(&cfg, "approach-2")))?;
            run.write("history_adversarial.csv", history.to_csv(true).as_bytes())?;
        }
        Command::Probe { data, model } => {
            let inp = load_inputs(&cfg, &data_dir(data))?;
            let scorer = load_model(&model.model)?;
            let acc = probe_latents(&scorer, &EncodedSet::encode(&inp.val, &inp.embedder)?, &cfg.probe)?;
            run.write_json("probe.json", &serde_json::json!({ "accuracy": acc }))?;
            println!("probe accuracy {acc:.4}");
        }
        Command::Project { data, model } => {
            let inp = load_inputs(&cfg, &data_dir(data))?;
            let scorer = load_model(&model.model)?;
            let p = project_latents(&scorer, &EncodedSet::encode(&inp.val, &inp.embedder)?, &cfg.projection)?;
            run.write("projection.csv", &projection_csv(&p)?)?;
            run.write_json(
                "projection_meta.json",
                &serde_json::json!({"config": p.config, "final_objective": p.final_objective, "objectives": p.objectives}),
            )?;
        }
        Command::Report { inputs } => {
            let rows = merge_reports(inputs)?;
            run.write("report.csv", &csv_bytes(&TABLE_HEADER, &rows)?)?;
            println!("{}", TABLE_HEADER.join(" | "));
            for r in rows {
                println!("{}", r.join(" | "));
            }
        }
        Command::Repro => unreachable!(),
    }
    run.write_manifest()?;
    Ok(())
}

/// Rows of every input table, in input order. Headers must match.
pub fn merge_reports(inputs: &[PathBuf]) -> Result<Vec<Vec<String>>> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one input".into()));
    }
    let mut rows = Vec::new();
    for input in inputs {
        let path = if input.is_dir() {
            ["report.csv", "audit.csv"]
                .iter()
                .map(|f| input.join(f))
                .find(|p| p.is_file())
                .ok_or_else(|| Error::Config(format!("no report.csv or audit.csv in {}", input.display())))?
        } else {
            input.clone()
        };
        require_file(&path)?;
        let mut reader = csv::Reader::from_path(&path)?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != TABLE_HEADER {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                message: "not a fairness report table".into(),
            });
        }
        for rec in reader.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
    }
    Ok(rows)
}

fn print_rows(rows: &[ReportRow]) {
    println!("{}", TABLE_HEADER.join(" | "));
    for r in rows {
        println!("{}", r.report.table_row(&r.model, &r.method).join(" | "));
    }
}
