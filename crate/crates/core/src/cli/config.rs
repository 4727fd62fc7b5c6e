use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::adversarial::{AdversarialConfig, ProbeConfig};
use crate::attribution::AttributionConfig;
use crate::datagen::GeneratorConfig;
use crate::embed::EmbedderConfig;
use crate::error::{Error, Result};
use crate::fairness::AuditConfig;
use crate::projection::TsneConfig;
use crate::scoring::TrainConfig;
use crate::seed::stage_seed;

/// Prefix of environment overrides: `FAIRPIPE_SEED`,
/// `FAIRPIPE_<SECTION>_<FIELD>` (e.g. `FAIRPIPE_TRAIN_EPOCHS=5`).
pub const ENV_PREFIX: &str = "FAIRPIPE_";

pub const SECTIONS: [&str; 8] = [
    "datagen",
    "embedder",
    "train",
    "adversarial",
    "probe",
    "attribution",
    "audit",
    "projection",
];

/// Sections carrying a `seed` that is derived from the global seed unless
/// given explicitly.
const SEEDED: [&str; 5] = ["datagen", "embedder", "train", "probe", "projection"];

pub const QUICK_PROFILES: usize = 4000;
pub const QUICK_TOP_K: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub val_fraction: f64,
    pub datagen: GeneratorConfig,
    pub embedder: EmbedderConfig,
    pub train: TrainConfig,
    pub adversarial: AdversarialConfig,
    pub probe: ProbeConfig,
    pub attribution: AttributionConfig,
    pub audit: AuditConfig,
    pub projection: TsneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: None,
            val_fraction: 0.2,
            datagen: GeneratorConfig::default(),
            embedder: EmbedderConfig::default(),
            train: TrainConfig::default(),
            adversarial: AdversarialConfig::default(),
            probe: ProbeConfig::default(),
            attribution: AttributionConfig::default(),
            audit: AuditConfig::default(),
            projection: TsneConfig::default(),
        }
    }
}

/// Command-line inputs that shape the resolved config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub quick: bool,
    pub env: Vec<(String, String)>,
}

impl Overrides {
    /// `FAIRPIPE_*` variables from the process environment.
    pub fn with_process_env(mut self) -> Self {
        self.env = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        self.env.sort();
        self
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.datagen.validate()?;
        self.train.validate()?;
        self.adversarial.validate()?;
        self.audit.validate()?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} not in (0, 1)", self.val_fraction)));
        }
        if self.attribution.steps < 2 {
            return Err(Error::Config("attribution.steps must be at least 2".into()));
        }
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        stage_seed(self.seed, "split")
    }

    /// Resolve defaults, the optional config file, `--quick`, environment
    /// overrides, `--seed`/`--out`, then derived section seeds, in that order.
    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                // Typed parse first so schema errors carry a line number.
                serde_json::from_str::<RunConfig>(&text).map_err(|e| Error::Parse {
                    path: p.display().to_string(),
                    line: e.line(),
                    message: e.to_string(),
                })?;
                serde_json::from_str::<Value>(&text)?
            }
            None => Value::Object(Map::new()),
        };
        let root = doc
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;

        if ov.quick {
            set_default(root, "datagen", "n_profiles", QUICK_PROFILES.into());
            set_default(root, "audit", "top_k", QUICK_TOP_K.into());
        }
        for (key, raw) in &ov.env {
            apply_env(root, key, raw)?;
        }
        if let Some(s) = ov.seed {
            root.insert("seed".into(), s.into());
        }
        if let Some(o) = &ov.out {
            root.insert("out".into(), o.display().to_string().into());
        }
        let global = match root.get("seed") {
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::Config("`seed` must be a non-negative integer".into()))?,
            None => RunConfig::default().seed,
        };
        for section in SEEDED {
            set_default(root, section, "seed", stage_seed(global, section).into());
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn section<'a>(root: &'a mut Map<String, Value>, name: &str) -> Result<&'a mut Map<String, Value>> {
    root.entry(name)
        .or_insert_with(|| Value::Object(Map::new()))
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("section `{name}` must be an object")))
}

fn set_default(root: &mut Map<String, Value>, sec: &str, key: &str, value: Value) {
    if let Ok(s) = section(root, sec) {
        s.entry(key).or_insert(value);
    }
}

/// `FAIRPIPE_SEED`, `FAIRPIPE_VAL_FRACTION` or `FAIRPIPE_<SECTION>_<FIELD>`.
/// Values parse as JSON scalars, falling back to a string.
fn apply_env(root: &mut Map<String, Value>, key: &str, raw: &str) -> Result<()> {
    let name = key
        .strip_prefix(ENV_PREFIX)
        .ok_or_else(|| Error::Config(format!("`{key}` lacks the {ENV_PREFIX} prefix")))?
        .to_ascii_lowercase();
    let value = match serde_json::from_str::<Value>(raw) {
        Ok(v @ (Value::Number(_) | Value::Bool(_) | Value::String(_))) => v,
        Ok(_) => return Err(Error::Config(format!("`{key}` must be a scalar"))),
        Err(_) => Value::String(raw.to_string()),
    };
    if name == "seed" || name == "val_fraction" {
        root.insert(name, value);
        return Ok(());
    }
    let (sec, field) = SECTIONS
        .iter()
        .find_map(|s| name.strip_prefix(s).and_then(|r| r.strip_prefix('_')).map(|f| (*s, f)))
        .ok_or_else(|| Error::Config(format!("`{key}` names no config section")))?;
    section(root, sec)?.insert(field.to_string(), value);
    Ok(())
}
