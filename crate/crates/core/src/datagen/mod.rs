//! Synthetic resume profiles with controllable gender bias.
//!
//! Every profile has seven competencies drawn uniformly on `[0, 1]`, an
//! occupation (which fixes one of four labor sectors), a templated biography
//! and two targets: the blind score, a sector-weighted sum of the
//! competencies, and the biased score, which subtracts a fixed penalty for
//! women. Gender never enters the competencies, so a model can only learn
//! the penalty from the text.
//!
//! By default profiles come in pairs: ids `2p` (male) and `2p + 1` (female)
//! share sector, occupation and competencies and differ only in their
//! biographies. The ground-truth ranking is then exactly gender-balanced.

mod lexicon;
mod render;
mod split;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

pub use lexicon::{Lexicon, LexiconEntry, Tag, LEXICON_VERSION, MASK, PAD};
pub use render::{is_special, max_bio_len, min_bio_len, render_bio, BioSpec, TokenSequence, MAX_SENTENCES, PROXY_SLOTS};
pub use split::split;

use crate::error::{Error, Result};
use crate::seed;

pub const N_SECTORS: usize = 4;
pub const N_OCCUPATIONS: usize = 10;
pub const N_COMPETENCIES: usize = 7;

pub const SECTOR_NAMES: [&str; N_SECTORS] = ["healthcare", "education", "jurisdiction", "technology"];

/// Occupation → sector.
pub const OCCUPATION_SECTOR: [usize; N_OCCUPATIONS] = [0, 0, 0, 1, 1, 2, 2, 2, 3, 3];

/// Competency order: education, availability, experience, recommendation,
/// and three language-proficiency scores.
pub const COMPETENCY_NAMES: [&str; N_COMPETENCIES] = [
    "education",
    "availability",
    "experience",
    "recommendation",
    "language_1",
    "language_2",
    "language_3",
];

pub const DEFAULT_SECTOR_WEIGHTS: [[f64; N_COMPETENCIES]; N_SECTORS] = [
    [0.25, 0.15, 0.25, 0.15, 0.08, 0.06, 0.06],
    [0.30, 0.10, 0.20, 0.15, 0.10, 0.08, 0.07],
    [0.25, 0.10, 0.30, 0.20, 0.05, 0.05, 0.05],
    [0.20, 0.15, 0.25, 0.10, 0.15, 0.08, 0.07],
];

pub fn sector_of(occupation: usize) -> Option<usize> {
    OCCUPATION_SECTOR.get(occupation).copied()
}

pub fn occupations_in(sector: usize) -> Vec<u8> {
    (0..N_OCCUPATIONS)
        .filter(|&o| OCCUPATION_SECTOR[o] == sector)
        .map(|o| o as u8)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_profiles: usize,
    /// Score penalty applied to women in the biased target.
    pub delta: f64,
    /// Probability that a proxy slot receives a gender-proxy token.
    pub proxy_rate: f64,
    pub sector_weights: [[f64; N_COMPETENCIES]; N_SECTORS],
    pub max_len: usize,
    pub seed: u64,
    /// Generate male/female twins sharing competencies and occupation.
    pub paired: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_profiles: 24_000,
            delta: 0.2,
            proxy_rate: 0.9,
            sector_weights: DEFAULT_SECTOR_WEIGHTS,
            max_len: 128,
            seed: 7,
            paired: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_profiles == 0 || self.n_profiles % 8 != 0 {
            return Err(Error::Config(format!(
                "n_profiles = {} must be a positive multiple of 8 (gender x sector balance)",
                self.n_profiles
            )));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta {} not in [0, 1]", self.delta)));
        }
        if !(0.0..=1.0).contains(&self.proxy_rate) {
            return Err(Error::Config(format!("proxy_rate {} not in [0, 1]", self.proxy_rate)));
        }
        for (s, row) in self.sector_weights.iter().enumerate() {
            check_weight_row(s, row)?;
        }
        if self.max_len < max_bio_len() {
            return Err(Error::Config(format!(
                "max_len {} is below the longest biography {}",
                self.max_len,
                max_bio_len()
            )));
        }
        Ok(())
    }
}

fn check_weight_row(sector: usize, row: &[f64; N_COMPETENCIES]) -> Result<()> {
    let total: f64 = row.iter().sum();
    if row.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "sector_weights row {sector} must be non-negative and sum to 1 (sums to {total})"
        )));
    }
    Ok(())
}

/// One synthetic resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub id: u64,
    /// Twin group; equals `id` for unpaired profiles.
    pub pair_id: u64,
    /// 0 = male, 1 = female.
    pub gender: u8,
    pub sector: u8,
    pub occupation: u8,
    pub competencies: [f64; N_COMPETENCIES],
    pub name_token: String,
    pub bio: TokenSequence,
    pub blind_score: f64,
    pub biased_score: f64,
}

impl Profile {
    pub fn target(&self, target: Target) -> f64 {
        match target {
            Target::Blind => self.blind_score,
            Target::Biased => self.biased_score,
        }
    }
}

/// Which score a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Blind,
    #[default]
    Biased,
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blind" | "unbiased" => Ok(Target::Blind),
            "biased" => Ok(Target::Biased),
            other => Err(Error::Config(format!("unknown target `{other}`"))),
        }
    }
}

/// Dot product of the sector's weight row with the competencies.
pub fn blind_score(
    x: &[f64; N_COMPETENCIES],
    sector: usize,
    weights: &[[f64; N_COMPETENCIES]; N_SECTORS],
) -> Result<f64> {
    let row = weights
        .get(sector)
        .ok_or_else(|| Error::Index(format!("sector {sector} out of range 0..{N_SECTORS}")))?;
    Ok(row.iter().zip(x).map(|(w, v)| w * v).sum())
}

/// `y` for men, `max(0, y - delta)` for women.
pub fn biased_score(y: f64, gender: u8, delta: f64) -> f64 {
    if gender == 0 {
        y
    } else {
        (y - delta).max(0.0)
    }
}

/// An ordered collection of profiles.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProfileSet {
    pub profiles: Vec<Profile>,
}

impl ProfileSet {
    pub fn new(profiles: Vec<Profile>) -> Self {
        Self { profiles }
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Profile> {
        self.profiles.iter()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.profiles.iter().map(|p| p.id).collect()
    }

    pub fn genders(&self) -> Vec<u8> {
        self.profiles.iter().map(|p| p.gender).collect()
    }

    pub fn sectors(&self) -> Vec<u8> {
        self.profiles.iter().map(|p| p.sector).collect()
    }

    pub fn blind_scores(&self) -> Vec<f64> {
        self.profiles.iter().map(|p| p.blind_score).collect()
    }

    pub fn count_gender(&self, gender: u8) -> usize {
        self.profiles.iter().filter(|p| p.gender == gender).count()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for p in &self.profiles {
            out.push_str(&serde_json::to_string(p)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut profiles = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Profile = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            profiles.push(p);
        }
        Ok(Self { profiles })
    }
}

/// Generate profiles with the bundled lexicon.
pub fn generate_profiles(config: &GeneratorConfig) -> Result<ProfileSet> {
    generate_profiles_with(config, &Lexicon::builtin())
}

/// Generate `config.n_profiles` profiles: half per gender, genders balanced
/// in every sector. Each profile depends only on `(config, seed, id)`.
pub fn generate_profiles_with(config: &GeneratorConfig, lexicon: &Lexicon) -> Result<ProfileSet> {
    config.validate()?;
    let profiles = (0..config.n_profiles as u64)
        .map(|id| generate_one(config, lexicon, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProfileSet { profiles })
}

/// Shared attributes of a twin group (or a single unpaired profile).
fn group_attributes(config: &GeneratorConfig, group: u64, sector: usize) -> (u8, [f64; N_COMPETENCIES]) {
    let mut rng = seed::rng_from(&[config.seed, 0xA77, group]);
    let occupation = *occupations_in(sector)
        .choose(&mut rng)
        .expect("every sector has an occupation");
    let mut x = [0.0; N_COMPETENCIES];
    for v in &mut x {
        *v = rng.random::<f64>();
    }
    (occupation, x)
}

fn generate_one(config: &GeneratorConfig, lexicon: &Lexicon, id: u64) -> Result<Profile> {
    let gender = (id % 2) as u8;
    let sector = ((id / 2) % N_SECTORS as u64) as usize;
    let pair_id = if config.paired { id / 2 } else { id };
    let (occupation, competencies) = group_attributes(config, pair_id, sector);

    let mut rng = seed::rng_from(&[config.seed, 0xB10, id]);
    let names = lexicon.names(gender);
    let name = *names.choose(&mut rng).ok_or_else(|| Error::Lexicon {
        slot: format!("name for gender {gender}"),
    })?;
    let bio = render_bio(
        BioSpec {
            gender,
            sector: sector as u8,
            occupation,
            name,
        },
        lexicon,
        config.proxy_rate,
        config.max_len,
        &mut rng,
    )?;
    let y = blind_score(&competencies, sector, &config.sector_weights)?;
    Ok(Profile {
        id,
        pair_id,
        gender,
        sector: sector as u8,
        occupation,
        competencies,
        name_token: name.to_string(),
        bio,
        blind_score: y,
        biased_score: biased_score(y, gender, config.delta),
    })
}
