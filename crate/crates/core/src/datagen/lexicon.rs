use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";

pub const LEXICON_VERSION: u32 = 1;

const BUILTIN: &str = include_str!("../../data/lexicon.json");

/// Part-of-speech / role tag of a lexicon token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum Tag {
    SectorContent {
        sector: u8,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        occupation: Option<u8>,
    },
    GenderProxy {
        gender: u8,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sector: Option<u8>,
    },
    Name {
        gender: u8,
    },
    Pronoun {
        gender: u8,
    },
    Stopword,
    Verb,
    Adverb,
    Neutral,
}

impl Tag {
    /// Stopwords, verbs and adverbs carry little meaning and are dropped
    /// from mined token sets.
    pub fn is_function_word(self) -> bool {
        matches!(self, Tag::Stopword | Tag::Verb | Tag::Adverb)
    }

    pub fn gender(self) -> Option<u8> {
        match self {
            Tag::GenderProxy { gender, .. } | Tag::Name { gender } | Tag::Pronoun { gender } => {
                Some(gender)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub token: String,
    #[serde(flatten)]
    pub tag: Tag,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lexicon {
    pub version: u32,
    pub entries: Vec<LexiconEntry>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for Lexicon {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version && self.entries == other.entries
    }
}

impl Lexicon {
    pub fn new(version: u32, entries: Vec<LexiconEntry>) -> Result<Self> {
        let mut lex = Self {
            version,
            entries,
            index: HashMap::new(),
        };
        lex.reindex()?;
        Ok(lex)
    }

    /// The lexicon shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("bundled lexicon is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut lex: Lexicon = serde_json::from_str(text)?;
        lex.reindex()?;
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lex: Lexicon = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        lex.reindex()?;
        Ok(lex)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    fn reindex(&mut self) -> Result<()> {
        if self.version != LEXICON_VERSION {
            return Err(Error::Data(format!("unsupported lexicon version {}", self.version)));
        }
        self.index.clear();
        for (i, e) in self.entries.iter().enumerate() {
            let t = &e.token;
            if t.is_empty() || t.chars().any(char::is_uppercase) || t == PAD || t == MASK {
                return Err(Error::Data(format!("invalid lexicon token `{t}`")));
            }
            if e.tag.gender().is_some_and(|g| g > 1) {
                return Err(Error::Data(format!("token `{t}` has gender outside {{0, 1}}")));
            }
            let sector = match e.tag {
                Tag::SectorContent { sector, .. } => Some(sector),
                Tag::GenderProxy { sector, .. } => sector,
                _ => None,
            };
            if sector.is_some_and(|s| s as usize >= super::N_SECTORS) {
                return Err(Error::Data(format!("token `{t}` has sector out of range")));
            }
            if let Tag::SectorContent {
                sector,
                occupation: Some(o),
            } = e.tag
            {
                if super::sector_of(o as usize) != Some(sector as usize) {
                    return Err(Error::Data(format!(
                        "title `{t}` maps occupation {o} to the wrong sector"
                    )));
                }
            }
            if self.index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate lexicon token `{t}`")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tag(&self, token: &str) -> Option<Tag> {
        self.index.get(token).map(|&i| self.entries[i].tag)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Tokens whose tag satisfies `pred`, in file order.
    pub fn select(&self, pred: impl Fn(Tag) -> bool) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| pred(e.tag))
            .map(|e| e.token.as_str())
            .collect()
    }

    pub fn names(&self, gender: u8) -> Vec<&str> {
        self.select(|t| t == Tag::Name { gender })
    }

    pub fn all_names(&self) -> Vec<&str> {
        self.select(|t| matches!(t, Tag::Name { .. }))
    }

    /// Proxies for `gender` usable in `sector`: sector-affine ones plus
    /// generic ones.
    pub fn proxies(&self, gender: u8, sector: u8) -> Vec<&str> {
        self.select(|t| match t {
            Tag::GenderProxy { gender: g, sector: s } => g == gender && s.is_none_or(|s| s == sector),
            _ => false,
        })
    }

    pub fn all_proxies(&self, gender: u8) -> Vec<&str> {
        self.select(|t| matches!(t, Tag::GenderProxy { gender: g, .. } if g == gender))
    }
}
