use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{Lexicon, Tag, PAD};
use crate::error::{Error, Result};

/// A lowercase token sequence. `tokens` holds the logical content;
/// `padded_len` is the length after right-padding with `[PAD]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub padded_len: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>, padded_len: usize) -> Result<Self> {
        if tokens.len() > padded_len {
            return Err(Error::Data(format!(
                "{} tokens exceed padded length {padded_len}",
                tokens.len()
            )));
        }
        if let Some(bad) = tokens.iter().find(|t| t.chars().any(char::is_uppercase) && !is_special(t)) {
            return Err(Error::Data(format!("token `{bad}` is not lowercase")));
        }
        Ok(Self { tokens, padded_len })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens followed by `[PAD]` up to `padded_len`.
    pub fn padded(&self) -> impl Iterator<Item = &str> {
        self.tokens
            .iter()
            .map(String::as_str)
            .chain(std::iter::repeat_n(PAD, self.padded_len - self.tokens.len()))
    }
}

pub fn is_special(token: &str) -> bool {
    token == super::lexicon::PAD || token == super::lexicon::MASK
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pronoun {
    Subject,
    Possessive,
}

fn pronoun(role: Pronoun, gender: u8) -> &'static str {
    match (role, gender) {
        (Pronoun::Subject, 0) => "he",
        (Pronoun::Possessive, 0) => "his",
        (Pronoun::Subject, _) => "she",
        (Pronoun::Possessive, _) => "her",
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Name,
    Title,
    Word(&'static str),
    Stop,
    Content,
    Verb,
    Adverb,
    Neutral,
    Pronoun(Pronoun),
    Proxy,
}

use Slot::*;

const TEMPLATE: &[Slot] = &[
    Name, Word("is"), Word("a"), Title, Word("with"), Neutral, Word("in"), Content, Content, Content,
    Pronoun(Pronoun::Subject), Verb, Adverb, Stop, Content, Content, Word("and"), Proxy, Neutral,
    Verb, Stop, Content, Content, Proxy, Neutral, Adverb, Verb, Content, Stop, Content, Neutral,
    Proxy, Word("for"), Pronoun(Pronoun::Possessive), Content,
];

/// Optional trailing sentence; each bio carries between zero and
/// `MAX_SENTENCES` of them, so lengths vary.
const SENTENCE: &[Slot] = &[Stop, Content, Verb, Adverb, Stop, Content];

pub const MAX_SENTENCES: usize = 12;

/// Number of proxy slots in each biography.
pub const PROXY_SLOTS: usize = 3;

/// Length of the fixed part of every biography.
pub fn min_bio_len() -> usize {
    TEMPLATE.len()
}

/// Length of the longest biography `render_bio` can produce.
pub fn max_bio_len() -> usize {
    TEMPLATE.len() + MAX_SENTENCES * SENTENCE.len()
}

/// What `render_bio` needs to know about a profile.
#[derive(Debug, Clone, Copy)]
pub struct BioSpec<'a> {
    pub gender: u8,
    pub sector: u8,
    pub occupation: u8,
    pub name: &'a str,
}

fn pick<'a, R: Rng + ?Sized>(pool: &[&'a str], slot: &str, rng: &mut R) -> Result<&'a str> {
    pool.choose(rng)
        .copied()
        .ok_or_else(|| Error::Lexicon { slot: slot.to_string() })
}

/// Fill the biography template for one profile, followed by a random
/// number of extra sentences. Each proxy slot receives a gender-matching
/// proxy with probability `proxy_rate`, otherwise a neutral word.
pub fn render_bio<R: Rng + ?Sized>(
    spec: BioSpec<'_>,
    lexicon: &Lexicon,
    proxy_rate: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&proxy_rate) {
        return Err(Error::Config(format!("proxy_rate {proxy_rate} not in [0, 1]")));
    }
    let (g, s, o) = (spec.gender, spec.sector, spec.occupation);
    let titles = lexicon.select(|t| t == Tag::SectorContent { sector: s, occupation: Some(o) });
    let content = lexicon.select(|t| t == Tag::SectorContent { sector: s, occupation: None });
    let stops = lexicon.select(|t| t == Tag::Stopword);
    let verbs = lexicon.select(|t| t == Tag::Verb);
    let adverbs = lexicon.select(|t| t == Tag::Adverb);
    let neutral = lexicon.select(|t| t == Tag::Neutral);
    let proxies = lexicon.proxies(g, s);
    if lexicon.tag(spec.name) != Some(Tag::Name { gender: g }) {
        return Err(Error::Lexicon {
            slot: format!("name `{}` for gender {g}", spec.name),
        });
    }

    let sentences = rng.random_range(0..=MAX_SENTENCES);
    let slots = TEMPLATE.iter().chain(SENTENCE.iter().cycle().take(sentences * SENTENCE.len()));
    let mut out = Vec::with_capacity(max_bio_len());
    for slot in slots {
        let token = match *slot {
            Name => spec.name,
            Title => pick(&titles, &format!("title for occupation {o}"), rng)?,
            Word(w) => {
                if !lexicon.contains(w) {
                    return Err(Error::Lexicon { slot: format!("word `{w}`") });
                }
                w
            }
            Stop => pick(&stops, "stopword", rng)?,
            Content => pick(&content, &format!("content for sector {s}"), rng)?,
            Verb => pick(&verbs, "verb", rng)?,
            Adverb => pick(&adverbs, "adverb", rng)?,
            Neutral => pick(&neutral, "neutral", rng)?,
            Pronoun(role) => {
                let p = pronoun(role, g);
                if lexicon.tag(p) != Some(Tag::Pronoun { gender: g }) {
                    return Err(Error::Lexicon { slot: format!("pronoun `{p}`") });
                }
                p
            }
            Proxy => {
                // Draw both choices so the stream does not depend on the outcome.
                let inject = rng.random::<f64>() < proxy_rate;
                let filler = pick(&neutral, "neutral", rng)?;
                let proxy = pick(&proxies, &format!("proxy for gender {g}, sector {s}"), rng)?;
                if inject {
                    proxy
                } else {
                    filler
                }
            }
        };
        out.push(token.to_string());
    }
    if out.len() > max_len {
        return Err(Error::Config(format!(
            "max_len {max_len} is shorter than the {}-token biography",
            out.len()
        )));
    }
    TokenSequence::new(out, max_len)
}
