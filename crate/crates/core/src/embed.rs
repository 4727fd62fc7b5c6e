//! The frozen text stage: token sequences to per-token vectors, then mean
//! pooling into a single text feature vector.
//!
//! Two providers are available. The hashing embedder gives every distinct
//! token a fixed pseudo-random unit vector derived from `(seed, token)`.
//! The precomputed embedder reads per-profile token vectors exported from an
//! external encoder, in this binary layout (all integers and floats
//! little-endian):
//!
//! ```text
//! magic   8 bytes  "FPEMBED1"
//! dim     u64
//! count   u64
//! count × { id u64, tau u64, tau × dim f64 (row-major) }
//! ```

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::{TokenSequence, MASK, PAD};
use crate::error::{Error, Result};
use crate::gradengine::Tensor;
use crate::scalar::Scalar;
use crate::seed;

pub const PRECOMPUTED_MAGIC: &[u8; 8] = b"FPEMBED1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hashing,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub kind: EmbedderKind,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 768,
            kind: EmbedderKind::Hashing,
            seed: 0,
            path: None,
        }
    }
}

/// `tau × dim` token vectors plus a mask of non-`[PAD]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<S> {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<S>,
    pub mask: Vec<bool>,
}

impl<S: Scalar> EmbeddingMatrix<S> {
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn active_rows(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_tensor(&self) -> Result<Tensor<S>> {
        Tensor::matrix(self.rows, self.dim, self.data.clone())
    }
}

/// Mean over the unmasked rows.
pub fn pool_mean<S: Scalar>(m: &EmbeddingMatrix<S>) -> Result<Vec<S>> {
    let count = m.active_rows();
    if count == 0 {
        return Err(Error::Data("cannot pool an empty (all-[PAD]) sequence".into()));
    }
    let mut out = vec![S::zero(); m.dim];
    for i in (0..m.rows).filter(|&i| m.mask[i]) {
        for (o, &v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    let inv = S::one() / S::of(count as f64);
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

#[derive(Debug, Clone)]
enum Provider<S> {
    Hashing {
        seed: u64,
        cache: HashMap<String, Vec<S>>,
    },
    Precomputed {
        records: HashMap<u64, (usize, Vec<S>)>,
    },
}

/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Embedder<S> {
    dim: usize,
    provider: Provider<S>,
}

/// The fixed unit vector for `token` under the hashing scheme.
pub fn hash_vector<S: Scalar>(token: &str, dim: usize, seed: u64) -> Vec<S> {
    if token == PAD {
        return vec![S::zero(); dim];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(&[seed, seed::fnv1a(token.as_bytes())]));
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.into_iter().map(|v| S::of(v / norm)).collect()
}

impl<S: Scalar> Embedder<S> {
    /// Hashing embedder with vectors for `vocabulary` (and `[MASK]`)
    /// computed up front; other tokens are hashed on demand.
    pub fn hashing<'a>(dim: usize, seed: u64, vocabulary: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        let cache = vocabulary
            .into_iter()
            .chain([MASK])
            .map(|t| (t.to_string(), hash_vector(t, dim, seed)))
            .collect();
        Ok(Self {
            dim,
            provider: Provider::Hashing { seed, cache },
        })
    }

    pub fn from_config(cfg: &EmbedderConfig, lexicon: &crate::datagen::Lexicon) -> Result<Self> {
        match cfg.kind {
            EmbedderKind::Hashing => {
                Self::hashing(cfg.dim, cfg.seed, lexicon.entries.iter().map(|e| e.token.as_str()))
            }
            EmbedderKind::Precomputed => {
                let path = cfg
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("precomputed embedder needs `path`".into()))?;
                let e = Self::load_precomputed(path)?;
                if e.dim != cfg.dim {
                    return Err(Error::Config(format!(
                        "embedding file has dim {}, config says {}",
                        e.dim, cfg.dim
                    )));
                }
                Ok(e)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Token vectors for one profile's sequence.
    pub fn embed_sequence(&self, id: u64, tokens: &TokenSequence) -> Result<EmbeddingMatrix<S>> {
        match &self.provider {
            Provider::Hashing { seed, cache } => {
                let rows = tokens.padded_len.max(tokens.len());
                let mut data = Vec::with_capacity(rows * self.dim);
                let mut mask = Vec::with_capacity(rows);
                for tok in tokens.padded() {
                    if tok == PAD {
                        data.extend(std::iter::repeat_n(S::zero(), self.dim));
                        mask.push(false);
                    } else {
                        match cache.get(tok) {
                            Some(v) => data.extend_from_slice(v),
                            None => data.extend(hash_vector::<S>(tok, self.dim, *seed)),
                        }
                        mask.push(true);
                    }
                }
                Ok(EmbeddingMatrix {
                    rows,
                    dim: self.dim,
                    data,
                    mask,
                })
            }
            Provider::Precomputed { records } => {
                let (tau, data) = records.get(&id).ok_or(Error::Lookup(id))?;
                Ok(EmbeddingMatrix {
                    rows: *tau,
                    dim: self.dim,
                    data: data.clone(),
                    mask: vec![true; *tau],
                })
            }
        }
    }

    /// Pooled text feature vector for one profile.
    pub fn pooled(&self, id: u64, tokens: &TokenSequence) -> Result<Vec<S>> {
        pool_mean(&self.embed_sequence(id, tokens)?)
    }

    pub fn load_precomputed(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != PRECOMPUTED_MAGIC {
            return Err(Error::Data(format!("{}: not an embedding file", path.display())));
        }
        let dim = read_u64(&mut r)? as usize;
        let count = read_u64(&mut r)?;
        if dim == 0 {
            return Err(Error::Data("embedding file declares dim 0".into()));
        }
        let mut records = HashMap::new();
        for _ in 0..count {
            let id = read_u64(&mut r)?;
            let tau = read_u64(&mut r)? as usize;
            let mut data = Vec::with_capacity(tau * dim);
            let mut buf = [0u8; 8];
            for _ in 0..tau * dim {
                r.read_exact(&mut buf)?;
                let v = f64::from_le_bytes(buf);
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("non-finite embedding value for id {id}")));
                }
                data.push(S::of(v));
            }
            if records.insert(id, (tau, data)).is_some() {
                return Err(Error::Data(format!("duplicate id {id} in embedding file")));
            }
        }
        Ok(Self {
            dim,
            provider: Provider::Precomputed { records },
        })
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Write per-profile token vectors in the precomputed layout. Each record is
/// `(id, tau, tau × dim values)`.
pub fn write_precomputed(path: &Path, dim: usize, records: &[(u64, usize, Vec<f64>)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(PRECOMPUTED_MAGIC)?;
    w.write_all(&(dim as u64).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (id, tau, data) in records {
        if data.len() != tau * dim {
            return Err(Error::Shape(format!(
                "record {id}: {} values for tau {tau} × dim {dim}",
                data.len()
            )));
        }
        w.write_all(&id.to_le_bytes())?;
        w.write_all(&(*tau as u64).to_le_bytes())?;
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Lexicon;

    fn seq(tokens: &[&str], padded: usize) -> TokenSequence {
        TokenSequence::new(tokens.iter().map(|s| s.to_string()).collect(), padded).unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn hashing_vectors_are_fixed_unit_vectors() {
        let e = Embedder::<f64>::hashing(64, 3, ["nurse", "court"]).unwrap();
        let a = e.embed_sequence(0, &seq(&["nurse", "nurse", "zebra"], 4)).unwrap();
        assert_eq!(a.row(0), a.row(1));
        for i in 0..3 {
            assert!((norm(a.row(i)) - 1.0).abs() < 1e-9);
        }
        // Uncached tokens hash to the same vector as cached ones would.
        assert_eq!(a.row(2), hash_vector::<f64>("zebra", 64, 3).as_slice());
        assert!(a.row(3).iter().all(|&v| v == 0.0));
        assert_eq!(a.mask, vec![true, true, true, false]);
    }

    #[test]
    fn mask_token_has_its_own_nonzero_vector() {
        let e = Embedder::<f64>::hashing(32, 1, ["a"]).unwrap();
        let m = e.embed_sequence(0, &seq(&[MASK, "a"], 2)).unwrap();
        assert!((norm(m.row(0)) - 1.0).abs() < 1e-9);
        assert_ne!(m.row(0), m.row(1));
    }

    #[test]
    fn pooling_examples() {
        let v = vec![0.5, -1.0, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let twice = EmbeddingMatrix {
            rows: 2,
            dim: 3,
            data: [v.clone(), v.clone()].concat(),
            mask: vec![true, true],
        };
        assert_eq!(pool_mean(&twice).unwrap(), v);
        let opposite = EmbeddingMatrix {
            rows: 2,
            dim: 3,
            data: [v.clone(), neg].concat(),
            mask: vec![true, true],
        };
        assert!(pool_mean(&opposite).unwrap().iter().all(|&x| x == 0.0));
        let empty = EmbeddingMatrix::<f64> {
            rows: 1,
            dim: 3,
            data: vec![0.0; 3],
            mask: vec![false],
        };
        assert!(matches!(pool_mean(&empty), Err(Error::Data(_))));
    }

    #[test]
    fn pooling_matches_direct_resummation() {
        let e = Embedder::<f64>::hashing(16, 9, ["x", "y", "z"]).unwrap();
        let m = e.embed_sequence(0, &seq(&["x", "y", "z"], 3)).unwrap();
        let pooled = pool_mean(&m).unwrap();
        let (a, b, c) = (
            hash_vector::<f64>("x", 16, 9),
            hash_vector::<f64>("y", 16, 9),
            hash_vector::<f64>("z", 16, 9),
        );
        for d in 0..16 {
            assert!((pooled[d] - (a[d] + b[d] + c[d]) / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn trailing_pads_do_not_change_the_pooled_vector() {
        let e = Embedder::<f64>::hashing(16, 2, ["p", "q"]).unwrap();
        let short = e.pooled(0, &seq(&["p", "q"], 2)).unwrap();
        let long = e.pooled(0, &seq(&["p", "q"], 10)).unwrap();
        assert_eq!(short, long);
    }

    #[test]
    fn lexicon_collision_rate_is_small() {
        let lex = Lexicon::builtin();
        let tokens: Vec<&str> = lex.entries.iter().map(|e| e.token.as_str()).collect();
        let vecs: Vec<Vec<f64>> = tokens.iter().map(|t| hash_vector(t, 64, 0)).collect();
        let (mut pairs, mut near) = (0usize, 0usize);
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                pairs += 1;
                assert_ne!(vecs[i], vecs[j], "{} / {}", tokens[i], tokens[j]);
                let cos: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                if cos > 0.5 {
                    near += 1;
                }
            }
        }
        assert!((near as f64) / (pairs as f64) < 0.01);
    }

    #[test]
    fn precomputed_file_round_trip_and_lookup_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let records = vec![(5u64, 2usize, vec![1.0, 2.0, 3.0, 4.0]), (9, 1, vec![-1.0, 0.5])];
        write_precomputed(&path, 2, &records).unwrap();
        let e = Embedder::<f64>::load_precomputed(&path).unwrap();
        assert_eq!(e.dim(), 2);
        let m = e.embed_sequence(5, &seq(&["ignored"], 1)).unwrap();
        assert_eq!(m.data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.pooled(5, &seq(&["ignored"], 1)).unwrap(), vec![2.0, 3.0]);
        assert!(matches!(e.embed_sequence(6, &seq(&["a"], 1)), Err(Error::Lookup(6))));
    }
}
