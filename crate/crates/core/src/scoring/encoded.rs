use rayon::prelude::*;

use crate::datagen::{ProfileSet, Target, N_COMPETENCIES};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::gradengine::Tensor;
use crate::scalar::Scalar;

/// Profiles reduced to what the network consumes: pooled text vectors,
/// competencies, targets and annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSet<S> {
    pub ids: Vec<u64>,
    pub genders: Vec<u8>,
    pub sectors: Vec<u8>,
    pub blind: Vec<f64>,
    pub biased: Vec<f64>,
    embed_dim: usize,
    text: Vec<S>,
    competencies: Vec<S>,
}

impl<S: Scalar> EncodedSet<S> {
    pub fn encode(profiles: &ProfileSet, embedder: &Embedder<S>) -> Result<Self> {
        let pooled: Vec<Vec<S>> = profiles
            .profiles
            .par_iter()
            .map(|p| embedder.pooled(p.id, &p.bio))
            .collect::<Result<_>>()?;
        let mut text = Vec::with_capacity(profiles.len() * embedder.dim());
        for v in pooled {
            text.extend(v);
        }
        Ok(Self {
            ids: profiles.ids(),
            genders: profiles.genders(),
            sectors: profiles.sectors(),
            blind: profiles.profiles.iter().map(|p| p.blind_score).collect(),
            biased: profiles.profiles.iter().map(|p| p.biased_score).collect(),
            embed_dim: embedder.dim(),
            text,
            competencies: profiles
                .profiles
                .iter()
                .flat_map(|p| p.competencies.iter().map(|&c| S::of(c)))
                .collect(),
        })
    }

    /// Build directly from feature rows. Targets default to zero.
    pub fn from_features(text: Tensor<S>, competencies: Tensor<S>, genders: Vec<u8>) -> Result<Self> {
        let n = text.rows();
        if competencies.rows() != n || competencies.cols() != N_COMPETENCIES || genders.len() != n {
            return Err(Error::Shape("feature rows disagree".into()));
        }
        Ok(Self {
            ids: (0..n as u64).collect(),
            sectors: vec![0; n],
            blind: vec![0.0; n],
            biased: vec![0.0; n],
            genders,
            embed_dim: text.cols(),
            text: text.into_data(),
            competencies: competencies.into_data(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn text_row(&self, i: usize) -> &[S] {
        &self.text[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    pub fn competency_row(&self, i: usize) -> &[S] {
        &self.competencies[i * N_COMPETENCIES..(i + 1) * N_COMPETENCIES]
    }

    pub fn targets(&self, target: Target) -> &[f64] {
        match target {
            Target::Blind => &self.blind,
            Target::Biased => &self.biased,
        }
    }

    pub fn set_targets(&mut self, target: Target, values: Vec<f64>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Shape("target length mismatch".into()));
        }
        match target {
            Target::Blind => self.blind = values,
            Target::Biased => self.biased = values,
        }
        Ok(())
    }

    /// Consecutive index chunks covering the set in order.
    pub fn batches(&self, size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Text and competency matrices for the given rows.
    pub fn gather(&self, rows: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut t = Vec::with_capacity(rows.len() * self.embed_dim);
        let mut x = Vec::with_capacity(rows.len() * N_COMPETENCIES);
        for &r in rows {
            t.extend_from_slice(self.text_row(r));
            x.extend_from_slice(self.competency_row(r));
        }
        Ok((
            Tensor::matrix(rows.len(), self.embed_dim, t)?,
            Tensor::matrix(rows.len(), N_COMPETENCIES, x)?,
        ))
    }

    /// Subset in the given row order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut text = Vec::with_capacity(rows.len() * self.embed_dim);
        let mut comp = Vec::with_capacity(rows.len() * N_COMPETENCIES);
        for &r in rows {
            text.extend_from_slice(self.text_row(r));
            comp.extend_from_slice(self.competency_row(r));
        }
        Self {
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            genders: rows.iter().map(|&r| self.genders[r]).collect(),
            sectors: rows.iter().map(|&r| self.sectors[r]).collect(),
            blind: rows.iter().map(|&r| self.blind[r]).collect(),
            biased: rows.iter().map(|&r| self.biased[r]).collect(),
            embed_dim: self.embed_dim,
            text,
            competencies: comp,
        }
    }
}
