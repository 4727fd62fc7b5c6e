//! Demonstrate, measure and mitigate gender bias learned by a multimodal
//! resume-scoring network.
//!
//! The pipeline has four stages:
//!
//! 1. [`datagen`] builds a seeded, gender-balanced set of synthetic resumes
//!    whose biographies carry planted gender-proxy words, with a blind score
//!    and a gender-biased score per profile.
//! 2. [`embed`] maps each biography to per-token vectors with a frozen
//!    embedder and mean-pools them; [`scoring`] trains the fusion network
//!    that combines the pooled text vector with the structured competencies.
//! 3. Two mitigations: [`attribution`] finds proxy tokens with Integrated
//!    Gradients and masks them before retraining; [`adversarial`] trains
//!    against an auxiliary gender classifier attached to the first hidden
//!    layer.
//! 4. [`fairness`] audits score distributions and top-K shortlists, and
//!    [`projection`] runs exact t-SNE on hidden representations.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix it to
//! `f64`, which is what the CLI and the experiments use.

pub mod adversarial;
pub mod attribution;
pub mod cli;
pub mod datagen;
pub mod embed;
pub mod error;
pub mod fairness;
pub mod gradengine;
pub mod projection;
pub mod scalar;
pub mod scoring;
pub mod seed;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = gradengine::Tensor<f64>;
pub type Tape = gradengine::Tape<f64>;
pub type ParamStore = gradengine::ParamStore<f64>;
pub type Embedder = embed::Embedder<f64>;
pub type EmbeddingMatrix = embed::EmbeddingMatrix<f64>;
pub type EncodedSet = scoring::EncodedSet<f64>;
pub type ScoringModel = scoring::ScoringModel<f64>;
pub type AdversaryHead = adversarial::AdversaryHead<f64>;
pub type IgResult = attribution::IgResult<f64>;
