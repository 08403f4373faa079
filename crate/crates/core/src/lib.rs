//! Rectified-flow synthesis of fingerprint-like embeddings and retrieval
//! scaling benchmarks built on an IVF-PQ index.
//!
//! The crate is organised by stage:
//!
//! - [`store`]: FPE1 corpora, standardization, subsampling, ground truth.
//! - [`flow`]: the time-conditioned MLP velocity network.
//! - [`train`]: the rectified-flow objective, AdamW and the cosine schedule.
//! - [`sampler`]: Euler integration and constant-memory streaming generation.
//! - [`fidelity`]: Fréchet distance, PCA and KDE-based Jensen-Shannon divergence.
//! - [`ann`]: k-means, IVF-PQ and an exact brute-force oracle.
//! - [`bench`]: hit-rate sweeps over distractor database sizes.
//! - [`fixtures`]: the frozen Gaussian-mixture desk corpus.

pub mod ann;
pub mod bench;
pub mod error;
pub mod fidelity;
pub mod fixtures;
pub mod flow;
pub(crate) mod linalg;
pub(crate) mod par;
pub mod rng;
pub mod sampler;
pub mod store;
pub mod train;

pub use error::{Error, Result};
pub use store::{EmbeddingMatrix, NormStats, QuerySet};
