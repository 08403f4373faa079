//! Frozen Gaussian-mixture corpus used as a stand-in for real fingerprints.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::rng;
use crate::store::EmbeddingMatrix;

pub const MIXTURE_DIM: usize = 16;
pub const MIXTURE_COMPONENTS: usize = 8;
pub const MIXTURE_SEED: u64 = 0x6d69_7874;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub dim: usize,
    pub weights: Vec<f64>,
    /// `components × dim`.
    pub means: Vec<f32>,
    /// Per-component, per-dimension standard deviations.
    pub stds: Vec<f32>,
}

impl GaussianMixture {
    /// Means drawn from `N(0, 9 I)`, diagonal stds in `[0.3, 1.0)`, weights
    /// proportional to `U[1, 2)`.
    pub fn random(dim: usize, components: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let means = (0..dim * components)
            .map(|_| 3.0 * r.sample::<f32, _>(StandardNormal))
            .collect();
        let stds = (0..dim * components).map(|_| r.random_range(0.3f32..1.0)).collect();
        let raw: Vec<f64> = (0..components).map(|_| r.random_range(1.0..2.0)).collect();
        let total: f64 = raw.iter().sum();
        GaussianMixture {
            dim,
            weights: raw.iter().map(|w| w / total).collect(),
            means,
            stds,
        }
    }

    /// The corpus distribution: 8 components in 16 dimensions.
    pub fn frozen() -> Self {
        Self::random(MIXTURE_DIM, MIXTURE_COMPONENTS, MIXTURE_SEED)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Rows `start..start + n`, each from its own seeded stream, with ids
    /// equal to the row index. Returns the component of every row.
    pub fn sample_range(&self, start: u64, n: usize, seed: u64) -> Result<(EmbeddingMatrix, Vec<usize>)> {
        let d = self.dim;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for row in start..start + n as u64 {
            let mut r = rng::row_stream(seed, row);
            let u: f64 = r.random();
            let mut acc = 0.0;
            let c = self
                .weights
                .iter()
                .position(|w| {
                    acc += w;
                    u < acc
                })
                .unwrap_or(self.components() - 1);
            for j in 0..d {
                let eps: f32 = r.sample(StandardNormal);
                data.push(self.means[c * d + j] + self.stds[c * d + j] * eps);
            }
            labels.push(c);
        }
        let m = EmbeddingMatrix::from_data(d, data)?.with_sequential_ids(start);
        Ok((m, labels))
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<EmbeddingMatrix> {
        Ok(self.sample_range(0, n, seed)?.0)
    }
}

/// `n` rows of the frozen mixture.
pub fn mixture_corpus(n: usize) -> Result<EmbeddingMatrix> {
    GaussianMixture::frozen().sample(n, MIXTURE_SEED)
}
