//! Distribution-level comparisons between real and synthetic fingerprints.
//!
//! - [`frechet_distance`] between Gaussian fits (squared, FID convention).
//! - [`pca_fit`] and a KDE-based Jensen-Shannon divergence in nats over the
//!   top principal components of the real set.
//! - A 2-D projection export for scatter plots.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::store::EmbeddingMatrix;

pub const LN_2: f64 = std::f64::consts::LN_2;
const KDE_VARIANCE_FLOOR: f64 = 1e-9;
const SYMMETRY_TOL: f64 = 1e-6;

/// Empirical mean and covariance (n − 1 denominator).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub covariance: Vec<f64>,
}

impl GaussianMoments {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.covariance)
    }
}

pub fn moments(m: &EmbeddingMatrix) -> Result<GaussianMoments> {
    let n = m.count();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let d = m.dim();
    let mut mean = vec![0f64; d];
    for row in m.rows() {
        mean.iter_mut().zip(row).for_each(|(s, &v)| *s += v as f64);
    }
    mean.iter_mut().for_each(|s| *s /= n as f64);

    let mut cov = vec![0f64; d * d];
    let mut centered = vec![0f64; d];
    for row in m.rows() {
        centered
            .iter_mut()
            .zip(row)
            .zip(&mean)
            .for_each(|((c, &v), mu)| *c = v as f64 - mu);
        for i in 0..d {
            let ci = centered[i];
            let out = &mut cov[i * d..i * d + i + 1];
            for (o, cj) in out.iter_mut().zip(&centered[..=i]) {
                *o += ci * cj;
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(GaussianMoments {
        mean,
        covariance: cov,
    })
}

fn check_symmetric(c: &DMatrix<f64>) -> Result<()> {
    let asym = (c - c.transpose()).amax();
    if asym >= SYMMETRY_TOL {
        return Err(Error::Validation(format!(
            "covariance is not symmetric (max deviation {asym:e})"
        )));
    }
    Ok(())
}

fn symmetric_eigen(c: &DMatrix<f64>) -> Result<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
    c.clone()
        .try_symmetric_eigen(1e-14, 10_000)
        .ok_or_else(|| Error::numeric("symmetric eigendecomposition did not converge"))
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues are
/// clamped to zero.
pub fn psd_sqrt(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(c)?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `‖μa − μb‖² + tr(Ca + Cb − 2·(Ca^½ Cb Ca^½)^½)`.
pub fn frechet_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dims {} and {}", a.dim(), b.dim())));
    }
    let ca = a.cov_matrix();
    let cb = b.cov_matrix();
    check_symmetric(&ca)?;
    check_symmetric(&cb)?;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let ra = psd_sqrt(&ca)?;
    let mut inner = &ra * &cb * &ra;
    inner = (&inner + inner.transpose()) * 0.5;
    let trace_root: f64 = symmetric_eigen(&inner)?
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let fd = mean_term + ca.trace() + cb.trace() - 2.0 * trace_root;
    if !fd.is_finite() {
        return Err(Error::numeric("frechet distance"));
    }
    Ok(fd.max(0.0))
}

/// Fréchet distance between the Gaussian fits of two sets.
pub fn frechet_distance_sets(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<f64> {
    frechet_distance(&moments(a)?, &moments(b)?)
}

/// Top-`k` principal axes of a data set.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    /// Row-major `k x dim`, orthonormal rows.
    pub components: Vec<f64>,
    pub center: Vec<f64>,
    pub explained_variance: Vec<f64>,
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.explained_variance.len()
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.components[i * d..(i + 1) * d]
    }

    /// Coordinates of every row, row-major `count x k`.
    pub fn project(&self, m: &EmbeddingMatrix) -> Result<Vec<f64>> {
        if m.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "data dim {} != basis dim {}",
                m.dim(),
                self.dim()
            )));
        }
        let k = self.k();
        let mut out = Vec::with_capacity(m.count() * k);
        let mut centered = vec![0f64; self.dim()];
        for row in m.rows() {
            centered
                .iter_mut()
                .zip(row)
                .zip(&self.center)
                .for_each(|((c, &v), mu)| *c = v as f64 - mu);
            for i in 0..k {
                out.push(self.component(i).iter().zip(&centered).map(|(a, b)| a * b).sum());
            }
        }
        Ok(out)
    }

    /// Maps coordinates back to the ambient space.
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let (k, d) = (self.k(), self.dim());
        let mut out = Vec::with_capacity(coords.len() / k * d);
        for c in coords.chunks_exact(k) {
            for j in 0..d {
                out.push(self.center[j] + (0..k).map(|i| c[i] * self.components[i * d + j]).sum::<f64>());
            }
        }
        out
    }
}

/// Principal components from the eigendecomposition of the sample
/// covariance. Each component's largest-magnitude entry is made positive.
pub fn pca_fit(m: &EmbeddingMatrix, k: usize) -> Result<PcaBasis> {
    let limit = m.dim().min(m.count().saturating_sub(1));
    if k == 0 || k > limit {
        return Err(Error::Range(format!(
            "k={k} must be in 1..={limit} for {} rows of dim {}",
            m.count(),
            m.dim()
        )));
    }
    let mom = moments(m)?;
    let eig = symmetric_eigen(&mom.cov_matrix())?;
    let d = m.dim();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut components = Vec::with_capacity(k * d);
    let mut explained = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let col: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
        let pivot = col
            .iter()
            .enumerate()
            .fold((0usize, 0f64), |best, (i, v)| {
                if v.abs() > best.1.abs() + 1e-12 {
                    (i, *v)
                } else {
                    best
                }
            })
            .1;
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|v| v * sign));
        explained.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(PcaBasis {
        components,
        center: mom.mean,
        explained_variance: explained,
    })
}

/// Gaussian product-kernel density estimate with per-dimension Scott
/// bandwidths `σ_j · n^(-1/(k+4))`.
struct Kde {
    k: usize,
    /// Points divided by the bandwidth, row-major.
    scaled: Vec<f64>,
    bandwidth: Vec<f64>,
    log_norm: f64,
}

impl Kde {
    fn fit(points: &[f64], k: usize) -> Self {
        let n = points.len() / k;
        let mut mean = vec![0f64; k];
        for p in points.chunks_exact(k) {
            mean.iter_mut().zip(p).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0f64; k];
        for p in points.chunks_exact(k) {
            var.iter_mut()
                .zip(p)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m) * (v - m));
        }
        let factor = (n as f64).powf(-1.0 / (k as f64 + 4.0));
        let bandwidth: Vec<f64> = var
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let mut v = s / (n.max(2) - 1) as f64;
                if v < KDE_VARIANCE_FLOOR {
                    log::warn!("KDE dimension {j} has variance {v:e}; flooring at {KDE_VARIANCE_FLOOR:e}");
                    v = KDE_VARIANCE_FLOOR;
                }
                v.sqrt() * factor
            })
            .collect();
        let scaled = points
            .chunks_exact(k)
            .flat_map(|p| p.iter().zip(&bandwidth).map(|(v, h)| v / h).collect::<Vec<_>>())
            .collect();
        let log_norm = -(n as f64).ln()
            - bandwidth.iter().map(|h| h.ln()).sum::<f64>()
            - 0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln();
        Kde {
            k,
            scaled,
            bandwidth,
            log_norm,
        }
    }

    fn log_density(&self, y: &[f64]) -> f64 {
        let ys: Vec<f64> = y.iter().zip(&self.bandwidth).map(|(v, h)| v / h).collect();
        let mut exps = Vec::with_capacity(self.scaled.len() / self.k);
        let mut max = f64::NEG_INFINITY;
        for p in self.scaled.chunks_exact(self.k) {
            let e = -0.5 * p.iter().zip(&ys).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            max = max.max(e);
            exps.push(e);
        }
        let sum: f64 = exps.iter().map(|e| (e - max).exp()).sum();
        max + sum.ln() + self.log_norm
    }

    fn sample(&self, count: usize, rng: &mut rng::Rng) -> Vec<f64> {
        let n = self.scaled.len() / self.k;
        let mut out = Vec::with_capacity(count * self.k);
        for _ in 0..count {
            let i = rng.random_range(0..n);
            for j in 0..self.k {
                let z: f64 = rng.sample(StandardNormal);
                out.push((self.scaled[i * self.k + j] + z) * self.bandwidth[j]);
            }
        }
        out
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Mean over `points` of `log p(y) − log m(y)` with `m = (p + q)/2`.
fn mean_log_ratio(points: &[f64], own: &Kde, other: &Kde) -> f64 {
    let k = own.k;
    let terms: Vec<f64> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            points
                .par_chunks_exact(k)
                .map(|y| {
                    let lp = own.log_density(y);
                    lp - (log_add_exp(lp, other.log_density(y)) - LN_2)
                })
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            points
                .chunks_exact(k)
                .map(|y| {
                    let lp = own.log_density(y);
                    lp - (log_add_exp(lp, other.log_density(y)) - LN_2)
                })
                .collect()
        }
    };
    terms.iter().sum::<f64>() / terms.len() as f64
}

/// A Jensen-Shannon estimate: `value` is clamped to `[0, ln 2]`, `raw` is the
/// Monte Carlo estimate before clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JsEstimate {
    pub value: f64,
    pub raw: f64,
}

/// JS divergence between `a` and `b` after projecting both onto `basis`.
pub fn js_divergence_in_basis(
    basis: &PcaBasis,
    a: &EmbeddingMatrix,
    b: &EmbeddingMatrix,
    eval_samples: usize,
    seed: u64,
) -> Result<JsEstimate> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            got: a.count().min(b.count()),
        });
    }
    if eval_samples == 0 {
        return Err(Error::Range("eval_samples must be positive".into()));
    }
    let k = basis.k();
    let kde_a = Kde::fit(&basis.project(a)?, k);
    let kde_b = Kde::fit(&basis.project(b)?, k);
    let mut rng = rng::seeded(seed);
    let from_a = kde_a.sample(eval_samples, &mut rng);
    let from_b = kde_b.sample(eval_samples, &mut rng);
    let raw = 0.5 * mean_log_ratio(&from_a, &kde_a, &kde_b) + 0.5 * mean_log_ratio(&from_b, &kde_b, &kde_a);
    if !raw.is_finite() {
        return Err(Error::numeric("JS divergence estimate"));
    }
    Ok(JsEstimate {
        value: raw.clamp(0.0, LN_2),
        raw,
    })
}

/// JS divergence (nats) between `real` and `other` over the top-`k`
/// principal components of `real`.
pub fn js_divergence_kde(
    real: &EmbeddingMatrix,
    other: &EmbeddingMatrix,
    k: usize,
    eval_samples: usize,
    seed: u64,
) -> Result<JsEstimate> {
    if real.dim() != other.dim() {
        return Err(Error::Shape(format!("dims {} and {}", real.dim(), other.dim())));
    }
    if k > real.dim() {
        return Err(Error::Range(format!("k={k} exceeds dim {}", real.dim())));
    }
    let basis = pca_fit(real, k)?;
    js_divergence_in_basis(&basis, real, other, eval_samples, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Real,
    Synthetic,
    Noise,
}

impl PointLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PointLabel::Real => "real",
            PointLabel::Synthetic => "synthetic",
            PointLabel::Noise => "noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

/// Projects all three sets onto the top two principal components of `real`.
pub fn export_projection_2d(
    real: &EmbeddingMatrix,
    synthetic: &EmbeddingMatrix,
    noise: &EmbeddingMatrix,
) -> Result<Vec<ProjectedPoint>> {
    if synthetic.dim() != real.dim() || noise.dim() != real.dim() {
        return Err(Error::Shape("all sets must share one dimension".into()));
    }
    let basis = pca_fit(real, 2)?;
    let mut out = Vec::with_capacity(real.count() + synthetic.count() + noise.count());
    for (set, label) in [
        (real, PointLabel::Real),
        (synthetic, PointLabel::Synthetic),
        (noise, PointLabel::Noise),
    ] {
        let coords = basis.project(set)?;
        out.extend(coords.chunks_exact(2).map(|c| ProjectedPoint {
            x: c[0],
            y: c[1],
            label,
        }));
    }
    Ok(out)
}

pub fn write_projection_csv(points: &[ProjectedPoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "x,y,label")?;
    for p in points {
        writeln!(out, "{},{},{}", p.x, p.y, p.label.as_str())?;
    }
    Ok(())
}

/// Metrics document emitted by the fidelity command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub fd: f64,
    pub js_vs_real: f64,
    pub js_vs_noise: f64,
    pub k: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl FidelityReport {
    /// FD(synthetic, real), JS(synthetic ‖ real) and JS(synthetic ‖ noise),
    /// both JS values over the principal components of `real`.
    pub fn compute(
        real: &EmbeddingMatrix,
        synthetic: &EmbeddingMatrix,
        noise: &EmbeddingMatrix,
        k: usize,
        eval_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if synthetic.dim() != real.dim() || noise.dim() != real.dim() {
            return Err(Error::Shape("all sets must share one dimension".into()));
        }
        let k = k.min(real.dim());
        let basis = pca_fit(real, k)?;
        Ok(FidelityReport {
            fd: frechet_distance_sets(synthetic, real)?,
            js_vs_real: js_divergence_in_basis(&basis, synthetic, real, eval_samples, seed)?.value,
            js_vs_noise: js_divergence_in_basis(&basis, synthetic, noise, eval_samples, seed)?.value,
            k,
            eval_samples,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `count` rows of standard normal noise.
pub fn gaussian_noise(dim: usize, count: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = rng::seeded(seed);
    let data = (0..dim * count).map(|_| rng.sample(StandardNormal)).collect();
    EmbeddingMatrix::from_data(dim, data).expect("finite noise")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(dim: usize, n: usize, mean: f32, std: f32, seed: u64) -> EmbeddingMatrix {
        let g = gaussian_noise(dim, n, seed);
        let data = g.data().iter().map(|v| v * std + mean).collect();
        EmbeddingMatrix::from_data(dim, data).unwrap()
    }

    fn diag(mean: Vec<f64>, var: &[f64]) -> GaussianMoments {
        let d = var.len();
        let mut covariance = vec![0.0; d * d];
        for i in 0..d {
            covariance[i * d + i] = var[i];
        }
        GaussianMoments { mean, covariance }
    }

    #[test]
    fn moments_hand_example() {
        let m = EmbeddingMatrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let g = moments(&m).unwrap();
        assert_eq!(g.mean, vec![1.0, 0.0]);
        assert_eq!(g.covariance, vec![2.0, 0.0, 0.0, 0.0]);
        assert!(moments(&m.slice(0, 1)).is_err());
    }

    #[test]
    fn moments_of_standard_normal() {
        let g = moments(&gaussian(8, 100_000, 0.0, 1.0, 3)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.covariance[i * 8 + j] - want).abs() < 0.05);
            }
        }
    }

    #[test]
    fn duplicated_rows_rescale_covariance() {
        let m = gaussian(3, 50, 1.0, 2.0, 4);
        let doubled = EmbeddingMatrix::new(
            3,
            [m.data(), m.data()].concat(),
            (0..100).collect(),
        )
        .unwrap();
        let (a, b) = (moments(&m).unwrap(), moments(&doubled).unwrap());
        let n = m.count() as f64;
        // Σ over the doubled set is twice the original scatter, over 2n − 1.
        let factor = 2.0 * (n - 1.0) / (2.0 * n - 1.0);
        for (x, y) in a.mean.iter().zip(&b.mean) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in a.covariance.iter().zip(&b.covariance) {
            assert!((x * factor - y).abs() < 1e-6);
        }
    }

    #[test]
    fn frechet_analytic_cases() {
        let a = moments(&gaussian(5, 200, 0.3, 1.7, 8)).unwrap();
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        for mu in [0.5, 1.0, 2.0] {
            let fd = frechet_distance(&diag(vec![0.0], &[1.0]), &diag(vec![mu], &[1.0])).unwrap();
            assert!((fd - mu * mu).abs() < 1e-6);
        }
        let fd = frechet_distance(&diag(vec![0.0; 3], &[1.0; 3]), &diag(vec![0.0; 3], &[4.0; 3]))
            .unwrap();
        assert!((fd - 3.0).abs() < 1e-4);
    }

    #[test]
    fn frechet_is_symmetric_and_rejects_asymmetry() {
        let a = moments(&gaussian(4, 300, 0.0, 1.0, 1)).unwrap();
        let b = moments(&gaussian(4, 300, 0.5, 2.0, 2)).unwrap();
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!(ab >= 0.0);
        assert!((ab - ba).abs() < 1e-6);

        let mut bad = a.clone();
        bad.covariance[1] += 0.1;
        assert!(matches!(frechet_distance(&bad, &b), Err(Error::Validation(_))));
        assert!(frechet_distance(&a, &diag(vec![0.0], &[1.0])).is_err());
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let mut r = rng::seeded(17);
        for d in [2usize, 5, 12] {
            let a = DMatrix::from_fn(d, d, |_, _| r.sample::<f64, _>(StandardNormal));
            let c = &a * a.transpose();
            let s = psd_sqrt(&c).unwrap();
            let back = &s * &s;
            assert!((back - &c).amax() <= 1e-4 * c.amax());
        }
    }

    #[test]
    fn pca_on_a_line() {
        let rows: Vec<Vec<f32>> = (0..20).map(|i| vec![i as f32, 2.0 * i as f32]).collect();
        let p = pca_fit(&EmbeddingMatrix::from_rows(&rows).unwrap(), 2).unwrap();
        let c0 = p.component(0);
        let s5 = 5f64.sqrt();
        assert!((c0[0] - 1.0 / s5).abs() < 1e-6 && (c0[1] - 2.0 / s5).abs() < 1e-6);
        assert!(p.explained_variance[1] < 1e-6);
    }

    #[test]
    fn pca_isotropic_and_orthonormal() {
        let p = pca_fit(&gaussian(4, 100_000, 0.0, 1.0, 6), 4).unwrap();
        let ev = &p.explained_variance;
        assert!(ev.windows(2).all(|w| w[0] >= w[1]));
        assert!(ev[0] / ev[3] < 1.1);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = p.component(i).iter().zip(p.component(j)).map(|(a, b)| a * b).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn pca_reconstructs_low_rank_data() {
        // rank-2 data embedded in 5 dimensions
        let mut r = rng::seeded(2);
        let rows: Vec<Vec<f32>> = (0..50)
            .map(|_| {
                let (a, b): (f32, f32) = (r.sample(StandardNormal), r.sample(StandardNormal));
                vec![a, b, a + b, a - 2.0 * b, 0.5 * a]
            })
            .collect();
        let m = EmbeddingMatrix::from_rows(&rows).unwrap();
        let p = pca_fit(&m, 2).unwrap();
        let back = p.reconstruct(&p.project(&m).unwrap());
        for (x, y) in m.data().iter().zip(&back) {
            assert!((*x as f64 - y).abs() < 1e-4);
        }
        assert!(matches!(pca_fit(&m, 6), Err(Error::Range(_))));
    }

    #[test]
    fn js_identity_and_saturation() {
        let x = gaussian(20, 2000, 0.0, 1.0, 31);
        let same = js_divergence_kde(&x, &x, 20, 2000, 1).unwrap();
        assert!(same.value < 0.02, "{same:?}");

        let a = gaussian(20, 1000, 100.0, 1.0, 32);
        let b = gaussian(20, 1000, -100.0, 1.0, 33);
        let far = js_divergence_kde(&a, &b, 20, 2000, 2).unwrap();
        assert!((far.value - LN_2).abs() < 0.01, "{far:?}");
        assert!(far.raw - LN_2 < 0.02);
    }

    #[test]
    fn js_is_bounded_and_shape_checked() {
        let a = gaussian(4, 200, 0.0, 1.0, 1);
        let b = gaussian(4, 200, 0.7, 1.3, 2);
        let js = js_divergence_kde(&a, &b, 4, 500, 3).unwrap();
        assert!((0.0..=LN_2).contains(&js.value));
        assert!(js_divergence_kde(&a, &b, 5, 500, 3).is_err());
        assert!(js_divergence_kde(&a, &gaussian(3, 10, 0.0, 1.0, 1), 2, 10, 3).is_err());
    }

    #[test]
    fn projection_export() {
        let real = EmbeddingMatrix::from_rows(
            &(0..30).map(|i| vec![i as f32, (i % 3) as f32 * 0.1, 0.0]).collect::<Vec<_>>(),
        )
        .unwrap();
        let syn = gaussian(3, 7, 0.0, 1.0, 1);
        let noise = gaussian(3, 5, 0.0, 1.0, 2);
        let pts = export_projection_2d(&real, &syn, &noise).unwrap();
        assert_eq!(pts.len(), 42);
        let count = |l| pts.iter().filter(|p| p.label == l).count();
        assert_eq!(
            (count(PointLabel::Real), count(PointLabel::Synthetic), count(PointLabel::Noise)),
            (30, 7, 5)
        );
        let var = |f: fn(&ProjectedPoint) -> f64| {
            let v: Vec<f64> = pts.iter().filter(|p| p.label == PointLabel::Real).map(f).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        };
        assert!(var(|p| p.x) >= var(|p| p.y));

        let mut csv = Vec::new();
        write_projection_csv(&pts, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("x,y,label\n"));
        assert_eq!(text.lines().count(), 43);
    }
}
