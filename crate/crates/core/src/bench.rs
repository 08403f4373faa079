//! Distractor scaling experiments: top-1 hit rate of perturbed queries
//! against reference sets padded with real or synthetic distractors.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ann::{exact_search, IvfPqConfig, IvfPqIndex, Metric, SearchResult};
use crate::error::{Error, Result};
use crate::flow::FlowModelParams;
use crate::rng::{self, derive_seed};
use crate::sampler::{generate, SamplerConfig};
use crate::store::{compute_norm_stats, sample_rows, EmbeddingMatrix, NormStats, QuerySet};

pub const REPORT_SCHEMA: u32 = 1;

/// Fraction of queries whose first result is their reference. Queries with
/// no results count as misses.
pub fn hr_at_1(results: &SearchResult, truth: &BTreeMap<u64, u64>) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Config("no queries to score".into()));
    }
    let mut hits = 0usize;
    for (q, qid) in results.query_ids.iter().enumerate() {
        let target = truth
            .get(qid)
            .ok_or_else(|| Error::Config(format!("query {qid} has no ground-truth reference")))?;
        if results.top1(q) == Some(*target) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Picks `n` reference rows and adds Gaussian noise whose per-dimension std
/// is `noise_sigma` times the reference set's. Queries get ids `0..n`.
pub fn perturb_queries(refs: &EmbeddingMatrix, n: usize, noise_sigma: f64, seed: u64) -> Result<QuerySet> {
    if n > refs.count() {
        return Err(Error::Range(format!("asked for {n} queries from {} references", refs.count())));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::Range(format!("noise_sigma must be a finite non-negative number, got {noise_sigma}")));
    }
    let scale = if refs.count() >= 2 {
        compute_norm_stats(refs)?
    } else {
        NormStats::identity(refs.dim())
    };
    let picked = sample_rows(refs, n, derive_seed(seed, &[0]))?;
    let mut rng = rng::seeded(derive_seed(seed, &[1]));
    let dim = refs.dim();
    let mut data = picked.data().to_vec();
    if noise_sigma > 0.0 {
        for row in data.chunks_exact_mut(dim) {
            for (v, sd) in row.iter_mut().zip(&scale.std) {
                let eps: f64 = rng.sample(StandardNormal);
                *v = (*v as f64 + noise_sigma * *sd as f64 * eps) as f32;
            }
        }
    }
    let queries = EmbeddingMatrix::from_data(dim, data)?;
    let truth = queries.ids().iter().copied().zip(picked.ids().iter().copied()).collect();
    QuerySet::new(queries, truth)
}

/// `100 · (hr_small − hr_large) / hr_small`.
pub fn degradation(hr_small: f64, hr_large: f64) -> Result<f64> {
    if hr_small == 0.0 {
        return Err(Error::UndefinedDegradation);
    }
    Ok(100.0 * (hr_small - hr_large) / hr_small)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchBackend {
    Exact { metric: Metric },
    IvfPq(IvfPqConfig),
}

impl Default for SearchBackend {
    fn default() -> Self {
        SearchBackend::Exact { metric: Metric::L2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub distractor_sizes: Vec<usize>,
    pub trials: usize,
    pub trial_seed_base: u64,
    pub backend: SearchBackend,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            distractor_sizes: vec![0, 1_000, 10_000],
            trials: 5,
            trial_seed_base: 0,
            backend: SearchBackend::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.distractor_sizes.is_empty() {
            return Err(Error::Config("distractor_sizes is empty".into()));
        }
        if self.distractor_sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("distractor_sizes must be strictly ascending".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        Ok(())
    }
}

pub enum DistractorSource<'a> {
    RealPool(&'a EmbeddingMatrix),
    Generator {
        params: &'a FlowModelParams,
        stats: &'a NormStats,
        sampler: SamplerConfig,
    },
}

impl DistractorSource<'_> {
    pub fn kind(&self) -> &'static str {
        match self {
            DistractorSource::RealPool(_) => "real_pool",
            DistractorSource::Generator { .. } => "generator",
        }
    }

    /// `n` distractors with ids `id_base..`.
    fn draw(&self, n: usize, seed: u64, id_base: u64) -> Result<EmbeddingMatrix> {
        match self {
            DistractorSource::RealPool(pool) => {
                if n > pool.count() {
                    return Err(Error::PoolExhausted {
                        requested: n,
                        available: pool.count(),
                    });
                }
                Ok(sample_rows(pool, n, seed)?.with_sequential_ids(id_base))
            }
            DistractorSource::Generator { params, stats, sampler } => {
                if n == 0 {
                    return Ok(EmbeddingMatrix::empty(params.config().dim));
                }
                let cfg = SamplerConfig {
                    seed,
                    id_base,
                    ..*sampler
                };
                generate(params, stats, n, &cfg)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n_distractors: usize,
    pub hr1_mean: f64,
    /// Sample standard deviation over trials (zero for a single trial).
    pub hr1_std: f64,
    pub trials: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub schema: u32,
    pub source: String,
    pub trial_seed_base: u64,
    pub backend: SearchBackend,
    pub query_count: usize,
    pub reference_count: usize,
    pub points: Vec<ScalingPoint>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ScalingPoint {
    pub fn from_trials(n_distractors: usize, trials: Vec<f64>) -> Self {
        let (hr1_mean, hr1_std) = mean_std(&trials);
        ScalingPoint {
            n_distractors,
            hr1_mean,
            hr1_std,
            trials,
        }
    }
}

impl ScalingReport {
    /// `(first size, last size)` degradation of mean HR@1, in percent.
    pub fn degradation(&self) -> Result<f64> {
        let (first, last) = match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::State("report has no points".into())),
        };
        degradation(first.hr1_mean, last.hr1_mean)
    }

    pub fn to_csv(&self) -> String {
        let trials = self.points.iter().map(|p| p.trials.len()).max().unwrap_or(0);
        let mut out = String::from("n_distractors,hr1_mean,hr1_std");
        for j in 0..trials {
            out.push_str(&format!(",trial_{j}"));
        }
        out.push('\n');
        for p in &self.points {
            out.push_str(&format!("{},{},{}", p.n_distractors, p.hr1_mean, p.hr1_std));
            for j in 0..trials {
                match p.trials.get(j) {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: ScalingReport = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if report.schema != REPORT_SCHEMA {
            return Err(Error::Format(format!("unsupported report schema {}", report.schema)));
        }
        Ok(report)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Writes `<stem>.json` and `<stem>.csv`.
pub fn emit_report(report: &ScalingReport, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    report.save_json(stem.with_extension("json"))?;
    report.save_csv(stem.with_extension("csv"))
}

fn search(
    backend: &SearchBackend,
    trained: Option<&IvfPqIndex>,
    db: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
) -> Result<SearchResult> {
    match (backend, trained) {
        (SearchBackend::Exact { metric }, _) => exact_search(db, queries, 1, *metric),
        (SearchBackend::IvfPq(_), Some(index)) => {
            let mut index = index.clone();
            index.add(db)?;
            index.search(queries, 1)
        }
        (SearchBackend::IvfPq(_), None) => Err(Error::State("index was not trained".into())),
    }
}

/// For every size and trial: draw distractors, search the queries against
/// refs plus distractors, and score HR@1. Under IVF-PQ the quantizer is
/// trained once per size on refs plus the first trial's distractors.
pub fn run_sweep(
    refs: &EmbeddingMatrix,
    queries: &QuerySet,
    sweep: &SweepConfig,
    source: &DistractorSource<'_>,
) -> Result<ScalingReport> {
    sweep.validate()?;
    queries.check_targets(refs)?;
    if refs.dim() != queries.queries.dim() {
        return Err(Error::Shape(format!(
            "query dim {} != reference dim {}",
            queries.queries.dim(),
            refs.dim()
        )));
    }
    if let DistractorSource::RealPool(pool) = source {
        let largest = *sweep.distractor_sizes.last().unwrap();
        if largest > pool.count() {
            return Err(Error::PoolExhausted {
                requested: largest,
                available: pool.count(),
            });
        }
    }
    let id_base = refs.max_id().map_or(0, |m| m + 1);
    let mut points = Vec::with_capacity(sweep.distractor_sizes.len());
    for &size in &sweep.distractor_sizes {
        let mut trials = Vec::with_capacity(sweep.trials);
        let mut trained = None;
        for j in 0..sweep.trials {
            let seed = derive_seed(sweep.trial_seed_base, &[size as u64, j as u64]);
            let distractors = source.draw(size, seed, id_base)?;
            let db = EmbeddingMatrix::concat(&[refs, &distractors])?;
            if let (SearchBackend::IvfPq(cfg), None) = (&sweep.backend, &trained) {
                let mut index = IvfPqIndex::new(*cfg, refs.dim())?;
                index.train(&db)?;
                trained = Some(index);
            }
            let results = search(&sweep.backend, trained.as_ref(), &db, &queries.queries)?;
            let hr = hr_at_1(&results, &queries.truth)?;
            log::debug!("size {size} trial {j}: hr@1 {hr:.4}");
            trials.push(hr);
        }
        let point = ScalingPoint::from_trials(size, trials);
        log::info!(
            "{} distractors: hr@1 {:.4} ± {:.4}",
            size,
            point.hr1_mean,
            point.hr1_std
        );
        points.push(point);
    }
    Ok(ScalingReport {
        schema: REPORT_SCHEMA,
        source: source.kind().into(),
        trial_seed_base: sweep.trial_seed_base,
        backend: sweep.backend,
        query_count: queries.queries.count(),
        reference_count: refs.count(),
        points,
    })
}

/// Bisects `noise_sigma` so that exact search of `n_queries` perturbed
/// queries against `refs` alone scores HR@1 close to `target`.
pub fn calibrate_noise_sigma(refs: &EmbeddingMatrix, n_queries: usize, target: f64, seed: u64) -> Result<f64> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::Range(format!("target hit rate must lie in [0, 1), got {target}")));
    }
    let hr = |sigma: f64| -> Result<f64> {
        let qs = perturb_queries(refs, n_queries, sigma, seed)?;
        hr_at_1(&exact_search(refs, &qs.queries, 1, Metric::L2)?, &qs.truth)
    };
    let mut lo = 0.0;
    let mut hi = 0.1;
    while hr(hi)? > target {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::numeric("noise calibration did not bracket the target"));
        }
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if hr(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
