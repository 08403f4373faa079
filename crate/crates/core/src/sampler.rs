//! Euler integration of the learned velocity field from noise (t = 1) to
//! data (t = 0), plus constant-memory streaming of large synthetic sets.

use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{forward_into, FlowModelParams, Workspace};
use crate::rng;
use crate::store::{destandardize_in_place, EmbeddingMatrix, Fpe1Writer, NormStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Id of the first generated row.
    pub id_base: u64,
    /// Project outputs onto the unit sphere after rescaling.
    pub unit_norm: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            batch_size: 8192,
            seed: 0,
            id_base: 0,
            unit_norm: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("sampler batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Explicit Euler from `t = 1` to `t = 0` in `steps` equal steps, querying
/// the field at the start of each interval: `x ← x − Δt · v(x, t)`.
///
/// `field(x, t, out)` writes the velocity for every row of `x` into `out`.
pub fn euler_integrate_raw<F>(x: &mut [f32], steps: usize, mut field: F) -> Result<()>
where
    F: FnMut(&[f32], f32, &mut [f32]) -> Result<()>,
{
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite starting state".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut acc: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let mut v = vec![0f32; x.len()];
    for k in 0..steps {
        let t = ((steps - k) as f64 / steps as f64) as f32;
        field(x, t, &mut v)?;
        for ((xi, ai), vi) in x.iter_mut().zip(&mut acc).zip(&v) {
            *ai -= dt * *vi as f64;
            *xi = *ai as f32;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("euler step {k} (t = {t})")));
        }
    }
    Ok(())
}

/// Integrates every row of `z` to `t = 0`; ids are preserved.
pub fn euler_integrate<F>(z: &EmbeddingMatrix, steps: usize, mut field: F) -> Result<EmbeddingMatrix>
where
    F: FnMut(&EmbeddingMatrix, f32) -> Result<EmbeddingMatrix>,
{
    let mut x = z.data().to_vec();
    euler_integrate_raw(&mut x, steps, |state, t, out| {
        let m = z.with_data(state.to_vec())?;
        let v = field(&m, t)?;
        if v.data().len() != out.len() {
            return Err(Error::Shape("velocity field changed the shape".into()));
        }
        out.copy_from_slice(v.data());
        Ok(())
    })?;
    z.with_data(x)
}

/// Standard-normal starting noise for global rows `start..start + rows`.
/// Each row has its own stream, so values do not depend on batching.
pub fn noise_rows(seed: u64, start: u64, rows: usize, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * dim);
    for r in 0..rows as u64 {
        let mut rng = rng::row_stream(seed, start + r);
        out.extend((0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)));
    }
    out
}

/// Generates one batch of rescaled samples for global rows
/// `start..start + rows`.
fn generate_batch(
    params: &FlowModelParams,
    stats: &NormStats,
    start: u64,
    rows: usize,
    config: &SamplerConfig,
    ws: &mut Workspace,
) -> Result<Vec<f32>> {
    let dim = params.config().dim;
    let mut x = noise_rows(config.seed, start, rows, dim);
    let mut times = vec![0f32; rows];
    euler_integrate_raw(&mut x, config.steps, |state, t, out| {
        times.iter_mut().for_each(|v| *v = t);
        forward_into(params, state, &times, out, ws)
    })
    .map_err(|e| match e {
        Error::Numeric { context } => {
            Error::numeric(format!("rows {start}..{}: {context}", start + rows as u64))
        }
        other => other,
    })?;
    destandardize_in_place(&mut x, stats);
    if config.unit_norm {
        for row in x.chunks_exact_mut(dim) {
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
            }
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("rescaled batch at row {start}")));
    }
    Ok(x)
}

fn check_inputs(params: &FlowModelParams, stats: &NormStats, n: usize, config: &SamplerConfig) -> Result<()> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Range("n must be at least 1".into()));
    }
    if stats.dim() != params.config().dim {
        return Err(Error::Shape(format!(
            "stats dim {} does not match network dim {}",
            stats.dim(),
            params.config().dim
        )));
    }
    Ok(())
}

/// `n` synthetic fingerprints held in memory, ids `id_base..id_base + n`.
pub fn generate(
    params: &FlowModelParams,
    stats: &NormStats,
    n: usize,
    config: &SamplerConfig,
) -> Result<EmbeddingMatrix> {
    check_inputs(params, stats, n, config)?;
    let dim = params.config().dim;
    let mut ws = Workspace::default();
    let mut data = Vec::with_capacity(n * dim);
    let mut start = 0usize;
    while start < n {
        let rows = config.batch_size.min(n - start);
        data.extend(generate_batch(params, stats, start as u64, rows, config, &mut ws)?);
        start += rows;
    }
    EmbeddingMatrix::new(dim, data, (0..n as u64).map(|i| config.id_base + i).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub rows: u64,
    pub seconds: f64,
    pub rows_per_second: f64,
}

/// Streams `n` generated rows into an FPE1 file one batch at a time. The
/// bytes equal those of [`generate`] followed by a save; a failed run leaves
/// no file behind.
pub fn generate_streaming(
    params: &FlowModelParams,
    stats: &NormStats,
    n: usize,
    config: &SamplerConfig,
    sink: impl AsRef<Path>,
) -> Result<StreamSummary> {
    check_inputs(params, stats, n, config)?;
    let started = Instant::now();
    let dim = params.config().dim;
    let base = config.id_base;
    let mut writer = Fpe1Writer::create(sink, dim, n as u64, (0..n as u64).map(|i| base + i))?;
    let mut ws = Workspace::default();
    let mut start = 0usize;
    while start < n {
        let rows = config.batch_size.min(n - start);
        let batch = generate_batch(params, stats, start as u64, rows, config, &mut ws)?;
        writer.write_rows(&batch)?;
        start += rows;
    }
    writer.finish()?;
    let seconds = started.elapsed().as_secs_f64();
    Ok(StreamSummary {
        rows: n as u64,
        seconds,
        rows_per_second: n as f64 / seconds.max(1e-9),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{init_params, FlowNetConfig};
    use crate::store::{load_embeddings, save_embeddings};

    fn small_net() -> FlowModelParams {
        let cfg = FlowNetConfig {
            dim: 8,
            time_dim: 4,
            width: 16,
            expansion: 32,
            depth: 2,
        };
        let mut p = init_params(cfg, 3).unwrap();
        // scale down so the random field is tame over 50 steps
        p.values_mut().iter_mut().for_each(|v| *v *= 0.5);
        p
    }

    #[test]
    fn euler_is_exact_on_straight_paths() {
        let z = EmbeddingMatrix::from_data(3, noise_rows(1, 0, 4, 3)).unwrap();
        let target = EmbeddingMatrix::from_data(3, noise_rows(2, 0, 4, 3)).unwrap();
        for steps in [1, 10, 50, 100] {
            let out = euler_integrate(&z, steps, |_, _| {
                let v: Vec<f32> = z.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
                z.with_data(v)
            })
            .unwrap();
            for (a, b) in out.data().iter().zip(target.data()) {
                assert!((a - b).abs() < 1e-5, "T={steps}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_field_is_identity_and_one_step_unrolls() {
        let z = EmbeddingMatrix::from_data(2, vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let out = euler_integrate(&z, 7, |m, _| m.with_data(vec![0.0; 4])).unwrap();
        assert_eq!(out, z);

        // v(x, t) = t·x + 1 at t = 1: x0 = z − (z + 1) = −1
        let mut seen = Vec::new();
        let out = euler_integrate(&z, 1, |m, t| {
            seen.push(t);
            m.with_data(m.data().iter().map(|x| t * x + 1.0).collect())
        })
        .unwrap();
        assert_eq!(seen, vec![1.0]);
        assert!(out.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn euler_reports_the_failing_step() {
        let mut x = vec![1.0f32; 2];
        let err = euler_integrate_raw(&mut x, 5, |_, t, out| {
            out.fill(if t < 0.7 { f32::INFINITY } else { 0.0 });
            Ok(())
        })
        .unwrap_err();
        assert!(err.to_string().contains("euler step 2"), "{err}");
        assert!(euler_integrate_raw(&mut x, 0, |_, _, _| Ok(())).is_err());
    }

    #[test]
    fn generate_is_seeded_and_prefix_stable() {
        let p = small_net();
        let stats = NormStats {
            mean: (0..8).map(|i| i as f32).collect(),
            std: vec![2.0; 8],
        };
        let cfg = SamplerConfig {
            steps: 10,
            batch_size: 32,
            seed: 5,
            ..Default::default()
        };
        let a = generate(&p, &stats, 100, &cfg).unwrap();
        assert_eq!(a, generate(&p, &stats, 100, &cfg).unwrap());
        let long = generate(&p, &stats, 1000, &cfg).unwrap();
        assert_eq!(&long.data()[..100 * 8], a.data());
        assert_eq!(long.ids()[999], 999);
        let other = generate(&p, &stats, 100, &SamplerConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(other, a);
    }

    #[test]
    fn streaming_matches_in_memory_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = small_net();
        let stats = NormStats::identity(8);
        let cfg = SamplerConfig {
            steps: 5,
            batch_size: 16,
            seed: 9,
            id_base: 1000,
            unit_norm: false,
        };
        let n = 10 * cfg.batch_size;
        let streamed = dir.path().join("s.fpe");
        let summary = generate_streaming(&p, &stats, n, &cfg, &streamed).unwrap();
        assert_eq!(summary.rows, n as u64);
        let mem = dir.path().join("m.fpe");
        save_embeddings(&generate(&p, &stats, n, &cfg).unwrap(), &mem).unwrap();
        assert_eq!(std::fs::read(&streamed).unwrap(), std::fs::read(&mem).unwrap());

        let one = dir.path().join("one.fpe");
        generate_streaming(&p, &stats, 1, &cfg, &one).unwrap();
        let m = load_embeddings(&one).unwrap();
        assert_eq!((m.count(), m.dim(), m.ids()[0]), (1, 8, 1000));
    }

    #[test]
    fn unit_norm_rows() {
        let p = small_net();
        let cfg = SamplerConfig {
            steps: 3,
            unit_norm: true,
            ..Default::default()
        };
        let m = generate(&p, &NormStats::identity(8), 20, &cfg).unwrap();
        for row in m.rows() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mismatched_stats_are_rejected() {
        let p = small_net();
        let cfg = SamplerConfig::default();
        assert!(matches!(
            generate(&p, &NormStats::identity(3), 4, &cfg),
            Err(Error::Shape(_))
        ));
        assert!(generate(&p, &NormStats::identity(8), 0, &cfg).is_err());
    }
}
