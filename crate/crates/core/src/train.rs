//! Rectified-flow training: straight-line interpolation between data and
//! noise, velocity regression, AdamW with decoupled weight decay and a
//! per-step cosine learning-rate schedule.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fidelity::{frechet_distance, moments};
use crate::flow::{init_params, loss_and_grad, FlowModelParams, FlowNetConfig};
use crate::rng::{self, derive_seed};
use crate::sampler::{generate, SamplerConfig};
use crate::store::{compute_norm_stats, standardize, EmbeddingMatrix, NormStats};

const SEED_SPLIT: u64 = 1;
const SEED_INIT: u64 = 2;
const SEED_SHUFFLE: u64 = 3;
const SEED_NOISE: u64 = 4;
const SEED_VALIDATION: u64 = 5;

/// Fraction of the corpus held out for FD validation.
pub const HOLDOUT_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: FlowNetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub validate_every: usize,
    pub validation_sample_count: usize,
    /// Euler steps used when sampling for validation.
    pub validation_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: FlowNetConfig::default(),
            epochs: 100,
            batch_size: 512,
            lr_max: 5e-5,
            lr_min: 1e-6,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            validate_every: 10,
            validation_sample_count: 4096,
            validation_steps: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_min < self.lr_max) || self.lr_min < 0.0 {
            return Err(Error::Config(format!(
                "need 0 <= lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamW {
        AdamW {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// `t·z + (1 − t)·x`.
pub fn rf_interpolate(x: &[f32], z: &[f32], t: f32) -> Result<Vec<f32>> {
    if x.len() != z.len() {
        return Err(Error::Shape(format!("x has {} values, z {}", x.len(), z.len())));
    }
    Ok(x.iter().zip(z).map(|(a, b)| t * b + (1.0 - t) * a).collect())
}

/// Regression target `z − x`.
pub fn rf_velocity_target(x: &[f32], z: &[f32]) -> Result<Vec<f32>> {
    if x.len() != z.len() {
        return Err(Error::Shape(format!("x has {} values, z {}", x.len(), z.len())));
    }
    Ok(z.iter().zip(x).map(|(b, a)| b - a).collect())
}

/// Per-row noise `z ~ N(0, I)` and time `t ~ U[0, 1]`.
pub fn draw_noise_and_times(rows: usize, dim: usize, rng: &mut rng::Rng) -> (Vec<f32>, Vec<f32>) {
    let mut z = Vec::with_capacity(rows * dim);
    let mut t = Vec::with_capacity(rows);
    for _ in 0..rows {
        t.push(rng.random::<f32>());
        z.extend((0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)));
    }
    (z, t)
}

/// Loss of an arbitrary predictor `f(x_t, t)` on explicit `(x, z, t)`.
pub fn rf_loss_with<F>(x: &[f32], z: &[f32], t: &[f32], predictor: F) -> Result<f64>
where
    F: FnOnce(&[f32], &[f32]) -> Result<Vec<f32>>,
{
    let rows = t.len();
    if rows == 0 || x.len() != z.len() || !x.len().is_multiple_of(rows) {
        return Err(Error::Shape("inconsistent batch".into()));
    }
    let dim = x.len() / rows;
    let mut xt = Vec::with_capacity(x.len());
    for r in 0..rows {
        xt.extend(rf_interpolate(&x[r * dim..(r + 1) * dim], &z[r * dim..(r + 1) * dim], t[r])?);
    }
    let pred = predictor(&xt, t)?;
    let target = rf_velocity_target(x, z)?;
    if pred.len() != target.len() {
        return Err(Error::Shape("predictor changed the shape".into()));
    }
    let loss = pred
        .iter()
        .zip(&target)
        .map(|(p, q)| (*p as f64 - *q as f64).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::numeric("loss"))
    }
}

/// Draws noise and times for every row of a standardized batch and returns
/// the loss with gradients for every parameter.
pub fn rf_loss(
    params: &FlowModelParams,
    batch: &EmbeddingMatrix,
    rng: &mut rng::Rng,
) -> Result<(f64, Vec<f32>)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if batch.dim() != params.config().dim {
        return Err(Error::Shape(format!(
            "batch dim {} != network dim {}",
            batch.dim(),
            params.config().dim
        )));
    }
    let (z, t) = draw_noise_and_times(batch.count(), batch.dim(), rng);
    loss_and_grad(params, batch.data(), &z, &t)
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`; later
/// steps stay at `lr_min`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    let total = total_steps.max(1);
    if step >= total {
        return lr_min;
    }
    let progress = step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update: `p ← p·(1 − lr·wd)` followed by the bias-corrected
/// Adam step.
pub fn adamw_step(
    params: &mut [f32],
    grads: &[f32],
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != state.second_moment.len()
    {
        return Err(Error::Shape("parameter, gradient and state lengths differ".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(format!("gradient {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = (1.0 - lr * hp.weight_decay) as f32;
    let step_size = (lr / bc1) as f32;
    let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
    let (b1, b2, eps) = (hp.beta1 as f32, hp.beta2 as f32, hp.eps as f32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *p *= decay;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= step_size * *m / (v.sqrt() * inv_bc2_sqrt + eps);
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd: Option<f64>,
}

pub struct TrainOutcome {
    pub params: FlowModelParams,
    pub stats: NormStats,
    pub log: Vec<EpochRecord>,
}

/// Passed to the observer after every epoch. `checkpoint` marks the epochs
/// on which a checkpoint should be written.
pub struct EpochEvent<'a> {
    pub record: &'a EpochRecord,
    pub params: &'a FlowModelParams,
    pub stats: &'a NormStats,
    pub checkpoint: bool,
}

/// Seeded split of row indices into (train, holdout).
fn holdout_split(count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng::seeded(derive_seed(seed, &[SEED_SPLIT]));
    let mut idx = rand::seq::index::sample(&mut rng, count, count).into_vec();
    let hold = ((count as f64 * HOLDOUT_FRACTION).ceil() as usize).min(count.saturating_sub(1));
    let train = idx.split_off(hold);
    (train, idx)
}

pub fn train(corpus: &EmbeddingMatrix, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(corpus, config, |_| Ok(()))
}

/// Trains from scratch, invoking `observer` after each epoch. A numeric
/// failure aborts with an error naming the epoch; whatever the observer
/// persisted before that remains the last good state.
pub fn train_with_observer<F>(
    corpus: &EmbeddingMatrix,
    config: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(EpochEvent<'_>) -> Result<()>,
{
    config.validate()?;
    if corpus.dim() != config.model.dim {
        return Err(Error::Shape(format!(
            "corpus dim {} != model dim {}",
            corpus.dim(),
            config.model.dim
        )));
    }
    if corpus.count() < config.batch_size {
        return Err(Error::InsufficientData {
            needed: config.batch_size,
            got: corpus.count(),
        });
    }
    let (train_idx, hold_idx) = holdout_split(corpus.count(), config.seed);
    let train_raw = corpus.select(&train_idx)?;
    let holdout = corpus.select(&hold_idx)?;
    let holdout_moments = if holdout.count() >= 2 {
        Some(moments(&holdout)?)
    } else {
        None
    };

    let stats = compute_norm_stats(&train_raw)?;
    let data = standardize(&train_raw, &stats)?;
    let n = data.count();
    let dim = data.dim();
    let batch = config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = config.epochs * steps_per_epoch;

    let mut params = init_params(config.model, derive_seed(config.seed, &[SEED_INIT]))?;
    let mut opt = OptimizerState::new(params.len());
    let adam = config.adam();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let mut xb = Vec::with_capacity(batch * dim);

    for epoch in 1..=config.epochs {
        let mut shuffle_rng = rng::seeded(derive_seed(config.seed, &[SEED_SHUFFLE, epoch as u64]));
        let order = rand::seq::index::sample(&mut shuffle_rng, n, n).into_vec();
        let mut loss_sum = 0f64;
        let mut lr = config.lr_max;
        for chunk in order.chunks(batch) {
            xb.clear();
            for &i in chunk {
                xb.extend_from_slice(data.row(i));
            }
            let mut noise_rng = rng::seeded(derive_seed(config.seed, &[SEED_NOISE, step as u64]));
            let (z, t) = draw_noise_and_times(chunk.len(), dim, &mut noise_rng);
            let (loss, grads) = loss_and_grad(&params, &xb, &z, &t).map_err(|e| match e {
                Error::Numeric { context } => {
                    Error::numeric(format!("training diverged at epoch {epoch}, step {step}: {context}"))
                }
                other => other,
            })?;
            lr = cosine_lr(step, total_steps, config.lr_max, config.lr_min);
            adamw_step(params.values_mut(), &grads, &mut opt, lr, &adam)?;
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        if params.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("parameters diverged at epoch {epoch}")));
        }

        let validate = config.validate_every > 0 && epoch % config.validate_every == 0;
        let fd = match (&holdout_moments, validate) {
            (Some(hm), true) => {
                let sampler = SamplerConfig {
                    steps: config.validation_steps.max(1),
                    seed: derive_seed(config.seed, &[SEED_VALIDATION]),
                    ..SamplerConfig::default()
                };
                let samples = generate(&params, &stats, config.validation_sample_count.max(2), &sampler)?;
                Some(frechet_distance(&moments(&samples)?, hm)?)
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / n as f64,
            lr,
            fd,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} lr {:.3e}{}",
            record.mean_loss,
            lr,
            fd.map(|v| format!(" fd {v:.5}")).unwrap_or_default()
        );
        observer(EpochEvent {
            record: &record,
            params: &params,
            stats: &stats,
            checkpoint: validate || epoch == config.epochs,
        })?;
        log.push(record);
    }
    Ok(TrainOutcome { params, stats, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowNetConfig;

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let x = [1.0f32, 0.0];
        let z = [0.0f32, 1.0];
        assert_eq!(rf_interpolate(&x, &z, 0.0).unwrap(), x);
        assert_eq!(rf_interpolate(&x, &z, 1.0).unwrap(), z);
        assert_eq!(rf_interpolate(&x, &z, 0.5).unwrap(), [0.5, 0.5]);
        assert!(rf_interpolate(&x, &[1.0], 0.5).is_err());
    }

    #[test]
    fn velocity_target_examples() {
        assert_eq!(rf_velocity_target(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), [0.0, 0.0]);
        assert_eq!(rf_velocity_target(&[0.0, 0.0], &[3.0, -1.0]).unwrap(), [3.0, -1.0]);
        assert_eq!(rf_velocity_target(&[1.0, 2.0], &[3.0, 1.0]).unwrap(), [2.0, -1.0]);
        assert!(rf_velocity_target(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn oracle_predictor_has_zero_loss() {
        let mut r = rng::seeded(1);
        let x: Vec<f32> = (0..40).map(|_| r.sample(StandardNormal)).collect();
        let (z, t) = draw_noise_and_times(10, 4, &mut r);
        let loss = rf_loss_with(&x, &z, &t, |_, _| rf_velocity_target(&x, &z)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_is_invariant_to_row_order() {
        let cfg = FlowNetConfig {
            dim: 4,
            time_dim: 4,
            width: 8,
            expansion: 16,
            depth: 2,
        };
        let p = init_params(cfg, 2).unwrap();
        let mut r = rng::seeded(3);
        let x: Vec<f32> = (0..24).map(|_| r.sample(StandardNormal)).collect();
        let (z, t) = draw_noise_and_times(6, 4, &mut r);
        let (l1, _) = loss_and_grad(&p, &x, &z, &t).unwrap();
        let perm = [5usize, 2, 0, 4, 1, 3];
        let gather = |v: &[f32], w: usize| -> Vec<f32> {
            perm.iter().flat_map(|&i| v[i * w..(i + 1) * w].to_vec()).collect()
        };
        let (l2, _) = loss_and_grad(&p, &gather(&x, 4), &gather(&z, 4), &gather(&t, 1)).unwrap();
        assert!((l1 - l2).abs() < 1e-6 * l1);
    }

    #[test]
    fn cosine_schedule_values() {
        assert!((cosine_lr(0, 1000, 5e-5, 1e-6) - 5e-5).abs() < 1e-18);
        assert!((cosine_lr(1000, 1000, 5e-5, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(500, 1000, 5e-5, 1e-6) - 2.55e-5).abs() < 1e-15);
        assert_eq!(cosine_lr(2000, 1000, 5e-5, 1e-6), 1e-6);
        let seq: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 1.0, 0.1)).collect();
        assert!(seq.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adamw_fixed_points_and_decay() {
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = vec![0.3f32, -2.0];
        let mut s = OptimizerState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &hp).unwrap();
        assert_eq!(p, [0.3, -2.0]);
        assert_eq!(s.step, 1);

        let hp = AdamW {
            weight_decay: 0.5,
            ..AdamW::default()
        };
        let mut p = vec![1.0f32];
        let mut s = OptimizerState::new(1);
        for k in 1..=3 {
            adamw_step(&mut p, &[0.0], &mut s, 0.1, &hp).unwrap();
            assert!((p[0] - 0.95f32.powi(k)).abs() < 1e-6);
        }
        assert!(adamw_step(&mut p, &[f32::NAN], &mut s, 0.1, &hp).is_err());
    }

    /// Scalar f64 re-derivation of the update, independent of the slice code.
    fn scalar_adam(p0: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for t in 1..=steps as i32 {
            let g = 2.0 * p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = vec![1.0f32];
        let mut s = OptimizerState::new(1);
        for step in 1..=200 {
            let g = [2.0 * p[0]];
            adamw_step(&mut p, &g, &mut s, 0.1, &hp).unwrap();
            if step == 20 {
                assert!((p[0] as f64 - scalar_adam(1.0, 0.1, 20)).abs() < 1e-4);
            }
        }
        assert!(scalar_adam(1.0, 0.1, 200).abs() < 1e-2);
        assert!(p[0].abs() < 1e-2, "{}", p[0]);
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            model: FlowNetConfig {
                dim: 3,
                time_dim: 4,
                width: 8,
                expansion: 16,
                depth: 1,
            },
            epochs: 3,
            batch_size: 16,
            lr_max: 1e-3,
            lr_min: 1e-5,
            seed: 4,
            validate_every: 2,
            validation_sample_count: 32,
            validation_steps: 4,
            ..TrainConfig::default()
        }
    }

    fn tiny_corpus() -> EmbeddingMatrix {
        let mut r = rng::seeded(8);
        let data = (0..3 * 100).map(|i| r.sample::<f32, _>(StandardNormal) + (i % 3) as f32).collect();
        EmbeddingMatrix::from_data(3, data).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let cfg = tiny_train_config();
        let corpus = tiny_corpus();
        let mut checkpoints = Vec::new();
        let a = train_with_observer(&corpus, &cfg, |ev| {
            if ev.checkpoint {
                checkpoints.push(ev.record.epoch);
            }
            Ok(())
        })
        .unwrap();
        let b = train(&corpus, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.stats, b.stats);
        assert_eq!(checkpoints, [2, 3]);
        assert_eq!(a.log.len(), 3);
        assert!(a.log[1].fd.is_some() && a.log[0].fd.is_none());
        assert!(a.log.windows(2).all(|w| w[1].lr <= w[0].lr));
    }

    #[test]
    fn training_rejects_small_or_mismatched_corpora() {
        let mut cfg = tiny_train_config();
        cfg.batch_size = 1000;
        assert!(matches!(
            train(&tiny_corpus(), &cfg),
            Err(Error::InsufficientData { .. })
        ));
        let mut cfg = tiny_train_config();
        cfg.model.dim = 4;
        assert!(matches!(train(&tiny_corpus(), &cfg), Err(Error::Shape(_))));
        let mut cfg = tiny_train_config();
        cfg.lr_min = 1.0;
        assert!(train(&tiny_corpus(), &cfg).is_err());
    }

    #[test]
    fn divergence_is_reported_as_numeric() {
        let mut cfg = tiny_train_config();
        cfg.lr_max = 1e30;
        cfg.lr_min = 1e29;
        cfg.weight_decay = 0.0;
        let err = train(&tiny_corpus(), &cfg).err().expect("must diverge");
        assert!(err.is_numeric(), "{err}");
    }
}
