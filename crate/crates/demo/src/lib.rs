//! In-browser playground over the core crate: fit a small flow to a 2-D
//! Gaussian mixture, integrate Euler trajectories from noise to data, and
//! run a miniature distractor sweep.
//!
//! [`Playground`] and [`scaling_sweep`] hold the logic and are plain Rust;
//! the `wasm_bindgen` wrappers at the bottom only translate errors.

use ldb_core::bench::{calibrate_noise_sigma, perturb_queries, run_sweep, DistractorSource, SweepConfig};
use ldb_core::fixtures::GaussianMixture;
use ldb_core::flow::{forward_into, FlowNetConfig, Workspace};
use ldb_core::sampler::{euler_integrate_raw, generate, noise_rows, SamplerConfig};
use ldb_core::store::EmbeddingMatrix;
use ldb_core::train::{train_with_observer, TrainConfig, TrainOutcome};
use ldb_core::Result;
use wasm_bindgen::prelude::*;

pub struct Playground {
    points: EmbeddingMatrix,
    model: Option<TrainOutcome>,
}

impl Playground {
    pub fn new(components: usize, n: usize, seed: u64) -> Result<Self> {
        let points = GaussianMixture::random(2, components, seed).sample(n, seed ^ 1)?;
        Ok(Playground { points, model: None })
    }

    /// Interleaved `x, y` coordinates of the training points.
    pub fn real_points(&self) -> &[f32] {
        self.points.data()
    }

    /// Trains from scratch and returns the mean loss of every epoch.
    pub fn fit(&mut self, epochs: usize, width: usize, seed: u64) -> Result<Vec<f64>> {
        let config = TrainConfig {
            model: FlowNetConfig {
                dim: 2,
                time_dim: 16,
                width,
                expansion: 2 * width,
                depth: 2,
            },
            epochs,
            batch_size: 256,
            lr_max: 3e-3,
            lr_min: 1e-4,
            seed,
            validate_every: 0,
            ..TrainConfig::default()
        };
        let mut losses = Vec::with_capacity(epochs);
        let outcome = train_with_observer(&self.points, &config, |ev| {
            losses.push(ev.record.mean_loss);
            Ok(())
        })?;
        self.model = Some(outcome);
        Ok(losses)
    }

    pub fn is_trained(&self) -> bool {
        self.model.is_some()
    }

    fn trained(&self) -> Result<&TrainOutcome> {
        self.model
            .as_ref()
            .ok_or_else(|| ldb_core::Error::State("train the model first".into()))
    }

    /// Interleaved `x, y` coordinates of `n` generated points.
    pub fn sample(&self, n: usize, steps: usize, seed: u64) -> Result<Vec<f32>> {
        let m = self.trained()?;
        let config = SamplerConfig {
            steps,
            seed,
            ..SamplerConfig::default()
        };
        Ok(generate(&m.params, &m.stats, n, &config)?.into_parts().1)
    }

    /// Positions of `n` particles at every Euler step, `steps + 1` frames of
    /// `n` interleaved `x, y` pairs, starting from the noise at `t = 1`.
    pub fn trajectories(&self, n: usize, steps: usize, seed: u64) -> Result<Vec<f32>> {
        let m = self.trained()?;
        let mut x = noise_rows(seed, 0, n, 2);
        let mut frames = Vec::with_capacity((steps + 1) * x.len());
        let mut times = vec![0f32; n];
        let mut ws = Workspace::default();
        euler_integrate_raw(&mut x, steps, |state, t, out| {
            frames.extend_from_slice(state);
            times.iter_mut().for_each(|v| *v = t);
            forward_into(&m.params, state, &times, out, &mut ws)
        })?;
        frames.extend_from_slice(&x);
        for pair in frames.chunks_exact_mut(2) {
            for (d, v) in pair.iter_mut().enumerate() {
                *v = *v * m.stats.std[d] + m.stats.mean[d];
            }
        }
        Ok(frames)
    }
}

/// HR@1 against distractor count on a 16-D mixture with a real pool. Returns
/// the scaling report as JSON.
pub fn scaling_sweep(sizes: &[usize], trials: usize, target_hr: f64, seed: u64) -> Result<String> {
    let mixture = GaussianMixture::frozen();
    let largest = sizes.iter().copied().max().unwrap_or(0);
    let (refs, _) = mixture.sample_range(0, 300, seed)?;
    let (pool, _) = mixture.sample_range(300, largest.max(1), seed)?;
    let sigma = calibrate_noise_sigma(&refs, 300, target_hr, seed)?;
    let queries = perturb_queries(&refs, 300, sigma, seed)?;
    let sweep = SweepConfig {
        distractor_sizes: sizes.to_vec(),
        trials,
        trial_seed_base: seed,
        ..SweepConfig::default()
    };
    let report = run_sweep(&refs, &queries, &sweep, &DistractorSource::RealPool(&pool))?;
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

fn js(e: ldb_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = Playground)]
pub struct JsPlayground(Playground);

#[wasm_bindgen(js_class = Playground)]
impl JsPlayground {
    #[wasm_bindgen(constructor)]
    pub fn new(components: usize, n: usize, seed: u64) -> std::result::Result<JsPlayground, JsError> {
        Playground::new(components, n, seed).map(JsPlayground).map_err(js)
    }

    #[wasm_bindgen(js_name = realPoints)]
    pub fn real_points(&self) -> Vec<f32> {
        self.0.real_points().to_vec()
    }

    pub fn fit(&mut self, epochs: usize, width: usize, seed: u64) -> std::result::Result<Vec<f64>, JsError> {
        self.0.fit(epochs, width, seed).map_err(js)
    }

    #[wasm_bindgen(js_name = isTrained)]
    pub fn is_trained(&self) -> bool {
        self.0.is_trained()
    }

    pub fn sample(&self, n: usize, steps: usize, seed: u64) -> std::result::Result<Vec<f32>, JsError> {
        self.0.sample(n, steps, seed).map_err(js)
    }

    pub fn trajectories(&self, n: usize, steps: usize, seed: u64) -> std::result::Result<Vec<f32>, JsError> {
        self.0.trajectories(n, steps, seed).map_err(js)
    }
}

#[wasm_bindgen(js_name = scalingSweep)]
pub fn js_scaling_sweep(sizes: Vec<u32>, trials: usize, target_hr: f64, seed: u64) -> std::result::Result<String, JsError> {
    let sizes: Vec<usize> = sizes.into_iter().map(|s| s as usize).collect();
    scaling_sweep(&sizes, trials, target_hr, seed).map_err(js)
}
