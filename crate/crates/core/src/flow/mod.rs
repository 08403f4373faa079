//! Time-conditioned MLP velocity network.
//!
//! ```text
//! x ──in──▶ h ──[block]×depth──▶ out ──▶ v̂(x, t)
//! block:  h ← h + W2 · gelu(W1 · (ln(h) ⊙ (1 + γ) + β) + b1) + b2
//!         [γ, β] = Wm · τ(t) + bm
//! ```
//!
//! All parameters live in one flat `f32` buffer; [`ParamLayout`] names the
//! tensor slices inside it. Linear weights are stored `[out, in]`.

mod backward;
mod checkpoint;

pub use backward::loss_and_grad;
pub use checkpoint::{load_checkpoint, load_checkpoint_stats, save_checkpoint, CheckpointMeta};
pub use backward::input_jvp;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, Layout};
use crate::rng;
use crate::store::EmbeddingMatrix;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Phase multiplier applied to `t` before the sinusoids.
pub const TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowNetConfig {
    pub dim: usize,
    pub time_dim: usize,
    pub width: usize,
    pub expansion: usize,
    pub depth: usize,
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        FlowNetConfig {
            dim: 128,
            time_dim: 32,
            width: 768,
            expansion: 3072,
            depth: 12,
        }
    }
}

impl FlowNetConfig {
    pub fn validate(&self) -> Result<()> {
        let FlowNetConfig {
            dim,
            time_dim,
            width,
            expansion,
            depth,
        } = *self;
        if dim == 0 || time_dim == 0 || width == 0 || expansion == 0 || depth == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if expansion < width {
            return Err(Error::Config(format!(
                "expansion {expansion} is smaller than width {width}"
            )));
        }
        if time_dim % 2 != 0 {
            return Err(Error::Config(format!("time_dim {time_dim} must be even")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        ParamLayout::new(self).total
    }
}

/// Offsets of one residual block's tensors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockOffsets {
    pub mod_w: usize,
    pub mod_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Offsets and shapes of every tensor in the flat buffer.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub(crate) in_w: usize,
    pub(crate) in_b: usize,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) out_w: usize,
    pub(crate) out_b: usize,
    pub(crate) total: usize,
    tensors: Vec<TensorSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements.
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ParamLayout {
    pub fn new(c: &FlowNetConfig) -> Self {
        let mut tensors = Vec::new();
        let mut next = 0usize;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = next;
            next += shape.iter().product::<usize>();
            tensors.push(TensorSpec {
                name,
                shape,
                offset,
            });
            offset
        };
        let in_w = push("input.weight".into(), vec![c.width, c.dim]);
        let in_b = push("input.bias".into(), vec![c.width]);
        let blocks = (0..c.depth)
            .map(|i| BlockOffsets {
                mod_w: push(format!("blocks.{i}.adaln.weight"), vec![2 * c.width, c.time_dim]),
                mod_b: push(format!("blocks.{i}.adaln.bias"), vec![2 * c.width]),
                w1: push(format!("blocks.{i}.linear1.weight"), vec![c.expansion, c.width]),
                b1: push(format!("blocks.{i}.linear1.bias"), vec![c.expansion]),
                w2: push(format!("blocks.{i}.linear2.weight"), vec![c.width, c.expansion]),
                b2: push(format!("blocks.{i}.linear2.bias"), vec![c.width]),
            })
            .collect();
        let out_w = push("output.weight".into(), vec![c.dim, c.width]);
        let out_b = push("output.bias".into(), vec![c.dim]);
        ParamLayout {
            in_w,
            in_b,
            blocks,
            out_w,
            out_b,
            total: next,
            tensors,
        }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Weights of the velocity network plus its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModelParams {
    config: FlowNetConfig,
    values: Vec<f32>,
}

impl FlowModelParams {
    pub fn from_values(config: FlowNetConfig, values: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_count();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "{} parameter values for a network of {expected}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(FlowModelParams { config, values })
    }

    pub fn zeros(config: FlowNetConfig) -> Result<Self> {
        Self::from_values(config, vec![0.0; config.param_count()])
    }

    pub fn config(&self) -> &FlowNetConfig {
        &self.config
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Slice of the named tensor, if it exists.
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.layout()
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.values[t.offset..t.offset + t.len()])
    }
}

/// Uniform fan-in initialization (bound `1/sqrt(fan_in)` for weights and
/// biases) with every AdaLN projection set to zero.
pub fn init_params(config: FlowNetConfig, seed: u64) -> Result<FlowModelParams> {
    config.validate()?;
    let layout = ParamLayout::new(&config);
    let mut values = vec![0f32; layout.total];
    let mut rng = rng::seeded(seed);
    for spec in &layout.tensors {
        if spec.name.contains(".adaln.") {
            continue;
        }
        let fan_in = fan_in(&spec.name, &spec.shape, &config);
        let bound = 1.0 / (fan_in as f32).sqrt();
        for v in &mut values[spec.offset..spec.offset + spec.len()] {
            *v = rng.random_range(-bound..=bound);
        }
    }
    Ok(FlowModelParams { config, values })
}

fn fan_in(name: &str, shape: &[usize], c: &FlowNetConfig) -> usize {
    if name.ends_with(".weight") {
        shape[1]
    } else if name.starts_with("input") {
        c.dim
    } else if name.ends_with("linear2.bias") {
        c.expansion
    } else {
        c.width
    }
}

/// A diffusion time in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TimeValue(f32);

impl TimeValue {
    pub fn new(t: f32) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(TimeValue(t))
        } else {
            Err(Error::Domain(format!("time {t} outside [0, 1]")))
        }
    }

    pub fn get(self) -> f32 {
        self.0
    }
}

/// Sinusoidal embedding `[sin(1000·t·ω_k), cos(1000·t·ω_k)]` with geometric
/// frequencies `ω_k = 10000^(-k/(half-1))`.
pub fn time_embed(t: TimeValue, time_dim: usize) -> Result<Vec<f32>> {
    if time_dim == 0 || !time_dim.is_multiple_of(2) {
        return Err(Error::Config(format!("time_dim {time_dim} must be even")));
    }
    let mut out = vec![0f32; time_dim];
    write_time_embed(t.0, &mut out);
    Ok(out)
}

fn write_time_embed(t: f32, out: &mut [f32]) {
    let half = out.len() / 2;
    let step = if half > 1 {
        (10000f64).ln() / (half - 1) as f64
    } else {
        0.0
    };
    let phase = TIME_SCALE * t as f64;
    for k in 0..half {
        let arg = phase * (-(k as f64) * step).exp();
        out[k] = arg.sin() as f32;
        out[half + k] = arg.cos() as f32;
    }
}

/// Per-block AdaLN projection weights `[2·width, time_dim]` and bias `[2·width]`.
#[derive(Debug, Clone, Copy)]
pub struct Modulation<'a> {
    pub weight: &'a [f32],
    pub bias: &'a [f32],
}

/// Layer norm without affine, then `(1 + γ)` scale and `β` shift from the
/// time embedding.
pub fn adaln(h: &[f32], temb: &[f32], modulation: Modulation<'_>) -> Result<Vec<f32>> {
    let width = h.len();
    let tdim = temb.len();
    if modulation.weight.len() != 2 * width * tdim || modulation.bias.len() != 2 * width {
        return Err(Error::Shape("modulation does not match h/temb sizes".into()));
    }
    let mut out = h.to_vec();
    layer_norm_row(&mut out);
    for i in 0..width {
        let proj = |r: usize| {
            modulation.bias[r]
                + modulation.weight[r * tdim..(r + 1) * tdim]
                    .iter()
                    .zip(temb)
                    .map(|(w, e)| w * e)
                    .sum::<f32>()
        };
        let (gamma, beta) = (proj(i), proj(width + i));
        out[i] = out[i] * (1.0 + gamma) + beta;
    }
    Ok(out)
}

/// Normalizes in place and returns the reciprocal standard deviation.
pub(crate) fn layer_norm_row(row: &mut [f32]) -> f32 {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
    rstd
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f32) -> f32 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `y[rows x out] = x[rows x in] · Wᵀ + b`.
pub(crate) fn linear(x: &[f32], rows: usize, w: &[f32], b: &[f32], y: &mut [f32]) {
    let out = b.len();
    let inp = w.len() / out;
    for row in y[..rows * out].chunks_exact_mut(out) {
        row.copy_from_slice(b);
    }
    gemm(
        rows,
        inp,
        out,
        x,
        Layout::rows(inp),
        w,
        Layout::transposed(inp),
        1.0,
        y,
    );
}

/// Activations kept for the backward pass of one block.
#[derive(Default)]
pub(crate) struct BlockCache {
    pub normed: Vec<f32>,
    pub rstd: Vec<f32>,
    pub modulation: Vec<f32>,
    pub modulated: Vec<f32>,
    pub pre_act: Vec<f32>,
    pub act: Vec<f32>,
}

#[derive(Default)]
pub(crate) struct ForwardCache {
    pub temb: Vec<f32>,
    pub blocks: Vec<BlockCache>,
    pub last_hidden: Vec<f32>,
}

/// Reusable buffers for inference-only passes.
#[derive(Default)]
pub struct Workspace {
    temb: Vec<f32>,
    h: Vec<f32>,
    block: BlockCache,
}

fn check_finite(values: &[f32], context: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(context()))
    }
}

/// One block on `h` in place, keeping its intermediates in `c`.
fn block_forward(
    params: &FlowModelParams,
    off: &BlockOffsets,
    temb: &[f32],
    h: &mut [f32],
    rows: usize,
    c: &mut BlockCache,
) {
    let cfg = params.config;
    let (w, e, td) = (cfg.width, cfg.expansion, cfg.time_dim);
    let v = &params.values;

    c.modulation.resize(rows * 2 * w, 0.0);
    linear(
        temb,
        rows,
        &v[off.mod_w..off.mod_w + 2 * w * td],
        &v[off.mod_b..off.mod_b + 2 * w],
        &mut c.modulation,
    );

    c.normed.clear();
    c.normed.extend_from_slice(&h[..rows * w]);
    c.rstd.resize(rows, 0.0);
    c.modulated.resize(rows * w, 0.0);
    for r in 0..rows {
        let row = &mut c.normed[r * w..(r + 1) * w];
        c.rstd[r] = layer_norm_row(row);
        let gb = &c.modulation[r * 2 * w..(r + 1) * 2 * w];
        let (gamma, beta) = gb.split_at(w);
        for (((u, a), g), b) in c.modulated[r * w..(r + 1) * w]
            .iter_mut()
            .zip(row.iter())
            .zip(gamma)
            .zip(beta)
        {
            *u = a * (1.0 + g) + b;
        }
    }

    c.pre_act.resize(rows * e, 0.0);
    linear(
        &c.modulated,
        rows,
        &v[off.w1..off.w1 + e * w],
        &v[off.b1..off.b1 + e],
        &mut c.pre_act,
    );
    c.act.clear();
    c.act.extend(c.pre_act.iter().map(|&p| gelu(p)));

    // h += linear2(act): seed the output with h + b2, then accumulate.
    let b2 = &v[off.b2..off.b2 + w];
    for row in h[..rows * w].chunks_exact_mut(w) {
        row.iter_mut().zip(b2).for_each(|(x, b)| *x += b);
    }
    gemm(
        rows,
        e,
        w,
        &c.act,
        Layout::rows(e),
        &v[off.w2..off.w2 + w * e],
        Layout::transposed(e),
        1.0,
        h,
    );
}

fn embed_times(t: &[f32], time_dim: usize, out: &mut Vec<f32>) -> Result<()> {
    out.resize(t.len() * time_dim, 0.0);
    for (i, &ti) in t.iter().enumerate() {
        if !(0.0..=1.0).contains(&ti) {
            return Err(Error::Domain(format!("time {ti} at row {i} outside [0, 1]")));
        }
        write_time_embed(ti, &mut out[i * time_dim..(i + 1) * time_dim]);
    }
    Ok(())
}

/// Full forward pass over `rows` rows of `x`, writing velocities into `out`.
/// With `cache`, every intermediate needed by the backward pass is retained.
pub(crate) fn forward_raw(
    params: &FlowModelParams,
    x: &[f32],
    t: &[f32],
    out: &mut [f32],
    ws: &mut Workspace,
    mut cache: Option<&mut ForwardCache>,
) -> Result<()> {
    let cfg = params.config;
    let rows = t.len();
    if x.len() != rows * cfg.dim || out.len() != rows * cfg.dim {
        return Err(Error::Shape(format!(
            "expected {rows} rows of dim {}, got {} values",
            cfg.dim,
            x.len()
        )));
    }
    let layout = ParamLayout::new(&cfg);
    let v = &params.values;
    let w = cfg.width;

    let temb = match cache.as_deref_mut() {
        Some(c) => &mut c.temb,
        None => &mut ws.temb,
    };
    embed_times(t, cfg.time_dim, temb)?;

    ws.h.resize(rows * w, 0.0);
    linear(
        x,
        rows,
        &v[layout.in_w..layout.in_w + w * cfg.dim],
        &v[layout.in_b..layout.in_b + w],
        &mut ws.h,
    );
    check_finite(&ws.h, || "input projection".into())?;

    if let Some(c) = cache.as_deref_mut() {
        c.blocks.resize_with(cfg.depth, BlockCache::default);
    }
    for (i, off) in layout.blocks.iter().enumerate() {
        match cache.as_deref_mut() {
            Some(c) => block_forward(params, off, &c.temb, &mut ws.h, rows, &mut c.blocks[i]),
            None => block_forward(params, off, &ws.temb, &mut ws.h, rows, &mut ws.block),
        }
        check_finite(&ws.h, || format!("block {i}"))?;
    }

    linear(
        &ws.h,
        rows,
        &v[layout.out_w..layout.out_w + cfg.dim * w],
        &v[layout.out_b..layout.out_b + cfg.dim],
        out,
    );
    check_finite(out, || "output projection".into())?;
    if let Some(c) = cache {
        c.last_hidden.clear();
        c.last_hidden.extend_from_slice(&ws.h);
    }
    Ok(())
}

/// Velocity predictions `v̂(x_t, t)` for each row of a standardized batch.
pub fn forward(
    params: &FlowModelParams,
    x_t: &EmbeddingMatrix,
    t: &[f32],
) -> Result<EmbeddingMatrix> {
    if x_t.dim() != params.config.dim {
        return Err(Error::Shape(format!(
            "input dim {} != network dim {}",
            x_t.dim(),
            params.config.dim
        )));
    }
    if t.len() != x_t.count() {
        return Err(Error::Shape(format!(
            "{} times for {} rows",
            t.len(),
            x_t.count()
        )));
    }
    let mut out = vec![0f32; x_t.data().len()];
    forward_raw(params, x_t.data(), t, &mut out, &mut Workspace::default(), None)?;
    x_t.with_data(out)
}

/// Batched inference without allocation churn; used by the sampler.
pub fn forward_into(
    params: &FlowModelParams,
    x: &[f32],
    t: &[f32],
    out: &mut [f32],
    ws: &mut Workspace,
) -> Result<()> {
    forward_raw(params, x, t, out, ws, None)
}
