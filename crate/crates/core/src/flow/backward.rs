//! Reverse-mode gradients of the rectified-flow regression loss.

use super::{forward_raw, gelu_grad, FlowModelParams, ForwardCache, ParamLayout, Workspace};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Layout};

/// `dw += dyᵀ·x`, `db += Σ dy`, and optionally `dx = dy·W`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f32],
    rows: usize,
    dy: &[f32],
    w: &[f32],
    out_dim: usize,
    in_dim: usize,
    dw: &mut [f32],
    db: &mut [f32],
    dx: Option<&mut [f32]>,
) {
    gemm(
        out_dim,
        rows,
        in_dim,
        dy,
        Layout::transposed(out_dim),
        x,
        Layout::rows(in_dim),
        1.0,
        dw,
    );
    for row in dy[..rows * out_dim].chunks_exact(out_dim) {
        db.iter_mut().zip(row).for_each(|(b, g)| *b += g);
    }
    if let Some(dx) = dx {
        gemm(
            rows,
            out_dim,
            in_dim,
            dy,
            Layout::rows(out_dim),
            w,
            Layout::rows(in_dim),
            0.0,
            dx,
        );
    }
}

/// Propagates `dy` (gradient of the network output) back through the cached
/// pass, accumulating into `grads`. Returns the input gradient when asked.
fn backward(
    params: &FlowModelParams,
    x: &[f32],
    cache: &ForwardCache,
    dy: &[f32],
    grads: &mut [f32],
    want_dx: bool,
) -> Option<Vec<f32>> {
    let cfg = *params.config();
    let layout = ParamLayout::new(&cfg);
    let v = params.values();
    let (d, w, e, td) = (cfg.dim, cfg.width, cfg.expansion, cfg.time_dim);
    let rows = dy.len() / d;

    let mut dh = vec![0f32; rows * w];
    {
        let (gw, gb) = grads[layout.out_w..].split_at_mut(layout.out_b - layout.out_w);
        linear_backward(
            &cache.last_hidden,
            rows,
            dy,
            &v[layout.out_w..layout.out_w + d * w],
            d,
            w,
            gw,
            &mut gb[..d],
            Some(&mut dh),
        );
    }

    let mut dact = vec![0f32; rows * e];
    let mut du = vec![0f32; rows * w];
    let mut dmod = vec![0f32; rows * 2 * w];
    for (off, c) in layout.blocks.iter().zip(&cache.blocks).rev() {
        {
            let (gw2, gb2) = grads[off.w2..].split_at_mut(off.b2 - off.w2);
            linear_backward(
                &c.act,
                rows,
                &dh,
                &v[off.w2..off.w2 + w * e],
                w,
                e,
                gw2,
                &mut gb2[..w],
                Some(&mut dact),
            );
        }
        dact.iter_mut()
            .zip(&c.pre_act)
            .for_each(|(g, &p)| *g *= gelu_grad(p));
        {
            let (gw1, gb1) = grads[off.w1..].split_at_mut(off.b1 - off.w1);
            linear_backward(
                &c.modulated,
                rows,
                &dact,
                &v[off.w1..off.w1 + e * w],
                e,
                w,
                gw1,
                &mut gb1[..e],
                Some(&mut du),
            );
        }
        for r in 0..rows {
            let a = &c.normed[r * w..(r + 1) * w];
            let gamma = &c.modulation[r * 2 * w..r * 2 * w + w];
            let dur = &du[r * w..(r + 1) * w];
            let dm = &mut dmod[r * 2 * w..(r + 1) * 2 * w];
            let (dgamma, dbeta) = dm.split_at_mut(w);
            let mut mean_da = 0f32;
            let mut mean_da_a = 0f32;
            for i in 0..w {
                dgamma[i] = dur[i] * a[i];
                dbeta[i] = dur[i];
                let da = dur[i] * (1.0 + gamma[i]);
                mean_da += da;
                mean_da_a += da * a[i];
            }
            mean_da /= w as f32;
            mean_da_a /= w as f32;
            let rstd = c.rstd[r];
            let dhr = &mut dh[r * w..(r + 1) * w];
            for i in 0..w {
                let da = dur[i] * (1.0 + gamma[i]);
                dhr[i] += rstd * (da - mean_da - a[i] * mean_da_a);
            }
        }
        let (gwm, gbm) = grads[off.mod_w..].split_at_mut(off.mod_b - off.mod_w);
        linear_backward(
            &cache.temb,
            rows,
            &dmod,
            &v[off.mod_w..off.mod_w + 2 * w * td],
            2 * w,
            td,
            gwm,
            &mut gbm[..2 * w],
            None,
        );
    }

    let mut dx = want_dx.then(|| vec![0f32; rows * d]);
    let (gw, gb) = grads[layout.in_w..].split_at_mut(layout.in_b - layout.in_w);
    linear_backward(
        x,
        rows,
        &dh,
        &v[layout.in_w..layout.in_w + w * d],
        w,
        d,
        gw,
        &mut gb[..w],
        dx.as_deref_mut(),
    );
    dx
}

/// Rectified-flow loss and its parameter gradients for explicit noise and
/// times: `mean((v̂(t·z + (1-t)·x, t) - (z - x))²)` over rows and dimensions.
pub fn loss_and_grad(
    params: &FlowModelParams,
    x: &[f32],
    z: &[f32],
    t: &[f32],
) -> Result<(f64, Vec<f32>)> {
    let d = params.config().dim;
    let rows = t.len();
    if rows == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if x.len() != rows * d || z.len() != rows * d {
        return Err(Error::Shape(format!(
            "batch of {rows} rows needs {} values per operand",
            rows * d
        )));
    }
    let mut xt = vec![0f32; rows * d];
    for r in 0..rows {
        let tr = t[r];
        for i in r * d..(r + 1) * d {
            xt[i] = tr * z[i] + (1.0 - tr) * x[i];
        }
    }
    let mut cache = ForwardCache::default();
    let mut pred = vec![0f32; rows * d];
    forward_raw(
        params,
        &xt,
        t,
        &mut pred,
        &mut Workspace::default(),
        Some(&mut cache),
    )?;

    let scale = 2.0 / (rows * d) as f32;
    let mut sum = 0f64;
    let mut dy = vec![0f32; rows * d];
    for i in 0..rows * d {
        let diff = pred[i] - (z[i] - x[i]);
        sum += diff as f64 * diff as f64;
        dy[i] = scale * diff;
    }
    let loss = sum / (rows * d) as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("loss"));
    }
    let mut grads = vec![0f32; params.len()];
    backward(params, &xt, &cache, &dy, &mut grads, false);
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("gradients"));
    }
    Ok((loss, grads))
}

/// Directional derivative `J(x)·u` of the network output for one row,
/// assembled from one reverse pass per output component.
pub fn input_jvp(params: &FlowModelParams, x: &[f32], t: f32, u: &[f32]) -> Result<Vec<f32>> {
    let d = params.config().dim;
    if x.len() != d || u.len() != d {
        return Err(Error::Shape("x and u must be single rows".into()));
    }
    let mut cache = ForwardCache::default();
    let mut out = vec![0f32; d];
    forward_raw(
        params,
        x,
        &[t],
        &mut out,
        &mut Workspace::default(),
        Some(&mut cache),
    )?;
    let mut scratch = vec![0f32; params.len()];
    let mut jvp = vec![0f32; d];
    for (j, slot) in jvp.iter_mut().enumerate() {
        let mut dy = vec![0f32; d];
        dy[j] = 1.0;
        let dx = backward(params, x, &cache, &dy, &mut scratch, true).expect("dx requested");
        *slot = dx.iter().zip(u).map(|(a, b)| a * b).sum();
    }
    Ok(jvp)
}
