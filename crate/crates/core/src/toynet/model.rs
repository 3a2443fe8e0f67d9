//! Forward and reverse passes of the toy denoiser.
//!
//! Frames are columns. For a window `X` (`d x n`) with timesteps `t` and
//! conditioning `C` (`c x n`):
//!
//! ```text
//! H  = W_in X + b_in + W_cond C + W_temb phi(t) + P          (h x n)
//! U  = [H | z],  z = W_in r + b_in                             (reference, optional)
//! S  = (W_q H)^T (W_k U) / sqrt(h),  A = softmax_rows(S)      (causal mask on frame columns)
//! H2 = H + W_o (W_v U) A^T
//! H3 = H2 + W_f2 tanh(W_f1 H2 + b_f1) + b_f2
//! v  = W_out H3 + b_out                                        (d x n)
//! ```
//!
//! `phi` are sinusoidal timestep features and `P` fixed sinusoidal frame
//! positions. The output is a v-prediction.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::params::ToyNetParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMask {
    #[default]
    Full,
    /// Frame `i` attends to frames `j <= i` (and the reference, always).
    Causal,
}

/// `[sin(w_k t), cos(w_k t)]` with `w_k = pi 2^k / t_max`.
pub fn timestep_features(t: usize, width: usize, t_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(width);
    for k in 0..width / 2 {
        let w = std::f64::consts::PI * f64::powi(2.0, k as i32) / t_max as f64;
        out.push((w * t as f64).sin());
        out.push((w * t as f64).cos());
    }
    out
}

/// Sinusoidal encoding of window positions `0..n`, `h x n`.
pub fn position_encoding(n: usize, h: usize) -> DMatrix<f64> {
    DMatrix::from_fn(h, n, |r, pos| {
        let k = (r / 2) as f64;
        let w = 1.0 / 10_000f64.powf(2.0 * k / h as f64);
        if r % 2 == 0 {
            (w * pos as f64).sin()
        } else {
            (w * pos as f64).cos()
        }
    })
}

/// Reference hidden state `W_in r + b_in`.
pub fn encode_reference(p: &ToyNetParams, reference: &DVector<f64>) -> DVector<f64> {
    let z = &p.w_in * reference + &p.b_in;
    DVector::from_column_slice(z.as_slice())
}

#[derive(Debug, Clone)]
struct Attention {
    u: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    a: DMatrix<f64>,
    o: DMatrix<f64>,
    out: DMatrix<f64>,
}

fn attention(p: &ToyNetParams, x: &DMatrix<f64>, z: Option<&DVector<f64>>, mask: AttentionMask) -> Attention {
    let (h, n) = x.shape();
    let m = n + usize::from(z.is_some());
    let mut u = DMatrix::zeros(h, m);
    u.columns_mut(0, n).copy_from(x);
    if let Some(z) = z {
        u.column_mut(n).copy_from(z);
    }
    let q = &p.w_q * x;
    let k = &p.w_k * &u;
    let v = &p.w_v * &u;
    let scale = 1.0 / (h as f64).sqrt();
    let mut a = q.transpose() * &k * scale;
    for i in 0..n {
        let allowed = |j: usize| mask == AttentionMask::Full || j <= i || j >= n;
        let max = (0..m).filter(|&j| allowed(j)).map(|j| a[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..m {
            let e = if allowed(j) { (a[(i, j)] - max).exp() } else { 0.0 };
            a[(i, j)] = e;
            sum += e;
        }
        for j in 0..m {
            a[(i, j)] /= sum;
        }
    }
    let o = &v * a.transpose();
    let out = x + &p.w_o * &o;
    Attention { u, q, k, v, a, o, out }
}

/// Single-head attention over frame columns with the reference hidden state
/// appended to keys and values; returns `X + W_o O`.
pub fn temporal_attention(
    p: &ToyNetParams,
    x: &DMatrix<f64>,
    z: Option<&DVector<f64>>,
    mask: AttentionMask,
) -> DMatrix<f64> {
    attention(p, x, z, mask).out
}

/// Attention weights (`n x m` rows summing to one), for inspection.
pub fn attention_weights(
    p: &ToyNetParams,
    x: &DMatrix<f64>,
    z: Option<&DVector<f64>>,
    mask: AttentionMask,
) -> DMatrix<f64> {
    attention(p, x, z, mask).a
}

#[derive(Debug, Clone)]
struct Cache {
    x: DMatrix<f64>,
    cond: DMatrix<f64>,
    phi: DMatrix<f64>,
    reference: Option<DVector<f64>>,
    att: Attention,
    h2: DMatrix<f64>,
    f: DMatrix<f64>,
    h3: DMatrix<f64>,
}

fn check_inputs(p: &ToyNetParams, x: &DMatrix<f64>, t: &[usize], cond: &DMatrix<f64>) -> Result<()> {
    let dims = p.dims;
    let n = x.ncols();
    if x.nrows() != dims.latent || t.len() != n || cond.nrows() != dims.cond || cond.ncols() != n {
        return Err(Error::shape(format!(
            "toy net expects {}x n latents, n timesteps and {}x n conditioning; got {:?}, {}, {:?}",
            dims.latent,
            dims.cond,
            x.shape(),
            t.len(),
            cond.shape()
        )));
    }
    if n == 0 {
        return Err(Error::shape("empty window"));
    }
    Ok(())
}

fn forward_cached(
    p: &ToyNetParams,
    x: &DMatrix<f64>,
    t: &[usize],
    cond: &DMatrix<f64>,
    reference: Option<&DVector<f64>>,
    z: Option<&DVector<f64>>,
    mask: AttentionMask,
) -> (DMatrix<f64>, Cache) {
    let dims = p.dims;
    let n = x.ncols();
    let mut phi = DMatrix::zeros(dims.temb, n);
    for (f, &tf) in t.iter().enumerate() {
        phi.column_mut(f).copy_from_slice(&timestep_features(tf, dims.temb, dims.t_max));
    }
    let mut hid = &p.w_in * x + &p.w_temb * &phi + position_encoding(n, dims.hidden);
    if dims.cond > 0 {
        hid += &p.w_cond * cond;
    }
    for mut col in hid.column_iter_mut() {
        col += p.b_in.column(0);
    }
    let att = attention(p, &hid, z, mask);
    let h2 = att.out.clone();
    let mut pre = &p.w_f1 * &h2;
    for mut col in pre.column_iter_mut() {
        col += p.b_f1.column(0);
    }
    let f = pre.map(f64::tanh);
    let mut h3 = &h2 + &p.w_f2 * &f;
    for mut col in h3.column_iter_mut() {
        col += p.b_f2.column(0);
    }
    let mut y = &p.w_out * &h3;
    for mut col in y.column_iter_mut() {
        col += p.b_out.column(0);
    }
    let cache = Cache {
        x: x.clone(),
        cond: cond.clone(),
        phi,
        reference: reference.cloned(),
        att,
        h2,
        f,
        h3,
    };
    (y, cache)
}

/// v-prediction for a window. `reference` is a latent frame; it is encoded on
/// every call (see [`forward_with_hidden`] to reuse an encoding).
pub fn forward(
    p: &ToyNetParams,
    x: &DMatrix<f64>,
    t: &[usize],
    cond: &DMatrix<f64>,
    reference: Option<&DVector<f64>>,
    mask: AttentionMask,
) -> Result<DMatrix<f64>> {
    check_inputs(p, x, t, cond)?;
    let z = reference.map(|r| encode_reference(p, r));
    Ok(forward_cached(p, x, t, cond, reference, z.as_ref(), mask).0)
}

/// v-prediction given an already encoded reference hidden state.
pub fn forward_with_hidden(
    p: &ToyNetParams,
    x: &DMatrix<f64>,
    t: &[usize],
    cond: &DMatrix<f64>,
    z: Option<&DVector<f64>>,
    mask: AttentionMask,
) -> Result<DMatrix<f64>> {
    check_inputs(p, x, t, cond)?;
    Ok(forward_cached(p, x, t, cond, None, z, mask).0)
}

fn add_rowsum(b: &mut DMatrix<f64>, m: &DMatrix<f64>) {
    for col in m.column_iter() {
        b.column_mut(0).add_assign(&col);
    }
}

/// Pull `dy` (gradient w.r.t. the v output) back to every parameter,
/// accumulating into `grad`.
fn backward(p: &ToyNetParams, c: &Cache, dy: &DMatrix<f64>, grad: &mut ToyNetParams) {
    let h = p.dims.hidden;
    let n = c.x.ncols();
    let m = c.att.u.ncols();

    grad.w_out += dy * c.h3.transpose();
    add_rowsum(&mut grad.b_out, dy);
    let dh3 = p.w_out.transpose() * dy;

    grad.w_f2 += &dh3 * c.f.transpose();
    add_rowsum(&mut grad.b_f2, &dh3);
    let df = p.w_f2.transpose() * &dh3;
    let dpre = df.zip_map(&c.f, |g, f| g * (1.0 - f * f));
    grad.w_f1 += &dpre * c.h2.transpose();
    add_rowsum(&mut grad.b_f1, &dpre);
    let dh2 = dh3 + p.w_f1.transpose() * &dpre;

    let att = &c.att;
    grad.w_o += &dh2 * att.o.transpose();
    let d_o = p.w_o.transpose() * &dh2;
    let dv = &d_o * &att.a;
    let da = d_o.transpose() * &att.v;
    let mut ds = DMatrix::zeros(n, m);
    for i in 0..n {
        let dot: f64 = (0..m).map(|j| att.a[(i, j)] * da[(i, j)]).sum();
        for j in 0..m {
            ds[(i, j)] = att.a[(i, j)] * (da[(i, j)] - dot);
        }
    }
    ds /= (h as f64).sqrt();
    let dq = &att.k * ds.transpose();
    let dk = &att.q * &ds;
    let hid = att.u.columns(0, n);
    grad.w_q += &dq * hid.transpose();
    grad.w_k += &dk * att.u.transpose();
    grad.w_v += &dv * att.u.transpose();
    let du = p.w_k.transpose() * &dk + p.w_v.transpose() * &dv;
    let mut dhid = dh2 + p.w_q.transpose() * &dq;
    dhid += du.columns(0, n);

    grad.w_in += &dhid * c.x.transpose();
    add_rowsum(&mut grad.b_in, &dhid);
    if p.dims.cond > 0 {
        grad.w_cond += &dhid * c.cond.transpose();
    }
    grad.w_temb += &dhid * c.phi.transpose();
    if m > n {
        if let Some(r) = &c.reference {
            let dz = du.column(n);
            grad.w_in += dz * r.transpose();
            grad.b_in.column_mut(0).add_assign(&dz);
        }
    }
}

/// One training example: a noised window and its v target.
#[derive(Debug, Clone)]
pub struct Sample {
    pub latents: DMatrix<f64>,
    pub timesteps: Vec<usize>,
    pub cond: DMatrix<f64>,
    pub reference: Option<DVector<f64>>,
    pub target: DMatrix<f64>,
}

/// Mean squared v error over every entry of the batch, and its exact gradient.
pub fn loss_and_grad(p: &ToyNetParams, batch: &[Sample], mask: AttentionMask) -> Result<(f64, ToyNetParams)> {
    let count: usize = batch.iter().map(|s| s.target.len()).sum();
    if count == 0 {
        return Err(Error::shape("empty batch"));
    }
    let mut grad = ToyNetParams::zeros(p.dims);
    let mut loss = 0.0;
    for s in batch {
        check_inputs(p, &s.latents, &s.timesteps, &s.cond)?;
        if s.target.shape() != s.latents.shape() {
            return Err(Error::shape("target shape differs from latents"));
        }
        let z = s.reference.as_ref().map(|r| encode_reference(p, r));
        let (y, cache) = forward_cached(p, &s.latents, &s.timesteps, &s.cond, s.reference.as_ref(), z.as_ref(), mask);
        let resid = &y - &s.target;
        loss += resid.norm_squared();
        let dy = resid * (2.0 / count as f64);
        backward(p, &cache, &dy, &mut grad);
    }
    Ok((loss / count as f64, grad))
}

/// Gradient of `<upstream, v(x)>` w.r.t. the parameters, for a single window.
pub fn vjp(
    p: &ToyNetParams,
    x: &DMatrix<f64>,
    t: &[usize],
    cond: &DMatrix<f64>,
    reference: Option<&DVector<f64>>,
    mask: AttentionMask,
    upstream: &DMatrix<f64>,
) -> Result<ToyNetParams> {
    check_inputs(p, x, t, cond)?;
    if upstream.shape() != x.shape() {
        return Err(Error::shape("upstream gradient shape differs from latents"));
    }
    let z = reference.map(|r| encode_reference(p, r));
    let (_, cache) = forward_cached(p, x, t, cond, reference, z.as_ref(), mask);
    let mut grad = ToyNetParams::zeros(p.dims);
    backward(p, &cache, upstream, &mut grad);
    Ok(grad)
}
