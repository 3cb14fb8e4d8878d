//! Activation shaping: Sign and its thresholded forms (RSign, DySign), the
//! shifted PReLU family (RPReLU, DyPReLU), the hyper function that generates
//! per-sample parameters, and the backward rules for all of them.
//!
//! Binarization uses `x > t -> +1`, `x <= t -> -1`. Its backward rule is the
//! piecewise-polynomial surrogate [`sign_surrogate_grad`].

use rand::Rng;

use crate::bits::BitTensor;
use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{global_avg_pool, global_avg_pool_backward, ChannelVector, FloatTensor};

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_PRELU_SLOPE: f64 = 0.25;

/// Derivative of the piecewise-quadratic sign approximation:
/// `2 + 2u` on `[-1, 0)`, `2 - 2u` on `[0, 1]`, zero elsewhere.
#[inline]
pub fn sign_surrogate_grad(u: f64) -> f64 {
    if (-1.0..0.0).contains(&u) {
        2.0 + 2.0 * u
    } else if (0.0..=1.0).contains(&u) {
        2.0 - 2.0 * u
    } else {
        0.0
    }
}

pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// GAP -> FC -> ReLU -> FC parameter generator.
///
/// `f1` is stored row-major as `c x hidden`, `f2` as `hidden x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperFunctionParams {
    pub channels: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub f1_weights: Param,
    pub f1_bias: Param,
    pub f2_weights: Param,
    pub f2_bias: Param,
}

/// Gradients with the same layout as [`HyperFunctionParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrads {
    pub f1_weights: Vec<f64>,
    pub f1_bias: Vec<f64>,
    pub f2_weights: Vec<f64>,
    pub f2_bias: Vec<f64>,
}

impl HyperFunctionParams {
    /// Fan-in scaled uniform `f1`; zero `f2` so the generated parameters start at zero.
    pub fn new(channels: usize, outputs: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let hidden = hidden_width(channels, reduction);
        let bound = 1.0 / (channels as f64).sqrt();
        HyperFunctionParams {
            channels,
            hidden,
            outputs,
            f1_weights: Param::uniform(&[channels, hidden], bound, rng),
            f1_bias: Param::zeros(&[hidden]),
            f2_weights: Param::zeros(&[hidden, outputs]),
            f2_bias: Param::zeros(&[outputs]),
        }
    }

    pub fn zeros(channels: usize, hidden: usize, outputs: usize) -> Self {
        HyperFunctionParams {
            channels,
            hidden,
            outputs,
            f1_weights: Param::zeros(&[channels, hidden]),
            f1_bias: Param::zeros(&[hidden]),
            f2_weights: Param::zeros(&[hidden, outputs]),
            f2_bias: Param::zeros(&[outputs]),
        }
    }

    pub fn accumulate(&mut self, g: &HyperGrads) {
        self.f1_weights.accumulate(&g.f1_weights);
        self.f1_bias.accumulate(&g.f1_bias);
        self.f2_weights.accumulate(&g.f2_weights);
        self.f2_bias.accumulate(&g.f2_bias);
    }
}

/// Values cached by [`hyper_forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCache {
    pub input: ChannelVector,
    /// Hidden pre-activations, `n x hidden`.
    pub hidden_pre: ChannelVector,
}

/// `out = relu(g f1 + b1) f2 + b2`, row by row. The output is unbounded.
pub fn hyper_forward(
    g: &ChannelVector,
    p: &HyperFunctionParams,
) -> Result<(ChannelVector, HyperCache)> {
    if g.c != p.channels {
        return Err(Error::shape("hyper_forward", p.channels, g.c));
    }
    let (c, hid, k) = (p.channels, p.hidden, p.outputs);
    let mut pre = ChannelVector::zeros(g.n, hid);
    let mut out = ChannelVector::zeros(g.n, k);
    let mut act = vec![0.0; hid];
    for i in 0..g.n {
        let row = g.row(i);
        for h in 0..hid {
            let mut s = p.f1_bias.data[h];
            for j in 0..c {
                s += row[j] * p.f1_weights.data[j * hid + h];
            }
            pre.values[i * hid + h] = s;
            act[h] = s.max(0.0);
        }
        for o in 0..k {
            let mut s = p.f2_bias.data[o];
            for h in 0..hid {
                s += act[h] * p.f2_weights.data[h * k + o];
            }
            out.values[i * k + o] = s;
        }
    }
    Ok((
        out,
        HyperCache {
            input: g.clone(),
            hidden_pre: pre,
        },
    ))
}

/// Gradient of [`hyper_forward`] w.r.t. its input and its parameters.
pub fn hyper_backward(
    p: &HyperFunctionParams,
    cache: &HyperCache,
    grad_out: &ChannelVector,
) -> Result<(ChannelVector, HyperGrads)> {
    if grad_out.c != p.outputs || grad_out.n != cache.input.n {
        return Err(Error::StaleState("hyper function gradient shape"));
    }
    let (c, hid, k) = (p.channels, p.hidden, p.outputs);
    let mut grads = HyperGrads {
        f1_weights: vec![0.0; c * hid],
        f1_bias: vec![0.0; hid],
        f2_weights: vec![0.0; hid * k],
        f2_bias: vec![0.0; k],
    };
    let mut grad_in = ChannelVector::zeros(cache.input.n, c);
    let mut grad_hidden = vec![0.0; hid];
    for i in 0..grad_out.n {
        let go = grad_out.row(i);
        let pre = cache.hidden_pre.row(i);
        for o in 0..k {
            grads.f2_bias[o] += go[o];
        }
        for h in 0..hid {
            let a = pre[h].max(0.0);
            let mut acc = 0.0;
            for o in 0..k {
                grads.f2_weights[h * k + o] += a * go[o];
                acc += p.f2_weights.data[h * k + o] * go[o];
            }
            grad_hidden[h] = if pre[h] > 0.0 { acc } else { 0.0 };
            grads.f1_bias[h] += grad_hidden[h];
        }
        let row = cache.input.row(i);
        let gi = grad_in.row_mut(i);
        for j in 0..c {
            let mut acc = 0.0;
            for h in 0..hid {
                grads.f1_weights[j * hid + h] += row[j] * grad_hidden[h];
                acc += p.f1_weights.data[j * hid + h] * grad_hidden[h];
            }
            gi[j] = acc;
        }
    }
    Ok((grad_in, grads))
}

/// Binarizes `x` against per-sample, per-channel thresholds.
pub fn threshold_sign(x: &FloatTensor, thresholds: &ChannelVector) -> Result<BitTensor> {
    let s = x.shape();
    if thresholds.n != s.n || thresholds.c != s.c {
        return Err(Error::shape(
            "threshold_sign",
            (s.n, s.c),
            (thresholds.n, thresholds.c),
        ));
    }
    Ok(BitTensor::from_fn(s, |n, c, y, xx| {
        x.at(n, c, y, xx) > thresholds.get(n, c)
    }))
}

/// Surrogate backward through a thresholded sign.
///
/// Returns the direct input gradient `g * s(x - t)` and the per-(sample,
/// channel) threshold gradient `-sum_hw g * s(x - t)`.
pub fn threshold_sign_backward(
    x: &FloatTensor,
    thresholds: &ChannelVector,
    grad_out: &FloatTensor,
) -> Result<(FloatTensor, ChannelVector)> {
    let s = x.shape();
    if grad_out.shape() != s || thresholds.n != s.n || thresholds.c != s.c {
        return Err(Error::StaleState("sign gradient shape"));
    }
    let mut grad_x = FloatTensor::zeros(s);
    let mut grad_t = ChannelVector::zeros(s.n, s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let t = thresholds.get(n, c);
            let mut acc = 0.0;
            let (xp, gp) = (x.plane(n, c), grad_out.plane(n, c));
            for ((dst, &xv), &g) in grad_x.plane_mut(n, c).iter_mut().zip(xp).zip(gp) {
                let d = g * sign_surrogate_grad(xv - t);
                *dst = d;
                acc -= d;
            }
            grad_t.values[n * s.c + c] = acc;
        }
    }
    Ok((grad_x, grad_t))
}

fn broadcast(values: &[f64], n: usize) -> ChannelVector {
    let c = values.len();
    let mut out = ChannelVector::zeros(n, c);
    for i in 0..n {
        out.row_mut(i).copy_from_slice(values);
    }
    out
}

fn sum_rows(v: &ChannelVector) -> Vec<f64> {
    let mut out = vec![0.0; v.c];
    for i in 0..v.n {
        for (o, x) in out.iter_mut().zip(v.row(i)) {
            *o += x;
        }
    }
    out
}

/// Plain `Sign`, `Sign(0) = -1`.
pub fn sign_forward(x: &FloatTensor) -> BitTensor {
    crate::bits::pack_sign(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RSignParams {
    pub thresholds: Param,
}

impl RSignParams {
    pub fn zeros(channels: usize) -> Self {
        RSignParams {
            thresholds: Param::zeros(&[channels]),
        }
    }
}

pub fn rsign_forward(x: &FloatTensor, p: &RSignParams) -> Result<BitTensor> {
    if p.thresholds.len() != x.shape().c {
        return Err(Error::shape("rsign_forward", p.thresholds.len(), x.shape().c));
    }
    threshold_sign(x, &broadcast(&p.thresholds.data, x.shape().n))
}

/// Returns `(grad_x, grad_thresholds)`.
pub fn rsign_backward(
    x: &FloatTensor,
    p: &RSignParams,
    grad_out: &FloatTensor,
) -> Result<(FloatTensor, Vec<f64>)> {
    let t = broadcast(&p.thresholds.data, x.shape().n);
    let (gx, gt) = threshold_sign_backward(x, &t, grad_out)?;
    Ok((gx, sum_rows(&gt)))
}

/// Everything the dynamic activations need for their backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DynActState {
    pub input: FloatTensor,
    pub gap: ChannelVector,
    pub hyper: HyperCache,
    /// Generated parameters: thresholds (`n x c`) or `[gamma | zeta]` (`n x 2c`).
    pub generated: ChannelVector,
}

fn dynamic_state(x: &FloatTensor, p: &HyperFunctionParams) -> Result<DynActState> {
    let gap = global_avg_pool(x)?;
    let (generated, hyper) = hyper_forward(&gap, p)?;
    Ok(DynActState {
        input: x.clone(),
        gap,
        hyper,
        generated,
    })
}

/// Chains a gradient on the generated parameters through the hyper function
/// and GAP, adding the result into `grad_x`.
fn backprop_generated(
    p: &HyperFunctionParams,
    state: &DynActState,
    grad_generated: &ChannelVector,
    grad_x: &mut FloatTensor,
) -> Result<HyperGrads> {
    let (grad_gap, grads) = hyper_backward(p, &state.hyper, grad_generated)?;
    grad_x.add_assign(&global_avg_pool_backward(&grad_gap, state.input.shape()));
    Ok(grads)
}

/// Sign against thresholds generated per sample from the input's channel means.
pub fn dysign_forward(
    x: &FloatTensor,
    p: &HyperFunctionParams,
) -> Result<(BitTensor, DynActState)> {
    if p.outputs != x.shape().c || p.channels != x.shape().c {
        return Err(Error::shape(
            "dysign_forward",
            (x.shape().c, x.shape().c),
            (p.channels, p.outputs),
        ));
    }
    let state = dynamic_state(x, p)?;
    let bits = threshold_sign(x, &state.generated)?;
    Ok((bits, state))
}

pub fn dysign_backward(
    p: &HyperFunctionParams,
    state: &DynActState,
    grad_out: &FloatTensor,
) -> Result<(FloatTensor, HyperGrads)> {
    let (mut grad_x, grad_alpha) =
        threshold_sign_backward(&state.input, &state.generated, grad_out)?;
    let grads = backprop_generated(p, state, &grad_alpha, &mut grad_x)?;
    Ok((grad_x, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RPReLUParams {
    pub gamma: Param,
    pub zeta: Param,
    pub beta: Param,
}

impl RPReLUParams {
    pub fn new(channels: usize) -> Self {
        RPReLUParams {
            gamma: Param::zeros(&[channels]),
            zeta: Param::zeros(&[channels]),
            beta: Param::filled(&[channels], DEFAULT_PRELU_SLOPE),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RPReLUGrads {
    pub gamma: Vec<f64>,
    pub zeta: Vec<f64>,
    pub beta: Vec<f64>,
}

#[inline]
fn shifted_prelu(x: f64, gamma: f64, zeta: f64, beta: f64) -> f64 {
    let d = x - gamma;
    if x > gamma {
        d + zeta
    } else {
        beta * d + zeta
    }
}

/// Applies the shifted PReLU with per-(sample, channel) shifts.
fn shifted_prelu_planes(
    x: &FloatTensor,
    gamma: &ChannelVector,
    zeta: &ChannelVector,
    beta: &[f64],
) -> FloatTensor {
    let s = x.shape();
    let mut out = FloatTensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, z, b) = (gamma.get(n, c), zeta.get(n, c), beta[c]);
            for (o, &v) in out.plane_mut(n, c).iter_mut().zip(x.plane(n, c)) {
                *o = shifted_prelu(v, g, z, b);
            }
        }
    }
    out
}

/// Per-(sample, channel) shift gradients plus the per-channel slope gradient.
struct ShiftGrads {
    x: FloatTensor,
    gamma: ChannelVector,
    zeta: ChannelVector,
    beta: Vec<f64>,
}

fn shifted_prelu_backward(
    x: &FloatTensor,
    gamma: &ChannelVector,
    beta: &[f64],
    grad_out: &FloatTensor,
) -> Result<ShiftGrads> {
    let s = x.shape();
    if grad_out.shape() != s {
        return Err(Error::StaleState("PReLU gradient shape"));
    }
    let mut out = ShiftGrads {
        x: FloatTensor::zeros(s),
        gamma: ChannelVector::zeros(s.n, s.c),
        zeta: ChannelVector::zeros(s.n, s.c),
        beta: vec![0.0; s.c],
    };
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b) = (gamma.get(n, c), beta[c]);
            let (mut dg, mut dz, mut db) = (0.0, 0.0, 0.0);
            let (xp, gp) = (x.plane(n, c), grad_out.plane(n, c));
            for ((dst, &v), &go) in out.x.plane_mut(n, c).iter_mut().zip(xp).zip(gp) {
                dz += go;
                if v > g {
                    *dst = go;
                    dg -= go;
                } else {
                    *dst = b * go;
                    dg -= b * go;
                    db += (v - g) * go;
                }
            }
            out.gamma.values[n * s.c + c] = dg;
            out.zeta.values[n * s.c + c] = dz;
            out.beta[c] += db;
        }
    }
    Ok(out)
}

fn check_rprelu(x: &FloatTensor, p: &RPReLUParams) -> Result<()> {
    let c = x.shape().c;
    for len in [p.gamma.len(), p.zeta.len(), p.beta.len()] {
        if len != c {
            return Err(Error::shape("rprelu params", c, len));
        }
    }
    Ok(())
}

pub fn rprelu_forward(x: &FloatTensor, p: &RPReLUParams) -> Result<FloatTensor> {
    check_rprelu(x, p)?;
    let n = x.shape().n;
    Ok(shifted_prelu_planes(
        x,
        &broadcast(&p.gamma.data, n),
        &broadcast(&p.zeta.data, n),
        &p.beta.data,
    ))
}

pub fn rprelu_backward(
    x: &FloatTensor,
    p: &RPReLUParams,
    grad_out: &FloatTensor,
) -> Result<(FloatTensor, RPReLUGrads)> {
    check_rprelu(x, p)?;
    let g = shifted_prelu_backward(x, &broadcast(&p.gamma.data, x.shape().n), &p.beta.data, grad_out)?;
    Ok((
        g.x,
        RPReLUGrads {
            gamma: sum_rows(&g.gamma),
            zeta: sum_rows(&g.zeta),
            beta: g.beta,
        },
    ))
}

fn split_generated(generated: &ChannelVector) -> (ChannelVector, ChannelVector) {
    let c = generated.c / 2;
    let mut gamma = ChannelVector::zeros(generated.n, c);
    let mut zeta = ChannelVector::zeros(generated.n, c);
    for i in 0..generated.n {
        let row = generated.row(i);
        gamma.row_mut(i).copy_from_slice(&row[..c]);
        zeta.row_mut(i).copy_from_slice(&row[c..]);
    }
    (gamma, zeta)
}

/// Shifted PReLU whose `gamma` and `zeta` are generated per sample; `beta` is static.
pub fn dyprelu_forward(
    x: &FloatTensor,
    p: &HyperFunctionParams,
    beta: &[f64],
) -> Result<(FloatTensor, DynActState)> {
    let c = x.shape().c;
    if p.channels != c || p.outputs != 2 * c || beta.len() != c {
        return Err(Error::shape(
            "dyprelu_forward",
            (c, 2 * c, c),
            (p.channels, p.outputs, beta.len()),
        ));
    }
    let state = dynamic_state(x, p)?;
    let (gamma, zeta) = split_generated(&state.generated);
    let y = shifted_prelu_planes(x, &gamma, &zeta, beta);
    Ok((y, state))
}

/// Returns `(grad_x, hyper grads, grad_beta)`.
pub fn dyprelu_backward(
    p: &HyperFunctionParams,
    beta: &[f64],
    state: &DynActState,
    grad_out: &FloatTensor,
) -> Result<(FloatTensor, HyperGrads, Vec<f64>)> {
    let (gamma, _) = split_generated(&state.generated);
    let g = shifted_prelu_backward(&state.input, &gamma, beta, grad_out)?;
    let (n, c) = (g.gamma.n, g.gamma.c);
    let mut grad_generated = ChannelVector::zeros(n, 2 * c);
    for i in 0..n {
        let row = grad_generated.row_mut(i);
        row[..c].copy_from_slice(g.gamma.row(i));
        row[c..].copy_from_slice(g.zeta.row(i));
    }
    let mut grad_x = g.x;
    let grads = backprop_generated(p, state, &grad_generated, &mut grad_x)?;
    Ok((grad_x, grads, g.beta))
}
