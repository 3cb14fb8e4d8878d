//! XNOR-popcount convolution, weight binarization, and batch normalization.

use rand::Rng;

use crate::bits::{self, valid_bits, BitTensor};
use crate::conv::{conv2d, conv2d_backward_input, conv2d_backward_weights, source, ConvGeometry};
use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{FloatTensor, Shape};

/// Logical value read by binary convolutions outside the input.
pub const BINARY_PAD_VALUE: f64 = -1.0;

/// Which weights a binary conv multiplies its ±1 activations by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightMode {
    /// `Sign(latent)`, evaluated with XNOR/popcount.
    Binary,
    /// The latent weights themselves (first phase of two-step training).
    Real,
}

impl WeightMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::Binary => "binary",
            WeightMode::Real => "real",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "binary" => Some(WeightMode::Binary),
            "real" => Some(WeightMode::Real),
            _ => None,
        }
    }
}

/// `Sign` of each weight (`Sign(0) = -1`), packed. No scaling factor.
pub fn binarize_weights(w: &FloatTensor) -> BitTensor {
    bits::pack_sign(w)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// ±1 convolution of packed activations with packed weights.
///
/// Every tap contributes `sum_blocks (valid - 2 * popcount(a ^ w))`, which is
/// `2 * agreements - valid`. Out-of-range taps read all-zero words (logical -1).
pub fn xnor_popcount_conv(x: &BitTensor, w: &BitTensor, g: &ConvGeometry) -> Result<FloatTensor> {
    let ws = w.shape();
    if (ws.n, ws.c, ws.h, ws.w) != (g.cout, g.cin, g.kh, g.kw) {
        return Err(Error::shape("packed weights", (g.cout, g.cin, g.kh, g.kw), ws));
    }
    let is = x.shape();
    let os = g.output_shape(is)?;
    let blocks = x.blocks();
    let valid: Vec<i64> = (0..blocks).map(|b| valid_bits(g.cin, b) as i64).collect();
    let total_valid: i64 = valid.iter().sum();
    let pad_words = vec![0u64; blocks];
    let mut out = vec![0.0; os.len()];
    let mut acc = vec![0i64; g.cout];
    for n in 0..is.n {
        for oy in 0..os.h {
            for ox in 0..os.w {
                acc.iter_mut().for_each(|a| *a = 0);
                for ky in 0..g.kh {
                    let iy = source(oy, ky, g.stride, g.padding, is.h);
                    for kx in 0..g.kw {
                        let a = match (iy, source(ox, kx, g.stride, g.padding, is.w)) {
                            (Some(iy), Some(ix)) => x.pixel(n, iy, ix),
                            _ => &pad_words[..],
                        };
                        for (co, slot) in acc.iter_mut().enumerate() {
                            let b = w.pixel(co, ky, kx);
                            let mismatches: u32 =
                                a.iter().zip(b).map(|(p, q)| (p ^ q).count_ones()).sum();
                            *slot += total_valid - 2 * mismatches as i64;
                        }
                    }
                }
                for (co, &v) in acc.iter().enumerate() {
                    out[os.index(n, co, oy, ox)] = v as f64;
                }
            }
        }
    }
    Ok(FloatTensor::from_raw(os, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryConvLayer {
    pub geometry: ConvGeometry,
    /// Latent weights, `(cout, cin, kh, kw)`.
    pub weights: Param,
    packed: BitTensor,
    pub mode: WeightMode,
}

impl BinaryConvLayer {
    pub fn new(geometry: ConvGeometry, rng: &mut impl Rng) -> Result<Self> {
        geometry.validate()?;
        let fan_in = geometry.cin * geometry.kh * geometry.kw;
        let bound = (1.0 / fan_in as f64).sqrt();
        let dims = [geometry.cout, geometry.cin, geometry.kh, geometry.kw];
        Ok(Self::with_weights(geometry, Param::uniform(&dims, bound, rng)))
    }

    pub fn with_weights(geometry: ConvGeometry, weights: Param) -> Self {
        let mut layer = BinaryConvLayer {
            geometry,
            weights,
            packed: BitTensor::from_fn(Shape::new(0, 0, 0, 0), |_, _, _, _| false),
            mode: WeightMode::Binary,
        };
        layer.refresh_packed();
        layer
    }

    fn weight_shape(&self) -> Shape {
        let g = &self.geometry;
        Shape::new(g.cout, g.cin, g.kh, g.kw)
    }

    /// Re-derives the packed weights from the latent ones.
    pub fn refresh_packed(&mut self) {
        let w = FloatTensor::from_raw(self.weight_shape(), self.weights.data.clone());
        self.packed = binarize_weights(&w);
    }

    pub fn packed_weights(&self) -> &BitTensor {
        &self.packed
    }

    /// Weights the convolution effectively multiplies by.
    pub fn effective_weights(&self) -> Vec<f64> {
        match self.mode {
            WeightMode::Binary => self.weights.data.iter().map(|&v| sign(v)).collect(),
            WeightMode::Real => self.weights.data.clone(),
        }
    }

    pub fn forward(&self, x: &BitTensor) -> Result<FloatTensor> {
        match self.mode {
            WeightMode::Binary => xnor_popcount_conv(x, &self.packed, &self.geometry),
            WeightMode::Real => {
                conv2d(&bits::unpack(x), &self.weights.data, &self.geometry, BINARY_PAD_VALUE)
            }
        }
    }

    /// Returns `(grad wrt the ±1 activations, grad wrt the latent weights)`.
    ///
    /// In binary mode the weight gradient passes `Sign` through the clipped
    /// identity: it is zeroed wherever `|w| > 1`.
    pub fn backward(&self, x: &BitTensor, grad_out: &FloatTensor) -> Result<(FloatTensor, Vec<f64>)> {
        let expect = self.geometry.output_shape(x.shape())?;
        if grad_out.shape() != expect {
            return Err(Error::StaleState("binary conv gradient shape"));
        }
        let w_eff = self.effective_weights();
        let grad_x = conv2d_backward_input(grad_out, &w_eff, &self.geometry, x.shape());
        let mut grad_w =
            conv2d_backward_weights(&bits::unpack(x), grad_out, &self.geometry, BINARY_PAD_VALUE);
        if self.mode == WeightMode::Binary {
            for (gw, &w) in grad_w.iter_mut().zip(&self.weights.data) {
                if w.abs() > 1.0 {
                    *gw = 0.0;
                }
            }
        }
        Ok((grad_x, grad_w))
    }

    pub fn clamp_latent(&mut self) {
        self.weights.data.iter_mut().for_each(|w| *w = w.clamp(-1.0, 1.0));
    }
}

/// Real-valued convolution with zero padding and no bias (used for the stem).
#[derive(Debug, Clone, PartialEq)]
pub struct RealConvLayer {
    pub geometry: ConvGeometry,
    pub weights: Param,
}

impl RealConvLayer {
    pub fn new(geometry: ConvGeometry, rng: &mut impl Rng) -> Result<Self> {
        geometry.validate()?;
        let fan_in = geometry.cin * geometry.kh * geometry.kw;
        let bound = (6.0 / fan_in as f64).sqrt();
        let dims = [geometry.cout, geometry.cin, geometry.kh, geometry.kw];
        Ok(RealConvLayer {
            geometry,
            weights: Param::uniform(&dims, bound, rng),
        })
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        conv2d(x, &self.weights.data, &self.geometry, 0.0)
    }

    pub fn backward(&self, x: &FloatTensor, grad_out: &FloatTensor) -> Result<(FloatTensor, Vec<f64>)> {
        if grad_out.shape() != self.geometry.output_shape(x.shape())? {
            return Err(Error::StaleState("real conv gradient shape"));
        }
        Ok((
            conv2d_backward_input(grad_out, &self.weights.data, &self.geometry, x.shape()),
            conv2d_backward_weights(x, grad_out, &self.geometry, 0.0),
        ))
    }
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub scale: Param,
    pub shift: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub epsilon: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache {
    pub normalized: FloatTensor,
    pub inv_std: Vec<f64>,
    pub training: bool,
    /// Batch mean and biased variance (training only).
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            scale: Param::filled(&[channels], 1.0),
            shift: Param::zeros(&[channels]),
            running_mean: Param::zeros(&[channels]),
            running_var: Param::filled(&[channels], 1.0),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Normalizes with batch statistics when `training`, running statistics
    /// otherwise. Running statistics are left untouched; see [`Self::update_running`].
    pub fn forward(&self, x: &FloatTensor, training: bool) -> Result<(FloatTensor, BatchNormCache)> {
        let s = x.shape();
        if s.c != self.channels() {
            return Err(Error::shape("batchnorm channels", self.channels(), s.c));
        }
        let count = (s.n * s.spatial()) as f64;
        let (mean, var, batch_stats) = if training {
            let mut mean = vec![0.0; s.c];
            let mut var = vec![0.0; s.c];
            for c in 0..s.c {
                let mut sum = 0.0;
                for n in 0..s.n {
                    sum += x.plane(n, c).iter().sum::<f64>();
                }
                let m = sum / count;
                let mut sq = 0.0;
                for n in 0..s.n {
                    sq += x.plane(n, c).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[c] = m;
                var[c] = sq / count;
            }
            (mean.clone(), var.clone(), Some((mean, var)))
        } else {
            (self.running_mean.data.clone(), self.running_var.data.clone(), None)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut normalized = FloatTensor::zeros(s);
        let mut y = FloatTensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let (m, is) = (mean[c], inv_std[c]);
                let (g, b) = (self.scale.data[c], self.shift.data[c]);
                let src = x.plane(n, c);
                for (k, v) in normalized.plane_mut(n, c).iter_mut().enumerate() {
                    *v = (src[k] - m) * is;
                }
                let nrm = normalized.plane(n, c);
                for (o, &v) in y.plane_mut(n, c).iter_mut().zip(nrm) {
                    *o = g * v + b;
                }
            }
        }
        Ok((
            y,
            BatchNormCache {
                normalized,
                inv_std,
                training,
                batch_stats,
            },
        ))
    }

    /// Exponential moving average update with the unbiased batch variance.
    pub fn update_running(&mut self, cache: &BatchNormCache, count: usize) {
        let Some((mean, var)) = &cache.batch_stats else {
            return;
        };
        let m = self.momentum;
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.channels() {
            self.running_mean.data[c] = (1.0 - m) * self.running_mean.data[c] + m * mean[c];
            self.running_var.data[c] = (1.0 - m) * self.running_var.data[c] + m * var[c] * unbias;
        }
    }

    pub fn backward(
        &self,
        cache: &BatchNormCache,
        grad_out: &FloatTensor,
    ) -> Result<(FloatTensor, BatchNormGrads)> {
        let s = grad_out.shape();
        if s != cache.normalized.shape() {
            return Err(Error::StaleState("batchnorm gradient shape"));
        }
        let count = (s.n * s.spatial()) as f64;
        let mut grad_x = FloatTensor::zeros(s);
        let mut grads = BatchNormGrads {
            scale: vec![0.0; s.c],
            shift: vec![0.0; s.c],
        };
        for c in 0..s.c {
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for n in 0..s.n {
                for (&g, &xh) in grad_out.plane(n, c).iter().zip(cache.normalized.plane(n, c)) {
                    sum_g += g;
                    sum_gx += g * xh;
                }
            }
            grads.shift[c] = sum_g;
            grads.scale[c] = sum_gx;
            let k = self.scale.data[c] * cache.inv_std[c];
            for n in 0..s.n {
                let go = grad_out.plane(n, c);
                let xh = cache.normalized.plane(n, c);
                for (i, dst) in grad_x.plane_mut(n, c).iter_mut().enumerate() {
                    *dst = if cache.training {
                        k * (go[i] - sum_g / count - xh[i] * sum_gx / count)
                    } else {
                        k * go[i]
                    };
                }
            }
        }
        Ok((grad_x, grads))
    }
}
