//! Layer graph of ReActNet-style blocks with static or dynamic activations.
//!
//! A block with input `x` (`c` channels) computes
//!
//! ```text
//! h1  = BN(conv3x3(sign1(x))) + shortcut(x)      shortcut = 2x2 avg-pool when stride 2
//! a1  = act1(h1)
//! h2  = BN(conv1x1(sign2(a1))) + a1              (c -> c)
//!     | cat(BN_a(conv1x1_a(s)) + a1,
//!           BN_b(conv1x1_b(s)) + a1)             (c -> 2c), s = sign2(a1)
//! out = act2(h2)
//! ```
//!
//! The stem conv and the classifier are real-valued.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::act::{
    dyprelu_backward, dyprelu_forward, dysign_backward, dysign_forward, rprelu_backward,
    rprelu_forward, rsign_backward, rsign_forward, DynActState, HyperFunctionParams, RPReLUParams,
    RSignParams, DEFAULT_PRELU_SLOPE,
};
use crate::binconv::{BatchNormCache, BatchNormLayer, BinaryConvLayer, RealConvLayer, WeightMode};
use crate::bits::BitTensor;
use crate::config::{ActivationMode, ModelConfig};
use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::param::{join, Param, ParamKind, ParamVisitor};
use crate::tensor::{
    avg_pool2x2, avg_pool2x2_backward, global_avg_pool, global_avg_pool_backward, ChannelVector,
    FloatTensor, Shape,
};

/// Deterministic per-layer generator: the stream depends only on the model
/// seed and the layer path, so layers draw the same values regardless of
/// which other layers exist.
pub fn layer_rng(seed: u64, path: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in path.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SignStage {
    Static(RSignParams),
    Dynamic(HyperFunctionParams),
    /// Pass-through for real-valued blocks.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SignCache {
    Static(FloatTensor),
    Dynamic(DynActState),
    Identity,
}

/// Output of a sign stage: packed bits, or the untouched input in real blocks.
#[derive(Debug, Clone, PartialEq)]
pub enum Activations {
    Bits(BitTensor),
    Real(FloatTensor),
}

impl SignStage {
    fn new(mode: ActivationMode, channels: usize, reduction: usize, seed: u64, path: &str) -> Self {
        match mode {
            ActivationMode::Real => SignStage::Identity,
            m if m.dynamic_sign() => SignStage::Dynamic(HyperFunctionParams::new(
                channels,
                channels,
                reduction,
                &mut layer_rng(seed, &join(path, "hyper")),
            )),
            _ => SignStage::Static(RSignParams::zeros(channels)),
        }
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<(Activations, SignCache)> {
        Ok(match self {
            SignStage::Static(p) => (Activations::Bits(rsign_forward(x, p)?), SignCache::Static(x.clone())),
            SignStage::Dynamic(p) => {
                let (bits, state) = dysign_forward(x, p)?;
                (Activations::Bits(bits), SignCache::Dynamic(state))
            }
            SignStage::Identity => (Activations::Real(x.clone()), SignCache::Identity),
        })
    }

    pub fn backward(&mut self, cache: &SignCache, grad_out: FloatTensor) -> Result<FloatTensor> {
        match (self, cache) {
            (SignStage::Static(p), SignCache::Static(x)) => {
                let (gx, gt) = rsign_backward(x, p, &grad_out)?;
                p.thresholds.accumulate(&gt);
                Ok(gx)
            }
            (SignStage::Dynamic(p), SignCache::Dynamic(state)) => {
                let (gx, grads) = dysign_backward(p, state, &grad_out)?;
                p.accumulate(&grads);
                Ok(gx)
            }
            (SignStage::Identity, SignCache::Identity) => Ok(grad_out),
            _ => Err(Error::StaleState("sign stage cache kind")),
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        match self {
            SignStage::Static(p) => f(&join(prefix, "threshold"), ParamKind::Shift, &mut p.thresholds),
            SignStage::Dynamic(p) => visit_hyper(p, &join(prefix, "hyper"), f),
            SignStage::Identity => {}
        }
    }
}

fn visit_hyper(p: &mut HyperFunctionParams, prefix: &str, f: &mut ParamVisitor<'_>) {
    f(&join(prefix, "f1_weight"), ParamKind::Hyper, &mut p.f1_weights);
    f(&join(prefix, "f1_bias"), ParamKind::Hyper, &mut p.f1_bias);
    f(&join(prefix, "f2_weight"), ParamKind::Hyper, &mut p.f2_weights);
    f(&join(prefix, "f2_bias"), ParamKind::Hyper, &mut p.f2_bias);
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActStage {
    Static(RPReLUParams),
    Dynamic { hyper: HyperFunctionParams, beta: Param },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActCache {
    Static(FloatTensor),
    Dynamic(DynActState),
}

impl ActStage {
    fn new(mode: ActivationMode, channels: usize, reduction: usize, seed: u64, path: &str) -> Self {
        if mode.dynamic_prelu() {
            ActStage::Dynamic {
                hyper: HyperFunctionParams::new(
                    channels,
                    2 * channels,
                    reduction,
                    &mut layer_rng(seed, &join(path, "hyper")),
                ),
                beta: Param::filled(&[channels], DEFAULT_PRELU_SLOPE),
            }
        } else {
            ActStage::Static(RPReLUParams::new(channels))
        }
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<(FloatTensor, ActCache)> {
        match self {
            ActStage::Static(p) => Ok((rprelu_forward(x, p)?, ActCache::Static(x.clone()))),
            ActStage::Dynamic { hyper, beta } => {
                let (y, state) = dyprelu_forward(x, hyper, &beta.data)?;
                Ok((y, ActCache::Dynamic(state)))
            }
        }
    }

    pub fn backward(&mut self, cache: &ActCache, grad_out: &FloatTensor) -> Result<FloatTensor> {
        match (self, cache) {
            (ActStage::Static(p), ActCache::Static(x)) => {
                let (gx, g) = rprelu_backward(x, p, grad_out)?;
                p.gamma.accumulate(&g.gamma);
                p.zeta.accumulate(&g.zeta);
                p.beta.accumulate(&g.beta);
                Ok(gx)
            }
            (ActStage::Dynamic { hyper, beta }, ActCache::Dynamic(state)) => {
                let (gx, grads, gb) = dyprelu_backward(hyper, &beta.data, state, grad_out)?;
                hyper.accumulate(&grads);
                beta.accumulate(&gb);
                Ok(gx)
            }
            _ => Err(Error::StaleState("activation stage cache kind")),
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        match self {
            ActStage::Static(p) => {
                f(&join(prefix, "gamma"), ParamKind::Shift, &mut p.gamma);
                f(&join(prefix, "zeta"), ParamKind::Shift, &mut p.zeta);
                f(&join(prefix, "beta"), ParamKind::Shift, &mut p.beta);
            }
            ActStage::Dynamic { hyper, beta } => {
                visit_hyper(hyper, &join(prefix, "hyper"), f);
                f(&join(prefix, "beta"), ParamKind::Shift, beta);
            }
        }
    }
}

/// A binary conv (on packed ±1 activations) or a real conv (real blocks).
#[derive(Debug, Clone, PartialEq)]
pub enum ConvStage {
    Binary(BinaryConvLayer),
    Real(RealConvLayer),
}

impl ConvStage {
    fn new(binary: bool, geometry: ConvGeometry, seed: u64, path: &str) -> Result<Self> {
        let mut rng = layer_rng(seed, path);
        Ok(if binary {
            ConvStage::Binary(BinaryConvLayer::new(geometry, &mut rng)?)
        } else {
            ConvStage::Real(RealConvLayer::new(geometry, &mut rng)?)
        })
    }

    pub fn forward(&self, x: &Activations) -> Result<FloatTensor> {
        match (self, x) {
            (ConvStage::Binary(l), Activations::Bits(b)) => l.forward(b),
            (ConvStage::Real(l), Activations::Real(t)) => l.forward(t),
            _ => Err(Error::StaleState("conv stage fed the wrong activation kind")),
        }
    }

    pub fn backward(&mut self, x: &Activations, grad_out: &FloatTensor) -> Result<FloatTensor> {
        let (gx, gw) = match (&*self, x) {
            (ConvStage::Binary(l), Activations::Bits(b)) => l.backward(b, grad_out)?,
            (ConvStage::Real(l), Activations::Real(t)) => l.backward(t, grad_out)?,
            _ => return Err(Error::StaleState("conv stage fed the wrong activation kind")),
        };
        self.weights_mut().accumulate(&gw);
        Ok(gx)
    }

    fn weights_mut(&mut self) -> &mut Param {
        match self {
            ConvStage::Binary(l) => &mut l.weights,
            ConvStage::Real(l) => &mut l.weights,
        }
    }

    pub fn geometry(&self) -> &ConvGeometry {
        match self {
            ConvStage::Binary(l) => &l.geometry,
            ConvStage::Real(l) => &l.geometry,
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        let kind = match self {
            ConvStage::Binary(_) => ParamKind::LatentBinary,
            ConvStage::Real(_) => ParamKind::Weight,
        };
        f(&join(prefix, "weight"), kind, self.weights_mut());
    }
}

fn visit_bn(bn: &mut BatchNormLayer, prefix: &str, f: &mut ParamVisitor<'_>) {
    f(&join(prefix, "scale"), ParamKind::Weight, &mut bn.scale);
    f(&join(prefix, "shift"), ParamKind::Weight, &mut bn.shift);
    f(&join(prefix, "running_mean"), ParamKind::Buffer, &mut bn.running_mean);
    f(&join(prefix, "running_var"), ParamKind::Buffer, &mut bn.running_var);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub mode: ActivationMode,
    pub stride: usize,
    pub sign1: SignStage,
    pub conv3: ConvStage,
    pub bn1: BatchNormLayer,
    pub act1: ActStage,
    pub sign2: SignStage,
    /// One 1x1 branch, or two when the block doubles its channels.
    pub conv1: Vec<ConvStage>,
    pub bn2: Vec<BatchNormLayer>,
    pub act2: ActStage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache {
    input_shape: Shape,
    sign1: SignCache,
    bits1: Activations,
    bn1: BatchNormCache,
    act1: ActCache,
    sign2: SignCache,
    bits2: Activations,
    bn2: Vec<BatchNormCache>,
    act2: ActCache,
}

impl Block {
    fn new(
        mode: ActivationMode,
        cin: usize,
        cout: usize,
        stride: usize,
        reduction: usize,
        seed: u64,
        path: &str,
    ) -> Result<Self> {
        let binary = mode.binary();
        let g3 = ConvGeometry { cout: cin, cin, kh: 3, kw: 3, stride, padding: 1 };
        let g1 = ConvGeometry { cout: cin, cin, kh: 1, kw: 1, stride: 1, padding: 0 };
        let branches = cout / cin;
        let conv1 = if branches == 1 {
            vec![ConvStage::new(binary, g1, seed, &join(path, "conv1"))?]
        } else {
            vec![
                ConvStage::new(binary, g1, seed, &join(path, "conv1a"))?,
                ConvStage::new(binary, g1, seed, &join(path, "conv1b"))?,
            ]
        };
        Ok(Block {
            mode,
            stride,
            sign1: SignStage::new(mode, cin, reduction, seed, &join(path, "sign1")),
            conv3: ConvStage::new(binary, g3, seed, &join(path, "conv3"))?,
            bn1: BatchNormLayer::new(cin),
            act1: ActStage::new(mode, cin, reduction, seed, &join(path, "act1")),
            sign2: SignStage::new(mode, cin, reduction, seed, &join(path, "sign2")),
            bn2: (0..branches).map(|_| BatchNormLayer::new(cin)).collect(),
            conv1,
            act2: ActStage::new(mode, cout, reduction, seed, &join(path, "act2")),
        })
    }

    pub fn forward(&self, x: &FloatTensor, training: bool) -> Result<(FloatTensor, BlockCache)> {
        let (bits1, sign1) = self.sign1.forward(x)?;
        let (bn1_out, bn1) = self.bn1.forward(&self.conv3.forward(&bits1)?, training)?;
        let shortcut = if self.stride == 2 { avg_pool2x2(x)? } else { x.clone() };
        let h1 = bn1_out.add(&shortcut)?;
        let (a1, act1) = self.act1.forward(&h1)?;

        let (bits2, sign2) = self.sign2.forward(&a1)?;
        let mut bn2 = Vec::with_capacity(self.conv1.len());
        let mut branches = Vec::with_capacity(self.conv1.len());
        for (conv, norm) in self.conv1.iter().zip(&self.bn2) {
            let (y, cache) = norm.forward(&conv.forward(&bits2)?, training)?;
            branches.push(y.add(&a1)?);
            bn2.push(cache);
        }
        let h2 = match branches.as_slice() {
            [one] => one.clone(),
            [a, b] => FloatTensor::concat_channels(a, b)?,
            _ => unreachable!("one or two 1x1 branches"),
        };
        let (out, act2) = self.act2.forward(&h2)?;
        Ok((
            out,
            BlockCache {
                input_shape: x.shape(),
                sign1,
                bits1,
                bn1,
                act1,
                sign2,
                bits2,
                bn2,
                act2,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BlockCache, grad_out: &FloatTensor) -> Result<FloatTensor> {
        let grad_h2 = self.act2.backward(&cache.act2, grad_out)?;
        let branch_grads = if self.conv1.len() == 1 {
            vec![grad_h2]
        } else {
            let (a, b) = grad_h2.split_channels(grad_h2.shape().c / 2);
            vec![a, b]
        };
        let mut grad_a1: Option<FloatTensor> = None;
        let mut grad_bits2: Option<FloatTensor> = None;
        for (i, g) in branch_grads.iter().enumerate() {
            let (g_conv, bn_grads) = self.bn2[i].backward(&cache.bn2[i], g)?;
            self.bn2[i].scale.accumulate(&bn_grads.scale);
            self.bn2[i].shift.accumulate(&bn_grads.shift);
            let gb = self.conv1[i].backward(&cache.bits2, &g_conv)?;
            accumulate(&mut grad_bits2, gb);
            accumulate(&mut grad_a1, g.clone());
        }
        let mut grad_a1 = grad_a1.expect("at least one branch");
        grad_a1.add_assign(&self.sign2.backward(&cache.sign2, grad_bits2.expect("branch"))?);

        let grad_h1 = self.act1.backward(&cache.act1, &grad_a1)?;
        let mut grad_x = if self.stride == 2 {
            avg_pool2x2_backward(&grad_h1, cache.input_shape)
        } else {
            grad_h1.clone()
        };
        let (g_conv, bn_grads) = self.bn1.backward(&cache.bn1, &grad_h1)?;
        self.bn1.scale.accumulate(&bn_grads.scale);
        self.bn1.shift.accumulate(&bn_grads.shift);
        let grad_bits1 = self.conv3.backward(&cache.bits1, &g_conv)?;
        grad_x.add_assign(&self.sign1.backward(&cache.sign1, grad_bits1)?);
        Ok(grad_x)
    }

    fn commit_running_stats(&mut self, cache: &BlockCache) {
        let count = |c: &BatchNormCache| {
            let s = c.normalized.shape();
            s.n * s.spatial()
        };
        self.bn1.update_running(&cache.bn1, count(&cache.bn1));
        for (bn, c) in self.bn2.iter_mut().zip(&cache.bn2) {
            bn.update_running(c, count(c));
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.sign1.visit(&join(prefix, "sign1"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        visit_bn(&mut self.bn1, &join(prefix, "bn1"), f);
        self.act1.visit(&join(prefix, "act1"), f);
        self.sign2.visit(&join(prefix, "sign2"), f);
        let names: &[&str] = if self.conv1.len() == 1 { &["1"] } else { &["1a", "1b"] };
        for ((conv, bn), name) in self.conv1.iter_mut().zip(&mut self.bn2).zip(names) {
            conv.visit(&join(prefix, &format!("conv{name}")), f);
            visit_bn(bn, &join(prefix, &format!("bn{}", name.replacen('1', "2", 1))), f);
        }
        self.act2.visit(&join(prefix, "act2"), f);
    }

    pub fn binary_convs_mut(&mut self) -> impl Iterator<Item = &mut BinaryConvLayer> {
        std::iter::once(&mut self.conv3)
            .chain(self.conv1.iter_mut())
            .filter_map(|c| match c {
                ConvStage::Binary(l) => Some(l),
                ConvStage::Real(_) => None,
            })
    }

    pub fn binary_convs(&self) -> impl Iterator<Item = &BinaryConvLayer> {
        std::iter::once(&self.conv3)
            .chain(self.conv1.iter())
            .filter_map(|c| match c {
                ConvStage::Binary(l) => Some(l),
                ConvStage::Real(_) => None,
            })
    }
}

fn accumulate(slot: &mut Option<FloatTensor>, value: FloatTensor) {
    match slot {
        Some(acc) => acc.add_assign(&value),
        None => *slot = Some(value),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub conv: RealConvLayer,
    pub bn: Option<BatchNormLayer>,
}

/// Real-valued fully connected layer; `weight` is `out x in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Linear {
            inputs,
            outputs,
            weight: Param::uniform(&[outputs, inputs], bound, rng),
            bias: Param::zeros(&[outputs]),
        }
    }

    pub fn forward(&self, x: &ChannelVector) -> Result<ChannelVector> {
        if x.c != self.inputs {
            return Err(Error::shape("linear input", self.inputs, x.c));
        }
        let mut out = ChannelVector::zeros(x.n, self.outputs);
        for i in 0..x.n {
            let row = x.row(i);
            for o in 0..self.outputs {
                let w = &self.weight.data[o * self.inputs..(o + 1) * self.inputs];
                let s: f64 = w.iter().zip(row).map(|(a, b)| a * b).sum();
                out.values[i * self.outputs + o] = s + self.bias.data[o];
            }
        }
        Ok(out)
    }

    /// Returns `(grad_x, grad_weight, grad_bias)`.
    pub fn backward(
        &self,
        x: &ChannelVector,
        grad_out: &ChannelVector,
    ) -> Result<(ChannelVector, Vec<f64>, Vec<f64>)> {
        if grad_out.c != self.outputs || grad_out.n != x.n {
            return Err(Error::StaleState("linear gradient shape"));
        }
        let mut gx = ChannelVector::zeros(x.n, self.inputs);
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.outputs];
        for i in 0..x.n {
            let row = x.row(i);
            for o in 0..self.outputs {
                let g = grad_out.get(i, o);
                gb[o] += g;
                for j in 0..self.inputs {
                    gw[o * self.inputs + j] += g * row[j];
                    gx.values[i * self.inputs + j] += g * self.weight.data[o * self.inputs + j];
                }
            }
        }
        Ok((gx, gw, gb))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub name: String,
    pub mean: f64,
    pub max_abs: f64,
    pub non_finite: usize,
}

impl LayerStats {
    fn of(name: &str, values: &[f64]) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        LayerStats {
            name: name.to_string(),
            mean: if finite.is_empty() { 0.0 } else { finite.iter().sum::<f64>() / finite.len() as f64 },
            max_abs: finite.iter().fold(0.0, |m, v| m.max(v.abs())),
            non_finite: values.len() - finite.len(),
        }
    }
}

impl std::fmt::Display for LayerStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} mean={:.6e} max_abs={:.6e} non_finite={}",
            self.name, self.mean, self.max_abs, self.non_finite
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub stem: Option<Stem>,
    pub blocks: Vec<Block>,
    pub classifier: Linear,
    weight_mode: WeightMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    input: Option<FloatTensor>,
    stem_conv_out: Option<BatchNormCache>,
    blocks: Vec<BlockCache>,
    features_shape: Shape,
    pooled: ChannelVector,
}

/// Builds a model from its configuration. Initialization depends only on the
/// config seed and each layer's path.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    let stages = cfg.validate()?;
    let cfg = cfg.resolved()?;
    let Some(cls) = cfg.classifier else {
        return Err(Error::config("classifier", "a trainable model needs a classifier"));
    };
    let stem = match &cfg.stem {
        Some(s) => {
            let geometry = ConvGeometry {
                cout: s.out_channels,
                cin: cfg.input.channels,
                kh: s.kernel,
                kw: s.kernel,
                stride: s.stride,
                padding: s.kernel / 2,
            };
            Some(Stem {
                conv: RealConvLayer::new(geometry, &mut layer_rng(cfg.seed, "stem.conv"))?,
                bn: s.batch_norm.then(|| BatchNormLayer::new(s.out_channels)),
            })
        }
        None => None,
    };
    let mut blocks = Vec::with_capacity(cfg.blocks.len());
    for (i, b) in cfg.blocks.iter().enumerate() {
        blocks.push(Block::new(
            cfg.block_activation(i),
            b.in_channels,
            b.out_channels,
            b.stride,
            cfg.reduction,
            cfg.seed,
            &format!("blocks.{i}"),
        )?);
    }
    let features = stages.last().expect("validate returns the final stage").channels;
    let classifier = Linear::new(features, cls.classes, &mut layer_rng(cfg.seed, "classifier"));
    Ok(Model {
        config: cfg,
        stem,
        blocks,
        classifier,
        weight_mode: WeightMode::Binary,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_shape(&self, n: usize) -> Shape {
        let i = &self.config.input;
        Shape::new(n, i.channels, i.height, i.width)
    }

    pub fn classes(&self) -> usize {
        self.classifier.outputs
    }

    pub fn weight_mode(&self) -> WeightMode {
        self.weight_mode
    }

    /// Switches every binary conv between binary and real-valued weights.
    /// Latent weights are untouched.
    pub fn set_weight_mode(&mut self, mode: WeightMode) {
        self.weight_mode = mode;
        for b in &mut self.blocks {
            for conv in b.binary_convs_mut() {
                conv.mode = mode;
            }
        }
    }

    /// Returns logits (`n x classes`) and the cache needed by [`Model::backward`].
    /// BN uses batch statistics when `training`; running statistics are only
    /// updated by [`Model::commit_running_stats`].
    pub fn forward(&self, x: &FloatTensor, training: bool) -> Result<(ChannelVector, ForwardCache)> {
        let expect = self.input_shape(x.shape().n);
        if x.shape() != expect {
            return Err(Error::shape("model input", expect, x.shape()));
        }
        let mut stem_bn = None;
        let mut h = match &self.stem {
            Some(stem) => {
                let y = stem.conv.forward(x)?;
                match &stem.bn {
                    Some(bn) => {
                        let (y, c) = bn.forward(&y, training)?;
                        stem_bn = Some(c);
                        y
                    }
                    None => y,
                }
            }
            None => x.clone(),
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&h, training)?;
            caches.push(c);
            h = y;
        }
        let pooled = global_avg_pool(&h)?;
        let logits = self.classifier.forward(&pooled)?;
        Ok((
            logits,
            ForwardCache {
                input: training.then(|| x.clone()),
                stem_conv_out: stem_bn,
                blocks: caches,
                features_shape: h.shape(),
                pooled,
            },
        ))
    }

    /// Inference-mode logits.
    pub fn predict(&self, x: &FloatTensor) -> Result<ChannelVector> {
        Ok(self.forward(x, false)?.0)
    }

    pub fn commit_running_stats(&mut self, cache: &ForwardCache) {
        if let (Some(stem), Some(c)) = (&mut self.stem, &cache.stem_conv_out) {
            if let Some(bn) = &mut stem.bn {
                let s = c.normalized.shape();
                bn.update_running(c, s.n * s.spatial());
            }
        }
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            b.commit_running_stats(c);
        }
    }

    /// Accumulates parameter gradients for `d loss / d logits = grad_logits`.
    pub fn backward(&mut self, cache: &ForwardCache, grad_logits: &ChannelVector) -> Result<()> {
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::StaleState("forward cache does not match the model"));
        }
        let (g_pooled, gw, gb) = self.classifier.backward(&cache.pooled, grad_logits)?;
        self.classifier.weight.accumulate(&gw);
        self.classifier.bias.accumulate(&gb);
        let mut g = global_avg_pool_backward(&g_pooled, cache.features_shape);
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = block.backward(c, &g)?;
        }
        if let Some(stem) = &mut self.stem {
            let input = cache
                .input
                .as_ref()
                .ok_or(Error::StaleState("backward needs a training-mode forward"))?;
            if let (Some(bn), Some(c)) = (&mut stem.bn, &cache.stem_conv_out) {
                let (gx, grads) = bn.backward(c, &g)?;
                bn.scale.accumulate(&grads.scale);
                bn.shift.accumulate(&grads.shift);
                g = gx;
            }
            let (_, gw) = stem.conv.backward(input, &g)?;
            stem.conv.weights.accumulate(&gw);
        }
        Ok(())
    }

    /// Visits every parameter and buffer in a fixed order with its dotted name.
    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        if let Some(stem) = &mut self.stem {
            f("stem.conv.weight", ParamKind::Weight, &mut stem.conv.weights);
            if let Some(bn) = &mut stem.bn {
                visit_bn(bn, "stem.bn", f);
            }
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        f("classifier.weight", ParamKind::Weight, &mut self.classifier.weight);
        f("classifier.bias", ParamKind::Weight, &mut self.classifier.bias);
    }

    /// `(name, kind, values)` for every parameter, in visiting order.
    pub fn named_params(&self) -> Vec<(String, ParamKind, Param)> {
        let mut copy = self.clone();
        let mut out = Vec::new();
        copy.visit_params(&mut |name, kind, p| out.push((name.to_string(), kind, p.clone())));
        out
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, _, p| p.zero_grad());
    }

    /// Clamps latent binary weights to [-1, 1] and re-packs them.
    pub fn after_update(&mut self) {
        for b in &mut self.blocks {
            for conv in b.binary_convs_mut() {
                conv.clamp_latent();
                conv.refresh_packed();
            }
        }
    }

    /// Re-packs binary weights without clamping (after loading parameters).
    pub fn refresh_packed(&mut self) {
        for b in &mut self.blocks {
            for conv in b.binary_convs_mut() {
                conv.refresh_packed();
            }
        }
    }

    /// Output statistics of every stage for one forward pass, used to
    /// diagnose numerical failures.
    pub fn layer_stats(&self, x: &FloatTensor, training: bool) -> Result<Vec<LayerStats>> {
        let mut out = vec![LayerStats::of("input", x.data())];
        let mut h = x.clone();
        if let Some(stem) = &self.stem {
            h = stem.conv.forward(&h)?;
            out.push(LayerStats::of("stem.conv", h.data()));
            if let Some(bn) = &stem.bn {
                h = bn.forward(&h, training)?.0;
                out.push(LayerStats::of("stem.bn", h.data()));
            }
        }
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, training)?.0;
            out.push(LayerStats::of(&format!("blocks.{i}"), h.data()));
        }
        let logits = self.classifier.forward(&global_avg_pool(&h)?)?;
        out.push(LayerStats::of("classifier", &logits.values));
        Ok(out)
    }

    /// Per-layer summary lines: `name kind dims`.
    pub fn describe(&self) -> Vec<String> {
        self.named_params()
            .into_iter()
            .map(|(name, kind, p)| format!("{name} {kind:?} {:?}", p.dims))
            .collect()
    }
}
