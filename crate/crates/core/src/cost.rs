//! Operation counts: `OPs = BOPs / 64 + FLOPs`.
//!
//! Counting convention (see [`CountingConvention`]): one multiply-accumulate
//! is one FLOP (or one BOP for binary convs); BN and PReLU are charged per
//! output element; every dynamic sign site adds `C + C^2/8` FLOPs and every
//! dynamic PReLU site adds `2 (C + C^2/8)`. All arithmetic is exact.

use num_rational::Ratio;

use crate::config::{ActivationMode, ModelConfig};
use crate::error::Result;

pub type Exact = Ratio<i128>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCount {
    pub bops: i128,
    pub flops: Exact,
}

impl OpCount {
    pub fn zero() -> Self {
        OpCount {
            bops: 0,
            flops: Exact::from_integer(0),
        }
    }

    pub fn binary(bops: i128) -> Self {
        OpCount {
            bops,
            flops: Exact::from_integer(0),
        }
    }

    pub fn float(flops: Exact) -> Self {
        OpCount { bops: 0, flops }
    }

    pub fn ops(&self) -> Exact {
        Exact::new(self.bops, 64) + self.flops
    }

    pub fn sub(&self, other: &OpCount) -> OpCount {
        OpCount {
            bops: self.bops - other.bops,
            flops: self.flops - other.flops,
        }
    }
}

impl std::ops::Add for OpCount {
    type Output = OpCount;
    fn add(self, o: OpCount) -> OpCount {
        OpCount {
            bops: self.bops + o.bops,
            flops: self.flops + o.flops,
        }
    }
}

impl std::iter::Sum for OpCount {
    fn sum<I: Iterator<Item = OpCount>>(iter: I) -> OpCount {
        iter.fold(OpCount::zero(), |a, b| a + b)
    }
}

pub fn to_f64(r: Exact) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountingConvention {
    /// FLOPs per BN output element. A folded BN is one multiply-add.
    pub bn_flops_per_element: i128,
    /// FLOPs per PReLU output element.
    pub prelu_flops_per_element: i128,
}

impl Default for CountingConvention {
    fn default() -> Self {
        CountingConvention {
            bn_flops_per_element: 1,
            prelu_flops_per_element: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    RealConv,
    BinaryConv,
    BatchNorm,
    Sign,
    RSign,
    DySign,
    RPReLU,
    DyPReLU,
    Linear,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::RealConv => "real-conv",
            LayerKind::BinaryConv => "binary-conv",
            LayerKind::BatchNorm => "batch-norm",
            LayerKind::Sign => "sign",
            LayerKind::RSign => "rsign",
            LayerKind::DySign => "dysign",
            LayerKind::RPReLU => "rprelu",
            LayerKind::DyPReLU => "dyprelu",
            LayerKind::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOps {
    pub name: String,
    pub kind: LayerKind,
    pub count: OpCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpsReport {
    pub layers: Vec<LayerOps>,
    pub total: OpCount,
}

/// Extra FLOPs of one dynamic sign site over `channels` channels: `C + C^2/8`.
pub fn dysign_increment(channels: usize) -> Exact {
    let c = channels as i128;
    Exact::from_integer(c) + Exact::new(c * c, 8)
}

/// Extra FLOPs of one dynamic PReLU site: `2 (C + C^2/8)`.
pub fn dyprelu_increment(channels: usize) -> Exact {
    dysign_increment(channels) * Exact::from_integer(2)
}

struct Counter {
    conv: CountingConvention,
    layers: Vec<LayerOps>,
}

impl Counter {
    fn push(&mut self, name: String, kind: LayerKind, count: OpCount) {
        self.layers.push(LayerOps { name, kind, count });
    }

    fn bn(&mut self, name: String, elements: usize) {
        let f = Exact::from_integer(self.conv.bn_flops_per_element * elements as i128);
        self.push(name, LayerKind::BatchNorm, OpCount::float(f));
    }
}

fn macs(cout: usize, cin: usize, k: usize, h: usize, w: usize) -> i128 {
    (cout * cin * k * k * h * w) as i128
}

pub fn count_ops(cfg: &ModelConfig) -> Result<OpsReport> {
    count_ops_with(cfg, CountingConvention::default())
}

/// Per-layer counts for one inference of a single image.
pub fn count_ops_with(cfg: &ModelConfig, convention: CountingConvention) -> Result<OpsReport> {
    let stages = cfg.validate()?;
    let mut ctr = Counter {
        conv: convention,
        layers: Vec::new(),
    };
    if let Some(stem) = &cfg.stem {
        let out = stages[0];
        ctr.push(
            "stem.conv".into(),
            LayerKind::RealConv,
            OpCount::float(Exact::from_integer(macs(
                stem.out_channels,
                cfg.input.channels,
                stem.kernel,
                out.height,
                out.width,
            ))),
        );
        if stem.batch_norm {
            ctr.bn("stem.bn".into(), out.channels * out.height * out.width);
        }
    }
    for (i, b) in cfg.blocks.iter().enumerate() {
        let mode = cfg.block_activation(i);
        let p = |s: &str| format!("blocks.{i}.{s}");
        let cin = b.in_channels;
        let (ho, wo) = (stages[i].height / b.stride, stages[i].width / b.stride);
        let plane = ho * wo;

        let conv = |cout: usize, k: usize| {
            let m = macs(cout, cin, k, ho, wo);
            if mode.binary() {
                (LayerKind::BinaryConv, OpCount::binary(m))
            } else {
                (LayerKind::RealConv, OpCount::float(Exact::from_integer(m)))
            }
        };
        let sign = |ctr: &mut Counter, name: String| match mode {
            ActivationMode::Real => ctr.push(name, LayerKind::Sign, OpCount::zero()),
            m if m.dynamic_sign() => {
                ctr.push(name, LayerKind::DySign, OpCount::float(dysign_increment(cin)))
            }
            _ => ctr.push(name, LayerKind::RSign, OpCount::zero()),
        };
        let prelu = |ctr: &mut Counter, name: String, channels: usize| {
            let base = Exact::from_integer(convention.prelu_flops_per_element * (channels * plane) as i128);
            if mode.dynamic_prelu() {
                ctr.push(name, LayerKind::DyPReLU, OpCount::float(base + dyprelu_increment(channels)))
            } else {
                ctr.push(name, LayerKind::RPReLU, OpCount::float(base))
            }
        };

        sign(&mut ctr, p("sign1"));
        let (kind, count) = conv(cin, 3);
        ctr.push(p("conv3"), kind, count);
        ctr.bn(p("bn1"), cin * plane);
        prelu(&mut ctr, p("act1"), cin);
        sign(&mut ctr, p("sign2"));
        let branches: &[&str] = if b.out_channels == cin { &["1"] } else { &["1a", "1b"] };
        for name in branches {
            let (kind, count) = conv(cin, 1);
            ctr.push(p(&format!("conv{name}")), kind, count);
            ctr.bn(p(&format!("bn{}", name.replacen('1', "2", 1))), cin * plane);
        }
        prelu(&mut ctr, p("act2"), b.out_channels);
    }
    if let Some(cls) = &cfg.classifier {
        let features = stages.last().expect("final stage").channels;
        ctr.push(
            "classifier".into(),
            LayerKind::Linear,
            OpCount::float(Exact::from_integer((features * cls.classes) as i128)),
        );
    }
    let total = ctr.layers.iter().map(|l| l.count).sum();
    Ok(OpsReport {
        layers: ctr.layers,
        total,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub name: String,
    pub kind_a: Option<LayerKind>,
    pub kind_b: Option<LayerKind>,
    pub a: OpCount,
    pub b: OpCount,
    /// `b - a`
    pub delta: OpCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<DeltaRow>,
    pub total_a: OpCount,
    pub total_b: OpCount,
    pub delta: OpCount,
}

impl Comparison {
    /// Relative change of total OPs from `a` to `b`, in percent.
    pub fn percent_change(&self) -> f64 {
        let base = to_f64(self.total_a.ops());
        if base == 0.0 {
            0.0
        } else {
            100.0 * to_f64(self.delta.ops()) / base
        }
    }
}

/// Aligns the two reports by layer name (order of `a`, then layers only in `b`).
pub fn compare_configs(a: &ModelConfig, b: &ModelConfig) -> Result<Comparison> {
    compare_configs_with(a, b, CountingConvention::default())
}

pub fn compare_configs_with(
    a: &ModelConfig,
    b: &ModelConfig,
    convention: CountingConvention,
) -> Result<Comparison> {
    let ra = count_ops_with(a, convention)?;
    let rb = count_ops_with(b, convention)?;
    let mut rows: Vec<DeltaRow> = ra
        .layers
        .iter()
        .map(|l| {
            let other = rb.layers.iter().find(|o| o.name == l.name);
            let bc = other.map_or(OpCount::zero(), |o| o.count);
            DeltaRow {
                name: l.name.clone(),
                kind_a: Some(l.kind),
                kind_b: other.map(|o| o.kind),
                a: l.count,
                b: bc,
                delta: bc.sub(&l.count),
            }
        })
        .collect();
    for l in &rb.layers {
        if !ra.layers.iter().any(|o| o.name == l.name) {
            rows.push(DeltaRow {
                name: l.name.clone(),
                kind_a: None,
                kind_b: Some(l.kind),
                a: OpCount::zero(),
                b: l.count,
                delta: l.count,
            });
        }
    }
    Ok(Comparison {
        rows,
        total_a: ra.total,
        total_b: rb.total,
        delta: rb.total.sub(&ra.total),
    })
}

pub fn format_exact(r: Exact) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Aligned plain-text table.
pub fn render_report(report: &OpsReport) -> String {
    let width = report.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
    let mut s = format!(
        "{:<width$}  {:<12}  {:>14}  {:>14}  {:>16}\n",
        "layer", "kind", "BOPs", "FLOPs", "OPs"
    );
    for l in &report.layers {
        s += &format!(
            "{:<width$}  {:<12}  {:>14}  {:>14.1}  {:>16.3}\n",
            l.name,
            l.kind.as_str(),
            l.count.bops,
            to_f64(l.count.flops),
            to_f64(l.count.ops())
        );
    }
    s += &format!(
        "{:<width$}  {:<12}  {:>14}  {:>14.1}  {:>16.3}\n",
        "total",
        "",
        report.total.bops,
        to_f64(report.total.flops),
        to_f64(report.total.ops())
    );
    s += &format!("total OPs = {:.4e}\n", to_f64(report.total.ops()));
    s
}

pub fn render_comparison(c: &Comparison) -> String {
    let width = c.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let kind = |k: Option<LayerKind>| k.map_or("-", |k| k.as_str());
    let mut s = format!(
        "{:<width$}  {:<12}  {:<12}  {:>16}  {:>16}  {:>14}\n",
        "layer", "kind a", "kind b", "OPs a", "OPs b", "delta"
    );
    for r in &c.rows {
        s += &format!(
            "{:<width$}  {:<12}  {:<12}  {:>16.3}  {:>16.3}  {:>14.3}\n",
            r.name,
            kind(r.kind_a),
            kind(r.kind_b),
            to_f64(r.a.ops()),
            to_f64(r.b.ops()),
            to_f64(r.delta.ops())
        );
    }
    s += &format!(
        "{:<width$}  {:<12}  {:<12}  {:>16.3}  {:>16.3}  {:>14.3}\n",
        "total",
        "",
        "",
        to_f64(c.total_a.ops()),
        to_f64(c.total_b.ops()),
        to_f64(c.delta.ops())
    );
    s += &format!("change: {:+.3}%\n", c.percent_change());
    s
}
