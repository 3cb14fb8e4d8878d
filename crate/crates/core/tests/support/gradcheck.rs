//! Analytic gradients against central finite differences, in f64.
//!
//! Each check contracts the layer output with a fixed random tensor `r`, so
//! the scalar loss is `sum(r * f(theta))` and its gradient is `backward(r)`.
//! Hard `Sign` is replaced by the piecewise-quadratic approximation whose
//! derivative the surrogate backward implements.

#![allow(dead_code)]

use dybnn::act::{
    dyprelu_backward, dyprelu_forward, dysign_backward, dysign_forward,
    hyper_backward, hyper_forward, rprelu_backward, rprelu_forward, rsign_backward,
    HyperFunctionParams, RPReLUParams, RSignParams,
};
use dybnn::binconv::{BatchNormLayer, BinaryConvLayer, RealConvLayer, WeightMode, BINARY_PAD_VALUE};
use dybnn::bits::{pack, unpack};
use dybnn::config::{ActivationMode, ModelConfig};
use dybnn::conv::{conv2d, ConvGeometry};
use dybnn::network::{build_model, layer_rng, Linear};
use dybnn::param::Param;
use dybnn::tensor::{global_avg_pool, ChannelVector, FloatTensor, Shape};
use dybnn::train::cross_entropy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

/// Piecewise-quadratic sign: `-1` below `-1`, `2u + u^2` on `[-1, 0)`,
/// `2u - u^2` on `[0, 1)`, `1` above.
fn approx_sign(u: f64) -> f64 {
    if u < -1.0 {
        -1.0
    } else if u < 0.0 {
        2.0 * u + u * u
    } else if u < 1.0 {
        2.0 * u - u * u
    } else {
        1.0
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x6772_6164 ^ seed)
}

fn random_vec(len: usize, scale: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| r.gen_range(-scale..scale)).collect()
}

fn random_tensor(shape: Shape, scale: f64, r: &mut ChaCha8Rng) -> FloatTensor {
    FloatTensor::from_vec(shape, random_vec(shape.len(), scale, r)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relative error with the denominator floored so that gradients that are
/// zero on both sides compare as equal.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

thread_local! {
    static WORST: std::cell::Cell<f64> = const { std::cell::Cell::new(0.0) };
}

/// Largest relative error seen by [`fd_check`] on this thread since the last call.
pub fn take_worst() -> f64 {
    WORST.with(|w| w.replace(0.0))
}

/// Panics unless `analytic` matches central differences of `loss` around
/// `at`; returns the largest relative error.
fn fd_check(what: &str, at: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64) -> f64 {
    assert_eq!(at.len(), analytic.len(), "{what}: gradient length");
    let mut worst: f64 = 0.0;
    let mut x = at.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + STEP;
        let up = loss(&x);
        x[i] = orig - STEP;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let e = rel_err(analytic[i], numeric);
        assert!(
            e < TOLERANCE,
            "{what}[{i}]: analytic {} numeric {numeric} (rel {e:e})",
            analytic[i]
        );
        worst = worst.max(e);
    }
    WORST.with(|w| w.set(w.get().max(worst)));
    worst
}

fn tensor(shape: Shape, v: &[f64]) -> FloatTensor {
    FloatTensor::from_vec(shape, v.to_vec()).unwrap()
}

fn random_hyper(c: usize, k: usize, r: &mut ChaCha8Rng) -> HyperFunctionParams {
    let mut p = HyperFunctionParams::new(c, k, 2, r);
    p.f2_weights.data = random_vec(p.f2_weights.len(), 0.5, r);
    p.f1_bias.data = random_vec(p.f1_bias.len(), 0.2, r);
    p.f2_bias.data = random_vec(p.f2_bias.len(), 0.2, r);
    p
}

fn hyper_flat(p: &HyperFunctionParams) -> Vec<f64> {
    [&p.f1_weights.data, &p.f1_bias.data, &p.f2_weights.data, &p.f2_bias.data]
        .iter()
        .flat_map(|v| v.iter().copied())
        .collect()
}

fn hyper_from_flat(template: &HyperFunctionParams, flat: &[f64]) -> HyperFunctionParams {
    let mut p = template.clone();
    let mut off = 0;
    for dst in [&mut p.f1_weights, &mut p.f1_bias, &mut p.f2_weights, &mut p.f2_bias] {
        let n = dst.len();
        dst.data = flat[off..off + n].to_vec();
        off += n;
    }
    p
}

fn hyper_grads_flat(g: &dybnn::act::HyperGrads) -> Vec<f64> {
    [&g.f1_weights, &g.f1_bias, &g.f2_weights, &g.f2_bias]
        .iter()
        .flat_map(|v| v.iter().copied())
        .collect()
}

pub fn hyper_function() {
    for seed in 0..INSTANCES {
        let r = &mut rng(seed);
        let (n, c) = (r.gen_range(1..4), r.gen_range(2..9));
        let k = if seed % 2 == 0 { c } else { 2 * c };
        let p = random_hyper(c, k, r);
        let g = ChannelVector::from_rows(n, c, random_vec(n * c, 1.0, r)).unwrap();
        let proj = random_vec(n * k, 1.0, r);
        let (_, cache) = hyper_forward(&g, &p).unwrap();
        let (gg, gp) = hyper_backward(&p, &cache, &ChannelVector::from_rows(n, k, proj.clone()).unwrap()).unwrap();

        fd_check("hyper input", &g.values, &gg.values, |v| {
            let g = ChannelVector::from_rows(n, c, v.to_vec()).unwrap();
            dot(&hyper_forward(&g, &p).unwrap().0.values, &proj)
        });
        fd_check("hyper params", &hyper_flat(&p), &hyper_grads_flat(&gp), |v| {
            dot(&hyper_forward(&g, &hyper_from_flat(&p, v)).unwrap().0.values, &proj)
        });
    }
}

pub fn rprelu() {
    for seed in 0..INSTANCES {
        let r = &mut rng(100 + seed);
        let shape = Shape::new(r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..4), r.gen_range(1..4));
        let c = shape.c;
        let x = random_tensor(shape, 2.0, r);
        let mut p = RPReLUParams::new(c);
        p.gamma.data = random_vec(c, 0.5, r);
        p.zeta.data = random_vec(c, 0.5, r);
        p.beta.data = random_vec(c, 0.5, r);
        let proj = random_vec(shape.len(), 1.0, r);
        let (gx, gp) = rprelu_backward(&x, &p, &tensor(shape, &proj)).unwrap();

        fd_check("rprelu x", x.data(), gx.data(), |v| {
            dot(rprelu_forward(&tensor(shape, v), &p).unwrap().data(), &proj)
        });
        let flat: Vec<f64> = [&p.gamma.data, &p.zeta.data, &p.beta.data].into_iter().flatten().copied().collect();
        let grads: Vec<f64> = [&gp.gamma, &gp.zeta, &gp.beta].into_iter().flatten().copied().collect();
        fd_check("rprelu params", &flat, &grads, |v| {
            let mut q = p.clone();
            q.gamma.data = v[..c].to_vec();
            q.zeta.data = v[c..2 * c].to_vec();
            q.beta.data = v[2 * c..].to_vec();
            dot(rprelu_forward(&x, &q).unwrap().data(), &proj)
        });
    }
}

pub fn dyprelu() {
    for seed in 0..INSTANCES {
        let r = &mut rng(200 + seed);
        let shape = Shape::new(r.gen_range(1..3), r.gen_range(2..6), r.gen_range(1..4), r.gen_range(2..4));
        let c = shape.c;
        let x = random_tensor(shape, 2.0, r);
        let p = random_hyper(c, 2 * c, r);
        let beta = random_vec(c, 0.5, r);
        let proj = random_vec(shape.len(), 1.0, r);
        let (_, state) = dyprelu_forward(&x, &p, &beta).unwrap();
        let (gx, gp, gb) = dyprelu_backward(&p, &beta, &state, &tensor(shape, &proj)).unwrap();

        fd_check("dyprelu x", x.data(), gx.data(), |v| {
            dot(dyprelu_forward(&tensor(shape, v), &p, &beta).unwrap().0.data(), &proj)
        });
        fd_check("dyprelu hyper", &hyper_flat(&p), &hyper_grads_flat(&gp), |v| {
            dot(dyprelu_forward(&x, &hyper_from_flat(&p, v), &beta).unwrap().0.data(), &proj)
        });
        fd_check("dyprelu beta", &beta, &gb, |v| {
            dot(dyprelu_forward(&x, &p, v).unwrap().0.data(), &proj)
        });
    }
}

pub fn batch_norm_training_mode() {
    for seed in 0..INSTANCES {
        let r = &mut rng(300 + seed);
        let shape = Shape::new(r.gen_range(2..4), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(2..4));
        let c = shape.c;
        let x = random_tensor(shape, 2.0, r);
        let mut bn = BatchNormLayer::new(c);
        bn.scale.data = random_vec(c, 2.0, r);
        bn.shift.data = random_vec(c, 1.0, r);
        let proj = random_vec(shape.len(), 1.0, r);
        let (_, cache) = bn.forward(&x, true).unwrap();
        let (gx, gp) = bn.backward(&cache, &tensor(shape, &proj)).unwrap();

        fd_check("bn x", x.data(), gx.data(), |v| {
            dot(bn.forward(&tensor(shape, v), true).unwrap().0.data(), &proj)
        });
        let flat: Vec<f64> = bn.scale.data.iter().chain(&bn.shift.data).copied().collect();
        let grads: Vec<f64> = gp.scale.iter().chain(&gp.shift).copied().collect();
        fd_check("bn params", &flat, &grads, |v| {
            let mut b = bn.clone();
            b.scale.data = v[..c].to_vec();
            b.shift.data = v[c..].to_vec();
            dot(b.forward(&x, true).unwrap().0.data(), &proj)
        });
    }
}

pub fn batch_norm_inference_mode() {
    for seed in 0..INSTANCES {
        let r = &mut rng(350 + seed);
        let shape = Shape::new(r.gen_range(1..3), r.gen_range(1..4), 2, 3);
        let x = random_tensor(shape, 2.0, r);
        let mut bn = BatchNormLayer::new(shape.c);
        bn.scale.data = random_vec(shape.c, 2.0, r);
        bn.running_mean.data = random_vec(shape.c, 1.0, r);
        bn.running_var.data = random_vec(shape.c, 1.0, r).iter().map(|v| v.abs() + 0.1).collect();
        let proj = random_vec(shape.len(), 1.0, r);
        let (_, cache) = bn.forward(&x, false).unwrap();
        let (gx, _) = bn.backward(&cache, &tensor(shape, &proj)).unwrap();
        fd_check("bn eval x", x.data(), gx.data(), |v| {
            dot(bn.forward(&tensor(shape, v), false).unwrap().0.data(), &proj)
        });
    }
}

fn random_geometry(r: &mut ChaCha8Rng, max_c: usize) -> ConvGeometry {
    let k = if r.gen_bool(0.5) { 1 } else { 3 };
    ConvGeometry {
        cout: r.gen_range(1..=max_c),
        cin: r.gen_range(1..=max_c),
        kh: k,
        kw: k,
        stride: r.gen_range(1..=2),
        padding: if k == 3 { r.gen_range(0..=1) } else { 0 },
    }
}

pub fn real_conv() {
    for seed in 0..INSTANCES {
        let r = &mut rng(400 + seed);
        let g = random_geometry(r, 4);
        let shape = Shape::new(r.gen_range(1..3), g.cin, r.gen_range(3..6), r.gen_range(3..6));
        let mut layer = RealConvLayer::new(g, r).unwrap();
        layer.weights.data = random_vec(g.weight_len(), 1.0, r);
        let x = random_tensor(shape, 1.0, r);
        let out = layer.forward(&x).unwrap().shape();
        let proj = random_vec(out.len(), 1.0, r);
        let (gx, gw) = layer.backward(&x, &tensor(out, &proj)).unwrap();

        fd_check("conv x", x.data(), gx.data(), |v| {
            dot(layer.forward(&tensor(shape, v)).unwrap().data(), &proj)
        });
        fd_check("conv w", &layer.weights.data, &gw, |v| {
            let mut l = layer.clone();
            l.weights.data = v.to_vec();
            dot(l.forward(&x).unwrap().data(), &proj)
        });
    }
}

pub fn classifier() {
    for seed in 0..INSTANCES {
        let r = &mut rng(500 + seed);
        let (n, i, o) = (r.gen_range(1..4), r.gen_range(1..8), r.gen_range(2..6));
        let mut lin = Linear::new(i, o, &mut layer_rng(seed, "classifier"));
        lin.bias.data = random_vec(o, 0.5, r);
        let x = ChannelVector::from_rows(n, i, random_vec(n * i, 1.0, r)).unwrap();
        let proj = random_vec(n * o, 1.0, r);
        let (gx, gw, gb) = lin.backward(&x, &ChannelVector::from_rows(n, o, proj.clone()).unwrap()).unwrap();

        fd_check("linear x", &x.values, &gx.values, |v| {
            dot(&lin.forward(&ChannelVector::from_rows(n, i, v.to_vec()).unwrap()).unwrap().values, &proj)
        });
        fd_check("linear w", &lin.weight.data, &gw, |v| {
            let mut l = lin.clone();
            l.weight.data = v.to_vec();
            dot(&l.forward(&x).unwrap().values, &proj)
        });
        fd_check("linear b", &lin.bias.data, &gb, |v| {
            let mut l = lin.clone();
            l.bias.data = v.to_vec();
            dot(&l.forward(&x).unwrap().values, &proj)
        });
    }
}

pub fn cross_entropy_gradient() {
    for seed in 0..INSTANCES {
        let r = &mut rng(550 + seed);
        let (n, c) = (r.gen_range(1..5), r.gen_range(2..7));
        let logits = ChannelVector::from_rows(n, c, random_vec(n * c, 3.0, r)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        fd_check("cross entropy", &logits.values, &g.values, |v| {
            cross_entropy(&ChannelVector::from_rows(n, c, v.to_vec()).unwrap(), &labels).unwrap().0
        });
    }
}

pub fn rsign_surrogate_path() {
    for seed in 0..INSTANCES {
        let r = &mut rng(600 + seed);
        let shape = Shape::new(r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..4), r.gen_range(2..4));
        let c = shape.c;
        let x = random_tensor(shape, 1.5, r);
        let mut p = RSignParams::zeros(c);
        p.thresholds.data = random_vec(c, 0.5, r);
        let proj = random_vec(shape.len(), 1.0, r);
        let (gx, gt) = rsign_backward(&x, &p, &tensor(shape, &proj)).unwrap();

        let surrogate = |x: &[f64], t: &[f64]| -> f64 {
            let hw = shape.spatial();
            x.iter()
                .enumerate()
                .map(|(i, &v)| proj[i] * approx_sign(v - t[(i / hw) % c]))
                .sum()
        };
        fd_check("rsign x", x.data(), gx.data(), |v| surrogate(v, &p.thresholds.data));
        fd_check("rsign thresholds", &p.thresholds.data, &gt, |t| surrogate(x.data(), t));
    }
}

pub fn dysign_surrogate_path() {
    for seed in 0..INSTANCES {
        let r = &mut rng(700 + seed);
        let shape = Shape::new(r.gen_range(1..3), r.gen_range(2..6), r.gen_range(1..4), r.gen_range(2..4));
        let c = shape.c;
        let x = random_tensor(shape, 1.5, r);
        let p = random_hyper(c, c, r);
        let proj = random_vec(shape.len(), 1.0, r);
        let (_, state) = dysign_forward(&x, &p).unwrap();
        let (gx, gp) = dysign_backward(&p, &state, &tensor(shape, &proj)).unwrap();

        let surrogate = |x: &FloatTensor, p: &HyperFunctionParams| -> f64 {
            let (t, _) = hyper_forward(&global_avg_pool(x).unwrap(), p).unwrap();
            let hw = shape.spatial();
            x.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let (n, ch) = (i / (hw * c), (i / hw) % c);
                    proj[i] * approx_sign(v - t.get(n, ch))
                })
                .sum()
        };
        fd_check("dysign x", x.data(), gx.data(), |v| surrogate(&tensor(shape, v), &p));
        fd_check("dysign hyper", &hyper_flat(&p), &hyper_grads_flat(&gp), |v| {
            surrogate(&x, &hyper_from_flat(&p, v))
        });
    }
}

fn random_signs(shape: Shape, r: &mut ChaCha8Rng) -> FloatTensor {
    let v = (0..shape.len()).map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    FloatTensor::from_vec(shape, v).unwrap()
}

pub fn binary_conv_weight_ste() {
    // With |w| < 1 the clipped-identity STE is the gradient of the conv whose
    // weights are clip(w) instead of sign(w).
    for seed in 0..INSTANCES {
        let r = &mut rng(800 + seed);
        let g = random_geometry(r, 5);
        let shape = Shape::new(r.gen_range(1..3), g.cin, r.gen_range(3..6), r.gen_range(3..6));
        let w: Vec<f64> = random_vec(g.weight_len(), 0.95, r);
        let layer = BinaryConvLayer::with_weights(g, Param::from_data(&[g.weight_len()], w.clone()));
        let xs = random_signs(shape, r);
        let bits = pack(&xs).unwrap();
        let out = layer.forward(&bits).unwrap().shape();
        let proj = random_vec(out.len(), 1.0, r);
        let (gx, gw) = layer.backward(&bits, &tensor(out, &proj)).unwrap();

        fd_check("binary conv w", &w, &gw, |v| {
            let clipped: Vec<f64> = v.iter().map(|w| w.clamp(-1.0, 1.0)).collect();
            dot(conv2d(&unpack(&bits), &clipped, &g, BINARY_PAD_VALUE).unwrap().data(), &proj)
        });
        let signs: Vec<f64> = w.iter().map(|&w| if w > 0.0 { 1.0 } else { -1.0 }).collect();
        fd_check("binary conv x", xs.data(), gx.data(), |v| {
            dot(conv2d(&tensor(shape, v), &signs, &g, BINARY_PAD_VALUE).unwrap().data(), &proj)
        });
    }
}

pub fn binary_conv_weight_ste_clips_outside_unit_interval() {
    let r = &mut rng(900);
    let g = ConvGeometry { cout: 2, cin: 3, kh: 3, kw: 3, stride: 1, padding: 1 };
    let mut w = random_vec(g.weight_len(), 0.9, r);
    w[0] = 1.5;
    w[5] = -2.0;
    let layer = BinaryConvLayer::with_weights(g, Param::from_data(&[g.weight_len()], w));
    let bits = pack(&random_signs(Shape::new(1, 3, 4, 4), r)).unwrap();
    let out = layer.forward(&bits).unwrap().shape();
    let (_, gw) = layer.backward(&bits, &FloatTensor::full(out, 1.0).unwrap()).unwrap();
    assert_eq!((gw[0], gw[5]), (0.0, 0.0));
    assert!(gw.iter().enumerate().any(|(i, &v)| i != 0 && i != 5 && v != 0.0));
}

pub fn real_weight_mode_conv_matches_float_conv() {
    let r = &mut rng(950);
    let g = ConvGeometry { cout: 3, cin: 5, kh: 3, kw: 3, stride: 2, padding: 1 };
    let w = random_vec(g.weight_len(), 1.0, r);
    let mut layer = BinaryConvLayer::with_weights(g, Param::from_data(&[g.weight_len()], w.clone()));
    layer.mode = WeightMode::Real;
    let xs = random_signs(Shape::new(2, 5, 6, 6), r);
    let got = layer.forward(&pack(&xs).unwrap()).unwrap();
    assert_eq!(got, conv2d(&xs, &w, &g, BINARY_PAD_VALUE).unwrap());
}

/// A real-valued model has no hard sign, so the whole backward pass,
/// including blocks, stem and classifier, must match finite differences.
pub fn whole_real_model() {
    for seed in 0..INSTANCES {
        let r = &mut rng(1000 + seed);
        let cfg = ModelConfig::from_toml(&format!(
            r#"
            seed = {seed}
            activation = "real"
            reduction = 2
            [input]
            channels = 2
            height = 4
            width = 4
            [stem]
            out_channels = 3
            [[blocks]]
            in_channels = 3
            out_channels = 6
            stride = 2
            [classifier]
            classes = 3
            "#
        ))
        .unwrap();
        assert_eq!(cfg.block_activation(0), ActivationMode::Real);
        let mut m = build_model(&cfg).unwrap();
        // move activations off their defaults so every branch is exercised
        m.visit_params(&mut |name, _, p| {
            if name.ends_with("gamma") || name.ends_with("zeta") || name.ends_with("shift") {
                p.data = random_vec(p.len(), 0.3, &mut layer_rng(seed, name));
            }
        });
        let x = random_tensor(m.input_shape(2), 1.0, r);
        let labels = vec![r.gen_range(0..3), r.gen_range(0..3)];
        m.zero_grad();
        let (logits, cache) = m.forward(&x, true).unwrap();
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        m.backward(&cache, &g).unwrap();

        let params = m.named_params();
        for (name, kind, p) in &params {
            if !kind.trainable() {
                continue;
            }
            fd_check(name, &p.data, &p.grad, |v| {
                let mut q = m.clone();
                q.visit_params(&mut |n, _, pp| {
                    if n == name {
                        pp.data = v.to_vec();
                    }
                });
                cross_entropy(&q.forward(&x, true).unwrap().0, &labels).unwrap().0
            });
        }
    }
}
