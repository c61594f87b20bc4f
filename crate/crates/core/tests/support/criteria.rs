//! Property checks that compare engine outputs with the loop oracles. Each
//! returns a one-line summary on success and a description of the first
//! failure otherwise.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serpent_core::attention::{ChannelAttention, ChannelAttentionKind};
use serpent_core::dsconv::{Axis, DsConv, OffsetMode, PYRAMID_KERNELS};
use serpent_core::model::{DscFormer, ModelConfig};
use serpent_core::{Graph, ParamBuilder, ParamStore, Shape, Tensor};
use serpent_metrics::{evaluate_pair, SegmentationMask};

use super::oracles::{cbam_channel, clamped_line_conv, naive_dsconv, set_metrics, Array4, ChainWeights, PyramidLevel};

pub type Check = Result<String, String>;

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(Shape::new(dims), |_| rng.random_range(-scale..=scale))
}

fn to_array(t: &Tensor<f64>) -> Array4 {
    Array4 { dims: t.dims(), data: t.data().to_vec() }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn axis_of(rng: &mut ChaCha8Rng) -> Axis {
    if rng.random_bool(0.5) {
        Axis::Horizontal
    } else {
        Axis::Vertical
    }
}

/// A layer with every parameter drawn uniformly from `[-scale, scale]`.
fn random_layer(rng: &mut ChaCha8Rng, cin: usize, cout: usize, axis: Axis, mode: OffsetMode, scale: f64) -> (DsConv, ParamStore<f64>) {
    let mut pb = ParamBuilder::new(rng.random());
    let layer = DsConv::new(&mut pb, "d", cin, cout, axis, mode).unwrap();
    let mut store = pb.finish().cast::<f64>();
    for (_, t) in store.iter_mut() {
        *t = uniform(rng, t.shape().logical(), scale);
    }
    (layer, store)
}

fn chain_weights(layer: &DsConv, store: &ParamStore<f64>) -> ChainWeights {
    ChainWeights {
        cout: layer.cout,
        cin: layer.cin,
        weight: store.get(&layer.chain_weight).unwrap().data().to_vec(),
        bias: store.get(&layer.chain_bias).unwrap().data().to_vec(),
    }
}

fn run_layer(layer: &DsConv, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::with_params(store);
    let xi = g.constant(x.clone());
    let y = layer.forward(&mut g, xi).unwrap();
    g.value(y).clone()
}

/// Straight unit-step chains reduce to border-clamped 1x9 or 9x1 convolution.
pub fn straight_reduction(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let axis = axis_of(&mut rng);
        let (layer, store) = random_layer(&mut rng, cin, cout, axis, OffsetMode::Straight, 1.0);
        let x = uniform(&mut rng, &[n, cin, h, w], 1.0);
        let got = run_layer(&layer, &store, &x);
        let want = clamped_line_conv(&to_array(&x), &chain_weights(&layer, &store), axis == Axis::Horizontal);
        let err = max_diff(got.data(), &want.data);
        if err > 1e-5 {
            return Err(format!("instance {i} ({axis:?}, {n}x{cin}x{h}x{w}): max error {err:.3e}"));
        }
        worst = worst.max(err);
    }
    Ok(format!("{instances} instances, max error {worst:.2e}"))
}

/// Learned offsets on 1x2x6x6 inputs against the loop reference.
pub fn naive_equivalence(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let cout = rng.random_range(1..=3);
        let axis = axis_of(&mut rng);
        let scale = rng.random_range(0.1..1.0);
        let (layer, store) = random_layer(&mut rng, 2, cout, axis, OffsetMode::Learned, scale);
        let x = uniform(&mut rng, &[1, 2, 6, 6], 1.0);
        let got = run_layer(&layer, &store, &x);
        let pyramid: [PyramidLevel; 4] = std::array::from_fn(|l| {
            let conv = &layer.pyramid[l];
            PyramidLevel {
                k: PYRAMID_KERNELS[l],
                weight: store.get(&conv.weight).unwrap().data().to_vec(),
                bias: store.get(conv.bias.as_ref().unwrap()).unwrap().data().to_vec(),
            }
        });
        let want = naive_dsconv(&to_array(&x), &pyramid, &chain_weights(&layer, &store));
        let err = max_diff(got.data(), &want.data);
        if err > 1e-5 {
            return Err(format!("instance {i}: max error {err:.3e}"));
        }
        worst = worst.max(err);
    }
    Ok(format!("{instances} instances, max error {worst:.2e}"))
}

/// Slack for rounding in `(a + s) - a`, which can exceed `s` by an ulp
/// when a saturated step is exactly 1.
const ROUNDING: f64 = 1e-12;

/// Every chain point stays in the 9x9 window around its pixel and
/// consecutive points move at most one pixel per axis.
pub fn chain_invariants(forwards: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = 0usize;
    for i in 0..forwards {
        let cin = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let scale = [0.1, 1.0, 10.0][i % 3];
        let axis = axis_of(&mut rng);
        let (layer, store) = random_layer(&mut rng, cin, 1, axis, OffsetMode::Learned, scale);
        let x = uniform(&mut rng, &[1, cin, h, w], 2.0);
        let mut g = Graph::with_params(&store);
        let xi = g.constant(x);
        let coords = layer.coords(&mut g, xi).unwrap();
        let c = g.value(coords);
        for y in 0..h {
            for xx in 0..w {
                let pt = |j: usize| (c.at([0, 2 * j, y, xx]), c.at([0, 2 * j + 1, y, xx]));
                for j in 0..9 {
                    let (px, py) = pt(j);
                    points += 1;
                    if (px - xx as f64).abs() > 4.0 + ROUNDING || (py - y as f64).abs() > 4.0 + ROUNDING {
                        return Err(format!("forward {i}: point {j} of pixel ({y}, {xx}) at ({px}, {py}) leaves the 9x9 window"));
                    }
                    if j > 0 {
                        let (qx, qy) = pt(j - 1);
                        if (px - qx).abs() > 1.0 + ROUNDING || (py - qy).abs() > 1.0 + ROUNDING {
                            return Err(format!("forward {i}: step {j} of pixel ({y}, {xx}) is ({}, {})", px - qx, py - qy));
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{forwards} forwards, {points} points, 0 violations"))
}

/// WCAM with both branches sharing one MLP and unit branch weights equals
/// CBAM channel attention.
pub fn wcam_cam_equivalence(inputs: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..inputs {
        let r = [1, 2, 4][rng.random_range(0..3)];
        let c = r * rng.random_range(1..=4);
        let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..=6), rng.random_range(1..=6));
        let mut pb = ParamBuilder::new(rng.random());
        let ca = ChannelAttention::new(&mut pb, "a", c, r, ChannelAttentionKind::Wcam).unwrap().unwrap();
        let mut store = pb.finish().cast::<f64>();
        let ChannelAttention::Wcam { avg, max, wavg, wmax } = &ca else { unreachable!() };
        let w0 = uniform(&mut rng, &[c / r, c], 1.0);
        let w1 = uniform(&mut rng, &[c, c / r], 1.0);
        for (name, t) in [(&avg.w0.weight, &w0), (&max.w0.weight, &w0), (&avg.w1.weight, &w1), (&max.w1.weight, &w1)] {
            *store.get_mut(name).unwrap() = t.clone();
        }
        for name in [wavg, wmax] {
            *store.get_mut(name).unwrap() = Tensor::full(Shape::new(&[c]), 1.0);
        }
        let x = uniform(&mut rng, &[n, c, h, w], 2.0);
        let mut g = Graph::with_params(&store);
        let xi = g.constant(x.clone());
        let a = ca.forward(&mut g, xi).unwrap();
        let got = g.value(a).data().to_vec();
        let want: Vec<f64> = cbam_channel(&to_array(&x), w0.data(), w1.data(), c / r).concat();
        let err = max_diff(&got, &want);
        if err > 1e-6 {
            return Err(format!("input {i}: max error {err:.3e}"));
        }
        worst = worst.max(err);
    }
    Ok(format!("{inputs} inputs, max error {worst:.2e}"))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SegmentationMask {
    let density = [0.0, 0.05, 0.3, 0.7, 1.0][rng.random_range(0..5)];
    SegmentationMask::from_fn(h, w, |_, _| rng.random_bool(density))
}

fn positives(m: &SegmentationMask) -> BTreeSet<(usize, usize)> {
    (0..m.height())
        .flat_map(|r| (0..m.width()).map(move |c| (r, c)))
        .filter(|&(r, c)| m.get(r, c))
        .collect()
}

/// Library metrics against set-based definitions. F1 is compared to within
/// one rounding step because the library reaches it through precision and
/// recall; every other value must match bit for bit.
pub fn metrics_oracle(pairs: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..pairs {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (pred, gt) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let got = evaluate_pair("p", &pred, &gt).map_err(|e| e.to_string())?;
        let want = set_metrics(&positives(&pred), &positives(&gt), h, w);
        let exact = [
            ("iou", got.iou, want.iou),
            ("precision", got.precision, want.precision),
            ("recall", got.recall, want.recall),
            ("hausdorff", got.hausdorff, want.hausdorff),
        ];
        for (name, a, b) in exact {
            if a != b {
                return Err(format!("pair {i} ({h}x{w}): {name} {a} vs oracle {b}"));
            }
        }
        if (got.f1 - want.f1).abs() > 4.0 * f64::EPSILON {
            return Err(format!("pair {i}: f1 {} vs oracle {}", got.f1, want.f1));
        }
        let back = evaluate_pair("p", &gt, &pred).map_err(|e| e.to_string())?;
        if back.hausdorff != got.hausdorff {
            return Err(format!("pair {i}: Hausdorff is not symmetric"));
        }
        let same = evaluate_pair("p", &pred, &pred).map_err(|e| e.to_string())?;
        if same.hausdorff != 0.0 || same.iou != 1.0 {
            return Err(format!("pair {i}: identity gives Hausdorff {} and IoU {}", same.hausdorff, same.iou));
        }
    }
    Ok(format!("{pairs} pairs match"))
}

/// Feature and logit sizes of the tiny model on a 64x64 input.
pub fn shape_contract() -> Check {
    let (model, store) = DscFormer::new(ModelConfig::tiny()).map_err(|e| e.to_string())?;
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::full(Shape::nchw(1, 1, 64, 64), 0.5f32));
    let feats = model.features(&mut g, x).map_err(|e| e.to_string())?;
    let side = |id| g.value(id).dims()[2..].to_vec();
    let dsc: Vec<Vec<usize>> = feats.dsc.iter().map(|&id| side(id)).collect();
    let mit: Vec<Vec<usize>> = feats.mit.iter().map(|&id| side(id)).collect();
    let want_dsc: Vec<Vec<usize>> = [64, 32, 16, 8, 4].iter().map(|&s| vec![s, s]).collect();
    let want_mit: Vec<Vec<usize>> = [16, 8, 4, 2].iter().map(|&s| vec![s, s]).collect();
    if dsc != want_dsc || mit != want_mit {
        return Err(format!("convolutional sides {dsc:?}, transformer sides {mit:?}"));
    }
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::full(Shape::nchw(2, 1, 64, 64), 0.5f32));
    let logits = model.forward(&mut g, x).map_err(|e| e.to_string())?;
    let dims = g.value(logits).dims();
    if dims != [2, 2, 64, 64] {
        return Err(format!("logits {dims:?}"));
    }
    let mut g = Graph::with_params(&store);
    let bad = g.constant(Tensor::full(Shape::nchw(1, 1, 48, 64), 0.5f32));
    if model.forward(&mut g, bad).is_ok() {
        return Err("48x64 input was accepted".into());
    }
    Ok("convolutional 1/1..1/16, transformer 1/4..1/32, logits at input size".into())
}
