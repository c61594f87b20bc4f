//! Fixed-seed gradient check suites over every differentiable unit,
//! grouped by scope from single primitives up to the full network.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionPair, ChannelAttention, ChannelAttentionKind, Sam};
use crate::dsconv::{Axis, DsConv, OffsetMode};
use crate::encoder::{BlockSpec, ConvKind, DscBlock};
use crate::gradcheck::{grad_check, sign_flip, GradCheckOptions, GradCheckReport};
use crate::model::{DscFormer, FuseStage, ModelConfig};
use crate::ops::{Activation, PoolKind};
use crate::transformer::{EfficientAttention, MixFfn, StageSpec, TransformerBlock, TransformerStage};
use crate::{Error, Graph, NodeId, ParamBuilder, ParamStore, Result, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitive,
    DsConv,
    Attention,
    Block,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 5] = [Scope::Primitive, Scope::DsConv, Scope::Attention, Scope::Block, Scope::Model];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Primitive => "primitive",
            Scope::DsConv => "dsconv",
            Scope::Attention => "attention",
            Scope::Block => "block",
            Scope::Model => "model",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck scope `{s}`")))
    }
}

type UnitFn = Box<dyn Fn(&mut Graph<'_, f64>, &[NodeId]) -> Result<NodeId>>;

/// One differentiable unit with fixed parameters and inputs.
pub struct Unit {
    pub name: String,
    params: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    run: UnitFn,
    max_entries: Option<usize>,
}

impl Unit {
    fn new(
        name: &str,
        params: ParamStore<f64>,
        inputs: Vec<Tensor<f64>>,
        run: impl Fn(&mut Graph<'_, f64>, &[NodeId]) -> Result<NodeId> + 'static,
    ) -> Self {
        Unit {
            name: name.to_string(),
            params,
            inputs,
            run: Box::new(run),
            max_entries: None,
        }
    }

    fn inputs(name: &str, inputs: Vec<Tensor<f64>>, run: impl Fn(&mut Graph<'_, f64>, &[NodeId]) -> Result<NodeId> + 'static) -> Self {
        Unit::new(name, ParamStore::new(), inputs, run)
    }

    /// Runs the check. With `fault` the output passes through an identity
    /// whose backward negates the gradient, which the check must reject.
    pub fn check(&self, fault: bool) -> Result<GradCheckReport> {
        let options = GradCheckOptions {
            max_entries: self.max_entries,
            ..GradCheckOptions::default()
        };
        let run = &self.run;
        if fault {
            grad_check(
                &self.name,
                &self.params,
                &self.inputs,
                |g, ids| {
                    let y = run(g, ids)?;
                    Ok(sign_flip(g, y))
                },
                &options,
            )
        } else {
            grad_check(&self.name, &self.params, &self.inputs, |g, ids| run(g, ids), &options)
        }
    }
}

/// Uniform `[-scale, scale]` entries from a seeded stream.
pub fn random_tensor(dims: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(dims), |_| rng.random_range(-scale..=scale))
}

/// Replaces every parameter with uniform noise, moving snake chains off the
/// integer grid where bilinear sampling has kinks.
fn randomized(store: ParamStore<f32>, seed: u64, scale: f64) -> ParamStore<f64> {
    let mut store = store.cast::<f64>();
    for (i, (_, t)) in store.iter_mut().enumerate() {
        *t = random_tensor(t.shape().logical(), seed.wrapping_mul(1000) + i as u64, scale);
    }
    store
}

fn r(dims: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(dims, seed, 1.0)
}

/// Distinct entries at least `1 / numel` apart, so max selections have no
/// near-ties within the finite-difference step.
fn spread(dims: &[usize], stride: usize) -> Tensor<f64> {
    let shape = Shape::new(dims);
    let n = shape.numel();
    let mut i = 0;
    Tensor::from_fn(shape, |_| {
        i += 1;
        ((i * stride) % n) as f64 / n as f64 - 0.5
    })
}

fn primitive_units() -> Vec<Unit> {
    let mut units = vec![
        Unit::inputs("conv2d", vec![r(&[2, 3, 5, 5], 1), r(&[4, 3, 3, 3], 2), r(&[4], 3)], |g, x| {
            g.conv2d(x[0], x[1], Some(x[2]), 1, 1, 1)
        }),
        Unit::inputs("conv2d_strided_grouped", vec![r(&[1, 4, 6, 6], 4), r(&[6, 2, 3, 3], 5)], |g, x| {
            g.conv2d(x[0], x[1], None, 2, 1, 2)
        }),
        Unit::inputs("linear", vec![r(&[2, 1, 5, 4], 6), r(&[3, 4], 7), r(&[3], 8)], |g, x| {
            g.linear(x[0], x[1], Some(x[2]))
        }),
        Unit::inputs("matmul", vec![r(&[1, 2, 3, 4], 9), r(&[1, 2, 4, 5], 10)], |g, x| g.matmul(x[0], x[1], false)),
        Unit::inputs("matmul_transposed", vec![r(&[1, 2, 3, 4], 11), r(&[1, 2, 5, 4], 12)], |g, x| {
            g.matmul(x[0], x[1], true)
        }),
        Unit::inputs("softmax", vec![r(&[2, 1, 3, 5], 13)], |g, x| Ok(g.softmax_last(x[0]))),
        Unit::inputs("layer_norm", vec![r(&[2, 1, 3, 6], 14), r(&[6], 15), r(&[6], 16)], |g, x| {
            g.layer_norm(x[0], x[1], x[2])
        }),
        Unit::inputs("add", vec![r(&[2, 3, 4, 4], 17), r(&[2, 3, 4, 4], 18)], |g, x| g.add(x[0], x[1])),
        Unit::inputs("mul", vec![r(&[2, 3, 4, 4], 19), r(&[2, 3, 4, 4], 20)], |g, x| g.mul(x[0], x[1])),
        Unit::inputs("scale", vec![r(&[2, 3, 4, 4], 21)], |g, x| Ok(g.scale(x[0], -1.7))),
        Unit::inputs("sum", vec![r(&[2, 3, 4, 4], 22)], |g, x| Ok(g.sum(x[0]))),
        Unit::inputs("weighted_sum", vec![r(&[2, 3, 4, 4], 23)], |g, x| g.weighted_sum(x[0], r(&[2, 3, 4, 4], 24))),
        Unit::inputs("scale_channels", vec![r(&[2, 3, 4, 4], 25), r(&[2, 3, 1, 1], 26)], |g, x| {
            g.scale_channels(x[0], x[1])
        }),
        Unit::inputs("scale_spatial", vec![r(&[2, 3, 4, 4], 27), r(&[2, 1, 4, 4], 28)], |g, x| {
            g.scale_spatial(x[0], x[1])
        }),
        Unit::inputs("mul_lastdim", vec![r(&[2, 1, 3, 4], 29), r(&[4], 30)], |g, x| g.mul_lastdim(x[0], x[1])),
        Unit::inputs("max_pool2", vec![spread(&[2, 3, 6, 6], 37)], |g, x| g.max_pool2(x[0])),
        Unit::inputs("global_avg_pool", vec![r(&[2, 3, 4, 4], 32)], |g, x| g.global_pool(x[0], PoolKind::Avg)),
        Unit::inputs("global_max_pool", vec![spread(&[2, 3, 4, 4], 41)], |g, x| g.global_pool(x[0], PoolKind::Max)),
        Unit::inputs("channel_avg_pool", vec![r(&[2, 3, 4, 4], 34)], |g, x| g.channel_pool(x[0], PoolKind::Avg)),
        Unit::inputs("channel_max_pool", vec![spread(&[2, 3, 4, 4], 53)], |g, x| g.channel_pool(x[0], PoolKind::Max)),
        Unit::inputs("upsample_bilinear", vec![r(&[2, 2, 3, 4], 36)], |g, x| g.upsample_bilinear(x[0], 2)),
        Unit::inputs("reshape", vec![r(&[2, 3, 4, 4], 37)], |g, x| g.reshape(x[0], Shape::nchw(2, 1, 12, 4))),
        Unit::inputs("permute", vec![r(&[2, 3, 4, 5], 38)], |g, x| g.permute(x[0], [0, 2, 1, 3])),
        Unit::inputs("concat_channels", vec![r(&[2, 2, 3, 3], 39), r(&[2, 3, 3, 3], 40)], |g, x| {
            g.concat_channels(&[x[0], x[1]])
        }),
        Unit::inputs("tokens_round_trip", vec![r(&[2, 3, 4, 5], 41)], |g, x| {
            let t = g.to_tokens(x[0])?;
            let t = g.scale(t, 2.0);
            g.from_tokens(t, 4, 5)
        }),
        Unit::inputs("chain_coords", vec![r(&[1, 16, 3, 4], 42)], |g, x| g.chain_coords(x[0])),
        Unit::inputs(
            "snake_sample",
            vec![r(&[1, 2, 5, 5], 43), random_tensor(&[1, 18, 5, 5], 44, 1.45).map(|v| v + 2.0)],
            |g, x| g.snake_sample(x[0], x[1]),
        ),
        Unit::inputs("combined_loss", vec![r(&[2, 2, 4, 4], 45).map(|v| 3.0 * v)], |g, x| {
            let target = Tensor::from_fn(Shape::nchw(2, 1, 4, 4), |[n, _, h, w]| f64::from(u8::from((n + h * w) % 3 == 0)));
            g.seg_loss(x[0], target)
        }),
    ];
    for act in [Activation::Relu, Activation::Sigmoid, Activation::Tanh, Activation::Gelu] {
        let name = format!("{act:?}").to_lowercase();
        units.push(Unit::inputs(&name, vec![r(&[2, 3, 4, 4], 46)], move |g, x| Ok(g.activation(x[0], act))));
    }
    units
}

fn dsconv_units() -> Result<Vec<Unit>> {
    let mut units = Vec::new();
    for (axis, mode, tag, seed) in [
        (Axis::Horizontal, OffsetMode::Learned, "dsconv_enhanced_h", 50),
        (Axis::Vertical, OffsetMode::Learned, "dsconv_enhanced_v", 51),
        (Axis::Horizontal, OffsetMode::Straight, "dsconv_straight_h", 52),
    ] {
        let mut pb = ParamBuilder::new(seed);
        let d = DsConv::new(&mut pb, "d", 2, 3, axis, mode)?;
        let store = randomized(pb.finish(), seed, 0.5);
        units.push(Unit::new(tag, store, vec![r(&[1, 2, 6, 6], seed + 100)], move |g, x| d.forward(g, x[0])));
    }
    Ok(units)
}

fn attention_units() -> Result<Vec<Unit>> {
    let mut units = Vec::new();
    for (kind, tag, seed) in [(ChannelAttentionKind::Wcam, "wcam", 60), (ChannelAttentionKind::Cam, "cam", 61)] {
        let mut pb = ParamBuilder::new(seed);
        let ca = ChannelAttention::new(&mut pb, "a", 8, 4, kind)?.expect("kind has channel attention");
        let store = randomized(pb.finish(), seed, 1.0);
        units.push(Unit::new(tag, store, vec![r(&[2, 8, 5, 5], seed + 100)], move |g, x| ca.forward(g, x[0])));
    }
    let mut pb = ParamBuilder::new(62);
    let sam = Sam::new(&mut pb, "s")?;
    units.push(Unit::new("sam", pb.finish().cast(), vec![r(&[2, 4, 5, 5], 162)], move |g, x| sam.forward(g, x[0])));
    let mut pb = ParamBuilder::new(63);
    let pair = AttentionPair::new(&mut pb, "p", 8, 4, ChannelAttentionKind::Wcam)?;
    let store = randomized(pb.finish(), 63, 1.0);
    units.push(Unit::new("wcam_sam", store, vec![r(&[1, 8, 5, 5], 163)], move |g, x| pair.forward(g, x[0])));
    Ok(units)
}

fn block_units() -> Result<Vec<Unit>> {
    let mut units = Vec::new();
    for (conv, tag, seed) in [(ConvKind::Enhanced, "dsc_block", 70), (ConvKind::Vanilla, "dsc_block_vanilla", 71)] {
        let mut pb = ParamBuilder::new(seed);
        let spec = BlockSpec { cin: 2, branch: 2, cout: 3, ratio: 2, conv, attention: ChannelAttentionKind::Wcam };
        let b = DscBlock::new(&mut pb, "b", spec)?;
        let store = randomized(pb.finish(), seed, 1.0);
        units.push(Unit::new(tag, store, vec![r(&[1, 2, 6, 6], seed + 100)], move |g, x| b.forward(g, x[0])));
    }

    let mut pb = ParamBuilder::new(72);
    let att = EfficientAttention::new(&mut pb, "a", 4, 2, 2)?;
    let store = randomized(pb.finish(), 72, 1.0);
    units.push(Unit::new("efficient_attention", store, vec![r(&[1, 1, 16, 4], 172)], move |g, x| att.forward(g, x[0], 4, 4)));

    let mut pb = ParamBuilder::new(73);
    let ffn = MixFfn::new(&mut pb, "f", 2)?;
    let store = randomized(pb.finish(), 73, 1.0);
    units.push(Unit::new("mix_ffn", store, vec![r(&[1, 1, 12, 2], 173)], move |g, x| ffn.forward(g, x[0], 3, 4)));

    let mut pb = ParamBuilder::new(74);
    let block = TransformerBlock::new(&mut pb, "t", 4, 2, 2)?;
    let store = randomized(pb.finish(), 74, 1.0);
    units.push(Unit::new("transformer_block", store, vec![r(&[1, 1, 16, 4], 174)], move |g, x| block.forward(g, x[0], 4, 4)));

    let mut pb = ParamBuilder::new(75);
    let spec = StageSpec { cin: 2, width: 4, depth: 1, heads: 2, reduction: 2, first: false };
    let stage = TransformerStage::new(&mut pb, "s", spec)?;
    let store = randomized(pb.finish(), 75, 1.0);
    units.push(Unit::new("transformer_stage", store, vec![r(&[1, 2, 8, 8], 175)], move |g, x| stage.forward(g, x[0])));

    let mut pb = ParamBuilder::new(76);
    let fuse = FuseStage::new(&mut pb, "f", 6, 2, 2, ChannelAttentionKind::Wcam)?;
    let store = randomized(pb.finish(), 76, 1.0);
    units.push(Unit::new(
        "decoder_stage",
        store,
        vec![r(&[1, 2, 4, 4], 176), r(&[1, 2, 4, 4], 177), r(&[1, 2, 2, 2], 178)],
        move |g, x| fuse.forward(g, Some(x[0]), Some(x[1]), Some(x[2])),
    ));
    Ok(units)
}

/// Full tiny network plus loss on one 32x32 image, sampling a few entries
/// of every tensor. Pyramid weights are perturbed off zero so no snake
/// chain sits exactly on the sampling grid.
fn model_units() -> Result<Vec<Unit>> {
    let (model, store) = DscFormer::new(ModelConfig::tiny())?;
    let mut store = store.cast::<f64>();
    for (i, (name, t)) in store.iter_mut().enumerate() {
        if name.contains(".pyramid.") && name.ends_with(".weight") {
            *t = random_tensor(t.shape().logical(), 8000 + i as u64, 0.05);
        }
    }
    let image = random_tensor(&[1, 1, 32, 32], 80, 0.5).map(|v| v + 0.5);
    let target = Tensor::from_fn(Shape::nchw(1, 1, 32, 32), |[_, _, h, w]| f64::from(u8::from((h + 2 * w) % 9 < 2)));
    let mut unit = Unit::new("dscformer_loss", store, vec![image], move |g, x| {
        let logits = model.forward(g, x[0])?;
        g.seg_loss(logits, target.clone())
    });
    unit.max_entries = Some(2);
    Ok(vec![unit])
}

pub fn units(scope: Scope) -> Result<Vec<Unit>> {
    match scope {
        Scope::Primitive => Ok(primitive_units()),
        Scope::DsConv => dsconv_units(),
        Scope::Attention => attention_units(),
        Scope::Block => block_units(),
        Scope::Model => model_units(),
    }
}
