//! Convolutional encoder branch built from DSC blocks.

use crate::attention::{AttentionPair, ChannelAttentionKind};
use crate::dsconv::{Axis, DsConv, OffsetMode};
use crate::nn::{Conv2d, ConvSpec};
use crate::{Error, Graph, NodeId, ParamBuilder, Result, Scalar};

/// Operator used for the two oriented branches of a DSC block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Plain 3x3 convolutions.
    Vanilla,
    /// Snake convolutions with chains fixed straight along their axis.
    DsConv,
    /// Snake convolutions with pyramid-predicted offsets.
    Enhanced,
}

impl ConvKind {
    pub const ALL: [ConvKind; 3] = [ConvKind::Vanilla, ConvKind::DsConv, ConvKind::Enhanced];

    pub fn as_str(self) -> &'static str {
        match self {
            ConvKind::Vanilla => "vanilla",
            ConvKind::DsConv => "dsconv",
            ConvKind::Enhanced => "enhanced",
        }
    }
}

impl std::fmt::Display for ConvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ConvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown conv kind `{s}` (expected vanilla|dsconv|enhanced)")))
    }
}

#[derive(Clone, Debug)]
pub enum Branch {
    Snake(DsConv),
    Plain(Conv2d),
}

impl Branch {
    fn new(pb: &mut ParamBuilder, prefix: &str, cin: usize, cout: usize, axis: Axis, kind: ConvKind) -> Result<Self> {
        let mode = match kind {
            ConvKind::Vanilla => {
                let tag = match axis {
                    Axis::Horizontal => "h",
                    Axis::Vertical => "v",
                };
                return Ok(Branch::Plain(Conv2d::new(pb, &format!("{prefix}.conv.{tag}"), ConvSpec::same(cin, cout, 3))?));
            }
            ConvKind::DsConv => OffsetMode::Straight,
            ConvKind::Enhanced => OffsetMode::Learned,
        };
        let name = DsConv::instance_name(prefix, axis);
        Ok(Branch::Snake(DsConv::new(pb, &name, cin, cout, axis, mode)?))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        match self {
            Branch::Snake(d) => d.forward(g, x),
            Branch::Plain(c) => c.forward(g, x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub cin: usize,
    /// Width of each of the three parallel branches.
    pub branch: usize,
    pub cout: usize,
    pub ratio: usize,
    pub conv: ConvKind,
    pub attention: ChannelAttentionKind,
}

/// Intermediate nodes of one block evaluation.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub branches: [NodeId; 3],
    pub concat: NodeId,
    pub attended: NodeId,
    pub fused: NodeId,
    pub shortcut: NodeId,
    pub output: NodeId,
}

/// Three parallel branches (horizontal, vertical, standard 3x3), each
/// followed by ReLU, concatenated in that order, refined by channel then
/// spatial attention, fused by a 3x3 convolution with ReLU, and added to a
/// shortcut that is the input itself when widths match and a 1x1
/// projection otherwise.
#[derive(Clone, Debug)]
pub struct DscBlock {
    pub spec: BlockSpec,
    pub horizontal: Branch,
    pub vertical: Branch,
    pub standard: Conv2d,
    pub attention: AttentionPair,
    pub fusion: Conv2d,
    pub projection: Option<Conv2d>,
}

impl DscBlock {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, spec: BlockSpec) -> Result<Self> {
        let BlockSpec { cin, branch, cout, .. } = spec;
        let horizontal = Branch::new(pb, prefix, cin, branch, Axis::Horizontal, spec.conv)?;
        let vertical = Branch::new(pb, prefix, cin, branch, Axis::Vertical, spec.conv)?;
        let standard = Conv2d::new(pb, &format!("{prefix}.conv.std"), ConvSpec::same(cin, branch, 3))?;
        let attention = AttentionPair::new(pb, prefix, 3 * branch, spec.ratio, spec.attention)?;
        let fusion = Conv2d::new(pb, &format!("{prefix}.fuse"), ConvSpec::same(3 * branch, cout, 3))?;
        let projection = if cin == cout {
            None
        } else {
            Some(Conv2d::new(pb, &format!("{prefix}.proj"), ConvSpec::same(cin, cout, 1))?)
        };
        Ok(DscBlock {
            spec,
            horizontal,
            vertical,
            standard,
            attention,
            fusion,
            projection,
        })
    }

    pub fn trace<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<BlockTrace> {
        let h = self.horizontal.forward(g, x)?;
        let v = self.vertical.forward(g, x)?;
        let s = self.standard.forward(g, x)?;
        let branches = [g.relu(h), g.relu(v), g.relu(s)];
        let concat = g.concat_channels(&branches)?;
        let attended = self.attention.forward(g, concat)?;
        let fused = self.fusion.forward(g, attended)?;
        let fused = g.relu(fused);
        let shortcut = match &self.projection {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        let output = g.add(fused, shortcut)?;
        Ok(BlockTrace {
            branches,
            concat,
            attended,
            fused,
            shortcut,
            output,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        Ok(self.trace(g, x)?.output)
    }
}

/// Five DSC blocks with 2x2 max pooling between them, giving features at
/// 1/1, 1/2, 1/4, 1/8 and 1/16 of the input resolution.
#[derive(Clone, Debug)]
pub struct DscEncoder {
    pub blocks: Vec<DscBlock>,
}

pub const DSC_STAGES: usize = 5;

impl DscEncoder {
    /// Stage `i` lives under `enc.dsc.<i>`.
    pub fn new(
        pb: &mut ParamBuilder,
        in_channels: usize,
        widths: [usize; DSC_STAGES],
        ratio: usize,
        conv: ConvKind,
        attention: ChannelAttentionKind,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(DSC_STAGES);
        let mut cin = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let spec = BlockSpec {
                cin,
                branch: w,
                cout: w,
                ratio,
                conv,
                attention,
            };
            blocks.push(DscBlock::new(pb, &format!("enc.dsc.{i}"), spec)?);
            cin = w;
        }
        Ok(DscEncoder { blocks })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<Vec<NodeId>> {
        let [_, _, h, w] = g.value(x).dims();
        let factor = 1 << (DSC_STAGES - 1);
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::contract(
                "dsc_encoder",
                format!("spatial dims {h}x{w} must be divisible by {factor}"),
            ));
        }
        let mut feats = Vec::with_capacity(DSC_STAGES);
        let mut cur = x;
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                cur = g.max_pool2(cur)?;
            }
            cur = block.forward(g, cur)?;
            feats.push(cur);
        }
        Ok(feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::ops::testutil::random;
    use crate::{ParamStore, Shape, Tensor};

    fn spec(cin: usize, branch: usize, cout: usize, conv: ConvKind) -> BlockSpec {
        BlockSpec { cin, branch, cout, ratio: 2, conv, attention: ChannelAttentionKind::Wcam }
    }

    fn block(s: BlockSpec, seed: u64) -> (DscBlock, ParamStore<f64>) {
        let mut pb = ParamBuilder::new(seed);
        let b = DscBlock::new(&mut pb, "b", s).unwrap();
        (b, pb.finish().cast())
    }

    /// Evaluates one component in its own graph.
    fn eval(store: &ParamStore<f64>, x: &Tensor<f64>, f: impl FnOnce(&mut Graph<'_, f64>, NodeId) -> Result<NodeId>) -> Tensor<f64> {
        let mut g = Graph::with_params(store);
        let xi = g.constant(x.clone());
        let y = f(&mut g, xi).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_weights_leave_the_identity_shortcut() {
        let (b, store) = block(spec(4, 2, 4, ConvKind::Enhanced), 1);
        assert!(b.projection.is_none());
        let mut zeroed = store.clone();
        for (_, t) in zeroed.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let x = random::<f64>(&[1, 4, 8, 8], 2);
        assert_eq!(eval(&zeroed, &x, |g, x| b.forward(g, x)), x);
    }

    #[test]
    fn projection_changes_width_and_keeps_spatial_dims() {
        let (b, store) = block(spec(4, 4, 8, ConvKind::Enhanced), 3);
        assert!(b.projection.is_some());
        let y = eval(&store, &random(&[1, 4, 16, 16], 4), |g, x| b.forward(g, x));
        assert_eq!(y.dims(), [1, 8, 16, 16]);
    }

    #[test]
    fn block_matches_step_by_step_composition() {
        for (conv, seed) in [(ConvKind::Enhanced, 5), (ConvKind::DsConv, 6), (ConvKind::Vanilla, 7)] {
            let (b, store) = block(spec(3, 2, 5, conv), seed);
            let x = random::<f64>(&[2, 3, 8, 8], seed + 10);
            let relu = |t: Tensor<f64>| t.map(|v| v.max(0.0));
            let h = relu(eval(&store, &x, |g, x| b.horizontal.forward(g, x)));
            let v = relu(eval(&store, &x, |g, x| b.vertical.forward(g, x)));
            let s = relu(eval(&store, &x, |g, x| b.standard.forward(g, x)));
            let parts = [&h, &v, &s];
            let concat = Tensor::from_fn(Shape::nchw(2, 6, 8, 8), |[n, c, y, xx]| parts[c / 2].at([n, c % 2, y, xx]));
            let attended = eval(&store, &concat, |g, x| b.attention.forward(g, x));
            let fused = relu(eval(&store, &attended, |g, x| b.fusion.forward(g, x)));
            let proj = eval(&store, &x, |g, x| b.projection.as_ref().unwrap().forward(g, x));
            let want = Tensor::from_fn(fused.shape(), |i| fused.at(i) + proj.at(i));
            let got = eval(&store, &x, |g, x| b.forward(g, x));
            assert!(got.max_abs_diff(&want) < 1e-12, "{conv:?}");
        }
    }

    #[test]
    fn unbiased_conv_path_is_positively_homogeneous() {
        // Straight chains and zero biases make every branch linear, and the
        // ReLUs commute with positive scaling.
        let (b, mut store) = block(spec(2, 2, 4, ConvKind::DsConv), 8);
        let biases: Vec<String> = store.names().filter(|n| n.ends_with(".bias")).map(str::to_string).collect();
        for n in biases {
            let t = store.get_mut(&n).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let path = |g: &mut Graph<'_, f64>, x: NodeId| -> Result<NodeId> {
            let t = b.trace(g, x)?;
            let fused = b.fusion.forward(g, t.concat)?;
            Ok(g.relu(fused))
        };
        let x = random::<f64>(&[1, 2, 8, 8], 9);
        let base = eval(&store, &x, path);
        for alpha in [0.25, 3.0] {
            let y = eval(&store, &x.map(|v| v * alpha), path);
            assert!(y.max_abs_diff(&base.map(|v| v * alpha)) < 1e-12);
        }
    }

    #[test]
    fn block_passes_gradient_check() {
        for (conv, seed) in [(ConvKind::Enhanced, 11), (ConvKind::Vanilla, 12)] {
            // Bilinear sampling has kinks at integer coordinates, where the
            // straight initial chains sit, so offsets are randomized first.
            let (b, mut store) = block(spec(2, 2, 3, conv), seed);
            let names: Vec<String> = store.names().map(str::to_string).collect();
            for (i, n) in names.iter().enumerate() {
                let dims = store.get(n).unwrap().shape().logical().to_vec();
                *store.get_mut(n).unwrap() = random(&dims, seed * 100 + i as u64);
            }
            let x = random(&[1, 2, 6, 6], seed + 1);
            let report = grad_check("dsc_block", &store, &[x], |g, ids| b.forward(g, ids[0]), &GradCheckOptions::default()).unwrap();
            assert!(report.passed(), "{conv:?}: {report:?}");
        }
    }

    fn encoder(seed: u64) -> (DscEncoder, ParamStore<f32>) {
        let mut pb = ParamBuilder::new(seed);
        let e = DscEncoder::new(&mut pb, 1, [2, 4, 4, 8, 8], 2, ConvKind::Enhanced, ChannelAttentionKind::Wcam).unwrap();
        (e, pb.finish())
    }

    #[test]
    fn encoder_emits_full_to_sixteenth_scales() {
        let (e, store) = encoder(13);
        let mut g = Graph::with_params(&store);
        let x = g.constant(random(&[1, 1, 64, 64], 14));
        let feats = e.forward(&mut g, x).unwrap();
        let dims: Vec<_> = feats.iter().map(|&f| g.value(f).dims()).collect();
        assert_eq!(dims, vec![[1, 2, 64, 64], [1, 4, 32, 32], [1, 4, 16, 16], [1, 8, 8, 8], [1, 8, 4, 4]]);
        let bad = g.constant(random(&[1, 1, 40, 64], 15));
        assert!(matches!(e.forward(&mut g, bad), Err(Error::Contract { .. })));
    }

    #[test]
    fn constant_input_stays_constant_through_every_stage() {
        // Zero padding breaks constancy at borders, so spatially extended
        // kernels other than the snake chains keep only their centre tap.
        let (e, store) = encoder(16);
        let mut store = store.cast::<f64>();
        for (name, t) in store.iter_mut() {
            let [_, _, kh, kw] = t.dims();
            if name.contains(".pyramid.") {
                *t = Tensor::zeros(t.shape());
            } else if t.shape().rank() == 4 && kh > 1 {
                let centre = (kh / 2, kw / 2);
                *t = Tensor::from_fn(t.shape(), |[o, i, y, x]| if (y, x) == centre { t.at([o, i, y, x]) } else { 0.0 });
            }
        }
        let x = Tensor::full(Shape::nchw(1, 1, 32, 32), 0.7);
        let mut g = Graph::with_params(&store);
        let xi = g.constant(x);
        for f in e.forward(&mut g, xi).unwrap() {
            let t = g.value(f);
            let [_, c, h, w] = t.dims();
            for ci in 0..c {
                let v0 = t.at([0, ci, 0, 0]);
                for p in 0..h * w {
                    assert!((t.at([0, ci, p / w, p % w]) - v0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deepest_loss_reaches_first_stage_parameters() {
        let (e, store) = encoder(17);
        let mut g = Graph::with_params(&store);
        let x = g.constant(random(&[1, 1, 32, 32], 18));
        let feats = e.forward(&mut g, x).unwrap();
        let loss = g.sum(feats[4]);
        let grads = g.backward(loss).unwrap();
        let first: Vec<_> = grads.params().iter().filter(|(n, _)| n.starts_with("enc.dsc.0.")).collect();
        assert!(!first.is_empty());
        let live = first.iter().filter(|(_, t)| t.data().iter().any(|&v| v != 0.0)).count();
        assert!(live * 10 >= first.len() * 9, "{live} of {} stage-0 tensors have gradient", first.len());
    }
}
