//! Full two-branch segmentation network and its fusion decoder.

use crate::attention::{AttentionPair, ChannelAttentionKind};
use crate::encoder::{ConvKind, DscEncoder, DSC_STAGES};
use crate::nn::{Conv2d, ConvSpec};
use crate::transformer::{MitConfig, MixTransformer, MIT_STAGES};
use crate::{Error, Graph, NodeId, ParamBuilder, ParamStore, Result, Scalar, Shape, Tensor};

/// Output classes: background (channel 0) and foreground (channel 1).
pub const NUM_CLASSES: usize = 2;

/// Input sides must be multiples of this.
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Convolutional branch widths at 1/1 .. 1/16.
    pub dsc_widths: [usize; DSC_STAGES],
    /// Transformer widths at 1/4 .. 1/32, with per-stage depth, heads and
    /// key/value reduction.
    pub mit: MitConfig,
    /// Decoder widths at 1/16 .. 1/1. The 1/32 stage keeps the width of the
    /// deepest transformer feature.
    pub dec_widths: [usize; 5],
    /// Channel attention reduction ratio.
    pub ratio: usize,
    pub conv: ConvKind,
    pub attention: ChannelAttentionKind,
    pub seed: u64,
}

impl ModelConfig {
    /// Small enough to train on one CPU core in minutes.
    pub fn tiny() -> Self {
        ModelConfig {
            in_channels: 1,
            dsc_widths: [4, 8, 8, 16, 16],
            mit: MitConfig {
                widths: [8, 16, 32, 32],
                depths: [1, 1, 1, 1],
                heads: [1, 2, 4, 8],
                reductions: [8, 4, 2, 1],
            },
            dec_widths: [16, 16, 8, 8, 4],
            ratio: 4,
            conv: ConvKind::Enhanced,
            attention: ChannelAttentionKind::Wcam,
            seed: 0,
        }
    }

    /// The larger desk-scale configuration.
    pub fn desk() -> Self {
        ModelConfig {
            in_channels: 1,
            dsc_widths: [8, 16, 32, 64, 128],
            mit: MitConfig {
                widths: [16, 32, 64, 128],
                depths: [1, 1, 1, 1],
                heads: [1, 2, 4, 8],
                reductions: [8, 4, 2, 1],
            },
            dec_widths: [64, 32, 16, 16, 8],
            ratio: 8,
            conv: ConvKind::Enhanced,
            attention: ChannelAttentionKind::Wcam,
            seed: 0,
        }
    }

    /// Concatenated input widths of the six decoder stages, deepest first.
    pub fn fusion_widths(&self) -> [usize; 6] {
        let (d, m, o) = (self.dsc_widths, self.mit.widths, self.dec_widths);
        [m[3], d[4] + m[2] + m[3], d[3] + m[1] + o[0], d[2] + m[0] + o[1], d[1] + o[2], d[0] + o[3]]
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .dsc_widths
            .iter()
            .chain(&self.mit.widths)
            .chain(&self.mit.depths)
            .chain(&self.mit.heads)
            .chain(&self.mit.reductions)
            .chain(&self.dec_widths);
        if self.in_channels == 0 || self.ratio == 0 || all.into_iter().any(|&v| v == 0) {
            return Err(Error::Config("all widths, depths, heads and ratios must be positive".into()));
        }
        for (i, (&w, &h)) in self.mit.widths.iter().zip(&self.mit.heads).enumerate() {
            if w % h != 0 {
                return Err(Error::Config(format!("transformer stage {i}: {h} heads do not divide width {w}")));
            }
        }
        // Reduced keys need the stage map divisible by the ratio at the
        // smallest supported input, where stage i is 2^(3 - i) pixels wide.
        for (i, &r) in self.mit.reductions.iter().enumerate() {
            if !(SIZE_MULTIPLE >> (i + 2)).is_multiple_of(r) {
                return Err(Error::Config(format!("transformer stage {i}: reduction {r} too large")));
            }
        }
        if self.attention != ChannelAttentionKind::None {
            for w in self.fusion_widths().into_iter().chain(self.dsc_widths.map(|w| 3 * w)) {
                if w % self.ratio != 0 {
                    return Err(Error::Config(format!(
                        "reduction ratio {} does not divide attention width {w}",
                        self.ratio
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Decoder stage: concatenates the available inputs (the lower-resolution
/// map upsampled 2x), applies channel and spatial attention, two 3x3
/// convolutions, and adds a 1x1 projection of the concatenation.
#[derive(Clone, Debug)]
pub struct FuseStage {
    pub attention: AttentionPair,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub projection: Conv2d,
}

impl FuseStage {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, cin: usize, cout: usize, ratio: usize, kind: ChannelAttentionKind) -> Result<Self> {
        Ok(FuseStage {
            attention: AttentionPair::new(pb, prefix, cin, ratio, kind)?,
            conv1: Conv2d::new(pb, &format!("{prefix}.conv1"), ConvSpec::same(cin, cout, 3))?,
            conv2: Conv2d::new(pb, &format!("{prefix}.conv2"), ConvSpec::same(cout, cout, 3))?,
            projection: Conv2d::new(pb, &format!("{prefix}.proj"), ConvSpec::same(cin, cout, 1))?,
        })
    }

    /// Concatenation of the present inputs in the order dsc, transformer,
    /// upsampled below.
    pub fn gather<T: Scalar>(
        g: &mut Graph<'_, T>,
        dsc: Option<NodeId>,
        mit: Option<NodeId>,
        below: Option<NodeId>,
    ) -> Result<NodeId> {
        let below = below.map(|b| g.upsample_bilinear(b, 2)).transpose()?;
        let parts: Vec<NodeId> = [dsc, mit, below].into_iter().flatten().collect();
        if let Some(&first) = parts.first() {
            let [_, _, h, w] = g.value(first).dims();
            for &p in &parts[1..] {
                let d = g.value(p).dims();
                if d[2] != h || d[3] != w {
                    return Err(Error::ShapeMismatch {
                        op: "fuse_stage",
                        lhs: g.value(first).shape(),
                        rhs: g.value(p).shape(),
                    });
                }
            }
        }
        g.concat_channels(&parts)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        dsc: Option<NodeId>,
        mit: Option<NodeId>,
        below: Option<NodeId>,
    ) -> Result<NodeId> {
        let cat = Self::gather(g, dsc, mit, below)?;
        let a = self.attention.forward(g, cat)?;
        let y = self.conv1.forward(g, a)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, y)?;
        let skip = self.projection.forward(g, cat)?;
        let y = g.add(y, skip)?;
        Ok(g.relu(y))
    }
}

/// Encoder outputs: convolutional features at 1/1 .. 1/16 and transformer
/// features at 1/4 .. 1/32.
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    pub dsc: Vec<NodeId>,
    pub mit: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct DscFormer {
    pub config: ModelConfig,
    pub dsc: DscEncoder,
    pub mit: MixTransformer,
    /// Decoder stages from 1/32 up to 1/1.
    pub decoder: Vec<FuseStage>,
    pub head: Conv2d,
}

/// Decoder stage names, deepest first.
pub const DECODER_STAGES: [&str; 6] = ["s32", "s16", "s8", "s4", "s2", "s1"];

impl DscFormer {
    /// Builds the network and its initial parameters, drawn from the
    /// config seed in construction order.
    pub fn new(config: ModelConfig) -> Result<(Self, ParamStore<f32>)> {
        config.validate()?;
        let mut pb = ParamBuilder::new(config.seed);
        let dsc = DscEncoder::new(&mut pb, config.in_channels, config.dsc_widths, config.ratio, config.conv, config.attention)?;
        let mit = MixTransformer::new(&mut pb, config.in_channels, &config.mit)?;
        let cins = config.fusion_widths();
        let mut couts = vec![config.mit.widths[MIT_STAGES - 1]];
        couts.extend(config.dec_widths);
        let decoder = DECODER_STAGES
            .iter()
            .zip(cins.iter().zip(&couts))
            .map(|(name, (&cin, &cout))| FuseStage::new(&mut pb, &format!("dec.{name}"), cin, cout, config.ratio, config.attention))
            .collect::<Result<_>>()?;
        let head = Conv2d::new(&mut pb, "dec.head", ConvSpec::same(config.dec_widths[4], NUM_CLASSES, 1))?;
        Ok((
            DscFormer {
                config,
                dsc,
                mit,
                decoder,
                head,
            },
            pb.finish(),
        ))
    }

    pub fn features<T: Scalar>(&self, g: &mut Graph<'_, T>, image: NodeId) -> Result<EncoderFeatures> {
        let [_, c, h, w] = g.value(image).dims();
        if c != self.config.in_channels {
            return Err(Error::contract(
                "dscformer",
                format!("expected {} image channels, got {}", self.config.in_channels, g.value(image).shape()),
            ));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::contract(
                "dscformer",
                format!("spatial dims {h}x{w} must be positive multiples of {SIZE_MULTIPLE}"),
            ));
        }
        Ok(EncoderFeatures {
            dsc: self.dsc.forward(g, image)?,
            mit: self.mit.forward(g, image)?,
        })
    }

    /// Logits `(N, 2, H, W)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: NodeId) -> Result<NodeId> {
        let f = self.features(g, image)?;
        let (d, m) = (&f.dsc, &f.mit);
        let s = &self.decoder;
        let x = s[0].forward(g, None, Some(m[3]), None)?;
        let x = s[1].forward(g, Some(d[4]), Some(m[2]), Some(x))?;
        let x = s[2].forward(g, Some(d[3]), Some(m[1]), Some(x))?;
        let x = s[3].forward(g, Some(d[2]), Some(m[0]), Some(x))?;
        let x = s[4].forward(g, Some(d[1]), None, Some(x))?;
        let x = s[5].forward(g, Some(d[0]), None, Some(x))?;
        self.head.forward(g, x)
    }

    /// Foreground probabilities `(N, 1, H, W)` without recording gradients.
    pub fn predict(&self, params: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::with_params(params);
        let x = g.constant(images.clone());
        let logits = self.forward(&mut g, x)?;
        Ok(foreground_probability(g.value(logits)))
    }
}

/// Softmax probability of channel 1 for two-channel logits.
pub fn foreground_probability<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, _, h, w] = logits.dims();
    Tensor::from_fn(Shape::nchw(n, 1, h, w), |[ni, _, y, x]| {
        let d = logits.at([ni, 0, y, x]) - logits.at([ni, 1, y, x]);
        crate::ops::Activation::Sigmoid.apply(-d)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::ops::testutil::random;

    fn logits(model: &DscFormer, store: &ParamStore<f32>, x: &Tensor<f32>) -> Tensor<f32> {
        let mut g = Graph::with_params(store);
        let xi = g.constant(x.clone());
        let y = model.forward(&mut g, xi).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn fusion_widths_follow_concatenation() {
        let c = ModelConfig::tiny();
        assert_eq!(c.fusion_widths(), [32, 16 + 32 + 32, 16 + 16 + 16, 8 + 8 + 16, 8 + 8, 4 + 8]);
        let mut bad = c;
        bad.mit.heads[1] = 3;
        assert!(matches!(DscFormer::new(bad), Err(Error::Config(_))));
        let mut bad = c;
        bad.ratio = 5;
        assert!(matches!(DscFormer::new(bad), Err(Error::Config(_))));
    }

    #[test]
    fn gather_concatenates_in_fixed_order() {
        let mut g = Graph::<f64>::new();
        let d = g.constant(random(&[1, 32, 4, 4], 1));
        let m = g.constant(random(&[1, 64, 4, 4], 2));
        let b = g.constant(random(&[1, 128, 2, 2], 3));
        let cat = FuseStage::gather(&mut g, Some(d), Some(m), Some(b)).unwrap();
        assert_eq!(g.value(cat).dims(), [1, 224, 4, 4]);
        assert_eq!(g.value(cat).at([0, 40, 1, 2]), g.value(m).at([0, 8, 1, 2]));
        let only = FuseStage::gather(&mut g, None, Some(m), None).unwrap();
        assert_eq!(g.value(only), g.value(m));
        let wrong = g.constant(random(&[1, 8, 2, 2], 4));
        assert!(FuseStage::gather(&mut g, Some(d), Some(wrong), None).is_err());
    }

    #[test]
    fn fuse_stage_matches_composition_oracle() {
        let mut pb = ParamBuilder::new(5);
        let stage = FuseStage::new(&mut pb, "f", 8, 4, 2, ChannelAttentionKind::Wcam).unwrap();
        let store = pb.finish().cast::<f64>();
        let (dsc, below) = (random::<f64>(&[2, 4, 6, 6], 6), random::<f64>(&[2, 4, 3, 3], 7));
        let mut g = Graph::with_params(&store);
        let (di, bi) = (g.constant(dsc.clone()), g.constant(below.clone()));
        let got = stage.forward(&mut g, Some(di), None, Some(bi)).unwrap();
        let got = g.value(got).clone();

        let eval = |x: &Tensor<f64>, f: &dyn Fn(&mut Graph<'_, f64>, NodeId) -> Result<NodeId>| {
            let mut g = Graph::with_params(&store);
            let xi = g.constant(x.clone());
            let y = f(&mut g, xi).unwrap();
            g.value(y).clone()
        };
        let up = eval(&below, &|g, x| g.upsample_bilinear(x, 2));
        let cat = Tensor::from_fn(Shape::nchw(2, 8, 6, 6), |[n, c, y, x]| {
            if c < 4 { dsc.at([n, c, y, x]) } else { up.at([n, c - 4, y, x]) }
        });
        let a = eval(&cat, &|g, x| stage.attention.forward(g, x));
        let h = eval(&a, &|g, x| stage.conv1.forward(g, x)).map(|v| v.max(0.0));
        let h = eval(&h, &|g, x| stage.conv2.forward(g, x));
        let skip = eval(&cat, &|g, x| stage.projection.forward(g, x));
        let want = Tensor::from_fn(h.shape(), |i| (h.at(i) + skip.at(i)).max(0.0));
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn fuse_stage_passes_gradient_check() {
        let mut pb = ParamBuilder::new(8);
        let stage = FuseStage::new(&mut pb, "f", 4, 2, 2, ChannelAttentionKind::Wcam).unwrap();
        let store = pb.finish().cast::<f64>();
        let inputs = [random(&[1, 2, 4, 4], 9), random(&[1, 2, 2, 2], 10)];
        let report = grad_check(
            "fuse_stage",
            &store,
            &inputs,
            |g, ids| stage.forward(g, Some(ids[0]), None, Some(ids[1])),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn logits_match_input_resolution() {
        let (model, store) = DscFormer::new(ModelConfig::tiny()).unwrap();
        let x = random(&[1, 1, 64, 64], 11);
        assert_eq!(logits(&model, &store, &x).dims(), [1, 2, 64, 64]);
        let mut g = Graph::with_params(&store);
        let bad = g.constant(random(&[1, 1, 48, 64], 12));
        assert!(matches!(model.forward(&mut g, bad), Err(Error::Contract { .. })));
        let probs = model.predict(&store, &x).unwrap();
        assert_eq!(probs.dims(), [1, 1, 64, 64]);
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn different_seeds_give_different_logits() {
        let x = random(&[1, 1, 32, 32], 13);
        let run = |seed| {
            let (model, store) = DscFormer::new(ModelConfig { seed, ..ModelConfig::tiny() }).unwrap();
            logits(&model, &store, &x)
        };
        let (a, b) = (run(1), run(2));
        assert!(a.max_abs_diff(&b) > 1e-3);
        assert_eq!(a, run(1));
    }

    #[test]
    fn loss_gradient_reaches_nearly_every_parameter() {
        for conv in [ConvKind::Enhanced, ConvKind::DsConv, ConvKind::Vanilla] {
            let (model, store) = DscFormer::new(ModelConfig { conv, ..ModelConfig::tiny() }).unwrap();
            let mut g = Graph::with_params(&store);
            // At 32x32 every reduced key set is a single token, which makes
            // query and key gradients vanish, so the scan uses 64x64.
            let x = g.constant(random::<f32>(&[1, 1, 64, 64], 14).map(|v| v.abs()));
            let y = model.forward(&mut g, x).unwrap();
            let target = Tensor::from_fn(Shape::nchw(1, 1, 64, 64), |[_, _, h, w]| f32::from(u8::from((h + w) % 7 == 0)));
            let loss = g.seg_loss(y, target).unwrap();
            let grads = g.backward(loss).unwrap();
            let dead: Vec<&String> = grads
                .params()
                .iter()
                .filter(|(_, t)| t.data().iter().all(|&v| v == 0.0))
                .map(|(n, _)| n)
                .collect();
            assert!(dead.len() * 100 <= store.len(), "{conv:?}: dead {dead:?}");
        }
    }

    #[test]
    fn softmax_probabilities_sum_to_one() {
        let l = random::<f64>(&[2, 2, 5, 5], 15).map(|v| v * 30.0);
        let p1 = foreground_probability(&l);
        for ni in 0..2 {
            for y in 0..5 {
                for x in 0..5 {
                    let (a, b) = (l.at([ni, 0, y, x]), l.at([ni, 1, y, x]));
                    let m = a.max(b);
                    let p0 = (a - m).exp() / ((a - m).exp() + (b - m).exp());
                    assert!((p0 + p1.at([ni, 0, y, x]) - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
