//! Hierarchical transformer encoder branch: overlapping patch embeddings,
//! attention with spatially reduced keys and values, and depthwise-conv
//! feed-forward layers. No positional encodings are used.

use crate::nn::{Conv2d, ConvSpec, LayerNorm, Linear};
use crate::{Error, Graph, NodeId, ParamBuilder, Result, Scalar, Shape};

pub const MIT_STAGES: usize = 4;

/// Hidden width multiplier of the feed-forward layers.
pub const FFN_EXPANSION: usize = 4;

/// Multi-head attention whose keys and values come from a copy of the
/// input downsampled by a stride-`R` convolution.
#[derive(Clone, Debug)]
pub struct EfficientAttention {
    pub heads: usize,
    pub reduction: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub sr: Option<(Conv2d, LayerNorm)>,
}

impl EfficientAttention {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, c: usize, heads: usize, reduction: usize) -> Result<Self> {
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {c}")));
        }
        if reduction == 0 {
            return Err(Error::Config("reduction ratio must be positive".into()));
        }
        let q = Linear::new(pb, &format!("{prefix}.q"), c, c, true)?;
        let k = Linear::new(pb, &format!("{prefix}.k"), c, c, true)?;
        let v = Linear::new(pb, &format!("{prefix}.v"), c, c, true)?;
        let proj = Linear::new(pb, &format!("{prefix}.proj"), c, c, true)?;
        let sr = if reduction > 1 {
            let spec = ConvSpec::same(c, c, reduction).strided(reduction, 0);
            Some((
                Conv2d::new(pb, &format!("{prefix}.sr"), spec)?,
                LayerNorm::new(pb, &format!("{prefix}.sr_norm"), c)?,
            ))
        } else {
            None
        };
        Ok(EfficientAttention {
            heads,
            reduction,
            q,
            k,
            v,
            proj,
            sr,
        })
    }

    fn split_heads<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let [n, _, l, c] = g.value(x).dims();
        let x = g.reshape(x, Shape::nchw(n, l, self.heads, c / self.heads))?;
        g.permute(x, [0, 2, 1, 3])
    }

    /// Output tokens and the attention probabilities `(N, heads, L, L')`.
    pub fn forward_with_probs<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, h: usize, w: usize) -> Result<(NodeId, NodeId)> {
        let [n, one, l, c] = g.value(x).dims();
        let r = self.reduction;
        if one != 1 || l != h * w || !h.is_multiple_of(r) || !w.is_multiple_of(r) {
            return Err(Error::contract(
                "efficient_attention",
                format!("tokens {} do not form a {h}x{w} map divisible by {r}", g.value(x).shape()),
            ));
        }
        let kv_src = match &self.sr {
            Some((conv, norm)) => {
                let m = g.from_tokens(x, h, w)?;
                let m = conv.forward(g, m)?;
                let t = g.to_tokens(m)?;
                norm.forward(g, t)?
            }
            None => x,
        };
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, kv_src)?;
        let v = self.v.forward(g, kv_src)?;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let scores = g.matmul(q, k, true)?;
        let d = c / self.heads;
        let scores = g.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
        let probs = g.softmax_last(scores);
        let out = g.matmul(probs, v, false)?;
        let out = g.permute(out, [0, 2, 1, 3])?;
        let out = g.reshape(out, Shape::nchw(n, 1, l, c))?;
        Ok((self.proj.forward(g, out)?, probs))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        Ok(self.forward_with_probs(g, x, h, w)?.0)
    }
}

/// Linear expansion, 3x3 depthwise convolution on the token map, GELU,
/// linear projection back.
#[derive(Clone, Debug)]
pub struct MixFfn {
    pub fc1: Linear,
    pub dw: Conv2d,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, c: usize) -> Result<Self> {
        let hidden = c * FFN_EXPANSION;
        Ok(MixFfn {
            fc1: Linear::new(pb, &format!("{prefix}.fc1"), c, hidden, true)?,
            dw: Conv2d::new(pb, &format!("{prefix}.dw"), ConvSpec::same(hidden, hidden, 3).grouped(hidden))?,
            fc2: Linear::new(pb, &format!("{prefix}.fc2"), hidden, c, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let l = g.value(x).dims()[2];
        if l != h * w {
            return Err(Error::contract("mix_ffn", format!("{l} tokens do not form a {h}x{w} map")));
        }
        let t = self.fc1.forward(g, x)?;
        let m = g.from_tokens(t, h, w)?;
        let m = self.dw.forward(g, m)?;
        let t = g.to_tokens(m)?;
        let t = g.gelu(t);
        self.fc2.forward(g, t)
    }
}

/// Pre-norm residual block: attention then feed-forward.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: EfficientAttention,
    pub norm2: LayerNorm,
    pub ffn: MixFfn,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, c: usize, heads: usize, reduction: usize) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(pb, &format!("{prefix}.norm1"), c)?,
            attn: EfficientAttention::new(pb, &format!("{prefix}.attn"), c, heads, reduction)?,
            norm2: LayerNorm::new(pb, &format!("{prefix}.norm2"), c)?,
            ffn: MixFfn::new(pb, &format!("{prefix}.ffn"), c)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let a = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, a, h, w)?;
        let x = g.add(x, a)?;
        let f = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, f, h, w)?;
        g.add(x, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub cin: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub reduction: usize,
    /// The first stage embeds with a 7x7 stride-4 kernel, later ones with
    /// 3x3 stride 2.
    pub first: bool,
}

#[derive(Clone, Debug)]
pub struct TransformerStage {
    pub embed: Conv2d,
    pub embed_norm: LayerNorm,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl TransformerStage {
    /// Embedding under `<prefix>.embed`, block `j` under `<prefix>.<j>`.
    pub fn new(pb: &mut ParamBuilder, prefix: &str, spec: StageSpec) -> Result<Self> {
        let conv = if spec.first {
            ConvSpec::same(spec.cin, spec.width, 7).strided(4, 3)
        } else {
            ConvSpec::same(spec.cin, spec.width, 3).strided(2, 1)
        };
        let embed = Conv2d::new(pb, &format!("{prefix}.embed"), conv)?;
        let embed_norm = LayerNorm::new(pb, &format!("{prefix}.embed_norm"), spec.width)?;
        let blocks = (0..spec.depth)
            .map(|j| TransformerBlock::new(pb, &format!("{prefix}.{j}"), spec.width, spec.heads, spec.reduction))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(pb, &format!("{prefix}.norm"), spec.width)?;
        Ok(TransformerStage {
            embed,
            embed_norm,
            blocks,
            norm,
        })
    }

    /// Maps `(N, Cin, H, W)` to `(N, width, H / s, W / s)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let m = self.embed.forward(g, x)?;
        let [_, _, h, w] = g.value(m).dims();
        let t = g.to_tokens(m)?;
        let mut t = self.embed_norm.forward(g, t)?;
        for block in &self.blocks {
            t = block.forward(g, t, h, w)?;
        }
        let t = self.norm.forward(g, t)?;
        g.from_tokens(t, h, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MitConfig {
    pub widths: [usize; MIT_STAGES],
    pub depths: [usize; MIT_STAGES],
    pub heads: [usize; MIT_STAGES],
    pub reductions: [usize; MIT_STAGES],
}

/// Four stages giving features at 1/4, 1/8, 1/16 and 1/32 resolution.
#[derive(Clone, Debug)]
pub struct MixTransformer {
    pub stages: Vec<TransformerStage>,
}

impl MixTransformer {
    /// Stage `i` lives under `enc.mit.<i>`.
    pub fn new(pb: &mut ParamBuilder, in_channels: usize, cfg: &MitConfig) -> Result<Self> {
        let mut cin = in_channels;
        let mut stages = Vec::with_capacity(MIT_STAGES);
        for i in 0..MIT_STAGES {
            let spec = StageSpec {
                cin,
                width: cfg.widths[i],
                depth: cfg.depths[i],
                heads: cfg.heads[i],
                reduction: cfg.reductions[i],
                first: i == 0,
            };
            stages.push(TransformerStage::new(pb, &format!("enc.mit.{i}"), spec)?);
            cin = cfg.widths[i];
        }
        Ok(MixTransformer { stages })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<Vec<NodeId>> {
        let [_, _, h, w] = g.value(x).dims();
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::contract(
                "transformer_encoder",
                format!("spatial dims {h}x{w} must be divisible by 32"),
            ));
        }
        let mut feats = Vec::with_capacity(MIT_STAGES);
        let mut cur = x;
        for stage in &self.stages {
            cur = stage.forward(g, cur)?;
            feats.push(cur);
        }
        Ok(feats)
    }
}
