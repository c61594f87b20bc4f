//! Channel attention (weighted two-branch or shared-MLP) and spatial
//! attention over feature maps.

use crate::nn::{Conv2d, ConvSpec, Linear};
use crate::ops::PoolKind;
use crate::{Error, Graph, NodeId, ParamBuilder, Result, Scalar, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelAttentionKind {
    None,
    /// One MLP shared by the average and max descriptors.
    Cam,
    /// Independent MLPs per descriptor, mixed by learnable per-channel weights.
    Wcam,
}

impl ChannelAttentionKind {
    pub const ALL: [ChannelAttentionKind; 3] = [ChannelAttentionKind::None, ChannelAttentionKind::Cam, ChannelAttentionKind::Wcam];

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelAttentionKind::None => "none",
            ChannelAttentionKind::Cam => "cam",
            ChannelAttentionKind::Wcam => "wcam",
        }
    }
}

impl std::fmt::Display for ChannelAttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ChannelAttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown channel attention `{s}` (expected none|cam|wcam)")))
    }
}

/// Bias-free two-layer MLP `C -> C/r -> C` with a ReLU between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w0: Linear,
    pub w1: Linear,
}

impl Mlp {
    fn new(pb: &mut ParamBuilder, prefix: &str, c: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            w0: Linear::named(pb, &format!("{prefix}.w0"), c, hidden)?,
            w1: Linear::named(pb, &format!("{prefix}.w1"), hidden, c)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.w0.forward(g, x)?;
        let h = g.relu(h);
        self.w1.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub enum ChannelAttention {
    Cam { mlp: Mlp },
    Wcam { avg: Mlp, max: Mlp, wavg: String, wmax: String },
}

fn hidden_width(c: usize, r: usize) -> Result<usize> {
    if r == 0 || !c.is_multiple_of(r) {
        return Err(Error::Config(format!("reduction ratio {r} does not divide {c} channels")));
    }
    Ok(c / r)
}

impl ChannelAttention {
    /// `None` for [`ChannelAttentionKind::None`]. Parameters live under
    /// `<prefix>.wcam.*` or `<prefix>.cam.*`.
    pub fn new(pb: &mut ParamBuilder, prefix: &str, c: usize, r: usize, kind: ChannelAttentionKind) -> Result<Option<Self>> {
        Ok(match kind {
            ChannelAttentionKind::None => None,
            ChannelAttentionKind::Cam => {
                let hidden = hidden_width(c, r)?;
                Some(ChannelAttention::Cam {
                    mlp: Mlp::new(pb, &format!("{prefix}.cam"), c, hidden)?,
                })
            }
            ChannelAttentionKind::Wcam => {
                let hidden = hidden_width(c, r)?;
                let p = format!("{prefix}.wcam");
                Some(ChannelAttention::Wcam {
                    avg: Mlp::new(pb, &format!("{p}.avg"), c, hidden)?,
                    max: Mlp::new(pb, &format!("{p}.max"), c, hidden)?,
                    wavg: pb.constant(&format!("{p}.wavg"), &[c], 1.0)?,
                    wmax: pb.constant(&format!("{p}.wmax"), &[c], 1.0)?,
                })
            }
        })
    }

    /// Per-channel attention `(N, C, 1, 1)` in `(0, 1)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let [n, c, _, _] = g.value(x).dims();
        let descriptor = |g: &mut Graph<'_, T>, kind| -> Result<NodeId> {
            let d = g.global_pool(x, kind)?;
            g.reshape(d, Shape::nchw(n, 1, 1, c))
        };
        let avg = descriptor(g, PoolKind::Avg)?;
        let max = descriptor(g, PoolKind::Max)?;
        let logits = match self {
            ChannelAttention::Cam { mlp } => {
                let a = mlp.forward(g, avg)?;
                let m = mlp.forward(g, max)?;
                g.add(a, m)?
            }
            ChannelAttention::Wcam { avg: ma, max: mm, wavg, wmax } => {
                let a = ma.forward(g, avg)?;
                let m = mm.forward(g, max)?;
                let wa = g.param(wavg)?;
                let wm = g.param(wmax)?;
                let a = g.mul_lastdim(a, wa)?;
                let m = g.mul_lastdim(m, wm)?;
                g.add(a, m)?
            }
        };
        let s = g.sigmoid(logits);
        g.reshape(s, Shape::nchw(n, c, 1, 1))
    }
}

/// Spatial attention: a 7x7 convolution over stacked channel mean and max
/// maps, then a sigmoid.
#[derive(Clone, Debug)]
pub struct Sam {
    pub conv: Conv2d,
}

impl Sam {
    /// Parameters are `<prefix>.sam.kernel` and `<prefix>.sam.bias`.
    pub fn new(pb: &mut ParamBuilder, prefix: &str) -> Result<Self> {
        let p = format!("{prefix}.sam");
        let kernel = pb.fan_in(&format!("{p}.kernel"), &[1, 2, 7, 7], 2 * 49)?;
        let bias = pb.zeros(&format!("{p}.bias"), &[1])?;
        Ok(Sam {
            conv: Conv2d {
                weight: kernel,
                bias: Some(bias),
                spec: ConvSpec::same(2, 1, 7),
            },
        })
    }

    /// Attention map `(N, 1, H, W)` in `(0, 1)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let mean = g.channel_pool(x, PoolKind::Avg)?;
        let max = g.channel_pool(x, PoolKind::Max)?;
        let stacked = g.concat_channels(&[mean, max])?;
        let y = self.conv.forward(g, stacked)?;
        Ok(g.sigmoid(y))
    }
}

/// Scales `x` by channel attention, then by spatial attention.
pub fn apply_attention<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, channel: Option<NodeId>, spatial: NodeId) -> Result<NodeId> {
    let x = match channel {
        Some(c) => g.scale_channels(x, c)?,
        None => x,
    };
    g.scale_spatial(x, spatial)
}

/// Channel attention (when configured) followed by spatial attention.
#[derive(Clone, Debug)]
pub struct AttentionPair {
    pub channel: Option<ChannelAttention>,
    pub spatial: Sam,
}

impl AttentionPair {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, c: usize, r: usize, kind: ChannelAttentionKind) -> Result<Self> {
        Ok(AttentionPair {
            channel: ChannelAttention::new(pb, prefix, c, r, kind)?,
            spatial: Sam::new(pb, prefix)?,
        })
    }

    /// Spatial attention is computed on the channel-refined map.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let refined = match &self.channel {
            Some(ca) => {
                let a = ca.forward(g, x)?;
                g.scale_channels(x, a)?
            }
            None => x,
        };
        let sa = self.spatial.forward(g, refined)?;
        g.scale_spatial(refined, sa)
    }
}
