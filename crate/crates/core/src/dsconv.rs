//! Dynamic snake convolution with pyramid offset prediction.
//!
//! Each output pixel samples its input along a chain of nine points that
//! starts at the pixel and walks outward in both directions. Every step is a
//! tanh-squashed displacement, so the chain stays inside the 9x9 window
//! around its center and consecutive points are at most one pixel apart per
//! axis. Steps for chain distance `c` come from a `(2c + 1)`-sized kernel.

use crate::nn::{Conv2d, ConvSpec};
use crate::ops::{CHAIN_LEN, STEP_CHANNELS};
use crate::{Graph, NodeId, ParamBuilder, Result, Scalar, Shape, Tensor};

/// Initial step size along the instance's axis; the pyramid bias is its
/// inverse tanh.
pub const INITIAL_STEP: f64 = 0.95;

/// Kernel sizes of the offset pyramid, nearest chain distance first.
pub const PYRAMID_KERNELS: [usize; 4] = [3, 5, 7, 9];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Horizontal,
    Vertical,
}

impl Axis {
    fn tag(self) -> &'static str {
        match self {
            Axis::Horizontal => "h",
            Axis::Vertical => "v",
        }
    }

    /// Step components `(dx+, dy+, dx-, dy-)` of a straight chain with step `s`.
    fn steps(self, s: f32) -> [f32; 4] {
        match self {
            Axis::Horizontal => [s, 0.0, s, 0.0],
            Axis::Vertical => [0.0, s, 0.0, s],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OffsetMode {
    /// Offsets predicted by the pyramid.
    Learned,
    /// Chains fixed to unit steps along the axis; no offset parameters.
    Straight,
}

/// Raw and tanh-squashed step components, both `(N, 16, H, W)`.
#[derive(Clone, Copy, Debug)]
pub struct OffsetField {
    pub raw: NodeId,
    pub squashed: NodeId,
}

#[derive(Clone, Debug)]
pub struct DsConv {
    pub axis: Axis,
    pub mode: OffsetMode,
    pub cin: usize,
    pub cout: usize,
    pub pyramid: Vec<Conv2d>,
    pub chain_weight: String,
    pub chain_bias: String,
}

impl DsConv {
    /// Parameters are `<name>.pyramid.<k>.weight|bias` for each kernel size
    /// `k` and `<name>.chain.weight|bias`.
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, axis: Axis, mode: OffsetMode) -> Result<Self> {
        let pyramid = match mode {
            OffsetMode::Learned => {
                let bias = axis.steps(INITIAL_STEP.atanh() as f32).to_vec();
                PYRAMID_KERNELS
                    .iter()
                    .map(|&k| Conv2d::zeroed(pb, &format!("{name}.pyramid.{k}"), ConvSpec::same(cin, 4, k), bias.clone()))
                    .collect::<Result<_>>()?
            }
            OffsetMode::Straight => Vec::new(),
        };
        let chain_weight = pb.fan_in(&format!("{name}.chain.weight"), &[cout, cin, CHAIN_LEN], cin * CHAIN_LEN)?;
        let chain_bias = pb.zeros(&format!("{name}.chain.bias"), &[cout])?;
        Ok(DsConv {
            axis,
            mode,
            cin,
            cout,
            pyramid,
            chain_weight,
            chain_bias,
        })
    }

    /// Name prefix used for an instance inside a block.
    pub fn instance_name(prefix: &str, axis: Axis) -> String {
        format!("{prefix}.dsconv.{}", axis.tag())
    }

    /// Pyramid offsets; `None` for straight chains.
    pub fn offsets<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<Option<OffsetField>> {
        if self.mode == OffsetMode::Straight {
            return Ok(None);
        }
        let levels = self
            .pyramid
            .iter()
            .map(|conv| conv.forward(g, x))
            .collect::<Result<Vec<_>>>()?;
        let raw = g.concat_channels(&levels)?;
        let squashed = g.tanh(raw);
        Ok(Some(OffsetField { raw, squashed }))
    }

    /// Absolute chain coordinates `(N, 18, H, W)`.
    pub fn coords<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let steps = match self.offsets(g, x)? {
            Some(field) => field.squashed,
            None => {
                let [n, _, h, w] = g.value(x).dims();
                let unit = self.axis.steps(1.0);
                let t = Tensor::from_fn(Shape::nchw(n, STEP_CHANNELS, h, w), |[_, c, _, _]| T::lit(f64::from(unit[c % 4])));
                g.constant(t)
            }
        };
        g.chain_coords(steps)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let coords = self.coords(g, x)?;
        let sampled = g.snake_sample(x, coords)?;
        let w = g.param(&self.chain_weight)?;
        let w = g.reshape(w, Shape::nchw(self.cout, self.cin * CHAIN_LEN, 1, 1))?;
        let b = g.param(&self.chain_bias)?;
        g.conv2d(sampled, w, Some(b), 1, 0, 1)
    }
}
