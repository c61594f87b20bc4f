//! Parameterized layers. Each holds the names of its parameters and reads
//! their values from the graph's store during the forward pass.

use crate::{Graph, NodeId, ParamBuilder, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1 with padding that preserves the spatial size.
    pub fn same(cin: usize, cout: usize, kernel: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: true,
        }
    }

    pub fn strided(mut self, stride: usize, padding: usize) -> Self {
        self.stride = stride;
        self.padding = padding;
        self
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub spec: ConvSpec,
}

impl Conv2d {
    /// Weights drawn with fan-in scaling, bias zero.
    pub fn new(pb: &mut ParamBuilder, name: &str, spec: ConvSpec) -> Result<Self> {
        let cin_g = spec.cin / spec.groups.max(1);
        let k = spec.kernel;
        let weight = pb.fan_in(&format!("{name}.weight"), &[spec.cout, cin_g, k, k], cin_g * k * k)?;
        let bias = if spec.bias {
            Some(pb.zeros(&format!("{name}.bias"), &[spec.cout])?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, spec })
    }

    /// Zero weights; the bias, if any, takes `bias` values.
    pub fn zeroed(pb: &mut ParamBuilder, name: &str, spec: ConvSpec, bias: Vec<f32>) -> Result<Self> {
        let k = spec.kernel;
        let weight = pb.zeros(&format!("{name}.weight"), &[spec.cout, spec.cin / spec.groups.max(1), k, k])?;
        let bias = if spec.bias {
            Some(pb.values(&format!("{name}.bias"), &[spec.cout], bias)?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, spec })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight)?;
        let b = self.bias.as_deref().map(|b| g.param(b)).transpose()?;
        g.conv2d(x, w, b, self.spec.stride, self.spec.padding, self.spec.groups)
    }
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let weight = pb.fan_in(&format!("{name}.weight"), &[cout, cin], cin)?;
        let bias = if bias {
            Some(pb.zeros(&format!("{name}.bias"), &[cout])?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    /// A bias-free layer with an explicit parameter name.
    pub fn named(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let weight = pb.fan_in(name, &[cout, cin], cin)?;
        Ok(Linear { weight, bias: None })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight)?;
        let b = self.bias.as_deref().map(|b| g.param(b)).transpose()?;
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub shift: String,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: pb.constant(&format!("{name}.gain"), &[c], 1.0)?,
            shift: pb.zeros(&format!("{name}.shift"), &[c])?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(&self.gain)?;
        let shift = g.param(&self.shift)?;
        g.layer_norm(x, gain, shift)
    }
}
