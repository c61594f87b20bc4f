use super::same_dims;
use crate::{BackwardOp, Error, Graph, NodeId, Result, Scalar, Shape, Tensor};

struct AddBack;

impl<T: Scalar> BackwardOp<T> for AddBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        needs.iter().map(|&n| n.then(|| grad.clone())).collect()
    }
}

struct MulBack;

impl<T: Scalar> BackwardOp<T> for MulBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let prod = |other: &Tensor<T>| {
            let data = grad.data().iter().zip(other.data()).map(|(&g, &o)| g * o).collect();
            Tensor::new(grad.shape(), data).expect("same length")
        };
        vec![
            needs[0].then(|| prod(inputs[1])),
            needs[1].then(|| prod(inputs[0])),
        ]
    }
}

struct ScaleBack<T>(T);

impl<T: Scalar> BackwardOp<T> for ScaleBack<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.map(|g| g * self.0))]
    }
}

struct WeightedSumBack<T>(Tensor<T>);

impl<T: Scalar> BackwardOp<T> for WeightedSumBack<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = grad.data()[0];
        let data = self.0.data().iter().map(|&w| w * g).collect();
        vec![Some(Tensor::new(inputs[0].shape(), data).expect("same length"))]
    }
}

/// Broadcasts a per-(n, c) factor over H and W, or a per-(n, h, w) factor over C.
struct BroadcastMulBack {
    channel: bool,
}

impl<T: Scalar> BackwardOp<T> for BroadcastMulBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, s) = (inputs[0], inputs[1]);
        let [n, c, h, w] = x.dims();
        let hw = h * w;
        let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut gs = needs[1].then(|| Tensor::zeros(s.shape()));
        let (xd, sd, gd) = (x.data(), s.data(), grad.data());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    let si = if self.channel { ni * c + ci } else { ni * hw + p };
                    let g = gd[base + p];
                    if let Some(gx) = gx.as_mut() {
                        gx.data_mut()[base + p] = g * sd[si];
                    }
                    if let Some(gs) = gs.as_mut() {
                        gs.data_mut()[si] += g * xd[base + p];
                    }
                }
            }
        }
        vec![gx, gs]
    }
}

struct MulLastBack;

impl<T: Scalar> BackwardOp<T> for MulLastBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, v) = (inputs[0], inputs[1]);
        let c = v.numel();
        let gx = needs[0].then(|| {
            let data = grad
                .data()
                .iter()
                .enumerate()
                .map(|(i, &g)| g * v.data()[i % c])
                .collect();
            Tensor::new(x.shape(), data).expect("same length")
        });
        let gv = needs[1].then(|| {
            let mut gv = Tensor::zeros(v.shape());
            for (i, (&g, &xv)) in grad.data().iter().zip(x.data()).enumerate() {
                gv.data_mut()[i % c] += g * xv;
            }
            gv
        });
        vec![gx, gv]
    }
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same length")
}

impl<T: Scalar> Graph<'_, T> {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_dims("add", va.shape(), vb.shape())?;
        let out = zip_with(va, vb, |x, y| x + y);
        Ok(self.record(out, &[a, b], AddBack))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_dims("mul", va.shape(), vb.shape())?;
        let out = zip_with(va, vb, |x, y| x * y);
        Ok(self.record(out, &[a, b], MulBack))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let out = self.value(x).map(|v| v * factor);
        self.record(out, &[x], ScaleBack(factor))
    }

    /// `sum_i weights_i * x_i` with constant weights, as a one-element tensor.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor<T>) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.numel() != weights.numel() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: vx.shape(),
                rhs: weights.shape(),
            });
        }
        let total = vx.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.record(Tensor::scalar(total), &[x], WeightedSumBack(weights)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let ones = Tensor::full(self.value(x).shape(), T::one());
        self.weighted_sum(x, ones).expect("same shape")
    }

    /// `x[n, c, h, w] * s[n, c]` with `s` shaped `(N, C, 1, 1)`.
    pub fn scale_channels(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (vx, vs) = (self.value(x), self.value(s));
        let [n, c, h, w] = vx.dims();
        same_dims("scale_channels", Shape::nchw(n, c, 1, 1), vs.shape())?;
        let hw = h * w;
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vs.data()[i / hw])
            .collect();
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.record(out, &[x, s], BroadcastMulBack { channel: true }))
    }

    /// `x[n, c, h, w] * s[n, h, w]` with `s` shaped `(N, 1, H, W)`.
    pub fn scale_spatial(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (vx, vs) = (self.value(x), self.value(s));
        let [n, c, h, w] = vx.dims();
        same_dims("scale_spatial", Shape::nchw(n, 1, h, w), vs.shape())?;
        let (hw, chw) = (h * w, c * h * w);
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vs.data()[(i / chw) * hw + i % hw])
            .collect();
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.record(out, &[x, s], BroadcastMulBack { channel: false }))
    }

    /// Multiplies the last axis of `x` by the vector `v`.
    pub fn mul_lastdim(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (vx, vv) = (self.value(x), self.value(v));
        let c = vx.dims()[3];
        if vv.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "mul_lastdim",
                lhs: vx.shape(),
                rhs: vv.shape(),
            });
        }
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a * vv.data()[i % c])
            .collect();
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.record(out, &[x, v], MulLastBack))
    }
}
