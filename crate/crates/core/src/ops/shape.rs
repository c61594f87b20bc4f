use crate::{BackwardOp, Error, Graph, NodeId, Result, Scalar, Shape, Tensor};

struct ReshapeBack;

impl<T: Scalar> BackwardOp<T> for ReshapeBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.clone().reshaped(inputs[0].shape()).expect("same numel"))]
    }
}

/// Moves axis `perm[i]` of the input to position `i` of the output.
fn permute_data<T: Scalar>(x: &Tensor<T>, perm: [usize; 4]) -> Tensor<T> {
    let d = x.dims();
    let out_dims = perm.map(|p| d[p]);
    let in_strides = [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1];
    let s = perm.map(|p| in_strides[p]);
    let mut data = Vec::with_capacity(x.numel());
    let xd = x.data();
    for a in 0..out_dims[0] {
        for b in 0..out_dims[1] {
            for c in 0..out_dims[2] {
                let base = a * s[0] + b * s[1] + c * s[2];
                data.extend((0..out_dims[3]).map(|e| xd[base + e * s[3]]));
            }
        }
    }
    let [n, ch, h, w] = out_dims;
    Tensor::new(Shape::nchw(n, ch, h, w), data).expect("same numel")
}

struct PermuteBack([usize; 4]);

impl<T: Scalar> BackwardOp<T> for PermuteBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut inverse = [0; 4];
        for (i, &p) in self.0.iter().enumerate() {
            inverse[p] = i;
        }
        vec![Some(permute_data(grad, inverse))]
    }
}

struct ConcatBack {
    channels: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for ConcatBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let [n, total, h, w] = grad.dims();
        let hw = h * w;
        let mut out = Vec::with_capacity(inputs.len());
        let mut c0 = 0;
        for ((x, &c), &need) in inputs.iter().zip(&self.channels).zip(needs) {
            out.push(need.then(|| {
                let mut gx = Tensor::zeros(x.shape());
                for ni in 0..n {
                    let src = &grad.data()[(ni * total + c0) * hw..(ni * total + c0 + c) * hw];
                    gx.data_mut()[ni * c * hw..(ni + 1) * c * hw].copy_from_slice(src);
                }
                gx
            }));
            c0 += c;
        }
        out
    }
}

impl<T: Scalar> Graph<'_, T> {
    pub fn reshape(&mut self, x: NodeId, shape: Shape) -> Result<NodeId> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.record(out, &[x], ReshapeBack))
    }

    /// Reorders the four axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: NodeId, perm: [usize; 4]) -> Result<NodeId> {
        let mut sorted = perm;
        sorted.sort_unstable();
        if sorted != [0, 1, 2, 3] {
            return Err(Error::contract("permute", format!("{perm:?} is not a permutation")));
        }
        let out = permute_data(self.value(x), perm);
        Ok(self.record(out, &[x], PermuteBack(perm)))
    }

    /// Concatenates along the channel axis; all inputs share N, H and W.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("concat_channels", "no inputs"))?;
        let [n, _, h, w] = self.value(first).dims();
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let d = self.value(x).dims();
            if d[0] != n || d[2] != h || d[3] != w {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.value(first).shape(),
                    rhs: self.value(x).shape(),
                });
            }
            channels.push(d[1]);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for ni in 0..n {
            for (&x, &c) in xs.iter().zip(&channels) {
                data.extend_from_slice(&self.value(x).data()[ni * c * hw..(ni + 1) * c * hw]);
            }
        }
        let out = Tensor::new(Shape::nchw(n, total, h, w), data)?;
        Ok(self.record(out, xs, ConcatBack { channels }))
    }

    /// `(N, C, H, W)` feature map to `(N, 1, H*W, C)` token rows.
    pub fn to_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.value(x).dims();
        let t = self.permute(x, [0, 2, 3, 1])?;
        self.reshape(t, Shape::nchw(n, 1, h * w, c))
    }

    /// Inverse of [`Graph::to_tokens`].
    pub fn from_tokens(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let [n, one, l, c] = self.value(x).dims();
        if one != 1 || l != h * w {
            return Err(Error::contract(
                "from_tokens",
                format!("{} tokens cannot form a {h}x{w} map", self.value(x).shape()),
            ));
        }
        let t = self.reshape(x, Shape::nchw(n, h, w, c))?;
        self.permute(t, [0, 3, 1, 2])
    }
}
