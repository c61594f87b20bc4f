use crate::{BackwardOp, Error, Graph, NodeId, Result, Scalar, Shape, Tensor};

/// Rows are every index except the last axis.
fn rows_cols<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    let c = t.dims()[3];
    (t.numel() / c.max(1), c)
}

struct LinearBack {
    has_bias: bool,
}

impl<T: Scalar> BackwardOp<T> for LinearBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (rows, cin) = rows_cols(x);
        let cout = w.dims()[2];
        let gx = needs[0].then(|| {
            let mut gx = Tensor::zeros(x.shape());
            T::gemm(rows, cout, cin, T::one(), grad.data(), cout, 1, w.data(), cin, 1, T::zero(), gx.data_mut(), cin, 1);
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = Tensor::zeros(w.shape());
            T::gemm(cout, rows, cin, T::one(), grad.data(), 1, cout, x.data(), cin, 1, T::zero(), gw.data_mut(), cin, 1);
            gw
        });
        let mut out = vec![gx, gw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut gb = Tensor::zeros(inputs[2].shape());
                for row in grad.data().chunks_exact(cout) {
                    for (b, &g) in gb.data_mut().iter_mut().zip(row) {
                        *b += g;
                    }
                }
                gb
            }));
        }
        out
    }
}

struct MatmulBack {
    trans_b: bool,
}

/// Batch count and per-matrix `(rows, cols)` of the trailing two axes.
fn mats<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize) {
    let [a, b, r, c] = t.dims();
    (a * b, r, c)
}

impl<T: Scalar> BackwardOp<T> for MatmulBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (batch, m, k) = mats(a);
        let n = grad.dims()[3];
        let mut ga = needs[0].then(|| Tensor::zeros(a.shape()));
        let mut gb = needs[1].then(|| Tensor::zeros(b.shape()));
        for i in 0..batch {
            let g = &grad.data()[i * m * n..(i + 1) * m * n];
            let bi = &b.data()[i * k * n..(i + 1) * k * n];
            let ai = &a.data()[i * m * k..(i + 1) * m * k];
            if let Some(ga) = ga.as_mut() {
                let dst = &mut ga.data_mut()[i * m * k..(i + 1) * m * k];
                // dA = G * B^T, with B stored (k, n) or (n, k) when transposed.
                let (rs, cs) = if self.trans_b { (k, 1) } else { (1, n) };
                T::gemm(m, n, k, T::one(), g, n, 1, bi, rs, cs, T::zero(), dst, k, 1);
            }
            if let Some(gb) = gb.as_mut() {
                let dst = &mut gb.data_mut()[i * k * n..(i + 1) * k * n];
                if self.trans_b {
                    // dB (n, k) = G^T * A
                    T::gemm(n, m, k, T::one(), g, 1, n, ai, k, 1, T::zero(), dst, k, 1);
                } else {
                    // dB (k, n) = A^T * G
                    T::gemm(k, m, n, T::one(), ai, 1, k, g, n, 1, T::zero(), dst, n, 1);
                }
            }
        }
        vec![ga, gb]
    }
}

struct SoftmaxBack;

impl<T: Scalar> BackwardOp<T> for SoftmaxBack {
    fn backward(&self, _: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let c = output.dims()[3];
        let mut gx = Tensor::zeros(output.shape());
        for ((y, g), d) in output
            .data()
            .chunks_exact(c)
            .zip(grad.data().chunks_exact(c))
            .zip(gx.data_mut().chunks_exact_mut(c))
        {
            let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
            for ((d, &yv), &gv) in d.iter_mut().zip(y).zip(g) {
                *d = yv * (gv - dot);
            }
        }
        vec![Some(gx)]
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Keeps the normalized rows and inverse deviations of the forward pass.
struct LayerNormBack<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BackwardOp<T> for LayerNormBack<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, gain) = (inputs[0], inputs[1]);
        let (rows, c) = rows_cols(x);
        let gd = gain.data();
        let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut gg = needs[1].then(|| Tensor::zeros(gain.shape()));
        let mut gs = needs[2].then(|| Tensor::zeros(inputs[2].shape()));
        let inv_c = T::one() / T::lit(c as f64);
        for r in 0..rows {
            let span = r * c..(r + 1) * c;
            let (xh, g) = (&self.xhat[span.clone()], &grad.data()[span.clone()]);
            if let Some(gg) = gg.as_mut() {
                for ((acc, &gv), &h) in gg.data_mut().iter_mut().zip(g).zip(xh) {
                    *acc += gv * h;
                }
            }
            if let Some(gs) = gs.as_mut() {
                for (acc, &gv) in gs.data_mut().iter_mut().zip(g) {
                    *acc += gv;
                }
            }
            if let Some(gx) = gx.as_mut() {
                let (mut mean_dy, mut mean_dy_xh) = (T::zero(), T::zero());
                for j in 0..c {
                    let dy = g[j] * gd[j];
                    mean_dy += dy;
                    mean_dy_xh += dy * xh[j];
                }
                mean_dy *= inv_c;
                mean_dy_xh *= inv_c;
                let dst = &mut gx.data_mut()[span];
                for j in 0..c {
                    dst[j] = self.inv_std[r] * (g[j] * gd[j] - mean_dy - xh[j] * mean_dy_xh);
                }
            }
        }
        vec![gx, gg, gs]
    }
}

impl<T: Scalar> Graph<'_, T> {
    /// Affine map over the last axis: `y = x W^T + b` with `W` shaped
    /// `(Cout, Cin)`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(weight));
        let (rows, cin) = rows_cols(vx);
        let [wa, wb, cout, wcin] = vw.dims();
        if wa * wb != 1 || wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: vx.shape(),
                rhs: vw.shape(),
            });
        }
        let mut out = Tensor::zeros(vx.shape().with_last(cout));
        T::gemm(rows, cin, cout, T::one(), vx.data(), cin, 1, vw.data(), 1, cin, T::zero(), out.data_mut(), cout, 1);
        if let Some(b) = bias {
            let vb = self.value(b);
            if vb.numel() != cout {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vw.shape(),
                    rhs: vb.shape(),
                });
            }
            for row in out.data_mut().chunks_exact_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(vb.data()) {
                    *o += bv;
                }
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(out, &inputs, LinearBack { has_bias: bias.is_some() }))
    }

    /// Batched product of the trailing two axes; `b` is read transposed
    /// when `trans_b` is set.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ba, m, k) = mats(va);
        let (bb, r, c) = mats(vb);
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        let [d0, d1, _, _] = va.dims();
        if ba != bb || va.dims()[..2] != vb.dims()[..2] || kb != k {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let mut out = Tensor::zeros(Shape::nchw(d0, d1, m, n));
        for i in 0..ba {
            let ai = &va.data()[i * m * k..(i + 1) * m * k];
            let bi = &vb.data()[i * k * n..(i + 1) * k * n];
            let (rs, cs) = if trans_b { (1, k) } else { (n, 1) };
            let dst = &mut out.data_mut()[i * m * n..(i + 1) * m * n];
            T::gemm(m, k, n, T::one(), ai, k, 1, bi, rs, cs, T::zero(), dst, n, 1);
        }
        Ok(self.record(out, &[a, b], MatmulBack { trans_b }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let c = vx.dims()[3];
        let mut out = vx.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        self.record(out, &[x], SoftmaxBack)
    }

    /// Normalizes each row of the last axis to zero mean and unit variance,
    /// then applies per-channel `gain` and `shift`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, c) = rows_cols(vx);
        let (vg, vs) = (self.value(gain), self.value(shift));
        if c == 0 || vg.numel() != c || vs.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vx.shape(),
                rhs: vg.shape(),
            });
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_c = T::one() / T::lit(c as f64);
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(vx.shape());
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out.data_mut()[r * c + j] = h * vg.data()[j] + vs.data()[j];
            }
        }
        Ok(self.record(out, &[x, gain, shift], LayerNormBack { xhat, inv_std }))
    }
}
