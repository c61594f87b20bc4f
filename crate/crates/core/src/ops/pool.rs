use crate::{BackwardOp, Error, Graph, NodeId, Result, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Routes each output gradient to one recorded input index.
struct ArgmaxBack {
    argmax: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for ArgmaxBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut gx = Tensor::zeros(inputs[0].shape());
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            gx.data_mut()[src] += g;
        }
        vec![Some(gx)]
    }
}

/// Mean over contiguous spatial planes (global) or over channels at each pixel.
struct MeanBack {
    over_channels: bool,
}

impl<T: Scalar> BackwardOp<T> for MeanBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let [n, c, h, w] = x.dims();
        let hw = h * w;
        let mut gx = Tensor::zeros(x.shape());
        let gd = grad.data();
        if self.over_channels {
            let inv = T::one() / T::lit(c as f64);
            for ni in 0..n {
                for ci in 0..c {
                    for p in 0..hw {
                        gx.data_mut()[(ni * c + ci) * hw + p] = gd[ni * hw + p] * inv;
                    }
                }
            }
        } else {
            let inv = T::one() / T::lit(hw as f64);
            for (i, v) in gx.data_mut().iter_mut().enumerate() {
                *v = gd[i / hw] * inv;
            }
        }
        vec![Some(gx)]
    }
}

struct UpsampleBack {
    factor: usize,
}

/// Half-pixel source taps along one axis: (i0, i1, weight of i1).
fn taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Scalar> BackwardOp<T> for UpsampleBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let [n, c, h, w] = x.dims();
        let (ho, wo) = (h * self.factor, w * self.factor);
        let (ty, tx) = (taps(ho, h, self.factor), taps(wo, w, self.factor));
        let mut gx = Tensor::zeros(x.shape());
        for plane in 0..n * c {
            let src = &grad.data()[plane * ho * wo..(plane + 1) * ho * wo];
            let dst = &mut gx.data_mut()[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let g = src[oy * wo + ox];
                    dst[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                    dst[y0 * w + x1] += g * (T::one() - fy) * fx;
                    dst[y1 * w + x0] += g * fy * (T::one() - fx);
                    dst[y1 * w + x1] += g * fy * fx;
                }
            }
        }
        vec![Some(gx)]
    }
}

impl<T: Scalar> Graph<'_, T> {
    /// 2x2 max pooling with stride 2; ties resolve to the first element in
    /// row-major order.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let [n, c, h, w] = vx.dims();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::contract(
                "max_pool2",
                format!("spatial dims must be even, got {}", vx.shape()),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(Shape::nchw(n, c, ho, wo));
        let mut argmax = Vec::with_capacity(out.numel());
        let xd = vx.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.data_mut()[(plane * ho + oy) * wo + ox] = xd[best];
                    argmax.push(best);
                }
            }
        }
        Ok(self.record(out, &[x], ArgmaxBack { argmax }))
    }

    /// Per-channel spatial reduction to `(N, C, 1, 1)`.
    pub fn global_pool(&mut self, x: NodeId, kind: PoolKind) -> Result<NodeId> {
        let vx = self.value(x);
        let [n, c, h, w] = vx.dims();
        let hw = h * w;
        if hw == 0 {
            return Err(Error::contract("global_pool", "empty spatial extent"));
        }
        let mut out = Tensor::zeros(Shape::nchw(n, c, 1, 1));
        match kind {
            PoolKind::Avg => {
                let inv = T::one() / T::lit(hw as f64);
                for (plane, v) in out.data_mut().iter_mut().enumerate() {
                    *v = vx.data()[plane * hw..(plane + 1) * hw].iter().copied().sum::<T>() * inv;
                }
                Ok(self.record(out, &[x], MeanBack { over_channels: false }))
            }
            PoolKind::Max => {
                let mut argmax = Vec::with_capacity(n * c);
                for plane in 0..n * c {
                    let mut best = plane * hw;
                    for idx in plane * hw + 1..(plane + 1) * hw {
                        if vx.data()[idx] > vx.data()[best] {
                            best = idx;
                        }
                    }
                    out.data_mut()[plane] = vx.data()[best];
                    argmax.push(best);
                }
                Ok(self.record(out, &[x], ArgmaxBack { argmax }))
            }
        }
    }

    /// Reduction over channels at every pixel, giving `(N, 1, H, W)`.
    pub fn channel_pool(&mut self, x: NodeId, kind: PoolKind) -> Result<NodeId> {
        let vx = self.value(x);
        let [n, c, h, w] = vx.dims();
        if c == 0 {
            return Err(Error::contract("channel_pool", "no channels"));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(Shape::nchw(n, 1, h, w));
        let xd = vx.data();
        match kind {
            PoolKind::Avg => {
                let inv = T::one() / T::lit(c as f64);
                for ni in 0..n {
                    for p in 0..hw {
                        let s: T = (0..c).map(|ci| xd[(ni * c + ci) * hw + p]).sum();
                        out.data_mut()[ni * hw + p] = s * inv;
                    }
                }
                Ok(self.record(out, &[x], MeanBack { over_channels: true }))
            }
            PoolKind::Max => {
                let mut argmax = Vec::with_capacity(n * hw);
                for ni in 0..n {
                    for p in 0..hw {
                        let mut best = ni * c * hw + p;
                        for ci in 1..c {
                            let idx = (ni * c + ci) * hw + p;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                        out.data_mut()[ni * hw + p] = xd[best];
                        argmax.push(best);
                    }
                }
                Ok(self.record(out, &[x], ArgmaxBack { argmax }))
            }
        }
    }

    /// Bilinear upsampling by an integer factor with half-pixel centers
    /// (corners not aligned); edge taps clamp to the border.
    pub fn upsample_bilinear(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor < 2 {
            return Err(Error::contract("upsample_bilinear", format!("factor must be >= 2, got {factor}")));
        }
        let vx = self.value(x);
        let [n, c, h, w] = vx.dims();
        let (ho, wo) = (h * factor, w * factor);
        let (ty, tx) = (taps(ho, h, factor), taps(wo, w, factor));
        let mut out = Tensor::zeros(Shape::nchw(n, c, ho, wo));
        for plane in 0..n * c {
            let src = &vx.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out.data_mut()[plane * ho * wo..(plane + 1) * ho * wo];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        Ok(self.record(out, &[x], UpsampleBack { factor }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testutil::{check_inputs, random};

    fn eval(x: Tensor<f64>, f: impl FnOnce(&mut Graph<'_, f64>, NodeId) -> Result<NodeId>) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let xi = g.constant(x);
        let y = f(&mut g, xi)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn max_pool_examples() {
        let x = Tensor::new(Shape::nchw(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eval(x, |g, x| g.max_pool2(x)).unwrap().data(), &[4.0]);
        let c = eval(Tensor::full(Shape::nchw(2, 3, 4, 6), 1.5), |g, x| g.max_pool2(x)).unwrap();
        assert_eq!(c, Tensor::full(Shape::nchw(2, 3, 2, 3), 1.5));
        assert!(eval(Tensor::zeros(Shape::nchw(1, 1, 3, 4)), |g, x| g.max_pool2(x)).is_err());

        let x = random::<f64>(&[1, 1, 8, 8], 1);
        let y = eval(x.clone(), |g, x| g.max_pool2(x)).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let want = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(a, b)| x.at([0, 0, 2 * oy + a, 2 * ox + b]))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(y.at([0, 0, oy, ox]), want);
            }
        }
    }

    #[test]
    fn max_pool_ties_route_to_first_element() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(Shape::nchw(1, 1, 2, 2), 1.0));
        let y = g.max_pool2(x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_pool_examples() {
        let c = Tensor::full(Shape::nchw(1, 2, 3, 3), -2.0);
        for kind in [PoolKind::Avg, PoolKind::Max] {
            let y = eval(c.clone(), |g, x| g.global_pool(x, kind)).unwrap();
            assert_eq!(y, Tensor::full(Shape::nchw(1, 2, 1, 1), -2.0));
        }
        let x = Tensor::new(Shape::nchw(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eval(x.clone(), |g, x| g.global_pool(x, PoolKind::Avg)).unwrap().data(), &[2.5]);
        assert_eq!(eval(x, |g, x| g.global_pool(x, PoolKind::Max)).unwrap().data(), &[4.0]);

        let x = random::<f64>(&[2, 5, 7, 7], 2);
        let avg = eval(x.clone(), |g, x| g.global_pool(x, PoolKind::Avg)).unwrap();
        let max = eval(x.clone(), |g, x| g.global_pool(x, PoolKind::Max)).unwrap();
        for n in 0..2 {
            for c in 0..5 {
                let vals: Vec<f64> = (0..49).map(|i| x.at([n, c, i / 7, i % 7])).collect();
                let mean = vals.iter().sum::<f64>() / 49.0;
                assert!((avg.at([n, c, 0, 0]) - mean).abs() < 1e-6);
                assert_eq!(max.at([n, c, 0, 0]), vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }

    #[test]
    fn upsample_examples() {
        let c = eval(Tensor::full(Shape::nchw(1, 2, 3, 2), 0.7), |g, x| g.upsample_bilinear(x, 2)).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert_eq!(c.dims(), [1, 2, 6, 4]);
        let one = eval(Tensor::full(Shape::nchw(1, 1, 1, 1), 3.0), |g, x| g.upsample_bilinear(x, 2)).unwrap();
        assert_eq!(one.data(), &[3.0; 4]);
        assert!(eval(Tensor::zeros(Shape::nchw(1, 1, 2, 2)), |g, x| g.upsample_bilinear(x, 1)).is_err());
    }

    #[test]
    fn upsampled_ramp_matches_half_pixel_formula() {
        // f(y, x) = 3x + 2y is reproduced exactly away from the clamped border.
        let x = Tensor::from_fn(Shape::nchw(1, 1, 4, 5), |[_, _, y, x]| 3.0 * x as f64 + 2.0 * y as f64);
        let up = eval(x, |g, x| g.upsample_bilinear(x, 2)).unwrap();
        for oy in 1..7 {
            for ox in 1..9 {
                let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
                let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                assert!((up.at([0, 0, oy, ox]) - (3.0 * sx + 2.0 * sy)).abs() < 1e-6);
            }
        }
        // The border row sits on the clamped source row.
        assert!((up.at([0, 0, 0, 4]) - 3.0 * 1.75).abs() < 1e-12);
    }

    #[test]
    fn channel_pool_matches_loops() {
        let x = random::<f64>(&[2, 3, 4, 4], 3);
        let mean = eval(x.clone(), |g, x| g.channel_pool(x, PoolKind::Avg)).unwrap();
        let max = eval(x.clone(), |g, x| g.channel_pool(x, PoolKind::Max)).unwrap();
        for n in 0..2 {
            for i in 0..16 {
                let vals: Vec<f64> = (0..3).map(|c| x.at([n, c, i / 4, i % 4])).collect();
                assert!((mean.at([n, 0, i / 4, i % 4]) - vals.iter().sum::<f64>() / 3.0).abs() < 1e-12);
                assert_eq!(max.at([n, 0, i / 4, i % 4]), vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random::<f64>(&[2, 4, 8, 8], 4);
        check_inputs("max_pool2", std::slice::from_ref(&x), |g, ids| g.max_pool2(ids[0]));
        for kind in [PoolKind::Avg, PoolKind::Max] {
            check_inputs("global_pool", std::slice::from_ref(&x), |g, ids| g.global_pool(ids[0], kind));
            check_inputs("channel_pool", std::slice::from_ref(&x), |g, ids| g.channel_pool(ids[0], kind));
        }
        check_inputs("upsample", &[random(&[2, 3, 4, 3], 5)], |g, ids| g.upsample_bilinear(ids[0], 2));
        check_inputs("upsample4", &[random(&[1, 2, 2, 3], 6)], |g, ids| g.upsample_bilinear(ids[0], 4));
    }
}
