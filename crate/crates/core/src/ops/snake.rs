//! Snake-chain coordinates and bilinear sampling along them.
//!
//! Step channels come in groups of four per chain distance `c = 1..=4`:
//! `(dx+, dy+, dx-, dy-)` at `4 (c - 1)`. Coordinate channels hold
//! `(x, y)` pairs for chain points `K[t-4] ..= K[t+4]`, so point `j` sits at
//! channels `2 j` and `2 j + 1` and `j = 4` is the center.

use crate::{BackwardOp, Error, Graph, NodeId, Result, Scalar, Shape, Tensor};

pub const CHAIN_LEN: usize = 9;
pub const STEP_CHANNELS: usize = 16;
pub const COORD_CHANNELS: usize = 2 * CHAIN_LEN;

/// Prefix sums of per-step displacements from the center; the forward
/// chain adds, the backward chain subtracts.
fn chain_at<T: Scalar>(steps: impl Fn(usize) -> T, cx: T, cy: T) -> [(T, T); CHAIN_LEN] {
    let mut out = [(cx, cy); CHAIN_LEN];
    let (mut fx, mut fy, mut bx, mut by) = (cx, cy, cx, cy);
    for c in 1..=4 {
        let base = 4 * (c - 1);
        fx += steps(base);
        fy += steps(base + 1);
        bx -= steps(base + 2);
        by -= steps(base + 3);
        out[4 + c] = (fx, fy);
        out[4 - c] = (bx, by);
    }
    out
}

/// Chain for one pixel from its 16 step components.
pub fn iterate_chain<T: Scalar>(center: (usize, usize), steps: &[T; STEP_CHANNELS]) -> [(T, T); CHAIN_LEN] {
    let (h, w) = center;
    chain_at(|k| steps[k], T::lit(w as f64), T::lit(h as f64))
}

struct ChainBack;

impl<T: Scalar> BackwardOp<T> for ChainBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let [n, _, h, w] = inputs[0].dims();
        let hw = h * w;
        let mut gs = Tensor::zeros(inputs[0].shape());
        let gd = grad.data();
        for ni in 0..n {
            for p in 0..hw {
                let gc = |ch: usize| gd[(ni * COORD_CHANNELS + ch) * hw + p];
                // Suffix sums: step c moves every point at distance >= c.
                let (mut fx, mut fy, mut bx, mut by) = (T::zero(), T::zero(), T::zero(), T::zero());
                for c in (1..=4).rev() {
                    fx += gc(2 * (4 + c));
                    fy += gc(2 * (4 + c) + 1);
                    bx += gc(2 * (4 - c));
                    by += gc(2 * (4 - c) + 1);
                    let base = (ni * STEP_CHANNELS + 4 * (c - 1)) * hw + p;
                    let d = gs.data_mut();
                    d[base] = fx;
                    d[base + hw] = fy;
                    d[base + 2 * hw] = -bx;
                    d[base + 3 * hw] = -by;
                }
            }
        }
        vec![Some(gs)]
    }
}

/// Bilinear taps of a coordinate clamped to `[0, len - 1]`: the two grid
/// indices, the weight of the upper one, and whether clamping applied.
#[inline]
fn taps<T: Scalar>(v: T, len: usize) -> (usize, usize, T, bool) {
    let hi = T::lit((len - 1) as f64);
    let clamped = v < T::zero() || v > hi;
    let v = v.max(T::zero()).min(hi);
    let i0 = v.floor().to_f64() as usize;
    let i0 = i0.min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, v - T::lit(i0 as f64), clamped)
}

/// Bilinear value of one channel plane at a fractional point, with the
/// point clamped to the grid.
pub fn bilinear_at<T: Scalar>(plane: &[T], h: usize, w: usize, x: T, y: T) -> T {
    let (x0, x1, fx, _) = taps(x, w);
    let (y0, y1, fy, _) = taps(y, h);
    let one = T::one();
    (one - fy) * ((one - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1])
        + fy * ((one - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1])
}

/// Samples every channel of image `n` of `feature` at `(x, y)`.
pub fn bilinear_sample<T: Scalar>(feature: &Tensor<T>, n: usize, x: T, y: T) -> Result<Vec<T>> {
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::contract("bilinear_sample", format!("non-finite point ({x}, {y})")));
    }
    let [_, c, h, w] = feature.dims();
    let hw = h * w;
    Ok((0..c)
        .map(|ci| {
            let off = (n * c + ci) * hw;
            bilinear_at(&feature.data()[off..off + hw], h, w, x, y)
        })
        .collect())
}

struct SampleBack;

impl<T: Scalar> BackwardOp<T> for SampleBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, coords) = (inputs[0], inputs[1]);
        let [n, cin, h, w] = x.dims();
        let hw = h * w;
        let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut gc = needs[1].then(|| Tensor::zeros(coords.shape()));
        let one = T::one();
        for ni in 0..n {
            for p in 0..hw {
                for j in 0..CHAIN_LEN {
                    let cx = coords.data()[(ni * COORD_CHANNELS + 2 * j) * hw + p];
                    let cy = coords.data()[(ni * COORD_CHANNELS + 2 * j + 1) * hw + p];
                    let (x0, x1, fx, clamp_x) = taps(cx, w);
                    let (y0, y1, fy, clamp_y) = taps(cy, h);
                    let (i00, i01, i10, i11) = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1);
                    let (mut dx, mut dy) = (T::zero(), T::zero());
                    for ci in 0..cin {
                        let g = grad.data()[((ni * cin + ci) * CHAIN_LEN + j) * hw + p];
                        let off = (ni * cin + ci) * hw;
                        if let Some(gx) = gx.as_mut() {
                            let d = &mut gx.data_mut()[off..off + hw];
                            d[i00] += g * (one - fy) * (one - fx);
                            d[i01] += g * (one - fy) * fx;
                            d[i10] += g * fy * (one - fx);
                            d[i11] += g * fy * fx;
                        }
                        if gc.is_some() {
                            let f = &x.data()[off..off + hw];
                            dx += g * ((one - fy) * (f[i01] - f[i00]) + fy * (f[i11] - f[i10]));
                            dy += g * ((one - fx) * (f[i10] - f[i00]) + fx * (f[i11] - f[i01]));
                        }
                    }
                    if let Some(gc) = gc.as_mut() {
                        let d = gc.data_mut();
                        // Upper taps collapse onto lower ones at the far edge,
                        // so the difference terms vanish there as required.
                        if !clamp_x {
                            d[(ni * COORD_CHANNELS + 2 * j) * hw + p] = dx;
                        }
                        if !clamp_y {
                            d[(ni * COORD_CHANNELS + 2 * j + 1) * hw + p] = dy;
                        }
                    }
                }
            }
        }
        vec![gx, gc]
    }
}

impl<T: Scalar> Graph<'_, T> {
    /// Absolute chain coordinates `(N, 18, H, W)` from step components
    /// `(N, 16, H, W)`.
    pub fn chain_coords(&mut self, steps: NodeId) -> Result<NodeId> {
        let vs = self.value(steps);
        let [n, c, h, w] = vs.dims();
        if c != STEP_CHANNELS {
            return Err(Error::contract("chain_coords", format!("expected 16 step channels, got {}", vs.shape())));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(Shape::nchw(n, COORD_CHANNELS, h, w));
        let sd = vs.data();
        for ni in 0..n {
            for p in 0..hw {
                let (py, px) = (p / w, p % w);
                let chain = chain_at(|k| sd[(ni * STEP_CHANNELS + k) * hw + p], T::lit(px as f64), T::lit(py as f64));
                for (j, (x, y)) in chain.into_iter().enumerate() {
                    out.data_mut()[(ni * COORD_CHANNELS + 2 * j) * hw + p] = x;
                    out.data_mut()[(ni * COORD_CHANNELS + 2 * j + 1) * hw + p] = y;
                }
            }
        }
        Ok(self.record(out, &[steps], ChainBack))
    }

    /// Bilinear samples of `x` at every chain point, `(N, Cin * 9, H, W)`
    /// with channel `ci * 9 + j`. Points are clamped to the grid; a clamped
    /// coordinate receives no gradient.
    pub fn snake_sample(&mut self, x: NodeId, coords: NodeId) -> Result<NodeId> {
        let (vx, vc) = (self.value(x), self.value(coords));
        let [n, cin, h, w] = vx.dims();
        if !vc.shape().same_dims(&Shape::nchw(n, COORD_CHANNELS, h, w)) {
            return Err(Error::ShapeMismatch {
                op: "snake_sample",
                lhs: vx.shape(),
                rhs: vc.shape(),
            });
        }
        if !vc.all_finite() {
            return Err(Error::contract("snake_sample", "non-finite sampling coordinate"));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(Shape::nchw(n, cin * CHAIN_LEN, h, w));
        for ni in 0..n {
            for j in 0..CHAIN_LEN {
                for p in 0..hw {
                    let cx = vc.data()[(ni * COORD_CHANNELS + 2 * j) * hw + p];
                    let cy = vc.data()[(ni * COORD_CHANNELS + 2 * j + 1) * hw + p];
                    let (x0, x1, fx, _) = taps(cx, w);
                    let (y0, y1, fy, _) = taps(cy, h);
                    let one = T::one();
                    let (w00, w01, w10, w11) = ((one - fy) * (one - fx), (one - fy) * fx, fy * (one - fx), fy * fx);
                    for ci in 0..cin {
                        let f = &vx.data()[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
                        let v = w00 * f[y0 * w + x0] + w01 * f[y0 * w + x1] + w10 * f[y1 * w + x0] + w11 * f[y1 * w + x1];
                        out.data_mut()[((ni * cin + ci) * CHAIN_LEN + j) * hw + p] = v;
                    }
                }
            }
        }
        Ok(self.record(out, &[x, coords], SampleBack))
    }
}
