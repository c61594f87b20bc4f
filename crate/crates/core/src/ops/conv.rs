use crate::{BackwardOp, Error, Graph, NodeId, Result, Scalar, Shape, Tensor};

/// Geometry of a grouped 2-D convolution with zero padding.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the unfolded patch matrix per group.
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox * stride + kj - pad` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride as isize, self.pad as isize, self.w as isize);
        let off = kj as isize - p;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = if w - 1 - off < 0 { 0 } else { (w - 1 - off) / s + 1 };
        (lo.max(0) as usize, (hi as usize).min(self.wo).max(lo.max(0) as usize))
    }

    fn im2col<T: Scalar>(&self, x: &[T], group: usize, cols: &mut [T]) {
        let p = self.p();
        let c0 = group * self.cin_g();
        for ci in 0..self.cin_g() {
            let plane = &x[(c0 + ci) * self.h * self.w..(c0 + ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let ix0 = (lo * self.stride + kj) - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (t, ox) in (lo..hi).enumerate() {
                                line[ox] = src[ix0 + t * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], group: usize, dx: &mut [T]) {
        let p = self.p();
        let c0 = group * self.cin_g();
        for ci in 0..self.cin_g() {
            let plane = &mut dx[(c0 + ci) * self.h * self.w..(c0 + ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kj);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &src[oy * self.wo..(oy + 1) * self.wo];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let ix0 = (lo * self.stride + kj) - self.pad;
                        for (t, ox) in (lo..hi).enumerate() {
                            dst[ix0 + t * self.stride] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dBack {
    geom: ConvGeom,
    has_bias: bool,
}

impl<T: Scalar> BackwardOp<T> for Conv2dBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = self.geom;
        let (x, w) = (inputs[0], inputs[1]);
        let (k, p, cog) = (g.k(), g.p(), g.cout_g());
        let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
        let mut db = (self.has_bias && needs[2]).then(|| Tensor::zeros(inputs[2].shape()));
        let mut cols = vec![T::zero(); if g.pointwise() { 0 } else { k * p }];
        let mut dcols = vec![T::zero(); if dx.is_some() { k * p } else { 0 }];
        let x_stride = g.cin * g.h * g.w;
        let y_stride = g.cout * p;
        for n in 0..g.n {
            let xn = &x.data()[n * x_stride..(n + 1) * x_stride];
            let gy = &grad.data()[n * y_stride..(n + 1) * y_stride];
            for grp in 0..g.groups {
                let gy_g = &gy[grp * cog * p..(grp + 1) * cog * p];
                let w_g = &w.data()[grp * cog * k..(grp + 1) * cog * k];
                if let Some(dw) = dw.as_mut() {
                    let src: &[T] = if g.pointwise() {
                        &xn[grp * k * p..(grp + 1) * k * p]
                    } else {
                        g.im2col(xn, grp, &mut cols);
                        &cols
                    };
                    let dw_g = &mut dw.data_mut()[grp * cog * k..(grp + 1) * cog * k];
                    T::gemm(cog, p, k, T::one(), gy_g, p, 1, src, 1, p, T::one(), dw_g, k, 1);
                }
                if let Some(dx) = dx.as_mut() {
                    T::gemm(k, cog, p, T::one(), w_g, 1, k, gy_g, p, 1, T::zero(), &mut dcols, p, 1);
                    let dxn = &mut dx.data_mut()[n * x_stride..(n + 1) * x_stride];
                    if g.pointwise() {
                        for (d, &s) in dxn[grp * k * p..(grp + 1) * k * p].iter_mut().zip(&dcols) {
                            *d += s;
                        }
                    } else {
                        g.col2im(&dcols, grp, dxn);
                    }
                }
            }
            if let Some(db) = db.as_mut() {
                for co in 0..g.cout {
                    db.data_mut()[co] += gy[co * p..(co + 1) * p].iter().copied().sum::<T>();
                }
            }
        }
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(db);
        }
        out
    }
}

impl<T: Scalar> Graph<'_, T> {
    /// Grouped 2-D convolution with zero padding.
    ///
    /// `weight` has shape `(Cout, Cin / groups, kh, kw)`; `bias`, when given,
    /// has `Cout` elements.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(weight));
        let [n, cin, h, w] = vx.dims();
        let [cout, cin_g, kh, kw] = vw.dims();
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: vx.shape(),
            rhs: vw.shape(),
        };
        if groups == 0 || stride == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
            return Err(mismatch());
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::contract(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}", vx.shape()),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != cout {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vw.shape(),
                    rhs: self.value(b).shape(),
                });
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            groups,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let (k, p, cog) = (geom.k(), geom.p(), geom.cout_g());
        let mut out = Tensor::zeros(Shape::nchw(n, cout, geom.ho, geom.wo));
        let mut cols = vec![T::zero(); if geom.pointwise() { 0 } else { k * p }];
        let x_stride = cin * h * w;
        for ni in 0..n {
            let xn = &vx.data()[ni * x_stride..(ni + 1) * x_stride];
            for grp in 0..groups {
                let src: &[T] = if geom.pointwise() {
                    &xn[grp * k * p..(grp + 1) * k * p]
                } else {
                    geom.im2col(xn, grp, &mut cols);
                    &cols
                };
                let w_g = &vw.data()[grp * cog * k..(grp + 1) * cog * k];
                let off = (ni * cout + grp * cog) * p;
                let dst = &mut out.data_mut()[off..off + cog * p];
                T::gemm(cog, k, p, T::one(), w_g, k, 1, src, p, 1, T::zero(), dst, p, 1);
            }
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for (co, &b) in bd.iter().enumerate() {
                    let off = (ni * cout + co) * p;
                    for v in &mut out.data_mut()[off..off + p] {
                        *v += b;
                    }
                }
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(
            out,
            &inputs,
            Conv2dBack {
                geom,
                has_bias: bias.is_some(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testutil::{check_inputs, random};

    /// Direct nested-loop grouped convolution.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, p: usize, groups: usize) -> Tensor<f64> {
        let [n, _, h, wd] = x.dims();
        let [cout, cig, kh, kw] = w.dims();
        let (ho, wo) = ((h + 2 * p - kh) / s + 1, (wd + 2 * p - kw) / s + 1);
        let cog = cout / groups;
        Tensor::from_fn(Shape::nchw(n, cout, ho, wo), |[ni, co, oy, ox]| {
            let grp = co / cog;
            let mut acc = b.map_or(0.0, |b| b.data()[co]);
            for ci in 0..cig {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let iy = (oy * s + ki) as isize - p as isize;
                        let ix = (ox * s + kj) as isize - p as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        acc += x.at([ni, grp * cig + ci, iy as usize, ix as usize]) * w.at([co, ci, ki, kj]);
                    }
                }
            }
            acc
        })
    }

    fn run(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, p: usize, groups: usize) -> Tensor<f64> {
        let mut g = Graph::new();
        let (xi, wi) = (g.constant(x.clone()), g.constant(w.clone()));
        let bi = b.map(|b| g.constant(b.clone()));
        let y = g.conv2d(xi, wi, bi, s, p, groups).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn ones_kernel_center_sums_nine() {
        let x = Tensor::full(Shape::nchw(1, 1, 3, 3), 1.0);
        let w = Tensor::full(Shape::nchw(1, 1, 3, 3), 1.0);
        let b = Tensor::zeros(Shape::new(&[1]));
        let y = run(&x, &w, Some(&b), 1, 1, 1);
        assert_eq!(y.at([0, 0, 1, 1]), 9.0);
        assert_eq!(y.at([0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = random::<f64>(&[2, 3, 5, 7], 1);
        let w = Tensor::from_fn(Shape::nchw(3, 3, 3, 3), |[o, i, a, b]| f64::from(u8::from(o == i && a == 1 && b == 1)));
        assert_eq!(run(&x, &w, None, 1, 1, 1), x);
    }

    #[test]
    fn matches_nested_loops() {
        let x = random::<f64>(&[2, 3, 8, 8], 2);
        let w = random::<f64>(&[4, 3, 3, 3], 3);
        let b = random::<f64>(&[4], 4);
        assert!(run(&x, &w, Some(&b), 1, 1, 1).max_abs_diff(&naive(&x, &w, Some(&b), 1, 1, 1)) < 1e-5);
        for (k, s, p, groups) in [(3, 2, 1, 1), (7, 4, 3, 1), (1, 1, 0, 1), (3, 1, 1, 3), (5, 1, 2, 1), (2, 2, 0, 1)] {
            let cin = 3;
            let w = random::<f64>(&[6, cin / groups, k, k], 5);
            let want = naive(&x, &w, None, s, p, groups);
            assert!(run(&x, &w, None, s, p, groups).max_abs_diff(&want) < 1e-12, "k={k} s={s} p={p} g={groups}");
        }
    }

    #[test]
    fn f32_matches_f64_oracle() {
        let x = random::<f64>(&[2, 3, 8, 8], 6);
        let w = random::<f64>(&[4, 3, 3, 3], 7);
        let want = naive(&x, &w, None, 1, 1, 1);
        let mut g = Graph::<f32>::new();
        let (xi, wi) = (g.constant(x.cast()), g.constant(w.cast()));
        let y = g.conv2d(xi, wi, None, 1, 1, 1).unwrap();
        assert!(g.value(y).cast::<f64>().max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::nchw(1, 2, 4, 4)));
        let w = g.constant(Tensor::zeros(Shape::nchw(1, 3, 3, 3)));
        let msg = g.conv2d(x, w, None, 1, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("(1, 2, 4, 4)") && msg.contains("(1, 3, 3, 3)"), "{msg}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (k, s, p, groups, cin, cout) in [(3, 1, 1, 1, 3, 2), (3, 2, 1, 1, 2, 2), (1, 1, 0, 1, 4, 3), (3, 1, 1, 4, 4, 4), (7, 4, 3, 1, 1, 2)] {
            let x = random(&[2, cin, 8, 8], 10);
            let w = random(&[cout, cin / groups, k, k], 11);
            let b = random(&[cout], 12);
            check_inputs("conv2d", &[x, w, b], |g, ids| g.conv2d(ids[0], ids[1], Some(ids[2]), s, p, groups));
        }
    }
}
