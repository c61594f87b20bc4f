//! Loop-level reference implementations that share no code with the engine.
//! Tensors are flat row-major `Vec<f64>` with explicit dims.

#![allow(dead_code)]

use std::collections::BTreeSet;

/// `(N, C, H, W)` array.
#[derive(Clone, Debug)]
pub struct Array4 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Array4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Array4 { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.dims;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let [_, cc, h, w] = self.dims;
        self.data[((n * cc + c) * h + y) * w + x] = v;
    }
}

/// Chain weights `(Cout, Cin, 9)` and bias `(Cout)`.
#[derive(Clone, Debug)]
pub struct ChainWeights {
    pub cout: usize,
    pub cin: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ChainWeights {
    pub fn w(&self, o: usize, i: usize, j: usize) -> f64 {
        self.weight[(o * self.cin + i) * 9 + j]
    }
}

/// 1x9 (horizontal) or 9x1 (vertical) convolution whose taps beyond the
/// border read the nearest edge pixel.
pub fn clamped_line_conv(x: &Array4, cw: &ChainWeights, horizontal: bool) -> Array4 {
    let [n, cin, h, w] = x.dims;
    let mut out = Array4::zeros([n, cw.cout, h, w]);
    for b in 0..n {
        for o in 0..cw.cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = cw.bias[o];
                    for i in 0..cin {
                        for j in 0..9 {
                            let d = j as i64 - 4;
                            let (sy, sx) = if horizontal { (y as i64, xx as i64 + d) } else { (y as i64 + d, xx as i64) };
                            let sy = sy.clamp(0, h as i64 - 1) as usize;
                            let sx = sx.clamp(0, w as i64 - 1) as usize;
                            acc += cw.w(o, i, j) * x.at(b, i, sy, sx);
                        }
                    }
                    out.set(b, o, y, xx, acc);
                }
            }
        }
    }
    out
}

/// One pyramid level: a `k x k` kernel `(4, Cin, k, k)` and 4 biases.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub k: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Zero-padded `k x k` convolution of one batch element at one pixel.
fn level_response(x: &Array4, b: usize, level: &PyramidLevel, o: usize, y: usize, xx: usize) -> f64 {
    let [_, cin, h, w] = x.dims;
    let (k, pad) = (level.k, (level.k / 2) as i64);
    let mut acc = level.bias[o];
    for i in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let sy = y as i64 + ky as i64 - pad;
                let sx = xx as i64 + kx as i64 - pad;
                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                    continue;
                }
                acc += level.weight[((o * cin + i) * k + ky) * k + kx] * x.at(b, i, sy as usize, sx as usize);
            }
        }
    }
    acc
}

/// 1-D triangular interpolation weight between a point and a grid line.
fn tri(a: f64, b: f64) -> f64 {
    (1.0 - (a - b).abs()).max(0.0)
}

/// Bilinear value at `(px, py)` after clamping into the grid, summing the
/// separable kernel over every grid point.
fn interpolate(x: &Array4, b: usize, c: usize, px: f64, py: f64) -> f64 {
    let [_, _, h, w] = x.dims;
    let px = px.clamp(0.0, (w - 1) as f64);
    let py = py.clamp(0.0, (h - 1) as f64);
    let mut acc = 0.0;
    for gy in 0..h {
        for gx in 0..w {
            acc += tri(px, gx as f64) * tri(py, gy as f64) * x.at(b, c, gy, gx);
        }
    }
    acc
}

/// Chain points `K_{t-4} .. K_{t+4}` as `(x, y)` for the pixel `(y, x)`.
/// Level `c` holds steps `(dx+, dy+, dx-, dy-)` for distance `c + 1`.
pub fn snake_chain(steps: &[[f64; 4]; 4], y: usize, xx: usize) -> [(f64, f64); 9] {
    let mut pts = [(xx as f64, y as f64); 9];
    for c in 1..=4usize {
        let mut fwd = (xx as f64, y as f64);
        let mut bwd = (xx as f64, y as f64);
        for s in steps.iter().take(c) {
            fwd.0 += s[0];
            fwd.1 += s[1];
            bwd.0 -= s[2];
            bwd.1 -= s[3];
        }
        pts[4 + c] = fwd;
        pts[4 - c] = bwd;
    }
    pts
}

/// Full snake convolution: per-pixel pyramid offsets squashed by tanh,
/// bidirectional chain iteration, bilinear sampling and chain contraction.
pub fn naive_dsconv(x: &Array4, pyramid: &[PyramidLevel; 4], cw: &ChainWeights) -> Array4 {
    let [n, cin, h, w] = x.dims;
    let mut out = Array4::zeros([n, cw.cout, h, w]);
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut steps = [[0.0; 4]; 4];
                for (c, level) in pyramid.iter().enumerate() {
                    for (o, s) in steps[c].iter_mut().enumerate() {
                        *s = level_response(x, b, level, o, y, xx).tanh();
                    }
                }
                let chain = snake_chain(&steps, y, xx);
                for o in 0..cw.cout {
                    let mut acc = cw.bias[o];
                    for i in 0..cin {
                        for (j, &(px, py)) in chain.iter().enumerate() {
                            acc += cw.w(o, i, j) * interpolate(x, b, i, px, py);
                        }
                    }
                    out.set(b, o, y, xx, acc);
                }
            }
        }
    }
    out
}

/// Pixel metrics and Hausdorff distance from positive-pixel sets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetMetrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hausdorff: f64,
}

pub fn set_metrics(pred: &BTreeSet<(usize, usize)>, gt: &BTreeSet<(usize, usize)>, h: usize, w: usize) -> SetMetrics {
    let inter = pred.intersection(gt).count() as f64;
    let union = pred.union(gt).count() as f64;
    let (np, ng) = (pred.len() as f64, gt.len() as f64);
    let frac = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let (iou, precision, recall, f1) = if union == 0.0 {
        (1.0, 1.0, 1.0, 1.0)
    } else {
        (frac(inter, union), frac(inter, np), frac(inter, ng), frac(2.0 * inter, np + ng))
    };
    let dist = |a: &(usize, usize), b: &(usize, usize)| {
        let dy = a.0 as f64 - b.0 as f64;
        let dx = a.1 as f64 - b.1 as f64;
        (dy * dy + dx * dx).sqrt()
    };
    let directed = |from: &BTreeSet<(usize, usize)>, to: &BTreeSet<(usize, usize)>| {
        from.iter()
            .map(|a| to.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    let hausdorff = match (pred.is_empty(), gt.is_empty()) {
        (true, true) => 0.0,
        (false, false) => directed(pred, gt).max(directed(gt, pred)),
        _ => ((h * h + w * w) as f64).sqrt(),
    };
    SetMetrics { iou, precision, recall, f1, hausdorff }
}

/// CBAM channel attention: `sigmoid(MLP(avg) + MLP(max))` with a bias-free
/// `C -> hidden -> C` MLP, weights row-major `(out, in)`.
pub fn cbam_channel(x: &Array4, w0: &[f64], w1: &[f64], hidden: usize) -> Vec<Vec<f64>> {
    let [n, c, h, w] = x.dims;
    let mlp = |v: &[f64]| -> Vec<f64> {
        let mid: Vec<f64> = (0..hidden)
            .map(|k| (0..c).map(|i| w0[k * c + i] * v[i]).sum::<f64>().max(0.0))
            .collect();
        (0..c).map(|o| (0..hidden).map(|k| w1[o * hidden + k] * mid[k]).sum()).collect()
    };
    (0..n)
        .map(|b| {
            let mut avg = vec![0.0; c];
            let mut max = vec![f64::NEG_INFINITY; c];
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x.at(b, ch, y, xx);
                        avg[ch] += v / (h * w) as f64;
                        max[ch] = max[ch].max(v);
                    }
                }
            }
            let (a, m) = (mlp(&avg), mlp(&max));
            a.iter().zip(&m).map(|(a, m)| 1.0 / (1.0 + (-(a + m)).exp())).collect()
        })
        .collect()
}
