//! Cross-entropy plus soft Dice over two-class logits.

use crate::{BackwardOp, Error, Graph, NodeId, Result, Scalar, Shape, Tensor};

/// Smoothing term of the Dice ratio.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents {
    pub cross_entropy: f64,
    pub dice: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.cross_entropy + self.dice
    }
}

/// Per-pixel softmax probabilities of both classes, in pixel order.
fn probabilities<T: Scalar>(logits: &Tensor<T>) -> Vec<(T, T)> {
    let [n, _, h, w] = logits.dims();
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for ni in 0..n {
        for p in 0..hw {
            let (z0, z1) = (d[ni * 2 * hw + p], d[(ni * 2 + 1) * hw + p]);
            let m = z0.max(z1);
            let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
            let s = e0 + e1;
            out.push((e0 / s, e1 / s));
        }
    }
    out
}

fn check<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    let [n, c, h, w] = logits.dims();
    if c != 2 || !target.shape().same_dims(&Shape::nchw(n, 1, h, w)) {
        return Err(Error::ShapeMismatch {
            op: "seg_loss",
            lhs: logits.shape(),
            rhs: target.shape(),
        });
    }
    if target.data().iter().any(|&g| g != T::zero() && g != T::one()) {
        return Err(Error::contract("seg_loss", "target values must be 0 or 1"));
    }
    Ok(())
}

/// Log-probability of the target class, stable for saturated logits.
fn log_prob<T: Scalar>(z_target: T, z_other: T) -> T {
    let d = z_other - z_target;
    // -log(1 + e^d)
    if d > T::zero() {
        -(d + (-d).exp().ln_1p())
    } else {
        -d.exp().ln_1p()
    }
}

fn components<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> (T, T, Vec<(T, T)>) {
    let [n, _, h, w] = logits.dims();
    let hw = h * w;
    let probs = probabilities(logits);
    let d = logits.data();
    let mut ce = T::zero();
    let (mut spg, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
    for ni in 0..n {
        for p in 0..hw {
            let (z0, z1) = (d[ni * 2 * hw + p], d[(ni * 2 + 1) * hw + p]);
            let g = target.data()[ni * hw + p];
            ce -= if g == T::one() { log_prob(z1, z0) } else { log_prob(z0, z1) };
            let p1 = probs[ni * hw + p].1;
            spg += p1 * g;
            sp += p1;
            sg += g;
        }
    }
    let pixels = T::lit((n * hw) as f64);
    let eps = T::lit(DICE_EPS);
    let dice = T::one() - (T::lit(2.0) * spg + eps) / (sp + sg + eps);
    (ce / pixels, dice, probs)
}

/// Evaluates the loss without recording it.
pub fn loss_components<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<LossComponents> {
    check(logits, target)?;
    let (ce, dice, _) = components(logits, target);
    Ok(LossComponents {
        cross_entropy: ce.to_f64(),
        dice: dice.to_f64(),
    })
}

struct SegLossBack<T> {
    target: Tensor<T>,
    probs: Vec<(T, T)>,
}

impl<T: Scalar> BackwardOp<T> for SegLossBack<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let logits = inputs[0];
        let [n, _, h, w] = logits.dims();
        let hw = h * w;
        let gt = self.target.data();
        let (mut spg, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
        for (&(_, p1), &g) in self.probs.iter().zip(gt) {
            spg += p1 * g;
            sp += p1;
            sg += g;
        }
        let eps = T::lit(DICE_EPS);
        let two = T::lit(2.0);
        let num = two * spg + eps;
        let den = sp + sg + eps;
        let inv_pixels = T::one() / T::lit((n * hw) as f64);
        let scale = grad.data()[0];
        let mut gx = Tensor::zeros(logits.shape());
        for ni in 0..n {
            for p in 0..hw {
                let i = ni * hw + p;
                let (p0, p1) = self.probs[i];
                let g = gt[i];
                // d(CE)/dz1 = p1 - g; d(CE)/dz0 = p0 - (1 - g) = -(p1 - g).
                let dce = (p1 - g) * inv_pixels;
                // d(Dice)/dp1, then through dp1/dz1 = p0 p1 = -dp1/dz0.
                let ddice = -(two * g * den - num) / (den * den) * p0 * p1;
                let dz1 = (dce + ddice) * scale;
                gx.data_mut()[(ni * 2 + 1) * hw + p] = dz1;
                gx.data_mut()[ni * 2 * hw + p] = -dz1;
            }
        }
        vec![Some(gx)]
    }
}

impl<T: Scalar> Graph<'_, T> {
    /// Mean pixel cross-entropy plus soft Dice on the foreground
    /// probability, summed with equal weights. `logits` is `(N, 2, H, W)`
    /// with channel 1 the foreground class; `target` is `(N, 1, H, W)` in
    /// `{0, 1}`. Dice sums run over the whole batch.
    pub fn seg_loss(&mut self, logits: NodeId, target: Tensor<T>) -> Result<NodeId> {
        let vl = self.value(logits);
        check(vl, &target)?;
        let (ce, dice, probs) = components(vl, &target);
        Ok(self.record(Tensor::scalar(ce + dice), &[logits], SegLossBack { target, probs }))
    }
}
