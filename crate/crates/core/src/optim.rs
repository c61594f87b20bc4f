//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::{Error, ParamStore, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// First and second moment estimates per parameter, created lazily at zero.
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of completed updates.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Every gradient is checked for finiteness before
    /// any parameter changes, so a failed step leaves the state untouched.
    /// Parameters without a gradient entry are left unchanged.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if !p.shape().same_dims(&g.shape()) {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let decay = T::lit(1.0 - c.lr * c.weight_decay);
        let lr_t = T::lit(c.lr / bc1);
        let sqrt_bc2 = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let n = p.numel();
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            for (((x, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mo.m.iter_mut())
                .zip(mo.v.iter_mut())
            {
                *x *= decay;
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                *x -= lr_t * *m / ((*v).sqrt() / sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Shape;

    fn single(value: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::full(Shape::new(&[1]), value)).unwrap();
        p
    }

    fn grad(value: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("theta".to_string(), Tensor::full(Shape::new(&[1]), value))])
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = single(0.37);
        let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..5 {
            opt.step(&mut p, &grad(0.0)).unwrap();
        }
        assert_eq!(p.get("theta").unwrap().data()[0], 0.37);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.02, 250.0] {
            let mut p = single(1.0);
            let cfg = AdamConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() };
            Adam::new(cfg).step(&mut p, &grad(g)).unwrap();
            let delta = p.get("theta").unwrap().data()[0] - 1.0;
            assert!((delta + 1e-3 * g.signum()).abs() < 1e-8, "g {g}: delta {delta}");
        }
    }

    #[test]
    fn quadratic_converges_like_scalar_simulation() {
        // Independent scalar recurrence of the same update rule.
        let (lr, target) = (0.1, 0.25);
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * (th - target);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= lr * mh / (vh.sqrt() + 1e-8);
        }
        let mut p = single(1.0);
        let mut opt = Adam::new(AdamConfig { lr, weight_decay: 0.0, ..Default::default() });
        for _ in 0..100 {
            let x = p.get("theta").unwrap().data()[0];
            opt.step(&mut p, &grad(2.0 * (x - target))).unwrap();
        }
        let x = p.get("theta").unwrap().data()[0];
        assert!((x - target).abs() < 1e-2, "theta {x}");
        assert!((x - th).abs() < 1e-9, "tensor {x} vs scalar {th}");
        assert_eq!(opt.steps(), 100);
    }

    #[test]
    fn decoupled_decay_shrinks_before_update() {
        let mut p = single(2.0);
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        Adam::new(cfg).step(&mut p, &grad(0.0)).unwrap();
        assert!((p.get("theta").unwrap().data()[0] - 2.0 * 0.95).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut p = single(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        let err = opt.step(&mut p, &grad(f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "theta"), "{err}");
        assert_eq!(p.get("theta").unwrap().data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }
}
