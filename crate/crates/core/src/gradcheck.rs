//! Finite-difference verification of recorded backward rules.
//!
//! The unit under test maps input nodes to one output node. The scalar
//! objective is a fixed random projection `sum_i r_i * y_i`, so every
//! output element contributes with a distinct weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{BackwardOp, Error, Graph, NodeId, ParamStore, Result, Tensor};

/// Central-difference step.
pub const STEP: f64 = 1e-4;

/// Smaller central steps tried for entries that fail at [`STEP`]. A
/// nonsmooth point (ReLU, max selection, bilinear cell edge) inside the
/// stencil corrupts the difference quotient, while a wrong backward rule
/// fails at every step.
pub const REFINE_STEPS: [f64; 2] = [1e-5, 1e-6];

/// Magnitudes below this are compared in absolute rather than relative terms.
pub const ABS_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Checks at most this many entries of each tensor, spread evenly.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-3,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub unit: String,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Tensor holding the largest error, `input.<i>` or a parameter name.
    pub worst: String,
    pub entries: usize,
    /// Entries that needed a refined step to pass.
    pub refined: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn sample_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|i| i * len / m + (len / m) / 2).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares analytic and numeric gradients of `unit` with respect to every
/// input and every parameter in `params`.
pub fn grad_check<F>(
    name: &str,
    params: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    unit: F,
    options: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let (analytic_inputs, analytic_params, projection) = {
        let mut g = Graph::with_params(params);
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let y = unit(&mut g, &ids)?;
        let shape = g.value(y).shape();
        let r = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let loss = g.weighted_sum(y, r.clone())?;
        let grads = g.backward(loss)?;
        let gi: Vec<Tensor<f64>> = ids
            .iter()
            .zip(inputs)
            .map(|(&id, t)| grads.wrt(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (gi, grads.into_params(), r)
    };
    for (pname, g) in &analytic_params {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(pname.clone()));
        }
    }
    for (i, g) in analytic_inputs.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(format!("input.{i}")));
        }
    }

    let objective = |store: &ParamStore<f64>, xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let ids: Vec<NodeId> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let y = unit(&mut g, &ids)?;
        Ok(g.value(y)
            .data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut report = GradCheckReport {
        unit: name.to_string(),
        tolerance: options.tolerance,
        max_rel_error: 0.0,
        worst: String::new(),
        entries: 0,
        refined: 0,
    };
    let tolerance = options.tolerance;
    // `numeric(step)` is the central difference quotient at that step.
    let note = |report: &mut GradCheckReport, tensor: &str, a: f64, numeric: &mut dyn FnMut(f64) -> Result<f64>| -> Result<()> {
        let mut e = relative_error(a, numeric(STEP)?);
        if e > tolerance {
            for step in REFINE_STEPS {
                e = e.min(relative_error(a, numeric(step)?));
                if e <= tolerance {
                    report.refined += 1;
                    break;
                }
            }
        }
        report.entries += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e.max(report.max_rel_error);
            report.worst = tensor.to_string();
        }
        Ok(())
    };

    let mut xs = inputs.to_vec();
    for (i, analytic) in analytic_inputs.iter().enumerate() {
        let label = format!("input.{i}");
        for k in sample_indices(xs[i].numel(), options.max_entries) {
            let mut numeric = |step: f64| -> Result<f64> {
                let orig = xs[i].data()[k];
                xs[i].data_mut()[k] = orig + step;
                let plus = objective(params, &xs);
                xs[i].data_mut()[k] = orig - step;
                let minus = objective(params, &xs);
                xs[i].data_mut()[k] = orig;
                Ok((plus? - minus?) / (2.0 * step))
            };
            note(&mut report, &label, analytic.data()[k], &mut numeric)?;
        }
    }

    let mut store = params.clone();
    for (pname, analytic) in &analytic_params {
        for k in sample_indices(analytic.numel(), options.max_entries) {
            let mut numeric = |step: f64| -> Result<f64> {
                let orig = store.get(pname)?.data()[k];
                store.get_mut(pname)?.data_mut()[k] = orig + step;
                let plus = objective(&store, &xs);
                store.get_mut(pname)?.data_mut()[k] = orig - step;
                let minus = objective(&store, &xs);
                store.get_mut(pname)?.data_mut()[k] = orig;
                Ok((plus? - minus?) / (2.0 * step))
            };
            note(&mut report, pname, analytic.data()[k], &mut numeric)?;
        }
    }
    Ok(report)
}

/// Identity in the forward pass whose backward negates the gradient; wraps
/// a unit to confirm the checker rejects a wrong backward rule.
pub struct SignFlip;

impl BackwardOp<f64> for SignFlip {
    fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, grad: &Tensor<f64>, _: &[bool]) -> Vec<Option<Tensor<f64>>> {
        vec![Some(grad.map(|g| -g))]
    }
}

pub fn sign_flip(g: &mut Graph<'_, f64>, x: NodeId) -> NodeId {
    let v = g.value(x).clone();
    g.record(v, &[x], SignFlip)
}
