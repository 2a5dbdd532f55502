//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;

use crate::error::{Error, Result};

use super::params::ParameterSet;
use super::rng::SeedTree;
use super::tape::{Tape, Var};

/// Options for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step of the five-point stencil.
    pub eps: f64,
    /// Tensors with more elements than this are checked on a random subset
    /// of exactly this many elements.
    pub max_elements_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 3e-5,
            max_elements_per_tensor: 200,
            seed: 0,
        }
    }
}

/// Result of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients with fourth-order central differences
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h` for every checked
/// element. The higher order matters near sharply curved points such as
/// layer norms over two elements. `model` records the loss on the provided tape and returns it.
///
/// The relative error of one element is `|a − n| / max(1e-8, |a| + |n|)`.
/// Runs that record a stochastic op (active dropout) are rejected.
pub fn grad_check<F>(mut model: F, params: &ParameterSet<f64>, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterSet<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.set_check_finite(true);
    let loss = model(params, &mut tape)?;
    if tape.has_stochastic_ops() {
        return Err(Error::Argument(
            "gradient check requires dropout to be disabled".into(),
        ));
    }
    let base = tape.value(loss).item();
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss is {base}")));
    }
    let grads = tape.backward(loss)?;
    let mut analytic = params.clone();
    analytic.zero_grad();
    grads.accumulate_into(&mut analytic);

    let eval = |model: &mut F, p: &ParameterSet<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = model(p, &mut t)?;
        let v = t.value(l).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("perturbed loss is {v}")));
        }
        Ok(v)
    };

    let seeds = SeedTree::new(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for id in params.ids() {
        let n = params.get(id).value.len();
        let indices: Vec<usize> = if n <= opts.max_elements_per_tensor {
            (0..n).collect()
        } else {
            let mut rng = seeds.stream(&[id.0 as u64]);
            let mut v = sample(&mut rng, n, opts.max_elements_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for i in indices {
            let orig = params.get(id).value.data()[i];
            let mut at = |delta: f64| -> Result<f64> {
                work.get_mut(id).value.data_mut()[i] = orig + delta;
                eval(&mut model, &work)
            };
            let h = opts.eps;
            let near = at(h)? - at(-h)?;
            let far = at(2.0 * h)? - at(-2.0 * h)?;
            work.get_mut(id).value.data_mut()[i] = orig;

            let numeric = (8.0 * near - far) / (12.0 * h);
            let a = analytic.get(id).grad.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((params.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
