//! Central finite-difference checks of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Floor of the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct WorstEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst: Option<WorstEntry>,
    /// Number of entries compared.
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Check at most this many evenly spaced entries of each input.
    pub max_entries_per_input: Option<usize>,
    /// Multiplies every analytic gradient by `1 + corrupt_analytic`.
    /// Only used to exercise the harness's failure path.
    pub corrupt_analytic: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: DEFAULT_STEP,
            max_entries_per_input: None,
            corrupt_analytic: 0.0,
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Maximum relative error between the tape gradient of the scalar `f` at
/// `x` and central differences with the given step.
pub fn gradcheck<F>(f: F, x: &Tensor, step: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let opts = GradcheckOptions {
        step,
        ..Default::default()
    };
    gradcheck_inputs(|g, vars| f(g, vars[0]), std::slice::from_ref(x), &opts)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar(&g, out)
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let value = g.value(v);
    if value.len() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck needs a scalar function, got output shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}

/// Multi-input variant of [`gradcheck`].
pub fn gradcheck_inputs<F>(f: F, inputs: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::Usage(format!("step must be positive, got {}", opts.step)));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar(&g, out)?;
    let grads = g.backward(out)?;
    drop(g);

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let n = inputs[input].len();
        let picks: Vec<usize> = match opts.max_entries_per_input {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        for idx in picks {
            let orig = inputs[input].data()[idx];
            probe[input].data_mut()[idx] = orig + opts.step;
            let plus = evaluate(&f, &probe)?;
            probe[input].data_mut()[idx] = orig - opts.step;
            let minus = evaluate(&f, &probe)?;
            probe[input].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[idx] * (1.0 + opts.corrupt_analytic);
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(WorstEntry {
                    input,
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1 - 0.5);
        let r = gradcheck(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn sum_of_squares_closed_form() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let sq = g.mul(v, v).unwrap();
        let loss = g.sum(sq);
        assert_eq!(g.backward(loss).unwrap().get(v).data(), &[2.0, 4.0]);
        let r = gradcheck(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn non_scalar_output_is_usage_error() {
        let x = Tensor::ones(&[2]);
        let err = gradcheck(|_, x| Ok(x), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn corruption_is_detected() {
        let x = Tensor::from_fn(&[4], |i| i as f64 + 1.0);
        let opts = GradcheckOptions {
            corrupt_analytic: 1e-3,
            ..Default::default()
        };
        let r = gradcheck_inputs(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            &opts,
        )
        .unwrap();
        assert!(r.max_rel_error > 5e-4);
    }
}
