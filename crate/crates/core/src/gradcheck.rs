//! Central finite-difference verification of taped gradients.

use crate::error::{Result, StetError};
use crate::tensor::{NamedTensor, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Perturbation applied on each side of a coordinate.
    pub step: f64,
    pub rel_tol: f64,
    /// Gradient magnitudes below this are compared on an absolute basis.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Relative discrepancy `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn eval<F>(params: &[NamedTensor], f: &mut F, with_grad: bool) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(i, &p.tensor))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.scalar(loss);
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.tensor.numel()])
        })
        .collect();
    Ok((value, grads))
}

/// Compares taped gradients of the scalar built by `f` against central
/// differences for every coordinate of every parameter.
///
/// `f` receives one tape variable per entry of `params`, in order, and must be
/// deterministic.
pub fn finite_diff_check<F>(
    params: &mut [NamedTensor],
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let (base, grads) = eval(params, &mut f, true)?;
    if !base.is_finite() {
        return Err(StetError::NumericInstability { path: "loss".into() });
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    for p in 0..params.len() {
        for i in 0..params[p].tensor.numel() {
            let analytic = grads[p][i];
            let orig = params[p].tensor.data()[i];
            params[p].tensor.data_mut()[i] = orig + opts.step;
            let plus = eval(params, &mut f, false)?.0;
            params[p].tensor.data_mut()[i] = orig - opts.step;
            let minus = eval(params, &mut f, false)?.0;
            params[p].tensor.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() || !analytic.is_finite() {
                return Err(StetError::NumericInstability {
                    path: format!("{}[{i}]", params[p].name),
                });
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic, numeric, opts.abs_floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params[p].name.clone(), i));
            }
        }
    }
    report.passed = report.max_rel_error < opts.rel_tol;
    Ok(report)
}
