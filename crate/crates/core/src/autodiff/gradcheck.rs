//! Central-difference verification of tape gradients.

use super::{GraphResult, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are judged by absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !(p.max_rel_error < self.tolerance))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn evaluate<S, F>(f: &F, params: &[Tensor<S>], prepare: impl Fn(&mut Tape<S>)) -> GraphResult<(Tape<S>, Vec<Var>, Var)>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> GraphResult<Var>,
{
    let mut tape = Tape::new();
    prepare(&mut tape);
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.shape.clone(), p.data.clone()))
        .collect::<GraphResult<Vec<_>>>()?;
    let root = f(&mut tape, &vars)?;
    Ok((tape, vars, root))
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `eps`, for every entry of every parameter.
///
/// `f` must be deterministic: it is rebuilt twice per perturbed entry.
pub fn grad_check<S, F>(f: F, params: &[Tensor<S>], eps: f64, tol: f64) -> GraphResult<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> GraphResult<Var>,
{
    grad_check_with(f, params, eps, tol, |_| {})
}

/// As [`grad_check`], with a hook that configures each fresh tape before the
/// graph is built (used to inject faults for negative controls).
pub fn grad_check_with<S, F>(
    f: F,
    params: &[Tensor<S>],
    eps: f64,
    tol: f64,
    prepare: impl Fn(&mut Tape<S>),
) -> GraphResult<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> GraphResult<Var>,
{
    let (mut tape, vars, root) = evaluate(&f, params, &prepare)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).iter().map(|g| g.to_f64_lossy()).collect())
        .collect();
    drop(tape);

    let mut work: Vec<Tensor<S>> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, grads) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            index: pi,
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..grads.len() {
            let original = work[pi].data[k];
            work[pi].data[k] = original + S::lit(eps);
            let (t, _, r) = evaluate(&f, &work, &prepare)?;
            let up = t.scalar(r).to_f64_lossy();
            work[pi].data[k] = original - S::lit(eps);
            let (t, _, r) = evaluate(&f, &work, &prepare)?;
            let down = t.scalar(r).to_f64_lossy();
            work[pi].data[k] = original;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(grads[k], numeric);
            if !(err <= check.max_rel_error) {
                check = ParamCheck {
                    index: pi,
                    max_rel_error: err,
                    worst_entry: k,
                    analytic: grads[k],
                    numeric,
                };
            }
        }
        checks.push(check);
    }
    Ok(GradCheckReport {
        tolerance: tol,
        params: checks,
    })
}
