//! Central finite-difference gradient checks.

use crate::tape::{Tape, Var};
use crate::tensor::{AutodiffError, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(tensor index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    tape.scalar(out)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, for every element of every tensor.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    grad_check_subset(f, params, h, usize::MAX)
}

/// As [`grad_check`], probing at most `per_tensor` evenly spaced elements
/// of each tensor.
pub fn grad_check_subset<F>(f: F, params: &[Tensor], h: f64, per_tensor: usize) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut params: Vec<Tensor> = params.iter().cloned().map(Tensor::trainable).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for ti in 0..params.len() {
        let n = params[ti].numel();
        let analytic = grads.get(vars[ti]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let count = n.min(per_tensor.max(1));
        for j in 0..count {
            let e = if count == n { j } else { j * n / count };
            let orig = params[ti].data[e];
            params[ti].data[e] = orig + h;
            let fp = eval(&f, &params)?;
            params[ti].data[e] = orig - h;
            let fm = eval(&f, &params)?;
            params[ti].data[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = rel_err(analytic[e], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, e));
                report.analytic = analytic[e];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
