use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{HseError, Result};

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_error: f64,
    /// `(param index, flat entry, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(HseError::Evaluation(format!(
            "checked function must return a scalar, got {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(HseError::Evaluation(format!(
            "function value is not finite: {v}"
        )));
    }
    Ok((v, tape.branch_signature()))
}

/// Smallest step tried when a probe crosses a ReLU or clamp boundary.
pub const MIN_FD_STEP: f64 = 1e-6;

/// Checks every entry of every parameter: `(f(θ+ε) − f(θ−ε)) / 2ε` against
/// the reverse-mode gradient. When either probe lands on a different
/// piecewise branch than the base point, ε is halved (down to
/// [`MIN_FD_STEP`]) for that entry.
pub fn check_gradients<F>(
    f: F,
    params: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(MIN_FD_STEP..=1e-4).contains(&eps) {
        return Err(HseError::Argument(format!(
            "finite-difference step {eps} outside [1e-6, 1e-4]"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(HseError::Evaluation(format!(
            "function value is not finite: {value}"
        )));
    }
    let base_branches = tape.branch_signature();
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        entries_checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance: tol,
    };
    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .wrt(vars[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
        for e in 0..p.len() {
            let orig = p.data()[e];
            let mut step = eps;
            let numeric = loop {
                probe[pi].data_mut()[e] = orig + step;
                let (plus, sp) = evaluate(&f, &probe)?;
                probe[pi].data_mut()[e] = orig - step;
                let (minus, sm) = evaluate(&f, &probe)?;
                probe[pi].data_mut()[e] = orig;
                let smooth = sp == base_branches && sm == base_branches;
                if smooth || step <= MIN_FD_STEP {
                    break (plus - minus) / (2.0 * step);
                }
                step = (step / 2.0).max(MIN_FD_STEP);
            };
            let a = analytic.data()[e];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, e, a, numeric));
            }
        }
    }
    Ok(report)
}
