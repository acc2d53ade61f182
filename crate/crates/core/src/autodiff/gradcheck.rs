//! Central finite-difference verification of analytic gradients.

use super::tensor::{ParameterSet, Scalar, Tensor};

/// Worst coordinate found by [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Coordinates re-measured by the fine loss.
    pub refined: usize,
    /// Refined coordinates measured again at the reduced step.
    pub narrowed: usize,
}

/// `|a - n| / max(1e-12, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Coordinates whose 64-bit error reaches this are re-measured by the fine loss.
pub const REFINE_ABOVE: f64 = 1e-5;

/// Step reduction for a fine re-measurement that still disagrees: a ReLU or
/// max-pool input within `h` of its kink makes the `±h` difference straddle
/// the kink, and a step this much shorter steps off it.
pub const NARROW_FACTOR: f64 = 1e-3;

/// Compare `grad` against central differences of `loss` with step `h` on every
/// coordinate of `params`. The quotient uses the step actually taken after
/// rounding `x ± h`.
pub fn grad_check(
    params: &ParameterSet<f64>,
    h: f64,
    loss: impl Fn(&ParameterSet<f64>) -> f64,
    grad: impl Fn(&ParameterSet<f64>) -> Vec<Tensor<f64>>,
) -> GradCheckReport {
    run(params, h, &loss, None::<&dyn Fn(&ParameterSet<f64>) -> f64>, grad)
}

/// [`grad_check`], but a coordinate scoring at least [`REFINE_ABOVE`] is
/// re-differenced with `fine`, a loss evaluated in a wider type. If that still
/// scores at least [`REFINE_ABOVE`], it is differenced once more on `fine` with
/// step `h * NARROW_FACTOR`, and that value is final.
///
/// With `h = 1e-5` and a loss near 1, 64-bit rounding of each loss puts an
/// absolute floor of roughly 1e-11 on the difference quotient, so gradients
/// below about 1e-7 cannot be confirmed to 1e-4 in 64 bits alone.
pub fn grad_check_refined<L: Scalar>(
    params: &ParameterSet<f64>,
    h: f64,
    loss: impl Fn(&ParameterSet<f64>) -> f64,
    fine: impl Fn(&ParameterSet<f64>) -> L,
    grad: impl Fn(&ParameterSet<f64>) -> Vec<Tensor<f64>>,
) -> GradCheckReport {
    run(params, h, &loss, Some(&fine), grad)
}

fn central<L: Scalar>(
    probe: &mut ParameterSet<f64>,
    i: usize,
    j: usize,
    h: f64,
    loss: &dyn Fn(&ParameterSet<f64>) -> L,
) -> f64 {
    let orig = probe.tensor(i).data()[j];
    let (hi, lo) = (orig + h, orig - h);
    probe.tensor_mut(i).data_mut()[j] = hi;
    let up = loss(probe);
    probe.tensor_mut(i).data_mut()[j] = lo;
    let down = loss(probe);
    probe.tensor_mut(i).data_mut()[j] = orig;
    (up - down).ratio(L::of(hi) - L::of(lo)).to_f64()
}

fn run<L: Scalar>(
    params: &ParameterSet<f64>,
    h: f64,
    loss: &dyn Fn(&ParameterSet<f64>) -> f64,
    fine: Option<&dyn Fn(&ParameterSet<f64>) -> L>,
    grad: impl Fn(&ParameterSet<f64>) -> Vec<Tensor<f64>>,
) -> GradCheckReport {
    let analytic = grad(params);
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter");
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        parameter: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        refined: 0,
        narrowed: 0,
    };
    for i in 0..params.len() {
        for j in 0..params.tensor(i).len() {
            let a = analytic[i].data()[j];
            let mut numeric = central(&mut probe, i, j, h, loss);
            let mut err = relative_error(a, numeric);
            if let Some(fine) = fine.filter(|_| err >= REFINE_ABOVE) {
                numeric = central(&mut probe, i, j, h, fine);
                err = relative_error(a, numeric);
                report.refined += 1;
                if err >= REFINE_ABOVE {
                    numeric = central(&mut probe, i, j, h * NARROW_FACTOR, fine);
                    err = relative_error(a, numeric);
                    report.narrowed += 1;
                }
            }
            report.coordinates += 1;
            if err > report.max_rel_error || report.parameter.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.parameter = params.name(i).to_string();
                report.index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}
