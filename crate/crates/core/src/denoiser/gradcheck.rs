use super::model::{loss_and_gradients, training_loss, DenoiserParams, TrainSample};
use super::schedule::NoiseSchedule;
use super::DenoiserError;

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
///
/// The floor keeps gradients that are zero up to round-off from dominating.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares every parameter's analytic gradient with `(L(p+h) - L(p-h)) / 2h`.
pub fn gradient_check(
    sample: &TrainSample,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    h: f64,
) -> Result<GradCheckReport, DenoiserError> {
    let (_, grads) = loss_and_gradients(sample, params, sched)?;
    let mut report = GradCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
    };
    let mut probe = params.clone();
    for (ti, name) in params.names().iter().enumerate() {
        for e in 0..params.tensors()[ti].len() {
            let orig = params.tensors()[ti].data()[e];
            probe.tensors_mut()[ti].data_mut()[e] = orig + h;
            let plus = training_loss(sample, &probe, sched)?;
            probe.tensors_mut()[ti].data_mut()[e] = orig - h;
            let minus = training_loss(sample, &probe, sched)?;
            probe.tensors_mut()[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grads[ti].data()[e], numeric, 1e-6);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_parameter = name.clone();
                report.worst_index = e;
            }
        }
    }
    Ok(report)
}
