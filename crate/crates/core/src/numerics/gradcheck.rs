use super::param::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Precision;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Absolute floor on the relative-error denominator.
    pub floor: f64,
    /// Flip the sign of analytic gradients (negative control).
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `name[flat index]` of the worst coordinate.
    pub offending_parameter: Option<String>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: Option<(f64, f64)>,
    pub coordinates_checked: usize,
    pub passed: bool,
}

/// Relative error with an absolute floor of 1e-8 in the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, 1e-8)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(forward: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::F64);
    let root = forward(&mut tape, store)?;
    tape.value(root)
        .item()
        .ok_or_else(|| Error::NonScalarRoot(tape.value(root).shape().to_vec()))
}

/// Compares analytic gradients of a scalar-valued forward against central
/// differences over every coordinate of every parameter in `store`.
pub fn grad_check<F>(forward: F, store: &ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::F64);
    tape.corrupt_backward(cfg.corrupt);
    let root = forward(&mut tape, store)?;
    let base = tape
        .value(root)
        .item()
        .ok_or_else(|| Error::NonScalarRoot(tape.value(root).shape().to_vec()))?;
    let again = evaluate(&forward, store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations gave {base:e} and {again:e}"
        )));
    }
    let analytic = tape.backward(root)?.dense(store);

    let mut work = store.clone();
    let mut worst = 0.0f64;
    let mut offending = None;
    let mut worst_pair = None;
    let mut checked = 0;
    for (id, param) in store.iter() {
        for i in 0..param.tensor.numel() {
            let orig = param.tensor.data()[i];
            work.get_mut(id).tensor.data_mut()[i] = orig + cfg.epsilon;
            let plus = evaluate(&forward, &work)?;
            work.get_mut(id).tensor.data_mut()[i] = orig - cfg.epsilon;
            let minus = evaluate(&forward, &work)?;
            work.get_mut(id).tensor.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let a = analytic[id.0].data()[i];
            let err = relative_error_with_floor(a, numeric, cfg.floor);
            checked += 1;
            if err > worst || err.is_nan() {
                worst = if err.is_nan() { f64::INFINITY } else { err };
                offending = Some(format!("{}[{i}]", param.name));
                worst_pair = Some((a, numeric));
            }
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        passed: worst < cfg.tolerance,
        offending_parameter: offending,
        worst_pair,
        coordinates_checked: checked,
    })
}
