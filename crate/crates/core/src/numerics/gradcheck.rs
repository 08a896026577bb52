use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Step used by the central-difference checks throughout the crate.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Per-coordinate comparison of analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradientComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradientComparison {
    /// `max_i |a_i − c_i| / max(1e-8, |a_i| + |c_i|)`
    pub fn max_relative_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, c)| (a - c).abs() / (a.abs() + c.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    pub fn max_absolute_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max)
    }
}

fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if !value.is_scalar() {
        return Err(Error::contract("gradient_check: function must return a scalar"));
    }
    let y = value.item();
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {y}")));
    }
    Ok(y)
}

/// Reverse-mode gradient of the scalar function `f` at `x`.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    evaluate(f, x)?;
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    Ok(tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
}

/// Computes both gradients of the scalar function `f` at `x`.
///
/// `f` builds its graph on the supplied tape from the input handle.
pub fn compare_gradients<F>(f: F, x: &Tensor, step: f64) -> Result<GradientComparison>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!("step must be positive, got {step}")));
    }
    let analytic = analytic_gradient(&f, x)?;

    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let (hi, lo) = (orig + step, orig - step);
        probe.data_mut()[i] = hi;
        let up = evaluate(&f, &probe)?;
        probe.data_mut()[i] = lo;
        let down = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        // divide by the step actually taken after rounding
        numeric.push((up - down) / (hi - lo));
    }
    Ok(GradientComparison { analytic, numeric })
}

/// Maximum relative error between the analytic gradient of `f` at `x` and
/// its central-difference estimate.
pub fn gradient_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    compare_gradients(f, x, step).map(|c| c.max_relative_error())
}
