//! Centered finite-difference gradient check.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function against centered
/// differences at `point`.
///
/// `f` builds the function on a fresh tape from the parameter variable it is
/// handed. Returns the maximum over entries of
/// `|autodiff − centered| / (|centered| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::Config(format!(
            "step must be positive, got {h}"
        )));
    }
    let mut tape = Tape::new();
    let p = tape.param(point.clone());
    let root = f(&mut tape, p)?;
    tape.backward(root)?;
    let analytic = tape.grad_or_zeros(p);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.param(t);
        let root = f(&mut tape, p)?;
        let v = tape.value(root);
        if v.len() != 1 {
            return Err(TensorError::NonScalarRoot(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
