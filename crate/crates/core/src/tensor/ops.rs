//! Scalar and slice kernels shared by the tape and by non-recorded code
//! paths, so both produce bit-identical values.

use super::{Result, TensorError};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `v / temperature`, computed with max-subtraction.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(TensorError::Config(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, temperature, &mut out);
    Ok(out)
}

/// Unchecked softmax kernel; `temperature` must already be validated.
pub(crate) fn softmax_into(v: &[f64], temperature: f64, out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = ((x - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// `out = weight · x (+ bias)` for a row-major `out.len() × x.len()` weight.
pub fn matvec_into(weight: &[f64], x: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let cin = x.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &weight[o * cin..(o + 1) * cin];
        let mut acc = 0.0;
        for (w, xv) in row.iter().zip(x) {
            acc += w * xv;
        }
        if let Some(b) = bias {
            acc += b[o];
        }
        *slot = acc;
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
