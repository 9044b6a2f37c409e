//! Central finite differences, used as an oracle for the tape.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Element-wise central-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_grad",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff_grad",
            });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Jacobian `∂f_i/∂x_j` of a vector-valued map, row-major `[out, in]`.
pub fn finite_diff_jacobian<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Vec<f64>>,
{
    let mut probe = x.clone();
    let mut columns = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        let col: Vec<f64> = plus
            .iter()
            .zip(&minus)
            .map(|(p, m)| (p - m) / (2.0 * eps))
            .collect();
        if col.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "finite_diff_jacobian",
            });
        }
        columns.push(col);
    }
    let rows = columns.first().map_or(0, Vec::len);
    let mut data = vec![0.0; rows * x.len()];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[i * x.len() + j] = *v;
        }
    }
    Tensor::new(vec![rows, x.len()], data)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
