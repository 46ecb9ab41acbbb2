use ndarray::Axis;

use super::{check_finite, Matrix, Result, Temperature};

/// Row-wise softmax of `m / t`, with the row max subtracted before
/// exponentiation.
pub fn row_softmax(m: &Matrix, t: Temperature) -> Result<Matrix> {
    check_finite(m, "softmax input")?;
    Ok(row_softmax_unchecked(m, t.get()))
}

pub(crate) fn row_softmax_unchecked(m: &Matrix, t: f64) -> Matrix {
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| ((v - max) / t).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Vector-Jacobian product of [`row_softmax`]: given the softmax output `p`
/// and the upstream gradient `dp`, returns the gradient w.r.t. the input.
pub fn row_softmax_vjp(p: &Matrix, dp: &Matrix, t: Temperature) -> Matrix {
    let inv_t = 1.0 / t.get();
    let mut out = Matrix::zeros(p.dim());
    for ((p_row, dp_row), mut out_row) in
        p.axis_iter(Axis(0)).zip(dp.axis_iter(Axis(0))).zip(out.axis_iter_mut(Axis(0)))
    {
        let dot: f64 = p_row.iter().zip(dp_row.iter()).map(|(a, b)| a * b).sum();
        for ((o, &pv), &dv) in out_row.iter_mut().zip(p_row.iter()).zip(dp_row.iter()) {
            *o = inv_t * pv * (dv - dot);
        }
    }
    out
}
