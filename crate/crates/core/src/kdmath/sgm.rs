use super::kl::kl_softened_with_grad;
use super::{check_same_shape, sigmoid, AttentionMap, MathError, Matrix, Result, SymmetricStructure, Temperature};

// Largest double below one. Saturated sigmoids are pinned inside the open
// interval so the structure never contains exact 0 or 1.
const UPPER: f64 = 1.0 - f64::EPSILON / 2.0;
const LOWER: f64 = f64::MIN_POSITIVE;

/// `σ(A + Aᵀ)` elementwise.
pub fn symmetric_structure(a: &AttentionMap) -> SymmetricStructure {
    let v = a.values();
    let n = v.nrows();
    let mut out = Matrix::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let s = sigmoid(v[[i, j]] + v[[j, i]]).clamp(LOWER, UPPER);
            out[[i, j]] = s;
            out[[j, i]] = s;
        }
    }
    SymmetricStructure { values: out }
}

/// Gradient w.r.t. `A` given the structure `s` and the upstream gradient
/// `d_s`.
pub fn symmetric_structure_vjp(s: &SymmetricStructure, d_s: &Matrix) -> Matrix {
    let local = d_s * &s.values.mapv(|v| v * (1.0 - v));
    &local + &local.t()
}

/// `(1/N) Σ_samples KL(S_t ‖ S_s) · t²` over flattened structures.
pub fn sgm_loss(s_teacher: &[SymmetricStructure], s_student: &[SymmetricStructure], t: Temperature) -> Result<f64> {
    sgm_loss_with_grad(s_teacher, s_student, t).map(|(v, _)| v)
}

/// [`sgm_loss`] plus gradients w.r.t. each student structure.
pub fn sgm_loss_with_grad(
    s_teacher: &[SymmetricStructure],
    s_student: &[SymmetricStructure],
    t: Temperature,
) -> Result<(f64, Vec<Matrix>)> {
    if s_teacher.len() != s_student.len() || s_student.is_empty() {
        return Err(MathError::Shape(format!(
            "sgm_loss: teacher batch {} vs student batch {}",
            s_teacher.len(),
            s_student.len()
        )));
    }
    let n = s_student.len() as f64;
    let t2 = t.get() * t.get();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(s_student.len());
    for (st, ss) in s_teacher.iter().zip(s_student) {
        check_same_shape(&st.values, &ss.values, "sgm_loss")?;
        let t_flat: Vec<f64> = st.values.iter().copied().collect();
        let s_flat: Vec<f64> = ss.values.iter().copied().collect();
        let (kl, g) = kl_softened_with_grad(&t_flat, &s_flat, t)?;
        total += kl;
        grads.push(
            Matrix::from_shape_vec(ss.values.dim(), g.into_iter().map(|v| v * t2 / n).collect())
                .expect("shape preserved"),
        );
    }
    Ok((total / n * t2, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sym(m: Matrix) -> SymmetricStructure {
        symmetric_structure(&AttentionMap::from_values(m, 2).unwrap())
    }

    #[test]
    fn zero_input_gives_half() {
        for n in 1..5 {
            assert!(sym(Matrix::zeros((n, n))).values().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn reference_value() {
        let s = sym(array![[0.0, 2.0], [0.0, 0.0]]);
        let sig2 = 1.0 / (1.0 + (-2f64).exp());
        assert_eq!(s.values()[[0, 0]], 0.5);
        assert!((s.values()[[0, 1]] - sig2).abs() < 1e-15);
        assert!((s.values()[[0, 1]] - 0.88080).abs() < 1e-5);
        assert_eq!(s.values()[[0, 1]], s.values()[[1, 0]]);
    }

    #[test]
    fn saturation_stays_open_interval() {
        let s = sym(array![[500.0, -800.0], [900.0, -500.0]]);
        assert!(s.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn sgm_reference_against_double_loop_oracle() {
        let t = Temperature::new(2.0).unwrap();
        let teacher = sym(Matrix::zeros((2, 2)));
        let student = sym(array![[0.0, 2.0], [0.0, 0.0]]);
        let v = sgm_loss(std::slice::from_ref(&teacher), std::slice::from_ref(&student), t).unwrap();

        let mut p = Vec::new();
        let mut q = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                p.push((teacher.values()[[i, j]] / 2.0).exp());
                q.push((student.values()[[i, j]] / 2.0).exp());
            }
        }
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        let mut kl = 0.0;
        for k in 0..4 {
            let (pk, qk) = (p[k] / sp, q[k] / sq);
            kl += pk * (pk / qk).ln();
        }
        assert!((v - kl * 4.0).abs() < 1e-14, "{v} vs {}", kl * 4.0);
        assert!(v > 0.0);

        assert_eq!(sgm_loss(std::slice::from_ref(&student), std::slice::from_ref(&student), t).unwrap(), 0.0);
    }

    #[test]
    fn transposed_inputs_give_same_value() {
        let t = Temperature::default();
        let a = array![[0.1, -0.7, 1.3], [2.0, 0.4, -1.1], [0.0, 0.9, 0.2]];
        let b = array![[1.0, 0.5, -0.3], [-2.0, 0.0, 0.6], [0.8, 0.1, -0.4]];
        let v = sgm_loss(&[sym(a.clone())], &[sym(b.clone())], t).unwrap();
        let vt = sgm_loss(&[sym(a.t().to_owned())], &[sym(b.t().to_owned())], t).unwrap();
        assert_eq!(v, vt);
    }

    #[test]
    fn shape_mismatch() {
        let t = Temperature::default();
        let err = sgm_loss(&[sym(Matrix::zeros((2, 2)))], &[sym(Matrix::zeros((3, 3)))], t).unwrap_err();
        assert!(matches!(err, MathError::Shape(_)));
    }
}
