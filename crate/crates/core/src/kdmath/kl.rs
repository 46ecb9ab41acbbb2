use super::{MathError, Result, Temperature};

/// Numerically stable `log softmax(x / t)`.
pub fn log_softmax(x: &[f64], t: f64) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = x.iter().map(|v| (v - max) / t).collect();
    let lse = scaled.iter().map(|v| v.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|v| v - lse).collect()
}

/// `KL(softmax(teacher/t) ‖ softmax(student/t))`.
///
/// The `t²` rescaling is not applied here; the distillation losses apply it
/// once on top of the averaged divergences.
pub fn kl_softened(teacher_logits: &[f64], student_logits: &[f64], t: Temperature) -> Result<f64> {
    kl_softened_with_grad(teacher_logits, student_logits, t).map(|(v, _)| v)
}

/// [`kl_softened`] plus its gradient w.r.t. the student logits,
/// `(softmax(student/t) - softmax(teacher/t)) / t`.
pub fn kl_softened_with_grad(
    teacher_logits: &[f64],
    student_logits: &[f64],
    t: Temperature,
) -> Result<(f64, Vec<f64>)> {
    if teacher_logits.len() != student_logits.len() {
        return Err(MathError::Shape(format!(
            "kl_softened: teacher has {} logits, student has {}",
            teacher_logits.len(),
            student_logits.len()
        )));
    }
    if teacher_logits.is_empty() {
        return Err(MathError::Shape("kl_softened: empty logit vectors".into()));
    }
    if teacher_logits.iter().chain(student_logits).any(|v| !v.is_finite()) {
        return Err(MathError::Domain("kl_softened: non-finite logits".into()));
    }
    let t = t.get();
    let log_p = log_softmax(teacher_logits, t);
    let log_q = log_softmax(student_logits, t);
    let mut kl = 0.0;
    let mut grad = Vec::with_capacity(log_p.len());
    for (&lp, &lq) in log_p.iter().zip(&log_q) {
        let p = lp.exp();
        kl += p * (lp - lq);
        grad.push((lq.exp() - p) / t);
    }
    // Rounding can leave a tiny negative residue for equal distributions.
    Ok((kl.max(0.0), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: f64) -> Temperature {
        Temperature::new(v).unwrap()
    }

    /// Direct summation over explicitly normalised probabilities.
    fn oracle(teacher: &[f64], student: &[f64], temp: f64) -> f64 {
        let norm = |x: &[f64]| {
            let e: Vec<f64> = x.iter().map(|v| (v / temp).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let p = norm(teacher);
        let q = norm(student);
        p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
    }

    #[test]
    fn identical_inputs_give_zero() {
        for temp in [0.5, 1.0, 2.0, 8.0] {
            let v = [0.3, -2.0, 5.0, 1.0];
            assert_eq!(kl_softened(&v, &v, t(temp)).unwrap(), 0.0);
        }
    }

    #[test]
    fn reference_values() {
        let a = kl_softened(&[2.0, 0.0], &[0.0, 2.0], t(1.0)).unwrap();
        assert!((a - oracle(&[2.0, 0.0], &[0.0, 2.0], 1.0)).abs() < 1e-14);
        assert!((a - 1.52318).abs() < 1e-5);
        let b = kl_softened(&[2.0, 0.0], &[0.0, 2.0], t(2.0)).unwrap();
        assert!((b - oracle(&[2.0, 0.0], &[0.0, 2.0], 2.0)).abs() < 1e-14);
        assert!((b - 0.46212).abs() < 1e-5);
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let err = kl_softened(&[1.0, 2.0], &[1.0], t(1.0)).unwrap_err();
        assert!(matches!(err, MathError::Shape(_)));
    }

    #[test]
    fn gradient_sums_to_zero() {
        let (_, g) = kl_softened_with_grad(&[0.1, 0.7, -1.0], &[2.0, -0.3, 0.4], t(2.0)).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
    }
}
