use super::kl::kl_softened_with_grad;
use super::softmax::row_softmax_unchecked;
use super::{
    check_finite, check_same_shape, check_square, row_softmax_vjp, AttentionMap, MathError, Matrix, Result,
    SupervisionMap, Temperature, SCALES,
};

/// `rowsoftmax(z·zᵀ/√d_k)·z` with `d_k` equal to the column count of `z`.
pub fn self_attention(z: &Matrix) -> Result<Matrix> {
    check_square(z, "attention input")?;
    check_finite(z, "attention input")?;
    let (p, _) = attention_weights(z);
    Ok(p.dot(z))
}

fn attention_weights(z: &Matrix) -> (Matrix, f64) {
    let scale = (z.ncols() as f64).sqrt();
    let scores = z.dot(&z.t()) / scale;
    (row_softmax_unchecked(&scores, 1.0), scale)
}

/// Attention transform of a supervision map, keeping its scale index.
pub fn attention_map(z: &SupervisionMap) -> AttentionMap {
    // SupervisionMap already guarantees a finite square matrix.
    let (p, _) = attention_weights(z.values());
    AttentionMap { values: p.dot(z.values()), scale: z.scale() }
}

/// Gradient of a scalar w.r.t. `z`, given its gradient `d_a` w.r.t.
/// `self_attention(z)`.
pub fn attention_map_vjp(z: &Matrix, d_a: &Matrix) -> Matrix {
    let (p, scale) = attention_weights(z);
    let d_p = d_a.dot(&z.t());
    let mut d_z = p.t().dot(d_a);
    let d_scores = row_softmax_vjp(&p, &d_p, Temperature::new(1.0).expect("unit temperature"));
    let sym = &d_scores + &d_scores.t();
    d_z += &(sym.dot(z) / scale);
    d_z
}

/// `(1/N) Σ_samples Σ_scales KL(A_t ‖ A_s) · t²` over flattened maps.
pub fn attention_kd_loss(
    teacher_maps: &[Vec<AttentionMap>],
    student_maps: &[Vec<AttentionMap>],
    t: Temperature,
) -> Result<f64> {
    attention_kd_loss_with_grad(teacher_maps, student_maps, t).map(|(v, _)| v)
}

/// [`attention_kd_loss`] plus gradients w.r.t. every student map, laid out
/// like `student_maps`.
pub fn attention_kd_loss_with_grad(
    teacher_maps: &[Vec<AttentionMap>],
    student_maps: &[Vec<AttentionMap>],
    t: Temperature,
) -> Result<(f64, Vec<Vec<Matrix>>)> {
    if teacher_maps.len() != student_maps.len() {
        return Err(MathError::Shape(format!(
            "attention_kd_loss: teacher batch {} vs student batch {}",
            teacher_maps.len(),
            student_maps.len()
        )));
    }
    if student_maps.is_empty() {
        return Err(MathError::Shape("attention_kd_loss: empty batch".into()));
    }
    let n = student_maps.len() as f64;
    let t2 = t.get() * t.get();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(student_maps.len());
    for (teacher, student) in teacher_maps.iter().zip(student_maps) {
        check_scale_set(teacher, "teacher")?;
        check_scale_set(student, "student")?;
        let mut sample_grads = Vec::with_capacity(student.len());
        for s_map in student {
            let t_map = teacher.iter().find(|m| m.scale == s_map.scale).expect("scale sets already checked");
            check_same_shape(&t_map.values, &s_map.values, "attention_kd_loss")?;
            let t_flat: Vec<f64> = t_map.values.iter().copied().collect();
            let s_flat: Vec<f64> = s_map.values.iter().copied().collect();
            let (kl, g) = kl_softened_with_grad(&t_flat, &s_flat, t)?;
            total += kl;
            let g = Matrix::from_shape_vec(s_map.values.dim(), g.into_iter().map(|v| v * t2 / n).collect())
                .expect("shape preserved");
            sample_grads.push(g);
        }
        grads.push(sample_grads);
    }
    Ok((total / n * t2, grads))
}

fn check_scale_set(maps: &[AttentionMap], who: &str) -> Result<()> {
    let mut scales: Vec<usize> = maps.iter().map(|m| m.scale).collect();
    scales.sort_unstable();
    if scales != SCALES {
        return Err(MathError::Shape(format!("{who} scales {scales:?}, expected {SCALES:?}")));
    }
    Ok(())
}
