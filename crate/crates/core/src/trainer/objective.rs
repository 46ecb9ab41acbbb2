//! Mode-dependent distillation objective.

use crate::kdmath::{
    self, attention_kd_loss, attention_kd_loss_with_grad, attention_map, attention_map_vjp, kl_softened,
    kl_softened_with_grad, seg_loss, seg_loss_with_grad, sgm_loss, sgm_loss_with_grad, symmetric_structure,
    symmetric_structure_vjp, AttentionMap, LossBreakdown, Matrix, SupervisionMap, SymmetricStructure, LAST_SCALE,
};

use super::{Mode, TrainConfig, TrainError};

/// Teacher-side quantities for one sample, computed once per frozen teacher.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    pub maps: Vec<SupervisionMap>,
    pub attention: Vec<AttentionMap>,
    pub structure: SymmetricStructure,
}

impl TeacherTargets {
    pub fn from_maps(maps: Vec<SupervisionMap>) -> Self {
        let attention: Vec<AttentionMap> = maps.iter().map(attention_map).collect();
        let last = attention.iter().find(|a| a.scale() == LAST_SCALE).expect("models emit the last scale");
        let structure = symmetric_structure(last);
        Self { maps, attention, structure }
    }
}

fn flat(m: &Matrix) -> Vec<f64> {
    m.iter().copied().collect()
}

fn check_pairing(teacher: &[SupervisionMap], student: &[SupervisionMap]) -> Result<(), TrainError> {
    let ok = teacher.len() == student.len()
        && teacher.iter().zip(student).all(|(t, s)| t.scale() == s.scale() && t.side() == s.side());
    if ok {
        Ok(())
    } else {
        let sides = |m: &[SupervisionMap]| m.iter().map(|x| (x.scale(), x.side())).collect::<Vec<_>>();
        Err(TrainError::Config(format!(
            "teacher maps {:?} do not match student maps {:?}",
            sides(teacher),
            sides(student)
        )))
    }
}

/// Batch objective without gradients, assembled directly from the kdmath
/// batch losses. Teacher maps are ignored in baseline mode.
pub fn loss_step(
    teacher_maps: Option<&[Vec<SupervisionMap>]>,
    student_maps: &[Vec<SupervisionMap>],
    ground_truth: &[Matrix],
    config: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    if student_maps.len() != ground_truth.len() || student_maps.is_empty() {
        return Err(TrainError::Config(format!(
            "batch has {} prediction sets and {} masks",
            student_maps.len(),
            ground_truth.len()
        )));
    }
    let n = student_maps.len() as f64;
    let t = config.temperature;
    let mut l_seg = 0.0;
    for (maps, gt) in student_maps.iter().zip(ground_truth) {
        l_seg += seg_loss(maps, gt, config.seg_loss)?;
    }
    l_seg /= n;

    let (mut l_at, mut l_sgm) = (0.0, 0.0);
    if config.mode != Mode::Baseline {
        let teacher =
            teacher_maps.ok_or_else(|| TrainError::Config(format!("mode {} needs teacher maps", config.mode)))?;
        if teacher.len() != student_maps.len() {
            return Err(TrainError::Config("teacher and student batch sizes differ".into()));
        }
        for (tm, sm) in teacher.iter().zip(student_maps) {
            check_pairing(tm, sm)?;
        }
        match config.mode {
            Mode::Baseline => unreachable!(),
            Mode::Kl => {
                let t2 = t.get() * t.get();
                for (tm, sm) in teacher.iter().zip(student_maps) {
                    for (a, b) in tm.iter().zip(sm) {
                        l_at += kl_softened(&flat(a.values()), &flat(b.values()), t)?;
                    }
                }
                l_at = l_at / n * t2;
            }
            Mode::AttentionKd | Mode::Full => {
                let att = |maps: &[Vec<SupervisionMap>]| -> Vec<Vec<AttentionMap>> {
                    maps.iter().map(|m| m.iter().map(attention_map).collect()).collect()
                };
                let (ta, sa) = (att(teacher), att(student_maps));
                l_at = attention_kd_loss(&ta, &sa, t)?;
                if config.mode == Mode::Full {
                    let structures = |maps: &[Vec<AttentionMap>]| -> Vec<SymmetricStructure> {
                        maps.iter()
                            .map(|m| {
                                symmetric_structure(m.iter().find(|a| a.scale() == LAST_SCALE).expect("last scale"))
                            })
                            .collect()
                    };
                    l_sgm = sgm_loss(&structures(&ta), &structures(&sa), t)?;
                }
            }
        }
    }
    Ok(LossBreakdown::weighted(l_at, l_sgm, l_seg, config.kd_weight, config.seg_weight)?)
}

/// Objective for a single sample (batch of one) and its gradient w.r.t.
/// each student map, in the order of `student`.
pub fn sample_objective(
    teacher: Option<&TeacherTargets>,
    student: &[SupervisionMap],
    ground_truth: &Matrix,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Matrix>), TrainError> {
    let t = config.temperature;
    let (l_seg, seg_grads) = seg_loss_with_grad(student, ground_truth, config.seg_loss)?;
    let mut grads: Vec<Matrix> = seg_grads.into_iter().map(|g| g * config.seg_weight).collect();
    let (mut l_at, mut l_sgm) = (0.0, 0.0);

    if config.mode != Mode::Baseline {
        let teacher = teacher.ok_or_else(|| TrainError::Config(format!("mode {} needs teacher maps", config.mode)))?;
        check_pairing(&teacher.maps, student)?;
        let kd = config.kd_weight;
        match config.mode {
            Mode::Baseline => unreachable!(),
            Mode::Kl => {
                let t2 = t.get() * t.get();
                for ((tm, sm), g) in teacher.maps.iter().zip(student).zip(grads.iter_mut()) {
                    let (v, dv) = kl_softened_with_grad(&flat(tm.values()), &flat(sm.values()), t)?;
                    l_at += v * t2;
                    let d = Matrix::from_shape_vec(sm.values().dim(), dv).expect("shape preserved");
                    g.scaled_add(kd * t2, &d);
                }
            }
            Mode::AttentionKd | Mode::Full => {
                let student_att: Vec<AttentionMap> = student.iter().map(attention_map).collect();
                let (v, d_att) = attention_kd_loss_with_grad(
                    std::slice::from_ref(&teacher.attention),
                    std::slice::from_ref(&student_att),
                    t,
                )?;
                l_at = v;
                let mut d_att = d_att.into_iter().next().expect("one sample");
                if config.mode == Mode::Full {
                    let pos = student_att.iter().position(|a| a.scale() == LAST_SCALE).expect("last scale");
                    let s_student = symmetric_structure(&student_att[pos]);
                    let (v, d_s) = sgm_loss_with_grad(
                        std::slice::from_ref(&teacher.structure),
                        std::slice::from_ref(&s_student),
                        t,
                    )?;
                    l_sgm = v;
                    d_att[pos] += &symmetric_structure_vjp(&s_student, &d_s[0]);
                }
                for ((sm, da), g) in student.iter().zip(&d_att).zip(grads.iter_mut()) {
                    g.scaled_add(kd, &attention_map_vjp(sm.values(), da));
                }
            }
        }
    }
    let breakdown = LossBreakdown::weighted(l_at, l_sgm, l_seg, config.kd_weight, config.seg_weight)?;
    Ok((breakdown, grads))
}

impl From<kdmath::MathError> for TrainError {
    fn from(e: kdmath::MathError) -> Self {
        TrainError::Math(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kdmath::{self_attention, Temperature};
    use ndarray::array;

    fn maps(a: Matrix, b: Matrix) -> Vec<SupervisionMap> {
        vec![SupervisionMap::new(a, 1).unwrap(), SupervisionMap::new(b, 2).unwrap()]
    }

    fn cfg(mode: Mode, t: f64) -> TrainConfig {
        TrainConfig { mode, temperature: Temperature::new(t).unwrap(), ..TrainConfig::default() }
    }

    #[test]
    fn identical_maps_zero_guidance() {
        let m =
            maps(array![[0.3, -1.0], [2.0, 0.1]], Matrix::from_shape_fn((4, 4), |(i, j)| (i as f64 - j as f64) * 0.4));
        let gt = Matrix::from_shape_fn((8, 8), |(i, _)| (i < 4) as u8 as f64);
        let b =
            loss_step(Some(std::slice::from_ref(&m)), std::slice::from_ref(&m), &[gt], &cfg(Mode::Full, 2.0)).unwrap();
        assert_eq!(b.l_at, 0.0);
        assert_eq!(b.l_sgm, 0.0);
        assert!((b.total - 0.8 * b.l_seg).abs() < 1e-15);
    }

    #[test]
    fn baseline_ignores_teacher() {
        let s = maps(array![[0.3, -1.0], [2.0, 0.1]], Matrix::from_elem((4, 4), 0.5));
        let t = maps(Matrix::zeros((2, 2)), Matrix::zeros((4, 4)));
        let gt = Matrix::zeros((4, 4));
        let c = cfg(Mode::Baseline, 2.0);
        let with = loss_step(Some(&[t]), std::slice::from_ref(&s), std::slice::from_ref(&gt), &c).unwrap();
        let without = loss_step(None, &[s], &[gt], &c).unwrap();
        assert_eq!(with, without);
        assert_eq!((with.l_at, with.l_sgm), (0.0, 0.0));
    }

    #[test]
    fn attention_mode_composes_module_oracles() {
        let za = array![[1.0, 0.0], [0.5, -1.0]];
        let zb = array![[0.0, 2.0], [1.0, 0.0]];
        let teacher = maps(za.clone(), Matrix::eye(2));
        let student = maps(zb.clone(), Matrix::eye(2));
        let gt = Matrix::zeros((2, 2));
        let b = loss_step(Some(&[teacher]), &[student], &[gt], &cfg(Mode::AttentionKd, 2.0)).unwrap();

        let ta: Vec<f64> = self_attention(&za).unwrap().iter().copied().collect();
        let sa: Vec<f64> = self_attention(&zb).unwrap().iter().copied().collect();
        let expected = kl_softened(&ta, &sa, Temperature::new(2.0).unwrap()).unwrap() * 4.0;
        assert!((b.l_at - expected).abs() < 1e-14);
        assert_eq!(b.l_sgm, 0.0);
        assert!((b.total - (0.2 * b.l_at + 0.8 * b.l_seg)).abs() < 1e-15);
    }

    #[test]
    fn sample_objective_agrees_with_loss_step() {
        let mk = |s: f64| {
            maps(
                Matrix::from_shape_fn((2, 2), |(i, j)| (s + i as f64 * 0.7 - j as f64).sin()),
                Matrix::from_shape_fn((4, 4), |(i, j)| (s * 0.3 + i as f64 - 0.5 * j as f64).cos()),
            )
        };
        let gt = Matrix::from_shape_fn((8, 8), |(i, j)| ((i + j) % 3 == 0) as u8 as f64);
        for mode in Mode::ALL {
            let c = cfg(mode, 2.0);
            let (t1, t2, s1, s2) = (mk(0.0), mk(1.0), mk(2.0), mk(3.0));
            let batch =
                loss_step(Some(&[t1.clone(), t2.clone()]), &[s1.clone(), s2.clone()], &[gt.clone(), gt.clone()], &c)
                    .unwrap();
            let (a, _) = sample_objective(Some(&TeacherTargets::from_maps(t1)), &s1, &gt, &c).unwrap();
            let (b, _) = sample_objective(Some(&TeacherTargets::from_maps(t2)), &s2, &gt, &c).unwrap();
            assert!((batch.l_at - (a.l_at + b.l_at) / 2.0).abs() < 1e-12, "{mode}");
            assert!((batch.l_sgm - (a.l_sgm + b.l_sgm) / 2.0).abs() < 1e-12, "{mode}");
            assert!((batch.l_seg - (a.l_seg + b.l_seg) / 2.0).abs() < 1e-12, "{mode}");
        }
    }

    #[test]
    fn mismatched_teacher_is_config_error() {
        let s = maps(Matrix::zeros((2, 2)), Matrix::zeros((4, 4)));
        let t = maps(Matrix::zeros((1, 1)), Matrix::zeros((2, 2)));
        let gt = Matrix::zeros((4, 4));
        let err = loss_step(Some(&[t]), &[s], &[gt], &cfg(Mode::Kl, 2.0)).unwrap_err();
        assert!(matches!(err, TrainError::Config(_)));
    }
}
