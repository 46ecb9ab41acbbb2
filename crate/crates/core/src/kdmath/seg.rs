use serde::{Deserialize, Serialize};

use super::{check_finite, check_same_shape, sigmoid, softplus, MathError, Matrix, Result, SupervisionMap, SCALES};

/// Additive smoothing of the dice and Jaccard ratios. Also makes
/// empty-vs-empty a perfect score.
pub const DICE_SMOOTH: f64 = 1.0;

/// Region term paired with binary cross-entropy in the segmentation loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLossKind {
    #[default]
    BceDice,
    BceJaccard,
}

fn check_target(logits: &Matrix, target: &Matrix) -> Result<()> {
    check_same_shape(logits, target, "segmentation loss")?;
    check_finite(logits, "logits")?;
    if target.iter().any(|&g| g != 0.0 && g != 1.0) {
        return Err(MathError::Domain("target must be binary {0, 1}".into()));
    }
    if logits.is_empty() {
        return Err(MathError::Shape("segmentation loss on an empty map".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy on logits, `softplus(x) - g·x` per pixel.
pub fn bce_loss(logits: &Matrix, target: &Matrix) -> Result<f64> {
    check_target(logits, target)?;
    let n = logits.len() as f64;
    Ok(logits.iter().zip(target).map(|(&x, &g)| softplus(x) - g * x).sum::<f64>() / n)
}

pub fn bce_loss_with_grad(logits: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let value = bce_loss(logits, target)?;
    let n = logits.len() as f64;
    let mut grad = logits.mapv(sigmoid);
    grad.zip_mut_with(target, |p, &g| *p = (*p - g) / n);
    Ok((value, grad))
}

/// `1 - (2·Σpg + ε) / (Σp + Σg + ε)` with `p = σ(logits)`.
pub fn dice_loss(logits: &Matrix, target: &Matrix) -> Result<f64> {
    dice_loss_with_grad(logits, target).map(|(v, _)| v)
}

pub fn dice_loss_with_grad(logits: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    check_target(logits, target)?;
    let p = logits.mapv(sigmoid);
    let inter: f64 = p.iter().zip(target).map(|(a, b)| a * b).sum();
    let denom = p.sum() + target.sum() + DICE_SMOOTH;
    let numer = 2.0 * inter + DICE_SMOOTH;
    let value = 1.0 - numer / denom;
    let mut grad = p.clone();
    grad.zip_mut_with(target, |pv, &g| {
        let d_p = -(2.0 * g * denom - numer) / (denom * denom);
        *pv = d_p * *pv * (1.0 - *pv);
    });
    Ok((value, grad))
}

/// Soft Jaccard: `1 - (Σpg + ε) / (Σp + Σg - Σpg + ε)`.
pub fn jaccard_loss(logits: &Matrix, target: &Matrix) -> Result<f64> {
    jaccard_loss_with_grad(logits, target).map(|(v, _)| v)
}

pub fn jaccard_loss_with_grad(logits: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    check_target(logits, target)?;
    let p = logits.mapv(sigmoid);
    let inter: f64 = p.iter().zip(target).map(|(a, b)| a * b).sum();
    let numer = inter + DICE_SMOOTH;
    let union = p.sum() + target.sum() - inter + DICE_SMOOTH;
    let value = 1.0 - numer / union;
    let mut grad = p.clone();
    grad.zip_mut_with(target, |pv, &g| {
        let d_p = -(g * union - numer * (1.0 - g)) / (union * union);
        *pv = d_p * *pv * (1.0 - *pv);
    });
    Ok((value, grad))
}

/// Row-interpolation matrix for half-pixel-centred bilinear resampling with
/// edge clamping.
fn interp_matrix(out: usize, inp: usize) -> Matrix {
    let mut r = Matrix::zeros((out, inp));
    let ratio = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let w = src - i0 as f64;
        r[[o, i0]] += 1.0 - w;
        r[[o, i1]] += w;
    }
    r
}

/// Bilinear resize of a map to `(out_h, out_w)`. Same-size input is returned
/// unchanged.
pub fn upsample_bilinear(m: &Matrix, out_h: usize, out_w: usize) -> Matrix {
    if m.dim() == (out_h, out_w) {
        return m.clone();
    }
    let rh = interp_matrix(out_h, m.nrows());
    let rw = interp_matrix(out_w, m.ncols());
    rh.dot(m).dot(&rw.t())
}

/// Adjoint of [`upsample_bilinear`]: maps an output-space gradient back to
/// the `(in_h, in_w)` input.
pub fn upsample_bilinear_adjoint(d_out: &Matrix, in_h: usize, in_w: usize) -> Matrix {
    if d_out.dim() == (in_h, in_w) {
        return d_out.clone();
    }
    let rh = interp_matrix(d_out.nrows(), in_h);
    let rw = interp_matrix(d_out.ncols(), in_w);
    rh.t().dot(d_out).dot(&rw)
}

/// BCE plus the region term for one scale, after resampling the logits to
/// ground-truth resolution.
pub fn scale_seg_loss(logits: &Matrix, ground_truth: &Matrix, kind: SegLossKind) -> Result<f64> {
    scale_seg_loss_with_grad(logits, ground_truth, kind).map(|(v, _)| v)
}

pub fn scale_seg_loss_with_grad(logits: &Matrix, ground_truth: &Matrix, kind: SegLossKind) -> Result<(f64, Matrix)> {
    check_finite(logits, "logits")?;
    let (h, w) = ground_truth.dim();
    let up = upsample_bilinear(logits, h, w);
    let (bce, g_bce) = bce_loss_with_grad(&up, ground_truth)?;
    let (region, g_region) = match kind {
        SegLossKind::BceDice => dice_loss_with_grad(&up, ground_truth)?,
        SegLossKind::BceJaccard => jaccard_loss_with_grad(&up, ground_truth)?,
    };
    let d_up = g_bce + g_region;
    Ok((bce + region, upsample_bilinear_adjoint(&d_up, logits.nrows(), logits.ncols())))
}

/// Segmentation loss summed over both supervision scales.
pub fn seg_loss(student_maps: &[SupervisionMap], ground_truth: &Matrix, kind: SegLossKind) -> Result<f64> {
    seg_loss_with_grad(student_maps, ground_truth, kind).map(|(v, _)| v)
}

/// [`seg_loss`] plus per-map gradients, in the order of `student_maps`.
pub fn seg_loss_with_grad(
    student_maps: &[SupervisionMap],
    ground_truth: &Matrix,
    kind: SegLossKind,
) -> Result<(f64, Vec<Matrix>)> {
    let mut scales: Vec<usize> = student_maps.iter().map(|m| m.scale()).collect();
    scales.sort_unstable();
    if scales != SCALES {
        return Err(MathError::Shape(format!("seg_loss needs scales {SCALES:?}, got {scales:?}")));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(student_maps.len());
    for map in student_maps {
        let (v, g) = scale_seg_loss_with_grad(map.values(), ground_truth, kind)?;
        total += v;
        grads.push(g);
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bce_reference_values() {
        let g = array![[1.0, 0.0], [0.0, 1.0]];
        assert!((bce_loss(&Matrix::zeros((2, 2)), &g).unwrap() - 2f64.ln()).abs() < 1e-15);

        let sat = g.mapv(|v| if v == 1.0 { 20.0 } else { -20.0 });
        assert!(bce_loss(&sat, &g).unwrap() <= 1e-8);

        let v = bce_loss(&array![[0.0, 2.0]], &array![[1.0, 0.0]]).unwrap();
        let sig2 = 1.0 / (1.0 + (-2f64).exp());
        let oracle = (-(0.5f64).ln() - (1.0 - sig2).ln()) / 2.0;
        assert!((v - oracle).abs() < 1e-14);
        assert!((v - 1.41004).abs() < 1e-5);
    }

    #[test]
    fn bce_rejects_non_binary_target() {
        let err = bce_loss(&Matrix::zeros((1, 2)), &array![[0.5, 1.0]]).unwrap_err();
        assert!(matches!(err, MathError::Domain(_)));
        let err = dice_loss(&Matrix::zeros((1, 2)), &array![[2.0, 1.0]]).unwrap_err();
        assert!(matches!(err, MathError::Domain(_)));
        let err = bce_loss(&Matrix::zeros((1, 2)), &Matrix::zeros((2, 1))).unwrap_err();
        assert!(matches!(err, MathError::Shape(_)));
    }

    #[test]
    fn dice_reference_values() {
        let g = array![[1.0, 0.0], [1.0, 0.0]];
        let exact = g.mapv(|v| if v == 1.0 { 40.0 } else { -40.0 });
        assert!(dice_loss(&exact, &g).unwrap() < 1e-6);

        let empty = Matrix::zeros((3, 3));
        assert!(dice_loss(&Matrix::from_elem((3, 3), -40.0), &empty).unwrap() < 1e-6);

        // p = [1,1,0,0], g = [1,0,1,0] → 1 - 3/5
        let logits = array![[40.0, 40.0, -40.0, -40.0]];
        let v = dice_loss(&logits, &array![[1.0, 0.0, 1.0, 0.0]]).unwrap();
        assert!((v - 0.4).abs() < 1e-12);
    }

    #[test]
    fn jaccard_reference_value() {
        // p = [1,1,0,0], g = [1,0,1,0]: |∩| = 1, |∪| = 3 → 1 - 2/4
        let logits = array![[40.0, 40.0, -40.0, -40.0]];
        let v = jaccard_loss(&logits, &array![[1.0, 0.0, 1.0, 0.0]]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn same_resolution_bypasses_resampling() {
        let m = array![[0.3, -1.0], [2.0, 0.5]];
        assert_eq!(upsample_bilinear(&m, 2, 2), m);
        let g = array![[1.0, 0.0], [0.0, 1.0]];
        let direct = bce_loss(&m, &g).unwrap() + dice_loss(&m, &g).unwrap();
        assert_eq!(scale_seg_loss(&m, &g, SegLossKind::BceDice).unwrap(), direct);
    }

    /// Per-pixel bilinear interpolation written out from coordinates.
    fn interp_oracle(m: &Matrix, out: usize) -> Matrix {
        let n = m.nrows();
        let coord = |o: usize| -> (usize, usize, f64) {
            let s = ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).max(0.0).min((n - 1) as f64);
            let lo = s.floor() as usize;
            (lo, (lo + 1).min(n - 1), s - lo as f64)
        };
        Matrix::from_shape_fn((out, out), |(y, x)| {
            let (y0, y1, wy) = coord(y);
            let (x0, x1, wx) = coord(x);
            let top = m[[y0, x0]] * (1.0 - wx) + m[[y0, x1]] * wx;
            let bot = m[[y1, x0]] * (1.0 - wx) + m[[y1, x1]] * wx;
            top * (1.0 - wy) + bot * wy
        })
    }

    #[test]
    fn coarse_scale_matches_interpolation_oracle() {
        let m = array![[1.0, -2.0], [0.5, 3.0]];
        let up = upsample_bilinear(&m, 4, 4);
        let oracle = interp_oracle(&m, 4);
        for (a, b) in up.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        // Half-pixel centres: the first output pixel sits on the first input pixel.
        assert_eq!(oracle[[0, 0]], 1.0);
        assert!((oracle[[0, 1]] - (0.75 * 1.0 + 0.25 * -2.0)).abs() < 1e-15);

        let g = array![[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]];
        let v = scale_seg_loss(&m, &g, SegLossKind::BceDice).unwrap();
        let expected = bce_loss(&oracle, &g).unwrap() + dice_loss(&oracle, &g).unwrap();
        assert!((v - expected).abs() < 1e-14);
    }

    #[test]
    fn adjoint_identity() {
        // <U x, y> == <x, Uᵀ y>
        let x = array![[0.2, -1.0, 0.7], [1.5, 0.1, -0.3], [0.0, 2.0, 1.0]];
        let y = Matrix::from_shape_fn((7, 7), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin());
        let lhs = (&upsample_bilinear(&x, 7, 7) * &y).sum();
        let rhs = (&x * &upsample_bilinear_adjoint(&y, 3, 3)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_requires_both_scales() {
        let gt = Matrix::zeros((4, 4));
        let one = vec![SupervisionMap::new(Matrix::zeros((2, 2)), 1).unwrap()];
        assert!(matches!(seg_loss(&one, &gt, SegLossKind::BceDice), Err(MathError::Shape(_))));

        let both = vec![
            SupervisionMap::new(Matrix::from_elem((2, 2), -30.0), 1).unwrap(),
            SupervisionMap::new(Matrix::from_elem((4, 4), -30.0), 2).unwrap(),
        ];
        assert!(seg_loss(&both, &gt, SegLossKind::BceDice).unwrap() <= 1e-6);
    }
}
