//! Virtual-telescope calibration: homography estimation, linear solve for
//! the 3×3 projection `P`, and its factorization into intrinsics times
//! rotation.
//!
//! The full imaging chain is `x̄ = K_ev · H_sc · K_te · R · X`, with `K_ev`
//! the event-camera intrinsics (given), `H_sc` the screen-to-sensor
//! homography and `K_te`/`R` the virtual telescope's intrinsics and
//! attitude. `P` is solved in the scale-correct cross-product form
//! (minimizing `Σ‖x̄_i × P·X_i‖²`), since stacking homogeneous equalities
//! directly would ignore the per-point projective scales.

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{GeometryError, Intrinsics, Rotation, UnitVector3};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("need at least {need} pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("degenerate configuration: the linear system is rank deficient")]
    RankDeficient,
    #[error("matrix is singular")]
    Singular,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Result of the full calibration: homography, virtual-telescope intrinsics
/// and attitude, plus the composite projection multiplier.
#[derive(Debug, Clone)]
pub struct CalibSolution {
    /// Screen-to-sensor homography, normalized so its (3,3) entry is 1.
    pub h_sc: Matrix3<f64>,
    pub k_te: Intrinsics,
    pub rotation: Rotation,
    /// `K_ev · H_sc · K_te`.
    pub k_composite: Matrix3<f64>,
}

/// Similarity normalization: centroid to the origin, mean distance √2.
fn normalizing_similarity(points: &[[f64; 2]]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Smallest right singular vector of `a`, with a rank check on the
/// second-smallest singular value.
fn nullspace_vector(mut a: DMatrix<f64>) -> Result<[f64; 9], CalibrationError> {
    // Pad to at least 9 rows so the full right-singular basis exists.
    let rows = a.nrows();
    if rows < 9 {
        a = a.insert_rows(rows, 9 - rows, 0.0);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or(CalibrationError::RankDeficient)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| {
        svd.singular_values[y]
            .partial_cmp(&svd.singular_values[x])
            .unwrap()
    });
    let largest = svd.singular_values[order[0]];
    // Needs rank 8: one-dimensional nullspace.
    let rank8 = svd.singular_values[order[7]];
    if rank8 <= 1e-10 * largest.max(1.0) {
        return Err(CalibrationError::RankDeficient);
    }
    let smallest_col = order[8];
    let mut h = [0.0; 9];
    for (i, v) in h.iter_mut().enumerate() {
        *v = v_t[(smallest_col, i)];
    }
    Ok(h)
}

fn matrix_from_rowmajor(h: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8])
}

/// Direct linear transform with coordinate normalization; the result is
/// scaled so its (3,3) entry is 1.
pub fn estimate_homography(pairs: &[([f64; 2], [f64; 2])]) -> Result<Matrix3<f64>, CalibrationError> {
    if pairs.len() < 4 {
        return Err(CalibrationError::TooFewPairs { need: 4, got: pairs.len() });
    }
    let src: Vec<[f64; 2]> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<[f64; 2]> = pairs.iter().map(|p| p.1).collect();
    let t_src = normalizing_similarity(&src);
    let t_dst = normalizing_similarity(&dst);

    let mut a = DMatrix::<f64>::zeros(2 * pairs.len(), 9);
    for (row, (s, d)) in src.iter().zip(dst.iter()).enumerate() {
        let sp = t_src * Vector3::new(s[0], s[1], 1.0);
        let dp = t_dst * Vector3::new(d[0], d[1], 1.0);
        let (x, y) = (sp.x, sp.y);
        let (u, v) = (dp.x, dp.y);
        let r0 = 2 * row;
        // x̄' × H x̄ = 0, two independent rows.
        a[(r0, 3)] = -x;
        a[(r0, 4)] = -y;
        a[(r0, 5)] = -1.0;
        a[(r0, 6)] = v * x;
        a[(r0, 7)] = v * y;
        a[(r0, 8)] = v;
        a[(r0 + 1, 0)] = x;
        a[(r0 + 1, 1)] = y;
        a[(r0 + 1, 2)] = 1.0;
        a[(r0 + 1, 6)] = -u * x;
        a[(r0 + 1, 7)] = -u * y;
        a[(r0 + 1, 8)] = -u;
    }
    let h_norm = matrix_from_rowmajor(&nullspace_vector(a)?);
    let h = t_dst
        .try_inverse()
        .ok_or(CalibrationError::Singular)?
        * h_norm
        * t_src;
    let scale = h[(2, 2)];
    if scale.abs() < 1e-12 * h.norm() {
        return Err(CalibrationError::RankDeficient);
    }
    Ok(h / scale)
}

/// Solve the pinhole projection `x̄ ∝ P·X` from 2D-direction pairs by the
/// cross-product DLT, then rescale so the factored `K_te` has a unit (3,3)
/// entry and positive diagonal.
pub fn solve_projection(pairs: &[([f64; 2], UnitVector3)]) -> Result<Matrix3<f64>, CalibrationError> {
    if pairs.len() < 6 {
        return Err(CalibrationError::TooFewPairs { need: 6, got: pairs.len() });
    }
    let img: Vec<[f64; 2]> = pairs.iter().map(|p| p.0).collect();
    let t = normalizing_similarity(&img);

    let mut a = DMatrix::<f64>::zeros(2 * pairs.len(), 9);
    for (row, (z, dir)) in pairs.iter().enumerate() {
        let zp = t * Vector3::new(z[0], z[1], 1.0);
        let (u, v) = (zp.x, zp.y);
        let x = dir.as_vector();
        let r0 = 2 * row;
        // x̄ × P X = 0.
        for c in 0..3 {
            a[(r0, 3 + c)] = -x[c];
            a[(r0, 6 + c)] = v * x[c];
            a[(r0 + 1, c)] = x[c];
            a[(r0 + 1, 6 + c)] = -u * x[c];
        }
    }
    let p_norm = matrix_from_rowmajor(&nullspace_vector(a)?);
    let p = t.try_inverse().ok_or(CalibrationError::Singular)? * p_norm;
    // Normalize scale and sign through the factorization.
    let (k_te, rotation) = factor_projection(&p)?;
    Ok(k_te.matrix() * rotation.matrix())
}

/// RQ-style factorization `P = K_te · R` with `K_te` upper triangular with
/// positive diagonal and `det(R) = +1`. The recomposition equals `P` up to
/// a scalar (negative when `det(P) < 0`).
pub fn factor_projection(p: &Matrix3<f64>) -> Result<(Intrinsics, Rotation), CalibrationError> {
    let det = p.determinant();
    if det.abs() <= 1e-12 * p.norm().powi(3).max(1e-300) {
        return Err(CalibrationError::Singular);
    }
    // Work with a positive-determinant copy; the flip is the projective
    // scale ambiguity.
    let p = if det < 0.0 { -p } else { *p };

    // RQ via the row-exchange trick: with E the row-reversal,
    // (E·P)ᵀ = Q̂·R̂ gives P = (E·R̂ᵀ·E)·(E·Q̂ᵀ).
    let e = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let qr = (e * p).transpose().qr();
    let q_hat = qr.q();
    let r_hat = qr.r();
    let mut k = e * r_hat.transpose() * e;
    let mut r = e * q_hat.transpose();

    // Make the diagonal of K positive; D² = I keeps the product intact.
    let d = Matrix3::from_diagonal(&Vector3::new(
        k[(0, 0)].signum(),
        k[(1, 1)].signum(),
        k[(2, 2)].signum(),
    ));
    k *= d;
    r = d * r;
    // det(K) > 0 and det(P) > 0 force det(R) = +1 here.
    let scale = k[(2, 2)];
    if scale <= 0.0 {
        return Err(CalibrationError::Singular);
    }
    k /= scale;
    let k_te = Intrinsics::new(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)], k[(0, 1)])?;
    let rotation = Rotation::from_matrix_projected(r)?;
    Ok((k_te, rotation))
}

/// Assemble the full solution from its parts.
pub fn compose_solution(
    k_ev: &Matrix3<f64>,
    h_sc: Matrix3<f64>,
    k_te: Intrinsics,
    rotation: Rotation,
) -> CalibSolution {
    CalibSolution {
        k_composite: k_ev * h_sc * k_te.matrix(),
        h_sc,
        k_te,
        rotation,
    }
}
