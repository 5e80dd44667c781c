//! Rotation representations, ray backprojection, projection and the angular
//! error metric used by every other module.
//!
//! The canonical rotation representation is a 3×3 matrix (it appears verbatim
//! in all estimation formulas); unit quaternions with `w ≥ 0` are the
//! serialization format. Attitude files are plain text with one record per
//! frame: `frame_index,qw,qx,qy,qz`.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

/// Orthonormality / unit-determinant tolerance for [`Rotation`].
pub const ROTATION_TOL: f64 = 1e-9;
/// Unit-norm tolerance for [`UnitVector3`].
pub const UNIT_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("matrix is not a rotation: ||R^T R - I||_F = {defect:.3e}")]
    NotARotation { defect: f64 },
    #[error("invalid intrinsics: fx and fy must be positive (fx = {fx}, fy = {fy})")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("invalid axis: zero or non-finite")]
    InvalidAxis,
    #[error("zero-length vector cannot be normalized")]
    ZeroVector,
    #[error("degenerate correspondence set: rank(B) < 2")]
    DegenerateCorrespondences,
    #[error("attitude file parse error at line {line}: {msg}")]
    AttitudeParse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// UnitVector3
// ---------------------------------------------------------------------------

/// A direction on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVector3(Vector3<f64>);

impl UnitVector3 {
    /// Normalize an arbitrary vector. Errors on zero or non-finite input.
    pub fn new(v: Vector3<f64>) -> Result<Self, GeometryError> {
        let n = v.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(GeometryError::ZeroVector);
        }
        Ok(Self(v / n))
    }

    pub fn from_components(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        Self::new(Vector3::new(x, y, z))
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }
    pub fn y(&self) -> f64 {
        self.0.y
    }
    pub fn z(&self) -> f64 {
        self.0.z
    }

    /// Angle to another direction in degrees, stable over the full range.
    pub fn angle_to(&self, other: &UnitVector3) -> f64 {
        let cross = self.0.cross(&other.0).norm();
        let dot = self.0.dot(&other.0);
        cross.atan2(dot).to_degrees()
    }
}

impl fmt::Display for UnitVector3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.0.x, self.0.y, self.0.z)
    }
}

// ---------------------------------------------------------------------------
// Rotation
// ---------------------------------------------------------------------------

/// An element of SO(3), also the attitude of a frame (`camera ← inertial`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Accept a matrix that is already a rotation to within [`ROTATION_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let defect = orthonormality_defect(&m);
        let det = m.determinant();
        if defect > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::NotARotation {
                defect: defect.max((det - 1.0).abs()),
            });
        }
        Ok(Self(m))
    }

    /// Project an approximate rotation onto SO(3) via SVD.
    ///
    /// Intended for re-normalizing drift after long products; errors only if
    /// the input is singular enough that no proper rotation is nearby.
    pub fn from_matrix_projected(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let svd = m.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(GeometryError::NotARotation { defect: f64::NAN }),
        };
        let d = (u * v_t).determinant();
        let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum())) * v_t;
        Self::from_matrix(r)
    }

    /// Rodrigues construction. The axis must be unit-norm.
    pub fn from_axis_angle(axis: &UnitVector3, angle_rad: f64) -> Self {
        let k = skew(axis.as_vector());
        let m = Matrix3::identity() + k * angle_rad.sin() + k * k * (1.0 - angle_rad.cos());
        Self(m)
    }

    /// Exponential map of so(3): `omega` is an axis-angle tangent vector.
    pub fn exp(omega: &Vector3<f64>) -> Self {
        let theta2 = omega.norm_squared();
        let k = skew(omega);
        // Series coefficients below ~1e-6 rad where sin/cos lose digits.
        let (a, b) = if theta2 < 1e-12 {
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            let theta = theta2.sqrt();
            (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
        };
        Self(Matrix3::identity() + k * a + k * k * b)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(*q.to_rotation_matrix().matrix())
    }

    /// Unit quaternion with the canonical `w ≥ 0` sign.
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0));
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Rotation composition `self * other`.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: &UnitVector3) -> UnitVector3 {
        // Rotations preserve norm; skip renormalization.
        UnitVector3(self.0 * v.as_vector())
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation angle of `self` in degrees.
    pub fn angle_deg(&self) -> f64 {
        angular_error_deg(self, &Rotation::identity())
    }

    /// Re-project onto SO(3); use after long chains of compositions.
    pub fn renormalized(&self) -> Self {
        Self::from_matrix_projected(self.0).expect("near-rotation input")
    }
}

fn orthonormality_defect(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).norm()
}

/// Skew-symmetric cross-product matrix `[v]_x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Angular error between two rotations in degrees:
/// `2·arcsin(‖R1 − R2‖_F / (2√2))`, clamped against floating-point drift.
pub fn angular_error_deg(r1: &Rotation, r2: &Rotation) -> f64 {
    let fro = (r1.0 - r2.0).norm();
    let arg = (fro / (2.0 * std::f64::consts::SQRT_2)).clamp(-1.0, 1.0);
    2.0 * arg.asin().to_degrees()
}

// ---------------------------------------------------------------------------
// Intrinsics and projection
// ---------------------------------------------------------------------------

/// Pinhole intrinsic parameters (pixels). `K` is upper triangular with
/// positive focal lengths, hence always invertible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy, skew })
    }

    /// Square-pixel intrinsics from a horizontal field of view, principal
    /// point at the geometric center of the pixel grid.
    pub fn from_fov(width: u32, height: u32, fov_deg: f64) -> Result<Self, GeometryError> {
        let f = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            0.0,
        )
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0,
        )
    }

    fn inverse_apply(&self, x: f64, y: f64) -> Vector3<f64> {
        // Closed-form K^-1 [x, y, 1]^T for the upper-triangular K.
        let yn = (y - self.cy) / self.fy;
        let xn = (x - self.cx - self.skew * yn) / self.fx;
        Vector3::new(xn, yn, 1.0)
    }
}

/// Backprojected unit ray of a pixel: `K⁻¹x̄ / ‖K⁻¹x̄‖`.
pub fn backproject(pixel: [f64; 2], k: &Intrinsics) -> UnitVector3 {
    let v = k.inverse_apply(pixel[0], pixel[1]);
    UnitVector3::new(v).expect("homogeneous ray has unit z component")
}

/// Homogeneous projection `K·R·X` dehomogenized, or `None` when the rotated
/// direction lies behind the camera (third component ≤ 0).
pub fn project(k: &Intrinsics, r: &Rotation, x: &UnitVector3) -> Option<[f64; 2]> {
    let cam = r.apply_vector(x.as_vector());
    if cam.z <= 0.0 {
        return None;
    }
    let h = k.matrix() * cam;
    Some([h.x / h.z, h.y / h.z])
}

// ---------------------------------------------------------------------------
// Rotation fitting (Wahba core)
// ---------------------------------------------------------------------------

/// Least-squares rotation aligning direction pairs: minimizes
/// `Σ ‖obs_p − R·ref_p‖²` over SO(3) via SVD of `B = Σ obs_p·ref_pᵀ` with the
/// determinant-corrected composition `R = U·diag(1,1,det(UVᵀ))·Vᵀ`.
///
/// Errors when `rank(B) < 2` (fewer than two independent directions).
pub fn fit_rotation(pairs: &[(UnitVector3, UnitVector3)]) -> Result<Rotation, GeometryError> {
    let mut b = Matrix3::zeros();
    for (obs, reference) in pairs {
        b += obs.as_vector() * reference.as_vector().transpose();
    }
    let svd = b.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::DegenerateCorrespondences),
    };
    // Order singular triplets descending so the sign correction lands on the
    // smallest singular value.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &bi| {
        svd.singular_values[bi]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let mut u_s = Matrix3::zeros();
    let mut v_t_s = Matrix3::zeros();
    let mut sv = [0.0; 3];
    for (new_col, &old) in order.iter().enumerate() {
        u_s.set_column(new_col, &u.column(old));
        v_t_s.set_row(new_col, &v_t.row(old));
        sv[new_col] = svd.singular_values[old];
    }
    if sv[1] <= 1e-12 * sv[0].max(1.0) {
        return Err(GeometryError::DegenerateCorrespondences);
    }
    let d = (u_s * v_t_s).determinant().signum();
    let r = u_s * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t_s;
    Ok(Rotation::from_matrix_projected(r).expect("SVD composition is a rotation"))
}

// ---------------------------------------------------------------------------
// Attitude files
// ---------------------------------------------------------------------------

/// One attitude record: 1-based frame index plus the frame rotation.
#[derive(Debug, Clone, Copy)]
pub struct AttitudeRecord {
    pub frame: usize,
    pub rotation: Rotation,
}

/// Write `frame_index,qw,qx,qy,qz` records, `w ≥ 0`, full round-trip precision.
pub fn write_attitude_file<W: Write>(
    mut w: W,
    records: &[AttitudeRecord],
) -> Result<(), GeometryError> {
    for rec in records {
        let q = rec.rotation.quaternion();
        writeln!(w, "{},{},{},{},{}", rec.frame, q.w, q.i, q.j, q.k)?;
    }
    Ok(())
}

pub fn read_attitude_file(path: &Path) -> Result<Vec<AttitudeRecord>, GeometryError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse = |s: &str| -> Result<f64, GeometryError> {
            s.trim().parse().map_err(|e| GeometryError::AttitudeParse {
                line: lineno + 1,
                msg: format!("bad float {s:?}: {e}"),
            })
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(GeometryError::AttitudeParse {
                line: lineno + 1,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let frame: usize = fields[0]
            .trim()
            .parse()
            .map_err(|e| GeometryError::AttitudeParse {
                line: lineno + 1,
                msg: format!("bad frame index {:?}: {e}", fields[0]),
            })?;
        let (w, i, j, k) = (
            parse(fields[1])?,
            parse(fields[2])?,
            parse(fields[3])?,
            parse(fields[4])?,
        );
        let q = UnitQuaternion::new_normalize(nalgebra::Quaternion::new(w, i, j, k));
        out.push(AttitudeRecord {
            frame,
            rotation: Rotation::from_quaternion(&q),
        });
    }
    Ok(out)
}
