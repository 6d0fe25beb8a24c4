//! Rigid-body algebra shared by every solver.
//!
//! Rotations are stored as orthonormal 3×3 matrices. Solvers perturb a
//! transform on the left in a decoupled way: the rotation by `Exp(θ)·R` and the
//! translation additively (`t + ρ`), so that point residual Jacobians take the
//! form `n^T [-⌊R p⌋, I]`. Six-vectors are always ordered rotation first.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix3x2, Matrix4, SVD, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CalibError, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// A proper rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, checking that `rotation` is orthonormal with
    /// determinant +1 (entrywise tolerance 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(CalibError::invalid("non-finite transform entry"));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if err > ORTHONORMAL_TOL || (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(CalibError::invalid(format!(
                "rotation is not orthonormal (|R^T R - I| = {err:e}, det = {})",
                rotation.determinant()
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a transform from a rotation that is only approximately
    /// orthonormal, projecting it onto SO(3).
    pub fn from_approx(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: orthonormalize(&rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Parses a row-major homogeneous 4×4 matrix.
    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(CalibError::invalid(format!(
                "expected 16 matrix entries, got {}",
                values.len()
            )));
        }
        let m = Matrix4::from_row_slice(values);
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(CalibError::invalid("last matrix row must be [0, 0, 0, 1]"));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: orthonormalize(&(self.rotation * other.rotation)),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Applies a solver increment `[θ, ρ]`: `R ← Exp(θ) R`, `t ← t + ρ`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Self {
        let theta = Vector3::new(delta[0], delta[1], delta[2]);
        let rho = Vector3::new(delta[3], delta[4], delta[5]);
        Self {
            rotation: orthonormalize(&(so3_exp(&theta) * self.rotation)),
            translation: self.translation + rho,
        }
    }

    /// Inverse of [`retract`](Self::retract): the increment taking `self` to `other`.
    pub fn local_difference(&self, other: &RigidTransform) -> Vector6<f64> {
        let theta = so3_log(&(other.rotation * self.rotation.transpose()));
        let rho = other.translation - self.translation;
        Vector6::new(theta.x, theta.y, theta.z, rho.x, rho.y, rho.z)
    }

    /// Geodesic rotation distance to `other`, in degrees.
    pub fn rotation_error_deg(&self, other: &RigidTransform) -> f64 {
        so3_log(&(self.rotation * other.rotation.transpose()))
            .norm()
            .to_degrees()
    }

    /// Euclidean distance between translations, in meters.
    pub fn translation_error(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        RigidTransform::from_row_major(&values).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = so3_log(&self.rotation);
        write!(
            f,
            "rot [{:.5}, {:.5}, {:.5}] deg, trans [{:.5}, {:.5}, {:.5}] m",
            r.x.to_degrees(),
            r.y.to_degrees(),
            r.z.to_degrees(),
            self.translation.x,
            self.translation.y,
            self.translation.z
        )
    }
}

/// Tangent vector of SE(3): axis-angle rotation and translational part.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub rot_part: Vector3<f64>,
    pub trans_part: Vector3<f64>,
}

impl Twist {
    pub fn new(rot_part: Vector3<f64>, trans_part: Vector3<f64>) -> Self {
        Self {
            rot_part,
            trans_part,
        }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rot_part: Vector3::new(v[0], v[1], v[2]),
            trans_part: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rot_part.x,
            self.rot_part.y,
            self.rot_part.z,
            self.trans_part.x,
            self.trans_part.y,
            self.trans_part.z,
        )
    }

    fn is_finite(&self) -> bool {
        self.rot_part.iter().chain(self.trans_part.iter()).all(|v| v.is_finite())
    }
}

/// `skew(v) · w = v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if theta2 < 1e-10 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        let h = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * h * h / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Axis-angle of a rotation matrix, with `|result| ≤ π`.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if cos > 1.0 - 1e-12 {
        // sin θ / θ ≈ 1 - θ²/6
        let theta2 = 2.0 * (1.0 - cos);
        return vee * 0.5 * (1.0 + theta2 / 6.0);
    }
    let theta = cos.acos();
    if theta < PI - 1e-6 {
        return vee * (theta / (2.0 * theta.sin()));
    }
    // Near π the antisymmetric part vanishes; recover the axis from R + I.
    let s = (r + Matrix3::identity()) * 0.5;
    let diag = Vector3::new(s[(0, 0)], s[(1, 1)], s[(2, 2)]);
    let i = diag.imax();
    let mut axis = s.column(i).into_owned() / diag[i].max(1e-300).sqrt();
    axis.normalize_mut();
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

fn left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (b, c) = if theta2 < 1e-4 {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        let theta = theta2.sqrt();
        let h = (0.5 * theta).sin();
        (2.0 * h * h / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + k * b + k * k * c
}

fn left_jacobian_inverse(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let c = if theta2 < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let half = 0.5 * theta2.sqrt();
        (1.0 - half / half.tan()) / theta2
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Exponential map of SE(3).
pub fn se3_exp(t: &Twist) -> Result<RigidTransform> {
    if !t.is_finite() {
        return Err(CalibError::invalid("non-finite twist"));
    }
    Ok(RigidTransform {
        rotation: so3_exp(&t.rot_part),
        translation: left_jacobian(&t.rot_part) * t.trans_part,
    })
}

/// Logarithm of SE(3) on the canonical chart `|rot_part| ≤ π`.
pub fn se3_log(t: &RigidTransform) -> Twist {
    let w = so3_log(&t.rotation);
    Twist {
        rot_part: w,
        trans_part: left_jacobian_inverse(&w) * t.translation,
    }
}

/// Orthonormal basis `[N₁, N₂]` of the plane orthogonal to the unit vector `w`.
///
/// `N₁` is obtained by Gram-Schmidt on the coordinate axis least aligned with
/// `w`, and `N₂ = w × N₁`.
pub fn tangent_basis(w: &Vector3<f64>) -> Result<Matrix3x2<f64>> {
    let norm = w.norm();
    if !norm.is_finite() || norm < 1e-9 {
        return Err(CalibError::invalid("tangent basis of a near-zero vector"));
    }
    let w = w / norm;
    let axis = w.abs().imin();
    let mut e = Vector3::zeros();
    e[axis] = 1.0;
    let n1 = (e - w * w.dot(&e)).normalize();
    let n2 = w.cross(&n1);
    Ok(Matrix3x2::from_columns(&[n1, n2]))
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let err = (m.transpose() * m - Matrix3::identity()).amax();
    if err < 1e-13 {
        return *m;
    }
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}
