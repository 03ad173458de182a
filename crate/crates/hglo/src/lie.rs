//! Minimal SE(3) machinery for pose optimization: twists, the exponential
//! and logarithm maps, rigid composition, and a planar (x, y, yaw)
//! restriction used by the default 3-DoF solver mode.
//!
//! Twist component order is (translation, rotation); the registration
//! Jacobian columns rely on this layout.

use nalgebra::{Matrix3, Vector3, Vector6};
use thiserror::Error;

/// Angle below which Rodrigues / left-Jacobian coefficients switch to their
/// Taylor forms. At 1e-4 rad the truncation error of the fourth-order series
/// is below 1e-26 while the closed forms are still far from catastrophic
/// cancellation.
const SMALL_ANGLE: f64 = 1e-4;

/// Rotation angles closer to pi than this are rejected by [`log_map`].
const NEAR_PI_MARGIN: f64 = 1e-6;

/// Orthonormality drift above which [`compose`] re-polarizes the rotation.
const ORTHONORMAL_DRIFT: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LieError {
    /// The log map is ill-conditioned within 1e-6 of a half-turn.
    #[error("rotation angle {angle} rad is within {NEAR_PI_MARGIN} of pi; log map rejected")]
    NearPiRotation { angle: f64 },
    /// A matrix handed to [`Pose::new`] is not a rotation.
    #[error("matrix is not orthonormal with determinant +1 (drift {drift})")]
    InvalidRotation { drift: f64 },
}

/// Element of se(3): translation part `rho` (meters) and rotation part
/// `omega` (radians), stored as the 6-vector (rho, omega).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Self { rho, omega }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    /// Twist with only planar components set: (dx, dy, 0, 0, 0, dyaw).
    pub fn planar(dx: f64, dy: f64, dyaw: f64) -> Self {
        Self::new(Vector3::new(dx, dy, 0.0), Vector3::new(0.0, 0.0, dyaw))
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho.x, self.rho.y, self.rho.z, self.omega.x, self.omega.y, self.omega.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.as_vector().norm()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.rho * s, self.omega * s)
    }
}

/// Rigid transform with an orthonormal rotation matrix and a translation in
/// meters. Construction goes through [`Pose::new`] (validated) or the maps
/// in this module, so the invariants R^T R = I, det R = 1 hold throughout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates orthonormality and determinant to 1e-9 before accepting.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, LieError> {
        let drift = orthonormal_drift(&rotation);
        let det = rotation.determinant();
        if drift > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(LieError::InvalidRotation { drift: drift.max((det - 1.0).abs()) });
        }
        Ok(Self { rotation, translation })
    }

    /// For rotations produced by closed-form constructions in this crate.
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
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

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians, in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

fn orthonormal_drift(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

/// Skew-symmetric (hat) matrix of a 3-vector.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3) with Taylor fallbacks.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let half_sin = (0.5 * theta).sin();
        (
            theta.sin() / theta,
            2.0 * half_sin * half_sin / (theta * theta),
            (theta - theta.sin()) / (theta * theta * theta),
        )
    }
}

/// Closed-form SE(3) exponential: Rodrigues rotation plus left-Jacobian
/// translation. `exp_map(Twist::zero())` is the identity.
pub fn exp_map(xi: &Twist) -> Pose {
    let theta = xi.omega.norm();
    let w = skew(&xi.omega);
    let w2 = w * w;
    let (a, b, c) = rodrigues_coefficients(theta);
    let rotation = Matrix3::identity() + w * a + w2 * b;
    let left_jacobian = Matrix3::identity() + w * b + w2 * c;
    Pose::from_parts_unchecked(rotation, left_jacobian * xi.rho)
}

/// Inverse of [`exp_map`] on the domain where the rotation angle is below
/// pi - 1e-6.
pub fn log_map(pose: &Pose) -> Result<Twist, LieError> {
    let r = pose.rotation;
    let theta = pose.rotation_angle();
    if theta > std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(LieError::NearPiRotation { angle: theta });
    }
    let axis_vec = vee(&(r - r.transpose()));
    let omega = if theta < SMALL_ANGLE {
        // theta / (2 sin theta) = (1 + t^2/6 + 7 t^4/360) / 2
        let t2 = theta * theta;
        axis_vec * (0.5 * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0))
    } else {
        axis_vec * (theta / (2.0 * theta.sin()))
    };

    let w = skew(&omega);
    let w2 = w * w;
    let k = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        (1.0 - theta * (1.0 + theta.cos()) / (2.0 * theta.sin())) / (theta * theta)
    };
    let left_jacobian_inv = Matrix3::identity() - w * 0.5 + w2 * k;
    Ok(Twist::new(left_jacobian_inv * pose.translation, omega))
}

/// Rigid composition `a * b` (apply `b` first, then `a`), re-polarizing the
/// rotation via SVD when accumulated drift exceeds 1e-12.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let rotation = a.rotation * b.rotation;
    let translation = a.rotation * b.translation + a.translation;
    let rotation = if orthonormal_drift(&rotation) > ORTHONORMAL_DRIFT {
        polar_rotation(&rotation)
    } else {
        rotation
    };
    Pose::from_parts_unchecked(rotation, translation)
}

/// Nearest rotation in Frobenius norm: R = U V^T with a determinant fix.
fn polar_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Planar pose (x, y, yaw) with yaw wrapped to [-pi, pi).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: wrap_angle(yaw) }
    }

    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, yaw: 0.0 }
    }
}

/// Wraps an angle into [-pi, pi).
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if w >= std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

/// Embeds (x, y, yaw) as a full pose with z = 0 and roll = pitch = 0.
pub fn planar_embed(p: &PlanarPose) -> Pose {
    let (s, c) = p.yaw.sin_cos();
    let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    Pose::from_parts_unchecked(rotation, Vector3::new(p.x, p.y, 0.0))
}

/// Extracts (x, y, yaw), discarding z, roll and pitch.
pub fn planar_project(pose: &Pose) -> PlanarPose {
    let r = pose.rotation();
    PlanarPose::new(
        pose.translation().x,
        pose.translation().y,
        wrap_angle(r[(1, 0)].atan2(r[(0, 0)])),
    )
}
