//! Small SO(3) toolkit: hat/vee, exponential map and the inverse of its
//! right-trivialised differential.

use nalgebra::{Matrix3, Rotation3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub const E3: Vec3 = Vector3::new(0.0, 0.0, 1.0);

pub fn hat(w: &Vec3) -> Mat3 {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`]; uses the skew part so it is robust to round-off.
pub fn vee(m: &Mat3) -> Vec3 {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// `exp(hat(xi))` via Rodrigues.
pub fn exp_so3(xi: &Vec3) -> Mat3 {
    Rotation3::new(*xi).into_inner()
}

/// Truncated `dexp^{-1}_xi(w) = w - 1/2 xi x w + 1/12 xi x (xi x w)`,
/// enough for a fourth-order Munthe-Kaas step.
pub fn dexp_inv(xi: &Vec3, w: &Vec3) -> Vec3 {
    let c = xi.cross(w);
    w - 0.5 * c + xi.cross(&c) / 12.0
}

/// ZYX yaw of a rotation matrix.
pub fn yaw_of(r: &Mat3) -> f64 {
    r[(1, 0)].atan2(r[(0, 0)])
}

pub fn rot_z(angle: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner()
}

/// Orthonormality defect `|R^T R - I|_F`.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm()
}
