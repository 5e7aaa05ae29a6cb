//! Quadrotor rigid body attached at its centre of mass to a cable point.
//!
//! Attitude kinematics use the body-frame convention `dR/dt = R hat(w)`.
//! Some write-ups print the world-frame form `w x R`; with `w` in the body
//! frame (as in the Euler equation `J w' = -w x J w + tau`) the two only
//! agree at `R = I`, and the body form is the one implemented and tested.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{hat, vee, Mat3, Vec3, E3};
use crate::jet::{Jet, Jet3};

/// Thrust norm below which attitude reconstruction is rejected, N.
pub const THRUST_FLOOR: f64 = 1e-4;

/// Minimum `|y_c x b3|` for a well-defined heading.
pub const ALIGN_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadParams {
    /// Robot mass without the attached cable point, kg.
    #[serde(rename = "m_R")]
    pub mass: f64,
    #[serde(rename = "J", with = "mat3_rows")]
    pub inertia: Mat3,
    /// Total thrust bound, N.
    pub f_max: f64,
    /// Index of the cable mass the robot carries.
    pub attach: usize,
}

impl QuadParams {
    /// Crazyflie-class vehicle; inertia from the usual system-identification figures.
    pub fn crazyflie(attach: usize) -> Self {
        QuadParams {
            mass: 0.033,
            inertia: Mat3::from_diagonal(&Vec3::new(1.66e-5, 1.66e-5, 2.93e-5)),
            f_max: 0.9,
            attach,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::InvalidParams(format!(
                "robot mass must be positive, got {}",
                self.mass
            )));
        }
        if (self.inertia - self.inertia.transpose()).abs().max() > 1e-12 * self.inertia.abs().max() {
            return Err(Error::InvalidParams("inertia must be symmetric".into()));
        }
        if self.inertia.cholesky().is_none() {
            return Err(Error::InvalidParams("inertia must be positive definite".into()));
        }
        if !(self.f_max > 0.0) {
            return Err(Error::InvalidParams("f_max must be positive".into()));
        }
        Ok(())
    }
}

/// 3x3 matrices as a JSON array of rows.
mod mat3_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::geometry::Mat3;

    pub fn serialize<S: Serializer>(m: &Mat3, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat3, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Mat3::from_fn(|i, j| rows[i][j]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState {
    pub p: Vec3,
    pub v: Vec3,
    /// Body-to-world rotation.
    pub r: Mat3,
    /// Body angular velocity.
    pub omega: Vec3,
}

impl QuadState {
    pub fn hover_at(p: Vec3) -> Self {
        QuadState {
            p,
            v: Vec3::zeros(),
            r: Mat3::identity(),
            omega: Vec3::zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QuadInput {
    pub thrust: f64,
    pub torque: Vec3,
}

/// Time derivative of a [`QuadState`]; `omega` drives `dR/dt = R hat(omega)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadRate {
    pub velocity: Vec3,
    pub acceleration: Vec3,
    pub omega: Vec3,
    pub omega_dot: Vec3,
}

/// Coupled robot dynamics. `carried_mass` is the cable point the robot holds,
/// `f_left = f_{j-1}` and `f_right = f_j` are the adjoining segment forces.
pub fn quad_dynamics(
    state: &QuadState,
    input: &QuadInput,
    f_left: &Vec3,
    f_right: &Vec3,
    params: &QuadParams,
    carried_mass: f64,
    g: f64,
) -> QuadRate {
    let m_bar = params.mass + carried_mass;
    let acceleration = (-m_bar * g * E3 + f_right - f_left + input.thrust * state.r * E3) / m_bar;
    let jw = params.inertia * state.omega;
    let omega_dot = params
        .inertia
        .cholesky()
        .expect("validated inertia")
        .solve(&(-state.omega.cross(&jw) + input.torque));
    QuadRate {
        velocity: state.v,
        acceleration,
        omega: state.omega,
        omega_dot,
    }
}

/// Attitude, rates and inputs that realise a thrust-vector trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatAttitude {
    pub r: Mat3,
    pub omega: Vec3,
    pub omega_dot: Vec3,
    pub thrust: f64,
    pub torque: Vec3,
}

/// Body frame from a thrust direction and a ZYX yaw: `x_b` lies in the
/// vertical plane of heading `psi`, `y_b = b3 x x_b`.
fn frame_jets(b3: &Jet3, yaw: &Jet) -> Result<[Jet3; 3]> {
    let (s, c) = yaw.sin_cos();
    let zero = Jet::constant(0.0, yaw.depth());
    let y_c = Jet3::new(-&s, c, zero);
    let xb_raw = y_c.cross(b3);
    let sine = xb_raw.value().norm();
    if sine < ALIGN_FLOOR {
        return Err(Error::GimbalDegeneracy { sine });
    }
    let x_b = xb_raw.unit(0.0)?;
    let y_b = b3.cross(&x_b);
    Ok([x_b, y_b, b3.clone()])
}

fn column_matrix(cols: &[Jet3; 3], k: usize) -> Mat3 {
    Mat3::from_columns(&[cols[0].derivative(k), cols[1].derivative(k), cols[2].derivative(k)])
}

/// Rotation matrix for a thrust direction `b3` and yaw (value only).
pub fn attitude_for(b3: &Vec3, yaw: f64) -> Result<Mat3> {
    let cols = frame_jets(&Jet3::constant(*b3, 0), &Jet::constant(yaw, 0))?;
    Ok(column_matrix(&cols, 0))
}

/// Rebuild `(R, w, w', f, tau)` from the jet of the thrust vector
/// `u = f R e3` and the yaw jet. Both need depth >= 2.
pub fn attitude_from_flat(thrust: &Jet3, yaw: &Jet, inertia: &Mat3) -> Result<FlatAttitude> {
    let have = thrust.depth().min(yaw.depth());
    if have < 2 {
        return Err(Error::InsufficientDepth { needed: 2, have });
    }
    let u = thrust.truncated(2);
    let yaw = yaw.truncated(2);
    let norm = u.value().norm();
    if norm < THRUST_FLOOR {
        return Err(Error::DegenerateThrust { norm });
    }
    let b3 = u.unit(THRUST_FLOOR)?;
    let cols = frame_jets(&b3, &yaw)?;
    let r = column_matrix(&cols, 0);
    let r1 = column_matrix(&cols, 1);
    let r2 = column_matrix(&cols, 2);
    let omega = vee(&(r.transpose() * r1));
    let omega_dot = vee(&(r1.transpose() * r1 + r.transpose() * r2));
    let torque = inertia * omega_dot + omega.cross(&(inertia * omega));
    Ok(FlatAttitude {
        r,
        omega,
        omega_dot,
        thrust: norm,
        torque,
    })
}

/// Position and attitude gains of the SE(3) tracking controller.
///
/// Position gains are per unit mass, attitude gains per unit inertia.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingGains {
    pub kp: f64,
    pub kv: f64,
    pub kr: f64,
    pub kw: f64,
}

impl Default for TrackingGains {
    fn default() -> Self {
        TrackingGains {
            kp: 6.0,
            kv: 4.0,
            kr: 400.0,
            kw: 40.0,
        }
    }
}

/// Desired motion of one robot plus the thrust-vector feed-forward.
///
/// `thrust_ff` holds `u, u', u''` with `u = m_bar (a + g e3) - f_j + f_{j-1}`
/// along the plan, so the cable load is compensated without integral action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingReference {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
    pub thrust_ff: [Vec3; 3],
    /// `psi, psi', psi''`.
    pub yaw: [f64; 3],
}

impl TrackingReference {
    /// Reference for a free-flying robot (no cable feed-forward).
    #[allow(clippy::too_many_arguments)]
    pub fn from_kinematics(
        position: Vec3,
        velocity: Vec3,
        acceleration: Vec3,
        jerk: Vec3,
        snap: Vec3,
        yaw: [f64; 3],
        m_bar: f64,
        g: f64,
    ) -> Self {
        TrackingReference {
            position,
            velocity,
            acceleration,
            thrust_ff: [m_bar * (acceleration + g * E3), m_bar * jerk, m_bar * snap],
            yaw,
        }
    }

    pub fn hover(position: Vec3, m_bar: f64, g: f64) -> Self {
        let z = Vec3::zeros();
        TrackingReference::from_kinematics(position, z, z, z, z, [0.0; 3], m_bar, g)
    }

    /// Shift the position reference, e.g. by an integral correction.
    pub fn shifted(mut self, offset: &Vec3) -> Self {
        self.position += offset;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub input: QuadInput,
    /// Thrust was clamped into `[0, f_max]`.
    pub saturated: bool,
    pub desired_attitude: Mat3,
}

/// Geometric tracking controller on SE(3).
pub fn geometric_tracking_control(
    state: &QuadState,
    reference: &TrackingReference,
    params: &QuadParams,
    carried_mass: f64,
    gains: &TrackingGains,
) -> ControlOutput {
    let m_bar = params.mass + carried_mass;
    let e_p = state.p - reference.position;
    let e_v = state.v - reference.velocity;
    let force = m_bar * (-gains.kp * e_p - gains.kv * e_v) + reference.thrust_ff[0];

    let b3_d = if force.norm() > THRUST_FLOOR {
        force.normalize()
    } else {
        E3
    };
    let r_d = attitude_for(&b3_d, reference.yaw[0]).unwrap_or(state.r);

    let ff = attitude_from_flat(
        &Jet3::from_derivatives(&reference.thrust_ff),
        &Jet::from_derivatives(reference.yaw.to_vec()),
        &params.inertia,
    );
    let (omega_d, omega_dot_d) = ff.map(|a| (a.omega, a.omega_dot)).unwrap_or_default();

    let mut thrust = force.dot(&(state.r * E3));
    let saturated = !(0.0..=params.f_max).contains(&thrust);
    thrust = thrust.clamp(0.0, params.f_max);

    let rt_rd = state.r.transpose() * r_d;
    let e_r = 0.5 * vee(&(r_d.transpose() * state.r - rt_rd));
    let e_w = state.omega - rt_rd * omega_d;
    let j = &params.inertia;
    let torque = j * (-gains.kr * e_r - gains.kw * e_w) + state.omega.cross(&(j * state.omega))
        - j * (hat(&state.omega) * rt_rd * omega_d - rt_rd * omega_dot_d);

    ControlOutput {
        input: QuadInput { thrust, torque },
        saturated,
        desired_attitude: r_d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, orthonormality_error, rot_z, yaw_of};
    use approx::assert_relative_eq;

    const G: f64 = 9.81;

    fn quad() -> QuadParams {
        QuadParams::crazyflie(1)
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let q = quad();
        let m = 0.002;
        let s = QuadState::hover_at(Vec3::new(0.0, 0.0, 1.0));
        let u = QuadInput {
            thrust: (q.mass + m) * G,
            torque: Vec3::zeros(),
        };
        let z = Vec3::zeros();
        let rate = quad_dynamics(&s, &u, &z, &z, &q, m, G);
        assert!(rate.acceleration.norm() < 1e-15);
        assert_eq!(rate.omega_dot, z);
    }

    #[test]
    fn free_fall_and_cable_terms() {
        let q = quad();
        let s = QuadState::hover_at(Vec3::zeros());
        let fl = Vec3::new(0.0, 0.0, 0.01);
        let fr = Vec3::new(0.02, 0.0, 0.0);
        let rate = quad_dynamics(&s, &QuadInput::default(), &fl, &fr, &q, 0.0, G);
        assert_relative_eq!(
            rate.acceleration,
            Vec3::new(0.02, 0.0, -0.01) / q.mass - G * E3,
            epsilon = 1e-12
        );
    }

    #[test]
    fn symmetric_spin_has_no_gyroscopic_term() {
        let q = quad();
        let mut s = QuadState::hover_at(Vec3::zeros());
        s.omega = Vec3::new(0.0, 0.0, 1.0);
        let rate = quad_dynamics(&s, &QuadInput::default(), &Vec3::zeros(), &Vec3::zeros(), &q, 0.0, G);
        assert!(rate.omega_dot.norm() < 1e-12);
    }

    #[test]
    fn static_hover_reconstruction() {
        let mg = 0.035 * G;
        let a = attitude_from_flat(
            &Jet3::constant(Vec3::new(0.0, 0.0, mg), 3),
            &Jet::constant(0.0, 3),
            &quad().inertia,
        )
        .unwrap();
        assert_relative_eq!(a.r, Mat3::identity(), epsilon = 1e-15);
        assert_eq!(a.omega, Vec3::zeros());
        assert_eq!(a.torque, Vec3::zeros());
        assert_relative_eq!(a.thrust, mg);
    }

    #[test]
    fn yaw_spin_reconstruction() {
        let alpha = 0.4;
        let t = 1.3;
        let yaw = Jet::from_derivatives(vec![alpha * t, alpha, 0.0]);
        let j = Mat3::from_diagonal(&Vec3::new(1.0e-5, 2.0e-5, 3.0e-5));
        let a = attitude_from_flat(&Jet3::constant(Vec3::new(0.0, 0.0, 0.3), 2), &yaw, &j).unwrap();
        assert_relative_eq!(a.r, rot_z(alpha * t), epsilon = 1e-14);
        assert_relative_eq!(a.omega, Vec3::new(0.0, 0.0, alpha), epsilon = 1e-14);
        assert!(a.omega_dot.norm() < 1e-14);
        let w = a.omega;
        assert_relative_eq!(a.torque, w.cross(&(j * w)), epsilon = 1e-18);
    }

    #[test]
    fn tilted_thrust_reconstruction() {
        let u = Vec3::new(1.0, 0.0, 9.0);
        let a = attitude_from_flat(&Jet3::constant(u, 2), &Jet::constant(0.0, 2), &quad().inertia).unwrap();
        assert_relative_eq!(a.thrust, 82f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(a.thrust, 9.0554, epsilon = 1e-4);
        assert_relative_eq!(a.r * E3, u / a.thrust, epsilon = 1e-15);
        assert_relative_eq!(a.r.transpose() * u, Vec3::new(0.0, 0.0, a.thrust), epsilon = 1e-14);
        assert_eq!(a.omega, Vec3::zeros());
        assert!(orthonormality_error(&a.r) < 1e-14);
        assert!(yaw_of(&a.r).abs() < 1e-15);
    }

    #[test]
    fn degeneracies() {
        let j = quad().inertia;
        let tiny = Jet3::constant(Vec3::new(0.0, 0.0, 1e-5), 2);
        assert!(matches!(
            attitude_from_flat(&tiny, &Jet::constant(0.0, 2), &j),
            Err(Error::DegenerateThrust { .. })
        ));
        let sideways = Jet3::constant(Vec3::new(0.0, 1.0, 0.0), 2);
        assert!(matches!(
            attitude_from_flat(&sideways, &Jet::constant(0.0, 2), &j),
            Err(Error::GimbalDegeneracy { .. })
        ));
        let shallow = Jet3::constant(Vec3::new(0.0, 1.0, 0.0), 1);
        assert!(matches!(
            attitude_from_flat(&shallow, &Jet::constant(0.0, 1), &j),
            Err(Error::InsufficientDepth { .. })
        ));
    }

    #[test]
    fn hover_reference_gives_weight_thrust() {
        let q = quad();
        let m_bar = q.mass;
        let s = QuadState::hover_at(Vec3::new(0.0, 0.0, 1.0));
        let reference = TrackingReference::hover(s.p, m_bar, G);
        let out = geometric_tracking_control(&s, &reference, &q, 0.0, &TrackingGains::default());
        assert_relative_eq!(out.input.thrust, m_bar * G, epsilon = 1e-15);
        assert!(out.input.torque.norm() < 1e-18);
        assert!(!out.saturated);
    }

    #[test]
    fn position_error_raises_thrust() {
        let q = quad();
        let gains = TrackingGains::default();
        let s = QuadState::hover_at(Vec3::new(0.0, 0.0, 0.9));
        let reference = TrackingReference::hover(Vec3::new(0.0, 0.0, 1.0), q.mass, G);
        let out = geometric_tracking_control(&s, &reference, &q, 0.0, &gains);
        assert_relative_eq!(out.input.thrust, q.mass * (G + gains.kp * 0.1), epsilon = 1e-14);
    }

    #[test]
    fn aligned_attitude_leaves_rate_damping_only() {
        let q = quad();
        let gains = TrackingGains::default();
        let mut s = QuadState::hover_at(Vec3::zeros());
        s.omega = Vec3::new(0.1, -0.2, 0.05);
        let reference = TrackingReference::hover(Vec3::zeros(), q.mass, G);
        let out = geometric_tracking_control(&s, &reference, &q, 0.0, &gains);
        let j = q.inertia;
        let expected = -gains.kw * (j * s.omega) + s.omega.cross(&(j * s.omega));
        assert_relative_eq!(out.input.torque, expected, epsilon = 1e-18);
    }

    #[test]
    fn thrust_clamps_to_bounds() {
        let q = quad();
        let s = QuadState::hover_at(Vec3::new(0.0, 0.0, -10.0));
        let reference = TrackingReference::hover(Vec3::zeros(), q.mass, G);
        let out = geometric_tracking_control(&s, &reference, &q, 0.0, &TrackingGains::default());
        assert!(out.saturated);
        assert_eq!(out.input.thrust, q.f_max);
    }

    #[test]
    fn params_json_shape() {
        let json = r#"{"m_R":0.033,"J":[[1.66e-5,0,0],[0,1.66e-5,0],[0,0,2.93e-5]],"f_max":0.9,"attach":6}"#;
        let q: QuadParams = serde_json::from_str(json).unwrap();
        q.validate().unwrap();
        assert_eq!(q.attach, 6);
        assert_eq!(q.inertia, quad().inertia);
        let mut bad = q.clone();
        bad.inertia[(0, 1)] = 1.0;
        assert!(bad.validate().is_err());
        let _ = exp_so3(&Vec3::zeros());
    }
}
