//! Fixed-step simulation of the coupled cable / quadrotor system.
//!
//! One integrator serves every mode: classical RK4 on positions and
//! velocities, with the robot attitudes advanced in the Munthe-Kaas form
//! `R = R0 exp(xi)` so that they stay on SO(3). Control inputs are held
//! constant over each step.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cable::{
    cable_forces, mass_acceleration, potential_energy, static_equilibrium, CableParams, MassState, Topology,
};
use crate::error::{Error, Result};
use crate::geometry::{dexp_inv, exp_so3, Mat3, Vec3};
use crate::planner::{PlanSample, PlannedTrajectory, Planner};
use crate::quadrotor::{
    geometric_tracking_control, quad_dynamics, QuadInput, QuadParams, QuadState, TrackingGains, TrackingReference,
};
use crate::signal::VectorSignal;

/// Attitude part of a robot state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attitude {
    pub r: Mat3,
    pub omega: Vec3,
}

impl Default for Attitude {
    fn default() -> Self {
        Attitude {
            r: Mat3::identity(),
            omega: Vec3::zeros(),
        }
    }
}

/// Positions and velocities of all masses (robot-carried ones included) and
/// the attitude of every robot, in topology order.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub t: f64,
    pub masses: Vec<MassState>,
    pub attitudes: Vec<Attitude>,
}

impl SystemState {
    pub fn positions(&self) -> Vec<Vec3> {
        self.masses.iter().map(|m| m.p).collect()
    }

    pub fn quad_state(&self, topology: &Topology, slot: usize) -> QuadState {
        let m = &self.masses[topology.robots()[slot] - 1];
        let a = &self.attitudes[slot];
        QuadState {
            p: m.p,
            v: m.v,
            r: a.r,
            omega: a.omega,
        }
    }

    /// State of a planned sample; `at_rest` zeroes every velocity and rate.
    pub fn from_plan_sample(sample: &PlanSample, at_rest: bool) -> Self {
        let masses = sample
            .positions
            .iter()
            .zip(&sample.velocities)
            .map(|(p, v)| MassState {
                p: *p,
                v: if at_rest { Vec3::zeros() } else { *v },
            })
            .collect();
        let attitudes = sample
            .robots
            .iter()
            .map(|r| Attitude {
                r: r.attitude.r,
                omega: if at_rest { Vec3::zeros() } else { r.attitude.omega },
            })
            .collect();
        SystemState {
            t: sample.t,
            masses,
            attitudes,
        }
    }

    /// Static equilibrium with the robots held at `robots`, level attitudes.
    pub fn at_equilibrium(t: f64, topology: &Topology, params: &CableParams, robots: &[Vec3]) -> Result<Self> {
        let p = static_equilibrium(topology, params, robots)?;
        Ok(SystemState::at_rest(t, topology, &p))
    }

    pub fn at_rest(t: f64, topology: &Topology, positions: &[Vec3]) -> Self {
        SystemState {
            t,
            masses: positions
                .iter()
                .map(|p| MassState {
                    p: *p,
                    v: Vec3::zeros(),
                })
                .collect(),
            attitudes: vec![Attitude::default(); topology.robot_count()],
        }
    }

    fn is_finite(&self) -> bool {
        self.masses
            .iter()
            .all(|m| m.p.iter().chain(m.v.iter()).all(|x| x.is_finite()))
            && self
                .attitudes
                .iter()
                .all(|a| a.r.iter().chain(a.omega.iter()).all(|x| x.is_finite()))
    }

    fn max_speed(&self) -> f64 {
        self.masses.iter().map(|m| m.v.norm()).fold(0.0, f64::max)
    }
}

/// Time derivative of a [`SystemState`]. `omega[s]` is the body rate that drives
/// `dR/dt = R hat(omega)` of robot `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRate {
    pub velocity: Vec<Vec3>,
    pub acceleration: Vec<Vec3>,
    pub omega: Vec<Vec3>,
    pub omega_dot: Vec<Vec3>,
}

impl StateRate {
    fn is_finite(&self) -> bool {
        [&self.velocity, &self.acceleration, &self.omega, &self.omega_dot]
            .iter()
            .all(|set| set.iter().all(|v| v.iter().all(|x| x.is_finite())))
    }
}

fn stage(s0: &SystemState, k: &StateRate, xi: &[Vec3], h: f64) -> SystemState {
    SystemState {
        t: s0.t + h,
        masses: s0
            .masses
            .iter()
            .zip(k.velocity.iter().zip(&k.acceleration))
            .map(|(m, (v, a))| MassState {
                p: m.p + h * v,
                v: m.v + h * a,
            })
            .collect(),
        attitudes: s0
            .attitudes
            .iter()
            .zip(xi.iter().zip(&k.omega_dot))
            .map(|(at, (x, wd))| Attitude {
                r: at.r * exp_so3(x),
                omega: at.omega + h * wd,
            })
            .collect(),
    }
}

/// Gram-Schmidt on the columns; removes round-off drift from `R`.
fn reorthonormalize(r: &Mat3) -> Mat3 {
    let x = r.column(0).normalize();
    let y = r.column(1) - x * x.dot(&r.column(1));
    let y = y.normalize();
    let z = x.cross(&y);
    Mat3::from_columns(&[x, y, z])
}

/// One RK4 step. `dynamics` is evaluated at the four stage states; attitudes
/// use the truncated `dexp^{-1}` so the update is `R0 exp(xi)`.
pub fn rk4_step<F>(state: &SystemState, dt: f64, mut dynamics: F) -> Result<SystemState>
where
    F: FnMut(&SystemState) -> Result<StateRate>,
{
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidConfig(format!("time step must be positive, got {dt}")));
    }
    let t = state.t;
    let mut eval = |s: &SystemState| -> Result<StateRate> {
        let k = dynamics(s)?;
        if !k.is_finite() {
            return Err(Error::NonFiniteDerivative { t });
        }
        Ok(k)
    };
    // For R = R0 exp(xi) with body rates, xi' = dexp^{-1}_{-xi}(omega).
    let lie = |xi: &[Vec3], k: &StateRate| -> Vec<Vec3> {
        xi.iter().zip(&k.omega).map(|(x, w)| dexp_inv(&(-x), w)).collect()
    };
    let zero = vec![Vec3::zeros(); state.attitudes.len()];
    let k1 = eval(state)?;
    let w1 = lie(&zero, &k1);
    let xi2: Vec<Vec3> = w1.iter().map(|w| 0.5 * dt * w).collect();
    let k2 = eval(&stage(state, &k1, &xi2, 0.5 * dt))?;
    let w2 = lie(&xi2, &k2);
    let xi3: Vec<Vec3> = w2.iter().map(|w| 0.5 * dt * w).collect();
    let k3 = eval(&stage(state, &k2, &xi3, 0.5 * dt))?;
    let w3 = lie(&xi3, &k3);
    let xi4: Vec<Vec3> = w3.iter().map(|w| dt * w).collect();
    let k4 = eval(&stage(state, &k3, &xi4, dt))?;
    let w4 = lie(&xi4, &k4);

    let c = dt / 6.0;
    let comb = |a: &Vec3, b: &Vec3, cc: &Vec3, d: &Vec3| c * (a + 2.0 * b + 2.0 * cc + d);
    let masses = (0..state.masses.len())
        .map(|i| MassState {
            p: state.masses[i].p + comb(&k1.velocity[i], &k2.velocity[i], &k3.velocity[i], &k4.velocity[i]),
            v: state.masses[i].v
                + comb(
                    &k1.acceleration[i],
                    &k2.acceleration[i],
                    &k3.acceleration[i],
                    &k4.acceleration[i],
                ),
        })
        .collect();
    let attitudes = (0..state.attitudes.len())
        .map(|s| {
            let xi = comb(&w1[s], &w2[s], &w3[s], &w4[s]);
            Attitude {
                r: reorthonormalize(&(state.attitudes[s].r * exp_so3(&xi))),
                omega: state.attitudes[s].omega
                    + comb(&k1.omega_dot[s], &k2.omega_dot[s], &k3.omega_dot[s], &k4.omega_dot[s]),
            }
        })
        .collect();
    Ok(SystemState {
        t: t + dt,
        masses,
        attitudes,
    })
}

/// Rate of the full coupled system under constant robot inputs.
pub fn plant_rate(
    topology: &Topology,
    params: &CableParams,
    quads: &[QuadParams],
    inputs: &[QuadInput],
    s: &SystemState,
) -> Result<StateRate> {
    let n = topology.n();
    let f = cable_forces(params, &s.positions())?;
    let g = params.gravity();
    let mut rate = StateRate {
        velocity: s.masses.iter().map(|m| m.v).collect(),
        acceleration: Vec::with_capacity(n),
        omega: Vec::with_capacity(quads.len()),
        omega_dot: Vec::with_capacity(quads.len()),
    };
    for i in 1..=n {
        let m = &s.masses[i - 1];
        match topology.robot_slot(i) {
            Some(slot) => {
                let q = s.quad_state(topology, slot);
                let d = quad_dynamics(&q, &inputs[slot], &f[i - 1], &f[i], &quads[slot], params.mass(i), g);
                rate.acceleration.push(d.acceleration);
                rate.omega.push(d.omega);
                rate.omega_dot.push(d.omega_dot);
            }
            None => rate
                .acceleration
                .push(mass_acceleration(params, i, &m.v, &f[i], &f[i - 1])),
        }
    }
    Ok(rate)
}

/// Prescribed positions of the boundary masses over time.
pub trait BoundarySource {
    /// Indices of the prescribed masses.
    fn indices(&self) -> &[usize];
    /// Positions and velocities of the prescribed masses at `t`.
    fn boundary(&self, t: f64) -> Vec<(Vec3, Vec3)>;
}

/// Sampled boundary motion, linearly interpolated; velocities are the slope
/// of the current interval.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTrack {
    pub indices: Vec<usize>,
    pub times: Vec<f64>,
    /// `positions[k][b]`: boundary `b` at `times[k]`.
    pub positions: Vec<Vec<Vec3>>,
}

impl BoundaryTrack {
    pub fn fixed(indices: Vec<usize>, positions: Vec<Vec3>) -> Self {
        BoundaryTrack {
            indices,
            times: vec![0.0],
            positions: vec![positions],
        }
    }
}

impl BoundarySource for BoundaryTrack {
    fn indices(&self) -> &[usize] {
        &self.indices
    }

    fn boundary(&self, t: f64) -> Vec<(Vec3, Vec3)> {
        let ts = &self.times;
        let last = ts.len() - 1;
        if ts.len() == 1 || t <= ts[0] || t >= ts[last] {
            let k = if ts.len() == 1 || t <= ts[0] { 0 } else { last };
            return self.positions[k].iter().map(|p| (*p, Vec3::zeros())).collect();
        }
        let k = ts.partition_point(|x| *x <= t) - 1;
        let h = ts[k + 1] - ts[k];
        let w = (t - ts[k]) / h;
        self.positions[k]
            .iter()
            .zip(&self.positions[k + 1])
            .map(|(a, b)| (a + (b - a) * w, (b - a) / h))
            .collect()
    }
}

/// Boundary motion given by analytic signals (exact velocities).
#[derive(Debug, Clone, PartialEq)]
pub struct SignalBoundary {
    pub indices: Vec<usize>,
    pub signals: Vec<VectorSignal>,
}

impl BoundarySource for SignalBoundary {
    fn indices(&self) -> &[usize] {
        &self.indices
    }

    fn boundary(&self, t: f64) -> Vec<(Vec3, Vec3)> {
        self.signals
            .iter()
            .map(|s| {
                let j = s.jet(t, 1);
                (j.value(), j.derivative(1))
            })
            .collect()
    }
}

/// Rate of the free masses with the boundary masses prescribed.
pub fn boundary_rate(params: &CableParams, boundary: &[usize], s: &SystemState) -> Result<StateRate> {
    let n = params.n();
    let f = cable_forces(params, &s.positions())?;
    let mut velocity = Vec::with_capacity(n);
    let mut acceleration = Vec::with_capacity(n);
    for i in 1..=n {
        let m = &s.masses[i - 1];
        if boundary.contains(&i) {
            velocity.push(Vec3::zeros());
            acceleration.push(Vec3::zeros());
        } else {
            velocity.push(m.v);
            acceleration.push(mass_acceleration(params, i, &m.v, &f[i], &f[i - 1]));
        }
    }
    Ok(StateRate {
        velocity,
        acceleration,
        omega: vec![],
        omega_dot: vec![],
    })
}

fn set_boundary(s: &mut SystemState, indices: &[usize], values: &[(Vec3, Vec3)]) {
    for (&i, (p, v)) in indices.iter().zip(values) {
        s.masses[i - 1] = MassState { p: *p, v: *v };
    }
}

/// One boundary-driven RK4 step: boundary masses follow `source` at every stage.
pub fn boundary_step(
    params: &CableParams,
    source: &dyn BoundarySource,
    state: &SystemState,
    dt: f64,
) -> Result<SystemState> {
    let idx = source.indices();
    let stripped;
    let state = if state.attitudes.is_empty() {
        state
    } else {
        stripped = SystemState {
            attitudes: vec![],
            ..state.clone()
        };
        &stripped
    };
    let mut next = rk4_step(state, dt, |s| {
        let mut s = s.clone();
        let b = source.boundary(s.t);
        set_boundary(&mut s, idx, &b);
        boundary_rate(params, idx, &s)
    })?;
    let b = source.boundary(next.t);
    set_boundary(&mut next, idx, &b);
    Ok(next)
}

/// Supplies robot references to the tracked simulation.
pub trait ReferenceSource {
    /// References for every robot at `t`, given the current measured state.
    fn references(&mut self, t: f64, state: &SystemState) -> Result<Vec<TrackingReference>>;
    /// Desired positions of the controlled cable outputs at `t`.
    fn desired_outputs(&self, t: f64) -> Vec<(usize, Vec3)>;
}

impl ReferenceSource for Planner {
    fn references(&mut self, t: f64, _state: &SystemState) -> Result<Vec<TrackingReference>> {
        let s = self.sample(t)?;
        Ok((0..s.robots.len()).map(|k| s.tracking_reference(k)).collect())
    }

    fn desired_outputs(&self, t: f64) -> Vec<(usize, Vec3)> {
        self.flat_targets(t)
    }
}

/// A tabulated plan as a reference source; `outputs` selects which planned
/// positions count as desired outputs.
pub struct TabulatedReference<'a> {
    pub plan: &'a PlannedTrajectory,
    pub outputs: Vec<usize>,
}

impl ReferenceSource for TabulatedReference<'_> {
    fn references(&mut self, t: f64, _state: &SystemState) -> Result<Vec<TrackingReference>> {
        Ok(self.plan.references_at(t))
    }

    fn desired_outputs(&self, t: f64) -> Vec<(usize, Vec3)> {
        self.outputs.iter().map(|&i| (i, self.plan.position_at(i, t))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    #[default]
    Tracked,
    BoundaryDriven,
    ClosedLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    /// Full planned state at the start time.
    #[default]
    Planned,
    /// Planned positions and attitudes with every velocity and rate zeroed.
    PlannedAtRest,
    /// Robots at their planned start positions, cable at static equilibrium.
    Equilibrium,
    /// `initial_positions` from the config, at rest.
    Explicit,
}

/// Offset added to one mass's initial position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    pub mass: usize,
    pub offset: [f64; 3],
}

fn default_dt() -> f64 {
    1e-3
}

fn default_v_max() -> f64 {
    50.0
}

fn default_log_rate() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub duration: f64,
    #[serde(default)]
    pub t0: f64,
    #[serde(default)]
    pub mode: SimMode,
    #[serde(default)]
    pub init: InitSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_positions: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<Disturbance>,
    #[serde(default = "default_v_max")]
    pub v_max: f64,
    #[serde(default = "default_log_rate")]
    pub log_rate: f64,
    #[serde(default)]
    pub gains: TrackingGains,
}

impl SimConfig {
    pub fn new(duration: f64) -> Self {
        SimConfig {
            dt: default_dt(),
            duration,
            t0: 0.0,
            mode: SimMode::default(),
            init: InitSource::default(),
            initial_positions: None,
            disturbance: None,
            v_max: default_v_max(),
            log_rate: default_log_rate(),
            gains: TrackingGains::default(),
        }
    }

    pub fn validate(&self, params: Option<&CableParams>) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.duration >= self.dt) {
            return bad(format!("duration {} is shorter than dt {}", self.duration, self.dt));
        }
        if !(self.v_max > 0.0) || !(self.log_rate > 0.0) {
            return bad("v_max and log_rate must be positive".into());
        }
        if self.init == InitSource::Explicit && self.initial_positions.is_none() {
            return bad("init = explicit needs initial_positions".into());
        }
        if let Some(p) = params {
            let k_max = p
                .segments()
                .iter()
                .chain(p.ground().iter())
                .map(|s| s.k)
                .fold(0.0, f64::max);
            let m_min = p.masses().iter().copied().fold(f64::INFINITY, f64::min);
            let w_max = (k_max / m_min).sqrt();
            if self.dt >= 2.0 / w_max {
                log::warn!(
                    "dt = {} exceeds the spring stability estimate 2/omega_max = {:.3e}",
                    self.dt,
                    2.0 / w_max
                );
            }
        }
        Ok(())
    }

    /// Number of integration steps.
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    fn log_every(&self) -> usize {
        ((1.0 / (self.log_rate * self.dt)).round() as usize).max(1)
    }

    pub fn apply_disturbance(&self, state: &mut SystemState) -> Result<()> {
        if let Some(d) = &self.disturbance {
            let m = state
                .masses
                .get_mut(d.mass.wrapping_sub(1))
                .ok_or_else(|| Error::InvalidConfig(format!("disturbance on unknown mass {}", d.mass)))?;
            m.p += Vec3::from(d.offset);
        }
        Ok(())
    }
}

/// Hex SHA-256 of a serialisable value's JSON form.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serialisable");
    hex::encode(Sha256::digest(&json))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotLog {
    pub r: Mat3,
    pub omega: Vec3,
    pub input: QuadInput,
    pub reference: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    /// `f_0 .. f_{n-1}`.
    pub forces: Vec<Vec3>,
    pub robots: Vec<RobotLog>,
    /// Desired outputs `(mass index, position)`.
    pub desired: Vec<(usize, Vec3)>,
}

/// Time series of a simulation run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimLog {
    pub n: usize,
    pub robots: Vec<usize>,
    pub rows: Vec<LogRow>,
    pub config_hash: String,
    pub params_hash: String,
    /// Control steps in which a thrust command was clamped.
    pub saturated_steps: usize,
}

/// Mean and max of `|p_sim - p_ref|` for one cable point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputMetric {
    pub index: usize,
    pub mean: f64,
    pub max: f64,
    pub samples: usize,
}

impl SimLog {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        let xyz = |h: &mut Vec<String>, name: String| {
            for a in ["x", "y", "z"] {
                h.push(format!("{name}{a}"));
            }
        };
        for prefix in ["p", "v"] {
            for i in 1..=self.n {
                xyz(&mut h, format!("{prefix}{i}"));
            }
        }
        for i in 0..self.n {
            xyz(&mut h, format!("f{i}"));
        }
        for &j in &self.robots {
            for r in 1..=3 {
                for c in 1..=3 {
                    h.push(format!("R{j}_{r}{c}"));
                }
            }
            xyz(&mut h, format!("w{j}"));
            h.push(format!("thrust{j}"));
            xyz(&mut h, format!("tau{j}"));
            xyz(&mut h, format!("pref{j}"));
        }
        if let Some(row) = self.rows.first() {
            for (i, _) in &row.desired {
                xyz(&mut h, format!("pd{i}"));
            }
        }
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.header())?;
        for row in &self.rows {
            let mut r = vec![row.t];
            for v in row.positions.iter().chain(&row.velocities).chain(&row.forces) {
                r.extend_from_slice(v.as_slice());
            }
            for rb in &row.robots {
                r.extend(rb.r.transpose().iter());
                r.extend_from_slice(rb.omega.as_slice());
                r.push(rb.input.thrust);
                r.extend_from_slice(rb.input.torque.as_slice());
                r.extend_from_slice(rb.reference.as_slice());
            }
            for (_, p) in &row.desired {
                r.extend_from_slice(p.as_slice());
            }
            wr.write_record(r.iter().map(|x| format!("{x:e}")))?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Output error statistics for every desired output, over rows with
    /// `t_from <= t <= t_to`.
    pub fn output_error_metrics_between(&self, t_from: f64, t_to: f64) -> Vec<OutputMetric> {
        let rows: Vec<&LogRow> = self.rows.iter().filter(|r| r.t >= t_from && r.t <= t_to).collect();
        let Some(first) = rows.first() else {
            return vec![];
        };
        first
            .desired
            .iter()
            .enumerate()
            .map(|(k, (i, _))| {
                let errors = rows.iter().map(|r| (r.positions[i - 1] - r.desired[k].1).norm());
                summarize(*i, errors)
            })
            .collect()
    }

    pub fn output_error_metrics(&self) -> Vec<OutputMetric> {
        self.output_error_metrics_between(f64::NEG_INFINITY, f64::INFINITY)
    }
}

fn summarize(index: usize, errors: impl Iterator<Item = f64>) -> OutputMetric {
    // compensated sum so long runs of equal errors average back exactly
    let (mut sum, mut carry, mut max, mut count) = (0.0_f64, 0.0_f64, 0.0_f64, 0usize);
    for e in errors {
        let t = sum + e;
        carry += if sum.abs() >= e.abs() {
            (sum - t) + e
        } else {
            (e - t) + sum
        };
        sum = t;
        max = max.max(e);
        count += 1;
    }
    OutputMetric {
        index,
        mean: if count == 0 { 0.0 } else { (sum + carry) / count as f64 },
        max,
        samples: count,
    }
}

/// Per-sample 2-norm error between two position series, averaged over time.
pub fn output_error_metrics(index: usize, simulated: &[Vec3], reference: &[Vec3]) -> OutputMetric {
    summarize(index, simulated.iter().zip(reference).map(|(a, b)| (a - b).norm()))
}

/// Kinetic + spring + gravitational energy of the cable masses.
pub fn cable_energy(params: &CableParams, state: &SystemState) -> f64 {
    let kinetic: f64 = state
        .masses
        .iter()
        .zip(params.masses())
        .map(|(m, mass)| 0.5 * mass * m.v.norm_squared())
        .sum();
    kinetic + potential_energy(params, &state.positions())
}

/// Simulation of one plant (topology, true cable parameters, robots).
pub struct Simulator<'a> {
    pub topology: &'a Topology,
    pub params: &'a CableParams,
    pub quads: &'a [QuadParams],
    pub config: &'a SimConfig,
}

impl Simulator<'_> {
    fn new_log(&self) -> SimLog {
        SimLog {
            n: self.topology.n(),
            robots: self.topology.robots().to_vec(),
            rows: vec![],
            config_hash: content_hash(self.config),
            params_hash: content_hash(self.params),
            saturated_steps: 0,
        }
    }

    fn check(&self, s: &SystemState) -> Result<()> {
        if !s.is_finite() {
            return Err(Error::NonFiniteDerivative { t: s.t });
        }
        let speed = s.max_speed();
        if speed > self.config.v_max {
            return Err(Error::Unstable {
                t: s.t,
                speed,
                limit: self.config.v_max,
            });
        }
        Ok(())
    }

    /// Robots under the geometric controller, references from `source`.
    pub fn run_tracked(&self, source: &mut dyn ReferenceSource, initial: SystemState) -> Result<SimLog> {
        self.config.validate(Some(self.params))?;
        let mut log = self.new_log();
        let every = self.config.log_every();
        let steps = self.config.steps();
        let t0 = initial.t;
        let mut state = initial;
        for k in 0..=steps {
            state.t = t0 + k as f64 * self.config.dt;
            self.check(&state)?;
            let refs = source.references(state.t, &state)?;
            let mut inputs = Vec::with_capacity(refs.len());
            for (slot, r) in refs.iter().enumerate() {
                let j = self.topology.robots()[slot];
                let out = geometric_tracking_control(
                    &state.quad_state(self.topology, slot),
                    r,
                    &self.quads[slot],
                    self.params.mass(j),
                    &self.config.gains,
                );
                log.saturated_steps += out.saturated as usize;
                inputs.push(out.input);
            }
            if k % every == 0 {
                let f = cable_forces(self.params, &state.positions())?;
                log.rows.push(LogRow {
                    t: state.t,
                    positions: state.positions(),
                    velocities: state.masses.iter().map(|m| m.v).collect(),
                    forces: f[..self.topology.n()].to_vec(),
                    robots: state
                        .attitudes
                        .iter()
                        .zip(inputs.iter().zip(&refs))
                        .map(|(a, (u, r))| RobotLog {
                            r: a.r,
                            omega: a.omega,
                            input: *u,
                            reference: r.position,
                        })
                        .collect(),
                    desired: source.desired_outputs(state.t),
                });
            }
            if k == steps {
                break;
            }
            state = rk4_step(&state, self.config.dt, |s| {
                plant_rate(self.topology, self.params, self.quads, &inputs, s)
            })?;
        }
        Ok(log)
    }

    /// Cable only, boundary masses prescribed by `source`; `desired` supplies
    /// reference outputs for the metrics (may be empty).
    pub fn run_boundary(
        &self,
        source: &dyn BoundarySource,
        initial: SystemState,
        desired: &dyn Fn(f64) -> Vec<(usize, Vec3)>,
    ) -> Result<SimLog> {
        self.config.validate(Some(self.params))?;
        let mut log = self.new_log();
        log.robots.clear();
        let every = self.config.log_every();
        let steps = self.config.steps();
        let t0 = initial.t;
        let mut state = initial;
        state.attitudes.clear();
        set_boundary(&mut state, source.indices(), &source.boundary(t0));
        for k in 0..=steps {
            self.check(&state)?;
            if k % every == 0 {
                let f = cable_forces(self.params, &state.positions())?;
                log.rows.push(LogRow {
                    t: state.t,
                    positions: state.positions(),
                    velocities: state.masses.iter().map(|m| m.v).collect(),
                    forces: f[..self.topology.n()].to_vec(),
                    robots: vec![],
                    desired: desired(state.t),
                });
            }
            if k == steps {
                break;
            }
            state = boundary_step(self.params, source, &state, self.config.dt)?;
            state.t = t0 + (k + 1) as f64 * self.config.dt;
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cable::{Segment, SystemClass};
    use approx::assert_relative_eq;

    fn ballistic(s: &SystemState) -> Result<StateRate> {
        Ok(StateRate {
            velocity: s.masses.iter().map(|m| m.v).collect(),
            acceleration: vec![Vec3::new(0.0, 0.0, -9.81); s.masses.len()],
            omega: vec![],
            omega_dot: vec![],
        })
    }

    #[test]
    fn ballistic_drop_is_exact() {
        let mut s = SystemState {
            t: 0.0,
            masses: vec![MassState::default()],
            attitudes: vec![],
        };
        for _ in 0..100 {
            s = rk4_step(&s, 0.01, ballistic).unwrap();
        }
        assert_relative_eq!(s.masses[0].p.z, -4.905, epsilon = 1e-9);
        assert!(matches!(rk4_step(&s, 0.0, ballistic), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn constant_spin_stays_on_so3() {
        let s0 = SystemState {
            t: 0.0,
            masses: vec![],
            attitudes: vec![Attitude {
                r: Mat3::identity(),
                omega: Vec3::new(0.0, 0.0, 2.0),
            }],
        };
        let f = |s: &SystemState| {
            Ok(StateRate {
                velocity: vec![],
                acceleration: vec![],
                omega: s.attitudes.iter().map(|a| a.omega).collect(),
                omega_dot: vec![Vec3::zeros()],
            })
        };
        let mut s = s0;
        for _ in 0..1000 {
            s = rk4_step(&s, 1e-3, f).unwrap();
        }
        assert_relative_eq!(s.attitudes[0].r, crate::geometry::rot_z(2.0), epsilon = 1e-12);
    }

    #[test]
    fn vertical_oscillator_period() {
        let (m, k) = (1.16e-3, 11.312);
        let topo = Topology::new(SystemClass::B, 2, vec![2]).unwrap();
        let params = CableParams::new(2, None, vec![Segment { k, l0: 0.2 }], vec![m; 2], vec![0.0; 2], 9.81).unwrap();
        let top = Vec3::new(0.0, 0.0, 1.0);
        let eq = static_equilibrium(&topo, &params, &[top]).unwrap();
        let mut s = SystemState::at_rest(0.0, &topo, &eq);
        s.masses[0].p.z -= 0.01;
        let src = BoundaryTrack::fixed(vec![2], vec![top]);
        let dt = 1e-4;
        let mut prev_z = s.masses[0].p.z - eq[0].z;
        let mut crossings = vec![];
        for k in 0..2000 {
            s = boundary_step(&params, &src, &s, dt).unwrap();
            let z = s.masses[0].p.z - eq[0].z;
            if prev_z < 0.0 && z >= 0.0 {
                crossings.push(k as f64 * dt + dt * (-prev_z) / (z - prev_z));
            }
            prev_z = z;
        }
        let period = (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64;
        let expected = 2.0 * std::f64::consts::PI * (m / k).sqrt();
        assert_relative_eq!(expected, 0.06363, epsilon = 1e-5);
        assert!(((period - expected) / expected).abs() < 1e-3, "{period} vs {expected}");
    }

    #[test]
    fn constant_offset_metric_is_five_centimetres() {
        let sim = vec![Vec3::new(1.03, 2.0, 0.54); 10];
        let reference = vec![Vec3::new(1.0, 2.0, 0.5); 10];
        let m = output_error_metrics(3, &sim, &reference);
        assert_relative_eq!(m.mean, 0.05, epsilon = 1e-15);
        assert_relative_eq!(m.max, 0.05, epsilon = 1e-15);
        assert_eq!(output_error_metrics(3, &sim, &sim).mean, 0.0);
    }

    #[test]
    fn config_json_defaults() {
        let c: SimConfig = serde_json::from_str(r#"{"duration": 2.0}"#).unwrap();
        assert_eq!(c, SimConfig::new(2.0));
        assert!(serde_json::from_str::<SimConfig>(r#"{"duration": 2.0, "dtt": 1}"#).is_err());
        let mut c = SimConfig::new(1.0);
        c.dt = 0.0;
        assert!(c.validate(None).is_err());
    }
}
