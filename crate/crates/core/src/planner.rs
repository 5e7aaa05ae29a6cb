//! Constructive flatness recursion.
//!
//! Starting from the flat outputs, the chain is walked mass by mass:
//! every free mass turns its position jet into the force of the next segment
//! (Newton's law solved for `f_i`), and every segment force is inverted into
//! the position of the following mass. At a robot the next segment force is
//! fixed by the next flat position, and the robot's own balance yields the
//! thrust vector, from which attitude, rates and torque follow.
//!
//! Class (a)/(b) walk upward from mass 1. Class (c) starts from an interior
//! pair of flat points and walks both ways.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cable::{cable_forces, CableParams, SystemClass, Topology, SEPARATION_FLOOR};
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3, E3};
use crate::jet::Jet3;
use crate::quadrotor::{attitude_from_flat, FlatAttitude, QuadParams, TrackingReference};
use crate::signal::{Signal, VectorSignal};

/// Smallest segment force the recursion can invert, N.
pub const FORCE_FLOOR: f64 = 1e-6;

/// Dynamics-residual tolerance for planned trajectories.
pub const RESIDUAL_TOL: f64 = 1e-6;

/// Default sampling rate of planned trajectories, Hz.
pub const DEFAULT_RATE: f64 = 100.0;

/// Which root of the force/position inversion to take.
///
/// A segment force only fixes the spring direction up to the sign of the
/// elongation. Taut cables use [`SpringBranch::Tension`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpringBranch {
    #[default]
    Tension,
    Compression,
}

/// Spring force `f = -k [d - l0 d/|d|]`, `d = p_i - p_next`, on jets.
pub fn spring_force_jet(p_i: &Jet3, p_next: &Jet3, k: f64, l0: f64) -> Result<Jet3> {
    let d = p_i - p_next;
    let len = d.norm(SEPARATION_FLOOR).map_err(|_| Error::SeparationTooSmall {
        separation: d.value().norm(),
        limit: SEPARATION_FLOOR,
    })?;
    let dir = d.div_scalar(&len)?;
    Ok((&d - &dir.scale(l0)).scale(-k))
}

/// Ground-anchor force `f_0 = k0 (p_1 - l00 p_1/|p_1|)` on jets.
pub fn anchor_force_jet(p1: &Jet3, k0: f64, l00: f64) -> Result<Jet3> {
    spring_force_jet(&Jet3::zeros(p1.depth()), p1, k0, l00)
}

/// Kinematic part `m p'' + m g e3 + c p'` shared by both walking directions.
fn inertial_jet(params: &CableParams, i: usize, p: &Jet3) -> Result<Jet3> {
    if p.depth() < 2 {
        return Err(Error::InsufficientDepth {
            needed: 2,
            have: p.depth(),
        });
    }
    let v = p.differentiated()?;
    let a = v.differentiated()?;
    let m = params.mass(i);
    Ok((&a.scale(m) + &v.scale(params.damping(i))).offset(&(m * params.gravity() * E3)))
}

/// `f_i = m_i p_i'' + m_i g e3 + f_{i-1} + c_i p_i'` for a free mass `i`.
/// Costs two derivative orders.
pub fn chain_force_jet(params: &CableParams, i: usize, p_i: &Jet3, f_prev: &Jet3) -> Result<Jet3> {
    Ok(&inertial_jet(params, i, p_i)? + f_prev)
}

/// Same balance solved for the segment below:
/// `f_{i-1} = f_i - m_i p_i'' - m_i g e3 - c_i p_i'`.
pub fn backward_force_jet(params: &CableParams, i: usize, p_i: &Jet3, f_i: &Jet3) -> Result<Jet3> {
    Ok(f_i - &inertial_jet(params, i, p_i)?)
}

fn force_direction(f: &Jet3, index: usize) -> Result<Jet3> {
    let norm = f.value().norm();
    if norm < FORCE_FLOOR || !norm.is_finite() {
        return Err(Error::ZeroForce { index, norm });
    }
    f.unit(0.0)
}

/// Position of mass `i + 1` from `p_i` and the force `f_i` of segment `i`.
///
/// Tension branch: `p_{i+1} = p_i + f_i/k_i + l0_i f_i/|f_i|`, the exact
/// inverse of [`crate::cable::spring_force`] for a stretched segment.
pub fn next_position_jet(params: &CableParams, i: usize, p_i: &Jet3, f_i: &Jet3, branch: SpringBranch) -> Result<Jet3> {
    let seg = segment(params, i)?;
    let dir = force_direction(f_i, i)?;
    let sign = match branch {
        SpringBranch::Tension => 1.0,
        SpringBranch::Compression => -1.0,
    };
    Ok(&(p_i + &f_i.scale(1.0 / seg.k)) + &dir.scale(sign * seg.l0))
}

/// Position of mass `i - 1` from `p_i` and the force `f_{i-1}` of segment `i - 1`.
pub fn previous_position_jet(
    params: &CableParams,
    i: usize,
    p_i: &Jet3,
    f_prev: &Jet3,
    branch: SpringBranch,
) -> Result<Jet3> {
    let seg = segment(params, i - 1)?;
    let dir = force_direction(f_prev, i - 1)?;
    let sign = match branch {
        SpringBranch::Tension => 1.0,
        SpringBranch::Compression => -1.0,
    };
    Ok(&(p_i - &f_prev.scale(1.0 / seg.k)) - &dir.scale(sign * seg.l0))
}

/// Thrust vector `u_j = m_bar (p_j'' + g e3) - f_j + f_{j-1}` of robot `j`.
pub fn robot_thrust_jet(m_bar: f64, g: f64, p_j: &Jet3, f_prev: &Jet3, f_j: &Jet3) -> Result<Jet3> {
    if p_j.depth() < 2 {
        return Err(Error::InsufficientDepth {
            needed: 2,
            have: p_j.depth(),
        });
    }
    let a = p_j.differentiated()?.differentiated()?;
    Ok(&(&a.scale(m_bar).offset(&(m_bar * g * E3)) - f_j) + f_prev)
}

/// Force of segment `j` at a robot, from the flat position of mass `j + 1`.
pub fn robot_next_force_jet(params: &CableParams, j: usize, p_j: &Jet3, p_next: &Jet3) -> Result<Jet3> {
    let seg = segment(params, j)?;
    spring_force_jet(p_j, p_next, seg.k, seg.l0)
}

fn segment(params: &CableParams, i: usize) -> Result<crate::cable::Segment> {
    params
        .segment(i)
        .ok_or_else(|| Error::InvalidParams(format!("segment {i} does not exist")))
}

/// Flat-output trajectories: positions of selected masses and robot yaws.
///
/// JSON form is a list of channels:
/// `{"target": "p3", "x": <signal>, "y": <signal>, "z": <signal>}` or
/// `{"target": "yaw_1", "primitive": ..., ...}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Value>", into = "Vec<Value>")]
pub struct FlatOutputs {
    positions: BTreeMap<usize, VectorSignal>,
    yaws: BTreeMap<usize, Signal>,
}

impl FlatOutputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_position(mut self, i: usize, signal: VectorSignal) -> Self {
        self.positions.insert(i, signal);
        self
    }

    pub fn with_yaw(mut self, j: usize, signal: Signal) -> Self {
        self.yaws.insert(j, signal);
        self
    }

    pub fn position(&self, i: usize) -> Option<&VectorSignal> {
        self.positions.get(&i)
    }

    pub fn yaw(&self, j: usize) -> Option<&Signal> {
        self.yaws.get(&j)
    }

    pub fn position_indices(&self) -> BTreeSet<usize> {
        self.positions.keys().copied().collect()
    }

    pub fn yaw_indices(&self) -> BTreeSet<usize> {
        self.yaws.keys().copied().collect()
    }

    /// Number of scalar channels: three per position, one per yaw.
    pub fn channel_count(&self) -> usize {
        3 * self.positions.len() + self.yaws.len()
    }

    /// Mirror every position across the x-z plane (y -> -y) and negate yaws.
    pub fn mirrored_y(&self) -> Self {
        let neg = |s: &Signal| Signal::Product {
            factors: vec![Signal::constant(-1.0), s.clone()],
        };
        FlatOutputs {
            positions: self
                .positions
                .iter()
                .map(|(i, v)| {
                    (
                        *i,
                        VectorSignal {
                            x: v.x.clone(),
                            y: neg(&v.y),
                            z: v.z.clone(),
                        },
                    )
                })
                .collect(),
            yaws: self.yaws.iter().map(|(j, s)| (*j, neg(s))).collect(),
        }
    }
}

fn parse_target(target: &str) -> Option<(bool, usize)> {
    if let Some(rest) = target.strip_prefix("yaw_") {
        rest.parse().ok().map(|j| (false, j))
    } else {
        target.strip_prefix('p').and_then(|r| r.parse().ok()).map(|i| (true, i))
    }
}

impl TryFrom<Vec<Value>> for FlatOutputs {
    type Error = String;

    fn try_from(channels: Vec<Value>) -> std::result::Result<Self, String> {
        let mut out = FlatOutputs::new();
        for ch in channels {
            let Value::Object(mut map) = ch else {
                return Err("flat channel must be an object".into());
            };
            let target = match map.remove("target") {
                Some(Value::String(s)) => s,
                _ => return Err("flat channel needs a string \"target\"".into()),
            };
            let Some((is_position, index)) = parse_target(&target) else {
                return Err(format!("unknown flat target {target:?} (expected p<i> or yaw_<j>)"));
            };
            if index == 0 {
                return Err(format!("flat target {target:?}: indices are 1-based"));
            }
            if is_position {
                let v: VectorSignal =
                    serde_json::from_value(Value::Object(map)).map_err(|e| format!("{target}: {e}"))?;
                if out.positions.insert(index, v).is_some() {
                    return Err(format!("duplicate flat target {target}"));
                }
            } else {
                let s: Signal = serde_json::from_value(Value::Object(map)).map_err(|e| format!("{target}: {e}"))?;
                if out.yaws.insert(index, s).is_some() {
                    return Err(format!("duplicate flat target {target}"));
                }
            }
        }
        Ok(out)
    }
}

impl From<FlatOutputs> for Vec<Value> {
    fn from(f: FlatOutputs) -> Self {
        let mut out = Vec::new();
        for (i, v) in f.positions {
            let mut m = match serde_json::to_value(v) {
                Ok(Value::Object(m)) => m,
                _ => unreachable!("vector signals serialise to objects"),
            };
            m.insert("target".into(), Value::String(format!("p{i}")));
            out.push(Value::Object(m));
        }
        for (j, s) in f.yaws {
            let mut m = match serde_json::to_value(s) {
                Ok(Value::Object(m)) => m,
                _ => unreachable!("signals serialise to objects"),
            };
            m.insert("target".into(), Value::String(format!("yaw_{j}")));
            out.push(Value::Object(m));
        }
        out
    }
}

/// Flat position indices required by a topology (with the interior pair for class (c)).
pub fn required_positions(topology: &Topology, pair: Option<usize>) -> BTreeSet<usize> {
    let n = topology.n();
    let r = topology.robots();
    match (topology.class(), pair) {
        (SystemClass::C, Some(i)) => {
            let mut s: BTreeSet<usize> = [i, i + 1].into();
            s.extend(r.iter().filter(|&&j| j > i && j != n).map(|j| j + 1));
            s.extend(r.iter().filter(|&&k| k < i && k != 1).map(|k| k - 1));
            s
        }
        _ => {
            let mut s: BTreeSet<usize> = [1].into();
            s.extend(r.iter().filter(|&&j| j != n).map(|j| j + 1));
            s
        }
    }
}

/// Constant offsets added to the first propagated position on each side of a
/// class (c) pair: `forward` to `p_{i+2}`, `backward` to `p_{i-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChainCorrection {
    pub forward: Vec3,
    pub backward: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotSample {
    /// Mass index carrying the robot.
    pub index: usize,
    /// `u, u', u''`.
    pub thrust_vector: [Vec3; 3],
    /// `psi, psi', psi''`.
    pub yaw: [f64; 3],
    pub attitude: FlatAttitude,
}

/// Full state and inputs at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanSample {
    pub t: f64,
    /// `positions[i - 1]` is `p_i`.
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub accelerations: Vec<Vec3>,
    /// `forces[i]` is `f_i`, `i = 0..=n` (`f_n = 0`, `f_0 = 0` without anchor).
    pub forces: Vec<Vec3>,
    /// One entry per robot in topology order.
    pub robots: Vec<RobotSample>,
}

impl PlanSample {
    pub fn tracking_reference(&self, slot: usize) -> TrackingReference {
        let r = &self.robots[slot];
        let i = r.index - 1;
        TrackingReference {
            position: self.positions[i],
            velocity: self.velocities[i],
            acceleration: self.accelerations[i],
            thrust_ff: r.thrust_vector,
            yaw: r.yaw,
        }
    }

    /// Largest violation of the point-mass and robot translational dynamics,
    /// with segment forces recomputed from the positions.
    pub fn dynamics_residual(&self, topology: &Topology, params: &CableParams, quads: &[QuadParams]) -> Result<f64> {
        let f = cable_forces(params, &self.positions)?;
        let g = params.gravity();
        let mut worst: f64 = 0.0;
        for i in 1..=topology.n() {
            let m = params.mass(i);
            let (a, v) = (self.accelerations[i - 1], self.velocities[i - 1]);
            let res = match topology.robot_slot(i) {
                Some(s) => {
                    let m_bar = quads[s].mass + m;
                    let att = &self.robots[s].attitude;
                    m_bar * a - (-m_bar * g * E3 + f[i] - f[i - 1] + att.thrust * att.r * E3)
                }
                None => m * a - (-m * g * E3 + f[i] - f[i - 1] - params.damping(i) * v),
            };
            worst = worst.max(res.norm());
        }
        Ok(worst)
    }
}

/// Flatness-based planner for one topology and flat-output set.
#[derive(Debug, Clone)]
pub struct Planner {
    topology: Topology,
    params: CableParams,
    quads: Vec<QuadParams>,
    flat: FlatOutputs,
    pair: Option<usize>,
    depth: usize,
    min_depth: usize,
    branch: SpringBranch,
}

impl Planner {
    /// Validate the flat-output set against the topology and fix the jet depth
    /// to the default `2n + 6`.
    pub fn new(topology: Topology, params: CableParams, quads: Vec<QuadParams>, flat: FlatOutputs) -> Result<Self> {
        params.check_topology(&topology)?;
        if quads.len() != topology.robot_count() {
            return Err(Error::InvalidParams(format!(
                "{} robots in the topology but {} quadrotor parameter sets",
                topology.robot_count(),
                quads.len()
            )));
        }
        for (q, &j) in quads.iter().zip(topology.robots()) {
            q.validate()?;
            if q.attach != j {
                return Err(Error::InvalidParams(format!(
                    "quadrotor parameters attach to mass {} but the robot sits at {j}",
                    q.attach
                )));
            }
        }
        let pair = match topology.class() {
            SystemClass::C => Some(find_pair(&topology, &flat)?),
            _ => None,
        };
        let required = required_positions(&topology, pair);
        let given = flat.position_indices();
        let yaws: BTreeSet<usize> = topology.robots().iter().copied().collect();
        if given != required || flat.yaw_indices() != yaws {
            return Err(Error::FlatOutputMismatch(format!(
                "expected positions {:?} and yaws {:?} ({} scalar channels = 4 x {} robots), got positions {:?} and yaws {:?} ({} channels)",
                required,
                yaws,
                4 * topology.robot_count(),
                topology.robot_count(),
                given,
                flat.yaw_indices(),
                flat.channel_count()
            )));
        }
        let mut planner = Planner {
            depth: 2 * topology.n() + 6,
            topology,
            params,
            quads,
            flat,
            pair,
            min_depth: 0,
            branch: SpringBranch::Tension,
        };
        planner.min_depth = planner.required_depth();
        Ok(planner)
    }

    pub fn with_depth(mut self, depth: usize) -> Result<Self> {
        if depth < self.min_depth {
            return Err(Error::InsufficientDepth {
                needed: self.min_depth,
                have: depth,
            });
        }
        self.depth = depth;
        Ok(self)
    }

    pub fn with_branch(mut self, branch: SpringBranch) -> Self {
        self.branch = branch;
        self
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Smallest jet depth for which every robot still gets `u, u', u''`.
    pub fn min_depth(&self) -> usize {
        self.min_depth
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &CableParams {
        &self.params
    }

    pub fn quads(&self) -> &[QuadParams] {
        &self.quads
    }

    pub fn flat(&self) -> &FlatOutputs {
        &self.flat
    }

    /// Interior flat pair `(i, i + 1)` of a class (c) plan, as `i`.
    pub fn pair(&self) -> Option<usize> {
        self.pair
    }

    /// Desired position of every flat position output at `t`.
    pub fn flat_targets(&self, t: f64) -> Vec<(usize, Vec3)> {
        self.flat.positions.iter().map(|(i, s)| (*i, s.value(t))).collect()
    }

    /// Depth bookkeeping of the walk, relative to the flat-output depth.
    fn required_depth(&self) -> usize {
        let n = self.topology.n();
        let mut need: i64 = 2;
        let mut require = |have: i64, k: i64| need = need.max(k - have);
        let forward = |start: usize, mut dp: i64, mut df: i64, require: &mut dyn FnMut(i64, i64)| {
            for i in start..=n {
                if self.topology.is_robot(i) {
                    let fi = if i == n { 0 } else { dp.min(0) };
                    require((dp - 2).min(fi).min(df), 2);
                    dp = 0;
                    df = fi;
                } else {
                    require(dp, 2);
                    df = (dp - 2).min(df);
                    dp = dp.min(df);
                }
            }
        };
        let backward = |start: usize, mut dp: i64, mut df: i64, require: &mut dyn FnMut(i64, i64)| {
            for i in (1..=start).rev() {
                if self.topology.is_robot(i) {
                    let fp = if i == 1 { 0 } else { dp.min(0) };
                    require((dp - 2).min(fp).min(df), 2);
                    dp = 0;
                    df = fp;
                } else {
                    require(dp, 2);
                    df = (dp - 2).min(df);
                    dp = dp.min(df);
                }
            }
        };
        match self.pair {
            Some(i) => {
                forward(i + 1, 0, 0, &mut require);
                backward(i, 0, 0, &mut require);
            }
            None => forward(1, 0, 0, &mut require),
        }
        need as usize
    }

    /// State and inputs at `t`.
    pub fn sample(&self, t: f64) -> Result<PlanSample> {
        self.sample_corrected(t, None)
    }

    /// State and inputs at `t`, with an optional class (c) chain correction.
    pub fn sample_corrected(&self, t: f64, correction: Option<&ChainCorrection>) -> Result<PlanSample> {
        let n = self.topology.n();
        let d = self.depth;
        let mut walk = Walk {
            planner: self,
            t,
            pos: vec![None; n + 1],
            force: vec![None; n + 1],
            thrust: vec![None; n + 1],
        };
        match self.pair {
            None => {
                let p1 = walk.flat(1);
                let f0 = match self.params.ground() {
                    Some(g) => anchor_force_jet(&p1, g.k, g.l0).map_err(|e| e.at(1, t))?,
                    None => Jet3::zeros(d),
                };
                walk.force[0] = Some(f0.clone());
                walk.forward(1, p1, f0, None)?;
            }
            Some(i) => {
                let (pi, pn) = (walk.flat(i), walk.flat(i + 1));
                let fi = robot_next_force_jet(&self.params, i, &pi, &pn).map_err(|e| e.at(i, t))?;
                walk.force[i] = Some(fi.clone());
                walk.forward(i + 1, pn, fi.clone(), correction.map(|c| c.forward))?;
                walk.backward(i, pi, fi, correction.map(|c| c.backward))?;
            }
        }
        walk.finish()
    }

    /// Evaluate on a time grid. Samples are independent and run in parallel;
    /// the earliest failure is reported.
    pub fn plan(&self, times: &[f64]) -> Result<PlannedTrajectory> {
        let results: Vec<Result<PlanSample>> = times.par_iter().map(|&t| self.sample(t)).collect();
        let samples = results.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(PlannedTrajectory {
            topology: self.topology.clone(),
            samples,
        })
    }

    /// Largest dynamics residual over a planned trajectory.
    pub fn max_residual(&self, plan: &PlannedTrajectory) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for s in &plan.samples {
            worst = worst.max(s.dynamics_residual(&self.topology, &self.params, &self.quads)?);
        }
        Ok(worst)
    }
}

fn find_pair(topology: &Topology, flat: &FlatOutputs) -> Result<usize> {
    let given = flat.position_indices();
    let n = topology.n();
    let candidates: Vec<usize> = (1..n)
        .filter(|&i| given.contains(&i) && given.contains(&(i + 1)))
        .collect();
    for &i in &candidates {
        if topology.is_robot(i) || topology.is_robot(i + 1) {
            continue;
        }
        if required_positions(topology, Some(i)) == given {
            return Ok(i);
        }
    }
    if candidates
        .iter()
        .any(|&i| topology.is_robot(i) || topology.is_robot(i + 1))
    {
        return Err(Error::FlatOutputMismatch(
            "the interior flat pair must not contain a robot-carrying mass".into(),
        ));
    }
    Err(Error::FlatOutputMismatch(format!(
        "class C needs two consecutive free flat points plus the outward points; got {given:?}"
    )))
}

struct Walk<'a> {
    planner: &'a Planner,
    t: f64,
    pos: Vec<Option<Jet3>>,
    force: Vec<Option<Jet3>>,
    thrust: Vec<Option<Jet3>>,
}

impl Walk<'_> {
    fn flat(&self, i: usize) -> Jet3 {
        self.planner.flat.positions[&i].jet(self.t, self.planner.depth)
    }

    fn m_bar(&self, j: usize) -> f64 {
        let slot = self.planner.topology.robot_slot(j).expect("robot index");
        self.planner.quads[slot].mass + self.planner.params.mass(j)
    }

    fn forward(&mut self, start: usize, mut p: Jet3, mut f_prev: Jet3, mut offset: Option<Vec3>) -> Result<()> {
        let (t, pl) = (self.t, self.planner);
        let n = pl.topology.n();
        let g = pl.params.gravity();
        for i in start..=n {
            self.pos[i] = Some(p.clone());
            if pl.topology.is_robot(i) {
                let f_i = if i == n {
                    Jet3::zeros(pl.depth)
                } else {
                    robot_next_force_jet(&pl.params, i, &p, &self.flat(i + 1)).map_err(|e| e.at(i, t))?
                };
                let u = robot_thrust_jet(self.m_bar(i), g, &p, &f_prev, &f_i).map_err(|e| e.at(i, t))?;
                self.thrust[i] = Some(u);
                if i == n {
                    break;
                }
                self.force[i] = Some(f_i.clone());
                p = self.flat(i + 1);
                f_prev = f_i;
            } else {
                if i == n {
                    return Err(Error::InvalidTopology("the last mass must carry a robot".into()));
                }
                let f_i = chain_force_jet(&pl.params, i, &p, &f_prev).map_err(|e| e.at(i, t))?;
                let mut next = next_position_jet(&pl.params, i, &p, &f_i, pl.branch).map_err(|e| e.at(i, t))?;
                if let Some(o) = offset.take() {
                    next = next.offset(&o);
                }
                self.force[i] = Some(f_i.clone());
                p = next;
                f_prev = f_i;
            }
        }
        Ok(())
    }

    fn backward(&mut self, start: usize, mut p: Jet3, mut f_next: Jet3, mut offset: Option<Vec3>) -> Result<()> {
        let (t, pl) = (self.t, self.planner);
        let g = pl.params.gravity();
        for i in (1..=start).rev() {
            self.pos[i] = Some(p.clone());
            if pl.topology.is_robot(i) {
                let f_prev = if i == 1 {
                    Jet3::zeros(pl.depth)
                } else {
                    robot_next_force_jet(&pl.params, i - 1, &self.flat(i - 1), &p).map_err(|e| e.at(i, t))?
                };
                let u = robot_thrust_jet(self.m_bar(i), g, &p, &f_prev, &f_next).map_err(|e| e.at(i, t))?;
                self.thrust[i] = Some(u);
                if i == 1 {
                    break;
                }
                self.force[i - 1] = Some(f_prev.clone());
                p = self.flat(i - 1);
                f_next = f_prev;
            } else {
                if i == 1 {
                    return Err(Error::InvalidTopology("class C needs a robot at mass 1".into()));
                }
                let f_prev = backward_force_jet(&pl.params, i, &p, &f_next).map_err(|e| e.at(i, t))?;
                let mut prev = previous_position_jet(&pl.params, i, &p, &f_prev, pl.branch).map_err(|e| e.at(i, t))?;
                if let Some(o) = offset.take() {
                    prev = prev.offset(&o);
                }
                self.force[i - 1] = Some(f_prev.clone());
                p = prev;
                f_next = f_prev;
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<PlanSample> {
        let pl = self.planner;
        let n = pl.topology.n();
        let mut positions = Vec::with_capacity(n);
        let mut velocities = Vec::with_capacity(n);
        let mut accelerations = Vec::with_capacity(n);
        for i in 1..=n {
            let p = self.pos[i].as_ref().expect("every mass is visited");
            if p.depth() < 2 {
                return Err(Error::InsufficientDepth {
                    needed: pl.min_depth,
                    have: pl.depth,
                }
                .at(i, self.t));
            }
            positions.push(p.value());
            velocities.push(p.derivative(1));
            accelerations.push(p.derivative(2));
        }
        let forces = self
            .force
            .iter()
            .map(|f| f.as_ref().map(|f| f.value()).unwrap_or_else(Vec3::zeros))
            .collect();
        let mut robots = Vec::with_capacity(pl.quads.len());
        for (q, &j) in pl.quads.iter().zip(pl.topology.robots()) {
            let u = self.thrust[j].as_ref().expect("every robot is visited");
            let yaw = pl.flat.yaws[&j].jet(self.t, pl.depth);
            let attitude = attitude_from_flat(u, &yaw, &q.inertia).map_err(|e| e.at(j, self.t))?;
            robots.push(RobotSample {
                index: j,
                thrust_vector: [u.derivative(0), u.derivative(1), u.derivative(2)],
                yaw: [yaw.derivative(0), yaw.derivative(1), yaw.derivative(2)],
                attitude,
            });
        }
        Ok(PlanSample {
            t: self.t,
            positions,
            velocities,
            accelerations,
            forces,
            robots,
        })
    }
}

/// Uniform grid `t0 + k / rate`, `k = 0..`, up to and including `t1`.
pub fn uniform_grid(t0: f64, t1: f64, rate: f64) -> Vec<f64> {
    let count = ((t1 - t0) * rate + 1e-9).floor() as usize;
    (0..=count).map(|k| t0 + k as f64 / rate).collect()
}

fn check_class(planner: &Planner, class: SystemClass) -> Result<()> {
    if planner.topology.class() != class {
        return Err(Error::InvalidTopology(format!(
            "expected a class {class:?} topology, got {:?}",
            planner.topology.class()
        )));
    }
    Ok(())
}

/// Ground-anchored cable (class a).
pub fn plan_class_a(
    flat: FlatOutputs,
    topology: Topology,
    params: CableParams,
    quads: Vec<QuadParams>,
    times: &[f64],
) -> Result<PlannedTrajectory> {
    let p = Planner::new(topology, params, quads, flat)?;
    check_class(&p, SystemClass::A)?;
    p.plan(times)
}

/// Free hanging end (class b): the walk starts with `f_0 = 0`.
pub fn plan_class_b(
    flat: FlatOutputs,
    topology: Topology,
    params: CableParams,
    quads: Vec<QuadParams>,
    times: &[f64],
) -> Result<PlannedTrajectory> {
    let p = Planner::new(topology, params, quads, flat)?;
    check_class(&p, SystemClass::B)?;
    p.plan(times)
}

/// Robots at both ends (class c): bidirectional walk from the interior pair.
pub fn plan_class_c(
    flat: FlatOutputs,
    topology: Topology,
    params: CableParams,
    quads: Vec<QuadParams>,
    times: &[f64],
) -> Result<PlannedTrajectory> {
    let p = Planner::new(topology, params, quads, flat)?;
    check_class(&p, SystemClass::C)?;
    p.plan(times)
}

struct Cursor<'a> {
    vals: &'a [f64],
    at: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> f64 {
        self.at += 1;
        self.vals[self.at - 1]
    }

    fn v3(&mut self) -> Vec3 {
        Vec3::new(self.next(), self.next(), self.next())
    }

    fn block(&mut self, count: usize) -> Vec<Vec3> {
        (0..count).map(|_| self.v3()).collect()
    }
}

/// A tabulated plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedTrajectory {
    pub topology: Topology,
    pub samples: Vec<PlanSample>,
}

impl PlannedTrajectory {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn start(&self) -> f64 {
        self.samples.first().map(|s| s.t).unwrap_or(0.0)
    }

    pub fn end(&self) -> f64 {
        self.samples.last().map(|s| s.t).unwrap_or(0.0)
    }

    /// CSV column names, in order.
    pub fn header(topology: &Topology) -> Vec<String> {
        let n = topology.n();
        let mut h = vec!["t".to_string()];
        let xyz = |h: &mut Vec<String>, name: String| {
            for a in ["x", "y", "z"] {
                h.push(format!("{name}{a}"));
            }
        };
        for prefix in ["p", "v", "a"] {
            for i in 1..=n {
                xyz(&mut h, format!("{prefix}{i}"));
            }
        }
        for i in 0..n {
            xyz(&mut h, format!("f{i}"));
        }
        for &j in topology.robots() {
            for r in 1..=3 {
                for c in 1..=3 {
                    h.push(format!("R{j}_{r}{c}"));
                }
            }
            xyz(&mut h, format!("w{j}"));
            xyz(&mut h, format!("wd{j}"));
            h.push(format!("thrust{j}"));
            xyz(&mut h, format!("tau{j}"));
            xyz(&mut h, format!("u{j}"));
            xyz(&mut h, format!("ud{j}"));
            xyz(&mut h, format!("udd{j}"));
            h.push(format!("yaw{j}"));
            h.push(format!("yawd{j}"));
            h.push(format!("yawdd{j}"));
        }
        h
    }

    fn row(s: &PlanSample) -> Vec<f64> {
        let mut r = vec![s.t];
        let push = |r: &mut Vec<f64>, v: &Vec3| r.extend_from_slice(v.as_slice());
        for set in [&s.positions, &s.velocities, &s.accelerations] {
            set.iter().for_each(|v| push(&mut r, v));
        }
        s.forces[..s.forces.len() - 1].iter().for_each(|v| push(&mut r, v));
        for rb in &s.robots {
            let a = &rb.attitude;
            for i in 0..3 {
                for j in 0..3 {
                    r.push(a.r[(i, j)]);
                }
            }
            push(&mut r, &a.omega);
            push(&mut r, &a.omega_dot);
            r.push(a.thrust);
            push(&mut r, &a.torque);
            rb.thrust_vector.iter().for_each(|v| push(&mut r, v));
            r.extend_from_slice(&rb.yaw);
        }
        r
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(Self::header(&self.topology))?;
        for s in &self.samples {
            wr.write_record(Self::row(s).iter().map(|x| format!("{x:e}")))?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Read a table written by [`PlannedTrajectory::write_csv`].
    pub fn read_csv<R: Read>(r: R, topology: &Topology) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let expected = Self::header(topology);
        let header: Vec<String> = rd.headers()?.iter().map(|s| s.trim().to_string()).collect();
        if header != expected {
            return Err(Error::Schema(format!(
                "plan CSV header does not match the topology ({} columns expected, {} found)",
                expected.len(),
                header.len()
            )));
        }
        let n = topology.n();
        let mut samples = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Schema(format!("plan CSV row {}: {e}", line + 2)))?;
            let mut cur = Cursor { vals: &vals, at: 0 };
            let t = cur.next();
            let positions = cur.block(n);
            let velocities = cur.block(n);
            let accelerations = cur.block(n);
            let mut forces = cur.block(n);
            forces.push(Vec3::zeros());
            let mut robots = Vec::new();
            for &j in topology.robots() {
                let r = Mat3::from_row_iterator((0..9).map(|_| cur.next()));
                let omega = cur.v3();
                let omega_dot = cur.v3();
                let thrust = cur.next();
                let torque = cur.v3();
                let thrust_vector = [cur.v3(), cur.v3(), cur.v3()];
                let yaw = [cur.next(), cur.next(), cur.next()];
                robots.push(RobotSample {
                    index: j,
                    thrust_vector,
                    yaw,
                    attitude: FlatAttitude {
                        r,
                        omega,
                        omega_dot,
                        thrust,
                        torque,
                    },
                });
            }
            samples.push(PlanSample {
                t,
                positions,
                velocities,
                accelerations,
                forces,
                robots,
            });
        }
        if samples.is_empty() {
            return Err(Error::Schema("plan CSV has no samples".into()));
        }
        Ok(PlannedTrajectory {
            topology: topology.clone(),
            samples,
        })
    }

    /// Robot references at `t`, linearly interpolated between samples and
    /// held constant outside the table.
    pub fn references_at(&self, t: f64) -> Vec<TrackingReference> {
        let (a, b, w) = self.bracket(t);
        (0..self.topology.robot_count())
            .map(|s| {
                let (ra, rb) = (a.tracking_reference(s), b.tracking_reference(s));
                let lerp = |x: &Vec3, y: &Vec3| x + (y - x) * w;
                TrackingReference {
                    position: lerp(&ra.position, &rb.position),
                    velocity: lerp(&ra.velocity, &rb.velocity),
                    acceleration: lerp(&ra.acceleration, &rb.acceleration),
                    thrust_ff: std::array::from_fn(|k| lerp(&ra.thrust_ff[k], &rb.thrust_ff[k])),
                    yaw: std::array::from_fn(|k| ra.yaw[k] + (rb.yaw[k] - ra.yaw[k]) * w),
                }
            })
            .collect()
    }

    /// Interpolated position of mass `i` at `t`.
    pub fn position_at(&self, i: usize, t: f64) -> Vec3 {
        let (a, b, w) = self.bracket(t);
        a.positions[i - 1] + (b.positions[i - 1] - a.positions[i - 1]) * w
    }

    fn bracket(&self, t: f64) -> (&PlanSample, &PlanSample, f64) {
        let s = &self.samples;
        if t <= s[0].t || s.len() == 1 {
            return (&s[0], &s[0], 0.0);
        }
        let last = s.len() - 1;
        if t >= s[last].t {
            return (&s[last], &s[last], 0.0);
        }
        let k = s.partition_point(|x| x.t <= t) - 1;
        let (a, b) = (&s[k], &s[k + 1]);
        (a, b, (t - a.t) / (b.t - a.t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cable::{spring_force, static_equilibrium};
    use crate::jet::Jet;
    use approx::assert_relative_eq;

    fn b1(n: usize) -> (Topology, CableParams) {
        (
            Topology::new(SystemClass::B, n, vec![n]).unwrap(),
            CableParams::uniform(n, 11.312, 0.195, 1.16e-3, 0.002, false).unwrap(),
        )
    }

    #[test]
    fn next_position_example() {
        let params = CableParams::new(
            2,
            None,
            vec![crate::cable::Segment { k: 10.0, l0: 0.2 }],
            vec![1.0; 2],
            vec![0.0; 2],
            9.81,
        )
        .unwrap();
        let p = Jet3::constant(Vec3::new(0.0, 0.0, 1.0), 2);
        let f = Jet3::constant(Vec3::new(0.0, 0.0, 1.0), 2);
        // A stretched segment pulls mass i toward i+1, so f along +z puts
        // p_{i+1} above p_i by l0 + |f|/k.
        let t = next_position_jet(&params, 1, &p, &f, SpringBranch::Tension).unwrap();
        assert_relative_eq!(t.value(), Vec3::new(0.0, 0.0, 1.3), epsilon = 1e-15);
        let back = spring_force(&p.value(), &t.value(), 10.0, 0.2).unwrap();
        assert_relative_eq!(back, f.value(), epsilon = 1e-14);
        // The other root is the compressed spring: 1 + 0.1 - 0.2.
        let c = next_position_jet(&params, 1, &p, &f, SpringBranch::Compression).unwrap();
        assert_relative_eq!(c.value(), Vec3::new(0.0, 0.0, 0.9), epsilon = 1e-15);
        let back = spring_force(&p.value(), &c.value(), 10.0, 0.2).unwrap();
        assert_relative_eq!(back, f.value(), epsilon = 1e-14);
        assert!(t.derivative(1).norm() == 0.0 && t.derivative(2).norm() == 0.0);
    }

    #[test]
    fn chain_force_statics_and_ramp() {
        let (_, params) = b1(3);
        let m = 1.16e-3;
        let f_prev = Jet3::constant(Vec3::new(0.1, 0.0, 0.2), 4);
        let still = Jet3::constant(Vec3::new(0.0, 0.0, 1.0), 4);
        let f = chain_force_jet(&params.clone().with_gravity(9.81), 2, &still, &f_prev).unwrap();
        assert_relative_eq!(f.value(), f_prev.value() + m * 9.81 * E3, epsilon = 1e-15);
        assert_eq!(f.depth(), 2);

        let mut p0 = params.clone();
        p0.set_damping_all(0.0);
        let ramp = Jet3::new(
            Jet::constant(0.0, 4),
            Jet::constant(0.0, 4),
            Jet::from_derivatives(vec![0.5, 1.0, 1.0, 0.0, 0.0]),
        );
        let f = chain_force_jet(&p0, 2, &ramp, &f_prev).unwrap();
        assert_relative_eq!(f.value(), f_prev.value() + m * 9.81 * E3 + m * E3, epsilon = 1e-15);
        assert!(matches!(
            chain_force_jet(&p0, 2, &Jet3::zeros(1), &f_prev),
            Err(Error::InsufficientDepth { .. })
        ));
    }

    #[test]
    fn hanging_b1_thrust_is_total_weight() {
        let (topo, params) = b1(3);
        let quads = vec![QuadParams::crazyflie(3)];
        let flat = FlatOutputs::new()
            .with_position(1, VectorSignal::constant(Vec3::new(0.2, -0.1, 0.5)))
            .with_yaw(3, Signal::constant(0.0));
        let planner = Planner::new(topo.clone(), params.clone(), quads.clone(), flat).unwrap();
        let s = planner.sample(0.0).unwrap();
        let weight = (0.033 + 3.0 * 1.16e-3) * 9.81;
        assert_relative_eq!(s.robots[0].attitude.thrust, weight, epsilon = 1e-12);
        for p in &s.positions {
            assert_relative_eq!(p.x, 0.2, epsilon = 1e-14);
            assert_relative_eq!(p.y, -0.1, epsilon = 1e-14);
        }
        assert!(s.positions[2].z > s.positions[1].z && s.positions[1].z > s.positions[0].z);
        assert_relative_eq!(s.robots[0].attitude.r, Mat3::identity(), epsilon = 1e-12);
        // the equilibrium solver agrees
        let eq = static_equilibrium(&topo, &params, &[s.positions[2]]).unwrap();
        for (a, b) in eq.iter().zip(&s.positions) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
        assert!(s.dynamics_residual(&topo, &params, &quads).unwrap() < 1e-12);
    }

    #[test]
    fn flat_set_is_validated() {
        let (topo, params) = b1(3);
        let quads = vec![QuadParams::crazyflie(3)];
        let too_many = FlatOutputs::new()
            .with_position(1, VectorSignal::constant(Vec3::zeros()))
            .with_position(2, VectorSignal::constant(Vec3::zeros()))
            .with_yaw(3, Signal::constant(0.0));
        assert!(matches!(
            Planner::new(topo.clone(), params.clone(), quads.clone(), too_many),
            Err(Error::FlatOutputMismatch(_))
        ));
        let no_yaw = FlatOutputs::new().with_position(1, VectorSignal::constant(Vec3::zeros()));
        assert!(Planner::new(topo.clone(), params.clone(), quads.clone(), no_yaw).is_err());
        let ok = FlatOutputs::new()
            .with_position(1, VectorSignal::constant(Vec3::new(0.0, 0.0, 0.5)))
            .with_yaw(3, Signal::constant(0.0));
        let p = Planner::new(topo, params, quads, ok).unwrap();
        assert_eq!(p.depth(), 12);
        assert_eq!(p.min_depth(), 8);
        assert!(matches!(p.clone().with_depth(0), Err(Error::InsufficientDepth { .. })));
        assert!(p.clone().with_depth(8).unwrap().sample(0.0).is_ok());
    }

    #[test]
    fn class_c_pair_must_avoid_robots() {
        let topo = Topology::new(SystemClass::C, 4, vec![1, 4]).unwrap();
        let params = CableParams::uniform(4, 10.0, 0.2, 1e-3, 0.002, false).unwrap();
        let quads = vec![QuadParams::crazyflie(1), QuadParams::crazyflie(4)];
        let touching = FlatOutputs::new()
            .with_position(1, VectorSignal::constant(Vec3::new(0.0, 0.0, 1.0)))
            .with_position(2, VectorSignal::constant(Vec3::new(0.3, 0.0, 1.0)))
            .with_yaw(1, Signal::constant(0.0))
            .with_yaw(4, Signal::constant(0.0));
        assert!(matches!(
            Planner::new(topo.clone(), params.clone(), quads.clone(), touching),
            Err(Error::FlatOutputMismatch(_))
        ));
        let good = FlatOutputs::new()
            .with_position(2, VectorSignal::constant(Vec3::new(0.0, 0.0, 1.0)))
            .with_position(3, VectorSignal::constant(Vec3::new(0.21, 0.0, 1.0)))
            .with_yaw(1, Signal::constant(0.0))
            .with_yaw(4, Signal::constant(0.0));
        let p = Planner::new(topo, params, quads, good).unwrap();
        assert_eq!(p.pair(), Some(2));
    }

    #[test]
    fn flat_json_channels() {
        let json = r#"[
            {"target": "p1", "x": {"primitive": "constant", "value": 0.1},
             "y": {"primitive": "sinusoid", "amplitude": 0.46, "omega": 0.5},
             "z": {"primitive": "constant", "value": 0.5}},
            {"target": "yaw_3", "primitive": "constant", "value": 0.0}
        ]"#;
        let f: FlatOutputs = serde_json::from_str(json).unwrap();
        assert_eq!(f.channel_count(), 4);
        let back: FlatOutputs = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(back, f);
        assert!(serde_json::from_str::<FlatOutputs>(r#"[{"target": "q1"}]"#).is_err());
        assert!(serde_json::from_str::<FlatOutputs>(
            r#"[{"target": "yaw_1", "primitive": "constant", "value": 0, "extra": 1}]"#
        )
        .is_err());
    }

    #[test]
    fn uniform_grid_is_exact_multiples() {
        let g = uniform_grid(0.0, 1.0, 100.0);
        assert_eq!(g.len(), 101);
        assert_eq!(g[50], 0.5);
        assert_eq!(g[100], 1.0);
    }
}
