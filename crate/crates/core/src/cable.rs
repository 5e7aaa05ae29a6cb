//! Lumped-mass cable model.
//!
//! The cable is a chain of `n` point masses (1-based indices `1..=n`) joined
//! by linear springs. Segment `i` joins mass `i` to mass `i + 1`; the force
//! it exerts on mass `i` is `f_i`, and `-f_i` acts on mass `i + 1`. Class (a)
//! systems add a segment 0 between the ground origin and mass 1.
//!
//! Springs are bilateral: compressed segments push.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3, E3};

pub const GRAVITY: f64 = 9.81;

/// Smallest admissible distance between two joined points.
pub const SEPARATION_FLOOR: f64 = 1e-6;

/// Net-force tolerance of [`static_equilibrium`], N.
pub const EQUILIBRIUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SystemClass {
    /// Ground-anchored at the first mass, robot at the far end.
    A,
    /// Free hanging first mass, robot at the far end.
    B,
    /// Robots at both ends.
    C,
}

/// Which masses carry a robot, plus the system class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyDoc", into = "TopologyDoc")]
pub struct Topology {
    class: SystemClass,
    n: usize,
    robots: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyDoc {
    class: SystemClass,
    n: usize,
    robots: Vec<usize>,
}

impl TryFrom<TopologyDoc> for Topology {
    type Error = Error;
    fn try_from(d: TopologyDoc) -> Result<Self> {
        Topology::new(d.class, d.n, d.robots)
    }
}

impl From<Topology> for TopologyDoc {
    fn from(t: Topology) -> Self {
        TopologyDoc {
            class: t.class,
            n: t.n,
            robots: t.robots,
        }
    }
}

impl Topology {
    pub fn new(class: SystemClass, n: usize, robots: Vec<usize>) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidTopology(m));
        if n < 2 {
            return bad(format!("need at least two masses, got {n}"));
        }
        if robots.is_empty() {
            return bad("at least one robot is required".into());
        }
        if robots.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("robot indices must be strictly ascending: {robots:?}"));
        }
        if robots[0] < 1 || *robots.last().unwrap() > n {
            return bad(format!("robot indices {robots:?} outside 1..={n}"));
        }
        if !robots.contains(&n) {
            return bad(format!("mass {n} (the cable end) must carry a robot"));
        }
        if class == SystemClass::C && robots[0] != 1 {
            return bad("class C requires a robot at mass 1".into());
        }
        Ok(Topology { class, n, robots })
    }

    pub fn class(&self) -> SystemClass {
        self.class
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn robots(&self) -> &[usize] {
        &self.robots
    }

    pub fn robot_count(&self) -> usize {
        self.robots.len()
    }

    pub fn is_robot(&self, i: usize) -> bool {
        self.robots.binary_search(&i).is_ok()
    }

    /// Position of mass `i` within [`Topology::robots`].
    pub fn robot_slot(&self, i: usize) -> Option<usize> {
        self.robots.binary_search(&i).ok()
    }

    pub fn anchored(&self) -> bool {
        self.class == SystemClass::A
    }

    /// Masses not attached to a robot, ascending.
    pub fn free_masses(&self) -> Vec<usize> {
        (1..=self.n).filter(|i| !self.is_robot(*i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub k: f64,
    pub l0: f64,
}

/// Spring, mass and damping data of the discretised cable.
///
/// Serialised as `{"n", "k", "l0", "mass", "c", "g"}`. `k`/`l0` have `n`
/// entries when a ground segment 0 is present and `n - 1` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CableParamsDoc", into = "CableParamsDoc")]
pub struct CableParams {
    n: usize,
    ground: Option<Segment>,
    segments: Vec<Segment>,
    mass: Vec<f64>,
    damping: Vec<f64>,
    g: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CableParamsDoc {
    n: usize,
    k: Vec<f64>,
    l0: Vec<f64>,
    mass: Vec<f64>,
    c: Vec<f64>,
    #[serde(default = "default_gravity")]
    g: f64,
}

fn default_gravity() -> f64 {
    GRAVITY
}

impl TryFrom<CableParamsDoc> for CableParams {
    type Error = Error;
    fn try_from(d: CableParamsDoc) -> Result<Self> {
        if d.k.len() != d.l0.len() {
            return Err(Error::InvalidParams(format!(
                "k has {} entries but l0 has {}",
                d.k.len(),
                d.l0.len()
            )));
        }
        let mut segs: Vec<Segment> = d.k.iter().zip(&d.l0).map(|(&k, &l0)| Segment { k, l0 }).collect();
        let ground = if segs.len() == d.n { Some(segs.remove(0)) } else { None };
        CableParams::new(d.n, ground, segs, d.mass, d.c, d.g)
    }
}

impl From<CableParams> for CableParamsDoc {
    fn from(p: CableParams) -> Self {
        let segs: Vec<Segment> = p.ground.iter().chain(&p.segments).copied().collect();
        CableParamsDoc {
            n: p.n,
            k: segs.iter().map(|s| s.k).collect(),
            l0: segs.iter().map(|s| s.l0).collect(),
            mass: p.mass,
            c: p.damping,
            g: p.g,
        }
    }
}

impl CableParams {
    /// `segments[i - 1]` is segment `i` for `i in 1..n`.
    pub fn new(
        n: usize,
        ground: Option<Segment>,
        segments: Vec<Segment>,
        mass: Vec<f64>,
        damping: Vec<f64>,
        g: f64,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if n < 2 {
            return bad(format!("need at least two masses, got {n}"));
        }
        if segments.len() != n - 1 {
            return bad(format!(
                "expected {} inter-mass segments, got {}",
                n - 1,
                segments.len()
            ));
        }
        if mass.len() != n || damping.len() != n {
            return bad(format!(
                "mass and c need {n} entries, got {} and {}",
                mass.len(),
                damping.len()
            ));
        }
        for s in ground.iter().chain(&segments) {
            if !(s.k > 0.0 && s.l0 > 0.0) || !s.k.is_finite() || !s.l0.is_finite() {
                return bad(format!("stiffness and rest length must be positive, got {s:?}"));
            }
        }
        if mass.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return bad("masses must be positive".into());
        }
        if damping.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return bad("viscous coefficients must be non-negative".into());
        }
        if !(g >= 0.0) || !g.is_finite() {
            return bad(format!("gravity must be non-negative, got {g}"));
        }
        Ok(CableParams {
            n,
            ground,
            segments,
            mass,
            damping,
            g,
        })
    }

    /// Uniform cable: the same stiffness, rest length, mass and damping everywhere.
    pub fn uniform(n: usize, k: f64, l0: f64, mass: f64, c: f64, anchored: bool) -> Result<Self> {
        let seg = Segment { k, l0 };
        CableParams::new(
            n,
            anchored.then_some(seg),
            vec![seg; n - 1],
            vec![mass; n],
            vec![c; n],
            GRAVITY,
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn gravity(&self) -> f64 {
        self.g
    }

    pub fn with_gravity(mut self, g: f64) -> Self {
        self.g = g;
        self
    }

    pub fn ground(&self) -> Option<Segment> {
        self.ground
    }

    /// Segment `i`, `0 <= i < n`; segment 0 only exists with a ground anchor.
    pub fn segment(&self, i: usize) -> Option<Segment> {
        if i == 0 {
            self.ground
        } else {
            self.segments.get(i - 1).copied()
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn mass(&self, i: usize) -> f64 {
        self.mass[i - 1]
    }

    pub fn damping(&self, i: usize) -> f64 {
        self.damping[i - 1]
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn stiffnesses(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.k).collect()
    }

    pub fn set_stiffness(&mut self, i: usize, k: f64) {
        if i == 0 {
            if let Some(g) = self.ground.as_mut() {
                g.k = k;
            }
        } else {
            self.segments[i - 1].k = k;
        }
    }

    pub fn set_damping_all(&mut self, c: f64) {
        self.damping.iter_mut().for_each(|d| *d = c);
    }

    /// Multiply every stiffness (ground segment included) by `factor`.
    pub fn scaled_stiffness(&self, factor: f64) -> Self {
        let mut out = self.clone();
        if let Some(g) = out.ground.as_mut() {
            g.k *= factor;
        }
        out.segments.iter_mut().for_each(|s| s.k *= factor);
        out
    }

    /// Multiply every viscous coefficient by `factor`.
    pub fn scaled_damping(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.damping.iter_mut().for_each(|c| *c *= factor);
        out
    }

    pub fn check_topology(&self, topo: &Topology) -> Result<()> {
        if topo.n() != self.n {
            return Err(Error::InvalidParams(format!(
                "topology has {} masses, parameters {}",
                topo.n(),
                self.n
            )));
        }
        if topo.anchored() != self.ground.is_some() {
            return Err(Error::InvalidParams(format!(
                "class {:?} {} a ground segment (k/l0 need {} entries)",
                topo.class(),
                if topo.anchored() { "requires" } else { "forbids" },
                if topo.anchored() { self.n } else { self.n - 1 }
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MassState {
    pub p: Vec3,
    pub v: Vec3,
}

/// Force of segment `(p_i, p_next)` on mass `i`:
/// `f = -k [ (p_i - p_next) - l0 (p_i - p_next) / |p_i - p_next| ]`.
pub fn spring_force(p_i: &Vec3, p_next: &Vec3, k: f64, l0: f64) -> Result<Vec3> {
    let d = p_i - p_next;
    let len = d.norm();
    if len < SEPARATION_FLOOR || !len.is_finite() {
        return Err(Error::SeparationTooSmall {
            separation: len,
            limit: SEPARATION_FLOOR,
        });
    }
    Ok(-k * (d - l0 * d / len))
}

/// Ground-anchor force `f_0 = k0 (p_1 - l00 p_1 / |p_1|)`; mass 1 feels `-f_0`.
///
/// This is segment 0 seen from the ground end, i.e. `spring_force(0, p_1)`.
/// Some write-ups print the inline definition with `+ l00 p_1/|p_1|`; that
/// variant would pull a compressed anchor spring inward and is not used.
pub fn ground_anchor_force(p1: &Vec3, k0: f64, l00: f64) -> Result<Vec3> {
    spring_force(&Vec3::zeros(), p1, k0, l00)
}

/// `U = k/2 (|p_i - p_next| - l0)^2`.
pub fn spring_potential(p_i: &Vec3, p_next: &Vec3, k: f64, l0: f64) -> f64 {
    let e = (p_i - p_next).norm() - l0;
    0.5 * k * e * e
}

/// `d f / d p_i` of [`spring_force`] (and `-` of it with respect to `p_next`).
pub fn spring_jacobian(p_i: &Vec3, p_next: &Vec3, k: f64, l0: f64) -> Mat3 {
    let d = p_i - p_next;
    let len = d.norm();
    let u = d / len;
    -k * ((1.0 - l0 / len) * Mat3::identity() + (l0 / len) * u * u.transpose())
}

/// Acceleration of a free mass `i`:
/// `(-m g e3 + f_i - f_{i-1} - c v) / m`.
pub fn mass_acceleration(params: &CableParams, i: usize, v: &Vec3, f_i: &Vec3, f_prev: &Vec3) -> Vec3 {
    let m = params.mass(i);
    (-m * params.gravity() * E3 + f_i - f_prev - params.damping(i) * v) / m
}

/// Segment forces `f_0 ..= f_n` for positions `p_1..p_n` (`positions[i-1]`).
///
/// `f_0` is zero without a ground anchor and `f_n` is always zero.
pub fn cable_forces(params: &CableParams, positions: &[Vec3]) -> Result<Vec<Vec3>> {
    let n = params.n();
    let mut f = vec![Vec3::zeros(); n + 1];
    if let Some(g) = params.ground() {
        f[0] = ground_anchor_force(&positions[0], g.k, g.l0)?;
    }
    for i in 1..n {
        let s = params.segments[i - 1];
        f[i] = spring_force(&positions[i - 1], &positions[i], s.k, s.l0)?;
    }
    Ok(f)
}

/// Spring plus gravitational energy of the whole cable (robot-attached masses included).
pub fn potential_energy(params: &CableParams, positions: &[Vec3]) -> f64 {
    let mut u = 0.0;
    if let Some(g) = params.ground() {
        u += spring_potential(&Vec3::zeros(), &positions[0], g.k, g.l0);
    }
    for i in 1..params.n() {
        let s = params.segments[i - 1];
        u += spring_potential(&positions[i - 1], &positions[i], s.k, s.l0);
    }
    u + positions
        .iter()
        .zip(&params.mass)
        .map(|(p, m)| m * params.gravity() * p.z)
        .sum::<f64>()
}

/// Initial guess from the fixed points (ground origin and robots): straight
/// between two of them, sagging when the span is slack. Masses below the first robot without a ground anchor hang
/// vertically at their rest lengths.
fn initial_guess(topo: &Topology, params: &CableParams, robots: &[Vec3]) -> Vec<Vec3> {
    let n = topo.n();
    let mut fixed: Vec<(usize, Vec3)> = Vec::new();
    if topo.anchored() {
        fixed.push((0, Vec3::zeros()));
    }
    fixed.extend(topo.robots().iter().copied().zip(robots.iter().copied()));
    let mut p = vec![Vec3::zeros(); n];
    for (slot, &j) in topo.robots().iter().enumerate() {
        p[j - 1] = robots[slot];
    }
    for i in 1..=n {
        if topo.is_robot(i) {
            continue;
        }
        let below = fixed.iter().rev().find(|(j, _)| *j < i);
        let above = fixed.iter().find(|(j, _)| *j > i);
        p[i - 1] = match (below, above) {
            (Some(&(a, pa)), Some(&(b, pb))) => span_guess(params, a, pa, b, pb, i),
            (None, Some(&(b, pb))) => {
                let drop: f64 = (i..b).map(|s| params.segment(s).map_or(0.0, |s| s.l0)).sum();
                pb - drop * E3
            }
            _ => unreachable!("the last mass always carries a robot"),
        };
    }
    p
}

/// Point `i` of the span between fixed points `a` and `b`: on the straight
/// line when the span is taut, otherwise on a V hanging below it whose two
/// legs add up to the total rest length.
fn span_guess(params: &CableParams, a: usize, pa: Vec3, b: usize, pb: Vec3, i: usize) -> Vec3 {
    let l0 = |s: usize| params.segment(s).map_or(0.0, |s| s.l0);
    let total: f64 = (a..b).map(l0).sum();
    let along: f64 = (a..i).map(l0).sum();
    let chord = pb - pa;
    let d = chord.norm();
    if total <= d || d == 0.0 {
        return pa + chord * ((i - a) as f64 / (b - a) as f64);
    }
    let u = chord / d;
    let mut down = -E3 + u * u.z;
    if down.norm() < 1e-9 {
        down = Vec3::x();
    }
    let down = down.normalize();
    let depth = ((0.5 * total).powi(2) - (0.5 * d).powi(2)).sqrt();
    let vertex = pa + 0.5 * chord + depth * down;
    if along <= 0.5 * total {
        pa + (vertex - pa) * (along / (0.5 * total))
    } else {
        vertex + (pb - vertex) * ((along - 0.5 * total) / (0.5 * total))
    }
}

fn equilibrium_residual(topo: &Topology, params: &CableParams, p: &[Vec3], free: &[usize]) -> Result<DVector<f64>> {
    let f = cable_forces(params, p)?;
    let mut r = DVector::zeros(3 * free.len());
    for (row, &i) in free.iter().enumerate() {
        let ri = -params.mass(i) * params.gravity() * E3 + f[i] - f[i - 1];
        r.fixed_rows_mut::<3>(3 * row).copy_from(&ri);
    }
    let _ = topo;
    Ok(r)
}

fn equilibrium_jacobian(params: &CableParams, p: &[Vec3], free: &[usize]) -> DMatrix<f64> {
    let n = params.n();
    let m = free.len();
    let col_of = |i: usize| free.iter().position(|&x| x == i);
    let mut jac = DMatrix::zeros(3 * m, 3 * m);
    for (row, &i) in free.iter().enumerate() {
        let mut diag = Mat3::zeros();
        // f_i: segment i towards i + 1
        if i < n {
            let s = params.segments[i - 1];
            let si = spring_jacobian(&p[i - 1], &p[i], s.k, s.l0);
            diag += si;
            if let Some(c) = col_of(i + 1) {
                jac.fixed_view_mut::<3, 3>(3 * row, 3 * c).copy_from(&(-si));
            }
        }
        // -f_{i-1}
        let prev = if i == 1 {
            params
                .ground()
                .map(|g| spring_jacobian(&Vec3::zeros(), &p[0], g.k, g.l0))
        } else {
            let s = params.segments[i - 2];
            Some(spring_jacobian(&p[i - 2], &p[i - 1], s.k, s.l0))
        };
        if let Some(sp) = prev {
            diag += sp;
            if i > 1 {
                if let Some(c) = col_of(i - 1) {
                    jac.fixed_view_mut::<3, 3>(3 * row, 3 * c).copy_from(&(-sp));
                }
            }
        }
        jac.fixed_view_mut::<3, 3>(3 * row, 3 * row).copy_from(&diag);
    }
    jac
}

/// Positions of all masses at static equilibrium with the robots held at
/// `robots` (one entry per robot, in [`Topology::robots`] order).
///
/// Damped Newton iteration on the stacked net-force residual of the free
/// masses, started from a shape spanned between the fixed points.
pub fn static_equilibrium(topo: &Topology, params: &CableParams, robots: &[Vec3]) -> Result<Vec<Vec3>> {
    params.check_topology(topo)?;
    if robots.len() != topo.robot_count() {
        return Err(Error::InvalidParams(format!(
            "expected {} robot positions, got {}",
            topo.robot_count(),
            robots.len()
        )));
    }
    let free = topo.free_masses();
    let mut p = initial_guess(topo, params, robots);
    if free.is_empty() {
        return Ok(p);
    }
    let max_iter = 200;
    let mut r = equilibrium_residual(topo, params, &p, &free)?;
    let mut mu = 0.0;
    for _ in 0..max_iter {
        if r.amax() < EQUILIBRIUM_TOL {
            return Ok(p);
        }
        let jac = equilibrium_jacobian(params, &p, &free);
        let cost = r.norm_squared();
        let mut accepted = false;
        // Newton first (mu = 0), then Levenberg damping if it does not descend.
        for attempt in 0..30 {
            let step = if mu == 0.0 {
                jac.clone().lu().solve(&(-&r))
            } else {
                let jt = jac.transpose();
                let mut h = &jt * &jac;
                for d in 0..h.nrows() {
                    h[(d, d)] += mu * (1.0 + h[(d, d)]);
                }
                h.cholesky().map(|c| c.solve(&(-(&jt * &r))))
            };
            if let Some(step) = step.filter(|s| s.iter().all(|x| x.is_finite())) {
                let mut trial = p.clone();
                for (row, &i) in free.iter().enumerate() {
                    trial[i - 1] += step.fixed_rows::<3>(3 * row).into_owned();
                }
                if let Ok(rt) = equilibrium_residual(topo, params, &trial, &free) {
                    if rt.norm_squared() < cost {
                        p = trial;
                        r = rt;
                        mu = if mu == 0.0 { 0.0 } else { mu / 10.0 };
                        if mu < 1e-12 {
                            mu = 0.0;
                        }
                        accepted = true;
                        break;
                    }
                }
            }
            mu = if mu == 0.0 { 1e-6 } else { mu * 10.0 };
            let _ = attempt;
        }
        if !accepted {
            break;
        }
    }
    if r.amax() < EQUILIBRIUM_TOL {
        Ok(p)
    } else {
        Err(Error::NoConvergence {
            residual: r.amax(),
            iterations: max_iter,
        })
    }
}

/// Largest net-force magnitude over the free masses at rest.
pub fn static_residual(topo: &Topology, params: &CableParams, positions: &[Vec3]) -> Result<f64> {
    let free = topo.free_masses();
    let r = equilibrium_residual(topo, params, positions, &free)?;
    Ok((0..free.len())
        .map(|k| r.fixed_rows::<3>(3 * k).norm())
        .fold(0.0, f64::max))
}
