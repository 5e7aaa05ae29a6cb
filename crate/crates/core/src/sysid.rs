//! Stiffness and damping identification from boundary-driven position records.
//!
//! The boundary points of the cable are treated as inputs and the remaining
//! points as outputs. For a parameter guess the cable is integrated from the
//! measured state (multi-step prediction) and, separately, from the measured
//! state one sample earlier (one-step prediction). The homotopy cost blends
//! the two,
//!
//! `J = 1/lambda * sum |x_hat - x|_W^2 + 1/(1 - lambda) * sum |x_hat_c - x|_W^2`,
//!
//! and is minimised for a decreasing sequence of `lambda` by Levenberg-Marquardt
//! in the logarithm of the parameters.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cable::{spring_force, static_equilibrium, CableParams, MassState, Segment, SystemClass, Topology, GRAVITY};
use crate::error::{Error, Result};
use crate::geometry::{Vec3, E3};
use crate::signal::{Signal, VectorSignal};
use crate::sim::{content_hash, SignalBoundary, SimConfig, SimMode, Simulator, SystemState};

/// Uniformly sampled positions (and velocities) of every cable point.
#[derive(Debug, Clone, PartialEq)]
pub struct MocapDataset {
    /// Sampling rate, Hz.
    pub rate: f64,
    pub t0: f64,
    /// `positions[k][i - 1]`: point `i` at sample `k`.
    pub positions: Vec<Vec<Vec3>>,
    pub velocities: Vec<Vec<Vec3>>,
    /// True when velocities came from the file rather than from differencing.
    pub velocities_measured: bool,
    /// Frames that had at least one missing value and were interpolated.
    pub gaps_filled: usize,
}

impl MocapDataset {
    /// Dataset from positions only; velocities by central differences.
    pub fn from_positions(rate: f64, t0: f64, positions: Vec<Vec<Vec3>>) -> Result<Self> {
        check_shape(rate, &positions)?;
        let velocities = differentiate(&positions, 1.0 / rate);
        Ok(MocapDataset {
            rate,
            t0,
            positions,
            velocities,
            velocities_measured: false,
            gaps_filled: 0,
        })
    }

    /// Dataset with measured velocities.
    pub fn with_velocities(rate: f64, t0: f64, positions: Vec<Vec<Vec3>>, velocities: Vec<Vec<Vec3>>) -> Result<Self> {
        check_shape(rate, &positions)?;
        if velocities.len() != positions.len() || velocities.iter().zip(&positions).any(|(v, p)| v.len() != p.len()) {
            return Err(Error::Schema("velocity block does not match the positions".into()));
        }
        Ok(MocapDataset {
            rate,
            t0,
            positions,
            velocities,
            velocities_measured: true,
            gaps_filled: 0,
        })
    }

    /// Same positions with the velocities replaced by finite differences, as
    /// a position-only capture system would deliver them.
    pub fn positions_only(&self) -> Self {
        MocapDataset {
            velocities: differentiate(&self.positions, 1.0 / self.rate),
            velocities_measured: false,
            ..self.clone()
        }
    }

    pub fn n(&self) -> usize {
        self.positions[0].len()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 / self.rate
    }

    pub fn state(&self, k: usize, i: usize) -> MassState {
        MassState {
            p: self.positions[k][i - 1],
            v: self.velocities[k][i - 1],
        }
    }

    /// Mean distance between the extremities of every segment.
    pub fn rest_lengths(&self) -> Vec<f64> {
        (1..self.n())
            .map(|i| {
                self.positions
                    .iter()
                    .map(|row| (row[i] - row[i - 1]).norm())
                    .sum::<f64>()
                    / self.len() as f64
            })
            .collect()
    }

    /// First `samples` frames.
    pub fn truncated(&self, samples: usize) -> Self {
        let k = samples.min(self.len());
        MocapDataset {
            positions: self.positions[..k].to_vec(),
            velocities: self.velocities[..k].to_vec(),
            ..self.clone()
        }
    }

    /// CSV with `t, p1x .. p{n}z` and, if asked, `v1x .. v{n}z`.
    pub fn write_csv<W: Write>(&self, w: W, with_velocities: bool) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(header(self.n(), with_velocities))?;
        for k in 0..self.len() {
            let mut r = vec![self.time(k)];
            for p in &self.positions[k] {
                r.extend_from_slice(p.as_slice());
            }
            if with_velocities {
                for v in &self.velocities[k] {
                    r.extend_from_slice(v.as_slice());
                }
            }
            wr.write_record(r.iter().map(|x| format!("{x:e}")))?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn check_shape(rate: f64, positions: &[Vec<Vec3>]) -> Result<()> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::Schema(format!("sampling rate must be positive, got {rate}")));
    }
    if positions.len() < 3 {
        return Err(Error::Schema("at least three frames are needed".into()));
    }
    let n = positions[0].len();
    if n < 3 {
        return Err(Error::Schema(format!("need at least three cable points, got {n}")));
    }
    if positions.iter().any(|row| row.len() != n) {
        return Err(Error::Schema("every frame must hold the same number of points".into()));
    }
    Ok(())
}

fn header(n: usize, with_velocities: bool) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    let prefixes: &[&str] = if with_velocities { &["p", "v"] } else { &["p"] };
    for prefix in prefixes {
        for i in 1..=n {
            for a in ["x", "y", "z"] {
                h.push(format!("{prefix}{i}{a}"));
            }
        }
    }
    h
}

/// Second-order differences: central inside, one-sided at both ends.
fn differentiate(positions: &[Vec<Vec3>], h: f64) -> Vec<Vec<Vec3>> {
    let len = positions.len();
    (0..len)
        .map(|k| {
            (0..positions[k].len())
                .map(|i| {
                    let p = |j: usize| positions[j][i];
                    if k == 0 {
                        (-3.0 * p(0) + 4.0 * p(1) - p(2)) / (2.0 * h)
                    } else if k == len - 1 {
                        (3.0 * p(k) - 4.0 * p(k - 1) + p(k - 2)) / (2.0 * h)
                    } else {
                        (p(k + 1) - p(k - 1)) / (2.0 * h)
                    }
                })
                .collect()
        })
        .collect()
}

/// Reads a marker CSV (`t, p1x, p1y, p1z, ...`, optional `v1x ...` block).
///
/// Empty or `nan` cells and skipped time stamps count as dropped frames and
/// are filled by linear interpolation; a run longer than `max_gap` frames is
/// rejected.
pub fn preprocess<R: Read>(reader: R, max_gap: usize) -> Result<MocapDataset> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let head: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if head.len() < 4 || head[0] != "t" || !(head.len() - 1).is_multiple_of(3) {
        return Err(Error::Schema(format!("unexpected header {head:?}")));
    }
    let cols = (head.len() - 1) / 3;
    let (n, with_v) = if head[1..] == header(cols, false)[1..] {
        (cols, false)
    } else if cols.is_multiple_of(2) && head[1..] == header(cols / 2, true)[1..] {
        (cols / 2, true)
    } else {
        return Err(Error::Schema(format!(
            "columns must be t, p1x, p1y, p1z, ..., p{{n}}z with an optional v block, got {head:?}"
        )));
    };

    let mut times = Vec::new();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() != head.len() {
            return Err(Error::Schema(format!("row {} has {} fields", line + 2, rec.len())));
        }
        let t: f64 = rec[0]
            .parse()
            .map_err(|_| Error::Schema(format!("row {}: bad time stamp {:?}", line + 2, &rec[0])))?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| {
                if s.is_empty() || s.eq_ignore_ascii_case("nan") {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::Schema(format!("row {}: bad value {s:?}", line + 2)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        times.push(t);
        rows.push(vals);
    }
    if times.len() < 3 {
        return Err(Error::Schema("at least three frames are needed".into()));
    }

    // Nominal period from the median spacing; whole multiples are dropped frames.
    let mut steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    steps.sort_by(f64::total_cmp);
    let h = steps[steps.len() / 2];
    if !(h > 0.0) {
        return Err(Error::Schema("time stamps must be strictly increasing".into()));
    }
    let mut grid: Vec<Vec<Option<f64>>> = Vec::with_capacity(rows.len());
    for (k, row) in rows.into_iter().enumerate() {
        if k > 0 {
            let ratio = (times[k] - times[k - 1]) / h;
            let m = ratio.round();
            if m < 1.0 || (ratio - m).abs() > 1e-3 {
                return Err(Error::Schema(format!("non-uniform time step at t = {}", times[k])));
            }
            for _ in 1..m as usize {
                grid.push(vec![None; head.len() - 1]);
            }
        }
        grid.push(row);
    }

    let gaps_filled = grid.iter().filter(|r| r.iter().any(Option::is_none)).count();
    let len = grid.len();
    let mut filled = vec![vec![0.0; head.len() - 1]; len];
    for c in 0..head.len() - 1 {
        let known: Vec<usize> = (0..len).filter(|&k| grid[k][c].is_some()).collect();
        if known.is_empty() {
            return Err(Error::Schema(format!("column {} has no values", head[c + 1])));
        }
        let mut run = 0;
        for k in 0..len {
            match grid[k][c] {
                Some(v) => {
                    filled[k][c] = v;
                    run = 0;
                }
                None => {
                    run += 1;
                    let next = known.partition_point(|&j| j < k);
                    let after = known.get(next).copied();
                    let before = next.checked_sub(1).map(|j| known[j]);
                    let span = match (before, after) {
                        (Some(b), Some(a)) => a - b - 1,
                        (None, Some(a)) => a,
                        (Some(b), None) => len - b - 1,
                        (None, None) => unreachable!(),
                    };
                    if span > max_gap {
                        return Err(Error::ExcessiveGaps {
                            count: span,
                            t: times[0] + (k + 1 - run) as f64 * h,
                            limit: max_gap,
                        });
                    }
                    filled[k][c] = match (before, after) {
                        (Some(b), Some(a)) => {
                            let w = (k - b) as f64 / (a - b) as f64;
                            grid[b][c].unwrap() * (1.0 - w) + grid[a][c].unwrap() * w
                        }
                        (Some(b), None) => grid[b][c].unwrap(),
                        (None, Some(a)) => grid[a][c].unwrap(),
                        (None, None) => unreachable!(),
                    };
                }
            }
        }
    }

    let vec3s = |row: &[f64], offset: usize| -> Vec<Vec3> {
        (0..n)
            .map(|i| Vec3::new(row[offset + 3 * i], row[offset + 3 * i + 1], row[offset + 3 * i + 2]))
            .collect()
    };
    let positions: Vec<Vec<Vec3>> = filled.iter().map(|r| vec3s(r, 0)).collect();
    let mut data = MocapDataset::from_positions(1.0 / h, times[0], positions)?;
    if with_v {
        data.velocities = filled.iter().map(|r| vec3s(r, 3 * n)).collect();
        data.velocities_measured = true;
    }
    data.gaps_filled = gaps_filled;
    Ok(data)
}

/// Unknown parameters: one stiffness per segment and a damping shared by all points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaVector {
    pub k: Vec<f64>,
    pub c: f64,
}

impl ThetaVector {
    pub fn dim(&self) -> usize {
        self.k.len() + 1
    }

    pub fn validate(&self, segments: usize) -> Result<()> {
        if self.k.len() != segments {
            return Err(Error::InvalidParams(format!(
                "theta needs {segments} stiffnesses, got {}",
                self.k.len()
            )));
        }
        if self.k.iter().chain([&self.c]).any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidParams("identified parameters must be positive".into()));
        }
        Ok(())
    }

    fn to_log(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.k.iter().chain([&self.c]).map(|x| x.ln()))
    }

    fn from_log(phi: &DVector<f64>) -> Self {
        let n = phi.len();
        ThetaVector {
            k: phi.iter().take(n - 1).map(|x| x.exp()).collect(),
            c: phi[n - 1].exp(),
        }
    }

    /// Every entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        ThetaVector {
            k: self.k.iter().map(|k| k * factor).collect(),
            c: self.c * factor,
        }
    }

    fn names(&self) -> Vec<String> {
        (1..=self.k.len())
            .map(|i| format!("k{i}"))
            .chain(["c".to_string()])
            .collect()
    }
}

fn default_lambdas() -> Vec<f64> {
    vec![0.9, 0.5, 0.2, 0.05]
}

fn default_max_iterations() -> usize {
    30
}

fn default_tolerance() -> f64 {
    1e-10
}

/// Decreasing homotopy parameters with per-stage iteration cap and
/// relative cost tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomotopySchedule {
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

impl Default for HomotopySchedule {
    fn default() -> Self {
        HomotopySchedule {
            lambdas: default_lambdas(),
            max_iterations: default_max_iterations(),
            tolerance: default_tolerance(),
        }
    }
}

impl HomotopySchedule {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::InvalidConfig("the homotopy schedule is empty".into()));
        }
        for &l in &self.lambdas {
            check_lambda(l)?;
        }
        if self.lambdas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig(format!(
                "homotopy parameters must be strictly decreasing: {:?}",
                self.lambdas
            )));
        }
        if self.max_iterations == 0 || !(self.tolerance >= 0.0) {
            return Err(Error::InvalidConfig(
                "iteration cap and tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidLambda(lambda))
    }
}

fn one() -> f64 {
    1.0
}

/// Diagonal of `W`: one weight for position errors, one for velocity errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weights {
    #[serde(default = "one")]
    pub position: f64,
    #[serde(default = "one")]
    pub velocity: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights {
            position: 1.0,
            velocity: 1.0,
        }
    }
}

fn default_window() -> f64 {
    2.0
}

fn default_dt() -> f64 {
    1e-3
}

fn default_max_gap() -> usize {
    10
}

fn default_k_max() -> f64 {
    1e4
}

fn default_c_max() -> f64 {
    10.0
}

fn default_gravity() -> f64 {
    GRAVITY
}

/// Everything `identify` needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Total cable mass, kg; every point gets `total_mass / n`.
    pub total_mass: f64,
    /// Prescribed (input) points; defaults to both ends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<Vec<usize>>,
    pub theta0: ThetaVector,
    /// Known rest lengths; by default the mean segment length of the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rest_lengths: Option<Vec<f64>>,
    #[serde(default)]
    pub schedule: HomotopySchedule,
    #[serde(default)]
    pub weights: Weights,
    /// Length of the multi-step windows, s.
    #[serde(default = "default_window")]
    pub window: f64,
    /// One window over the whole record (re-initialised only at the start).
    #[serde(default)]
    pub paper_exact: bool,
    /// Integration step, s; must divide the sampling period.
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_max_gap")]
    pub max_gap: usize,
    #[serde(default = "default_k_max")]
    pub k_max: f64,
    #[serde(default = "default_c_max")]
    pub c_max: f64,
    #[serde(default = "default_gravity")]
    pub g: f64,
}

impl IdentifyConfig {
    pub fn new(total_mass: f64, theta0: ThetaVector) -> Self {
        IdentifyConfig {
            total_mass,
            boundary: None,
            theta0,
            rest_lengths: None,
            schedule: HomotopySchedule::default(),
            weights: Weights::default(),
            window: default_window(),
            paper_exact: false,
            dt: default_dt(),
            max_gap: default_max_gap(),
            k_max: default_k_max(),
            c_max: default_c_max(),
            g: default_gravity(),
        }
    }
}

/// Multi-step and one-step predictions of the output points for every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Output point indices, ascending.
    pub outputs: Vec<usize>,
    /// `multi[k][o]`: state of `outputs[o]` at sample `k`.
    pub multi: Vec<Vec<MassState>>,
    pub one_step: Vec<Vec<MassState>>,
}

/// `sum_k sum_o |x_hat - x|_W^2` over the given prediction.
pub fn shooting_cost(predicted: &[Vec<MassState>], data: &MocapDataset, outputs: &[usize], w: &Weights) -> f64 {
    predicted
        .iter()
        .enumerate()
        .map(|(k, row)| {
            row.iter()
                .zip(outputs)
                .map(|(x, &i)| {
                    let m = data.state(k, i);
                    w.position * (x.p - m.p).norm_squared() + w.velocity * (x.v - m.v).norm_squared()
                })
                .sum::<f64>()
        })
        .sum()
}

/// Per-stage summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub lambda: f64,
    pub cost_start: f64,
    pub cost_end: f64,
    pub iterations: usize,
    pub theta: ThetaVector,
}

/// Fit error of one output point (multi-step prediction, positions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointError {
    pub index: usize,
    /// Mean of `|x_hat - x|` per coordinate, m.
    pub mean_abs: [f64; 3],
    pub mean_norm: f64,
    pub max_norm: f64,
}

/// `|d r / d ln theta_j|` at the solution; a flagged entry barely affects the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub parameter: String,
    pub value: f64,
    pub column_norm: f64,
    pub relative: f64,
    pub flagged: bool,
}

/// Outcome of [`identify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub theta: ThetaVector,
    pub rest_lengths: Vec<f64>,
    pub mass: f64,
    pub rate: f64,
    pub samples: usize,
    pub gaps_filled: usize,
    pub velocities_measured: bool,
    pub paper_exact: bool,
    pub window: f64,
    pub stages: Vec<StageReport>,
    pub errors: Vec<PointError>,
    /// Mean over points, samples and coordinates of `|x_hat - x|`, m.
    pub mean_coordinate_error: f64,
    pub sensitivities: Vec<Sensitivity>,
    pub data_hash: String,
    pub config_hash: String,
}

const SENSITIVITY_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-6;

/// A dataset bound to the fixed quantities of the model (rest lengths,
/// mass, boundary set, windows).
pub struct Problem<'a> {
    data: &'a MocapDataset,
    config: IdentifyConfig,
    rest_lengths: Vec<f64>,
    mass: f64,
    boundary: Vec<usize>,
    outputs: Vec<usize>,
    substeps: usize,
    windows: Vec<(usize, usize)>,
}

impl<'a> Problem<'a> {
    pub fn new(data: &'a MocapDataset, config: &IdentifyConfig) -> Result<Self> {
        let n = data.n();
        config.schedule.validate()?;
        config.theta0.validate(n - 1)?;
        if !(config.total_mass > 0.0) || !(config.g >= 0.0) {
            return Err(Error::InvalidConfig(
                "total mass must be positive and gravity non-negative".into(),
            ));
        }
        if config.theta0.k.iter().any(|k| *k > config.k_max) || config.theta0.c > config.c_max {
            return Err(Error::InvalidConfig("theta0 exceeds the configured bounds".into()));
        }
        let w = &config.weights;
        if !(w.position > 0.0) || !(w.velocity > 0.0) {
            return Err(Error::InvalidConfig("weights must be positive".into()));
        }
        let boundary = config.boundary.clone().unwrap_or_else(|| vec![1, n]);
        if boundary.is_empty() || boundary.iter().any(|&i| i < 1 || i > n) {
            return Err(Error::InvalidConfig(format!(
                "boundary points {boundary:?} outside 1..={n}"
            )));
        }
        let outputs: Vec<usize> = (1..=n).filter(|i| !boundary.contains(i)).collect();
        if outputs.is_empty() {
            return Err(Error::InvalidConfig("no output points left to fit".into()));
        }
        let period = 1.0 / data.rate;
        let substeps = (period / config.dt).round();
        if !(config.dt > 0.0) || substeps < 1.0 || (substeps * config.dt - period).abs() > 1e-9 * period {
            return Err(Error::InvalidConfig(format!(
                "dt = {} must divide the sampling period {period}",
                config.dt
            )));
        }
        let rest_lengths = match &config.rest_lengths {
            Some(l) if l.len() != n - 1 || l.iter().any(|x| !(*x > 0.0)) => {
                return Err(Error::InvalidConfig(format!(
                    "expected {} positive rest lengths",
                    n - 1
                )));
            }
            Some(l) => l.clone(),
            None => data.rest_lengths(),
        };
        let len = data.len();
        let windows = if config.paper_exact {
            vec![(0, len)]
        } else {
            if !(config.window > 0.0) {
                return Err(Error::InvalidConfig("window length must be positive".into()));
            }
            let w = ((config.window * data.rate).round() as usize).max(1);
            (0..len).step_by(w).map(|s| (s, (s + w + 1).min(len))).collect()
        };
        Ok(Problem {
            data,
            config: config.clone(),
            rest_lengths,
            mass: config.total_mass / n as f64,
            boundary,
            outputs,
            substeps: substeps as usize,
            windows,
        })
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    pub fn rest_lengths(&self) -> &[f64] {
        &self.rest_lengths
    }

    /// Cable parameters for `theta` (uniform mass, shared damping, no ground anchor).
    pub fn params(&self, theta: &ThetaVector) -> Result<CableParams> {
        theta.validate(self.data.n() - 1)?;
        let n = self.data.n();
        let segments = theta
            .k
            .iter()
            .zip(&self.rest_lengths)
            .map(|(&k, &l0)| Segment { k, l0 })
            .collect();
        CableParams::new(n, None, segments, vec![self.mass; n], vec![theta.c; n], self.config.g)
    }

    /// Advances `state` (all points) from sample `k` to `k + 1`; boundary
    /// points move linearly between the two samples.
    fn advance(&self, theta: &ThetaVector, state: &mut [MassState], k: usize) -> Result<()> {
        let h = 1.0 / (self.data.rate * self.substeps as f64);
        let (b0, b1) = (&self.data.positions[k], &self.data.positions[k + 1]);
        let slope: Vec<Vec3> = self
            .boundary
            .iter()
            .map(|&i| (b1[i - 1] - b0[i - 1]) * self.data.rate)
            .collect();
        let at = |frac: f64, s: &mut [MassState]| {
            for (&i, v) in self.boundary.iter().zip(&slope) {
                s[i - 1] = MassState {
                    p: b0[i - 1] + (b1[i - 1] - b0[i - 1]) * frac,
                    v: *v,
                };
            }
        };
        let n = state.len();
        let g = self.config.g;
        let inv_m = 1.0 / self.mass;
        let accel = |s: &[MassState], out: &mut [Vec3]| -> Result<()> {
            let mut f_prev = Vec3::zeros();
            for i in 1..=n {
                let f_i = if i < n {
                    spring_force(&s[i - 1].p, &s[i].p, theta.k[i - 1], self.rest_lengths[i - 1])?
                } else {
                    Vec3::zeros()
                };
                out[i - 1] = -g * E3 + (f_i - f_prev - theta.c * s[i - 1].v) * inv_m;
                f_prev = f_i;
            }
            Ok(())
        };
        let mut stage_state = state.to_vec();
        let mut ka = [
            vec![Vec3::zeros(); n],
            vec![Vec3::zeros(); n],
            vec![Vec3::zeros(); n],
            vec![Vec3::zeros(); n],
        ];
        let mut kv = ka.clone();
        let frac_of = |sub: usize, c: f64| (sub as f64 + c) / self.substeps as f64;
        for sub in 0..self.substeps {
            at(frac_of(sub, 0.0), state);
            for (stage, c) in [(0, 0.0), (1, 0.5), (2, 0.5), (3, 1.0)] {
                let src: &[MassState] = if stage == 0 {
                    state
                } else {
                    for i in 0..n {
                        stage_state[i] = MassState {
                            p: state[i].p + c * h * kv[stage - 1][i],
                            v: state[i].v + c * h * ka[stage - 1][i],
                        };
                    }
                    at(frac_of(sub, c), &mut stage_state);
                    &stage_state
                };
                for i in 0..n {
                    kv[stage][i] = src[i].v;
                }
                accel(src, &mut ka[stage])?;
            }
            for i in 0..n {
                state[i].p += h / 6.0 * (kv[0][i] + 2.0 * kv[1][i] + 2.0 * kv[2][i] + kv[3][i]);
                state[i].v += h / 6.0 * (ka[0][i] + 2.0 * ka[1][i] + 2.0 * ka[2][i] + ka[3][i]);
            }
            if state
                .iter()
                .any(|m| !m.p.iter().chain(m.v.iter()).all(|x| x.is_finite()))
            {
                return Err(Error::NonFiniteDerivative { t: self.data.time(k) });
            }
        }
        at(1.0, state);
        Ok(())
    }

    fn measured(&self, k: usize) -> Vec<MassState> {
        (1..=self.data.n()).map(|i| self.data.state(k, i)).collect()
    }

    fn pick(&self, s: &[MassState]) -> Vec<MassState> {
        self.outputs.iter().map(|&i| s[i - 1]).collect()
    }

    /// Multi-step (windowed or single-window) and one-step predictions.
    pub fn rollout(&self, theta: &ThetaVector) -> Result<Prediction> {
        theta.validate(self.data.n() - 1)?;
        let windows: Vec<Vec<Vec<MassState>>> = self
            .windows
            .par_iter()
            .map(|&(start, end)| {
                let mut s = self.measured(start);
                let mut out = vec![self.pick(&s)];
                for k in start..end - 1 {
                    self.advance(theta, &mut s, k)?;
                    out.push(self.pick(&s));
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let mut multi = Vec::with_capacity(self.data.len());
        for (w, rows) in windows.into_iter().enumerate() {
            // windows overlap by one sample; the later window's measured start wins
            let skip_last = w + 1 < self.windows.len();
            let take = rows.len() - skip_last as usize;
            multi.extend(rows.into_iter().take(take));
        }
        let one_step: Vec<Vec<MassState>> = (0..self.data.len())
            .into_par_iter()
            .map(|k| {
                if k == 0 {
                    return Ok(self.pick(&self.measured(0)));
                }
                let mut s = self.measured(k - 1);
                self.advance(theta, &mut s, k - 1)?;
                Ok(self.pick(&s))
            })
            .collect::<Result<_>>()?;
        Ok(Prediction {
            outputs: self.outputs.clone(),
            multi,
            one_step,
        })
    }

    /// `(multi-step term, one-step term)` before the homotopy weights.
    pub fn cost_terms(&self, theta: &ThetaVector) -> Result<(f64, f64)> {
        let p = self.rollout(theta)?;
        let w = &self.config.weights;
        Ok((
            shooting_cost(&p.multi, self.data, &self.outputs, w),
            shooting_cost(&p.one_step, self.data, &self.outputs, w),
        ))
    }

    pub fn homotopy_cost(&self, theta: &ThetaVector, lambda: f64) -> Result<f64> {
        check_lambda(lambda)?;
        let (m, o) = self.cost_terms(theta)?;
        Ok(m / lambda + o / (1.0 - lambda))
    }

    /// Stacked weighted residuals whose squared norm is the homotopy cost.
    fn residuals(&self, theta: &ThetaVector, lambda: f64) -> Result<DVector<f64>> {
        let p = self.rollout(theta)?;
        let w = &self.config.weights;
        let (sp, sv) = (w.position.sqrt(), w.velocity.sqrt());
        let mut r = Vec::with_capacity(2 * p.multi.len() * self.outputs.len() * 6);
        for (pred, scale) in [
            (&p.multi, (1.0 / lambda).sqrt()),
            (&p.one_step, (1.0 / (1.0 - lambda)).sqrt()),
        ] {
            for (k, row) in pred.iter().enumerate() {
                for (x, &i) in row.iter().zip(&self.outputs) {
                    let m = self.data.state(k, i);
                    r.extend((x.p - m.p).iter().map(|e| e * sp * scale));
                    r.extend((x.v - m.v).iter().map(|e| e * sv * scale));
                }
            }
        }
        Ok(DVector::from_vec(r))
    }

    fn clamp_log(&self, phi: &mut DVector<f64>) {
        let n = phi.len();
        for j in 0..n {
            let hi = if j + 1 == n {
                self.config.c_max
            } else {
                self.config.k_max
            };
            phi[j] = phi[j].min(hi.ln());
        }
    }

    /// Forward-difference Jacobian in log-parameters.
    fn jacobian(&self, phi: &DVector<f64>, r0: &DVector<f64>, lambda: f64) -> Result<DMatrix<f64>> {
        let cols: Vec<DVector<f64>> = (0..phi.len())
            .into_par_iter()
            .map(|j| {
                let mut p = phi.clone();
                p[j] += FD_STEP;
                let r = self.residuals(&ThetaVector::from_log(&p), lambda)?;
                Ok((r - r0) / FD_STEP)
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_columns(&cols))
    }

    /// Levenberg-Marquardt on one stage. Returns the new point, its cost and
    /// the number of accepted steps.
    fn stage(&self, stage: usize, phi0: DVector<f64>, lambda: f64) -> Result<(DVector<f64>, f64, f64, usize)> {
        let mut phi = phi0;
        let mut r = self.residuals(&ThetaVector::from_log(&phi), lambda)?;
        let mut cost = r.norm_squared();
        let start = cost;
        let mut mu = -1.0;
        let mut accepted = 0;
        let mut converged = false;
        for _ in 0..self.config.schedule.max_iterations {
            if cost == 0.0 {
                converged = true;
                break;
            }
            let jac = self.jacobian(&phi, &r, lambda)?;
            let a = jac.transpose() * &jac;
            let g = jac.transpose() * &r;
            let scale = a.diagonal().map(|d| d.max(1e-12 * a.diagonal().max()));
            if g.iter()
                .zip(scale.iter())
                .all(|(gi, si)| gi.abs() <= 1e-12 * (cost * si).sqrt().max(1e-300))
            {
                converged = true;
                break;
            }
            if mu < 0.0 {
                mu = 1e-3;
            }
            let mut stepped = false;
            while mu < 1e12 {
                let mut lhs = a.clone();
                for j in 0..lhs.nrows() {
                    lhs[(j, j)] += mu * scale[j];
                }
                let Some(chol) = lhs.cholesky() else {
                    mu *= 10.0;
                    continue;
                };
                let delta = chol.solve(&(-&g));
                let mut trial = &phi + &delta;
                self.clamp_log(&mut trial);
                let trial_cost = self
                    .residuals(&ThetaVector::from_log(&trial), lambda)
                    .map(|rt| (rt.norm_squared(), rt));
                match trial_cost {
                    Ok((c, rt)) if c < cost => {
                        let rel = (cost - c) / cost;
                        let step = (&trial - &phi).amax();
                        phi = trial;
                        r = rt;
                        cost = c;
                        mu = (mu / 3.0).max(1e-9);
                        accepted += 1;
                        stepped = true;
                        if rel < self.config.schedule.tolerance || step < 1e-10 {
                            converged = true;
                        }
                        break;
                    }
                    Ok(_) | Err(Error::NonFiniteDerivative { .. }) | Err(Error::SeparationTooSmall { .. }) => {
                        mu *= 4.0;
                    }
                    Err(e) => return Err(e),
                }
            }
            if !stepped {
                // no decrease along any damped direction: a local minimum to
                // round-off unless nothing at all was gained in this stage
                if accepted == 0 && cost > 0.0 && g.amax() > 1e-9 * cost.max(1e-300) {
                    return Err(Error::NoDescent { stage, lambda });
                }
                converged = true;
            }
            if converged {
                break;
            }
        }
        log::debug!(
            "stage {stage} lambda {lambda}: cost {start:.6e} -> {cost:.6e} ({accepted} steps, converged {converged})"
        );
        Ok((phi, start, cost, accepted))
    }

    /// Staged minimisation over the homotopy schedule.
    pub fn identify(&self) -> Result<IdentificationReport> {
        let mut phi = self.config.theta0.to_log();
        self.clamp_log(&mut phi);
        let mut stages = Vec::new();
        for (s, &lambda) in self.config.schedule.lambdas.iter().enumerate() {
            let (next, start, end, iterations) = self.stage(s, phi, lambda)?;
            phi = next;
            stages.push(StageReport {
                stage: s,
                lambda,
                cost_start: start,
                cost_end: end,
                iterations,
                theta: ThetaVector::from_log(&phi),
            });
        }
        let theta = ThetaVector::from_log(&phi);
        let prediction = self.rollout(&theta)?;
        let errors = point_errors(&prediction, self.data);
        let mean_coordinate_error =
            errors.iter().map(|e| e.mean_abs.iter().sum::<f64>()).sum::<f64>() / (3 * errors.len()) as f64;
        let last = *self.config.schedule.lambdas.last().unwrap();
        let sensitivities = self.sensitivities(&theta, last)?;
        Ok(IdentificationReport {
            theta,
            rest_lengths: self.rest_lengths.clone(),
            mass: self.mass,
            rate: self.data.rate,
            samples: self.data.len(),
            gaps_filled: self.data.gaps_filled,
            velocities_measured: self.data.velocities_measured,
            paper_exact: self.config.paper_exact,
            window: if self.config.paper_exact {
                self.data.len() as f64 / self.data.rate
            } else {
                self.config.window
            },
            stages,
            errors,
            mean_coordinate_error,
            sensitivities,
            data_hash: dataset_hash(self.data),
            config_hash: content_hash(&self.config),
        })
    }

    /// Column norms of the residual Jacobian in log-parameters.
    pub fn sensitivities(&self, theta: &ThetaVector, lambda: f64) -> Result<Vec<Sensitivity>> {
        check_lambda(lambda)?;
        let phi = theta.to_log();
        let r = self.residuals(theta, lambda)?;
        let jac = self.jacobian(&phi, &r, lambda)?;
        let norms: Vec<f64> = jac.column_iter().map(|c| c.norm()).collect();
        let top = norms.iter().copied().fold(0.0, f64::max);
        Ok(theta
            .names()
            .into_iter()
            .zip(theta.k.iter().chain([&theta.c]))
            .zip(&norms)
            .map(|((parameter, &value), &column_norm)| {
                let relative = if top > 0.0 { column_norm / top } else { 0.0 };
                Sensitivity {
                    parameter,
                    value,
                    column_norm,
                    relative,
                    flagged: relative < SENSITIVITY_FLOOR,
                }
            })
            .collect())
    }
}

/// Position fit statistics of the multi-step prediction.
pub fn point_errors(prediction: &Prediction, data: &MocapDataset) -> Vec<PointError> {
    prediction
        .outputs
        .iter()
        .enumerate()
        .map(|(o, &i)| {
            let mut abs = Vec3::zeros();
            let (mut sum, mut max) = (0.0, 0.0_f64);
            for (k, row) in prediction.multi.iter().enumerate() {
                let e = row[o].p - data.positions[k][i - 1];
                abs += e.abs();
                sum += e.norm();
                max = max.max(e.norm());
            }
            let len = prediction.multi.len() as f64;
            PointError {
                index: i,
                mean_abs: (abs / len).into(),
                mean_norm: sum / len,
                max_norm: max,
            }
        })
        .collect()
}

/// Error series `t, e{i}x, e{i}y, e{i}z` of the multi-step prediction.
pub fn write_error_series<W: Write>(prediction: &Prediction, data: &MocapDataset, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut head = vec!["t".to_string()];
    for i in &prediction.outputs {
        for a in ["x", "y", "z"] {
            head.push(format!("e{i}{a}"));
        }
    }
    wr.write_record(&head)?;
    for (k, row) in prediction.multi.iter().enumerate() {
        let mut r = vec![data.time(k)];
        for (x, &i) in row.iter().zip(&prediction.outputs) {
            r.extend_from_slice((x.p - data.positions[k][i - 1]).as_slice());
        }
        wr.write_record(r.iter().map(|x| format!("{x:e}")))?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn dataset_hash(data: &MocapDataset) -> String {
    let flat: Vec<f64> = data
        .positions
        .iter()
        .chain(&data.velocities)
        .flat_map(|row| row.iter().flat_map(|p| p.iter().copied()))
        .collect();
    content_hash(&(data.rate, data.t0, flat))
}

/// Homotopy cost of `theta` on `data` (see the module docs).
pub fn homotopy_cost(theta: &ThetaVector, lambda: f64, data: &MocapDataset, config: &IdentifyConfig) -> Result<f64> {
    check_lambda(lambda)?;
    Problem::new(data, config)?.homotopy_cost(theta, lambda)
}

/// Identifies `k_1 .. k_{n-1}` and `c` from `data`, starting at `config.theta0`.
pub fn identify(data: &MocapDataset, config: &IdentifyConfig) -> Result<IdentificationReport> {
    Problem::new(data, config)?.identify()
}

fn default_duration() -> f64 {
    120.0
}

fn default_rate() -> f64 {
    100.0
}

fn default_amplitude() -> f64 {
    0.08
}

fn default_band() -> [f64; 2] {
    [0.1, 1.2]
}

fn default_components() -> usize {
    3
}

fn default_ramp() -> f64 {
    2.0
}

/// Randomised boundary excitation of a cable with known parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub params: CableParams,
    /// Prescribed points, ascending; the last point of the cable must be one of them.
    pub boundary: Vec<usize>,
    /// Rest position of each boundary point.
    pub anchors: Vec<[f64; 3]>,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Amplitude bound of each sinusoidal component, m.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Frequency band of the components, Hz.
    #[serde(default = "default_band")]
    pub band: [f64; 2],
    #[serde(default = "default_components")]
    pub components: usize,
    /// The excitation fades in over this time, s.
    #[serde(default = "default_ramp")]
    pub ramp: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Cable identified on hardware (six points, both ends held) with the ends 0.6 m apart.
pub fn table1_params() -> CableParams {
    let k = [11.312, 5.411, 15.519, 7.008, 14.477];
    let l0 = [0.1950, 0.1942, 0.1827, 0.1943, 0.1977];
    let segments = k.iter().zip(&l0).map(|(&k, &l0)| Segment { k, l0 }).collect();
    CableParams::new(6, None, segments, vec![1.16e-3; 6], vec![0.002; 6], GRAVITY).expect("table values are valid")
}

impl SyntheticConfig {
    pub fn table1(seed: u64) -> Self {
        SyntheticConfig {
            params: table1_params(),
            boundary: vec![1, 6],
            anchors: vec![[-0.3, 0.0, 1.2], [0.3, 0.0, 1.2]],
            duration: default_duration(),
            rate: default_rate(),
            dt: default_dt(),
            amplitude: default_amplitude(),
            band: default_band(),
            components: default_components(),
            ramp: default_ramp(),
            seed,
        }
    }

    /// Boundary signals: anchor plus faded-in random sinusoids per axis.
    pub fn excitation(&self) -> SignalBoundary {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let two_pi = 2.0 * std::f64::consts::PI;
        let signals = self
            .anchors
            .iter()
            .map(|a| {
                let mut axis = |offset: f64| {
                    let terms = (0..self.components)
                        .map(|_| {
                            let amp = rng.random_range(0.3..1.0) * self.amplitude;
                            let f = rng.random_range(self.band[0]..self.band[1]);
                            let phase = rng.random_range(0.0..two_pi);
                            Signal::sinusoid(amp, two_pi * f, phase, 0.0)
                        })
                        .collect();
                    let fade = Signal::RestToRest {
                        start: 0.0,
                        delta: 1.0,
                        t0: 0.0,
                        duration: self.ramp,
                    };
                    let wave = Signal::Sum { terms };
                    // value and first two derivatives vanish at t = 0
                    let faded = Signal::Product {
                        factors: vec![fade, wave],
                    };
                    Signal::Sum {
                        terms: vec![Signal::constant(offset), faded],
                    }
                };
                VectorSignal {
                    x: axis(a[0]),
                    y: axis(a[1]),
                    z: axis(a[2]),
                }
            })
            .collect();
        SignalBoundary {
            indices: self.boundary.clone(),
            signals,
        }
    }
}

/// Simulates the boundary-driven cable from rest and samples it at `rate`.
/// Velocities are the simulated ones; see [`MocapDataset::positions_only`].
pub fn synthetic_dataset(cfg: &SyntheticConfig) -> Result<MocapDataset> {
    let n = cfg.params.n();
    if cfg.anchors.len() != cfg.boundary.len() {
        return Err(Error::InvalidConfig("one anchor per boundary point is required".into()));
    }
    let class = if cfg.boundary.first() == Some(&1) {
        SystemClass::C
    } else {
        SystemClass::B
    };
    let topo = Topology::new(class, n, cfg.boundary.clone())?;
    let anchors: Vec<Vec3> = cfg.anchors.iter().map(|a| Vec3::from(*a)).collect();
    let rest = static_equilibrium(&topo, &cfg.params, &anchors)?;
    let mut sc = SimConfig::new(cfg.duration);
    sc.dt = cfg.dt;
    sc.log_rate = cfg.rate;
    sc.mode = SimMode::BoundaryDriven;
    let sim = Simulator {
        topology: &topo,
        params: &cfg.params,
        quads: &[],
        config: &sc,
    };
    let log = sim.run_boundary(&cfg.excitation(), SystemState::at_rest(0.0, &topo, &rest), &|_| vec![])?;
    let (positions, velocities) = log.rows.into_iter().map(|r| (r.positions, r.velocities)).unzip();
    MocapDataset::with_velocities(cfg.rate, 0.0, positions, velocities)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn short_synthetic() -> MocapDataset {
        let mut cfg = SyntheticConfig::table1(3);
        cfg.duration = 6.0;
        synthetic_dataset(&cfg).unwrap()
    }

    fn config_for(theta0: ThetaVector) -> IdentifyConfig {
        IdentifyConfig::new(6.0 * 1.16e-3, theta0)
    }

    fn truth() -> ThetaVector {
        ThetaVector {
            k: vec![11.312, 5.411, 15.519, 7.008, 14.477],
            c: 0.002,
        }
    }

    #[test]
    fn lambda_outside_unit_interval_is_rejected() {
        let data = short_synthetic();
        let cfg = config_for(truth());
        for l in [0.0, 1.0, -0.2, 1.5] {
            assert!(matches!(
                homotopy_cost(&truth(), l, &data, &cfg),
                Err(Error::InvalidLambda(_))
            ));
        }
        let mut bad = cfg.clone();
        bad.schedule.lambdas = vec![0.5, 0.9];
        assert!(Problem::new(&data, &bad).is_err());
    }

    #[test]
    fn cost_terms_follow_the_homotopy_weights() {
        let data = short_synthetic();
        let cfg = config_for(truth());
        let pb = Problem::new(&data, &cfg).unwrap();
        let theta = truth().scaled(1.3);
        let (m, o) = pb.cost_terms(&theta).unwrap();
        for l in [0.99, 0.5, 0.01] {
            assert_relative_eq!(
                pb.homotopy_cost(&theta, l).unwrap(),
                m / l + o / (1.0 - l),
                max_relative = 1e-12
            );
        }
        assert!(m > 0.0 && o > 0.0);
        // near 1 the one-step term carries the cost, near 0 the multi-step one
        assert!(o / 0.01 > 0.9 * pb.homotopy_cost(&theta, 0.99).unwrap());
        assert!(m / 0.01 > 0.9 * pb.homotopy_cost(&theta, 0.01).unwrap());
    }

    #[test]
    fn constant_offset_closed_form() {
        let data = short_synthetic();
        let mut shifted = data.multi_for_test(3);
        let delta = Vec3::new(0.01, -0.02, 0.005);
        for row in &mut shifted {
            row[0].p += delta;
        }
        let c = shooting_cost(&shifted, &data, &[3], &Weights::default());
        assert_relative_eq!(c, data.len() as f64 * delta.norm_squared(), max_relative = 1e-12);
    }

    impl MocapDataset {
        fn multi_for_test(&self, i: usize) -> Vec<Vec<MassState>> {
            (0..self.len()).map(|k| vec![self.state(k, i)]).collect()
        }
    }
}
