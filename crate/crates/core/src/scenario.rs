//! Scenario files and the batch commands behind the `flexcable` binary.
//!
//! A scenario is one JSON document: topology, nominal cable parameters,
//! quadrotors, flat outputs, simulation settings and optional plant
//! perturbation and output-feedback blocks. Commands write CSV time series
//! with a JSON summary next to them (same stem, `.json`).
//!
//! Exit codes: 2 for schema and configuration errors, 3 for degeneracies of
//! the flatness recursion, 4 for I/O, 1 for anything else.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cable::{CableParams, SystemClass, Topology};
use crate::error::{Error, Result};
use crate::feedback::{ClosedLoop, GainConfig};
use crate::planner::{uniform_grid, FlatOutputs, PlannedTrajectory, Planner, SpringBranch, DEFAULT_RATE, RESIDUAL_TOL};
use crate::quadrotor::QuadParams;
use crate::sim::{
    content_hash, BoundaryTrack, InitSource, OutputMetric, SimConfig, SimLog, SimMode, Simulator, SystemState,
    TabulatedReference,
};
use crate::sysid::{self, IdentificationReport, IdentifyConfig, SyntheticConfig};

fn default_rate() -> f64 {
    DEFAULT_RATE
}

/// Sampling of the exported plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    #[serde(default = "default_rate")]
    pub rate: f64,
    /// Jet depth; the planner default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default)]
    pub branch: SpringBranch,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            rate: default_rate(),
            depth: None,
            branch: SpringBranch::default(),
        }
    }
}

fn unit() -> f64 {
    1.0
}

/// Mismatch between the model used for planning and the simulated plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    #[serde(default = "unit")]
    pub stiffness_scale: f64,
    #[serde(default = "unit")]
    pub damping_scale: f64,
}

/// One scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub topology: Topology,
    pub params: CableParams,
    pub quads: Vec<QuadParams>,
    pub flat: FlatOutputs,
    #[serde(default)]
    pub plan: PlanConfig,
    pub sim: SimConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<Perturbation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<GainConfig>,
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// `out` with its extension replaced by `.json`.
pub fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}{suffix}"))
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: ScenarioFile = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_file(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate(Some(&self.params))?;
        if !(self.plan.rate > 0.0) {
            return Err(Error::InvalidConfig("plan rate must be positive".into()));
        }
        if let Some(p) = &self.perturbation {
            if !(p.stiffness_scale > 0.0) || !(p.damping_scale >= 0.0) {
                return Err(Error::InvalidConfig("perturbation scales must be positive".into()));
            }
        }
        if let Some(g) = &self.feedback {
            g.validate()?;
        }
        self.planner().map(|_| ())
    }

    pub fn planner(&self) -> Result<Planner> {
        let p = Planner::new(
            self.topology.clone(),
            self.params.clone(),
            self.quads.clone(),
            self.flat.clone(),
        )?
        .with_branch(self.plan.branch);
        match self.plan.depth {
            Some(d) => p.with_depth(d),
            None => Ok(p),
        }
    }

    /// True plant: nominal parameters with the perturbation applied.
    pub fn plant(&self) -> CableParams {
        match &self.perturbation {
            Some(d) => self
                .params
                .scaled_stiffness(d.stiffness_scale)
                .scaled_damping(d.damping_scale),
            None => self.params.clone(),
        }
    }

    /// Plan grid covering the simulated interval.
    pub fn times(&self) -> Vec<f64> {
        uniform_grid(self.sim.t0, self.sim.t0 + self.sim.duration, self.plan.rate)
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

/// Process exit code for an error (see the module docs).
pub fn exit_code(e: &Error) -> i32 {
    if e.is_degeneracy() {
        return 3;
    }
    match e {
        Error::Io { .. } => 4,
        Error::Json(err) if err.is_io() => 4,
        Error::Csv(err) if matches!(err.kind(), csv::ErrorKind::Io(_)) => 4,
        Error::Json(_)
        | Error::Csv(_)
        | Error::Schema(_)
        | Error::InvalidTopology(_)
        | Error::InvalidParams(_)
        | Error::InvalidConfig(_)
        | Error::FlatOutputMismatch(_)
        | Error::InsufficientDepth { .. }
        | Error::InvalidLambda(_)
        | Error::ExcessiveGaps { .. } => 2,
        _ => 1,
    }
}

/// Per-robot extremes of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotPlanStats {
    pub index: usize,
    pub max_thrust: f64,
    pub f_max: f64,
    pub max_speed: f64,
}

/// JSON written next to a plan CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub scenario: String,
    pub samples: usize,
    pub t0: f64,
    pub t1: f64,
    pub depth: usize,
    pub min_depth: usize,
    pub max_residual: f64,
    pub residual_ok: bool,
    /// Smallest segment force norm along the plan, N.
    pub min_force: f64,
    pub robots: Vec<RobotPlanStats>,
    pub scenario_hash: String,
    pub params_hash: String,
}

/// Plans a scenario on its grid and summarises the result.
pub fn plan_scenario(sc: &ScenarioFile) -> Result<(PlannedTrajectory, PlanSummary)> {
    let planner = sc.planner()?;
    let plan = planner.plan(&sc.times())?;
    let max_residual = planner.max_residual(&plan)?;
    let n = sc.topology.n();
    let anchored = sc.topology.anchored();
    let min_force = plan
        .samples
        .iter()
        .flat_map(|s| s.forces[if anchored { 0 } else { 1 }..n].iter().map(|f| f.norm()))
        .fold(f64::INFINITY, f64::min);
    let robots = sc
        .topology
        .robots()
        .iter()
        .enumerate()
        .map(|(slot, &j)| RobotPlanStats {
            index: j,
            max_thrust: plan
                .samples
                .iter()
                .map(|s| s.robots[slot].attitude.thrust)
                .fold(0.0, f64::max),
            f_max: sc.quads[slot].f_max,
            max_speed: plan
                .samples
                .iter()
                .map(|s| s.velocities[j - 1].norm())
                .fold(0.0, f64::max),
        })
        .collect();
    let summary = PlanSummary {
        scenario: sc.name.clone(),
        samples: plan.samples.len(),
        t0: plan.start(),
        t1: plan.end(),
        depth: planner.depth(),
        min_depth: planner.min_depth(),
        max_residual,
        residual_ok: max_residual < RESIDUAL_TOL,
        min_force,
        robots,
        scenario_hash: sc.hash(),
        params_hash: content_hash(&sc.params),
    };
    Ok((plan, summary))
}

/// `plan`: writes the plan CSV to `out` and the summary to `out.json`.
pub fn cmd_plan(scenario: &Path, out: &Path) -> Result<PlanSummary> {
    let sc = ScenarioFile::load(scenario)?;
    let (plan, summary) = plan_scenario(&sc)?;
    plan.write_csv(create(out)?)?;
    write_json(&summary_path(out), &summary)?;
    Ok(summary)
}

/// Open-loop versus closed-loop errors over the final quarter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub open: Vec<OutputMetric>,
    pub closed: Vec<OutputMetric>,
    /// Open-loop mean over closed-loop mean, per output.
    pub reduction: Vec<f64>,
    /// Largest robot reference deviation over its `K^I * clamp` bound.
    pub worst_bound_ratio: f64,
    pub ticks: usize,
}

/// JSON written next to a simulation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub scenario: String,
    pub mode: SimMode,
    pub t0: f64,
    pub duration: f64,
    pub rows: usize,
    pub metrics: Vec<OutputMetric>,
    /// Metrics over the last quarter of the run.
    pub final_quarter: Vec<OutputMetric>,
    pub saturated_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    pub scenario_hash: String,
    pub config_hash: String,
    pub params_hash: String,
    pub plant_hash: String,
}

/// Logs of one simulated scenario.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub log: SimLog,
    /// Open-loop companion run of a closed-loop simulation.
    pub open_log: Option<SimLog>,
    pub summary: SimSummary,
}

fn initial_state(
    sc: &ScenarioFile,
    planner: &Planner,
    plant: &CableParams,
    plan: Option<&PlannedTrajectory>,
) -> Result<SystemState> {
    let t0 = sc.sim.t0;
    let s0 = match plan {
        Some(p) => p
            .samples
            .first()
            .cloned()
            .ok_or_else(|| Error::Schema("the plan is empty".into()))?,
        None => planner.sample(t0)?,
    };
    let mut state = match sc.sim.init {
        InitSource::Planned => SystemState::from_plan_sample(&s0, false),
        InitSource::PlannedAtRest => SystemState::from_plan_sample(&s0, true),
        InitSource::Equilibrium => {
            let robots: Vec<_> = sc.topology.robots().iter().map(|&j| s0.positions[j - 1]).collect();
            let mut s = SystemState::at_equilibrium(t0, &sc.topology, plant, &robots)?;
            for (a, r) in s.attitudes.iter_mut().zip(&s0.robots) {
                a.r = r.attitude.r;
            }
            s
        }
        InitSource::Explicit => {
            let p: Vec<_> = sc
                .sim
                .initial_positions
                .as_ref()
                .expect("validated")
                .iter()
                .map(|p| crate::Vec3::from(*p))
                .collect();
            if p.len() != sc.topology.n() {
                return Err(Error::InvalidConfig(format!(
                    "initial_positions needs {} entries, got {}",
                    sc.topology.n(),
                    p.len()
                )));
            }
            SystemState::at_rest(t0, &sc.topology, &p)
        }
    };
    state.t = t0;
    sc.sim.apply_disturbance(&mut state)?;
    Ok(state)
}

fn final_quarter(log: &SimLog, sc: &ScenarioFile) -> Vec<OutputMetric> {
    let t_end = sc.sim.t0 + sc.sim.duration;
    log.output_error_metrics_between(t_end - 0.25 * sc.sim.duration, t_end)
}

/// Runs one scenario in `mode`; `plan` replaces the on-line planner as the
/// reference in tracked and boundary-driven runs.
pub fn simulate_scenario(sc: &ScenarioFile, plan: Option<&PlannedTrajectory>, mode: SimMode) -> Result<SimOutcome> {
    let planner = sc.planner()?;
    let plant = sc.plant();
    let mut config = sc.sim.clone();
    config.mode = mode;
    let sim = Simulator {
        topology: &sc.topology,
        params: &plant,
        quads: &sc.quads,
        config: &config,
    };
    let initial = initial_state(sc, &planner, &plant, plan)?;
    let outputs: Vec<usize> = sc.flat.position_indices().into_iter().collect();
    let mut open_log = None;
    let mut comparison = None;
    let log = match mode {
        SimMode::Tracked => match plan {
            Some(p) => sim.run_tracked(&mut TabulatedReference { plan: p, outputs }, initial)?,
            None => sim.run_tracked(&mut planner.clone(), initial)?,
        },
        SimMode::BoundaryDriven => {
            let owned;
            let table = match plan {
                Some(p) => p,
                None => {
                    owned = planner.plan(&sc.times())?;
                    &owned
                }
            };
            let robots = sc.topology.robots().to_vec();
            let track = BoundaryTrack {
                times: table.times(),
                positions: table
                    .samples
                    .iter()
                    .map(|s| robots.iter().map(|&j| s.positions[j - 1]).collect())
                    .collect(),
                indices: robots,
            };
            sim.run_boundary(&track, initial, &|t| planner.flat_targets(t))?
        }
        SimMode::ClosedLoop => {
            if sc.topology.class() != SystemClass::C {
                return Err(Error::InvalidConfig("closed-loop mode needs a class C scenario".into()));
            }
            let gains = sc.feedback.unwrap_or_default();
            let mut closed = ClosedLoop::new(planner.clone(), gains)?;
            let log = sim.run_tracked(&mut closed, initial.clone())?;
            let open = sim.run_tracked(&mut planner.clone(), initial)?;
            let (o, c) = (final_quarter(&open, sc), final_quarter(&log, sc));
            comparison = Some(Comparison {
                reduction: o
                    .iter()
                    .zip(&c)
                    .map(|(a, b)| if b.mean > 0.0 { a.mean / b.mean } else { f64::INFINITY })
                    .collect(),
                open: o,
                closed: c,
                worst_bound_ratio: closed.worst_bound_ratio,
                ticks: closed.ticks,
            });
            open_log = Some(open);
            log
        }
    };
    let summary = SimSummary {
        scenario: sc.name.clone(),
        mode,
        t0: sc.sim.t0,
        duration: sc.sim.duration,
        rows: log.rows.len(),
        metrics: log.output_error_metrics(),
        final_quarter: final_quarter(&log, sc),
        saturated_steps: log.saturated_steps,
        comparison,
        scenario_hash: sc.hash(),
        config_hash: log.config_hash.clone(),
        params_hash: content_hash(&sc.params),
        plant_hash: log.params_hash.clone(),
    };
    Ok(SimOutcome { log, open_log, summary })
}

fn write_outcome(outcome: &SimOutcome, out: &Path) -> Result<()> {
    outcome.log.write_csv(create(out)?)?;
    if let Some(open) = &outcome.open_log {
        open.write_csv(create(&sibling(out, "_open.csv"))?)?;
    }
    write_json(&summary_path(out), &outcome.summary)
}

/// `simulate` for one scenario. `mode` overrides the scenario's own mode.
pub fn cmd_simulate(scenario: &Path, plan: Option<&Path>, mode: Option<SimMode>, out: &Path) -> Result<SimSummary> {
    let sc = ScenarioFile::load(scenario)?;
    let table = match plan {
        Some(p) => Some(PlannedTrajectory::read_csv(
            BufReader::new(File::open(p).map_err(|e| Error::io(p, e))?),
            &sc.topology,
        )?),
        None => None,
    };
    let outcome = simulate_scenario(&sc, table.as_ref(), mode.unwrap_or(sc.sim.mode))?;
    write_outcome(&outcome, out)?;
    Ok(outcome.summary)
}

/// `simulate` for several scenarios into `out_dir/<name>.csv`, `jobs` at a time.
pub fn cmd_simulate_many(
    scenarios: &[PathBuf],
    mode: Option<SimMode>,
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<SimSummary>> {
    let loaded = scenarios
        .iter()
        .map(|p| ScenarioFile::load(p))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<SimSummary>> = pool.install(|| {
        loaded
            .par_iter()
            .map(|sc| {
                let outcome = simulate_scenario(sc, None, mode.unwrap_or(sc.sim.mode))?;
                write_outcome(&outcome, &out_dir.join(format!("{}.csv", sc.name)))?;
                Ok(outcome.summary)
            })
            .collect()
    });
    outcomes.into_iter().collect()
}

/// `identify`: reads a marker CSV and an [`IdentifyConfig`], writes the report
/// to `out` and the per-point error series to `<out stem>_errors.csv`.
pub fn cmd_identify(data: &Path, config: &Path, out: &Path, paper_exact: bool) -> Result<IdentificationReport> {
    let mut cfg: IdentifyConfig = serde_json::from_str(&read_file(config)?)?;
    cfg.paper_exact |= paper_exact;
    let file = File::open(data).map_err(|e| Error::io(data, e))?;
    let dataset = sysid::preprocess(BufReader::new(file), cfg.max_gap)?;
    let problem = sysid::Problem::new(&dataset, &cfg)?;
    let report = problem.identify()?;
    let prediction = problem.rollout(&report.theta)?;
    sysid::write_error_series(&prediction, &dataset, create(&sibling(out, "_errors.csv"))?)?;
    write_json(out, &report)?;
    Ok(report)
}

/// `synth`: boundary-driven synthetic marker data from a [`SyntheticConfig`].
pub fn cmd_synth(config: &Path, out: &Path, with_velocities: bool) -> Result<usize> {
    let cfg: SyntheticConfig = serde_json::from_str(&read_file(config)?)?;
    let data = sysid::synthetic_dataset(&cfg)?;
    data.write_csv(create(out)?, with_velocities)?;
    Ok(data.len())
}

/// Mean output errors of one simulation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    /// Output index -> mean `|p - p_d|`, m.
    pub mean: BTreeMap<usize, f64>,
    pub max: BTreeMap<usize, f64>,
}

/// Reads a simulation log CSV and averages `|p_i - pd_i|` for every desired output.
pub fn log_errors(path: &Path) -> Result<ReportRow> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = csv::Reader::from_reader(BufReader::new(file));
    let head: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| head.iter().position(|h| h == name);
    let mut pairs = Vec::new();
    for (c, h) in head.iter().enumerate() {
        if let Some(i) = h
            .strip_prefix("pd")
            .and_then(|r| r.strip_suffix('x'))
            .and_then(|r| r.parse::<usize>().ok())
        {
            let p =
                col(&format!("p{i}x")).ok_or_else(|| Error::Schema(format!("{}: no p{i}x column", path.display())))?;
            pairs.push((i, p, c));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Schema(format!(
            "{}: no desired-output columns (pd<i>x)",
            path.display()
        )));
    }
    let mut sums = vec![0.0; pairs.len()];
    let mut maxs = vec![0.0_f64; pairs.len()];
    let mut rows = 0usize;
    for rec in rd.records() {
        let rec = rec?;
        let val = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Schema(format!("{}: bad value in row {}", path.display(), rows + 2)))
        };
        for (k, &(_, p, d)) in pairs.iter().enumerate() {
            let mut e2 = 0.0;
            for a in 0..3 {
                let diff = val(p + a)? - val(d + a)?;
                e2 += diff * diff;
            }
            sums[k] += e2.sqrt();
            maxs[k] = maxs[k].max(e2.sqrt());
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Schema(format!("{}: the log has no rows", path.display())));
    }
    Ok(ReportRow {
        label: path.file_stem().and_then(|s| s.to_str()).unwrap_or("log").to_string(),
        mean: pairs
            .iter()
            .zip(&sums)
            .map(|((i, _, _), s)| (*i, s / rows as f64))
            .collect(),
        max: pairs.iter().zip(&maxs).map(|((i, _, _), m)| (*i, *m)).collect(),
    })
}

/// Reference error table (`fixtures/table2.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTable {
    #[serde(default)]
    pub description: String,
    pub rows: Vec<ReferenceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRow {
    /// Matched against log file stems.
    pub label: String,
    pub test: String,
    pub subtest: String,
    /// Output index (as a string key) -> reported mean error, m.
    pub errors: BTreeMap<String, f64>,
}

/// `report`: one row per log. Returns the human-readable table; the CSV
/// form goes to `out` when given. With `reference`, published and reproduced
/// values are printed side by side.
pub fn cmd_report(logs: &[PathBuf], reference: Option<&Path>, out: Option<&Path>) -> Result<String> {
    if logs.is_empty() {
        return Err(Error::Schema("report needs at least one log".into()));
    }
    let rows = logs.iter().map(|p| log_errors(p)).collect::<Result<Vec<_>>>()?;
    let outputs: Vec<usize> = rows
        .iter()
        .flat_map(|r| r.mean.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let fmt = |x: Option<&f64>| match x {
        None => "-".to_string(),
        Some(v) if *v != 0.0 && v.abs() < 1e-3 => format!("{v:.2e}"),
        Some(v) => format!("{v:.4}"),
    };

    let mut text = String::new();
    let mut csv_rows: Vec<Vec<String>> = Vec::new();
    match reference {
        None => {
            let mut head = vec!["label".to_string()];
            head.extend(outputs.iter().map(|i| format!("e{i}")));
            csv_rows.push(head);
            for r in &rows {
                let mut line = vec![r.label.clone()];
                line.extend(outputs.iter().map(|i| fmt(r.mean.get(i))));
                csv_rows.push(line);
            }
        }
        Some(path) => {
            let table: ReferenceTable = serde_json::from_str(&read_file(path)?)?;
            let mut head = vec!["test".to_string(), "subtest".to_string()];
            for i in &outputs {
                head.push(format!("e{i}_ref"));
                head.push(format!("e{i}_sim"));
            }
            csv_rows.push(head);
            for t in &table.rows {
                let sim = rows.iter().find(|r| r.label == t.label);
                let mut line = vec![t.test.clone(), t.subtest.clone()];
                for i in &outputs {
                    line.push(fmt(t.errors.get(&i.to_string())));
                    line.push(fmt(sim.and_then(|r| r.mean.get(i))));
                }
                csv_rows.push(line);
            }
        }
    }
    let widths: Vec<usize> = (0..csv_rows[0].len())
        .map(|c| csv_rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for r in &csv_rows {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
        text.push_str(cells.join("  ").trim_end());
        text.push('\n');
    }
    if let Some(path) = out {
        let mut wr = csv::Writer::from_writer(create(path)?);
        for r in &csv_rows {
            wr.write_record(r)?;
        }
        wr.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(text)
}
