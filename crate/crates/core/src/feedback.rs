//! Integral output feedback around the class (c) recursion.
//!
//! The desired chain is recomputed every control tick. The first position
//! propagated on each side of the flat pair gets an extra `K^I int e dt`
//! term: `p_{i+2}` uses the error of `p_{i+1}`, `p_{i-1}` the error of `p_i`.
//! Because the correction is a constant offset, every position beyond it
//! (the robots included) shifts by the same amount, so the robot references
//! never move further than `K^I` times the anti-windup clamp.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cable::SystemClass;
use crate::error::{Error, Result};
use crate::planner::{ChainCorrection, PlanSample, Planner};
use crate::quadrotor::TrackingReference;
use crate::sim::{ReferenceSource, SystemState};
use crate::Vec3;

/// Accumulated output error with a per-axis clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegralState {
    pub accumulated: Vec3,
    pub clamp: f64,
}

impl IntegralState {
    pub fn new(clamp: f64) -> Result<Self> {
        if !(clamp > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "anti-windup clamp must be positive, got {clamp}"
            )));
        }
        Ok(IntegralState {
            accumulated: Vec3::zeros(),
            clamp,
        })
    }
}

/// Rectangle-rule update `acc += e dt`, then clamp each axis to `[-clamp, clamp]`.
pub fn integral_update(state: &IntegralState, e: &Vec3, dt: f64) -> Result<IntegralState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "integration step must be positive, got {dt}"
        )));
    }
    let c = state.clamp;
    Ok(IntegralState {
        accumulated: (state.accumulated + e * dt).map(|x| x.clamp(-c, c)),
        clamp: c,
    })
}

fn default_ki() -> [f64; 3] {
    [0.2; 3]
}

fn default_rate() -> f64 {
    100.0
}

fn default_clamp() -> f64 {
    1.0
}

/// Diagonal integral gain (1/s), update rate (Hz) and anti-windup clamp (m s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainConfig {
    #[serde(default = "default_ki")]
    pub ki: [f64; 3],
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_clamp")]
    pub clamp: f64,
    /// Standard deviation of white noise added to each measured output
    /// coordinate, m (off by default).
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GainConfig {
    fn default() -> Self {
        GainConfig {
            ki: default_ki(),
            rate: default_rate(),
            clamp: default_clamp(),
            noise_std: 0.0,
            seed: 0,
        }
    }
}

impl GainConfig {
    /// Same clamp and rate with the integral action switched off.
    pub fn disabled() -> Self {
        GainConfig {
            ki: [0.0; 3],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ki.iter().any(|k| !(*k >= 0.0) || !k.is_finite()) {
            return Err(Error::InvalidConfig("integral gains must be non-negative".into()));
        }
        if !(self.rate > 0.0) || !(self.clamp > 0.0) {
            return Err(Error::InvalidConfig("update rate and clamp must be positive".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidConfig("noise level must be non-negative".into()));
        }
        Ok(())
    }

    fn apply(&self, v: &Vec3) -> Vec3 {
        Vec3::new(self.ki[0] * v.x, self.ki[1] * v.y, self.ki[2] * v.z)
    }

    /// Per-axis bound on the robot reference deviation from the open-loop plan.
    pub fn deviation_bound(&self) -> Vec3 {
        self.apply(&Vec3::repeat(self.clamp))
    }
}

/// Corrected chain at `t` from the two accumulators (`forward` holds the
/// error of `p_{i+1}`, `backward` that of `p_i`).
pub fn replan_step(
    planner: &Planner,
    t: f64,
    forward: &IntegralState,
    backward: &IntegralState,
    gains: &GainConfig,
) -> Result<PlanSample> {
    let correction = ChainCorrection {
        forward: gains.apply(&forward.accumulated),
        backward: gains.apply(&backward.accumulated),
    };
    planner.sample_corrected(t, Some(&correction))
}

/// Reference source that closes the loop on the class (c) flat pair.
pub struct ClosedLoop {
    planner: Planner,
    gains: GainConfig,
    pair: usize,
    forward: IntegralState,
    backward: IntegralState,
    rng: ChaCha8Rng,
    next_tick: Option<f64>,
    /// Integration stops before this time (the loop is open until `enable_at`).
    enable_at: f64,
    /// Largest ratio of reference deviation to its bound seen at a tick.
    pub worst_bound_ratio: f64,
    pub ticks: usize,
}

impl ClosedLoop {
    pub fn new(planner: Planner, gains: GainConfig) -> Result<Self> {
        gains.validate()?;
        if planner.topology().class() != SystemClass::C {
            return Err(Error::InvalidTopology("output feedback is defined for class C".into()));
        }
        let pair = planner.pair().expect("class C planners have a pair");
        Ok(ClosedLoop {
            planner,
            pair,
            forward: IntegralState::new(gains.clamp)?,
            backward: IntegralState::new(gains.clamp)?,
            rng: ChaCha8Rng::seed_from_u64(gains.seed),
            gains,
            next_tick: None,
            enable_at: f64::NEG_INFINITY,
            worst_bound_ratio: 0.0,
            ticks: 0,
        })
    }

    /// Keep the loop open (no integration) before `t`.
    pub fn enabled_from(mut self, t: f64) -> Self {
        self.enable_at = t;
        self
    }

    pub fn integrals(&self) -> (IntegralState, IntegralState) {
        (self.forward, self.backward)
    }

    fn tick(&mut self, t: f64, state: &SystemState) -> Result<()> {
        let dt = 1.0 / self.gains.rate;
        let (i, j) = (self.pair, self.pair + 1);
        let sigma = self.gains.noise_std;
        let mut e = |k: usize| {
            let noise = if sigma > 0.0 {
                Vec3::from_fn(|_, _| sigma * self.rng.sample::<f64, _>(StandardNormal))
            } else {
                Vec3::zeros()
            };
            self.planner.flat().position(k).expect("flat pair").value(t) - (state.masses[k - 1].p + noise)
        };
        let (e_i, e_j) = (e(i), e(j));
        if t >= self.enable_at {
            self.backward = integral_update(&self.backward, &e_i, dt)?;
            self.forward = integral_update(&self.forward, &e_j, dt)?;
        }
        self.ticks += 1;
        Ok(())
    }

    fn check_bound(&mut self, t: f64, corrected: &PlanSample) -> Result<()> {
        let open = self.planner.sample(t)?;
        let bound = self.gains.deviation_bound();
        for (a, b) in corrected.robots.iter().zip(&open.robots) {
            let d = corrected.positions[a.index - 1] - open.positions[b.index - 1];
            for k in 0..3 {
                if bound[k] > 0.0 {
                    self.worst_bound_ratio = self.worst_bound_ratio.max(d[k].abs() / bound[k]);
                } else if d[k] != 0.0 {
                    self.worst_bound_ratio = f64::INFINITY;
                }
            }
        }
        Ok(())
    }
}

impl ReferenceSource for ClosedLoop {
    fn references(&mut self, t: f64, state: &SystemState) -> Result<Vec<TrackingReference>> {
        let period = 1.0 / self.gains.rate;
        let due = match self.next_tick {
            None => true,
            Some(next) => t >= next - 1e-9,
        };
        if due {
            self.tick(t, state)?;
            self.next_tick = Some(self.next_tick.map_or(t, |n| n) + period);
        }
        let sample = replan_step(&self.planner, t, &self.forward, &self.backward, &self.gains)?;
        if due {
            self.check_bound(t, &sample)?;
        }
        Ok((0..sample.robots.len()).map(|k| sample.tracking_reference(k)).collect())
    }

    fn desired_outputs(&self, t: f64) -> Vec<(usize, Vec3)> {
        let (i, j) = (self.pair, self.pair + 1);
        [i, j]
            .iter()
            .map(|&k| (k, self.planner.flat().position(k).expect("flat pair").value(t)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn integral_examples() {
        let s = IntegralState::new(1.0).unwrap();
        assert_eq!(integral_update(&s, &Vec3::zeros(), 0.01).unwrap(), s);
        let mut a = s;
        for _ in 0..100 {
            a = integral_update(&a, &Vec3::new(0.1, 0.0, 0.0), 0.01).unwrap();
        }
        assert_relative_eq!(a.accumulated, Vec3::new(0.1, 0.0, 0.0), epsilon = 1e-12);
        let mut b = IntegralState::new(0.5).unwrap();
        for _ in 0..10_000 {
            b = integral_update(&b, &Vec3::new(1.0, 0.0, 0.0), 0.01).unwrap();
        }
        assert_eq!(b.accumulated.x, 0.5);
        assert!(integral_update(&b, &Vec3::zeros(), 0.0).is_err());
        assert!(IntegralState::new(0.0).is_err());
    }

    #[test]
    fn bound_is_gain_times_clamp() {
        let g = GainConfig::default();
        assert_relative_eq!(g.deviation_bound(), Vec3::repeat(0.2), epsilon = 1e-15);
        let g: GainConfig = serde_json::from_str(r#"{"ki": [0.1, 0.2, 0.3]}"#).unwrap();
        assert_eq!(g.rate, 100.0);
        assert!(serde_json::from_str::<GainConfig>(r#"{"kd": 1}"#).is_err());
    }
}
