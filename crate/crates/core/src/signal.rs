//! Analytic scalar signals with exact derivative jets.
//!
//! Flat outputs are given as compositions of a handful of primitives. Every
//! primitive evaluates to a [`Jet`] of any requested depth without numerical
//! differentiation.

use serde::{Deserialize, Serialize};

use crate::jet::{Jet, Jet3};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "primitive", rename_all = "snake_case", deny_unknown_fields)]
pub enum Signal {
    Constant {
        value: f64,
    },
    /// `sum_k coeffs[k] (t - t0)^k`.
    Polynomial {
        coeffs: Vec<f64>,
        #[serde(default)]
        t0: f64,
    },
    /// `offset + amplitude sin(omega t + phase)`.
    Sinusoid {
        amplitude: f64,
        omega: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `x0 - xa exp(-(t - t0)^2 / cx)`.
    GaussianExp {
        x0: f64,
        xa: f64,
        t0: f64,
        cx: f64,
    },
    /// Quintic blend from `start` to `start + delta` over `[t0, t0 + duration]`
    /// with zero velocity and acceleration at both ends; constant outside.
    RestToRest {
        start: f64,
        delta: f64,
        #[serde(default)]
        t0: f64,
        duration: f64,
    },
    Sum {
        terms: Vec<Signal>,
    },
    Product {
        factors: Vec<Signal>,
    },
}

impl Signal {
    pub fn constant(value: f64) -> Self {
        Signal::Constant { value }
    }

    pub fn sinusoid(amplitude: f64, omega: f64, phase: f64, offset: f64) -> Self {
        Signal::Sinusoid {
            amplitude,
            omega,
            phase,
            offset,
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        self.jet(t, 0).value()
    }

    /// Value and the first `depth` derivatives at `t`.
    pub fn jet(&self, t: f64, depth: usize) -> Jet {
        match self {
            Signal::Constant { value } => Jet::constant(*value, depth),
            Signal::Polynomial { coeffs, t0 } => polynomial_jet(coeffs, t - t0, depth),
            Signal::Sinusoid {
                amplitude,
                omega,
                phase,
                offset,
            } => {
                let arg = omega * t + phase;
                let d = (0..=depth)
                    .map(|k| {
                        let shifted = arg + k as f64 * std::f64::consts::FRAC_PI_2;
                        let v = amplitude * omega.powi(k as i32) * shifted.sin();
                        if k == 0 {
                            v + offset
                        } else {
                            v
                        }
                    })
                    .collect();
                Jet::from_derivatives(d)
            }
            Signal::GaussianExp { x0, xa, t0, cx } => {
                let tau = Jet::time(t - t0, depth);
                let arg = (&tau * &tau).scale(-1.0 / cx);
                arg.exp().scale(-xa).offset(*x0)
            }
            Signal::RestToRest {
                start,
                delta,
                t0,
                duration,
            } => {
                let s = (t - t0) / duration;
                if s <= 0.0 {
                    return Jet::constant(*start, depth);
                }
                if s >= 1.0 {
                    return Jet::constant(start + delta, depth);
                }
                // 10 s^3 - 15 s^4 + 6 s^5 in the normalised time s.
                let shape = polynomial_jet(&[0.0, 0.0, 0.0, 10.0, -15.0, 6.0], s, depth);
                let d = shape
                    .derivatives()
                    .iter()
                    .enumerate()
                    .map(|(k, v)| delta * v / duration.powi(k as i32))
                    .collect::<Vec<_>>();
                Jet::from_derivatives(d).offset(*start)
            }
            Signal::Sum { terms } => terms
                .iter()
                .fold(Jet::constant(0.0, depth), |acc, s| &acc + &s.jet(t, depth)),
            Signal::Product { factors } => factors
                .iter()
                .fold(Jet::constant(1.0, depth), |acc, s| &acc * &s.jet(t, depth)),
        }
    }
}

fn polynomial_jet(coeffs: &[f64], tau: f64, depth: usize) -> Jet {
    let d = (0..=depth)
        .map(|m| {
            // d^m/dt^m sum c_k tau^k = sum_{k>=m} c_k k!/(k-m)! tau^(k-m)
            coeffs
                .iter()
                .enumerate()
                .skip(m)
                .map(|(k, c)| {
                    let falling: f64 = ((k - m + 1)..=k).map(|x| x as f64).product();
                    c * falling * tau.powi((k - m) as i32)
                })
                .sum()
        })
        .collect();
    Jet::from_derivatives(d)
}

/// Three independent scalar signals forming a position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorSignal {
    pub x: Signal,
    pub y: Signal,
    pub z: Signal,
}

impl VectorSignal {
    pub fn constant(p: Vec3) -> Self {
        VectorSignal {
            x: Signal::constant(p.x),
            y: Signal::constant(p.y),
            z: Signal::constant(p.z),
        }
    }

    pub fn value(&self, t: f64) -> Vec3 {
        Vec3::new(self.x.value(t), self.y.value(t), self.z.value(t))
    }

    pub fn jet(&self, t: f64, depth: usize) -> Jet3 {
        Jet3::new(self.x.jet(t, depth), self.y.jet(t, depth), self.z.jet(t, depth))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd_check(s: &Signal, t: f64) {
        let h = 1e-4;
        let j = s.jet(t, 3);
        for k in 1..=3 {
            let lo = s.jet(t - h, 3).derivative(k - 1);
            let hi = s.jet(t + h, 3).derivative(k - 1);
            let fd = (hi - lo) / (2.0 * h);
            assert!(
                (fd - j.derivative(k)).abs() < 1e-5 * (1.0 + fd.abs()),
                "{s:?} order {k}: {fd} vs {}",
                j.derivative(k)
            );
        }
    }

    #[test]
    fn primitives_match_finite_differences() {
        let signals = [
            Signal::Polynomial {
                coeffs: vec![1.0, -2.0, 0.5, 0.3],
                t0: 0.2,
            },
            Signal::sinusoid(0.46, 0.5, 0.3, 1.0),
            Signal::GaussianExp {
                x0: 0.2,
                xa: 1.5,
                t0: 3.0,
                cx: 0.75,
            },
            Signal::RestToRest {
                start: 0.0,
                delta: 0.5,
                t0: 1.0,
                duration: 6.0,
            },
            Signal::Product {
                factors: vec![
                    Signal::sinusoid(0.75, 0.125, 0.0, 0.0),
                    Signal::sinusoid(1.0, 0.125, 0.0, 0.0),
                ],
            },
        ];
        for s in &signals {
            for t in [0.4, 2.7, 4.1] {
                fd_check(s, t);
            }
        }
    }

    #[test]
    fn rest_to_rest_endpoints() {
        let s = Signal::RestToRest {
            start: 1.0,
            delta: 0.5,
            t0: 0.0,
            duration: 60.0,
        };
        assert_eq!(s.value(-1.0), 1.0);
        assert_relative_eq!(s.value(30.0), 1.25, epsilon = 1e-15);
        assert_eq!(s.value(61.0), 1.5);
        let j = s.jet(60.0, 2);
        assert_eq!(j.derivative(1), 0.0);
        // 5th-order profile: peak speed 15/8 delta/T at the midpoint
        assert_relative_eq!(s.jet(30.0, 1).derivative(1), 15.0 / 8.0 * 0.5 / 60.0, epsilon = 1e-15);
    }

    #[test]
    fn json_is_tagged_by_primitive() {
        let s: Signal =
            serde_json::from_str(r#"{"primitive":"gaussian_exp","x0":0.1,"xa":1.5,"t0":4,"cx":1}"#).unwrap();
        assert_eq!(s.value(4.0), 0.1 - 1.5);
        assert!(serde_json::from_str::<Signal>(r#"{"primitive":"constant","value":1,"bogus":2}"#).is_err());
        assert!(serde_json::from_str::<Signal>(r#"{"primitive":"spline"}"#).is_err());
    }
}
