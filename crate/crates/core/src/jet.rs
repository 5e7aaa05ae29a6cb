//! Truncated Taylor jets.
//!
//! A [`Jet`] carries the value of a scalar signal and its time derivatives
//! `d[0] = x(t), d[1] = x'(t), ..., d[D] = x^(D)(t)` at one instant. All
//! arithmetic is closed form (Leibniz rule and the usual recurrences for
//! quotient, square root, exponential and sine/cosine), so derivatives are
//! exact up to floating point and never come from numerical differentiation.
//!
//! Binary operations truncate to the shorter operand.

use std::ops::{Add, Mul, Neg, Sub};
use std::sync::LazyLock;

use nalgebra::Vector3;

use crate::error::{Error, Result};

const MAX_ORDER: usize = 64;

static PASCAL: LazyLock<Vec<Vec<f64>>> = LazyLock::new(|| {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(MAX_ORDER + 1);
    for n in 0..=MAX_ORDER {
        let mut row = vec![1.0; n + 1];
        for k in 1..n {
            row[k] = rows[n - 1][k - 1] + rows[n - 1][k];
        }
        rows.push(row);
    }
    rows
});

#[inline]
fn binom(n: usize, k: usize) -> f64 {
    PASCAL[n][k]
}

/// Value and time derivatives of a scalar signal at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    d: Vec<f64>,
}

impl Jet {
    pub fn from_derivatives(d: Vec<f64>) -> Self {
        assert!(!d.is_empty(), "a jet needs at least its value");
        assert!(d.len() <= MAX_ORDER + 1, "jet depth above {MAX_ORDER}");
        Jet { d }
    }

    /// Constant signal: all derivatives zero.
    pub fn constant(value: f64, depth: usize) -> Self {
        let mut d = vec![0.0; depth + 1];
        d[0] = value;
        Jet::from_derivatives(d)
    }

    /// The identity signal `s(t) = t`, evaluated at `t`.
    pub fn time(t: f64, depth: usize) -> Self {
        let mut d = vec![0.0; depth + 1];
        d[0] = t;
        if depth >= 1 {
            d[1] = 1.0;
        }
        Jet::from_derivatives(d)
    }

    /// Highest derivative order carried.
    pub fn depth(&self) -> usize {
        self.d.len() - 1
    }

    pub fn value(&self) -> f64 {
        self.d[0]
    }

    /// `k`-th derivative. Panics if `k > depth`.
    pub fn derivative(&self, k: usize) -> f64 {
        self.d[k]
    }

    pub fn derivatives(&self) -> &[f64] {
        &self.d
    }

    pub fn truncated(&self, depth: usize) -> Self {
        Jet::from_derivatives(self.d[..=depth.min(self.depth())].to_vec())
    }

    /// Time derivative of the signal; loses one order.
    pub fn differentiated(&self) -> Result<Self> {
        if self.depth() == 0 {
            return Err(Error::InsufficientDepth { needed: 1, have: 0 });
        }
        Ok(Jet::from_derivatives(self.d[1..].to_vec()))
    }

    pub fn scale(&self, s: f64) -> Self {
        Jet::from_derivatives(self.d.iter().map(|x| x * s).collect())
    }

    pub fn offset(&self, c: f64) -> Self {
        let mut d = self.d.clone();
        d[0] += c;
        Jet::from_derivatives(d)
    }

    pub fn recip(&self) -> Result<Self> {
        Jet::constant(1.0, self.depth()).div(self)
    }

    /// Quotient `self / rhs`, from `self = q * rhs` solved order by order.
    pub fn div(&self, rhs: &Jet) -> Result<Self> {
        let n = self.d.len().min(rhs.d.len());
        let g0 = rhs.d[0];
        if g0 == 0.0 || !g0.is_finite() {
            return Err(Error::ZeroNorm { norm: g0.abs() });
        }
        let mut q = vec![0.0; n];
        for m in 0..n {
            let mut acc = self.d[m];
            for k in 0..m {
                acc -= binom(m, k) * q[k] * rhs.d[m - k];
            }
            q[m] = acc / g0;
        }
        Ok(Jet::from_derivatives(q))
    }

    /// Square root, from `s * s = x`. Requires a strictly positive value.
    pub fn sqrt(&self) -> Result<Self> {
        let x0 = self.d[0];
        if x0 <= 0.0 || !x0.is_finite() {
            return Err(Error::ZeroNorm {
                norm: x0.max(0.0).sqrt(),
            });
        }
        let n = self.d.len();
        let mut s = vec![0.0; n];
        s[0] = x0.sqrt();
        for m in 1..n {
            let mut acc = self.d[m];
            for k in 1..m {
                acc -= binom(m, k) * s[k] * s[m - k];
            }
            s[m] = acc / (2.0 * s[0]);
        }
        Ok(Jet::from_derivatives(s))
    }

    /// `exp(self)` via `e' = e * x'`.
    pub fn exp(&self) -> Self {
        let n = self.d.len();
        let mut e = vec![0.0; n];
        e[0] = self.d[0].exp();
        for m in 1..n {
            // e^(m) = sum_{k=0}^{m-1} C(m-1,k) e^(k) x^(m-k)
            let mut acc = 0.0;
            for k in 0..m {
                acc += binom(m - 1, k) * e[k] * self.d[m - k];
            }
            e[m] = acc;
        }
        Jet::from_derivatives(e)
    }

    /// `(sin(self), cos(self))` via the coupled recurrences `s' = c x'`, `c' = -s x'`.
    pub fn sin_cos(&self) -> (Self, Self) {
        let n = self.d.len();
        let mut s = vec![0.0; n];
        let mut c = vec![0.0; n];
        (s[0], c[0]) = self.d[0].sin_cos();
        for m in 1..n {
            let mut acc_s = 0.0;
            let mut acc_c = 0.0;
            for k in 0..m {
                let w = binom(m - 1, k) * self.d[m - k];
                acc_s += w * c[k];
                acc_c -= w * s[k];
            }
            s[m] = acc_s;
            c[m] = acc_c;
        }
        (Jet::from_derivatives(s), Jet::from_derivatives(c))
    }

    pub fn powi(&self, p: u32) -> Self {
        let mut out = Jet::constant(1.0, self.depth());
        for _ in 0..p {
            out = &out * self;
        }
        out
    }

    /// Taylor extrapolation of the value channel to `t + tau`.
    pub fn extrapolate(&self, tau: f64) -> f64 {
        let mut acc = 0.0;
        let mut factor = 1.0;
        for (k, dk) in self.d.iter().enumerate() {
            if k > 0 {
                factor *= tau / k as f64;
            }
            acc += dk * factor;
        }
        acc
    }
}

impl Add for &Jet {
    type Output = Jet;
    fn add(self, rhs: &Jet) -> Jet {
        let n = self.d.len().min(rhs.d.len());
        Jet::from_derivatives((0..n).map(|k| self.d[k] + rhs.d[k]).collect())
    }
}

impl Sub for &Jet {
    type Output = Jet;
    fn sub(self, rhs: &Jet) -> Jet {
        let n = self.d.len().min(rhs.d.len());
        Jet::from_derivatives((0..n).map(|k| self.d[k] - rhs.d[k]).collect())
    }
}

impl Neg for &Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

/// Leibniz rule.
impl Mul for &Jet {
    type Output = Jet;
    fn mul(self, rhs: &Jet) -> Jet {
        let n = self.d.len().min(rhs.d.len());
        let mut out = vec![0.0; n];
        for (m, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..=m {
                acc += binom(m, k) * self.d[k] * rhs.d[m - k];
            }
            *o = acc;
        }
        Jet::from_derivatives(out)
    }
}

/// Jet of a 3-vector signal, one scalar jet per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet3 {
    pub x: Jet,
    pub y: Jet,
    pub z: Jet,
}

impl Jet3 {
    pub fn new(x: Jet, y: Jet, z: Jet) -> Self {
        Jet3 { x, y, z }
    }

    pub fn constant(v: Vector3<f64>, depth: usize) -> Self {
        Jet3::new(
            Jet::constant(v.x, depth),
            Jet::constant(v.y, depth),
            Jet::constant(v.z, depth),
        )
    }

    pub fn zeros(depth: usize) -> Self {
        Jet3::constant(Vector3::zeros(), depth)
    }

    /// Build from a list of vector derivatives `[v, v', v'', ...]`.
    pub fn from_derivatives(d: &[Vector3<f64>]) -> Self {
        Jet3::new(
            Jet::from_derivatives(d.iter().map(|v| v.x).collect()),
            Jet::from_derivatives(d.iter().map(|v| v.y).collect()),
            Jet::from_derivatives(d.iter().map(|v| v.z).collect()),
        )
    }

    pub fn depth(&self) -> usize {
        self.x.depth().min(self.y.depth()).min(self.z.depth())
    }

    pub fn value(&self) -> Vector3<f64> {
        self.derivative(0)
    }

    pub fn derivative(&self, k: usize) -> Vector3<f64> {
        Vector3::new(self.x.derivative(k), self.y.derivative(k), self.z.derivative(k))
    }

    pub fn derivatives(&self) -> Vec<Vector3<f64>> {
        (0..=self.depth()).map(|k| self.derivative(k)).collect()
    }

    pub fn truncated(&self, depth: usize) -> Self {
        Jet3::new(
            self.x.truncated(depth),
            self.y.truncated(depth),
            self.z.truncated(depth),
        )
    }

    pub fn differentiated(&self) -> Result<Self> {
        Ok(Jet3::new(
            self.x.differentiated()?,
            self.y.differentiated()?,
            self.z.differentiated()?,
        ))
    }

    pub fn scale(&self, s: f64) -> Self {
        Jet3::new(self.x.scale(s), self.y.scale(s), self.z.scale(s))
    }

    /// Add a constant vector to the value channel.
    pub fn offset(&self, v: &Vector3<f64>) -> Self {
        Jet3::new(self.x.offset(v.x), self.y.offset(v.y), self.z.offset(v.z))
    }

    pub fn mul_scalar(&self, s: &Jet) -> Self {
        Jet3::new(&self.x * s, &self.y * s, &self.z * s)
    }

    pub fn div_scalar(&self, s: &Jet) -> Result<Self> {
        let r = s.recip()?;
        Ok(self.mul_scalar(&r))
    }

    pub fn dot(&self, rhs: &Jet3) -> Jet {
        let xx = &self.x * &rhs.x;
        let yy = &self.y * &rhs.y;
        let zz = &self.z * &rhs.z;
        &(&xx + &yy) + &zz
    }

    pub fn cross(&self, rhs: &Jet3) -> Jet3 {
        Jet3::new(
            &(&self.y * &rhs.z) - &(&self.z * &rhs.y),
            &(&self.z * &rhs.x) - &(&self.x * &rhs.z),
            &(&self.x * &rhs.y) - &(&self.y * &rhs.x),
        )
    }

    /// Euclidean norm; smooth away from zero so no orders are lost.
    pub fn norm(&self, floor: f64) -> Result<Jet> {
        let n0 = self.value().norm();
        if n0 < floor || !n0.is_finite() {
            return Err(Error::ZeroNorm { norm: n0 });
        }
        self.dot(self).sqrt()
    }

    pub fn unit(&self, floor: f64) -> Result<Jet3> {
        let n = self.norm(floor)?;
        self.div_scalar(&n)
    }
}

impl Add for &Jet3 {
    type Output = Jet3;
    fn add(self, rhs: &Jet3) -> Jet3 {
        Jet3::new(&self.x + &rhs.x, &self.y + &rhs.y, &self.z + &rhs.z)
    }
}

impl Sub for &Jet3 {
    type Output = Jet3;
    fn sub(self, rhs: &Jet3) -> Jet3 {
        Jet3::new(&self.x - &rhs.x, &self.y - &rhs.y, &self.z - &rhs.z)
    }
}

impl Neg for &Jet3 {
    type Output = Jet3;
    fn neg(self) -> Jet3 {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unit_of_constant_vector() {
        let v = Jet3::constant(Vector3::new(3.0, 0.0, 0.0), 4);
        let u = v.unit(1e-6).unwrap();
        assert_eq!(u.value(), Vector3::new(1.0, 0.0, 0.0));
        for k in 1..=4 {
            assert_eq!(u.derivative(k), Vector3::zeros());
        }
    }

    #[test]
    fn norm_of_sloped_line() {
        // |(t, 0, 1)| at t = 1: sqrt(2), 1/sqrt(2), 1/(2 sqrt(2))
        let p = Jet3::new(Jet::time(1.0, 2), Jet::constant(0.0, 2), Jet::constant(1.0, 2));
        let n = p.norm(1e-6).unwrap();
        let s2 = 2f64.sqrt();
        assert_relative_eq!(n.value(), s2, max_relative = 1e-15);
        assert_relative_eq!(n.derivative(1), 1.0 / s2, max_relative = 1e-15);
        assert_relative_eq!(n.derivative(2), 1.0 / (2.0 * s2), max_relative = 1e-14);
    }

    #[test]
    fn product_rule_against_analytic() {
        // f = t^2, g = sin t at t = 0.3
        let t0 = 0.3;
        let t = Jet::time(t0, 4);
        let f = &t * &t;
        let (g, _) = t.sin_cos();
        let h = &f * &g;
        let (s, c) = t0.sin_cos();
        let expected = [
            t0 * t0 * s,
            2.0 * t0 * s + t0 * t0 * c,
            2.0 * s + 4.0 * t0 * c - t0 * t0 * s,
            6.0 * c - 6.0 * t0 * s - t0 * t0 * c,
            -12.0 * s - 8.0 * t0 * c + t0 * t0 * s,
        ];
        for (k, e) in expected.iter().enumerate() {
            assert_relative_eq!(h.derivative(k), *e, max_relative = 1e-10);
        }
    }

    #[test]
    fn exp_and_quotient() {
        let t = Jet::time(0.7, 5);
        let e = t.scale(2.0).exp();
        for k in 0..=5 {
            assert_relative_eq!(
                e.derivative(k),
                2f64.powi(k as i32) * 1.4f64.exp(),
                max_relative = 1e-12
            );
        }
        let q = Jet::constant(1.0, 5).div(&e).unwrap();
        for k in 0..=5 {
            assert_relative_eq!(
                q.derivative(k),
                (-2f64).powi(k as i32) * (-1.4f64).exp(),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn zero_norm_is_rejected() {
        let v = Jet3::constant(Vector3::new(1e-9, 0.0, 0.0), 2);
        assert!(matches!(v.unit(1e-6), Err(Error::ZeroNorm { .. })));
        assert!(Jet::constant(0.0, 2).recip().is_err());
    }

    #[test]
    fn truncation_follows_shorter_operand() {
        let a = Jet::time(1.0, 5);
        let b = Jet::constant(2.0, 2);
        assert_eq!((&a * &b).depth(), 2);
        assert_eq!((&a + &b).depth(), 2);
        assert_eq!(a.differentiated().unwrap().depth(), 4);
    }

    #[test]
    fn taylor_extrapolation_of_polynomial_is_exact() {
        let t = Jet::time(0.5, 3);
        let cube = t.powi(3);
        assert_relative_eq!(cube.extrapolate(0.25), 0.75f64.powi(3), max_relative = 1e-14);
    }
}
