//! Deterministic transport between jumps: the flow `phi^t` of `g`, orbit
//! parameterisations, transit times and the flow Jacobian.
//!
//! The adder has closed forms; anything else goes through an adaptive
//! Dormand–Prince 5(4) integrator.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, PhasePoint};

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { atol: 1e-10, rtol: 1e-8, max_steps: 200_000 }
    }
}

// Dormand–Prince tableau
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// 5th minus embedded 4th order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn axpy<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..N {
            out[i] += h * c * k[i];
        }
    }
    out
}

/// Integrates the autonomous system `y' = f(y)` from 0 to `t_end` (which may
/// be negative).
pub fn dopri5<const N: usize>(
    f: impl Fn(&[f64; N]) -> [f64; N],
    y0: [f64; N],
    t_end: f64,
    opts: &OdeOptions,
) -> Result<[f64; N]> {
    if t_end == 0.0 {
        return Ok(y0);
    }
    let dir = t_end.signum();
    let span = t_end.abs();
    let mut t = 0.0;
    let mut y = y0;
    let mut k1 = f(&y);
    let mut h = (span / 16.0).min(0.1).max(1e-6 * span);
    let h_min = 1e-14 * span.max(1.0);
    for _ in 0..opts.max_steps {
        if t >= span {
            return Ok(y);
        }
        let last = t + h >= span;
        let step = if last { span - t } else { h };
        let hs = dir * step;
        let k2 = f(&axpy(&y, hs, &[(A21, &k1)]));
        let k3 = f(&axpy(&y, hs, &[(A31, &k1), (A32, &k2)]));
        let k4 = f(&axpy(&y, hs, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
        let k5 = f(&axpy(&y, hs, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
        let k6 = f(&axpy(&y, hs, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]));
        let y_new = axpy(&y, hs, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        let k7 = f(&y_new);
        let mut err = 0.0;
        for i in 0..N {
            let e = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err += (e / sc) * (e / sc);
        }
        let err = (err / N as f64).sqrt();
        if !err.is_finite() {
            h *= 0.25;
            if h < h_min {
                return Err(Error::IntegrationFailure("non-finite derivative".into()));
            }
            continue;
        }
        if err <= 1.0 {
            t = if last { span } else { t + step };
            y = y_new;
            k1 = k7;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h = step * factor;
        if h < h_min {
            return Err(Error::IntegrationFailure(format!("step size underflow at t = {}", dir * t)));
        }
    }
    Err(Error::IntegrationFailure(format!("more than {} steps", opts.max_steps)))
}

/// `D phi^t(x)`, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jacobian2x2(pub [[f64; 2]; 2]);

impl Jacobian2x2 {
    pub const IDENTITY: Self = Self([[1.0, 0.0], [0.0, 1.0]]);

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    /// Spectral norm.
    pub fn norm2(&self) -> f64 {
        let m = &self.0;
        // largest eigenvalue of M^T M
        let p = m[0][0] * m[0][0] + m[1][0] * m[1][0];
        let q = m[0][1] * m[0][1] + m[1][1] * m[1][1];
        let r = m[0][0] * m[0][1] + m[1][0] * m[1][1];
        let tr = p + q;
        let disc = ((p - q) * (p - q) + 4.0 * r * r).sqrt();
        (0.5 * (tr + disc)).sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
enum Coord {
    Age,
    Size,
}

#[derive(Clone)]
pub struct FlowEngine {
    pub model: Arc<ModelSpec>,
    pub opts: OdeOptions,
    closed_form: Option<f64>,
}

impl FlowEngine {
    /// Uses the adder closed forms whenever the model allows it.
    pub fn new(model: Arc<ModelSpec>) -> Self {
        let closed_form = if model.force_numeric { None } else { model.lambda_growth() };
        Self { model, opts: OdeOptions::default(), closed_form }
    }

    /// Always integrates numerically.
    pub fn numeric(model: Arc<ModelSpec>) -> Self {
        Self { model, opts: OdeOptions::default(), closed_form: None }
    }

    pub fn is_closed_form(&self) -> bool {
        self.closed_form.is_some()
    }

    pub fn advance(&self, x: PhasePoint, t: f64) -> Result<PhasePoint> {
        if t == 0.0 {
            return Ok(x);
        }
        if let Some(l) = self.closed_form {
            let e = (l * t).exp_m1();
            return Ok(PhasePoint::new(x.a + x.y * e, x.y * (1.0 + e)));
        }
        let m = &self.model;
        let out = dopri5(
            |s: &[f64; 2]| m.g(PhasePoint::new(s[0], s[1])),
            [x.a, x.y],
            t,
            &self.opts,
        )?;
        Ok(PhasePoint::new(out[0], out[1]))
    }

    /// Flow together with `int_0^t beta(phi^s x) ds`.
    pub fn advance_with_hazard(&self, x: PhasePoint, t: f64) -> Result<(PhasePoint, f64)> {
        if let (Some(_), Some(h0)) = (self.closed_form, self.model.hazard.cumulative(x.a)) {
            let p = self.advance(x, t)?;
            let h1 = self.model.hazard.cumulative(p.a).expect("age-only hazard");
            return Ok((p, h1 - h0));
        }
        let m = &self.model;
        let out = dopri5(
            |s: &[f64; 3]| {
                let p = PhasePoint::new(s[0], s[1]);
                let [g1, g2] = m.g(p);
                [g1, g2, m.beta(p)]
            },
            [x.a, x.y, 0.0],
            t,
            &self.opts,
        )?;
        Ok((PhasePoint::new(out[0], out[1]), out[2]))
    }

    fn coord(p: PhasePoint, c: Coord) -> f64 {
        match c {
            Coord::Age => p.a,
            Coord::Size => p.y,
        }
    }

    /// Time `t` at which the given coordinate of `phi^t x` equals `target`;
    /// the coordinate must be monotone along the orbit.
    fn solve_time(&self, x: PhasePoint, c: Coord, target: f64) -> Result<f64> {
        let start = Self::coord(x, c);
        if target == start {
            return Ok(0.0);
        }
        let dir = if target > start { 1.0 } else { -1.0 };
        let unreachable = || {
            Error::OffDomain(format!("coordinate value {target} not reached along the orbit of {x}"))
        };
        // bracket by doubling
        let mut lo = 0.0;
        let mut hi = dir * 0.25;
        let mut found = false;
        for _ in 0..60 {
            match self.advance(x, hi) {
                Ok(p) if dir * (Self::coord(p, c) - target) >= 0.0 => {
                    found = true;
                    break;
                }
                Ok(p) if !(p.y > 0.0) => return Err(unreachable()),
                Ok(_) => {
                    lo = hi;
                    hi *= 2.0;
                }
                Err(_) => return Err(unreachable()),
            }
        }
        if !found {
            return Err(unreachable());
        }
        let (mut lo, mut hi) = if dir > 0.0 { (lo, hi) } else { (hi, lo) };
        let f = |t: f64| -> Result<(f64, f64)> {
            let p = self.advance(x, t)?;
            let g = self.model.g(p);
            let rate = match c {
                Coord::Age => g[0],
                Coord::Size => g[1],
            };
            Ok((Self::coord(p, c) - target, rate))
        };
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            let (v, _) = f(mid)?;
            if v < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // Newton polish
        let mut t = 0.5 * (lo + hi);
        for _ in 0..6 {
            let (v, rate) = f(t)?;
            if rate <= 0.0 {
                break;
            }
            let step = v / rate;
            t -= step;
            if step.abs() <= 1e-15 * (1.0 + t.abs()) {
                break;
            }
        }
        Ok(t)
    }

    /// Time for the age coordinate to reach `a1`.
    pub fn time_to_age(&self, x: PhasePoint, a1: f64) -> Result<f64> {
        if let Some(l) = self.closed_form {
            let r = 1.0 + (a1 - x.a) / x.y;
            if r <= 0.0 {
                return Err(Error::OffDomain(format!("age {a1} unreachable from {x}")));
            }
            return Ok(r.ln() / l);
        }
        self.solve_time(x, Coord::Age, a1)
    }

    /// Time for the size coordinate to reach `y1`.
    pub fn time_to_size(&self, x: PhasePoint, y1: f64) -> Result<f64> {
        if let Some(l) = self.closed_form {
            if y1 <= 0.0 {
                return Err(Error::OffDomain(format!("size {y1} unreachable from {x}")));
            }
            return Ok((y1 / x.y).ln() / l);
        }
        self.solve_time(x, Coord::Size, y1)
    }

    /// `Y_x(a)`: size on the orbit of `x` when the age equals `a`.
    pub fn size_at_age(&self, x: PhasePoint, a: f64) -> Result<f64> {
        if a < 0.0 {
            return Err(Error::OffDomain(format!("negative age {a}")));
        }
        if self.closed_form.is_some() {
            let y = x.y + a - x.a;
            if y <= 0.0 {
                return Err(Error::OffDomain(format!("age {a} not on the orbit of {x}")));
            }
            return Ok(y);
        }
        let t = self.time_to_age(x, a)?;
        Ok(self.advance(x, t)?.y)
    }

    /// `A_x(y)`: age on the orbit of `x` when the size equals `y`.
    pub fn age_at_size(&self, x: PhasePoint, y: f64) -> Result<f64> {
        let a = if self.closed_form.is_some() {
            if y <= 0.0 {
                return Err(Error::OffDomain(format!("size {y} not on the orbit of {x}")));
            }
            x.a + y - x.y
        } else {
            let t = self.time_to_size(x, y)?;
            self.advance(x, t)?.a
        };
        if a < 0.0 {
            return Err(Error::OffDomain(format!("size {y} precedes the birth of the orbit of {x}")));
        }
        Ok(a)
    }

    /// Flow time from `x0` to `x1`; fails when `x1` is not on the orbit.
    pub fn transit_time(&self, x0: PhasePoint, x1: PhasePoint) -> Result<f64> {
        if x0 == x1 {
            return Ok(0.0);
        }
        let t = self.time_to_age(x0, x1.a)?;
        let y_on = if self.closed_form.is_some() { x0.y + x1.a - x0.a } else { self.advance(x0, t)?.y };
        let deviation = (x1.y - y_on).abs();
        if deviation > 1e-6 * (1.0 + x1.y) {
            return Err(Error::OffOrbit { a: x1.a, y: x1.y, deviation });
        }
        Ok(t)
    }

    /// Birth point `(0, Y_x(0))` of the orbit through `x` and the time
    /// needed to flow from it to `x`.
    pub fn orbit_origin(&self, x: PhasePoint) -> Result<(PhasePoint, f64)> {
        let y0 = self.size_at_age(x, 0.0)?;
        let origin = PhasePoint::new(0.0, y0);
        let t = -self.time_to_age(x, 0.0)?;
        Ok((origin, t))
    }

    pub fn flow_jacobian(&self, x: PhasePoint, t: f64) -> Result<Jacobian2x2> {
        if t == 0.0 {
            return Ok(Jacobian2x2::IDENTITY);
        }
        if let Some(l) = self.closed_form {
            let e = (l * t).exp();
            return Ok(Jacobian2x2([[1.0, e - 1.0], [0.0, e]]));
        }
        let m = &self.model;
        let out = dopri5(
            |s: &[f64; 6]| {
                let p = PhasePoint::new(s[0], s[1]);
                let g = m.g(p);
                let d = m.dg(p);
                // d/dt J = Dg(phi) J
                [
                    g[0],
                    g[1],
                    d[0][0] * s[2] + d[0][1] * s[4],
                    d[0][0] * s[3] + d[0][1] * s[5],
                    d[1][0] * s[2] + d[1][1] * s[4],
                    d[1][0] * s[3] + d[1][1] * s[5],
                ]
            },
            [x.a, x.y, 1.0, 0.0, 0.0, 1.0],
            t,
            &self.opts,
        )?;
        Ok(Jacobian2x2([[out[2], out[3]], [out[4], out[5]]]))
    }
}
