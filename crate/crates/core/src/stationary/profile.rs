//! Birth-size profile `eta*` of the adder and the stationary density
//! `pi*(a, y) = S(a) eta*(y - a) / y^2`.
//!
//! `eta*` is the invariant density of the birth sizes along a lineage: a
//! newborn of size `z` divides at `u = z + A` with `A ~ psi`, and one of its
//! children has size `y` with density `y (F(y/u) + F(1 - y/u)) / u^2`.
//! On the truncated grid `[0, y_max]` the operator loses the children born
//! above `y_max`, so the iteration renormalises after every sweep and `eta*`
//! is the fixed point of that normalised sweep.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Fragmentation, Hazard, PhasePoint, HAZARD_HORIZON};
use crate::quadrature::{linspace, merge_breaks, Rule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EtaStarOptions {
    pub n: usize,
    pub y_max: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for EtaStarOptions {
    fn default() -> Self {
        Self { n: 1024, y_max: 8.0, tol: 1e-10, max_sweeps: 10_000 }
    }
}

/// Weight of node `i` in the end-corrected trapezoid rule on nodes
/// `0..=len` (unit spacing); plain trapezoid on short ranges.
fn gregory(i: usize, len: usize) -> f64 {
    const END: [f64; 3] = [3.0 / 8.0, 7.0 / 6.0, 23.0 / 24.0];
    if len == 0 {
        return 0.0;
    }
    if len < 6 {
        return if i == 0 || i == len { 0.5 } else { 1.0 };
    }
    let d = i.min(len - i);
    if d < 3 { END[d] } else { 1.0 }
}

/// Discretised (truncated) fixed-point operator `T`.
pub struct EtaOperator {
    hazard: Hazard,
    pub y: Vec<f64>,
    h: f64,
    /// `psi(m h)` for `m = 0..=k_max`.
    psi: Vec<f64>,
    /// Per child node `y_i`: quadrature weights times the child-size density
    /// for parents `u_k`, `k = i..=k_max`.
    split: Vec<Vec<f64>>,
    /// `int hat_j(z) G(z) dz` with `G(z) = int S(a) / (z + a)^2 da`.
    mass_w: Vec<f64>,
}

impl EtaOperator {
    pub fn new(hazard: &Hazard, fr: &Fragmentation, n: usize, y_max: f64) -> Result<Self> {
        if n < 8 || !(y_max > 0.0) {
            return Err(Error::Config(format!("eta grid needs n >= 8 and y_max > 0, got {n}, {y_max}")));
        }
        if !hazard.is_age_only() {
            return Err(Error::InvalidModel("stationary profile needs an age-only hazard".into()));
        }
        let a_max = hazard
            .inverse_cumulative(HAZARD_HORIZON)
            .filter(|a| a.is_finite())
            .ok_or_else(|| Error::InvalidModel("hazard integral stays bounded; no division law".into()))?;
        let h = y_max / (n - 1) as f64;
        let y = linspace(0.0, y_max, n);
        let k_max = ((y_max + a_max) / h).ceil() as usize;
        let psi: Vec<f64> = (0..=k_max)
            .map(|m| {
                let a = m as f64 * h;
                hazard.rate(PhasePoint::new(a, 1.0)) * hazard.survival(a).expect("age-only hazard")
            })
            .collect();
        let split: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                if i == 0 {
                    return Vec::new();
                }
                let yi = y[i];
                let len = k_max - i;
                (i..=k_max)
                    .map(|k| {
                        let u = k as f64 * h;
                        gregory(k - i, len) * h * fr.pair_density(yi / u) * yi / (u * u)
                    })
                    .collect()
            })
            .collect();
        let mass_w = hat_masses(&y, |z| mass_kernel(hazard, a_max, z));
        Ok(Self { hazard: hazard.clone(), y, h, psi, split, mass_w })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// One application of `T`.
    pub fn apply(&self, eta: &[f64]) -> Vec<f64> {
        let n = self.len();
        let k_max = self.psi.len() - 1;
        let mut p = vec![0.0; k_max + 1];
        for (k, pk) in p.iter_mut().enumerate().skip(1) {
            let top = k.min(n - 1);
            *pk = self.h * (0..=top).map(|j| gregory(j, top) * self.psi[k - j] * eta[j]).sum::<f64>();
        }
        let mut out = vec![0.0; n];
        for i in 1..n {
            out[i] = self.split[i].iter().zip(&p[i..]).map(|(w, v)| w * v).sum();
        }
        out
    }

    /// `T` followed by renormalisation to a unit-mass `pi*`; the map whose
    /// fixed point is `eta*`.
    pub fn sweep(&self, eta: &[f64]) -> Result<Vec<f64>> {
        let mut next = self.apply(eta);
        let m = self.pi_mass(&next);
        if !(m > 0.0) {
            return Err(Error::DegenerateData("eta iteration lost all mass".into()));
        }
        next.iter_mut().for_each(|v| *v /= m);
        Ok(next)
    }

    /// Total mass of the `pi*` induced by `eta`.
    pub fn pi_mass(&self, eta: &[f64]) -> f64 {
        self.mass_w.iter().zip(eta).map(|(w, e)| w * e).sum()
    }

    /// `int eta` by the end-corrected trapezoid rule.
    pub fn eta_mass(&self, eta: &[f64]) -> f64 {
        let len = self.len() - 1;
        self.h * eta.iter().enumerate().map(|(i, e)| gregory(i, len) * e).sum::<f64>()
    }
}

/// `G(z) = int_0^inf S(a) / (z + a)^2 da`.
fn mass_kernel(hazard: &Hazard, a_max: f64, z: f64) -> f64 {
    let mut geo = Vec::new();
    let mut b = z / 8.0;
    while b < a_max {
        geo.push(b);
        b *= 2.0;
    }
    let mut breaks = merge_breaks(&geo, &linspace(0.0, a_max, 17));
    if hazard.a_star() > 0.0 && hazard.a_star() < a_max {
        breaks = merge_breaks(&breaks, &[hazard.a_star()]);
    }
    Rule::panels(&breaks, 8).integrate(|a| hazard.survival(a).unwrap_or(0.0) / ((z + a) * (z + a)))
}

/// `int hat_j g` on a uniform grid for every node `j >= 1`.
fn hat_masses(y: &[f64], g: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = y.len();
    let mut out = vec![0.0; n];
    let rule = Rule::uniform(0.0, 1.0, 1, 8);
    for c in 0..n - 1 {
        let (l, r) = (y[c], y[c + 1]);
        let len = r - l;
        for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
            let gv = g(l + t * len) * w * len;
            out[c] += (1.0 - t) * gv;
            out[c + 1] += t * gv;
        }
    }
    out[0] = 0.0;
    out
}

/// Solved profile; `eta` is normalised so that `pi*` has unit mass.
#[derive(Debug, Clone, Serialize)]
pub struct EtaStar {
    pub y: Vec<f64>,
    pub eta: Vec<f64>,
    pub sweeps: usize,
    pub last_change: f64,
    /// `||eta - sweep(eta)||_inf / ||eta||_inf`.
    pub residual: f64,
    /// Fraction of `int eta` kept by one application of the truncated
    /// operator; the shortfall is the mass born above `y_max`.
    pub retained: f64,
    pub pi_mass: f64,
    #[serde(skip)]
    hazard: Hazard,
}

/// Fixed-point iteration from `eta = 1`, renormalising the induced `pi*`
/// to unit mass after every sweep.
pub fn solve_eta_star(hazard: &Hazard, fr: &Fragmentation, opts: &EtaStarOptions) -> Result<EtaStar> {
    let op = EtaOperator::new(hazard, fr, opts.n, opts.y_max)?;
    solve_with(&op, opts)
}

pub fn solve_with(op: &EtaOperator, opts: &EtaStarOptions) -> Result<EtaStar> {
    let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
    let mut eta = vec![1.0; op.len()];
    let m = op.pi_mass(&eta);
    eta.iter_mut().for_each(|v| *v /= m);
    let mut last_change = f64::INFINITY;
    for sweep in 1..=opts.max_sweeps {
        let next = op.sweep(&eta)?;
        last_change = dist(&eta, &next);
        eta = next;
        if last_change < opts.tol * sup(&eta).max(1.0) {
            let again = op.sweep(&eta)?;
            let residual = dist(&eta, &again) / sup(&eta);
            let retained = op.eta_mass(&op.apply(&eta)) / op.eta_mass(&eta);
            return Ok(EtaStar {
                y: op.y.clone(),
                pi_mass: op.pi_mass(&eta),
                eta,
                sweeps: sweep,
                last_change,
                residual,
                retained,
                hazard: op.hazard.clone(),
            });
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_sweeps, last_change })
}

impl EtaStar {
    /// Linear interpolation, 0 outside the grid.
    pub fn eta_at(&self, z: f64) -> f64 {
        let n = self.y.len();
        if !(z > 0.0) || z > self.y[n - 1] {
            return 0.0;
        }
        crate::quadrature::interp_linear(&self.y, &self.eta, z)
    }

    /// `pi*(a, y) = S(a) eta*(y - a) / y^2`, 0 for `y <= a`.
    pub fn pi_star(&self, x: PhasePoint) -> f64 {
        if !(x.y > x.a) || x.a < 0.0 {
            return 0.0;
        }
        self.hazard.survival(x.a).unwrap_or(0.0) * self.eta_at(x.y - x.a) / (x.y * x.y)
    }

    pub fn hazard(&self) -> &Hazard {
        &self.hazard
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "y,eta")?;
        for (y, e) in self.y.iter().zip(&self.eta) {
            writeln!(w, "{y},{e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn end_corrected_weights_integrate_cubics() {
        let len = 40;
        let h = 1.0 / len as f64;
        let v: f64 = (0..=len).map(|i| gregory(i, len) * h * (i as f64 * h).powi(3)).sum();
        assert!((v - 0.25).abs() < 1e-14);
    }

    #[test]
    fn converges_on_a_coarse_grid() {
        let opts = EtaStarOptions { n: 128, ..Default::default() };
        let e = solve_eta_star(&Hazard::constant(1.0), &Fragmentation::beta(5.0, 5.0).unwrap(), &opts).unwrap();
        assert!(e.residual < 1e-8);
        assert!((e.pi_mass - 1.0).abs() < 1e-12);
        assert!(e.eta.iter().all(|&v| v >= 0.0));
        assert_eq!(e.pi_star(PhasePoint::new(1.0, 1.0)), 0.0);
    }
}
