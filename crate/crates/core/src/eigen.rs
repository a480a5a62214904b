//! Principal eigen-triplet of the truncated renewal operator and the Malthus
//! exponent as the root of `mu_lambda^R = 1`.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::PhasePoint;
use crate::renewal::{KernelMatrix, RenewalOperator};

const MAX_POWER_ITERATIONS: usize = 100_000;

#[derive(Debug, Clone)]
pub struct EigenTriplet {
    pub mu: f64,
    /// Right eigenvector, scaled so that `<nu, eta> = 1`.
    pub eta: Vec<f64>,
    /// Left eigenmeasure (grid point masses), total mass 1.
    pub nu: Vec<f64>,
    pub iterations: usize,
}

fn power_iteration(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    start: Vec<f64>,
) -> Result<(f64, Vec<f64>, usize)> {
    let norm1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
    let mut v = start;
    let s = norm1(&v);
    v.iter_mut().for_each(|x| *x /= s);
    let mut mu_prev = f64::NAN;
    let mut last_change = f64::INFINITY;
    for it in 1..=MAX_POWER_ITERATIONS {
        let w = apply(&v);
        let mu = norm1(&w);
        if !(mu > 0.0) {
            return Err(Error::NoConvergence { iterations: it, last_change: f64::NAN });
        }
        last_change = (mu - mu_prev).abs();
        // converged once the quotient settles and the vector stops moving
        let shift: f64 = w.iter().zip(&v).map(|(a, b)| (a / mu - b).abs()).fold(0.0, f64::max);
        let vmax = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        v = w.into_iter().map(|x| x / mu).collect();
        if last_change < 1e-12 * mu && shift <= 1e-11 * vmax {
            return Ok((mu, v, it));
        }
        mu_prev = mu;
    }
    Err(Error::NoConvergence { iterations: MAX_POWER_ITERATIONS, last_change })
}

/// Power iteration on the kernel matrix and its adjoint. Normalisation: `nu`
/// has unit mass, then `eta` is scaled so that `<nu, eta> = 1`.
pub fn leading_eigen(m: &KernelMatrix, start: Option<&[f64]>) -> Result<EigenTriplet> {
    let n = m.n();
    let init = match start {
        Some(s) if s.len() == n && s.iter().all(|&v| v > 0.0) => s.to_vec(),
        _ => vec![1.0; n],
    };
    let (mu, mut eta, it1) = power_iteration(|v| m.apply(v), init)?;
    let (_, mut nu, it2) = power_iteration(|v| m.apply_adjoint(v), vec![1.0 / n as f64; n])?;
    let mass: f64 = nu.iter().sum();
    nu.iter_mut().for_each(|v| *v /= mass);
    let pairing: f64 = nu.iter().zip(&eta).map(|(a, b)| a * b).sum();
    eta.iter_mut().for_each(|v| *v /= pairing);
    Ok(EigenTriplet { mu, eta, nu, iterations: it1 + it2 })
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenResult {
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "lambda_R")]
    pub lambda_r: f64,
    /// `lambda_R - d0`.
    pub lambda_malthus: f64,
    pub mu: f64,
    /// `||G eta - mu eta||_inf / ||eta||_inf`.
    pub residual: f64,
    /// `||J nu - mu nu||_1`.
    pub dual_residual: f64,
    pub grid: Vec<f64>,
    /// Boundary eigenfunction with `eta(1) = 1`.
    pub eta: Vec<f64>,
    pub nu: Vec<f64>,
    /// Factor applied to the `<nu, eta> = 1` eigenvector to get `eta(1) = 1`.
    pub eta_scale: f64,
    /// `<nu, eta>` after the `eta(1) = 1` rescaling (equals `eta_scale`).
    pub dual_pairing: f64,
    /// Largest per-row offspring mass redistributed by the truncation.
    pub max_correction_mass: f64,
    pub evaluations: usize,
}

impl EigenResult {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn eta_at(&self, y: f64) -> Option<f64> {
        self.grid
            .iter()
            .position(|&v| (v - y).abs() <= 1e-12 * (1.0 + y))
            .map(|i| self.eta[i])
    }
}

/// `mu_lambda^R`.
pub fn spectral_value(op: &RenewalOperator, lambda: f64) -> Result<f64> {
    let m = op.matrix(lambda)?;
    Ok(leading_eigen(&m, None)?.mu)
}

/// Malthus candidate `lambda_R`: Illinois regula falsi (with a bisection
/// safeguard) on `lambda -> mu_lambda^R - 1` until `|mu - 1| < 1e-10`.
pub fn solve_malthus(op: &RenewalOperator, bracket: (f64, f64)) -> Result<EigenResult> {
    let model = &op.law.model;
    let scale = model.lambda_growth().unwrap_or(1.0).max(1e-3);
    let ceiling = 100.0 * scale;
    let mut evaluations = 0usize;
    let mut warm: Option<Vec<f64>> = None;
    let mut eval = |lambda: f64, warm: &mut Option<Vec<f64>>| -> Result<(f64, EigenTriplet)> {
        evaluations += 1;
        let m = op.matrix(lambda)?;
        let t = leading_eigen(&m, warm.as_deref())?;
        *warm = Some(t.eta.clone());
        Ok((t.mu - 1.0, t))
    };

    let (mut lo, mut hi) = (bracket.0.max(0.0), bracket.1.max(bracket.0 + 1e-6));
    let (mut f_lo, mut t_lo) = eval(lo, &mut warm)?;
    while f_lo <= 0.0 {
        if lo == 0.0 {
            return Err(Error::BracketFailure { lo: 0.0, hi: ceiling });
        }
        hi = lo;
        lo = if lo < 1e-3 * scale { 0.0 } else { 0.5 * lo };
        (f_lo, t_lo) = eval(lo, &mut warm)?;
    }
    let (mut f_hi, mut t_hi) = eval(hi, &mut warm)?;
    while f_hi >= 0.0 {
        if hi >= ceiling {
            return Err(Error::BracketFailure { lo: bracket.0, hi: ceiling });
        }
        lo = hi;
        f_lo = f_hi;
        t_lo = t_hi;
        hi = (2.0 * hi).min(ceiling);
        (f_hi, t_hi) = eval(hi, &mut warm)?;
    }

    let mut best = if f_lo.abs() < f_hi.abs() { (lo, f_lo, t_lo.clone()) } else { (hi, f_hi, t_hi.clone()) };
    let mut side = 0i8;
    let (mut fl, mut fh) = (f_lo, f_hi);
    for _ in 0..200 {
        if best.1.abs() < 1e-10 || hi - lo < 1e-15 * hi.max(1.0) {
            break;
        }
        let mut c = (lo * fh - hi * fl) / (fh - fl);
        if !(c > lo && c < hi) {
            c = 0.5 * (lo + hi);
        }
        let (fc, tc) = eval(c, &mut warm)?;
        if fc.abs() < best.1.abs() {
            best = (c, fc, tc);
        }
        if fc > 0.0 {
            lo = c;
            fl = fc;
            if side == -1 {
                fh *= 0.5;
            }
            side = -1;
        } else {
            hi = c;
            fh = fc;
            if side == 1 {
                fl *= 0.5;
            }
            side = 1;
        }
    }
    let (lambda_r, _, triplet) = best;
    if (triplet.mu - 1.0).abs() >= 1e-10 {
        return Err(Error::NoConvergence { iterations: evaluations, last_change: triplet.mu - 1.0 });
    }
    let m = op.matrix(lambda_r)?;
    Ok(finish(op, &m, lambda_r, triplet, evaluations))
}

fn finish(op: &RenewalOperator, m: &KernelMatrix, lambda_r: f64, t: EigenTriplet, evaluations: usize) -> EigenResult {
    let grid = &op.grid;
    let g_eta = m.apply(&t.eta);
    let eta_max = t.eta.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let residual = g_eta
        .iter()
        .zip(&t.eta)
        .map(|(a, b)| (a - t.mu * b).abs())
        .fold(0.0, f64::max)
        / eta_max;
    let j_nu = m.apply_adjoint(&t.nu);
    let dual_residual = j_nu.iter().zip(&t.nu).map(|(a, b)| (a - t.mu * b).abs()).sum();
    let i1 = grid.index_of(1.0).unwrap_or_else(|| {
        grid.nodes.iter().enumerate().min_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs())).unwrap().0
    });
    let eta_scale = 1.0 / t.eta[i1];
    // divide rather than multiply so that eta(1) is exactly 1
    let eta: Vec<f64> = t.eta.iter().map(|v| v / t.eta[i1]).collect();
    let dual_pairing = t.nu.iter().zip(&eta).map(|(a, b)| a * b).sum();
    EigenResult {
        r: grid.r,
        lambda_r,
        lambda_malthus: lambda_r - op.law.model.d0,
        mu: t.mu,
        residual,
        dual_residual,
        grid: grid.nodes.clone(),
        eta,
        nu: t.nu,
        eta_scale,
        dual_pairing,
        max_correction_mass: m.max_correction(),
        evaluations,
    }
}

/// Eigen-triplet at a fixed `lambda`, packaged like a solve result.
pub fn eigen_at(op: &RenewalOperator, lambda: f64) -> Result<EigenResult> {
    let m = op.matrix(lambda)?;
    let t = leading_eigen(&m, None)?;
    Ok(finish(op, &m, lambda, t, 1))
}

/// `h_R(x) = int_0^R eta_R(z) K^R_{lambda_R}(x, z) dz`.
pub fn reconstruct_h(op: &RenewalOperator, eigen: &EigenResult, x: PhasePoint) -> Result<f64> {
    let (row, _) = op.law.kernel_row(x, eigen.lambda_r, &op.grid)?;
    Ok(row
        .iter()
        .zip(&eigen.eta)
        .zip(&op.grid.weights)
        .map(|((k, e), w)| k * e * w)
        .sum())
}

/// Euler–Lotka residual at `(lambda, y)` under the truncated first-jump law.
pub fn euler_lotka_residual(op: &RenewalOperator, lambda: f64, y: f64) -> Result<f64> {
    op.law.euler_lotka_residual(lambda, y, op.grid.r)
}
