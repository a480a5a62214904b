//! Convergence of the rescaled mean population measure
//! `e^{-Lambda t} E[Z_t] / h(x0)` towards the stationary profile.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PhasePoint;
use crate::simulate::{log_slope, Trajectory};

use super::density::{weighted_tv, CellGrid, Density2D};
use super::profile::EtaStar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErgodicityOptions {
    pub grid: CellGrid,
    pub n_boot: usize,
    pub seed: u64,
}

impl Default for ErgodicityOptions {
    fn default() -> Self {
        Self { grid: CellGrid::new((0.0, 4.0), (0.0, 6.0), 8, 12), n_boot: 200, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayRow {
    pub t: f64,
    pub distance: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayTable {
    pub rows: Vec<DecayRow>,
    /// Least-squares slope of `-ln distance` against `t`.
    pub omega_hat: f64,
    pub replicates: usize,
}

impl DecayTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,distance,stderr")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.t, r.distance, r.stderr)?;
        }
        Ok(())
    }
}

/// The limit of `e^{-Lambda t} E[Z_t] / h(x0)` as cell averages:
/// `pi*` scaled so that `<pi*, h> = 1` with `h = y`.
pub fn stationary_target(eta: &EtaStar, grid: CellGrid) -> Density2D {
    let mut d = Density2D::from_cell_average(grid, 8, |x| eta.pi_star(x));
    // <pi*, y> over the whole state space, not just the window
    let hm = pi_star_moment(eta, |x| x.y);
    d.scale(1.0 / hm);
    d
}

/// `int int f pi*` by Gauss rules in the (age, birth size) coordinates.
pub fn pi_star_moment(eta: &EtaStar, f: impl Fn(PhasePoint) -> f64) -> f64 {
    let n = eta.y.len();
    let y_max = eta.y[n - 1];
    let a_max = eta.hazard().inverse_cumulative(crate::model::HAZARD_HORIZON).unwrap_or(y_max);
    let rz = crate::quadrature::Rule::uniform(0.0, y_max, 256, 4);
    let ra = crate::quadrature::Rule::uniform(0.0, a_max, 256, 4);
    let mut s = 0.0;
    for (&z, &wz) in rz.nodes.iter().zip(&rz.weights) {
        let e = eta.eta_at(z);
        if e == 0.0 {
            continue;
        }
        for (&a, &wa) in ra.nodes.iter().zip(&ra.weights) {
            let x = PhasePoint::new(a, a + z);
            s += wz * wa * eta.pi_star(x) * f(x);
        }
    }
    s
}

/// Per-replicate binned measures at time index `k`, each weighted by
/// `e^{-Lambda t} / h(x0)`.
fn binned(trajs: &[Trajectory], k: usize, lambda: f64, h_x0: f64, grid: CellGrid) -> Result<(f64, Vec<Density2D>)> {
    let mut t = None;
    let mut out = Vec::with_capacity(trajs.len());
    for tr in trajs {
        let st = tr.states.get(k).ok_or_else(|| {
            Error::InsufficientData(format!("replicate {} has no snapshot {k} (capped: {})", tr.replicate, tr.capped))
        })?;
        match t {
            None => t = Some(st.t),
            Some(t0) if t0 != st.t => {
                return Err(Error::InsufficientData("replicates disagree on observation times".into()));
            }
            _ => {}
        }
        let w = (-lambda * st.t).exp() / h_x0;
        let mut d = Density2D::zeros(grid);
        for &x in &st.individuals {
            d.add_point_mass(x, w);
        }
        out.push(d);
    }
    Ok((t.unwrap_or(0.0), out))
}

fn mean_of(parts: &[Density2D], pick: impl Iterator<Item = usize>, grid: CellGrid) -> Density2D {
    let mut m = Density2D::zeros(grid);
    let mut n = 0usize;
    for i in pick {
        for (v, p) in m.values.iter_mut().zip(&parts[i].values) {
            *v += p;
        }
        m.outside += parts[i].outside;
        n += 1;
    }
    m.scale(1.0 / n.max(1) as f64);
    m.refresh_mass();
    m
}

/// Rescaled mean measure at every snapshot with `t > 0`.
pub fn rescaled_profiles(
    trajs: &[Trajectory],
    x0: PhasePoint,
    h: &dyn Fn(PhasePoint) -> f64,
    lambda: f64,
    grid: CellGrid,
) -> Result<Vec<(f64, Density2D)>> {
    let first = trajs.first().ok_or_else(|| Error::InsufficientData("no trajectories".into()))?;
    let h_x0 = h(x0);
    let mut out = Vec::new();
    for k in 0..first.states.len() {
        let (t, parts) = binned(trajs, k, lambda, h_x0, grid)?;
        if t > 0.0 {
            out.push((t, mean_of(&parts, 0..parts.len(), grid)));
        }
    }
    Ok(out)
}

/// Weighted-TV distance between the rescaled mean measure and `target` at
/// each snapshot time `t > 0`, with bootstrap standard errors over
/// replicates, and the fitted decay rate.
pub fn ergodicity_report(
    trajs: &[Trajectory],
    x0: PhasePoint,
    h: &dyn Fn(PhasePoint) -> f64,
    lambda: f64,
    target: &Density2D,
    weight: &dyn Fn(PhasePoint) -> f64,
    opts: &ErgodicityOptions,
) -> Result<DecayTable> {
    let first = trajs.first().ok_or_else(|| Error::InsufficientData("no trajectories".into()))?;
    let grid = target.grid();
    let h_x0 = h(x0);
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for k in 0..first.states.len() {
        let (t, parts) = binned(trajs, k, lambda, h_x0, grid)?;
        if t <= 0.0 {
            continue;
        }
        let mean = mean_of(&parts, 0..parts.len(), grid);
        let distance = weighted_tv(&mean, target, weight)?;
        let n = parts.len();
        let mut boots = Vec::with_capacity(opts.n_boot);
        for _ in 0..opts.n_boot {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            boots.push(weighted_tv(&mean_of(&parts, idx.into_iter(), grid), target, weight)?);
        }
        let stderr = if boots.len() > 1 {
            let m = boots.iter().sum::<f64>() / boots.len() as f64;
            (boots.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (boots.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        rows.push(DecayRow { t, distance, stderr });
    }
    if rows.len() < 3 {
        return Err(Error::InsufficientData(format!("need snapshots at >= 3 positive times, got {}", rows.len())));
    }
    let ts: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let ds: Vec<f64> = rows.iter().map(|r| r.distance).collect();
    // log_slope fits ln(values); the decay rate is minus that slope
    let omega_hat = -log_slope(&ts, &ds)?;
    Ok(DecayTable { rows, omega_hat, replicates: trajs.len() })
}
