//! Explicit lower bound `nu` for the skeleton-averaged transition kernel
//! `sum_j mu_j P_{j Delta}(x, .)` of the h-transformed adder, uniform over
//! starting points `x` in a compact box.
//!
//! For a target `(a, y)` with birth size `z = y - a`, only paths with exactly
//! one division are counted: the lineage started at `x` divides at size `u`
//! inside the window `D(z) = [c, c e^{lambda Delta}]`, `c = max(2z, y_hi)`,
//! has a child of size `z`, and that child flows to `(a, y)` without a
//! further division. The window spans exactly one skeleton period, so for
//! every `x` some step `j <= j*(a, y)` realises such a path.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowEngine;
use crate::model::{BoxDomain, MarkovModel, PhasePoint};
use crate::quadrature::{linspace, Rule};
use crate::simulate::{division_time_from_added_size, sample_division_age};

use super::density::{CellGrid, Density2D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoeblinConfig {
    pub compact: BoxDomain,
    /// Output grid for `nu`.
    pub grid: CellGrid,
    /// Skeleton step; `ln 2 / lambda` when absent.
    pub delta: Option<f64>,
    /// Geometric sampling weights `mu_j = (1 - q) q^j`.
    pub q: f64,
    pub j_cap: usize,
    /// Points per side of the compact used for the infima.
    pub compact_n: usize,
    /// Points across each window `D(z)`.
    pub window_n: usize,
}

impl Default for DoeblinConfig {
    fn default() -> Self {
        Self {
            compact: BoxDomain { a: (0.0, 1.0), y: (1.0, 2.0) },
            grid: CellGrid::new((0.0, 2.0), (0.0, 4.0), 16, 16),
            delta: None,
            q: 0.5,
            j_cap: 64,
            compact_n: 5,
            window_n: 9,
        }
    }
}

/// Bounds attached to one birth size `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowConstants {
    pub z: f64,
    /// `D(z)`.
    pub window: (f64, f64),
    /// `inf psi(s | x)` over the compact and the window.
    pub a0: f64,
    /// `sup int h(0, z') k(x', z') dz'` over the parent states at division.
    pub c0: f64,
    /// `inf k(x', z)` over the same states.
    pub epsilon: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DoeblinConstants {
    pub delta: f64,
    /// Largest skeleton horizon used by a positive cell.
    pub j_star: usize,
    pub mu_weights: Vec<f64>,
    /// Largest jump rate met at the division states.
    pub b0: f64,
    /// Largest `h(0, z)` over the birth sizes used.
    pub h0: f64,
    /// `2 B0 + Lambda`, for reference.
    pub beta_tilde: f64,
    pub windows: Vec<WindowConstants>,
    /// `||Dphi||_2` at each output cell centre.
    pub e0: Density2D,
}

#[derive(Debug, Clone, Serialize)]
pub struct Minorant {
    pub nu: Density2D,
    pub constants: DoeblinConstants,
    /// Set when `nu` vanishes identically.
    pub empty: bool,
}

struct Setup<'a> {
    markov: &'a MarkovModel,
    flow: FlowEngine,
    lambda: f64,
    delta: f64,
    compact: Vec<PhasePoint>,
    cfg: &'a DoeblinConfig,
}

impl Setup<'_> {
    fn window(&self, z: f64) -> (f64, f64) {
        let c = (2.0 * z).max(self.cfg.compact.y.1);
        (c, c * (self.lambda * self.delta).exp())
    }

    fn constants(&self, z: f64) -> Result<(WindowConstants, f64)> {
        let window = self.window(z);
        let model = &self.markov.base;
        let (mut a0, mut c0, mut eps, mut b0) = (f64::INFINITY, 0.0f64, f64::INFINITY, 0.0f64);
        for &x in &self.compact {
            for u in linspace(window.0, window.1, self.cfg.window_n) {
                let s = self.flow.time_to_size(x, u)?;
                let (xp, cum) = self.flow.advance_with_hazard(x, s)?;
                let beta = model.beta(xp);
                let w = self.markov.weighted_mass(xp)?;
                let ratio = w / (self.markov.h)(xp);
                if (ratio - 1.0).abs() > 1e-8 {
                    return Err(Error::InvalidModel(format!(
                        "minorant needs an h-transform with unchanged jump rate (ratio {ratio} at {xp})"
                    )));
                }
                a0 = a0.min(beta * (-cum).exp());
                b0 = b0.max(beta);
                c0 = c0.max(w);
                eps = eps.min(model.k(xp, z));
            }
        }
        Ok((WindowConstants { z, window, a0, c0, epsilon: eps }, b0))
    }

    /// Smallest skeleton index that is guaranteed to hit the window from
    /// every point of the compact, for a child that needs `tau` to reach
    /// the target.
    fn j_star(&self, z: f64, tau: f64) -> usize {
        let (c, _) = self.window(z);
        let s_max = (c / self.cfg.compact.y.0).ln() / self.lambda;
        ((s_max + tau) / self.delta).ceil().max(0.0) as usize
    }
}

fn mu(q: f64, j: usize) -> f64 {
    (1.0 - q) * q.powi(j as i32)
}

/// Cell averages (2x2 Gauss points) of the minorant on `cfg.grid`.
pub fn doeblin_minorant(markov: &MarkovModel, cfg: &DoeblinConfig) -> Result<Minorant> {
    let model = &markov.base;
    let lambda = model
        .lambda_growth()
        .ok_or_else(|| Error::InvalidModel("minorant is built for adder growth".into()))?;
    if model.fragmentation().is_none() {
        return Err(Error::InvalidModel("minorant needs a fragmentation kernel".into()));
    }
    let k = cfg.compact;
    if !(k.y.0 > 0.0 && k.y.1 > k.y.0 && k.a.1 >= k.a.0 && k.a.0 >= 0.0 && k.a.1 <= k.y.0) {
        return Err(Error::Config(format!("compact {k:?} must satisfy 0 <= a <= y with y_lo > 0")));
    }
    if !(cfg.q > 0.0 && cfg.q < 1.0) || cfg.compact_n < 2 || cfg.window_n < 2 {
        return Err(Error::Config("doeblin: need 0 < q < 1, compact_n >= 2, window_n >= 2".into()));
    }
    let delta = cfg.delta.unwrap_or(std::f64::consts::LN_2 / lambda);
    if !(delta > 0.0) {
        return Err(Error::Config(format!("skeleton step must be positive, got {delta}")));
    }
    let mut compact = Vec::new();
    for y in linspace(k.y.0, k.y.1, cfg.compact_n) {
        for a in linspace(k.a.0, k.a.1, cfg.compact_n) {
            compact.push(PhasePoint::new(a, y));
        }
    }
    let setup = Setup { markov, flow: FlowEngine::new(model.clone()), lambda, delta, compact, cfg };

    // evaluation points: 2x2 Gauss points per cell
    let template = Density2D::zeros(cfg.grid);
    let gl = Rule::uniform(0.0, 1.0, 1, 2);
    let mut points: Vec<(usize, PhasePoint, f64)> = Vec::new();
    for c in 0..template.len() {
        if template.weights[c] <= 0.0 {
            continue;
        }
        let (ia, iy) = (c % template.na(), c / template.na());
        let (a0, a1) = (template.a_edges[ia], template.a_edges[ia + 1]);
        let (y0, y1) = (template.y_edges[iy], template.y_edges[iy + 1]);
        for (&ty, &wy) in gl.nodes.iter().zip(&gl.weights) {
            for (&ta, &wa) in gl.nodes.iter().zip(&gl.weights) {
                let p = PhasePoint::new(a0 + ta * (a1 - a0), y0 + ty * (y1 - y0));
                if p.a < p.y {
                    points.push((c, p, wa * wy * (a1 - a0) * (y1 - y0)));
                }
            }
        }
    }

    let mut zs: Vec<f64> = points.iter().map(|(_, p, _)| p.y - p.a).collect();
    zs.sort_by(f64::total_cmp);
    zs.dedup();
    let table: Vec<(WindowConstants, f64)> = zs.par_iter().map(|&z| setup.constants(z)).collect::<Result<_>>()?;
    let lookup: HashMap<u64, usize> = zs.iter().enumerate().map(|(i, z)| (z.to_bits(), i)).collect();

    struct PointValue {
        cell: usize,
        weight: f64,
        value: f64,
        j: Option<usize>,
    }
    let values: Vec<PointValue> = points
        .par_iter()
        .map(|&(cell, p, weight)| -> Result<PointValue> {
            let z = p.y - p.a;
            let (wc, _) = &table[lookup[&z.to_bits()]];
            let origin = PhasePoint::new(0.0, z);
            let tau = setup.flow.time_to_size(origin, p.y)?;
            let j = setup.j_star(z, tau);
            if j > cfg.j_cap {
                return Ok(PointValue { cell, weight, value: 0.0, j: None });
            }
            let (_, cum) = setup.flow.advance_with_hazard(origin, tau)?;
            let e0 = setup.flow.flow_jacobian(origin, tau)?.norm2();
            let [g1, g2] = model.g(p);
            let hz = (markov.h)(origin);
            let value = wc.a0 * wc.epsilon * hz / wc.c0 * (-cum).exp() / (g1.hypot(g2) * e0) * mu(cfg.q, j);
            Ok(PointValue { cell, weight, value: value.max(0.0), j: Some(j) })
        })
        .collect::<Result<_>>()?;

    let mut nu = template.clone();
    let mut j_star = 0;
    for v in &values {
        nu.values[v.cell] += v.weight * v.value / nu.weights[v.cell];
        if v.value > 0.0 {
            j_star = j_star.max(v.j.unwrap_or(0));
        }
    }
    nu.refresh_mass();

    let mut e0 = template.clone();
    for c in 0..e0.len() {
        let p = e0.centre_of(c);
        if p.a < p.y {
            let origin = PhasePoint::new(0.0, p.y - p.a);
            let tau = setup.flow.time_to_size(origin, p.y)?;
            e0.values[c] = setup.flow.flow_jacobian(origin, tau)?.norm2();
        }
    }
    e0.refresh_mass();

    let b0 = table.iter().map(|t| t.1).fold(0.0f64, f64::max);
    let h0 = zs.iter().map(|&z| (markov.h)(PhasePoint::new(0.0, z))).fold(0.0f64, f64::max);
    let empty = nu.values.iter().all(|&v| v == 0.0);
    Ok(Minorant {
        constants: DoeblinConstants {
            delta,
            j_star,
            mu_weights: (0..=j_star).map(|j| mu(cfg.q, j)).collect(),
            b0,
            h0,
            beta_tilde: 2.0 * b0 + markov.lambda,
            windows: table.into_iter().map(|t| t.0).collect(),
            e0,
        },
        nu,
        empty,
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo check

/// Histogram estimate of `sum_j mu_j P_{j Delta}(x0, .)` for the lineage of
/// the h-transformed adder with `h = y` (no deaths; at a division the
/// followed child is `rho u` with probability `rho`).
#[derive(Debug, Clone, Serialize)]
pub struct SkeletonEstimate {
    pub x0: PhasePoint,
    pub density: Density2D,
    /// Per-cell standard error, using at least one count per cell.
    pub stderr: Density2D,
    pub samples: usize,
}

pub fn skeleton_density(
    markov: &MarkovModel,
    x0: PhasePoint,
    delta: f64,
    q: f64,
    grid: CellGrid,
    samples: usize,
    seed: u64,
) -> Result<SkeletonEstimate> {
    let model = markov.base.clone();
    let fr = model
        .fragmentation()
        .ok_or_else(|| Error::InvalidModel("lineage sampler needs a fragmentation kernel".into()))?
        .clone();
    for p in [PhasePoint::new(0.0, 0.7), PhasePoint::new(0.3, 1.9), x0] {
        if ((markov.h)(p) - p.y).abs() > 1e-12 * p.y {
            return Err(Error::InvalidModel("lineage sampler needs h(a, y) = y".into()));
        }
    }
    let flow = FlowEngine::new(model.clone());
    const CHUNK: usize = 4096;
    let n_chunks = samples.div_ceil(CHUNK);
    let ends: Vec<Option<PhasePoint>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| -> Result<Vec<Option<PhasePoint>>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64 + 1);
            let count = CHUNK.min(samples - chunk * CHUNK);
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let u: f64 = rng.random();
                let j = ((1.0 - u).ln() / q.ln()).floor();
                let mut left = j * delta;
                let mut x = x0;
                loop {
                    let da = sample_division_age(&model, x, &mut rng)?;
                    let t_div = if da.is_finite() {
                        division_time_from_added_size(&flow, x, da)?
                    } else {
                        f64::INFINITY
                    };
                    if t_div > left {
                        x = flow.advance(x, left)?;
                        break;
                    }
                    let parent = flow.advance(x, t_div)?;
                    left -= t_div;
                    let rho = fr.sample(&mut rng);
                    let keep: f64 = rng.random();
                    let z = if keep < rho { rho * parent.y } else { (1.0 - rho) * parent.y };
                    x = PhasePoint::new(0.0, z);
                }
                out.push(Some(x));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut counts = Density2D::zeros(grid);
    for x in ends.into_iter().flatten() {
        counts.add_point_mass(x, 1.0);
    }
    let n = samples as f64;
    let mut density = counts.clone();
    density.scale(1.0 / n);
    let mut stderr = Density2D::zeros(grid);
    for c in 0..stderr.len() {
        let w = stderr.weights[c];
        if w > 0.0 {
            let k = counts.values[c] * w;
            let p = (k.max(1.0) / n).min(1.0);
            stderr.values[c] = (p * (1.0 - p) / n).sqrt() / w;
        }
    }
    stderr.refresh_mass();
    Ok(SkeletonEstimate { x0, density, stderr, samples })
}

#[derive(Debug, Clone, Serialize)]
pub struct MinorantCheck {
    pub x0: PhasePoint,
    pub violations: usize,
    /// `max (nu - mc - 3 se)` over the cells.
    pub worst_excess: f64,
    pub worst_cell: PhasePoint,
    pub pass: bool,
}

/// One-sided comparison `nu <= mc + slack * se` cell by cell.
pub fn compare_minorant(nu: &Density2D, est: &SkeletonEstimate, slack: f64) -> Result<MinorantCheck> {
    if !nu.same_grid(&est.density) {
        return Err(Error::GridMismatch("minorant and Monte Carlo grids differ".into()));
    }
    let mut worst = (f64::NEG_INFINITY, PhasePoint::new(0.0, 0.0));
    let mut violations = 0;
    for c in 0..nu.len() {
        if nu.weights[c] <= 0.0 {
            continue;
        }
        let excess = nu.values[c] - est.density.values[c] - slack * est.stderr.values[c];
        if excess > 0.0 {
            violations += 1;
        }
        if excess > worst.0 {
            worst = (excess, nu.centre_of(c));
        }
    }
    Ok(MinorantCheck { x0: est.x0, violations, worst_excess: worst.0, worst_cell: worst.1, pass: violations == 0 })
}
