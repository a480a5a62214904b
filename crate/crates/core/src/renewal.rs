//! First-jump law and the lambda-weighted renewal kernels.
//!
//! Starting from `x`, an individual follows the flow until its first
//! division at time `T` (density `psi(t|x)`) and produces newborns of size
//! `Z` with intensity `k(phi^T x, z)`. The renewal kernel
//! `K_lambda(x, z) = int k(phi^t x, z) psi(t|x) e^{-lambda t} dt`
//! discretised on a size grid gives the operator whose principal eigenvalue
//! pins the Malthus exponent.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowEngine;
use crate::model::{Kernel, ModelSpec, PhasePoint, HAZARD_HORIZON};
use crate::quadrature::{self, merge_breaks, Rule};

/// One node of the first-jump time quadrature: jump time, pre-jump state
/// and `psi(t|x) dt`.
#[derive(Debug, Clone, Copy)]
pub struct JumpNode {
    pub t: f64,
    pub state: PhasePoint,
    pub w: f64,
}

#[derive(Clone)]
pub struct FirstJumpLaw {
    pub model: Arc<ModelSpec>,
    pub flow: FlowEngine,
    /// Time panel width in units of `1 / lambda_growth` (adder) or time.
    pub time_step: f64,
    pub hazard_panels: usize,
    pub order: usize,
}

impl FirstJumpLaw {
    pub fn new(model: Arc<ModelSpec>) -> Self {
        let flow = FlowEngine::new(model.clone());
        Self { model, flow, time_step: 0.5, hazard_panels: 16, order: 8 }
    }

    fn closed_form(&self) -> bool {
        self.flow.is_closed_form() && self.model.hazard.is_age_only()
    }

    /// `exp(-int_0^t beta(phi^s x) ds)`.
    pub fn survival(&self, x: PhasePoint, t: f64) -> Result<f64> {
        if t <= 0.0 {
            return Ok(1.0);
        }
        let (_, h) = self.flow.advance_with_hazard(x, t)?;
        Ok((-h).exp())
    }

    /// Density of the first jump time.
    pub fn psi(&self, x: PhasePoint, t: f64) -> Result<f64> {
        if t < 0.0 {
            return Ok(0.0);
        }
        let (p, h) = self.flow.advance_with_hazard(x, t)?;
        Ok(self.model.beta(p) * (-h).exp())
    }

    /// Time after which survival is below `exp(-HAZARD_HORIZON)` = 1e-12.
    pub fn t_max(&self, x: PhasePoint) -> Result<f64> {
        if self.closed_form() {
            let hz = &self.model.hazard;
            let h0 = hz.cumulative(x.a).expect("age-only hazard");
            let a1 = hz
                .inverse_cumulative(h0 + HAZARD_HORIZON)
                .ok_or(Error::TailBoundExceeded { tail: 1.0 })?;
            return self.flow.time_to_age(x, a1);
        }
        let mut t = 1.0;
        let mut last = 0.0;
        while t < 1e4 {
            let (_, h) = self.flow.advance_with_hazard(x, t)?;
            if h >= HAZARD_HORIZON {
                // refine by bisection so panels are not wasted on a dead tail
                let (mut lo, mut hi) = (last, t);
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    if self.flow.advance_with_hazard(x, mid)?.1 >= HAZARD_HORIZON {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Ok(hi);
            }
            last = t;
            t *= 2.0;
        }
        let tail = self.survival(x, last)?;
        Err(Error::TailBoundExceeded { tail })
    }

    /// Quadrature of the first-jump time law from `x`; `extra` adds panel
    /// breakpoints (e.g. where the integrand has a kink).
    pub fn time_rule(&self, x: PhasePoint, extra: &[f64]) -> Result<Vec<JumpNode>> {
        let t_max = self.t_max(x)?;
        let model = &self.model;
        if self.closed_form() {
            let lambda = model.lambda_growth().expect("adder");
            let hz = &model.hazard;
            let h0 = hz.cumulative(x.a).expect("age-only hazard");
            let mut breaks: Vec<f64> = (1..self.hazard_panels)
                .filter_map(|k| {
                    let level = HAZARD_HORIZON * k as f64 / self.hazard_panels as f64;
                    hz.inverse_cumulative(h0 + level).and_then(|a| self.flow.time_to_age(x, a).ok())
                })
                .collect();
            let step = self.time_step / lambda;
            let n_t = (t_max / step).ceil() as usize;
            breaks.extend((0..=n_t).map(|i| (i as f64 * step).min(t_max)));
            breaks.push(t_max);
            // hazard kinks: minimal division age
            if hz.a_star() > x.a {
                if let Ok(t) = self.flow.time_to_age(x, hz.a_star()) {
                    breaks.push(t);
                }
            }
            breaks.extend(extra.iter().copied().filter(|&t| t > 0.0 && t < t_max));
            let breaks = merge_breaks(&breaks, &[0.0]);
            let rule = Rule::panels(&breaks, self.order);
            return Ok(rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(&t, &w)| {
                    let e = (lambda * t).exp_m1();
                    let state = PhasePoint::new(x.a + x.y * e, x.y * (1.0 + e));
                    let h = hz.cumulative(state.a).expect("age-only hazard") - h0;
                    JumpNode { t, state, w: w * model.beta(state) * (-h).exp() }
                })
                .collect());
        }
        let n_panels = ((t_max / self.time_step).ceil() as usize).max(32);
        let mut breaks = quadrature::linspace(0.0, t_max, n_panels + 1);
        breaks = merge_breaks(&breaks, &extra.iter().copied().filter(|&t| t > 0.0 && t < t_max).collect::<Vec<_>>());
        let rule = Rule::panels(&breaks, self.order);
        let mut out = Vec::with_capacity(rule.len());
        let (mut state, mut h, mut t_prev) = (x, 0.0, 0.0);
        for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
            let (p, dh) = self.flow.advance_with_hazard(state, t - t_prev)?;
            state = p;
            h += dh;
            t_prev = t;
            out.push(JumpNode { t, state, w: w * model.beta(state) * (-h).exp() });
        }
        Ok(out)
    }

    /// Time at which the flow from `x` reaches size `z`, when that happens
    /// forward in time; fragmentation kernels jump there.
    fn support_break(&self, x: PhasePoint, z: f64) -> Option<f64> {
        match self.model.kernel {
            Kernel::Fragmentation(_) if z > x.y => self.flow.time_to_size(x, z).ok(),
            _ => None,
        }
    }

    /// Mean number of offspring `C_x = int ||k(phi^t x, .)||_1 psi(t|x) dt`.
    pub fn offspring_constant(&self, x: PhasePoint) -> Result<f64> {
        Ok(self
            .time_rule(x, &[])?
            .iter()
            .map(|n| n.w * self.model.kernel_mass(n.state))
            .sum())
    }

    /// Joint density of the first jump time and newborn size.
    pub fn first_jump_density(&self, x: PhasePoint, t: f64, z: f64) -> Result<f64> {
        if t < 0.0 || z < 0.0 {
            return Ok(0.0);
        }
        let (p, h) = self.flow.advance_with_hazard(x, t)?;
        let k = self.model.k(p, z);
        if k == 0.0 {
            return Ok(0.0);
        }
        Ok(k * self.model.beta(p) * (-h).exp() / self.offspring_constant(x)?)
    }

    /// `K_lambda(x, z)`.
    pub fn kernel_k(&self, x: PhasePoint, z: f64, lambda: f64) -> Result<f64> {
        let extra: Vec<f64> = self.support_break(x, z).into_iter().collect();
        Ok(self
            .time_rule(x, &extra)?
            .iter()
            .map(|n| n.w * (-lambda * n.t).exp() * self.model.k(n.state, z))
            .sum())
    }

    /// Offspring mass sent above `r`, redistributed uniformly on `[0, r]` by
    /// the truncated kernel: `int psi e^{-lambda t} int_r^inf k dz dt`.
    pub fn correction_mass(&self, x: PhasePoint, lambda: f64, r: f64) -> Result<f64> {
        let extra: Vec<f64> = self.support_break(x, r).into_iter().collect();
        Ok(self
            .time_rule(x, &extra)?
            .iter()
            .map(|n| n.w * (-lambda * n.t).exp() * self.model.kernel_mass_above(n.state, r))
            .sum())
    }

    /// `K^R_lambda(x, z)` for `z` in `[0, R]`.
    pub fn kernel_k_truncated(&self, x: PhasePoint, z: f64, lambda: f64, r: f64) -> Result<f64> {
        if !(0.0..=r).contains(&z) {
            return Ok(0.0);
        }
        Ok(self.kernel_k(x, z, lambda)? + self.correction_mass(x, lambda, r)? / r)
    }

    /// Row `K^R_lambda(x, z_j)` over the grid nodes plus the correction mass.
    pub fn kernel_row(&self, x: PhasePoint, lambda: f64, grid: &SizeGrid) -> Result<(Vec<f64>, f64)> {
        let extra: Vec<f64> = self.support_break(x, grid.r).into_iter().collect();
        let nodes = self.time_rule(x, &extra)?;
        let z = &grid.nodes;
        let mut row = vec![0.0; z.len()];
        let mut masses = vec![0.0; z.len()];
        let mut below = 0.0;
        let mut corr = 0.0;
        for n in &nodes {
            let c = n.w * (-lambda * n.t).exp();
            if c == 0.0 {
                continue;
            }
            match &self.model.kernel {
                Kernel::Fragmentation(fr) => {
                    let u = n.state.y;
                    let inv = 1.0 / u;
                    let cu = c * inv;
                    let end = z.partition_point(|&v| v < u);
                    if end < NARROW_CELLS {
                        // too few nodes under the offspring law: integrate it
                        // against the hat functions instead of sampling
                        hat_masses(z, u.min(grid.r), |s| cu * fr.pair_density(s * inv), &mut masses, &mut below);
                        corr += c * self.model.kernel_mass_above(n.state, grid.r);
                        continue;
                    }
                    for (r, &zj) in row[..end].iter_mut().zip(&z[..end]) {
                        *r += cu * fr.pair_density(zj * inv);
                    }
                }
                Kernel::General { .. } => {
                    for (r, &zj) in row.iter_mut().zip(z) {
                        *r += c * self.model.k(n.state, zj);
                    }
                }
            }
            corr += c * self.model.kernel_mass_above(n.state, grid.r);
        }
        if below > 0.0 {
            // virtual node at 0 valued by the line through the first two
            // nodes, limited so that no entry turns negative
            let w = &grid.weights;
            let s = z[0] / (z[1] - z[0]);
            let take = (s * below).min(masses[1] + row[1] * w[1]);
            masses[0] += below + take;
            masses[1] -= take;
        }
        let uniform = corr / grid.r;
        for ((v, m), w) in row.iter_mut().zip(&masses).zip(&grid.weights) {
            *v = (*v + m / w).max(0.0) + uniform;
        }
        Ok((row, corr))
    }

    /// Euler–Lotka residual
    /// `C E[exp(lambda (int_y^Z dz / g2(0, z) - T))] - 1` under the truncated
    /// first-jump law from `(0, y)`: mass above `r` is redistributed
    /// uniformly on `[0, r]`.
    pub fn euler_lotka_residual(&self, lambda: f64, y: f64, r: f64) -> Result<f64> {
        if !(y > 0.0 && y < r) {
            return Err(Error::OffDomain(format!("y = {y} outside (0, {r})")));
        }
        let x = PhasePoint::new(0.0, y);
        let model = &self.model;
        // log of the size-clock ratio int_y^z dz / g2(0, z)
        let clock: Box<dyn Fn(f64) -> f64 + Sync> = match model.lambda_growth() {
            Some(l) if !model.force_numeric => Box::new(move |z: f64| (z / y).ln() / l),
            _ => Box::new(move |z: f64| {
                quadrature::integrate(|s| 1.0 / model.g2(PhasePoint::new(0.0, s)), y, z, 16, 8)
            }),
        };
        let z_rule = Rule::uniform(0.0, 1.0, 32, 8);
        let extra: Vec<f64> = self.support_break(x, r).into_iter().collect();
        let nodes = self.time_rule(x, &extra)?;
        let uniform_avg = Rule::uniform(0.0, r, 64, 8).integrate(|z| (lambda * clock(z)).exp()) / r;
        let mut total = 0.0;
        for n in &nodes {
            let disc = (-lambda * n.t).exp();
            let inner = match &model.kernel {
                Kernel::Fragmentation(fr) => {
                    let u = n.state.y;
                    let top = (r / u).min(1.0);
                    z_rule.integrate(|s| {
                        let rho = s * top;
                        top * fr.pair_density(rho) * (lambda * clock(rho * u)).exp()
                    })
                }
                Kernel::General { .. } => {
                    let (lo, hi) = model.kernel_support(n.state);
                    let hi = hi.min(r);
                    if hi <= lo {
                        0.0
                    } else {
                        Rule::uniform(lo, hi, 32, 8)
                            .integrate(|z| model.k(n.state, z) * (lambda * clock(z)).exp())
                    }
                }
            };
            let above = model.kernel_mass_above(n.state, r);
            total += n.w * disc * (inner + above * uniform_avg);
        }
        Ok(total - 1.0)
    }
}

/// Below this many covered grid nodes a fragmentation law is integrated
/// against the hat functions rather than sampled at the nodes.
const NARROW_CELLS: usize = 64;

/// `out[j] += int_0^top f(z) phi_j(z) dz` for the piecewise-linear hat basis
/// on `nodes`; the share of a virtual node at 0 is added to `below`.
fn hat_masses(nodes: &[f64], top: f64, f: impl Fn(f64) -> f64, out: &mut Vec<f64>, below: &mut f64) {
    const GL: [(f64, f64); 4] = [
        (0.069_431_844_202_973_71, 0.173_927_422_568_726_93),
        (0.330_009_478_207_571_87, 0.326_072_577_431_273_07),
        (0.669_990_521_792_428_1, 0.326_072_577_431_273_07),
        (0.930_568_155_797_026_3, 0.173_927_422_568_726_93),
    ];
    let mut lo = 0.0;
    for j in 0..nodes.len() {
        let hi = nodes[j].min(top);
        if hi > lo {
            let d = hi - lo;
            for &(s, w) in &GL {
                let zq = lo + s * d;
                let m = w * d * f(zq);
                if j == 0 {
                    // hat between a virtual node at 0 and the first node
                    let t = zq / nodes[0];
                    out[0] += t * m;
                    *below += (1.0 - t) * m;
                } else {
                    let t = (zq - nodes[j - 1]) / (nodes[j] - nodes[j - 1]);
                    out[j - 1] += (1.0 - t) * m;
                    out[j] += t * m;
                }
            }
        }
        if nodes[j] >= top {
            break;
        }
        lo = nodes[j];
    }
}

// ---------------------------------------------------------------------------
// Size grid

/// Nodes in `(0, R]` with positive weights summing to `R`; exact for affine
/// functions on `[0, R]` (the first cell is closed by linear extrapolation).
#[derive(Debug, Clone, PartialEq)]
pub struct SizeGrid {
    pub r: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SizeGrid {
    /// `n` uniform nodes `j R / n`, `j = 1..=n`; the size 1 is inserted when
    /// it is not already a node.
    pub fn uniform(r: f64, n: usize) -> Self {
        let h = r / n as f64;
        let mut nodes: Vec<f64> = (1..=n).map(|j| j as f64 * h).collect();
        if r > 1.0 && !nodes.iter().any(|&v| (v - 1.0).abs() <= 1e-12) {
            nodes.push(1.0);
            nodes.sort_by(f64::total_cmp);
        } else if let Some(v) = nodes.iter_mut().find(|v| (**v - 1.0).abs() <= 1e-12) {
            *v = 1.0;
        }
        Self::from_nodes(r, nodes)
    }

    pub fn from_nodes(r: f64, nodes: Vec<f64>) -> Self {
        let n = nodes.len();
        assert!(n >= 3, "size grid needs at least three nodes");
        let h = nodes[1] - nodes[0];
        let uniform = n >= 8
            && (nodes[0] - h).abs() <= 1e-9 * h
            && nodes.windows(2).all(|p| ((p[1] - p[0]) - h).abs() <= 1e-9 * h);
        if uniform {
            // end-corrected trapezoid on [x1, xn] (exact for cubics), first cell linear
            let mut w = vec![h; n];
            for (k, c) in [3.0 / 8.0, 7.0 / 6.0, 23.0 / 24.0].into_iter().enumerate() {
                w[k] = c * h;
                w[n - 1 - k] = c * h;
            }
            w[0] += 1.5 * h;
            w[1] -= 0.5 * h;
            return Self { r, nodes, weights: w };
        }
        let mut w = vec![0.0; n];
        for i in 0..n - 1 {
            let d = nodes[i + 1] - nodes[i];
            w[i] += 0.5 * d;
            w[i + 1] += 0.5 * d;
        }
        // [0, x1] with the line through the first two nodes
        let (x1, x2) = (nodes[0], nodes[1]);
        let s = x1 / (x2 - x1);
        w[0] += 0.5 * x1 * (2.0 + s);
        w[1] -= 0.5 * x1 * s;
        Self { r, nodes, weights: w }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, y: f64) -> Option<usize> {
        self.nodes.iter().position(|&v| (v - y).abs() <= 1e-12 * (1.0 + y))
    }

    pub fn integrate(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.weights).map(|(a, b)| a * b).sum()
    }
}

// ---------------------------------------------------------------------------
// Kernel matrix

/// `M[i][j] = K^R_lambda(0, y_i, z_j)` (correction included), row-major.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub lambda: f64,
    pub grid: Arc<SizeGrid>,
    pub entries: Vec<f64>,
    /// Per row: offspring mass above `R` before redistribution.
    pub correction_mass: Vec<f64>,
}

impl KernelMatrix {
    pub fn assemble(law: &FirstJumpLaw, grid: Arc<SizeGrid>, lambda: f64) -> Result<Self> {
        let rows: Vec<(Vec<f64>, f64)> = grid
            .nodes
            .par_iter()
            .map(|&y| law.kernel_row(PhasePoint::new(0.0, y), lambda, &grid))
            .collect::<Result<_>>()?;
        let n = grid.len();
        let mut entries = Vec::with_capacity(n * n);
        let mut correction_mass = Vec::with_capacity(n);
        for (row, c) in rows {
            entries.extend(row);
            correction_mass.push(c);
        }
        Ok(Self { lambda, grid, entries, correction_mass })
    }

    pub fn n(&self) -> usize {
        self.grid.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.n();
        &self.entries[i * n..(i + 1) * n]
    }

    /// `(G f)_i = sum_j M_ij w_j f_j`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let wf: Vec<f64> = f.iter().zip(&self.grid.weights).map(|(a, b)| a * b).collect();
        (0..self.n())
            .map(|i| self.row(i).iter().zip(&wf).map(|(m, v)| m * v).sum())
            .collect()
    }

    /// Adjoint on grid measures: `(J nu)_j = w_j sum_i nu_i M_ij`, so that
    /// `<nu, G f> = <J nu, f>`.
    pub fn apply_adjoint(&self, nu: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        for (i, &v) in nu.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (o, m) in out.iter_mut().zip(self.row(i)) {
                *o += v * m;
            }
        }
        out.iter_mut().zip(&self.grid.weights).for_each(|(o, w)| *o *= w);
        out
    }

    pub fn max_correction(&self) -> f64 {
        self.correction_mass.iter().fold(0.0, |a, &b| a.max(b))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "row,col,value")?;
        let n = self.n();
        for i in 0..n {
            for (j, v) in self.row(i).iter().enumerate() {
                writeln!(w, "{i},{j},{v:e}")?;
            }
        }
        Ok(())
    }

    pub fn write_correction_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "row,y,correction_mass")?;
        for (i, (y, c)) in self.grid.nodes.iter().zip(&self.correction_mass).enumerate() {
            writeln!(w, "{i},{y},{c:e}")?;
        }
        Ok(())
    }
}

/// Renewal operator on a fixed grid, with kernel matrices cached per lambda.
pub struct RenewalOperator {
    pub law: FirstJumpLaw,
    pub grid: Arc<SizeGrid>,
    cache: Mutex<HashMap<u64, Arc<KernelMatrix>>>,
}

impl RenewalOperator {
    pub fn new(model: Arc<ModelSpec>, grid: SizeGrid) -> Self {
        Self { law: FirstJumpLaw::new(model), grid: Arc::new(grid), cache: Mutex::new(HashMap::new()) }
    }

    pub fn matrix(&self, lambda: f64) -> Result<Arc<KernelMatrix>> {
        let key = lambda.to_bits();
        if let Some(m) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(m.clone());
        }
        let m = Arc::new(KernelMatrix::assemble(&self.law, self.grid.clone(), lambda)?);
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() > 64 {
            cache.clear();
        }
        cache.insert(key, m.clone());
        Ok(m)
    }
}

/// `G^R_lambda f` on the grid.
pub fn truncated_apply(law: &FirstJumpLaw, f: &[f64], lambda: f64, grid: &SizeGrid) -> Result<Vec<f64>> {
    let m = KernelMatrix::assemble(law, Arc::new(grid.clone()), lambda)?;
    Ok(m.apply(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_adder, Fragmentation, Hazard};
    use approx::assert_relative_eq;

    fn adder() -> Arc<ModelSpec> {
        Arc::new(make_adder(1.0, Hazard::constant(1.0), Fragmentation::beta(5.0, 5.0).unwrap(), 0.0))
    }

    #[test]
    fn survival_closed_form() {
        let law = FirstJumpLaw::new(adder());
        let x = PhasePoint::new(0.0, 1.0);
        for &t in &[0.0, 0.3, 1.1] {
            let s: f64 = law.survival(x, t).unwrap();
            assert_relative_eq!(s, (-(t.exp() - 1.0)).exp(), max_relative = 1e-13);
        }
        let numeric = FirstJumpLaw::new(Arc::new((*adder()).clone().numeric()));
        let s = numeric.survival(x, 1.1).unwrap();
        assert!((s - (-(1.1f64.exp() - 1.0)).exp()).abs() < 1e-8);
    }

    #[test]
    fn psi_integrates_to_one() {
        let law = FirstJumpLaw::new(adder());
        for &y in &[0.05, 1.0, 7.0] {
            let total: f64 = law.time_rule(PhasePoint::new(0.0, y), &[]).unwrap().iter().map(|n| n.w).sum();
            assert!((total - 1.0).abs() < 1e-10, "y = {y}: {total}");
        }
    }

    #[test]
    fn grid_weights() {
        let g = SizeGrid::uniform(16.0, 512);
        assert_eq!(g.len(), 512);
        assert_eq!(g.nodes[511], 16.0);
        assert!(g.index_of(1.0).is_some());
        assert!(g.weights.iter().all(|&w| w > 0.0));
        assert_relative_eq!(g.weights.iter().sum::<f64>(), 16.0, max_relative = 1e-14);
        let f: Vec<f64> = g.nodes.iter().map(|&y| 3.0 * y + 1.0).collect();
        assert_relative_eq!(g.integrate(&f), 1.5 * 256.0 + 16.0, max_relative = 1e-13);
        // 1 inserted when missing
        let g = SizeGrid::uniform(3.0, 7);
        assert!(g.index_of(1.0).is_some());
        assert_relative_eq!(g.weights.iter().sum::<f64>(), 3.0, max_relative = 1e-14);
    }
}
