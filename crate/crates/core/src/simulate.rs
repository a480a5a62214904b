//! Exact event-driven Monte Carlo simulation of the branching population.
//!
//! Every individual draws its whole life at birth from its own random
//! stream: the added size at division (inverse CDF of the hazard), an
//! exponential death clock and, if it divides, the fragment `rho`. Streams
//! are keyed by `(seed, replicate, genealogical id)`, so results do not
//! depend on the order in which events are processed.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowEngine;
use crate::model::{Field, Kernel, ModelSpec, PhasePoint};

pub const DEFAULT_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub t_end: f64,
    pub cap: usize,
    pub replicates: usize,
    /// Observation times; empty means 17 equally spaced times on `[0, t_end]`.
    pub record_times: Vec<f64>,
    pub log_events: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { seed: 0, t_end: 4.0, cap: DEFAULT_CAP, replicates: 100, record_times: Vec::new(), log_events: false }
    }
}

impl SimConfig {
    pub fn times(&self) -> Vec<f64> {
        if self.record_times.is_empty() {
            if self.t_end == 0.0 {
                return vec![0.0];
            }
            return crate::quadrature::linspace(0.0, self.t_end, 17);
        }
        self.record_times.clone()
    }

    pub fn check(&self) -> Result<()> {
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::Config(format!("t_end must be >= 0, got {}", self.t_end)));
        }
        let times = self.times();
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("record_times must be sorted".into()));
        }
        if times.iter().any(|&t| t < 0.0 || t > self.t_end) {
            return Err(Error::Config("record_times must lie in [0, t_end]".into()));
        }
        if self.cap == 0 {
            return Err(Error::Config("cap must be positive".into()));
        }
        Ok(())
    }
}

/// The point measure `Z_t` at one observation time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationState {
    pub t: f64,
    pub individuals: Vec<PhasePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EventKind {
    Division { rho: f64 },
    Death,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub t: f64,
    pub id: u64,
    /// State just before the event.
    pub state: PhasePoint,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub replicate: usize,
    pub states: Vec<PopulationState>,
    /// Set when the population outgrew the cap; `states` then stops early.
    pub capped: bool,
    pub events: Vec<Event>,
}

// ---------------------------------------------------------------------------
// random streams

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Genealogical id of child `i` (0 or 1) of `parent`; the root is `ROOT_ID`.
pub fn child_id(parent: u64, i: u64) -> u64 {
    splitmix(parent ^ splitmix(i.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub const ROOT_ID: u64 = 1;

/// Per-individual stream: ChaCha8 seeded by the run seed and replicate,
/// with the genealogical id selecting the stream.
pub fn individual_rng(seed: u64, replicate: usize, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(replicate as u64)));
    rng.set_stream(id);
    rng
}

// ---------------------------------------------------------------------------
// division law

/// Added size at division for an individual currently at `x`, by inversion
/// of `P(A >= a) = exp(-(H(x.a + a) - H(x.a)))`. Infinite when the hazard
/// integral stays bounded.
pub fn sample_division_age<R: Rng + ?Sized>(model: &ModelSpec, x: PhasePoint, rng: &mut R) -> Result<f64> {
    let e = -(1.0 - rng.random::<f64>()).ln();
    added_size_at_level(model, x, e)
}

/// Added size at which the cumulative hazard from `x` reaches `e`.
pub fn added_size_at_level(model: &ModelSpec, x: PhasePoint, e: f64) -> Result<f64> {
    let hz = &model.hazard;
    if let Some(h0) = hz.cumulative(x.a) {
        return Ok(match hz.inverse_cumulative(h0 + e) {
            Some(a1) => (a1 - x.a).max(0.0),
            None => f64::INFINITY,
        });
    }
    // size-dependent hazard: integrate along the flow
    let flow = FlowEngine::new(Arc::new(model.clone()));
    let t = time_at_hazard_level(&flow, x, e)?;
    if !t.is_finite() {
        return Ok(f64::INFINITY);
    }
    Ok(flow.advance(x, t)?.a - x.a)
}

fn time_at_hazard_level(flow: &FlowEngine, x: PhasePoint, e: f64) -> Result<f64> {
    let (mut lo, mut hi) = (0.0, 1.0);
    loop {
        let (_, h) = flow.advance_with_hazard(x, hi)?;
        if h >= e {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Ok(f64::INFINITY);
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if flow.advance_with_hazard(x, mid)?.1 >= e {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Time for the age of `x` to grow by `da`: `ln(1 + da / y) / lambda` for
/// the adder.
pub fn division_time_from_added_size(flow: &FlowEngine, x: PhasePoint, da: f64) -> Result<f64> {
    if !da.is_finite() {
        return Ok(f64::INFINITY);
    }
    if da <= 0.0 {
        return Ok(0.0);
    }
    flow.time_to_age(x, x.a + da)
}

// ---------------------------------------------------------------------------
// event loop

#[derive(Debug, Clone, Copy)]
struct Individual {
    id: u64,
    birth_t: f64,
    birth_state: PhasePoint,
    end_t: f64,
    divides: bool,
}

#[derive(PartialEq)]
struct Pending {
    t: f64,
    slot: usize,
}

impl Eq for Pending {}

impl Ord for Pending {
    // min-heap on time, ties by slot
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then_with(|| other.slot.cmp(&self.slot))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub struct Simulator {
    pub model: Arc<ModelSpec>,
    flow: FlowEngine,
}

impl Simulator {
    pub fn new(model: Arc<ModelSpec>) -> Result<Self> {
        if model.fragmentation().is_none() {
            return Err(Error::InvalidModel("simulation needs a fragmentation kernel".into()));
        }
        let flow = FlowEngine::new(model.clone());
        Ok(Self { model, flow })
    }

    fn spawn(&self, seed: u64, replicate: usize, id: u64, t: f64, x: PhasePoint) -> Result<Individual> {
        let mut rng = individual_rng(seed, replicate, id);
        let da = sample_division_age(&self.model, x, &mut rng)?;
        // drawn even when d0 = 0 so streams line up across death rates
        let e_death = -(1.0 - rng.random::<f64>()).ln();
        let t_div = t + division_time_from_added_size(&self.flow, x, da)?;
        let t_death = if self.model.d0 > 0.0 { t + e_death / self.model.d0 } else { f64::INFINITY };
        Ok(Individual {
            id,
            birth_t: t,
            birth_state: x,
            end_t: t_div.min(t_death),
            divides: t_div < t_death,
        })
    }

    fn fragment(&self, seed: u64, replicate: usize, id: u64) -> f64 {
        let mut rng = individual_rng(seed, replicate, id);
        // skip the two lifetime draws
        let _: (f64, f64) = (rng.random(), rng.random());
        match &self.model.kernel {
            Kernel::Fragmentation(fr) => fr.sample(&mut rng),
            Kernel::General { .. } => unreachable!("checked in Simulator::new"),
        }
    }

    fn state_at(&self, ind: &Individual, t: f64) -> Result<PhasePoint> {
        self.flow.advance(ind.birth_state, t - ind.birth_t)
    }

    /// One replicate started from `delta_{x0}`.
    pub fn run(&self, x0: PhasePoint, cfg: &SimConfig, replicate: usize) -> Result<Trajectory> {
        cfg.check()?;
        let times = cfg.times();
        let mut slab: Vec<Option<Individual>> = Vec::new();
        let mut free: Vec<usize> = Vec::new();
        let mut heap = BinaryHeap::new();
        let mut live = 0usize;
        let mut events = Vec::new();
        let mut states = Vec::with_capacity(times.len());

        let insert = |ind: Individual,
                      slab: &mut Vec<Option<Individual>>,
                      free: &mut Vec<usize>,
                      heap: &mut BinaryHeap<Pending>| {
            let slot = match free.pop() {
                Some(s) => {
                    slab[s] = Some(ind);
                    s
                }
                None => {
                    slab.push(Some(ind));
                    slab.len() - 1
                }
            };
            heap.push(Pending { t: ind.end_t, slot });
            slot
        };
        let root = self.spawn(cfg.seed, replicate, ROOT_ID, 0.0, x0)?;
        insert(root, &mut slab, &mut free, &mut heap);
        live += 1;

        for &tr in &times {
            while heap.peek().is_some_and(|p| p.t <= tr) {
                let Pending { t, slot } = heap.pop().unwrap();
                let ind = slab[slot].take().expect("pending individual");
                live -= 1;
                // slot is reused only after this event is fully processed
                let pre = self.state_at(&ind, t)?;
                if ind.divides {
                    let rho = self.fragment(cfg.seed, replicate, ind.id);
                    if cfg.log_events {
                        events.push(Event { t, id: ind.id, state: pre, kind: EventKind::Division { rho } });
                    }
                    let first = rho * pre.y;
                    for (i, size) in [first, pre.y - first].into_iter().enumerate() {
                        let cid = child_id(ind.id, i as u64);
                        let child = self.spawn(cfg.seed, replicate, cid, t, PhasePoint::new(0.0, size))?;
                        insert(child, &mut slab, &mut free, &mut heap);
                        live += 1;
                    }
                } else if cfg.log_events {
                    events.push(Event { t, id: ind.id, state: pre, kind: EventKind::Death });
                }
                free.push(slot);
                if live > cfg.cap {
                    return Ok(Trajectory { replicate, states, capped: true, events });
                }
            }
            let individuals = slab
                .iter()
                .flatten()
                .map(|ind| self.state_at(ind, tr))
                .collect::<Result<Vec<_>>>()?;
            states.push(PopulationState { t: tr, individuals });
        }
        Ok(Trajectory { replicate, states, capped: false, events })
    }
}

/// Independent replicates (in parallel), returned in replicate order.
pub fn simulate_population(model: Arc<ModelSpec>, x0: PhasePoint, cfg: &SimConfig) -> Result<Vec<Trajectory>> {
    cfg.check()?;
    let sim = Simulator::new(model)?;
    (0..cfg.replicates).into_par_iter().map(|r| sim.run(x0, cfg, r)).collect()
}

/// `<Z_t, f>`.
pub fn empirical_functional(state: &PopulationState, f: impl Fn(PhasePoint) -> f64) -> f64 {
    state.individuals.iter().map(|&x| f(x)).sum()
}

// ---------------------------------------------------------------------------
// outputs

/// Trajectory CSV: `replicate,t,count,sum_h,mean_a,mean_y`.
pub fn write_trajectory_csv<W: Write>(mut w: W, trajs: &[Trajectory], h: &Field) -> Result<()> {
    writeln!(w, "replicate,t,count,sum_h,mean_a,mean_y")?;
    for tr in trajs {
        for s in &tr.states {
            let n = s.individuals.len();
            let sum_h = empirical_functional(s, |x| h(x));
            let (mean_a, mean_y) = if n == 0 {
                (0.0, 0.0)
            } else {
                (
                    empirical_functional(s, |x| x.a) / n as f64,
                    empirical_functional(s, |x| x.y) / n as f64,
                )
            };
            writeln!(w, "{},{},{},{},{},{}", tr.replicate, s.t, n, sum_h, mean_a, mean_y)?;
        }
    }
    Ok(())
}

/// Per-individual snapshot CSV: `replicate,t,a,y`.
pub fn write_snapshot_csv<W: Write>(mut w: W, trajs: &[Trajectory]) -> Result<()> {
    writeln!(w, "replicate,t,a,y")?;
    for tr in trajs {
        for s in &tr.states {
            for x in &s.individuals {
                writeln!(w, "{},{},{},{}", tr.replicate, s.t, x.a, x.y)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Malthus rate

#[derive(Debug, Clone, Serialize)]
pub struct MalthusEstimate {
    pub lambda_hat: f64,
    pub stderr: f64,
    pub times: Vec<f64>,
    pub mean_counts: Vec<f64>,
    /// Index of the first record time used in the fit.
    pub fit_from: usize,
}

/// Least-squares slope of `ln(counts)` against `times`.
pub fn log_slope(times: &[f64], counts: &[f64]) -> Result<f64> {
    if times.len() != counts.len() || times.len() < 2 {
        return Err(Error::InsufficientData("need at least two record times".into()));
    }
    if counts.iter().any(|&c| !(c > 0.0)) {
        return Err(Error::DegenerateData("mean count vanished".into()));
    }
    let n = times.len() as f64;
    let tm = times.iter().sum::<f64>() / n;
    let logs: Vec<f64> = counts.iter().map(|c| c.ln()).collect();
    let lm = logs.iter().sum::<f64>() / n;
    let sxx: f64 = times.iter().map(|t| (t - tm).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateData("record times coincide".into()));
    }
    let sxy: f64 = times.iter().zip(&logs).map(|(t, l)| (t - tm) * (l - lm)).sum();
    Ok(sxy / sxx)
}

fn mean_counts(trajs: &[&Trajectory], n_times: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_times];
    for tr in trajs {
        for (acc, s) in m.iter_mut().zip(&tr.states) {
            *acc += s.individuals.len() as f64;
        }
    }
    m.iter_mut().for_each(|v| *v /= trajs.len() as f64);
    m
}

pub fn estimate_malthus(trajs: &[Trajectory]) -> Result<MalthusEstimate> {
    estimate_malthus_with(trajs, 200, 0x6d61_6c74)
}

/// Slope of the log mean count over the latter half of the record times;
/// the standard error comes from resampling replicates.
pub fn estimate_malthus_with(trajs: &[Trajectory], n_boot: usize, seed: u64) -> Result<MalthusEstimate> {
    let first = trajs.first().ok_or_else(|| Error::InsufficientData("no trajectories".into()))?;
    if trajs.iter().any(|t| t.capped) {
        return Err(Error::DegenerateData("a replicate hit the population cap".into()));
    }
    let times: Vec<f64> = first.states.iter().map(|s| s.t).collect();
    if times.len() < 2 {
        return Err(Error::InsufficientData("need at least two record times".into()));
    }
    let fit_from = (times.len() / 2).min(times.len() - 2);
    let all: Vec<&Trajectory> = trajs.iter().collect();
    let counts = mean_counts(&all, times.len());
    let lambda_hat = log_slope(&times[fit_from..], &counts[fit_from..])?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boot = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let sample: Vec<&Trajectory> = (0..trajs.len()).map(|_| all[rng.random_range(0..all.len())]).collect();
        let c = mean_counts(&sample, times.len());
        if let Ok(s) = log_slope(&times[fit_from..], &c[fit_from..]) {
            boot.push(s);
        }
    }
    let stderr = if boot.len() > 1 {
        let m = boot.iter().sum::<f64>() / boot.len() as f64;
        (boot.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (boot.len() - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(MalthusEstimate { lambda_hat, stderr, times, mean_counts: counts, fit_from })
}

// ---------------------------------------------------------------------------
// generator consistency

#[derive(Debug, Clone, Serialize)]
pub struct GeneratorCheck {
    /// Mean of `(<Z_dt, f> - f(x0)) / dt`.
    pub simulated: f64,
    pub stderr: f64,
    /// `Q f(x0)`.
    pub generator: f64,
    pub z_score: f64,
    pub replicates: usize,
}

/// Compares the one-step Monte Carlo difference quotient with `Q f(x0)`.
pub fn generator_consistency_check(
    model: Arc<ModelSpec>,
    f: &(dyn Fn(PhasePoint) -> f64 + Sync),
    x0: PhasePoint,
    dt: f64,
    replicates: usize,
    seed: u64,
) -> Result<GeneratorCheck> {
    if replicates < 2 {
        return Err(Error::InsufficientData("need at least two replicates".into()));
    }
    let cfg = SimConfig { seed, t_end: dt, replicates, record_times: vec![dt], ..SimConfig::default() };
    let sim = Simulator::new(model.clone())?;
    let f0 = f(x0);
    let diffs: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let tr = sim.run(x0, &cfg, r)?;
            Ok((empirical_functional(&tr.states[0], f) - f0) / dt)
        })
        .collect::<Result<_>>()?;
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let stderr = (var / n).sqrt();
    let generator = model.generator(f, x0);
    let gap = mean - generator;
    let z_score = if stderr > 0.0 {
        gap / stderr
    } else if gap == 0.0 {
        0.0
    } else {
        gap.signum() * f64::INFINITY
    };
    Ok(GeneratorCheck { simulated: mean, stderr, generator, z_score, replicates })
}

// ---------------------------------------------------------------------------
// Kolmogorov–Smirnov

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// One-sample KS test against a continuous CDF (asymptotic p-value with
/// the Stephens small-sample correction).
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let nf = n as f64;
    let mut d = 0.0f64;
    for (i, &x) in s.iter().enumerate() {
        let c = cdf(x);
        d = d.max(c - i as f64 / nf).max((i + 1) as f64 / nf - c);
    }
    let sq = nf.sqrt();
    let p_value = kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d);
    KsResult { statistic: d, p_value, n }
}

/// `P(K > x)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_adder, Fragmentation, Hazard};

    fn adder(d0: f64) -> Arc<ModelSpec> {
        Arc::new(make_adder(1.0, Hazard::constant(1.0), Fragmentation::beta(5.0, 5.0).unwrap(), d0))
    }

    #[test]
    fn adder_division_time() {
        let m = adder(0.0);
        let flow = FlowEngine::new(m);
        let t = division_time_from_added_size(&flow, PhasePoint::new(0.0, 1.0), 1.0).unwrap();
        assert!((t - 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn t_end_zero_is_initial_state() {
        let cfg = SimConfig { t_end: 0.0, replicates: 1, ..SimConfig::default() };
        let tr = simulate_population(adder(0.0), PhasePoint::new(0.0, 1.0), &cfg).unwrap();
        assert_eq!(tr[0].states.len(), 1);
        assert_eq!(tr[0].states[0].individuals, vec![PhasePoint::new(0.0, 1.0)]);
    }

    #[test]
    fn kolmogorov_tail_values() {
        // classical critical values
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn slope_of_exact_exponential() {
        let t: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        let c: Vec<f64> = t.iter().map(|s| 3.0 * (0.8 * s).exp()).collect();
        assert!((log_slope(&t, &c).unwrap() - 0.8).abs() < 1e-12);
    }
}
