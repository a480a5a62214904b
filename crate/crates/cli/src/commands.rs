use std::io::Write;
use std::sync::Arc;

use anyhow::{Context, Result};
use malthus_core::eigen::solve_malthus;
use malthus_core::model::{size_field, validate, ModelSpec};
use malthus_core::renewal::{RenewalOperator, SizeGrid};
use malthus_core::simulate::{
    estimate_malthus, simulate_population, write_snapshot_csv, write_trajectory_csv, MalthusEstimate, SimConfig,
};
use malthus_core::stationary::{
    adder_markov, check_adder_drift, compare_minorant, default_v, doeblin_minorant, ergodicity_report,
    skeleton_density, solve_eta_star, stationary_target, Density2D, DecayTable, MinorantCheck,
};
use malthus_core::Error;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::OutDir;

/// Failed checks that are not library errors; reported with the exit code
/// of the command that ran them.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

fn build_model(cfg: &RunConfig) -> Result<Arc<ModelSpec>> {
    let model = cfg.model.build()?;
    validate(&model)?;
    Ok(Arc::new(model))
}

pub fn validate_cmd(cfg: &RunConfig, out: &OutDir) -> Result<()> {
    let model = cfg.model.build()?;
    let report = match validate(&model) {
        Ok(r) => r,
        Err(e) => {
            #[derive(Serialize)]
            struct Rejected {
                all_passed: bool,
                error: String,
            }
            out.write_json("validation.json", &Rejected { all_passed: false, error: e.to_string() })?;
            return Err(e.into());
        }
    };
    out.write_json("validation.json", &report)?;
    if !report.all_passed() {
        let names: Vec<String> = report.failures().map(|c| c.name.clone()).collect();
        return Err(Error::InvalidModel(format!("failed checks: {}", names.join("; "))).into());
    }
    Ok(())
}

fn fmt_r(r: f64) -> String {
    format!("{r}")
}

pub fn eigen(cfg: &RunConfig, out: &OutDir) -> Result<()> {
    let model = build_model(cfg)?;
    let lambda = model.lambda_growth().unwrap_or(1.0);
    let bracket = cfg.grid.bracket.unwrap_or((0.5 * lambda, 1.5 * lambda));
    let mut rows = Vec::new();
    for &r in &cfg.grid.r {
        if !(r > 1.0) || cfg.grid.n < 8 {
            return Err(Error::Config(format!("need R > 1 and n >= 8, got R = {r}, n = {}", cfg.grid.n)).into());
        }
        let op = RenewalOperator::new(model.clone(), SizeGrid::uniform(r, cfg.grid.n));
        let res = solve_malthus(&op, bracket).with_context(|| format!("R = {r}"))?;
        out.write(&format!("eigen_R{}.json", fmt_r(r)), |w| Ok(res.write_json(&mut *w)?))?;
        out.write(&format!("eta_R{}.csv", fmt_r(r)), |w| {
            writeln!(w, "y,eta,nu")?;
            for ((y, e), n) in res.grid.iter().zip(&res.eta).zip(&res.nu) {
                writeln!(w, "{y},{e},{n}")?;
            }
            Ok(())
        })?;
        rows.push((r, res.lambda_r, res.residual, res.eta_at(1.0).unwrap_or(f64::NAN)));
    }
    out.write("lambda_R.csv", |w| {
        writeln!(w, "R,lambda_R,mu_residual,eta_at_1")?;
        for (r, l, res, e1) in &rows {
            writeln!(w, "{r},{l},{res},{e1}")?;
        }
        Ok(())
    })?;
    Ok(())
}

#[derive(Serialize)]
struct SimSummary {
    replicates: usize,
    capped: usize,
    times: Vec<f64>,
    malthus: Option<MalthusEstimate>,
}

pub fn simulate(cfg: &RunConfig, seed: u64, out: &OutDir) -> Result<()> {
    let model = build_model(cfg)?;
    let sim = SimConfig { seed, ..cfg.sim.cfg.clone() };
    let trajs = simulate_population(model, cfg.sim.x0, &sim)?;
    let h = size_field();
    out.write("trajectories.csv", |w| Ok(write_trajectory_csv(&mut *w, &trajs, &h)?))?;
    if cfg.sim.snapshots {
        out.write("snapshots.csv", |w| Ok(write_snapshot_csv(&mut *w, &trajs)?))?;
    }
    let capped = trajs.iter().filter(|t| t.capped).count();
    let malthus = if capped == 0 { estimate_malthus(&trajs).ok() } else { None };
    let summary = SimSummary { replicates: trajs.len(), capped, times: sim.times(), malthus };
    out.write_json("simulation.json", &summary)?;
    if capped > 0 {
        return Err(Error::PopulationCapExceeded { cap: sim.cap }.into());
    }
    Ok(())
}

#[derive(Serialize)]
struct StationarySummary {
    sweeps: usize,
    residual: f64,
    retained: f64,
    pi_mass: f64,
    pi_star_grid_mass: f64,
    decay: Option<DecayTable>,
}

pub fn stationary(cfg: &RunConfig, seed: u64, out: &OutDir) -> Result<()> {
    let model = build_model(cfg)?;
    let st = &cfg.stationary;
    let fr = model
        .fragmentation()
        .ok_or_else(|| Error::InvalidModel("stationary profile needs a fragmentation kernel".into()))?;
    let eta = solve_eta_star(&model.hazard, fr, &st.eta)?;
    out.write("eta_star.csv", |w| Ok(eta.write_csv(&mut *w)?))?;
    let grid = st.ergodicity.grid;
    let pi = Density2D::from_cell_average(grid, 8, |x| eta.pi_star(x));
    out.write("pi_star.csv", |w| Ok(pi.write_csv(&mut *w)?))?;
    out.write("pi_star.json", |w| Ok(pi.write_header_json(&mut *w)?))?;

    let decay = if st.replicates > 0 {
        let big_lambda = model.lambda_growth().unwrap_or(1.0) - model.d0;
        let t_end = st.record_times.iter().cloned().fold(0.0, f64::max);
        let sim = SimConfig {
            seed,
            t_end,
            cap: st.cap,
            replicates: st.replicates,
            record_times: st.record_times.clone(),
            log_events: false,
        };
        let trajs = simulate_population(model.clone(), st.x0, &sim)?;
        let target = stationary_target(&eta, grid);
        let opts = malthus_core::stationary::ErgodicityOptions { seed: st.ergodicity.seed ^ seed, ..st.ergodicity };
        let table = ergodicity_report(&trajs, st.x0, &|x| x.y, big_lambda, &target, &default_v, &opts)?;
        out.write("decay.csv", |w| Ok(table.write_csv(&mut *w)?))?;
        Some(table)
    } else {
        None
    };
    let summary = StationarySummary {
        sweeps: eta.sweeps,
        residual: eta.residual,
        retained: eta.retained,
        pi_mass: eta.pi_mass,
        pi_star_grid_mass: pi.mass,
        decay,
    };
    out.write_json("stationary.json", &summary)?;
    Ok(())
}

pub fn doeblin(cfg: &RunConfig, seed: u64, out: &OutDir) -> Result<()> {
    let model = build_model(cfg)?;
    let markov = adder_markov(model)?;
    let d = &cfg.doeblin;
    let m = doeblin_minorant(&markov, &d.cfg)?;
    out.write("minorant.csv", |w| Ok(m.nu.write_csv(&mut *w)?))?;
    out.write("minorant.json", |w| Ok(m.nu.write_header_json(&mut *w)?))?;
    out.write_json("doeblin_constants.json", &m.constants)?;
    if d.mc_samples == 0 {
        return Ok(());
    }
    let mut checks: Vec<MinorantCheck> = Vec::new();
    for (i, &x0) in d.mc_x0.iter().enumerate() {
        let est = skeleton_density(
            &markov,
            x0,
            m.constants.delta,
            d.cfg.q,
            d.cfg.grid,
            d.mc_samples,
            seed.wrapping_add(i as u64),
        )?;
        checks.push(compare_minorant(&m.nu, &est, d.mc_slack)?);
    }
    out.write_json("doeblin_check.json", &checks)?;
    if let Some(bad) = checks.iter().find(|c| !c.pass) {
        return Err(CheckFailed(format!(
            "minorant exceeds the Monte Carlo estimate from {} ({} cells, worst excess {:e} at {})",
            bad.x0, bad.violations, bad.worst_excess, bad.worst_cell
        ))
        .into());
    }
    Ok(())
}

pub fn drift(cfg: &RunConfig, out: &OutDir) -> Result<()> {
    let model = build_model(cfg)?;
    let d = &cfg.drift;
    let report = check_adder_drift(model, d.domain, d.n, d.d_scale)?;
    out.write_json("drift.json", &report)?;
    if !report.pass {
        return Err(CheckFailed(format!(
            "drift violated at {} points (worst margin {:e} at {})",
            report.violations, report.worst_margin, report.worst_point
        ))
        .into());
    }
    Ok(())
}
