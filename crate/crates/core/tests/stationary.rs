use std::sync::Arc;

use malthus_core::model::{
    kernel_minoration_epsilon, make_adder, BoxDomain, Fragmentation, Hazard, ModelSpec, PhasePoint,
};
use malthus_core::simulate::{simulate_population, SimConfig};
use malthus_core::stationary::{
    adder_markov, check_adder_drift, default_v, doeblin_minorant, ergodicity_report, solve_eta_star,
    stationary_target, weighted_tv, CellGrid, Density2D, DoeblinConfig, ErgodicityOptions, EtaStarOptions,
};

fn adder(fr: Fragmentation, d0: f64) -> Arc<ModelSpec> {
    Arc::new(make_adder(1.0, Hazard::constant(1.0), fr, d0))
}

#[test]
fn birth_size_profile_is_a_nonnegative_fixed_point() {
    let eta = solve_eta_star(&Hazard::constant(1.0), &Fragmentation::beta(5.0, 5.0).unwrap(), &EtaStarOptions::default())
        .unwrap();
    assert!(eta.eta.iter().all(|&v| v >= 0.0));
    assert!(eta.residual < 1e-8, "{}", eta.residual);
    assert!((eta.pi_mass - 1.0).abs() < 1e-9);
    // no mass at the ends: tiny newborns are rare and the tail is thin
    let peak = eta.eta.iter().cloned().fold(0.0, f64::max);
    assert!(eta.eta_at(0.01) < 1e-3 * peak);
    assert!(eta.eta[eta.eta.len() - 1] < 1e-3 * peak);
}

/// `g(m) = int_m^inf e^{-u} / u^2 du` at every node `m_k > 0`, by composite
/// Simpson between consecutive nodes plus the tail past the last one.
fn tail_integrals(nodes: &[f64]) -> Vec<f64> {
    let f = |u: f64| (-u).exp() / (u * u);
    let n = nodes.len();
    let last = nodes[n - 1];
    let mut g = vec![0.0; n];
    // e^{-u}/u^2 ~ e^{-M}/M^2 (1 - 2/M + ...) past M
    g[n - 1] = f(last) / (1.0 + 2.0 / last);
    for k in (1..n - 1).rev() {
        let (lo, hi) = (nodes[k], nodes[k + 1]);
        let m = 64;
        let h = (hi - lo) / m as f64;
        let s: f64 = (0..=m)
            .map(|i| {
                let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                w * f(lo + i as f64 * h)
            })
            .sum();
        g[k] = g[k + 1] + s * h / 3.0;
    }
    g
}

#[test]
fn uniform_profile_matches_brute_force_and_closed_form() {
    // unit hazard: added size A ~ Exp(1); uniform kernel: child density
    // along the size-weighted lineage is 2 y / u^2 on (0, u)
    let y_max = 20.0;
    let n = 2048;
    let h = y_max / n as f64;
    let y: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
    let g = tail_integrals(&y);
    let w: Vec<f64> = (0..=n).map(|i| if i == 0 || i == n { 0.5 * h } else { h }).collect();
    let mut eta = vec![1.0; n + 1];
    eta[0] = 0.0;
    for _ in 0..80 {
        let mut next = vec![0.0; n + 1];
        for i in 1..=n {
            // newborn z = y_j divides at u = z + A >= max(z, y_i)
            let s: f64 = (1..=n).map(|j| w[j] * eta[j] * y[j].exp() * g[i.max(j)]).sum();
            next[i] = 2.0 * y[i] * s;
        }
        let mass: f64 = next.iter().zip(&w).map(|(v, w)| v * w).sum();
        eta = next.into_iter().map(|v| v / mass).collect();
    }

    // closed form: z e^{-z} is a fixed point (integrate z g(z) by parts)
    let exact = |z: f64| z * (-z).exp();
    let peak = (-1f64).exp();
    let brute_err = y.iter().zip(&eta).map(|(&z, &b)| (b - exact(z)).abs()).fold(0.0, f64::max);
    assert!(brute_err < 1e-4 * peak, "brute force off the closed form by {brute_err}");

    let opts = EtaStarOptions { n: 2048, y_max, ..Default::default() };
    let solved = solve_eta_star(&Hazard::constant(1.0), &Fragmentation::uniform(), &opts).unwrap();
    let hs = y_max / (solved.y.len() - 1) as f64;
    let last = solved.eta.len() - 1;
    let mass: f64 =
        solved.eta.iter().enumerate().map(|(i, v)| if i == 0 || i == last { 0.5 * v } else { *v }).sum::<f64>() * hs;
    let worst = y.iter().zip(&eta).map(|(&z, &b)| (solved.eta_at(z) / mass - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-4 * peak, "solver off the brute force by {worst}");
}

#[test]
fn stationary_density_vanishes_off_the_cone_and_solves_transport() {
    let eta = solve_eta_star(&Hazard::constant(1.0), &Fragmentation::beta(5.0, 5.0).unwrap(), &EtaStarOptions::default())
        .unwrap();
    for &(a, y) in &[(1.0, 1.0), (2.0, 1.5), (0.5, 0.1)] {
        assert_eq!(eta.pi_star(PhasePoint::new(a, y)), 0.0);
    }
    // along the flow direction (1, 1) the birth size y - a is constant:
    // lambda d/ds (y^2 pi*) + lambda B S(a) eta*(y - a) = 0
    let lambda = 1.0;
    let s = 1e-5;
    for &(a, y) in &[(0.2, 1.1), (0.5, 1.6), (1.0, 2.2), (1.5, 2.0)] {
        let q = |t: f64| {
            let p = PhasePoint::new(a + t, y + t);
            p.y * p.y * eta.pi_star(p)
        };
        let transport = lambda * (q(s) - q(-s)) / (2.0 * s);
        let loss = lambda * 1.0 * eta.hazard().survival(a).unwrap() * eta.eta_at(y - a);
        assert!((transport + loss).abs() < 1e-6 * (1.0 + loss), "({a}, {y}): {transport} + {loss}");
    }
}

#[test]
fn weighted_tv_examples() {
    let grid = CellGrid::new((0.0, 2.0), (0.0, 4.0), 8, 8);
    let u = Density2D::from_centres(grid, |x| (-x.y).exp() * (1.0 + x.a));
    assert_eq!(weighted_tv(&u, &u, &default_v).unwrap(), 0.0);

    let mut p = Density2D::zeros(grid);
    let mut q = Density2D::zeros(grid);
    let (xp, xq) = (PhasePoint::new(0.1, 1.1), PhasePoint::new(1.3, 3.1));
    p.add_point_mass(xp, 0.7);
    q.add_point_mass(xq, 0.4);
    let d = weighted_tv(&p, &q, &default_v).unwrap();
    let cp = p.cell_of(xp).unwrap();
    let cq = q.cell_of(xq).unwrap();
    let expect = 0.7 * (1.0 + default_v(p.centre_of(cp))) + 0.4 * (1.0 + default_v(q.centre_of(cq)));
    assert!((d - expect).abs() < 1e-12, "{d} vs {expect}");

    let zero = Density2D::zeros(grid);
    let base = weighted_tv(&u, &zero, &default_v).unwrap();
    for &k in &[0.5, 2.0, 10.0] {
        let mut v = u.clone();
        v.scale(k);
        assert!((weighted_tv(&v, &zero, &default_v).unwrap() - k * base).abs() < 1e-12 * k * base);
    }
}

#[test]
fn uniform_drift_constants() {
    let m = adder(Fragmentation::uniform(), 0.0);
    let r = check_adder_drift(m, BoxDomain { a: (0.0, 10.0), y: (0.0, 10.0) }, 32, 1.0).unwrap();
    assert_eq!(r.c, 1.0);
    assert!((r.d - 4.0).abs() < 1e-12, "{}", r.d);
    assert!(r.pass, "{r:?}");
}

#[test]
fn h_transform_is_conservative() {
    let m = adder(Fragmentation::beta(5.0, 5.0).unwrap(), 0.2);
    let markov = adder_markov(m.clone()).unwrap();
    for &(a, y) in &[(0.0, 0.5), (0.4, 1.0), (1.5, 3.0), (3.0, 7.5)] {
        let x = PhasePoint::new(a, y);
        let a1 = markov.generator(&|_| 1.0, x).unwrap();
        assert!(a1.abs() < 1e-9, "A1 at ({a}, {y}) = {a1}");
        let qy = m.generator(&|p: PhasePoint| p.y, x);
        assert!((qy - 0.8 * y).abs() < 1e-6 * y, "Qy at ({a}, {y}) = {qy}");
    }
}

#[test]
fn uniform_kernel_minoration() {
    let fr = Fragmentation::uniform();
    for &(z, delta) in &[(0.5, 0.7), (1.0, 2f64.ln()), (2.0, 0.1)] {
        let e = kernel_minoration_epsilon(&fr, z, delta);
        assert!((e - 1.0 / (2.0 * z + delta)).abs() < 1e-12, "{e}");
    }
}

#[test]
fn minorant_is_positive_and_shrinks_with_concentration() {
    let cfg = DoeblinConfig::default();
    let masses: Vec<f64> = [Fragmentation::uniform(), Fragmentation::beta(5.0, 5.0).unwrap()]
        .into_iter()
        .map(|fr| {
            let markov = adder_markov(adder(fr, 0.0)).unwrap();
            let m = doeblin_minorant(&markov, &cfg).unwrap();
            assert!(!m.empty);
            assert!(m.nu.values.iter().all(|&v| v >= 0.0));
            m.nu.mass
        })
        .collect();
    assert!(masses[1] > 0.0 && masses[1] < masses[0], "{masses:?}");
}

#[test]
fn rescaled_population_approaches_the_stationary_profile() {
    let m = adder(Fragmentation::beta(5.0, 5.0).unwrap(), 0.2);
    let x0 = PhasePoint::new(0.0, 1.0);
    let cfg = SimConfig { seed: 404, t_end: 3.0, replicates: 500, record_times: vec![1.0, 2.0, 3.0], ..Default::default() };
    let trajs = simulate_population(m, x0, &cfg).unwrap();
    let eta = solve_eta_star(&Hazard::constant(1.0), &Fragmentation::beta(5.0, 5.0).unwrap(), &EtaStarOptions::default())
        .unwrap();
    let opts = ErgodicityOptions { n_boot: 20, ..Default::default() };
    let target = stationary_target(&eta, opts.grid);
    let report = ergodicity_report(&trajs, x0, &|p| p.y, 0.8, &target, &default_v, &opts).unwrap();
    let d: Vec<f64> = report.rows.iter().map(|r| r.distance).collect();
    assert!(d.windows(2).all(|w| w[1] < w[0]), "{d:?}");
    assert!(report.omega_hat > 0.0);
}
