use std::sync::Arc;

use approx::assert_relative_eq;
use malthus_core::eigen::{reconstruct_h, solve_malthus, spectral_value};
use malthus_core::model::{make_adder, Fragmentation, Hazard, ModelSpec, PhasePoint};
use malthus_core::quadrature::{linspace, Rule};
use malthus_core::renewal::{FirstJumpLaw, RenewalOperator, SizeGrid};

fn adder() -> Arc<ModelSpec> {
    Arc::new(make_adder(1.0, Hazard::constant(1.0), Fragmentation::beta(5.0, 5.0).unwrap(), 0.0))
}

#[test]
fn first_jump_density_is_a_probability_density() {
    let law = FirstJumpLaw::new(adder());
    let x = PhasePoint::new(0.0, 1.0);
    // survival exp(-(e^t - 1)) is below 1e-20 by t = 4
    let rt = Rule::uniform(0.0, 4.0, 48, 8);
    let mut total = 0.0;
    for (&t, &wt) in rt.nodes.iter().zip(&rt.weights) {
        let rz = Rule::uniform(0.0, t.exp(), 12, 8);
        total += wt * rz.integrate(|z| law.first_jump_density(x, t, z).unwrap());
    }
    assert!((total - 1.0).abs() < 1e-6, "{total}");
    // no newborn larger than the parent at the jump time
    let t: f64 = 0.5;
    assert_eq!(law.first_jump_density(x, t, t.exp() + 1e-9).unwrap(), 0.0);
    assert_eq!(law.first_jump_density(x, t, -0.1).unwrap(), 0.0);
}

#[test]
fn adder_offspring_constant_is_two() {
    let law = FirstJumpLaw::new(adder());
    for &(a, y) in &[(0.0, 0.2), (0.0, 1.0), (0.7, 2.5), (2.0, 6.0)] {
        let c = law.offspring_constant(PhasePoint::new(a, y)).unwrap();
        assert!((c - 2.0).abs() < 1e-6, "C at ({a}, {y}) = {c}");
    }
}

#[test]
fn discounted_kernel_at_zero_rate_carries_the_offspring_mass() {
    let law = FirstJumpLaw::new(adder());
    let x = PhasePoint::new(0.0, 1.0);
    let breaks = linspace(0.0, 30.0, 121);
    let mass = Rule::panels(&breaks, 8).integrate(|z| law.kernel_k(x, z, 0.0).unwrap());
    let c = law.offspring_constant(x).unwrap();
    assert!((mass - c).abs() < 1e-6, "{mass} vs {c}");
}

#[test]
fn discounted_kernel_decreases_in_the_rate() {
    let law = FirstJumpLaw::new(adder());
    let x = PhasePoint::new(0.3, 1.2);
    for &z in &[0.2, 0.6, 1.0, 1.7, 3.0] {
        let k: Vec<f64> = [0.0, 0.5, 1.0].iter().map(|&l| law.kernel_k(x, z, l).unwrap()).collect();
        assert!(k[0] > k[1] && k[1] > k[2], "z = {z}: {k:?}");
    }
}

#[test]
fn discounted_kernel_matches_added_size_integral() {
    // in the added-size variable: division at size u > 1 with density
    // e^{-(u - 1)}, newborn density (2 / u) F(z / u)
    let fr = Fragmentation::beta(5.0, 5.0).unwrap();
    let law = FirstJumpLaw::new(adder());
    let x = PhasePoint::new(0.0, 1.0);
    for z in [0.1f64, 0.5, 0.9, 1.4, 2.5] {
        let lo = z.max(1.0);
        let hi = 45.0;
        let n = 400_000;
        let h = (hi - lo) / n as f64;
        let brute: f64 = (0..n)
            .map(|i| {
                let u = lo + (i as f64 + 0.5) * h;
                2.0 * fr.density(z / u) / u * (-(u - 1.0)).exp() * h
            })
            .sum();
        let k = law.kernel_k(x, z, 0.0).unwrap();
        assert!((k - brute).abs() < 1e-7 * (1.0 + brute), "z = {z}: {k} vs {brute}");
    }
}

#[test]
fn truncated_operator_bounds_and_linearity() {
    let op = RenewalOperator::new(adder(), SizeGrid::uniform(8.0, 128));
    let m = op.matrix(0.0).unwrap();
    let n = m.n();
    let g1 = m.apply(&vec![1.0; n]);
    assert!(g1.iter().all(|&v| v > 1.0 && v <= 2.0 + 1e-9), "{:?}", &g1[..4]);

    let f: Vec<f64> = (0..n).map(|i| 0.1 + ((i * 37) % 11) as f64).collect();
    let g: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64).sin().abs()).collect();
    let gf = m.apply(&f);
    assert!(gf.iter().all(|&v| v > 0.0));
    let alpha = 2.5;
    let combo: Vec<f64> = f.iter().zip(&g).map(|(a, b)| alpha * a + b).collect();
    let lhs = m.apply(&combo);
    let gg = m.apply(&g);
    for i in 0..n {
        assert_relative_eq!(lhs[i], alpha * gf[i] + gg[i], max_relative = 1e-13);
    }
}

#[test]
fn spectral_value_brackets_the_growth_rate() {
    let op = RenewalOperator::new(adder(), SizeGrid::uniform(8.0, 512));
    assert!(spectral_value(&op, 0.0).unwrap() > 1.0);
    let mu1 = spectral_value(&op, 1.0).unwrap();
    assert!((mu1 - 1.0).abs() < 1e-3, "{mu1}");
    assert!(spectral_value(&op, 50.0).unwrap() < 1.0);
}

#[test]
fn solution_satisfies_euler_lotka_and_reconstructs_eta() {
    // at R = 8 the truncated lineage law still bends the residual by ~1e-5
    let op = RenewalOperator::new(adder(), SizeGrid::uniform(16.0, 512));
    let res = solve_malthus(&op, (0.5, 1.5)).unwrap();
    assert!(res.lambda_r > 0.99 && res.lambda_r <= 1.0, "{}", res.lambda_r);
    assert_eq!(res.eta_at(1.0), Some(1.0));
    for &y in &[0.5, 1.0, 2.0, 3.0, 5.0] {
        let el = op.law.euler_lotka_residual(res.lambda_r, y, 16.0).unwrap();
        assert!(el.abs() < 1e-6, "y = {y}: {el}");
    }
    // boundary values of the reconstruction are the eigenvector itself
    for &y in &[0.25, 1.0, 2.5, 6.0] {
        let h = reconstruct_h(&op, &res, PhasePoint::new(0.0, y)).unwrap();
        let e = res.eta_at(y).unwrap();
        assert!((h - e).abs() < 1e-6 * e.max(1.0), "y = {y}: {h} vs {e}");
        assert!((h / y - 1.0).abs() < 1e-3, "y = {y}: h/y = {}", h / y);
    }
}

#[test]
fn euler_lotka_residual_profile() {
    let law = FirstJumpLaw::new(adder());
    // C - 1 at zero rate
    let r0 = law.euler_lotka_residual(0.0, 1.3, 16.0).unwrap();
    assert!((r0 - 1.0).abs() < 1e-6, "{r0}");
    let vals: Vec<f64> = linspace(0.0, 2.0, 5).iter().map(|&l| law.euler_lotka_residual(l, 1.3, 16.0).unwrap()).collect();
    assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
    // exact eigenpair of the untruncated problem
    let at_one = law.euler_lotka_residual(1.0, 1.3, 16.0).unwrap();
    assert!(at_one.abs() < 1e-5, "{at_one}");
}
