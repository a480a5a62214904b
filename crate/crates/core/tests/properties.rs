use std::sync::Arc;

use malthus_core::flow::FlowEngine;
use malthus_core::model::{make_adder, Fragmentation, Hazard, ModelSpec, PhasePoint};
use malthus_core::simulate::{simulate_population, SimConfig};
use proptest::prelude::*;

fn adder(lambda: f64) -> Arc<ModelSpec> {
    Arc::new(make_adder(lambda, Hazard::constant(1.0), Fragmentation::beta(5.0, 5.0).unwrap(), 0.0))
}

fn point() -> impl Strategy<Value = PhasePoint> {
    (0.0..5.0f64, 0.05..8.0f64).prop_map(|(a, y)| PhasePoint::new(a, y))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_forward_then_back(x in point(), t in 0.0..3.0f64, lambda in 0.2..2.0f64) {
        let f = FlowEngine::new(adder(lambda));
        let fwd = f.advance(x, t).unwrap();
        let back = f.advance(fwd, -t).unwrap();
        prop_assert!((back.a - x.a).abs() < 1e-9 * (1.0 + x.a));
        prop_assert!((back.y - x.y).abs() < 1e-9 * x.y);
        // hitting times recover the elapsed time
        prop_assert!((f.time_to_size(x, fwd.y).unwrap() - t).abs() < 1e-9);
        prop_assert!((f.transit_time(x, fwd).unwrap() - t).abs() < 1e-8);
    }

    #[test]
    fn orbit_origin_flows_back_to_the_point(a in 0.0..5.0f64, z in 0.05..4.0f64, lambda in 0.2..2.0f64) {
        // born at size z, so y - a = z > 0 along the whole orbit
        let x = PhasePoint::new(a, a + z);
        let f = FlowEngine::new(adder(lambda));
        prop_assert!(f.orbit_origin(PhasePoint::new(a + z, z)).is_err());
        let (o, t) = f.orbit_origin(x).unwrap();
        prop_assert_eq!(o.a, 0.0);
        prop_assert!(t >= 0.0);
        let x1 = f.advance(o, t).unwrap();
        prop_assert!((x1.a - x.a).abs() < 1e-9 * (1.0 + x.a));
        prop_assert!((x1.y - x.y).abs() < 1e-9 * x.y);
    }

    #[test]
    fn jacobian_matches_finite_differences(x in point(), t in 0.0..2.0f64) {
        let f = FlowEngine::new(adder(1.0));
        let j = f.flow_jacobian(x, t).unwrap();
        let h = 1e-6;
        let d = |da: f64, dy: f64| {
            let p = f.advance(PhasePoint::new(x.a + da, x.y + dy), t).unwrap();
            let m = f.advance(PhasePoint::new(x.a - da, x.y - dy), t).unwrap();
            [(p.a - m.a) / (2.0 * h), (p.y - m.y) / (2.0 * h)]
        };
        let cols = [d(h, 0.0), d(0.0, h)];
        for (c, col) in cols.iter().enumerate() {
            for r in 0..2 {
                let e = j.0[r][c];
                prop_assert!((e - col[r]).abs() < 1e-5 * (1.0 + e.abs()), "J[{}][{}] = {} vs {}", r, c, e, col[r]);
            }
        }
    }

    #[test]
    fn numeric_flow_matches_the_closed_form(x in point(), t in 0.0..2.0f64, lambda in 0.2..2.0f64) {
        let m = adder(lambda);
        let closed = FlowEngine::new(m.clone()).advance(x, t).unwrap();
        let numeric = FlowEngine::numeric(m).advance(x, t).unwrap();
        prop_assert!((closed.a - numeric.a).abs() < 1e-8 * (1.0 + closed.a));
        prop_assert!((closed.y - numeric.y).abs() < 1e-8 * closed.y);
    }

    #[test]
    fn inverse_cumulative_hazard_round_trip(level in 0.0..30.0f64, b in prop::collection::vec(0.05..3.0f64, 4)) {
        let hz = Hazard::table(vec![0.0, 0.7, 1.5, 4.0], b).unwrap();
        let a = hz.inverse_cumulative(level).unwrap();
        prop_assert!((hz.cumulative(a).unwrap() - level).abs() < 1e-9 * (1.0 + level));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn divisions_conserve_total_size(y0 in 0.2..3.0f64, seed in any::<u64>()) {
        let cfg = SimConfig { seed, t_end: 2.0, replicates: 3, ..Default::default() };
        let trajs = simulate_population(adder(1.0), PhasePoint::new(0.0, y0), &cfg).unwrap();
        for tr in &trajs {
            for s in &tr.states {
                let total: f64 = s.individuals.iter().map(|p| p.y).sum();
                prop_assert!((total / (y0 * s.t.exp()) - 1.0).abs() < 1e-12);
            }
        }
    }
}
