//! Foster–Lyapunov drift `A V <= -c V + d` for the h-transformed adder.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{h_transform, BoxDomain, MarkovModel, ModelSpec, PhasePoint};
use crate::quadrature::linspace;

use super::density::default_v;

#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    pub c: f64,
    pub d: f64,
    pub worst_point: PhasePoint,
    /// `max (A V + c V - d)` over the grid.
    pub worst_margin: f64,
    pub violations: usize,
    pub points: usize,
    pub pass: bool,
}

/// Grid over the box: `n` ages including both ends, `n` sizes excluding the
/// lower end when it is 0 (where `V` blows up).
pub fn drift_grid(domain: BoxDomain, n: usize) -> Vec<PhasePoint> {
    let ages = linspace(domain.a.0, domain.a.1, n);
    let sizes: Vec<f64> = if domain.y.0 > 0.0 {
        linspace(domain.y.0, domain.y.1, n)
    } else {
        linspace(domain.y.0, domain.y.1, n + 1)[1..].to_vec()
    };
    sizes
        .iter()
        .flat_map(|&y| ages.iter().map(move |&a| PhasePoint::new(a, y)))
        .collect()
}

/// Checks `A V(x) + c V(x) <= d` at every grid point, with `A` the generator
/// of the h-transformed process.
pub fn check_drift(
    markov: &MarkovModel,
    v: &dyn Fn(PhasePoint) -> f64,
    c: f64,
    d: f64,
    points: &[PhasePoint],
) -> Result<DriftReport> {
    let mut worst = (f64::NEG_INFINITY, PhasePoint::new(0.0, 0.0));
    let mut violations = 0;
    let tol = 1e-8 * (1.0 + d.abs());
    for &x in points {
        let margin = markov.generator(v, x)? + c * v(x) - d;
        if margin > tol {
            violations += 1;
        }
        if margin > worst.0 {
            worst = (margin, x);
        }
    }
    Ok(DriftReport {
        c,
        d,
        worst_point: worst.1,
        worst_margin: worst.0,
        violations,
        points: points.len(),
        pass: worst.0 <= tol,
    })
}

/// `(c, d) = (lambda, lambda (b + 1 / (b (1 - 2 m2))))` for `V = 1/y + y`,
/// with `b` the largest hazard value over the ages of the grid.
pub fn adder_drift_constants(model: &ModelSpec, points: &[PhasePoint]) -> Result<(f64, f64)> {
    let lambda = model
        .lambda_growth()
        .ok_or_else(|| Error::InvalidModel("drift constants need adder growth".into()))?;
    let m2 = model
        .moments()
        .ok_or_else(|| Error::InvalidModel("drift constants need a fragmentation kernel".into()))?[2];
    let b = points
        .iter()
        .map(|&x| model.hazard_rate(x))
        .fold(0.0f64, f64::max);
    if !(b > 0.0) || !(1.0 - 2.0 * m2 > 0.0) {
        return Err(Error::InvalidModel(format!("degenerate drift constants: b = {b}, m2 = {m2}")));
    }
    Ok((lambda, lambda * (b + 1.0 / (b * (1.0 - 2.0 * m2)))))
}

/// The adder with `h = y`, `Lambda = lambda - d0` and `V = 1/y + y`.
pub fn adder_markov(model: Arc<ModelSpec>) -> Result<MarkovModel> {
    let lambda = model
        .lambda_growth()
        .ok_or_else(|| Error::InvalidModel("adder growth required".into()))?;
    let big_lambda = lambda - model.d0;
    Ok(h_transform(model, Arc::new(|x: PhasePoint| x.y), big_lambda))
}

/// Drift check of the adder on an `n x n` grid over `domain`, with `d`
/// scaled by `d_scale` (1 for the nominal bound).
pub fn check_adder_drift(model: Arc<ModelSpec>, domain: BoxDomain, n: usize, d_scale: f64) -> Result<DriftReport> {
    let points = drift_grid(domain, n);
    let (c, d) = adder_drift_constants(&model, &points)?;
    let markov = adder_markov(model)?;
    check_drift(&markov, &default_v, c, d * d_scale, &points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_adder, Fragmentation, Hazard};

    #[test]
    fn grid_skips_zero_size() {
        let g = drift_grid(BoxDomain { a: (0.0, 10.0), y: (0.0, 10.0) }, 64);
        assert_eq!(g.len(), 64 * 64);
        assert!(g.iter().all(|p| p.y > 0.0));
    }

    #[test]
    fn beta_constants() {
        let m = make_adder(1.0, Hazard::constant(1.0), Fragmentation::beta(5.0, 5.0).unwrap(), 0.0);
        let (c, d) = adder_drift_constants(&m, &[PhasePoint::new(0.0, 1.0)]).unwrap();
        assert_eq!(c, 1.0);
        assert!((d - 3.2).abs() < 1e-12);
    }
}
