//! Gauss–Legendre panel rules and a few 1-D helpers shared by the kernels.

use std::num::NonZeroUsize;
use std::sync::OnceLock;

use gauss_quad::legendre::GaussLegendre;

const MAX_CACHED_ORDER: usize = 32;

fn reference_rule(order: usize) -> &'static [(f64, f64)] {
    static CACHE: OnceLock<Vec<Vec<(f64, f64)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| {
        (0..=MAX_CACHED_ORDER)
            .map(|n| match NonZeroUsize::new(n) {
                Some(n) if n.get() >= 2 => {
                    let mut pairs = GaussLegendre::new(n).as_node_weight_pairs().to_vec();
                    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
                    pairs
                }
                // one-point rule is the midpoint rule
                Some(_) => vec![(0.0, 2.0)],
                None => Vec::new(),
            })
            .collect()
    });
    assert!(
        (1..=MAX_CACHED_ORDER).contains(&order),
        "Gauss-Legendre order {order} not supported"
    );
    &cache[order]
}

/// Nodes and weights of a composite rule.
#[derive(Debug, Clone, Default)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    /// Composite Gauss–Legendre rule over consecutive breakpoints.
    pub fn panels(breaks: &[f64], order: usize) -> Self {
        let base = reference_rule(order);
        let mut nodes = Vec::with_capacity(breaks.len().saturating_sub(1) * order);
        let mut weights = Vec::with_capacity(nodes.capacity());
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (b + a);
            for &(x, wt) in base {
                nodes.push(mid + half * x);
                weights.push(half * wt);
            }
        }
        Self { nodes, weights }
    }

    pub fn uniform(a: f64, b: f64, n_panels: usize, order: usize) -> Self {
        Self::panels(&linspace(a, b, n_panels + 1), order)
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => {
            let step = (b - a) / (n - 1) as f64;
            let mut v: Vec<f64> = (0..n).map(|i| a + step * i as f64).collect();
            v[n - 1] = b;
            v
        }
    }
}

/// Composite Gauss–Legendre integral of `f` on `[a, b]`.
pub fn integrate(f: impl FnMut(f64) -> f64, a: f64, b: f64, n_panels: usize, order: usize) -> f64 {
    if b == a {
        return 0.0;
    }
    if b < a {
        return -integrate(f, b, a, n_panels, order);
    }
    Rule::uniform(a, b, n_panels, order).integrate(f)
}

/// Merge two sorted breakpoint lists, dropping near-duplicates.
pub fn merge_breaks(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().filter(|x| x.is_finite()).collect();
    all.sort_by(f64::total_cmp);
    let span = all.last().copied().unwrap_or(0.0) - all.first().copied().unwrap_or(0.0);
    let eps = 1e-12 * span.max(1e-300);
    let mut out: Vec<f64> = Vec::with_capacity(all.len());
    for x in all {
        if out.last().is_none_or(|&l| x - l > eps) {
            out.push(x);
        }
    }
    out
}

/// Linear interpolation on a sorted table with flat extrapolation.
pub fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = xs.partition_point(|&v| v <= x).saturating_sub(1);
    let (x0, x1) = (xs[i], xs[i + 1]);
    let t = (x - x0) / (x1 - x0);
    ys[i] + t * (ys[i + 1] - ys[i])
}
