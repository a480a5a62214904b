//! Structured-population models: growth field, age hazard, offspring kernel.
//!
//! A state is `(a, y)`: age (added size for the adder) and size. Divisions
//! happen at rate `beta = g1 * B`, newborns start at `(0, z)` with `z` drawn
//! from the kernel `k(x, .)`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{self, interp_linear, Rule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub a: f64,
    pub y: f64,
}

impl PhasePoint {
    pub const fn new(a: f64, y: f64) -> Self {
        Self { a, y }
    }
}

impl fmt::Display for PhasePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.a, self.y)
    }
}

pub type Field = Arc<dyn Fn(PhasePoint) -> f64 + Send + Sync>;
pub type KernelFn = Arc<dyn Fn(PhasePoint, f64) -> f64 + Send + Sync>;
pub type SupportFn = Arc<dyn Fn(PhasePoint) -> (f64, f64) + Send + Sync>;
pub type JacobianFn = Arc<dyn Fn(PhasePoint) -> [[f64; 2]; 2] + Send + Sync>;

/// Cumulative hazard level at which survival drops below 1e-12.
pub const HAZARD_HORIZON: f64 = 27.631021115928547;

// ---------------------------------------------------------------------------
// Growth

#[derive(Clone)]
pub enum Growth {
    /// `g = (lambda y, lambda y)`.
    Adder { lambda: f64 },
    Field {
        g1: Field,
        g2: Field,
        /// Closed-form `Dg`; central differences when absent.
        jacobian: Option<JacobianFn>,
    },
}

// ---------------------------------------------------------------------------
// Hazard

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum HazardSpec {
    Constant {
        b: f64,
    },
    Table {
        a: Vec<f64>,
        #[serde(rename = "B")]
        b: Vec<f64>,
    },
}

#[derive(Clone)]
enum HazardKind {
    Constant(f64),
    /// Piecewise-linear in age with flat extrapolation; `cum[i]` is the
    /// integral of the interpolant from `a[0]` to `a[i]`.
    Table { a: Vec<f64>, b: Vec<f64>, cum: Vec<f64> },
    Field(Field),
}

/// Age hazard `B`, identically zero up to the minimal division age.
#[derive(Clone)]
pub struct Hazard {
    kind: HazardKind,
    a_star: f64,
    offset: f64,
}

impl Hazard {
    pub fn constant(b: f64) -> Self {
        Self::with_kind(HazardKind::Constant(b), 0.0)
    }

    pub fn table(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() || a.len() < 2 {
            return Err(Error::InvalidModel(
                "hazard table needs matching `a` and `B` arrays of length >= 2".into(),
            ));
        }
        if a.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidModel("hazard table ages must increase".into()));
        }
        if b.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidModel("hazard table values must be >= 0".into()));
        }
        let mut cum = vec![0.0; a.len()];
        for i in 1..a.len() {
            cum[i] = cum[i - 1] + 0.5 * (b[i] + b[i - 1]) * (a[i] - a[i - 1]);
        }
        Ok(Self::with_kind(HazardKind::Table { a, b, cum }, 0.0))
    }

    /// Hazard depending on both age and size; no cumulative closed form.
    pub fn field(f: Field) -> Self {
        Self::with_kind(HazardKind::Field(f), 0.0)
    }

    pub fn from_spec(spec: &HazardSpec) -> Result<Self> {
        match spec {
            HazardSpec::Constant { b } => Ok(Self::constant(*b)),
            HazardSpec::Table { a, b } => Self::table(a.clone(), b.clone()),
        }
    }

    pub fn with_a_star(mut self, a_star: f64) -> Self {
        self.a_star = a_star.max(0.0);
        self.offset = self.raw_cum(self.a_star).unwrap_or(0.0);
        self
    }

    fn with_kind(kind: HazardKind, a_star: f64) -> Self {
        Self { kind, a_star: 0.0, offset: 0.0 }.with_a_star(a_star)
    }

    pub fn a_star(&self) -> f64 {
        self.a_star
    }

    /// True when `B` depends on age only, so survival has a closed form in
    /// the added-size variable.
    pub fn is_age_only(&self) -> bool {
        !matches!(self.kind, HazardKind::Field(_))
    }

    /// Zero strictly before `a_star` and on it when `a_star > 0`; with
    /// `a_star = 0` the hazard is taken right-continuous at birth.
    pub fn rate(&self, x: PhasePoint) -> f64 {
        if x.a < self.a_star || (self.a_star > 0.0 && x.a <= self.a_star) || x.a < 0.0 {
            return 0.0;
        }
        match &self.kind {
            HazardKind::Constant(b) => *b,
            HazardKind::Table { a, b, .. } => interp_linear(a, b, x.a),
            HazardKind::Field(f) => f(x),
        }
    }

    /// Integral of the raw (un-clipped) interpolant from 0 to `x`.
    fn raw_cum(&self, x: f64) -> Option<f64> {
        match &self.kind {
            HazardKind::Constant(b) => Some(b * x),
            HazardKind::Table { a, b, cum } => {
                let n = a.len();
                let head = b[0] * a[0].max(0.0);
                if x <= a[0] {
                    return Some(b[0] * x);
                }
                if x >= a[n - 1] {
                    return Some(head + cum[n - 1] + b[n - 1] * (x - a[n - 1]));
                }
                let i = a.partition_point(|&v| v <= x) - 1;
                let h = x - a[i];
                let slope = (b[i + 1] - b[i]) / (a[i + 1] - a[i]);
                Some(head + cum[i] + b[i] * h + 0.5 * slope * h * h)
            }
            HazardKind::Field(_) => None,
        }
    }

    /// `H(a) = int_0^a B`; `None` for size-dependent hazards.
    pub fn cumulative(&self, a: f64) -> Option<f64> {
        if a <= self.a_star {
            return if self.is_age_only() { Some(0.0) } else { None };
        }
        self.raw_cum(a).map(|v| v - self.offset)
    }

    pub fn survival(&self, a: f64) -> Option<f64> {
        self.cumulative(a).map(|h| (-h).exp())
    }

    /// Smallest `a` with `H(a) = level`.
    pub fn inverse_cumulative(&self, level: f64) -> Option<f64> {
        if !self.is_age_only() {
            return None;
        }
        if level <= 0.0 {
            return Some(self.a_star);
        }
        match &self.kind {
            HazardKind::Constant(b) => {
                if *b <= 0.0 {
                    None
                } else {
                    Some(self.a_star + level / b)
                }
            }
            HazardKind::Table { a, b, .. } => {
                let target = level + self.offset;
                let n = a.len();
                // bracket a segment in terms of the raw cumulative
                let knots: Vec<f64> = std::iter::once(self.a_star)
                    .chain(a.iter().copied().filter(|&v| v > self.a_star))
                    .collect();
                let mut lo = *knots.last().unwrap();
                let mut seg_start = None;
                for w in knots.windows(2) {
                    if self.raw_cum(w[1]).unwrap() >= target {
                        seg_start = Some((w[0], w[1]));
                        break;
                    }
                }
                let guess = match seg_start {
                    Some((x0, x1)) => {
                        lo = x0;
                        let c0 = self.raw_cum(x0).unwrap();
                        let b0 = interp_linear(a, b, x0);
                        let slope = (interp_linear(a, b, x1) - b0) / (x1 - x0);
                        let need = target - c0;
                        // b0 h + slope h^2 / 2 = need
                        let h = if slope.abs() < 1e-14 {
                            need / b0
                        } else {
                            let disc = (b0 * b0 + 2.0 * slope * need).max(0.0);
                            2.0 * need / (b0 + disc.sqrt())
                        };
                        (x0 + h).clamp(x0, x1)
                    }
                    None => {
                        let tail = b[n - 1];
                        if tail <= 0.0 {
                            return None;
                        }
                        lo + (target - self.raw_cum(lo).unwrap()) / tail
                    }
                };
                // Newton polish on H(a) - level
                let mut x = guess;
                for _ in 0..4 {
                    let r = self.raw_cum(x).unwrap() - target;
                    let d = interp_linear(a, b, x);
                    if d <= 0.0 || r.abs() <= 1e-15 * target.max(1.0) {
                        break;
                    }
                    x = (x - r / d).max(lo);
                }
                Some(x)
            }
            HazardKind::Field(_) => None,
        }
    }

    /// Largest and smallest hazard value beyond `a_star` on `[a_star, a_max]`.
    fn range_on(&self, a_max: f64, y: f64) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for a in quadrature::linspace(self.a_star, a_max.max(self.a_star + 1.0), 257).into_iter().skip(1) {
            let v = self.rate(PhasePoint::new(a, y));
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

impl fmt::Debug for Hazard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            HazardKind::Constant(b) => write!(f, "Hazard::Constant({b}, a*={})", self.a_star),
            HazardKind::Table { a, .. } => write!(f, "Hazard::Table({} knots, a*={})", a.len(), self.a_star),
            HazardKind::Field(_) => write!(f, "Hazard::Field(a*={})", self.a_star),
        }
    }
}

// ---------------------------------------------------------------------------
// Fragmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FragmentationSpec {
    Uniform,
    Beta {
        alpha: f64,
        beta: f64,
    },
    Table {
        rho: Vec<f64>,
        #[serde(rename = "F")]
        f: Vec<f64>,
    },
}

/// Density `F` of the size fraction `rho` inherited by a newborn.
#[derive(Debug, Clone)]
pub struct Fragmentation {
    spec: FragmentationSpec,
    ln_norm: f64,
    norm: f64,
    int_exps: Option<(i32, i32)>,
    table_cdf: Vec<f64>,
    moments: [f64; 3],
    symmetric: bool,
}

impl Fragmentation {
    pub fn uniform() -> Self {
        Self::new(FragmentationSpec::Uniform).expect("uniform density is valid")
    }

    pub fn beta(alpha: f64, beta: f64) -> Result<Self> {
        Self::new(FragmentationSpec::Beta { alpha, beta })
    }

    pub fn table(rho: Vec<f64>, f: Vec<f64>) -> Result<Self> {
        Self::new(FragmentationSpec::Table { rho, f })
    }

    pub fn new(spec: FragmentationSpec) -> Result<Self> {
        let mut ln_norm = 0.0;
        let mut int_exps = None;
        let mut table_cdf = Vec::new();
        let mut moments = [1.0, 0.5, 1.0 / 3.0];
        let spec = match spec {
            FragmentationSpec::Uniform => FragmentationSpec::Uniform,
            FragmentationSpec::Beta { alpha, beta } => {
                if !(alpha > 0.0 && beta > 0.0) {
                    return Err(Error::InvalidModel("Beta parameters must be positive".into()));
                }
                ln_norm = -statrs::function::beta::ln_beta(alpha, beta);
                if alpha.fract() == 0.0 && beta.fract() == 0.0 && alpha < 200.0 && beta < 200.0 {
                    int_exps = Some((alpha as i32 - 1, beta as i32 - 1));
                }
                let s = alpha + beta;
                moments = [1.0, alpha / s, alpha * (alpha + 1.0) / (s * (s + 1.0))];
                FragmentationSpec::Beta { alpha, beta }
            }
            FragmentationSpec::Table { rho, mut f } => {
                if rho.len() != f.len() || rho.len() < 2 {
                    return Err(Error::InvalidModel(
                        "fragmentation table needs matching `rho` and `F` arrays".into(),
                    ));
                }
                if rho.windows(2).any(|w| w[1] <= w[0]) || rho[0] < 0.0 || rho[rho.len() - 1] > 1.0 {
                    return Err(Error::InvalidModel(
                        "fragmentation table `rho` must increase inside [0, 1]".into(),
                    ));
                }
                if f.iter().any(|&v| !(v >= 0.0)) {
                    return Err(Error::InvalidModel("fragmentation density must be >= 0".into()));
                }
                let m0: f64 = rho
                    .windows(2)
                    .zip(f.windows(2))
                    .map(|(r, v)| 0.5 * (v[0] + v[1]) * (r[1] - r[0]))
                    .sum();
                // small quadrature drift is renormalised, anything else rejected
                if (m0 - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidModel(format!(
                        "(A2) fragmentation density has mass {m0}, expected 1"
                    )));
                }
                f.iter_mut().for_each(|v| *v /= m0);
                table_cdf = vec![0.0; rho.len()];
                for i in 1..rho.len() {
                    table_cdf[i] = table_cdf[i - 1] + 0.5 * (f[i] + f[i - 1]) * (rho[i] - rho[i - 1]);
                }
                // the interpolant is exactly linear between knots: Gauss rules per segment are exact
                let m = |k: i32| {
                    Rule::panels(&rho, 2).integrate(|r| r.powi(k) * out_density_table(&rho, &f, r))
                };
                moments = [m(0), m(1), m(2)];
                FragmentationSpec::Table { rho, f }
            }
        };
        let symmetric = match &spec {
            FragmentationSpec::Uniform => true,
            FragmentationSpec::Beta { alpha, beta } => alpha == beta,
            FragmentationSpec::Table { .. } => false,
        };
        Ok(Self { spec, ln_norm, norm: ln_norm.exp(), int_exps, table_cdf, moments, symmetric })
    }

    pub fn spec(&self) -> &FragmentationSpec {
        &self.spec
    }

    /// `[m0, m1, m2]`.
    pub fn moments(&self) -> [f64; 3] {
        self.moments
    }

    pub fn density(&self, rho: f64) -> f64 {
        if !(0.0..=1.0).contains(&rho) {
            return 0.0;
        }
        match &self.spec {
            FragmentationSpec::Uniform => 1.0,
            FragmentationSpec::Beta { alpha, beta } => match self.int_exps {
                Some((p, q)) => self.norm * rho.powi(p) * (1.0 - rho).powi(q),
                None => {
                    if (rho == 0.0 && *alpha < 1.0) || (rho == 1.0 && *beta < 1.0) {
                        return f64::INFINITY;
                    }
                    (self.ln_norm + (alpha - 1.0) * rho.ln() + (beta - 1.0) * (1.0 - rho).ln()).exp()
                }
            },
            FragmentationSpec::Table { rho: r, f } => out_density_table(r, f, rho),
        }
    }

    pub fn cdf(&self, rho: f64) -> f64 {
        if rho <= 0.0 {
            return 0.0;
        }
        if rho >= 1.0 {
            return 1.0;
        }
        match &self.spec {
            FragmentationSpec::Uniform => rho,
            FragmentationSpec::Beta { alpha, beta } => statrs::function::beta::beta_reg(*alpha, *beta, rho),
            FragmentationSpec::Table { rho: r, f } => {
                if rho <= r[0] {
                    return 0.0;
                }
                let n = r.len();
                if rho >= r[n - 1] {
                    return 1.0;
                }
                let i = r.partition_point(|&v| v <= rho) - 1;
                let h = rho - r[i];
                let slope = (f[i + 1] - f[i]) / (r[i + 1] - r[i]);
                self.table_cdf[i] + f[i] * h + 0.5 * slope * h * h
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.spec {
            FragmentationSpec::Uniform => rng.random::<f64>(),
            FragmentationSpec::Beta { alpha, beta } => rand_distr::Beta::new(*alpha, *beta)
                .expect("validated Beta parameters")
                .sample(rng),
            FragmentationSpec::Table { .. } => {
                let u: f64 = rng.random();
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf(mid) < u {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    /// Symmetrised density `F(rho) + F(1 - rho)` of either newborn's fraction.
    pub fn pair_density(&self, rho: f64) -> f64 {
        if self.symmetric {
            2.0 * self.density(rho)
        } else {
            self.density(rho) + self.density(1.0 - rho)
        }
    }

    /// Support of the density as a closed interval inside `[0, 1]`.
    pub fn support(&self) -> (f64, f64) {
        match &self.spec {
            FragmentationSpec::Table { rho, f } => {
                let first = f.iter().position(|&v| v > 0.0).unwrap_or(0);
                let last = f.iter().rposition(|&v| v > 0.0).unwrap_or(f.len() - 1);
                (rho[first.saturating_sub(1)], rho[(last + 1).min(rho.len() - 1)])
            }
            _ => (0.0, 1.0),
        }
    }
}

fn out_density_table(rho: &[f64], f: &[f64], x: f64) -> f64 {
    if x < rho[0] || x > rho[rho.len() - 1] {
        0.0
    } else {
        interp_linear(rho, f, x)
    }
}

// ---------------------------------------------------------------------------
// Kernel

#[derive(Clone)]
pub enum Kernel {
    /// `k(x, z) = (F(z/y) + F(1 - z/y)) / y` on `(0, y)`: two newborns of
    /// sizes `rho y` and `(1 - rho) y`. Equals `2 F(z/y) / y` for symmetric `F`.
    Fragmentation(Fragmentation),
    General {
        k: KernelFn,
        /// Interval containing the support of `k(x, .)`.
        support: SupportFn,
    },
}

// ---------------------------------------------------------------------------
// Bounds and working box

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub beta_minus: f64,
    pub beta_plus: f64,
    #[serde(rename = "K_bar")]
    pub k_bar: f64,
    pub a_star: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub a: (f64, f64),
    pub y: (f64, f64),
}

impl Default for BoxDomain {
    fn default() -> Self {
        Self { a: (0.0, 10.0), y: (0.05, 10.0) }
    }
}

impl BoxDomain {
    pub fn contains(&self, x: PhasePoint) -> bool {
        x.a >= self.a.0 && x.a <= self.a.1 && x.y >= self.y.0 && x.y <= self.y.1
    }
}

// ---------------------------------------------------------------------------
// ModelSpec

#[derive(Clone)]
pub struct ModelSpec {
    pub growth: Growth,
    pub hazard: Hazard,
    pub kernel: Kernel,
    pub d0: f64,
    pub bounds: Bounds,
    pub domain: BoxDomain,
    /// Disables adder closed forms so every computation goes through the
    /// generic flow / quadrature code paths.
    pub force_numeric: bool,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let growth = match &self.growth {
            Growth::Adder { lambda } => format!("Adder(lambda={lambda})"),
            Growth::Field { .. } => "Field".to_string(),
        };
        let kernel = match &self.kernel {
            Kernel::Fragmentation(fr) => format!("{:?}", fr.spec()),
            Kernel::General { .. } => "General".to_string(),
        };
        f.debug_struct("ModelSpec")
            .field("growth", &growth)
            .field("hazard", &self.hazard)
            .field("kernel", &kernel)
            .field("d0", &self.d0)
            .field("bounds", &self.bounds)
            .finish()
    }
}

/// Adder model: exponential elongation at rate `lambda_growth`, division
/// hazard `B` in added size, fragmentation density `F`, death rate `d0`.
pub fn make_adder(lambda_growth: f64, hazard: Hazard, fragmentation: Fragmentation, d0: f64) -> ModelSpec {
    let domain = BoxDomain::default();
    let a_star = hazard.a_star();
    let (b_lo, b_hi) = hazard.range_on(domain.a.1, 1.0);
    let bounds = Bounds {
        c0: lambda_growth,
        c1: lambda_growth * domain.y.1.max(1.0),
        c2: lambda_growth,
        beta_minus: 0.5 * b_lo,
        beta_plus: 2.0 * b_hi,
        k_bar: 2.0,
        a_star,
    };
    ModelSpec {
        growth: Growth::Adder { lambda: lambda_growth },
        hazard,
        kernel: Kernel::Fragmentation(fragmentation),
        d0,
        bounds,
        domain,
        force_numeric: false,
    }
}

impl ModelSpec {
    /// Adder growth rate when closed forms may be used.
    pub fn adder_lambda(&self) -> Option<f64> {
        match self.growth {
            Growth::Adder { lambda } if !self.force_numeric && self.hazard.is_age_only() => Some(lambda),
            _ => None,
        }
    }

    /// Elongation rate of adder-type growth, regardless of closed-form use.
    pub fn lambda_growth(&self) -> Option<f64> {
        match self.growth {
            Growth::Adder { lambda } => Some(lambda),
            Growth::Field { .. } => None,
        }
    }

    pub fn is_adder(&self) -> bool {
        matches!(self.growth, Growth::Adder { .. })
    }

    pub fn fragmentation(&self) -> Option<&Fragmentation> {
        match &self.kernel {
            Kernel::Fragmentation(f) => Some(f),
            Kernel::General { .. } => None,
        }
    }

    pub fn numeric(mut self) -> Self {
        self.force_numeric = true;
        self
    }

    pub fn with_d0(mut self, d0: f64) -> Self {
        self.d0 = d0;
        self
    }

    pub fn with_domain(mut self, domain: BoxDomain) -> Self {
        self.domain = domain;
        if let Growth::Adder { lambda } = self.growth {
            self.bounds.c1 = lambda * domain.y.1.max(1.0);
        }
        self
    }

    pub fn g(&self, x: PhasePoint) -> [f64; 2] {
        match &self.growth {
            Growth::Adder { lambda } => [lambda * x.y, lambda * x.y],
            Growth::Field { g1, g2, .. } => [g1(x), g2(x)],
        }
    }

    pub fn g1(&self, x: PhasePoint) -> f64 {
        self.g(x)[0]
    }

    pub fn g2(&self, x: PhasePoint) -> f64 {
        self.g(x)[1]
    }

    /// `Dg(x)` row-major: `[[d_a g1, d_y g1], [d_a g2, d_y g2]]`.
    pub fn dg(&self, x: PhasePoint) -> [[f64; 2]; 2] {
        match &self.growth {
            Growth::Adder { lambda } => [[0.0, *lambda], [0.0, *lambda]],
            Growth::Field { jacobian: Some(j), .. } => j(x),
            Growth::Field { .. } => {
                let ha = 1e-6 * (1.0 + x.a.abs());
                let hy = 1e-6 * (1.0 + x.y.abs());
                let ga = |d: f64| self.g(PhasePoint::new(x.a + d, x.y));
                let gy = |d: f64| self.g(PhasePoint::new(x.a, x.y + d));
                let (pa, ma) = (ga(ha), ga(-ha));
                let (py, my) = (gy(hy), gy(-hy));
                [
                    [(pa[0] - ma[0]) / (2.0 * ha), (py[0] - my[0]) / (2.0 * hy)],
                    [(pa[1] - ma[1]) / (2.0 * ha), (py[1] - my[1]) / (2.0 * hy)],
                ]
            }
        }
    }

    /// Age hazard `B(x)`.
    pub fn hazard_rate(&self, x: PhasePoint) -> f64 {
        self.hazard.rate(x)
    }

    /// Division rate `beta = g1 B`.
    pub fn beta(&self, x: PhasePoint) -> f64 {
        let b = self.hazard.rate(x);
        if b == 0.0 {
            0.0
        } else {
            self.g1(x) * b
        }
    }

    pub fn k(&self, x: PhasePoint, z: f64) -> f64 {
        match &self.kernel {
            Kernel::Fragmentation(f) => {
                if z <= 0.0 || z >= x.y {
                    0.0
                } else {
                    f.pair_density(z / x.y) / x.y
                }
            }
            Kernel::General { k, .. } => k(x, z),
        }
    }

    pub fn kernel_support(&self, x: PhasePoint) -> (f64, f64) {
        match &self.kernel {
            Kernel::Fragmentation(_) => (0.0, x.y),
            Kernel::General { support, .. } => support(x),
        }
    }

    /// `int f(z) k(x, z) dz` over the kernel support.
    pub fn kernel_integral(&self, x: PhasePoint, mut f: impl FnMut(f64) -> f64) -> f64 {
        match &self.kernel {
            Kernel::Fragmentation(fr) => {
                let y = x.y;
                let (lo, hi) = fr.support();
                let rule = Rule::uniform(lo, hi, 32, 8);
                // substitute z = rho y
                rule.integrate(|rho| f(rho * y) * fr.pair_density(rho))
            }
            Kernel::General { k, support } => {
                let (lo, hi) = support(x);
                Rule::uniform(lo, hi, 32, 8).integrate(|z| f(z) * k(x, z))
            }
        }
    }

    /// Total offspring `||k(x, .)||_1`.
    pub fn kernel_mass(&self, x: PhasePoint) -> f64 {
        match &self.kernel {
            Kernel::Fragmentation(fr) => 2.0 * fr.moments()[0],
            Kernel::General { .. } => self.kernel_integral(x, |_| 1.0),
        }
    }

    /// Offspring mass above `r`: `int_r^inf k(x, z) dz`.
    pub fn kernel_mass_above(&self, x: PhasePoint, r: f64) -> f64 {
        match &self.kernel {
            Kernel::Fragmentation(fr) => {
                if x.y <= r {
                    0.0
                } else {
                    let s = r / x.y;
                    (1.0 - fr.cdf(s)) + fr.cdf(1.0 - s)
                }
            }
            Kernel::General { k, support } => {
                let (lo, hi) = support(x);
                let lo = lo.max(r);
                if hi <= lo {
                    0.0
                } else {
                    Rule::uniform(lo, hi, 16, 8).integrate(|z| k(x, z))
                }
            }
        }
    }

    /// Moments `[m0, m1, m2]` of the fragmentation density.
    pub fn moments(&self) -> Option<[f64; 3]> {
        self.fragmentation().map(Fragmentation::moments)
    }

    /// Generator `Q f(x)`: transport with central differences (step
    /// `1e-6 (1 + |x|)`), quadrature for the jump term, and killing.
    pub fn generator(&self, f: &dyn Fn(PhasePoint) -> f64, x: PhasePoint) -> f64 {
        let [g1, g2] = self.g(x);
        let (da, dy) = central_gradient(f, x);
        let fx = f(x);
        let beta = self.beta(x);
        let jump = if beta > 0.0 {
            beta * (self.kernel_integral(x, |z| f(PhasePoint::new(0.0, z))) - fx)
        } else {
            0.0
        };
        g1 * da + g2 * dy + jump - self.d0 * fx
    }
}

pub(crate) fn central_gradient(f: &dyn Fn(PhasePoint) -> f64, x: PhasePoint) -> (f64, f64) {
    let ha = 1e-6 * (1.0 + x.a.abs());
    let hy = 1e-6 * (1.0 + x.y.abs());
    let da = (f(PhasePoint::new(x.a + ha, x.y)) - f(PhasePoint::new(x.a - ha, x.y))) / (2.0 * ha);
    let dy = (f(PhasePoint::new(x.a, x.y + hy)) - f(PhasePoint::new(x.a, x.y - hy))) / (2.0 * hy);
    (da, dy)
}

/// The eigenfunction `h(a, y) = y` of the adder.
pub fn size_field() -> Field {
    Arc::new(|x: PhasePoint| x.y)
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
    pub box_a: (f64, f64),
    pub box_y: (f64, f64),
    pub grid_n: usize,
    pub moments: Option<[f64; 3]>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn validate(model: &ModelSpec) -> Result<ValidationReport> {
    validate_on_grid(model, 64)
}

/// Samples the structural assumptions on an `n x n` grid over the model's
/// working box. Violations that make every later computation meaningless
/// are returned as errors; the rest are recorded in the report.
pub fn validate_on_grid(model: &ModelSpec, n: usize) -> Result<ValidationReport> {
    let b = model.bounds;
    if !(b.beta_minus > 0.0) {
        return Err(Error::InvalidModel(format!(
            "(ii) beta_minus must be positive, got {}",
            b.beta_minus
        )));
    }
    if b.beta_minus > b.beta_plus {
        return Err(Error::InvalidModel(format!(
            "(ii) beta_minus = {} exceeds beta_plus = {}",
            b.beta_minus, b.beta_plus
        )));
    }
    if let Some(m) = model.moments() {
        if (m[1] - 0.5).abs() > 1e-8 {
            return Err(Error::InvalidModel(format!("(A2) m1 = {:.10} differs from 1/2", m[1])));
        }
    }
    if let Some(lambda) = model.lambda_growth() {
        if !(lambda > 0.0) {
            return Err(Error::InvalidModel(format!("lambda_growth must be positive, got {lambda}")));
        }
        if lambda <= model.d0 {
            return Err(Error::InvalidModel(format!(
                "(A3) lambda_growth = {lambda} must exceed d0 = {}",
                model.d0
            )));
        }
    }
    if model.d0 < 0.0 {
        return Err(Error::InvalidModel(format!("death rate must be >= 0, got {}", model.d0)));
    }

    let dom = model.domain;
    let a_nodes = quadrature::linspace(dom.a.0, dom.a.1, n);
    let y_nodes = quadrature::linspace(dom.y.0, dom.y.1, n);
    let points: Vec<PhasePoint> = a_nodes
        .iter()
        .flat_map(|&a| y_nodes.iter().map(move |&y| PhasePoint::new(a, y)))
        // adder states never have added size above current size
        .filter(|x| !model.is_adder() || x.a <= x.y)
        .collect();

    let mut checks = Vec::new();
    let mut record = |name: &str, bad: Option<String>, ok: String| {
        checks.push(AssumptionCheck {
            name: name.to_string(),
            passed: bad.is_none(),
            detail: bad.unwrap_or(ok),
        });
    };

    // (i) flow control
    let tol = 1e-9;
    let mut bad = None;
    for &x in &points {
        let [g1, g2] = model.g(x);
        let d = model.dg(x);
        let g2_0 = model.g2(PhasePoint::new(0.0, x.y));
        let lim = b.c2 * (1.0 + x.a + x.y) * (1.0 + tol);
        let msg = if !(g1 > 0.0) {
            Some("g1 <= 0")
        } else if g1 < b.c0 * x.a * (1.0 - tol) {
            Some("g1 < c0 a")
        } else if g1 > b.c1 * (1.0 + x.a) * (1.0 + tol) {
            Some("g1 > c1 (1 + a)")
        } else if g2 > b.c1 * (1.0 + x.y) * (1.0 + tol) {
            Some("g2 > c1 (1 + y)")
        } else if d.iter().flatten().any(|v| v.abs() > lim) {
            Some("|Dg| > c2 (1 + a + y)")
        } else if g2 > g2_0 * (1.0 + tol) + tol {
            Some("g2(a, y) > g2(0, y)")
        } else {
            None
        };
        if let Some(m) = msg {
            bad = Some(format!("{m} at {x}"));
            break;
        }
    }
    record("(i) flow control", bad, format!("c0={}, c1={}, c2={}", b.c0, b.c1, b.c2));

    // (ii) reproduction rate
    let mut bad = None;
    for &x in &points {
        let bx = model.hazard_rate(x);
        let beta = model.beta(x);
        let g1 = model.g1(x);
        let below = x.a < b.a_star || (b.a_star > 0.0 && x.a <= b.a_star);
        let msg = if below && bx != 0.0 {
            Some(format!("B = {bx} != 0 below a_star"))
        } else if !below && !(bx > b.beta_minus && bx < b.beta_plus) {
            Some(format!("B = {bx} outside (beta_minus, beta_plus)"))
        } else if (beta - g1 * bx).abs() > 1e-12 * (1.0 + beta.abs()) {
            Some("beta != g1 B".to_string())
        } else {
            None
        };
        if let Some(m) = msg {
            bad = Some(format!("{m} at {x}"));
            break;
        }
    }
    record(
        "(ii) reproduction rate",
        bad,
        format!("B in ({}, {}) beyond a_star = {}", b.beta_minus, b.beta_plus, b.a_star),
    );

    // (iii) kernel mass and support
    let mut bad = None;
    for &x in points.iter().step_by(7) {
        let mass = model.kernel_integral(x, |_| 1.0);
        let (lo, hi) = model.kernel_support(x);
        let msg = if !(mass > 1.0 && mass <= b.k_bar * (1.0 + 1e-8)) {
            Some(format!("offspring mass {mass} outside (1, K_bar]"))
        } else if model.fragmentation().is_some() && (lo < 0.0 || hi > x.y) {
            Some("fragmentation support exceeds (0, y)".to_string())
        } else {
            None
        };
        if let Some(m) = msg {
            bad = Some(format!("{m} at {x}"));
            break;
        }
    }
    record("(iii) offspring kernel", bad, format!("mass in (1, {}]", b.k_bar));

    // (iv) lower-bounded kernel: k(., z) >= eps(z) on [2z, 2z + delta]
    if let Some(fr) = model.fragmentation() {
        let delta = 0.1 * dom.y.0.max(0.1);
        let mut bad = None;
        for z in quadrature::linspace(dom.y.0, dom.y.1, n) {
            let eps = kernel_minoration_epsilon(fr, z, delta);
            if !(eps > 0.0) {
                bad = Some(format!("epsilon({z}) = {eps}"));
                break;
            }
        }
        record("(iv) kernel minoration", bad, format!("epsilon(z) > 0 with delta = {delta}"));
    }

    if model.is_adder() {
        let (lo, hi) = model.hazard.range_on(dom.a.1, 1.0);
        let bad = (!(lo > 0.0 && hi.is_finite())).then(|| format!("B range [{lo}, {hi}]"));
        record("(A1) bounded hazard", bad, format!("B in [{lo}, {hi}] beyond a_star"));
        let m = model.moments().unwrap_or([1.0, 0.5, 0.0]);
        let bad = ((m[0] - 1.0).abs() > 1e-6 || m[2] > 0.5).then(|| format!("moments {m:?}"));
        record("(A2) fragmentation moments", bad, format!("m = {m:?}"));
        record(
            "(A3) growth beats death",
            None,
            format!("lambda = {} > d0 = {}", model.lambda_growth().unwrap_or(0.0), model.d0),
        );
    }

    Ok(ValidationReport {
        checks,
        box_a: dom.a,
        box_y: dom.y,
        grid_n: n,
        moments: model.moments(),
    })
}

/// Kernel minoration of the adder: `min_{z' in [2z, 2z + delta]} F(z/z') / z'`.
pub fn kernel_minoration_epsilon(fr: &Fragmentation, z: f64, delta: f64) -> f64 {
    quadrature::linspace(2.0 * z, 2.0 * z + delta, 65)
        .into_iter()
        .map(|zp| fr.density(z / zp) / zp)
        .fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------------------
// h-transform

/// Conservative jump-flow process obtained from `Q` by the positive
/// eigenfunction `h`: same flow, jump rate `beta(x) int h(0,z) k(x,z) dz / h(x)`,
/// post-jump sizes with density proportional to `h(0,z) k(x,z)`.
#[derive(Clone)]
pub struct MarkovModel {
    pub base: Arc<ModelSpec>,
    pub h: Field,
    pub lambda: f64,
}

pub fn h_transform(model: Arc<ModelSpec>, h: Field, lambda: f64) -> MarkovModel {
    MarkovModel { base: model, h, lambda }
}

impl MarkovModel {
    fn h_at(&self, x: PhasePoint) -> Result<f64> {
        let v = (self.h)(x);
        if v > 0.0 {
            Ok(v)
        } else {
            Err(Error::NonPositiveH { a: x.a, y: x.y, value: v })
        }
    }

    /// `int h(0, z) k(x, z) dz`.
    pub fn weighted_mass(&self, x: PhasePoint) -> Result<f64> {
        let mut err = None;
        let v = self.base.kernel_integral(x, |z| {
            let p = PhasePoint::new(0.0, z);
            let hv = (self.h)(p);
            if !(hv > 0.0) && err.is_none() {
                err = Some(Error::NonPositiveH { a: 0.0, y: z, value: hv });
            }
            hv
        });
        match err {
            Some(e) => Err(e),
            None => Ok(v),
        }
    }

    pub fn jump_rate(&self, x: PhasePoint) -> Result<f64> {
        let beta = self.base.beta(x);
        if beta == 0.0 {
            return Ok(0.0);
        }
        Ok(beta * self.weighted_mass(x)? / self.h_at(x)?)
    }

    pub fn post_jump_density(&self, x: PhasePoint, z: f64) -> Result<f64> {
        let k = self.base.k(x, z);
        if k == 0.0 {
            return Ok(0.0);
        }
        Ok(self.h_at(PhasePoint::new(0.0, z))? * k / self.weighted_mass(x)?)
    }

    /// `A f(x) = g . grad f + beta int (f(0,z) - f(x)) h(0,z)/h(x) k(x,z) dz`.
    pub fn generator(&self, f: &dyn Fn(PhasePoint) -> f64, x: PhasePoint) -> Result<f64> {
        let hx = self.h_at(x)?;
        let [g1, g2] = self.base.g(x);
        let (da, dy) = central_gradient(f, x);
        let beta = self.base.beta(x);
        let fx = f(x);
        let jump = if beta > 0.0 {
            let mut err = None;
            let v = self.base.kernel_integral(x, |z| {
                let p = PhasePoint::new(0.0, z);
                let hz = (self.h)(p);
                if !(hz > 0.0) && err.is_none() {
                    err = Some(Error::NonPositiveH { a: 0.0, y: z, value: hz });
                }
                (f(p) - fx) * hz
            });
            if let Some(e) = err {
                return Err(e);
            }
            beta * v / hx
        } else {
            0.0
        };
        Ok(g1 * da + g2 * dy + jump)
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelType {
    Adder,
    /// Adder fields evaluated through the generic numerical code paths.
    General,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundsOverride {
    pub c0: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub beta_minus: Option<f64>,
    pub beta_plus: Option<f64>,
    #[serde(rename = "K_bar")]
    pub k_bar: Option<f64>,
    pub a_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_model_type")]
    pub model_type: ModelType,
    #[serde(default = "one")]
    pub lambda_growth: f64,
    #[serde(default)]
    pub d0: f64,
    #[serde(default = "default_hazard")]
    pub hazard: HazardSpec,
    #[serde(default = "default_fragmentation")]
    pub fragmentation: FragmentationSpec,
    #[serde(default)]
    pub bounds: BoundsOverride,
    #[serde(default)]
    pub domain: Option<BoxDomain>,
}

fn default_model_type() -> ModelType {
    ModelType::Adder
}
fn one() -> f64 {
    1.0
}
fn default_hazard() -> HazardSpec {
    HazardSpec::Constant { b: 1.0 }
}
fn default_fragmentation() -> FragmentationSpec {
    FragmentationSpec::Beta { alpha: 5.0, beta: 5.0 }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_type: ModelType::Adder,
            lambda_growth: 1.0,
            d0: 0.0,
            hazard: default_hazard(),
            fragmentation: default_fragmentation(),
            bounds: BoundsOverride::default(),
            domain: None,
        }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        let a_star = self.bounds.a_star.unwrap_or(0.0);
        let hazard = Hazard::from_spec(&self.hazard)?.with_a_star(a_star);
        let frag = Fragmentation::new(self.fragmentation.clone())?;
        let mut model = make_adder(self.lambda_growth, hazard, frag, self.d0);
        if let Some(d) = self.domain {
            model = model.with_domain(d);
        }
        let o = &self.bounds;
        let b = &mut model.bounds;
        b.c0 = o.c0.unwrap_or(b.c0);
        b.c1 = o.c1.unwrap_or(b.c1);
        b.c2 = o.c2.unwrap_or(b.c2);
        b.beta_minus = o.beta_minus.unwrap_or(b.beta_minus);
        b.beta_plus = o.beta_plus.unwrap_or(b.beta_plus);
        b.k_bar = o.k_bar.unwrap_or(b.k_bar);
        if self.model_type == ModelType::General {
            model = model.numeric();
        }
        Ok(model)
    }
}
