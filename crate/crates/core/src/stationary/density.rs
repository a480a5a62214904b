//! Piecewise-constant densities on a rectangular cell grid over the state
//! space `{0 <= a < y}`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PhasePoint;
use crate::quadrature::{linspace, Rule};

/// Cell `(ia, iy)` is stored at `iy * na + ia`. A cell's weight is the area
/// of its intersection with `{a < y}`, so cells straddling the diagonal are
/// clipped and cells above it carry no mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density2D {
    pub a_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    /// `sum values * weights`, refreshed by every mutating method.
    pub mass: f64,
    /// Mass deposited outside the grid by [`Density2D::add_point_mass`].
    #[serde(default)]
    pub outside: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellGrid {
    pub a: (f64, f64),
    pub y: (f64, f64),
    pub na: usize,
    pub ny: usize,
}

impl CellGrid {
    pub fn new(a: (f64, f64), y: (f64, f64), na: usize, ny: usize) -> Self {
        Self { a, y, na, ny }
    }
}

/// Area of `[a0, a1] x [y0, y1]` below the diagonal `a = y`.
fn clipped_area(a0: f64, a1: f64, y0: f64, y1: f64) -> f64 {
    // integrate  max(0, y1 - max(y0, a))  over a in [a0, a1]
    let mut area = 0.0;
    let hi = a1.min(y0);
    if hi > a0 {
        area += (hi - a0) * (y1 - y0);
    }
    let lo = a0.max(y0);
    let hi = a1.min(y1);
    if hi > lo {
        // linear from y1 - lo down to y1 - hi
        area += 0.5 * ((y1 - lo) + (y1 - hi)) * (hi - lo);
    }
    area.max(0.0)
}

impl Density2D {
    pub fn zeros(grid: CellGrid) -> Self {
        let a_edges = linspace(grid.a.0, grid.a.1, grid.na + 1);
        let y_edges = linspace(grid.y.0, grid.y.1, grid.ny + 1);
        let mut weights = Vec::with_capacity(grid.na * grid.ny);
        for iy in 0..grid.ny {
            for ia in 0..grid.na {
                weights.push(clipped_area(a_edges[ia], a_edges[ia + 1], y_edges[iy], y_edges[iy + 1]));
            }
        }
        Self { a_edges, y_edges, values: vec![0.0; weights.len()], weights, mass: 0.0, outside: 0.0 }
    }

    /// Cell averages of `f` (which need not vanish above the diagonal; it is
    /// masked) using an `order x order` Gauss rule per cell. Negative
    /// averages are clipped to 0.
    pub fn from_cell_average(grid: CellGrid, order: usize, f: impl Fn(PhasePoint) -> f64) -> Self {
        let mut d = Self::zeros(grid);
        let na = d.na();
        for iy in 0..d.ny() {
            let ry = Rule::uniform(d.y_edges[iy], d.y_edges[iy + 1], 1, order);
            for ia in 0..na {
                let c = iy * na + ia;
                if d.weights[c] <= 0.0 {
                    continue;
                }
                let ra = Rule::uniform(d.a_edges[ia], d.a_edges[ia + 1], 1, order);
                let mut s = 0.0;
                for (&y, &wy) in ry.nodes.iter().zip(&ry.weights) {
                    for (&a, &wa) in ra.nodes.iter().zip(&ra.weights) {
                        if a < y {
                            s += wy * wa * f(PhasePoint::new(a, y));
                        }
                    }
                }
                d.values[c] = (s / d.weights[c]).max(0.0);
            }
        }
        d.refresh_mass();
        d
    }

    /// Values of `f` at cell centres (clipped at 0); cells without area get 0.
    pub fn from_centres(grid: CellGrid, f: impl Fn(PhasePoint) -> f64) -> Self {
        let mut d = Self::zeros(grid);
        for c in 0..d.values.len() {
            if d.weights[c] > 0.0 {
                d.values[c] = f(d.centre_of(c)).max(0.0);
            }
        }
        d.refresh_mass();
        d
    }

    pub fn na(&self) -> usize {
        self.a_edges.len() - 1
    }

    pub fn ny(&self) -> usize {
        self.y_edges.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grid(&self) -> CellGrid {
        CellGrid {
            a: (self.a_edges[0], self.a_edges[self.na()]),
            y: (self.y_edges[0], self.y_edges[self.ny()]),
            na: self.na(),
            ny: self.ny(),
        }
    }

    pub fn centre(&self, ia: usize, iy: usize) -> PhasePoint {
        PhasePoint::new(
            0.5 * (self.a_edges[ia] + self.a_edges[ia + 1]),
            0.5 * (self.y_edges[iy] + self.y_edges[iy + 1]),
        )
    }

    pub fn centre_of(&self, c: usize) -> PhasePoint {
        let na = self.na();
        self.centre(c % na, c / na)
    }

    /// Index of the cell containing `x`, if any.
    pub fn cell_of(&self, x: PhasePoint) -> Option<usize> {
        let locate = |edges: &[f64], v: f64| -> Option<usize> {
            let n = edges.len() - 1;
            if !(v >= edges[0] && v <= edges[n]) {
                return None;
            }
            Some((edges.partition_point(|&e| e <= v).max(1) - 1).min(n - 1))
        };
        let ia = locate(&self.a_edges, x.a)?;
        let iy = locate(&self.y_edges, x.y)?;
        Some(iy * self.na() + ia)
    }

    /// Deposit mass `m` at `x`; returns false (and books it as outside) when
    /// `x` misses every cell of positive area.
    pub fn add_point_mass(&mut self, x: PhasePoint, m: f64) -> bool {
        match self.cell_of(x) {
            Some(c) if self.weights[c] > 0.0 => {
                self.values[c] += m / self.weights[c];
                self.mass += m;
                true
            }
            _ => {
                self.outside += m;
                false
            }
        }
    }

    pub fn refresh_mass(&mut self) {
        self.mass = self.values.iter().zip(&self.weights).map(|(v, w)| v * w).sum();
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.a_edges == other.a_edges && self.y_edges == other.y_edges
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
        self.mass *= s;
        self.outside *= s;
    }

    /// `sum w f(centre) value`.
    pub fn integrate(&self, f: impl Fn(PhasePoint) -> f64) -> f64 {
        (0..self.len())
            .filter(|&c| self.weights[c] > 0.0)
            .map(|c| self.weights[c] * self.values[c] * f(self.centre_of(c)))
            .sum()
    }

    /// Rows `a,y,value` at cell centres.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "a,y,value")?;
        for c in 0..self.len() {
            let p = self.centre_of(c);
            writeln!(w, "{},{},{}", p.a, p.y, self.values[c])?;
        }
        Ok(())
    }

    /// Grid metadata accompanying the CSV.
    pub fn write_header_json<W: Write>(&self, w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Header {
            grid: CellGrid,
            layout: &'static str,
            mass: f64,
            outside: f64,
        }
        let h = Header { grid: self.grid(), layout: "row-major in y; cell centres", mass: self.mass, outside: self.outside };
        serde_json::to_writer_pretty(w, &h)?;
        Ok(())
    }
}

/// Default Lyapunov weight `V(a, y) = 1/y + y`.
pub fn default_v(x: PhasePoint) -> f64 {
    1.0 / x.y + x.y
}

/// `sum_cells w (1 + V(centre)) |u - v|`.
pub fn weighted_tv(u: &Density2D, v: &Density2D, weight: &dyn Fn(PhasePoint) -> f64) -> Result<f64> {
    if !u.same_grid(v) {
        return Err(Error::GridMismatch(format!(
            "{}x{} cells vs {}x{} cells or different edges",
            u.na(),
            u.ny(),
            v.na(),
            v.ny()
        )));
    }
    Ok((0..u.len())
        .filter(|&c| u.weights[c] > 0.0)
        .map(|c| u.weights[c] * (1.0 + weight(u.centre_of(c))) * (u.values[c] - v.values[c]).abs())
        .sum())
}
