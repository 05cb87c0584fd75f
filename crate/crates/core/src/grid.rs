//! Truncated tensor grid and the grid functions living on it.
//!
//! Nodes are numbered with `x` fastest, then `z`, then `y`:
//! `node = (j * nz + k) * nx + i`. The `y` axis is piecewise uniform with
//! the levels `0, ±ybar, ±ybar1, ±y_max` present as exact nodes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CycleLevels, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub zs: Vec<f64>,
    pub y_max: f64,
    pub ybar: f64,
    pub ybar1: f64,
    j_zero: usize,
    j_ybar: usize,
    j_ybar1: usize,
}

/// Uniform axis on `[-b, b]` with exactly symmetric nodes.
fn symmetric_axis(b: f64, n: usize) -> Vec<f64> {
    let m = (n - 1) as f64;
    (0..n)
        .map(|i| {
            if i == 0 {
                -b
            } else if i == n - 1 {
                b
            } else {
                b * (2.0 * i as f64 - m) / m
            }
        })
        .collect()
}

pub fn build_grid(
    p: &ModelParams,
    c: &CycleLevels,
    nx: usize,
    ny_per_band: usize,
    nz: usize,
    y_max: f64,
) -> Result<Grid3> {
    if nx < 3 || nz < 3 || ny_per_band < 1 {
        return Err(Error::InvalidResolution(format!(
            "nx = {nx}, nz = {nz} need at least 3 nodes and ny_per_band = {ny_per_band} at least 1"
        )));
    }
    if !(y_max > c.ybar1) {
        return Err(Error::InvalidTruncation {
            y_max,
            ybar1: c.ybar1,
        });
    }
    // Each band gets ny_per_band times an integer multiple fixed by its width
    // relative to [0, ybar], so doubling ny_per_band nests the grids.
    let levels = [0.0, c.ybar, c.ybar1, y_max];
    let mut pos = vec![0.0];
    let mut band_end = Vec::new();
    for w in levels.windows(2) {
        let (a, b) = (w[0], w[1]);
        let ratio = ((b - a) / c.ybar).round().max(1.0) as usize;
        let n = ny_per_band * ratio;
        for s in 1..n {
            pos.push(a + (b - a) * (s as f64 / n as f64));
        }
        pos.push(b);
        band_end.push(pos.len() - 1);
    }
    let half = pos.len() - 1;
    let mut ys: Vec<f64> = pos[1..].iter().rev().map(|v| -v).collect();
    ys.extend_from_slice(&pos);
    Ok(Grid3 {
        xs: symmetric_axis(p.x_bound, nx),
        zs: symmetric_axis(p.yield_bound, nz),
        ys,
        y_max,
        ybar: c.ybar,
        ybar1: c.ybar1,
        j_zero: half,
        j_ybar: half + band_end[0],
        j_ybar1: half + band_end[1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    /// `|y| <= ybar1`.
    Interior,
    /// `y >= ybar`.
    ExteriorUp,
    /// `y <= -ybar`.
    ExteriorDown,
    /// `|y| >= ybar`.
    Exterior,
    Full,
}

/// Cycle surface `|y| = ybar` (`Gamma`) or `|y| = ybar1` (`Gamma1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Gamma,
    Gamma1,
}

/// Plastic face `z = Y` (`Plus`) or `z = -Y` (`Minus`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Face {
    Plus,
    Minus,
}

impl Grid3 {
    pub fn nx(&self) -> usize {
        self.xs.len()
    }
    pub fn ny(&self) -> usize {
        self.ys.len()
    }
    pub fn nz(&self) -> usize {
        self.zs.len()
    }
    pub fn len(&self) -> usize {
        self.nx() * self.ny() * self.nz()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    #[inline]
    pub fn node(&self, i: usize, j: usize, k: usize) -> usize {
        (j * self.nz() + k) * self.nx() + i
    }
    #[inline]
    pub fn coords(&self, n: usize) -> (usize, usize, usize) {
        let nx = self.nx();
        let nz = self.nz();
        (n % nx, n / (nx * nz), (n / nx) % nz)
    }
    pub fn point(&self, n: usize) -> (f64, f64, f64) {
        let (i, j, k) = self.coords(n);
        (self.xs[i], self.ys[j], self.zs[k])
    }
    pub fn x_bound(&self) -> f64 {
        self.xs[self.nx() - 1]
    }
    pub fn yield_bound(&self) -> f64 {
        self.zs[self.nz() - 1]
    }
    pub fn hx(&self) -> f64 {
        self.xs[1] - self.xs[0]
    }
    pub fn hz(&self) -> f64 {
        self.zs[1] - self.zs[0]
    }
    /// Largest `y` spacing.
    pub fn hy(&self) -> f64 {
        self.ys
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
    /// Copy with the `x` axis collapsed to the single node `x = 0`; used for
    /// the `(y, z)` reduced problem when the `x` dynamics decouple.
    pub fn yz_plane(&self) -> Grid3 {
        Grid3 {
            xs: vec![0.0],
            ..self.clone()
        }
    }
    pub fn j_zero(&self) -> usize {
        self.j_zero
    }
    /// Index of `y = +level` (`sign > 0`) or `y = -level`.
    pub fn j_level(&self, level: Level, upper: bool) -> usize {
        let off = match level {
            Level::Gamma => self.j_ybar - self.j_zero,
            Level::Gamma1 => self.j_ybar1 - self.j_zero,
        };
        if upper {
            self.j_zero + off
        } else {
            self.j_zero - off
        }
    }
    pub fn level_value(&self, level: Level) -> f64 {
        match level {
            Level::Gamma => self.ybar,
            Level::Gamma1 => self.ybar1,
        }
    }
    /// Inclusive `y`-index range of a region; `Exterior` spans everything.
    pub fn j_range(&self, region: Region) -> (usize, usize) {
        let top = self.ny() - 1;
        match region {
            Region::Interior => (
                self.j_level(Level::Gamma1, false),
                self.j_level(Level::Gamma1, true),
            ),
            Region::ExteriorUp => (self.j_level(Level::Gamma, true), top),
            Region::ExteriorDown => (0, self.j_level(Level::Gamma, false)),
            Region::Exterior | Region::Full => (0, top),
        }
    }
    pub fn region_contains_j(&self, region: Region, j: usize) -> bool {
        match region {
            Region::Exterior => {
                j <= self.j_level(Level::Gamma, false) || j >= self.j_level(Level::Gamma, true)
            }
            _ => {
                let (lo, hi) = self.j_range(region);
                j >= lo && j <= hi
            }
        }
    }
    /// Trapezoid weight of node `n` in the volume quadrature.
    pub fn cell_volume(&self, n: usize) -> f64 {
        let (i, j, k) = self.coords(n);
        axis_weight(&self.xs, i) * axis_weight(&self.ys, j) * axis_weight(&self.zs, k)
    }
    /// Trapezoid weight of a face node in the `(x, y)` area quadrature.
    pub fn face_area(&self, i: usize, j: usize) -> f64 {
        axis_weight(&self.xs, i) * axis_weight(&self.ys, j)
    }
}

/// Half the distance between the neighbouring nodes (trapezoid weight).
pub fn axis_weight(axis: &[f64], i: usize) -> f64 {
    let lo = if i == 0 { axis[0] } else { axis[i - 1] };
    let hi = if i + 1 == axis.len() {
        axis[i]
    } else {
        axis[i + 1]
    };
    0.5 * (hi - lo)
}

/// Scalar grid function. Values are stored for every node of the grid;
/// only the nodes of `region` are meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    pub grid: Arc<Grid3>,
    pub region: Region,
    pub values: Vec<f64>,
}

impl Field3 {
    pub fn zeros(grid: Arc<Grid3>, region: Region) -> Self {
        let n = grid.len();
        Self {
            grid,
            region,
            values: vec![0.0; n],
        }
    }

    pub fn constant(grid: Arc<Grid3>, region: Region, c: f64) -> Self {
        let mut f = Self::zeros(grid, region);
        f.map_region(|_, _| c);
        f
    }

    pub fn from_fn(grid: Arc<Grid3>, region: Region, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let mut out = Self::zeros(grid, region);
        out.map_region(|g, n| {
            let (x, y, z) = g.point(n);
            f(x, y, z)
        });
        out
    }

    fn map_region(&mut self, f: impl Fn(&Grid3, usize) -> f64) {
        let g = self.grid.clone();
        for n in 0..g.len() {
            if self.contains(n) {
                self.values[n] = f(&g, n);
            }
        }
    }

    pub fn contains(&self, n: usize) -> bool {
        let (_, j, _) = self.grid.coords(n);
        self.grid.region_contains_j(self.region, j)
    }

    /// Node ids of the region in lexicographic order.
    pub fn region_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.grid.len()).filter(|&n| self.contains(n))
    }

    pub fn sup_norm(&self) -> f64 {
        self.region_nodes()
            .map(|n| self.values[n].abs())
            .fold(0.0, f64::max)
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.grid.node(i, j, k)]
    }

    /// Exact nodal restriction to a cycle surface.
    pub fn surface(&self, level: Level) -> SurfaceField {
        let g = &self.grid;
        let mut s = SurfaceField::zeros(self.grid.clone(), level);
        for (sheet, upper) in [(&mut s.lower, false), (&mut s.upper, true)] {
            let j = g.j_level(level, upper);
            for k in 0..g.nz() {
                for i in 0..g.nx() {
                    sheet[k * g.nx() + i] = self.values[g.node(i, j, k)];
                }
            }
        }
        s
    }

    /// Writes surface data into the matching nodes.
    pub fn embed_surface(&mut self, s: &SurfaceField) {
        let g = self.grid.clone();
        for (sheet, upper) in [(&s.lower, false), (&s.upper, true)] {
            let j = g.j_level(s.level, upper);
            for k in 0..g.nz() {
                for i in 0..g.nx() {
                    self.values[g.node(i, j, k)] = sheet[k * g.nx() + i];
                }
            }
        }
    }

    /// Exact nodal restriction to a plastic face over `j_lo..=j_hi`.
    pub fn face(&self, face: Face, j_lo: usize, j_hi: usize) -> FaceField {
        let g = &self.grid;
        let k = match face {
            Face::Plus => g.nz() - 1,
            Face::Minus => 0,
        };
        let nx = g.nx();
        let mut values = Vec::with_capacity((j_hi - j_lo + 1) * nx);
        for j in j_lo..=j_hi {
            for i in 0..nx {
                values.push(self.values[g.node(i, j, k)]);
            }
        }
        FaceField {
            grid: self.grid.clone(),
            face,
            j_lo,
            j_hi,
            values,
        }
    }
}

/// Data on the plastic face strip `j_lo..=j_hi`, indexed `(j - j_lo) * nx + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    pub grid: Arc<Grid3>,
    pub face: Face,
    pub j_lo: usize,
    pub j_hi: usize,
    pub values: Vec<f64>,
}

impl FaceField {
    pub fn zeros(grid: Arc<Grid3>, face: Face, j_lo: usize, j_hi: usize) -> Self {
        let n = (j_hi - j_lo + 1) * grid.nx();
        Self {
            grid,
            face,
            j_lo,
            j_hi,
            values: vec![0.0; n],
        }
    }
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[(j - self.j_lo) * self.grid.nx() + i]
    }
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let nx = self.grid.nx();
        self.values[(j - self.j_lo) * nx + i] = v;
    }
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Data on both sheets `y = ±level` of a cycle surface, indexed `k * nx + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceField {
    pub grid: Arc<Grid3>,
    pub level: Level,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

impl SurfaceField {
    pub fn zeros(grid: Arc<Grid3>, level: Level) -> Self {
        let n = grid.nx() * grid.nz();
        Self {
            grid,
            level,
            upper: vec![0.0; n],
            lower: vec![0.0; n],
        }
    }

    pub fn constant(grid: Arc<Grid3>, level: Level, c: f64) -> Self {
        let n = grid.nx() * grid.nz();
        Self {
            grid,
            level,
            upper: vec![c; n],
            lower: vec![c; n],
        }
    }

    /// `f(x, z, upper)` sampled at the surface nodes.
    pub fn from_fn(grid: Arc<Grid3>, level: Level, f: impl Fn(f64, f64, bool) -> f64) -> Self {
        let mut s = Self::zeros(grid.clone(), level);
        for k in 0..grid.nz() {
            for i in 0..grid.nx() {
                s.upper[k * grid.nx() + i] = f(grid.xs[i], grid.zs[k], true);
                s.lower[k * grid.nx() + i] = f(grid.xs[i], grid.zs[k], false);
            }
        }
        s
    }

    /// Number of surface nodes over both sheets.
    pub fn len(&self) -> usize {
        self.upper.len() + self.lower.len()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view: lower sheet first, then upper.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.lower.clone();
        v.extend_from_slice(&self.upper);
        v
    }

    pub fn from_vec(grid: Arc<Grid3>, level: Level, v: &[f64]) -> Self {
        let n = grid.nx() * grid.nz();
        assert_eq!(v.len(), 2 * n, "surface vector length");
        Self {
            grid,
            level,
            lower: v[..n].to_vec(),
            upper: v[n..].to_vec(),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.upper
            .iter()
            .chain(&self.lower)
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.upper
            .iter()
            .chain(&self.lower)
            .fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn max(&self) -> f64 {
        self.upper
            .iter()
            .chain(&self.lower)
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// Bilinear interpolation on the sheet of sign `upper` at `(x, z)`.
    pub fn interpolate(&self, x: f64, z: f64, upper: bool) -> f64 {
        let g = &self.grid;
        let sheet = if upper { &self.upper } else { &self.lower };
        let (i0, tx) = locate(&g.xs, x);
        let (k0, tz) = locate(&g.zs, z);
        let nx = g.nx();
        let v = |i: usize, k: usize| sheet[k * nx + i];
        (1.0 - tz) * ((1.0 - tx) * v(i0, k0) + tx * v(i0 + 1, k0))
            + tz * ((1.0 - tx) * v(i0, k0 + 1) + tx * v(i0 + 1, k0 + 1))
    }
}

/// Cell index and local coordinate of `v` on a sorted axis (clamped).
pub fn locate(axis: &[f64], v: f64) -> (usize, f64) {
    let n = axis.len();
    if v <= axis[0] {
        return (0, 0.0);
    }
    if v >= axis[n - 1] {
        return (n - 2, 1.0);
    }
    let i = axis.partition_point(|&a| a <= v) - 1;
    let i = i.min(n - 2);
    (i, (v - axis[i]) / (axis[i + 1] - axis[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams {
            alpha: 1.0,
            beta: 0.0,
            c0: 1.0,
            k: 1.0,
            yield_bound: 1.0,
            x_bound: 1.0,
        }
    }

    #[test]
    fn snapped_levels_are_exact() {
        let c = CycleLevels { ybar: 0.5, ybar1: 1.0 };
        let g = build_grid(&params(), &c, 3, 4, 5, 4.0).unwrap();
        for v in [-4.0, -1.0, -0.5, 0.0, 0.5, 1.0, 4.0] {
            assert!(g.ys.contains(&v), "missing {v}");
        }
        assert_eq!(g.xs, vec![-1.0, 0.0, 1.0]);
        assert_eq!(g.ys[g.j_level(Level::Gamma1, true)], 1.0);
        assert_eq!(g.ys[g.j_level(Level::Gamma, false)], -0.5);
        assert_eq!(g.ys[g.j_zero()], 0.0);
        assert!(g.ys.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn refinement_nests() {
        let c = CycleLevels { ybar: 0.5, ybar1: 1.0 };
        let g1 = build_grid(&params(), &c, 5, 3, 5, 3.0).unwrap();
        let g2 = build_grid(&params(), &c, 9, 6, 9, 3.0).unwrap();
        for (j, y) in g1.ys.iter().enumerate() {
            assert!((g2.ys[2 * j] - y).abs() < 1e-14);
        }
        for (i, x) in g1.xs.iter().enumerate() {
            assert!((g2.xs[2 * i] - x).abs() < 1e-14);
        }
    }

    #[test]
    fn invalid_inputs() {
        let c = CycleLevels { ybar: 0.5, ybar1: 1.0 };
        assert!(matches!(
            build_grid(&params(), &c, 2, 2, 5, 4.0),
            Err(Error::InvalidResolution(_))
        ));
        assert!(matches!(
            build_grid(&params(), &c, 3, 2, 5, 1.0),
            Err(Error::InvalidTruncation { .. })
        ));
    }

    #[test]
    fn trace_of_constant_and_embed_roundtrip() {
        let c = CycleLevels { ybar: 0.5, ybar1: 1.0 };
        let g = Arc::new(build_grid(&params(), &c, 4, 2, 5, 2.0).unwrap());
        let f = Field3::constant(g.clone(), Region::Full, 2.5);
        let s = f.surface(Level::Gamma);
        assert!(s.upper.iter().chain(&s.lower).all(|&v| v == 2.5));

        let data = SurfaceField::from_fn(g.clone(), Level::Gamma1, |x, z, up| {
            x + 10.0 * z + if up { 100.0 } else { 0.0 }
        });
        let mut f = Field3::zeros(g.clone(), Region::Interior);
        f.embed_surface(&data);
        assert_eq!(f.surface(Level::Gamma1), data);
    }

    #[test]
    fn quadrature_weights_sum_to_box_volume() {
        let c = CycleLevels { ybar: 0.5, ybar1: 1.0 };
        let g = build_grid(&params(), &c, 5, 2, 7, 2.0).unwrap();
        let vol: f64 = (0..g.len()).map(|n| g.cell_volume(n)).sum();
        assert!((vol - 2.0 * 4.0 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_is_exact_at_nodes() {
        let c = CycleLevels { ybar: 0.5, ybar1: 1.0 };
        let g = Arc::new(build_grid(&params(), &c, 5, 2, 5, 2.0).unwrap());
        let s = SurfaceField::from_fn(g.clone(), Level::Gamma1, |x, z, _| x * x + z);
        for k in 0..5 {
            for i in 0..5 {
                let v = s.interpolate(g.xs[i], g.zs[k], true);
                assert!((v - (g.xs[i] * g.xs[i] + g.zs[k])).abs() < 1e-14);
            }
        }
    }
}
