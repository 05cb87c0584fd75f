//! Cycle operators `P` and `T`, the invariant measure `γ⋆` of the embedded
//! chain on `Gamma1`, the invariant measure of the full process and the
//! complete problem `Λ u + f = 0`.
//!
//! Surface vectors are ordered lower sheet first, then upper, each sheet by
//! `k * nx + i`.

use std::collections::VecDeque;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet::DirichletSolvers;
use crate::error::{Error, Result};
use crate::fd::SolverOptions;
use crate::grid::{Face, FaceField, Field3, Grid3, Level, Region, SurfaceField};
use crate::linalg;
use crate::model::{generator_apply, CycleLevels, ModelParams, State, TestFunction};
use crate::sim::{self, McOptions};

/// Grid, parameters and prepared solvers shared by the cycle operators.
#[derive(Debug, Clone)]
pub struct CycleContext {
    pub solvers: DirichletSolvers,
}

impl CycleContext {
    pub fn new(grid: Arc<Grid3>, p: &ModelParams, c: &CycleLevels, opts: &SolverOptions) -> Result<Self> {
        Ok(Self {
            solvers: DirichletSolvers::new(grid, p, c, opts)?,
        })
    }
    pub fn grid(&self) -> &Arc<Grid3> {
        &self.solvers.grid
    }
    pub fn params(&self) -> &ModelParams {
        &self.solvers.params
    }
    pub fn tol(&self) -> f64 {
        self.solvers.opts.tol
    }
    pub fn surface_len(&self) -> usize {
        2 * self.grid().nx() * self.grid().nz()
    }

    /// `P φ`: interior solve with data `φ` on `Gamma1`, trace on `Gamma`,
    /// exterior solve, trace on `Gamma1`.
    pub fn apply_p(&self, phi: &SurfaceField) -> Result<SurfaceField> {
        let eta = self.solvers.interior(Some(phi), None)?.eta;
        let h = eta.surface(Level::Gamma);
        let zeta = self.solvers.exterior(Some(&h), None)?.zeta;
        Ok(zeta.surface(Level::Gamma1))
    }

    /// `T f`: expected integral of `f` over one cycle from each node of `Gamma1`.
    pub fn apply_t(&self, f: &Field3) -> Result<SurfaceField> {
        let chi = self.solvers.interior(None, Some(f))?.eta;
        let h = chi.surface(Level::Gamma);
        let xi = self.solvers.exterior(Some(&h), Some(f))?.zeta;
        Ok(xi.surface(Level::Gamma1))
    }

    /// Dense matrix of `P`, `p[r][s] = (P e_s)(r)`, checked for stochasticity.
    pub fn p_matrix(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.surface_len();
        let g = self.grid().clone();
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|s| {
                let mut e = vec![0.0; n];
                e[s] = 1.0;
                let phi = SurfaceField::from_vec(g.clone(), Level::Gamma1, &e);
                Ok(self.apply_p(&phi)?.to_vec())
            })
            .collect::<Result<_>>()?;
        let p: Vec<Vec<f64>> = (0..n).map(|r| cols.iter().map(|c| c[r]).collect()).collect();
        let tol = 10.0 * self.tol();
        for (r, row) in p.iter().enumerate() {
            let mass: f64 = row.iter().sum();
            if (mass - 1.0).abs() > tol || row.iter().any(|&v| v < -tol) {
                return Err(Error::NotStochastic { row: r, mass, tol });
            }
        }
        Ok(p)
    }
}

/// Invariant probability of the embedded chain on `Gamma1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMeasure {
    pub level: Level,
    pub weights_upper: Vec<f64>,
    pub weights_lower: Vec<f64>,
}

impl BoundaryMeasure {
    pub fn from_vec(v: &[f64]) -> Self {
        let h = v.len() / 2;
        Self {
            level: Level::Gamma1,
            weights_lower: v[..h].to_vec(),
            weights_upper: v[h..].to_vec(),
        }
    }
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.weights_lower.clone();
        v.extend_from_slice(&self.weights_upper);
        v
    }
    pub fn mass(&self) -> f64 {
        self.weights_lower.iter().chain(&self.weights_upper).sum()
    }
    /// `∫ φ dγ`.
    pub fn integrate(&self, phi: &SurfaceField) -> f64 {
        let a: f64 = self.weights_lower.iter().zip(&phi.lower).map(|(w, v)| w * v).sum();
        let b: f64 = self.weights_upper.iter().zip(&phi.upper).map(|(w, v)| w * v).sum();
        a + b
    }
}

/// Geometric decay of `||P^{n+1} φ - P^n φ||_∞` for a probe `φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicDiagnostics {
    pub sup_diffs: Vec<f64>,
    pub rho_estimate: f64,
    pub k_estimate: f64,
    pub r_squared: f64,
    /// Inclusive index range of `sup_diffs` used in the fit.
    pub window: (usize, usize),
}

impl ErgodicDiagnostics {
    /// Largest `sup_diffs[n + lag] / sup_diffs[n]` over the fitted window.
    pub fn max_lagged_ratio(&self, lag: usize) -> f64 {
        let (a, b) = self.window;
        (a..=b)
            .filter(|&n| n + lag <= b)
            .map(|n| self.sup_diffs[n + lag] / self.sup_diffs[n])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureMode {
    Matrix,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErgodicOptions {
    pub mode: MeasureMode,
    /// L1 stopping tolerance of the power iteration for `γ⋆`.
    pub gamma_tol: f64,
    pub gamma_max_iter: usize,
    /// Number of `P` applications recorded in the diagnostics.
    pub diag_iterations: usize,
    pub diag_burn_in: usize,
    /// Increments below `diag_floor · ||φ||` are left out of the fit.
    pub diag_floor: f64,
    pub solvability_tol: f64,
    /// Cap on the number of correction cycles in the complete problem.
    pub max_terms: usize,
}

impl Default for ErgodicOptions {
    fn default() -> Self {
        Self {
            mode: MeasureMode::Matrix,
            gamma_tol: 1e-12,
            gamma_max_iter: 1_000_000,
            diag_iterations: 60,
            diag_burn_in: 2,
            diag_floor: 1e-12,
            solvability_tol: 1e-8,
            max_terms: 5000,
        }
    }
}

impl ErgodicOptions {
    pub fn check(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.solvability_tol >= 0.0) || !(self.gamma_tol > 0.0) || !(self.diag_floor > 0.0) {
            bad.push("ergodic tolerances must be positive".to_string());
        }
        if self.diag_burn_in + 3 > self.diag_iterations || self.max_terms == 0 || self.gamma_max_iter == 0 {
            bad.push("ergodic iteration counts too small".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidOptions(bad.join("; ")))
        }
    }
}

/// Matrix route in full: `P`, `γ⋆` and the decay diagnostics.
pub fn matrix_route(
    ctx: &CycleContext,
    eo: &ErgodicOptions,
) -> Result<(Vec<Vec<f64>>, BoundaryMeasure, ErgodicDiagnostics)> {
    let p = ctx.p_matrix()?;
    let g = gamma_star(&p, eo.gamma_tol, eo.gamma_max_iter)?;
    let probe = probe_vector(ctx.grid());
    let diag = ergodic_diagnostics(&p, &probe, eo.diag_iterations, eo.diag_burn_in, eo.diag_floor);
    Ok((p, BoundaryMeasure::from_vec(&g), diag))
}

/// `||γ P - γ||_∞`.
pub fn fixed_point_residual(p: &[Vec<f64>], gamma: &BoundaryMeasure) -> f64 {
    let g = gamma.to_vec();
    let mut gp = vec![0.0; g.len()];
    for (r, row) in p.iter().enumerate() {
        for (s, v) in row.iter().enumerate() {
            gp[s] += g[r] * v;
        }
    }
    gp.iter().zip(&g).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

fn matvec(p: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    p.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Fixed point of `γ ← γ (P + I) / 2` from the uniform start.
pub fn gamma_star(p: &[Vec<f64>], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = p.len();
    let mut g = vec![1.0 / n as f64; n];
    let mut change = f64::INFINITY;
    for _ in 0..max_iter {
        let mut next = vec![0.0; n];
        for (r, row) in p.iter().enumerate() {
            let w = 0.5 * g[r];
            for (s, v) in row.iter().enumerate() {
                next[s] += w * v;
            }
            next[r] += w;
        }
        let mass: f64 = next.iter().sum();
        for v in &mut next {
            *v /= mass;
        }
        change = next.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum();
        g = next;
        if change <= tol {
            return Ok(g);
        }
    }
    Err(Error::NoConvergence {
        max_iter,
        residual: change,
    })
}

/// Least-squares line through `(n, ln d_n)`; returns `(slope, intercept, r²)`.
pub fn log_linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let m = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let (mx, my) = (sx / m, sy / m);
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Iterates `P` on `probe` and fits the decay of successive increments over
/// the indices past `burn_in` whose increments stay above `floor`.
pub fn ergodic_diagnostics(
    p: &[Vec<f64>],
    probe: &[f64],
    n_iter: usize,
    burn_in: usize,
    floor: f64,
) -> ErgodicDiagnostics {
    let mut v = probe.to_vec();
    let mut sup_diffs = Vec::with_capacity(n_iter);
    for _ in 0..n_iter {
        let next = matvec(p, &v);
        sup_diffs.push(next.iter().zip(&v).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())));
        v = next;
    }
    let norm = linalg::sup(probe).max(f64::MIN_POSITIVE);
    let end = sup_diffs
        .iter()
        .enumerate()
        .skip(burn_in)
        .take_while(|(_, &d)| d > floor * norm)
        .last()
        .map_or(burn_in, |(i, _)| i);
    let pts: Vec<(f64, f64)> = (burn_in..=end.min(sup_diffs.len().saturating_sub(1)))
        .filter(|&i| sup_diffs[i] > 0.0)
        .map(|i| (i as f64, sup_diffs[i].ln()))
        .collect();
    let (rho, k, r2) = if pts.len() >= 3 {
        let (s, b, r2) = log_linear_fit(&pts);
        (-s, b.exp() / norm, r2)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    ErgodicDiagnostics {
        sup_diffs,
        rho_estimate: rho,
        k_estimate: k,
        r_squared: r2,
        window: (burn_in, end),
    }
}

/// Index of the surface node nearest to `(x, z)` on the given sheet.
pub fn nearest_surface_node(g: &Grid3, x: f64, z: f64, upper: bool) -> usize {
    let (i, k) = (nearest_index(&g.xs, x), nearest_index(&g.zs, z));
    let sheet = usize::from(upper);
    sheet * g.nx() * g.nz() + k * g.nx() + i
}

fn nearest_index(axis: &[f64], v: f64) -> usize {
    let (i, t) = crate::grid::locate(axis, v);
    if t < 0.5 {
        i
    } else {
        i + 1
    }
}

/// Grid node nearest to a state.
pub fn nearest_node(g: &Grid3, s: &State) -> usize {
    g.node(nearest_index(&g.xs, s.x), nearest_index(&g.ys, s.y), nearest_index(&g.zs, s.z))
}

pub const N_COARSE_BINS: usize = 36;

/// Coarse partition of the nodes: two `x` halves, six `y` bands cut at
/// `0, ±ybar, ±ybar1`, and the lower face, elastic interior and upper face in `z`.
pub fn coarse_bin(g: &Grid3, n: usize) -> usize {
    let (i, j, k) = g.coords(n);
    let y = g.ys[j];
    let xb = usize::from(2 * i >= g.nx());
    let yb = if y < -g.ybar1 {
        0
    } else if y < -g.ybar {
        1
    } else if y < 0.0 {
        2
    } else if y <= g.ybar {
        3
    } else if y <= g.ybar1 {
        4
    } else {
        5
    };
    let zb = if k == 0 {
        0
    } else if k + 1 == g.nz() {
        2
    } else {
        1
    };
    (xb * 6 + yb) * 3 + zb
}

/// `γ⋆` by the requested route, with decay diagnostics from the matrix route
/// (or from the empirical chain for `Mc`, where none are fitted).
pub fn boundary_invariant_measure(
    ctx: &CycleContext,
    eo: &ErgodicOptions,
    mc: &McOptions,
) -> Result<(BoundaryMeasure, ErgodicDiagnostics)> {
    match eo.mode {
        MeasureMode::Matrix => {
            let (_, g, diag) = matrix_route(ctx, eo)?;
            Ok((g, diag))
        }
        MeasureMode::Mc => {
            let w = mc_chain_histogram(ctx, mc)?;
            let diag = ErgodicDiagnostics {
                sup_diffs: Vec::new(),
                rho_estimate: f64::NAN,
                k_estimate: f64::NAN,
                r_squared: f64::NAN,
                window: (0, 0),
            };
            Ok((BoundaryMeasure::from_vec(&w), diag))
        }
    }
}

/// Smooth probe `φ(x, z, ±) = x/L + z/Y ± 1` on `Gamma1`.
pub fn probe_vector(g: &Arc<Grid3>) -> Vec<f64> {
    let (l, y) = (g.x_bound(), g.yield_bound());
    SurfaceField::from_fn(g.clone(), Level::Gamma1, |x, z, up| {
        x / l + z / y + if up { 1.0 } else { -1.0 }
    })
    .to_vec()
}

/// Empirical law of the embedded chain: `n_paths` chains of cycles started at
/// `(0, ybar1, 0)`; hits of `Gamma1` after `burn_in` time and before
/// `horizon` are binned to the nearest surface node.
pub fn mc_chain_histogram(ctx: &CycleContext, mc: &McOptions) -> Result<Vec<f64>> {
    let p = ctx.params();
    let c = ctx.solvers.levels;
    mc.check(p)?;
    let g = ctx.grid().clone();
    let n = ctx.surface_len();
    let counts = sim::ensemble(mc, |rng| {
        let mut hist = vec![0u64; n];
        let mut s = State::new(0.0, c.ybar1, 0.0);
        while s.t < mc.horizon {
            let cy = sim::sample_cycle_with(rng, &s, &|_| 0.0, p, &c, mc)?;
            s = cy.hit_outer;
            if s.t >= mc.burn_in && s.t < mc.horizon {
                hist[nearest_surface_node(&g, s.x, s.z, s.y > 0.0)] += 1;
            }
        }
        Ok(hist)
    })?;
    let mut w = vec![0.0; n];
    for h in &counts {
        for (a, &b) in w.iter_mut().zip(h) {
            *a += b as f64;
        }
    }
    let total: f64 = w.iter().sum();
    if total == 0.0 {
        return Err(Error::InvalidOptions("no chain steps recorded; increase horizon".into()));
    }
    for v in &mut w {
        *v /= total;
    }
    Ok(w)
}

/// `ν(f) = ∫ T f dγ⋆ / ∫ T 1 dγ⋆`.
pub fn nu_functional(f: &Field3, ctx: &CycleContext, gamma: &BoundaryMeasure) -> Result<f64> {
    let one = Field3::constant(ctx.grid().clone(), Region::Full, 1.0);
    let denom = gamma.integrate(&ctx.apply_t(&one)?);
    if !(denom > 0.0) {
        return Err(Error::DegenerateDenominator(denom));
    }
    Ok(gamma.integrate(&ctx.apply_t(f)?) / denom)
}

/// Invariant measure of the discretized process.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantMeasure {
    /// Probability of each node.
    pub masses: Vec<f64>,
    /// Elastic density; zero on plastic nodes.
    pub elastic: Field3,
    /// Surface density on `z = Y` over the whole y-range; exactly zero for `y <= 0`.
    pub plastic_plus: FaceField,
    /// Surface density on `z = -Y`; exactly zero for `y >= 0`.
    pub plastic_minus: FaceField,
    /// Nodes whose mass fell in `[-tol, 0)` and was set to zero.
    pub clipped: usize,
}

pub fn is_plastic_node(g: &Grid3, n: usize) -> bool {
    let (_, j, k) = g.coords(n);
    let y = g.ys[j];
    (k == g.nz() - 1 && y > 0.0) || (k == 0 && y < 0.0)
}

impl InvariantMeasure {
    pub fn grid(&self) -> &Arc<Grid3> {
        &self.elastic.grid
    }

    /// `∫ f dν` with `f` sampled at the nodes.
    pub fn integrate_nodal(&self, f: &[f64]) -> f64 {
        self.masses.iter().zip(f).map(|(m, v)| m * v).sum()
    }

    pub fn integrate_fn(&self, f: impl Fn(f64, f64, f64) -> f64) -> f64 {
        let g = self.grid();
        (0..g.len())
            .map(|n| {
                let (x, y, z) = g.point(n);
                self.masses[n] * f(x, y, z)
            })
            .sum()
    }

    /// Quadrature of the density components with the grid weights.
    pub fn total_mass(&self) -> f64 {
        let g = self.grid();
        let e: f64 = (0..g.len()).map(|n| self.elastic.values[n] * g.cell_volume(n)).sum();
        let face = |f: &FaceField| -> f64 {
            let mut s = 0.0;
            for j in f.j_lo..=f.j_hi {
                for i in 0..g.nx() {
                    s += f.at(i, j) * g.face_area(i, j);
                }
            }
            s
        };
        e + face(&self.plastic_plus) + face(&self.plastic_minus)
    }

    pub fn plastic_mass(&self) -> f64 {
        let g = self.grid();
        (0..g.len()).filter(|&n| is_plastic_node(g, n)).map(|n| self.masses[n]).sum()
    }
}

/// Nodes that cannot reach `target` along positive rates.
fn unreachable_count(q: &linalg::CsrMatrix, target: usize) -> usize {
    let qt = q.transpose();
    let mut seen = vec![false; q.n_rows];
    let mut queue = VecDeque::from([target]);
    seen[target] = true;
    while let Some(v) = queue.pop_front() {
        // Predecessors of v: rows u with q[u][v] > 0, i.e. entries of row v of qᵀ.
        for (u, w) in qt.row(v) {
            if u != v && w > 0.0 && !seen[u] {
                seen[u] = true;
                queue.push_back(u);
            }
        }
    }
    seen.iter().filter(|s| !**s).count()
}

/// Stationary distribution of the full-grid generator (reflecting closure at
/// `y = ±y_max`) converted to densities.
pub fn solve_stationary_density(ctx: &CycleContext) -> Result<InvariantMeasure> {
    let g = ctx.grid().clone();
    let q = &ctx.solvers.op.matrix;
    let reference = g.node(g.nx() / 2, g.j_zero(), g.nz() / 2);
    let unreachable = unreachable_count(q, reference);
    if unreachable > 0 {
        return Err(Error::NullspaceDimension { unreachable });
    }
    let pi = linalg::stationary_distribution(q)?;
    let tol = ctx.tol();
    if let Some((node, &value)) = pi.iter().enumerate().find(|(_, &v)| v < -tol) {
        return Err(Error::NegativeDensity { node, value, tol });
    }
    let mut pi = pi;
    let mut clipped = 0;
    for v in pi.iter_mut().filter(|v| **v < 0.0) {
        *v = 0.0;
        clipped += 1;
    }
    let mut elastic = Field3::zeros(g.clone(), Region::Full);
    let top = g.ny() - 1;
    let mut plus = FaceField::zeros(g.clone(), Face::Plus, 0, top);
    let mut minus = FaceField::zeros(g.clone(), Face::Minus, 0, top);
    for n in 0..g.len() {
        let (i, j, k) = g.coords(n);
        if is_plastic_node(&g, n) {
            let d = pi[n] / g.face_area(i, j);
            if k == 0 {
                minus.set(i, j, d);
            } else {
                plus.set(i, j, d);
            }
        } else {
            elastic.values[n] = pi[n] / g.cell_volume(n);
        }
    }
    Ok(InvariantMeasure {
        masses: pi,
        elastic,
        plastic_plus: plus,
        plastic_minus: minus,
        clipped,
    })
}

/// `∫ Λ φ dν` over the elastic and both plastic components.
pub fn stationarity_residual(f: &dyn TestFunction, nu: &InvariantMeasure, p: &ModelParams) -> f64 {
    let g = nu.grid();
    (0..g.len())
        .map(|n| {
            let (x, y, z) = g.point(n);
            nu.masses[n] * generator_apply(f, &State::new(x, y, z), p)
        })
        .sum()
}

/// Total variation between two node distributions after grouping nodes by
/// `bin_of`.
pub fn binned_tv(a: &[f64], b: &[f64], bin_of: impl Fn(usize) -> usize, n_bins: usize) -> f64 {
    let mut da = vec![0.0; n_bins];
    let mut db = vec![0.0; n_bins];
    for (n, (x, y)) in a.iter().zip(b).enumerate() {
        let bin = bin_of(n);
        da[bin] += x;
        db[bin] += y;
    }
    0.5 * da.iter().zip(&db).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompleteSolution {
    /// Glued solution on the full grid.
    pub u: Field3,
    pub nu: f64,
    pub iterations: usize,
    /// Sup norms of the series terms on `Gamma1`.
    pub increments: Vec<f64>,
    /// `||L_h u + f||_∞ / (||L_h||_∞ ||u||_∞ + ||f||_∞)` off the `y_max` rows.
    pub residual: f64,
    /// Sup gap between the interior and exterior sums in `ybar <= |y| <= ybar1`.
    pub glue_gap: f64,
}

/// Solves `Λ u + f = 0` by the cycle series. Fails with `NotSolvable` when
/// `|ν(f)| > solvability_tol`.
pub fn solve_complete_problem(
    f: &Field3,
    ctx: &CycleContext,
    gamma: &BoundaryMeasure,
    solvability_tol: f64,
    max_terms: usize,
) -> Result<CompleteSolution> {
    let nu = nu_functional(f, ctx, gamma)?;
    if nu.abs() > solvability_tol {
        return Err(Error::NotSolvable(nu));
    }
    let s = &ctx.solvers;
    let g = ctx.grid().clone();
    let tol = ctx.tol();
    let chi0 = s.interior(None, Some(f))?.eta;
    let xi0 = s.exterior(Some(&chi0.surface(Level::Gamma)), Some(f))?.zeta;
    let mut chi_sum = chi0;
    let mut xi_sum = xi0.clone();
    let mut xi_k = xi0;
    let mut increments = vec![xi_k.surface(Level::Gamma1).sup_norm()];
    let mut iterations = 0;
    while increments.last().copied().unwrap_or(0.0) > tol {
        if iterations >= max_terms {
            return Err(Error::NoConvergence {
                max_iter: max_terms,
                residual: *increments.last().unwrap(),
            });
        }
        let chi_k = s.interior(Some(&xi_k.surface(Level::Gamma1)), None)?.eta;
        xi_k = s.exterior(Some(&chi_k.surface(Level::Gamma)), None)?.zeta;
        for n in 0..g.len() {
            chi_sum.values[n] += chi_k.values[n];
            xi_sum.values[n] += xi_k.values[n];
        }
        increments.push(xi_k.surface(Level::Gamma1).sup_norm());
        iterations += 1;
    }

    let mut u = Field3::zeros(g.clone(), Region::Full);
    let mut glue_gap: f64 = 0.0;
    for n in 0..g.len() {
        let y = g.point(n).1.abs();
        u.values[n] = if y < g.ybar1 { chi_sum.values[n] } else { xi_sum.values[n] };
        if y >= g.ybar && y <= g.ybar1 {
            glue_gap = glue_gap.max((chi_sum.values[n] - xi_sum.values[n]).abs());
        }
    }
    let lu = s.op.apply(&u.values);
    let top = g.ny() - 1;
    let mut r: f64 = 0.0;
    for n in 0..g.len() {
        let j = g.coords(n).1;
        if j != 0 && j != top {
            r = r.max((lu[n] + f.values[n]).abs());
        }
    }
    let scale = s.op.matrix.norm_inf() * u.sup_norm() + f.sup_norm();
    Ok(CompleteSolution {
        u,
        nu,
        iterations,
        increments,
        residual: if scale > 0.0 { r / scale } else { r },
        glue_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::model::{Constant, GaussianBump};

    fn ctx(nx: usize, nyb: usize, nz: usize) -> CycleContext {
        let p = ModelParams::default();
        let c = CycleLevels::default();
        let g = Arc::new(build_grid(&p, &c, nx, nyb, nz, 3.5).unwrap());
        CycleContext::new(g, &p, &c, &SolverOptions::direct()).unwrap()
    }

    #[test]
    fn p_is_stochastic_and_gamma_is_fixed() {
        let c = ctx(3, 2, 5);
        let p = c.p_matrix().unwrap();
        for row in &p {
            assert!(row.iter().all(|&v| v >= -1e-12));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let g = gamma_star(&p, 1e-13, 100_000).unwrap();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(fixed_point_residual(&p, &BoundaryMeasure::from_vec(&g)) < 1e-8);
    }

    #[test]
    fn cycle_formula_matches_stationary_density() {
        let c = ctx(3, 2, 5);
        let (gamma, _) = boundary_invariant_measure(&c, &ErgodicOptions::default(), &McOptions::default()).unwrap();
        let m = solve_stationary_density(&c).unwrap();
        assert!((m.total_mass() - 1.0).abs() < 1e-12);
        let f = Field3::from_fn(c.grid().clone(), Region::Full, |x, y, z| (x + y).sin() + z * z);
        let a = nu_functional(&f, &c, &gamma).unwrap();
        let b = m.integrate_nodal(&f.values);
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        let one = Field3::constant(c.grid().clone(), Region::Full, 1.0);
        assert_eq!(nu_functional(&one, &c, &gamma).unwrap(), 1.0);
    }

    #[test]
    fn density_structure() {
        let c = ctx(3, 2, 5);
        let m = solve_stationary_density(&c).unwrap();
        let g = c.grid();
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                if j <= g.j_zero() {
                    assert_eq!(m.plastic_plus.at(i, j), 0.0);
                }
                if j >= g.j_zero() {
                    assert_eq!(m.plastic_minus.at(i, j), 0.0);
                }
            }
        }
        assert!(m.plastic_mass() > 0.0);
        assert_eq!(stationarity_residual(&Constant(2.0), &m, c.params()), 0.0);
        let bump = GaussianBump { x_bound: 1.0, x_mode: true, y0: 0.2, width: 0.6, z_poly: [1.0, 0.5, 0.0] };
        assert!(stationarity_residual(&bump, &m, c.params()).abs() < 0.5);
    }

    #[test]
    fn complete_problem_behaviour() {
        let c = ctx(3, 2, 5);
        let (gamma, _) = boundary_invariant_measure(&c, &ErgodicOptions::default(), &McOptions::default()).unwrap();
        let one = Field3::constant(c.grid().clone(), Region::Full, 1.0);
        assert!(matches!(
            solve_complete_problem(&one, &c, &gamma, 1e-8, 1000),
            Err(Error::NotSolvable(v)) if v == 1.0
        ));
        let zero = Field3::zeros(c.grid().clone(), Region::Full);
        let z = solve_complete_problem(&zero, &c, &gamma, 1e-8, 1000).unwrap();
        assert_eq!(z.u.sup_norm(), 0.0);

        let mut f = Field3::from_fn(c.grid().clone(), Region::Full, |x, y, z| x * y + z);
        let nu = nu_functional(&f, &c, &gamma).unwrap();
        f.values.iter_mut().for_each(|v| *v -= nu);
        let sol = solve_complete_problem(&f, &c, &gamma, 1e-8, 1000).unwrap();
        assert!(sol.residual <= 10.0 * c.tol(), "{}", sol.residual);
        assert!(sol.glue_gap <= 2.0 * c.tol(), "{}", sol.glue_gap);
    }

    #[test]
    fn cycle_operator_properties() {
        let c = ctx(3, 2, 5);
        let g = c.grid().clone();
        let zero = Field3::zeros(g.clone(), Region::Full);
        assert_eq!(c.apply_t(&zero).unwrap().sup_norm(), 0.0);
        let pos = Field3::from_fn(g.clone(), Region::Full, |x, y, z| 1.0 + x * y * z);
        assert!(c.apply_t(&pos).unwrap().min() > 0.0);
        let phi = SurfaceField::from_fn(g.clone(), Level::Gamma1, |x, z, up| x * z + f64::from(u8::from(up)));
        let pphi = c.apply_p(&phi).unwrap();
        assert!(pphi.sup_norm() <= phi.sup_norm() + 2.0 * c.tol());
        assert!(pphi.min() >= -c.tol());

        let (gamma, diag) = boundary_invariant_measure(&c, &ErgodicOptions::default(), &McOptions::default()).unwrap();
        assert!(diag.rho_estimate > 0.0 && diag.r_squared >= 0.95);
        assert!(diag.max_lagged_ratio(5) < 1.0);
        let f1 = Field3::from_fn(g.clone(), Region::Full, |x, _, _| x * x);
        let f2 = Field3::from_fn(g.clone(), Region::Full, |_, y, z| (y * z).cos());
        let mut comb = f1.clone();
        for n in 0..g.len() {
            comb.values[n] = 2.0 * f1.values[n] - 3.0 * f2.values[n];
        }
        let lhs = nu_functional(&comb, &c, &gamma).unwrap();
        let rhs = 2.0 * nu_functional(&f1, &c, &gamma).unwrap() - 3.0 * nu_functional(&f2, &c, &gamma).unwrap();
        assert!((lhs - rhs).abs() <= 2.0 * c.tol());
    }

    #[test]
    fn fit_recovers_a_geometric_rate() {
        let pts: Vec<(f64, f64)> = (0..10).map(|n| (n as f64, 2.0f64.ln() - 0.7 * n as f64)).collect();
        let (s, b, r2) = log_linear_fit(&pts);
        assert!((s + 0.7).abs() < 1e-12 && (b - 2.0f64.ln()).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
