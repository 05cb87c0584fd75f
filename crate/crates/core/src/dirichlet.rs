//! Interior and exterior Dirichlet problems, their face sub-problems,
//! the barrier gauges and the reduced `(y, z)` reference solver.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::{
    assemble_generator, ExteriorMode, PreparedSystem, SolveStats, SolverOptions, SparseOperator,
    TruncationClosure,
};
use crate::grid::{Face, FaceField, Field3, Grid3, Level, Region, SurfaceField};
use crate::model::{CycleLevels, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct InteriorSolution {
    pub eta: Field3,
    pub beta_plus: FaceField,
    pub beta_minus: FaceField,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExteriorSolution {
    pub zeta: Field3,
    pub zeta_plus: FaceField,
    pub zeta_minus: FaceField,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
enum BandSystem {
    /// Slab systems in solve order.
    Marching(Vec<PreparedSystem>),
    Coupled(PreparedSystem),
}

impl BandSystem {
    fn solve_into(&self, u: &mut [f64], f: Option<&[f64]>) -> Result<SolveStats> {
        match self {
            BandSystem::Coupled(s) => s.solve_into(u, f),
            BandSystem::Marching(slabs) => {
                let mut st = SolveStats::default();
                for s in slabs {
                    st = st.merge(s.solve_into(u, f)?);
                }
                Ok(st)
            }
        }
    }
}

/// Assembled operator plus the prepared interior and exterior systems,
/// shared by repeated solves on one grid.
#[derive(Debug, Clone)]
pub struct DirichletSolvers {
    pub grid: Arc<Grid3>,
    pub params: ModelParams,
    pub levels: CycleLevels,
    pub opts: SolverOptions,
    pub op: SparseOperator,
    interior: PreparedSystem,
    up: BandSystem,
    down: BandSystem,
}

fn band_system(
    g: &Grid3,
    op: &SparseOperator,
    opts: &SolverOptions,
    upper: bool,
) -> Result<BandSystem> {
    let top = g.ny() - 1;
    let keep_edge = matches!(opts.truncation, TruncationClosure::Neumann);
    let js: Vec<usize> = if upper {
        let lo = g.j_level(Level::Gamma, true);
        (lo + 1..=top).filter(|&j| j < top || keep_edge).collect()
    } else {
        let hi = g.j_level(Level::Gamma, false);
        (0..hi).filter(|&j| j > 0 || keep_edge).collect()
    };
    let nodes_of = |ks: &[usize]| {
        let mut v = Vec::new();
        for &j in &js {
            for &k in ks {
                for i in 0..g.nx() {
                    v.push(g.node(i, j, k));
                }
            }
        }
        v.sort_unstable();
        v
    };
    let marching = opts.exterior_mode == ExteriorMode::Marching && opts.epsilon_z == 0.0;
    if marching {
        let order: Vec<usize> = if upper {
            (0..g.nz()).rev().collect()
        } else {
            (0..g.nz()).collect()
        };
        let slabs = order
            .into_iter()
            .map(|k| PreparedSystem::new(op, nodes_of(&[k]), opts))
            .collect::<Result<Vec<_>>>()?;
        Ok(BandSystem::Marching(slabs))
    } else {
        let ks: Vec<usize> = (0..g.nz()).collect();
        Ok(BandSystem::Coupled(PreparedSystem::new(op, nodes_of(&ks), opts)?))
    }
}

impl DirichletSolvers {
    pub fn new(
        grid: Arc<Grid3>,
        params: &ModelParams,
        levels: &CycleLevels,
        opts: &SolverOptions,
    ) -> Result<Self> {
        opts.check()?;
        let g = grid.as_ref();
        let op = assemble_generator(&grid, params, opts);
        let (lo, hi) = g.j_range(Region::Interior);
        let interior_nodes: Vec<usize> = (g.node(0, lo + 1, 0)..g.node(0, hi, 0)).collect();
        let interior = PreparedSystem::new(&op, interior_nodes, opts)?;
        let up = band_system(g, &op, opts, true)?;
        let down = band_system(g, &op, opts, false)?;
        Ok(Self {
            grid: grid.clone(),
            params: *params,
            levels: *levels,
            opts: *opts,
            op,
            interior,
            up,
            down,
        })
    }

    fn check_source(&self, f: Option<&Field3>) -> Result<()> {
        match f {
            Some(f) if f.values.len() != self.grid.len() => Err(Error::ShapeMismatch(format!(
                "source has {} values, grid has {} nodes",
                f.values.len(),
                self.grid.len()
            ))),
            _ => Ok(()),
        }
    }

    fn check_surface(&self, s: &SurfaceField, level: Level) -> Result<()> {
        let n = self.grid.nx() * self.grid.nz();
        if s.level != level || s.upper.len() != n || s.lower.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "surface data must be on {level:?} with {n} nodes per sheet"
            )));
        }
        Ok(())
    }

    /// `A u + f = 0` on `|y| < ybar1` with `u = phi` on both sheets of `Gamma1`.
    pub fn interior(&self, phi: Option<&SurfaceField>, f: Option<&Field3>) -> Result<InteriorSolution> {
        self.check_source(f)?;
        let g = &self.grid;
        let mut eta = Field3::zeros(g.clone(), Region::Interior);
        if let Some(phi) = phi {
            self.check_surface(phi, Level::Gamma1)?;
            eta.embed_surface(phi);
        }
        let st = self
            .interior
            .solve_into(&mut eta.values, f.map(|f| f.values.as_slice()))?;
        let (lo, hi) = g.j_range(Region::Interior);
        let j0 = g.j_zero();
        Ok(InteriorSolution {
            beta_plus: eta.face(Face::Plus, j0, hi),
            beta_minus: eta.face(Face::Minus, lo, j0),
            eta,
            residual: st.residual,
            iterations: st.iterations,
        })
    }

    /// `A u + f = 0` on `|y| > ybar` with `u = h` on both sheets of `Gamma`
    /// and the truncation closure at `|y| = y_max`.
    pub fn exterior(&self, h: Option<&SurfaceField>, f: Option<&Field3>) -> Result<ExteriorSolution> {
        self.check_source(f)?;
        let g = &self.grid;
        let mut zeta = Field3::zeros(g.clone(), Region::Exterior);
        if let Some(h) = h {
            self.check_surface(h, Level::Gamma)?;
            zeta.embed_surface(h);
        }
        if let TruncationClosure::Dirichlet(v) = self.opts.truncation {
            for j in [0, g.ny() - 1] {
                for k in 0..g.nz() {
                    for i in 0..g.nx() {
                        zeta.values[g.node(i, j, k)] = v;
                    }
                }
            }
        }
        let fv = f.map(|f| f.values.as_slice());
        let st = self
            .up
            .solve_into(&mut zeta.values, fv)?
            .merge(self.down.solve_into(&mut zeta.values, fv)?);
        let top = g.ny() - 1;
        Ok(ExteriorSolution {
            zeta_plus: zeta.face(Face::Plus, g.j_level(Level::Gamma, true), top),
            zeta_minus: zeta.face(Face::Minus, 0, g.j_level(Level::Gamma, false)),
            zeta,
            residual: st.residual,
            iterations: st.iterations,
        })
    }
}

pub fn solve_interior(
    phi: &SurfaceField,
    grid: &Arc<Grid3>,
    p: &ModelParams,
    c: &CycleLevels,
    opts: &SolverOptions,
) -> Result<InteriorSolution> {
    DirichletSolvers::new(grid.clone(), p, c, opts)?.interior(Some(phi), None)
}

pub fn solve_exterior(
    h: &SurfaceField,
    grid: &Arc<Grid3>,
    p: &ModelParams,
    c: &CycleLevels,
    opts: &SolverOptions,
) -> Result<ExteriorSolution> {
    DirichletSolvers::new(grid.clone(), p, c, opts)?.exterior(Some(h), None)
}

pub fn solve_interior_nonhom(
    f: &Field3,
    grid: &Arc<Grid3>,
    p: &ModelParams,
    c: &CycleLevels,
    opts: &SolverOptions,
) -> Result<InteriorSolution> {
    DirichletSolvers::new(grid.clone(), p, c, opts)?.interior(None, Some(f))
}

pub fn solve_exterior_nonhom(
    f: &Field3,
    grid: &Arc<Grid3>,
    p: &ModelParams,
    c: &CycleLevels,
    opts: &SolverOptions,
) -> Result<ExteriorSolution> {
    DirichletSolvers::new(grid.clone(), p, c, opts)?.exterior(None, Some(f))
}

/// Stand-alone solve of one plastic face strip. `near` holds the data on the
/// end nearest `y = 0`, `far` the data at the other end (`|y| = ybar1` for
/// the interior strip, `|y| = y_max` for the exterior one).
pub fn solve_face(
    near: &[f64],
    far: &[f64],
    face: Face,
    region: Region,
    grid: &Arc<Grid3>,
    p: &ModelParams,
    opts: &SolverOptions,
) -> Result<FaceField> {
    let g = grid.as_ref();
    let nx = g.nx();
    if near.len() != nx || far.len() != nx {
        return Err(Error::ShapeMismatch(format!("face data needs {nx} values per end")));
    }
    let upper = face == Face::Plus;
    let (j_near, j_far) = match region {
        Region::Interior => (g.j_zero(), g.j_level(Level::Gamma1, upper)),
        Region::ExteriorUp | Region::ExteriorDown | Region::Exterior => (
            g.j_level(Level::Gamma, upper),
            if upper { g.ny() - 1 } else { 0 },
        ),
        Region::Full => {
            return Err(Error::InvalidOptions("face strips live in the interior or exterior".into()))
        }
    };
    let k = if upper { g.nz() - 1 } else { 0 };
    let (lo, hi) = (j_near.min(j_far), j_near.max(j_far));
    let op = assemble_generator(grid, p, opts);
    let mut unknowns = Vec::new();
    for j in lo + 1..hi {
        for i in 0..nx {
            unknowns.push(g.node(i, j, k));
        }
    }
    let sys = PreparedSystem::new(&op, unknowns, opts)?;
    let mut u = vec![0.0; g.len()];
    for i in 0..nx {
        u[g.node(i, j_near, k)] = near[i];
        u[g.node(i, j_far, k)] = far[i];
    }
    sys.solve_into(&mut u, None)?;
    let mut out = FaceField::zeros(grid.clone(), face, lo, hi);
    for j in lo..=hi {
        for i in 0..nx {
            out.set(i, j, u[g.node(i, j, k)]);
        }
    }
    Ok(out)
}

// Gauss-Kronrod 7-15 abscissae and weights.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut gs = WG[3] * fc;
    for i in 0..7 {
        let v = f(c - h * XGK[i]) + f(c + h * XGK[i]);
        k += WGK[i] * v;
        if i % 2 == 1 {
            gs += WG[i / 2] * v;
        }
    }
    (k * h, (k - gs).abs() * h)
}

/// Adaptive Gauss-Kronrod quadrature to the given relative tolerance.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, e) = gk15(f, a, b);
        if e <= tol || depth == 0 {
            return v;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, 0.5 * tol, depth - 1) + rec(f, m, b, 0.5 * tol, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let (v, _) = gk15(f, a, b);
    rec(f, a, b, rel_tol * v.abs().max(f64::MIN_POSITIVE), 40)
}

/// `I(a, b) = ∫_a^b exp(c0 s² + 2kY s) ds / ∫_0^{ybar1} exp(c0 s² + 2kY s) ds`.
pub fn kernel_i(a: f64, b: f64, p: &ModelParams, c: &CycleLevels) -> f64 {
    Kernel::new(p, c).eval(a, b)
}

/// Kernel with the normalizing integral cached.
#[derive(Debug, Clone, Copy)]
pub struct Kernel {
    c0: f64,
    slope: f64,
    denom: f64,
}

impl Kernel {
    pub fn new(p: &ModelParams, c: &CycleLevels) -> Self {
        let mut k = Self {
            c0: p.c0,
            slope: 2.0 * p.k * p.yield_bound,
            denom: 1.0,
        };
        k.denom = k.raw(0.0, c.ybar1);
        k
    }
    fn raw(&self, a: f64, b: f64) -> f64 {
        let (c0, s) = (self.c0, self.slope);
        integrate(&|l: f64| (c0 * l * l + s * l).exp(), a, b, 1e-13)
    }
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        self.raw(a, b) / self.denom
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GaugeKind {
    PhiInterior,
    PsiExterior,
}

/// Supersolution used to bound the nonhomogeneous solutions.
/// Interior: `Φ = exp(λ (c0 k z² + c0 y²))`. Exterior: `Ψ(y) = γ ln|y| + K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierGauge {
    pub kind: GaugeKind,
    pub lambda: f64,
    pub gamma_scale: f64,
    pub k_offset: f64,
    /// False when the exterior inequality cannot hold for any `γ`.
    pub certified: bool,
}

impl BarrierGauge {
    pub fn phi_interior(p: &ModelParams, f_norm: f64) -> Self {
        let a = p.k * p.yield_bound + p.beta * p.x_bound;
        let lambda = (2.0 * f_norm / p.c0).max(1.0 + a * a / p.c0).max(1.0);
        Self {
            kind: GaugeKind::PhiInterior,
            lambda,
            gamma_scale: 0.0,
            k_offset: 0.0,
            certified: true,
        }
    }

    pub fn psi_exterior(p: &ModelParams, c: &CycleLevels, f_norm: f64) -> Self {
        let a = p.k * p.yield_bound + p.beta * p.x_bound;
        // Largest value of -c0 + a/y - 1/(2y²) over y >= ybar.
        let g_max = if a > 0.0 && 1.0 / a >= c.ybar {
            -p.c0 + 0.5 * a * a
        } else {
            -p.c0 + a / c.ybar - 0.5 / (c.ybar * c.ybar)
        };
        let certified = g_max < 0.0;
        let mut gamma = 2.0 * f_norm / p.c0;
        if certified {
            gamma = gamma.max(f_norm / -g_max);
        }
        let gamma = gamma.max(f64::MIN_POSITIVE);
        Self {
            kind: GaugeKind::PsiExterior,
            lambda: 0.0,
            gamma_scale: gamma,
            k_offset: -gamma * c.ybar.ln(),
            certified,
        }
    }

    pub fn value(&self, p: &ModelParams, y: f64, z: f64) -> f64 {
        match self.kind {
            GaugeKind::PhiInterior => (self.lambda * p.c0 * (p.k * z * z + y * y)).exp(),
            GaugeKind::PsiExterior => self.gamma_scale * y.abs().ln() + self.k_offset,
        }
    }

    /// `exp(λ (c0 k Y² + c0 ybar1²))`.
    pub fn interior_bound(&self, p: &ModelParams, c: &CycleLevels) -> f64 {
        (self.lambda * p.c0 * (p.k * p.yield_bound * p.yield_bound + c.ybar1 * c.ybar1)).exp()
    }

    /// Smallest margin of the discrete supersolution inequality over the
    /// unknown nodes of `region`: `L_h Φ - ||f||` for the interior gauge,
    /// `-L_h Ψ - ||f||` for the exterior one. Nonnegative certifies the bound.
    pub fn certificate(&self, s: &DirichletSolvers, f_norm: f64) -> f64 {
        let g = &s.grid;
        let (region, sign) = match self.kind {
            GaugeKind::PhiInterior => (Region::Interior, 1.0),
            GaugeKind::PsiExterior => (Region::Exterior, -1.0),
        };
        let w: Vec<f64> = (0..g.len())
            .map(|n| {
                let (_, y, z) = g.point(n);
                if region == Region::Exterior && y.abs() < g.ybar {
                    0.0
                } else {
                    self.value(&s.params, y, z)
                }
            })
            .collect();
        let lw = s.op.apply(&w);
        let (lo, hi) = g.j_range(Region::Interior);
        let top = g.ny() - 1;
        let (jm, jp) = (g.j_level(Level::Gamma, false), g.j_level(Level::Gamma, true));
        let neumann = matches!(s.opts.truncation, TruncationClosure::Neumann);
        (0..g.len())
            .filter(|&n| {
                let j = g.coords(n).1;
                match region {
                    Region::Interior => j > lo && j < hi,
                    _ => (j < jm || j > jp) && (neumann || (j > 0 && j < top)),
                }
            })
            .map(|n| sign * lw[n] - f_norm)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Solution of the reduced `(y, z)` problem whose face lines follow the
/// closed form `η(y, ±Y) = η_{±Y} I(|y|, ybar1) + φ(±Y) I(0, |y|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference1d {
    pub ys: Vec<f64>,
    pub zs: Vec<f64>,
    /// Values indexed `(j - j_lo) * nz + k` for `y` in `[-ybar1, ybar1]`.
    pub values: Vec<f64>,
    pub eta_y: f64,
    pub eta_minus_y: f64,
    /// Sup deviation between the face lines of the plain upwind solve and the
    /// closed form driven by that solve's own corner values.
    pub discrete_face_deviation: f64,
}

impl Reference1d {
    pub fn at(&self, y_index: usize, k: usize) -> f64 {
        self.values[y_index * self.zs.len() + k]
    }
}

/// Reduced reference for `beta = 0`. `phi_upper[k]`, `phi_lower[k]` give the
/// data at `y = ±ybar1` for each `z` node.
pub fn solve_1d_reference(
    phi_upper: &[f64],
    phi_lower: &[f64],
    grid: &Grid3,
    p: &ModelParams,
    c: &CycleLevels,
    opts: &SolverOptions,
) -> Result<Reference1d> {
    if p.beta != 0.0 {
        return Err(Error::InvalidOptions("the reduced reference requires beta = 0".into()));
    }
    let plane = Arc::new(grid.yz_plane());
    let g = plane.as_ref();
    let nz = g.nz();
    if phi_upper.len() != nz || phi_lower.len() != nz {
        return Err(Error::ShapeMismatch(format!("boundary data needs {nz} values")));
    }
    let op = assemble_generator(&plane, p, opts);
    let kernel = Kernel::new(p, c);
    let (lo, hi) = g.j_range(Region::Interior);
    let j0 = g.j_zero();
    let top = nz - 1;
    let n_plus = g.node(0, j0, top);
    let n_minus = g.node(0, j0, 0);
    let is_line = |j: usize, k: usize| (j > j0 && k == top) || (j < j0 && k == 0) || j == j0 && (k == 0 || k == top);
    let mut unknowns = Vec::new();
    for j in lo + 1..hi {
        for k in 0..nz {
            if !is_line(j, k) {
                unknowns.push(g.node(0, j, k));
            }
        }
    }
    let sys = PreparedSystem::new(&op, unknowns, opts)?;
    let i_near: Vec<f64> = g.ys.iter().map(|y| kernel.eval(0.0, y.abs().min(c.ybar1))).collect();
    let i_far: Vec<f64> = g.ys.iter().map(|y| kernel.eval(y.abs().min(c.ybar1), c.ybar1)).collect();

    // Three superposed solves: the data part and unit corner values.
    let build = |data: bool, cp: f64, cm: f64| -> Result<Vec<f64>> {
        let mut u = vec![0.0; g.len()];
        for k in 0..nz {
            if data {
                u[g.node(0, hi, k)] = phi_upper[k];
                u[g.node(0, lo, k)] = phi_lower[k];
            }
        }
        for j in lo + 1..hi {
            if j > j0 {
                let d = if data { phi_upper[top] * i_near[j] } else { 0.0 };
                u[g.node(0, j, top)] = cp * i_far[j] + d;
            } else if j < j0 {
                let d = if data { phi_lower[0] * i_near[j] } else { 0.0 };
                u[g.node(0, j, 0)] = cm * i_far[j] + d;
            }
        }
        u[n_plus] = cp;
        u[n_minus] = cm;
        sys.solve_into(&mut u, None)?;
        Ok(u)
    };
    let u0 = build(true, 0.0, 0.0)?;
    let u1 = build(false, 1.0, 0.0)?;
    let u2 = build(false, 0.0, 1.0)?;
    let row = |u: &[f64], n: usize| -> f64 { op.matrix.row(n).map(|(c, v)| v * u[c]).sum() };
    // Corner rows: r0 + a r1 + b r2 = 0 at both corner nodes.
    let (a11, a12, b1) = (row(&u1, n_plus), row(&u2, n_plus), -row(&u0, n_plus));
    let (a21, a22, b2) = (row(&u1, n_minus), row(&u2, n_minus), -row(&u0, n_minus));
    let det = a11 * a22 - a12 * a21;
    if det == 0.0 {
        return Err(Error::SingularMatrix { row: n_plus });
    }
    let eta_y = (b1 * a22 - a12 * b2) / det;
    let eta_minus_y = (a11 * b2 - a21 * b1) / det;
    let mut values = Vec::with_capacity((hi - lo + 1) * nz);
    for j in lo..=hi {
        for k in 0..nz {
            let n = g.node(0, j, k);
            values.push(u0[n] + eta_y * u1[n] + eta_minus_y * u2[n]);
        }
    }

    // Plain upwind solve on the same plane for the face-line comparison.
    let mut plain = vec![0.0; g.len()];
    for k in 0..nz {
        plain[g.node(0, hi, k)] = phi_upper[k];
        plain[g.node(0, lo, k)] = phi_lower[k];
    }
    let all: Vec<usize> = (g.node(0, lo + 1, 0)..g.node(0, hi, 0)).collect();
    PreparedSystem::new(&op, all, opts)?.solve_into(&mut plain, None)?;
    let (dp, dm) = (plain[n_plus], plain[n_minus]);
    let mut dev: f64 = 0.0;
    for j in lo + 1..hi {
        if j > j0 {
            let cf = dp * i_far[j] + phi_upper[top] * i_near[j];
            dev = dev.max((plain[g.node(0, j, top)] - cf).abs());
        } else if j < j0 {
            let cf = dm * i_far[j] + phi_lower[0] * i_near[j];
            dev = dev.max((plain[g.node(0, j, 0)] - cf).abs());
        }
    }

    Ok(Reference1d {
        ys: g.ys[lo..=hi].to_vec(),
        zs: g.zs.clone(),
        values,
        eta_y,
        eta_minus_y,
        discrete_face_deviation: dev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::fd::SolverMethod;

    fn params(beta: f64) -> ModelParams {
        ModelParams {
            alpha: 1.0,
            beta,
            c0: 2.0,
            k: 1.0,
            yield_bound: 0.5,
            x_bound: 1.0,
        }
    }
    const LEVELS: CycleLevels = CycleLevels { ybar: 0.5, ybar1: 1.0 };

    fn solvers(beta: f64, opts: SolverOptions) -> DirichletSolvers {
        let g = Arc::new(build_grid(&params(beta), &LEVELS, 5, 2, 7, 3.0).unwrap());
        DirichletSolvers::new(g, &params(beta), &LEVELS, &opts).unwrap()
    }

    /// Composite Simpson, doubled until successive values agree to 1e-12.
    fn simpson_oracle(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let mut n = 2;
        let mut prev = f64::NAN;
        loop {
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            let v = s * h / 3.0;
            if (v - prev).abs() <= 1e-12 * v.abs() {
                return v;
            }
            prev = v;
            n *= 2;
        }
    }

    #[test]
    fn kernel_examples() {
        let p = ModelParams { c0: 1.0, k: 1.0, yield_bound: 1.0, ..params(0.0) };
        let c = CycleLevels { ybar: 0.5, ybar1: 1.0 };
        assert!((kernel_i(0.0, 1.0, &p, &c) - 1.0).abs() < 1e-14);
        assert_eq!(kernel_i(0.3, 0.3, &p, &c), 0.0);
        let w = |l: f64| (l * l + 2.0 * l).exp();
        let oracle = simpson_oracle(w, 0.0, 0.5) / simpson_oracle(w, 0.0, 1.0);
        let v = kernel_i(0.0, 0.5, &p, &c);
        assert!((v - oracle).abs() < 1e-10 * oracle, "{v} vs {oracle}");
    }

    #[test]
    fn constants_are_preserved() {
        for method in [SolverMethod::Direct, SolverMethod::GaussSeidel] {
            let s = solvers(0.2, SolverOptions { method, tol: 1e-12, ..Default::default() });
            let g = s.grid.clone();
            let phi = SurfaceField::constant(g.clone(), Level::Gamma1, 1.7);
            let eta = s.interior(Some(&phi), None).unwrap().eta;
            assert!(eta.region_nodes().all(|n| (eta.values[n] - 1.7).abs() < 1e-9));
        }
        let opts = SolverOptions { truncation: TruncationClosure::Dirichlet(0.4), ..SolverOptions::direct() };
        let s = solvers(0.2, opts);
        let h = SurfaceField::constant(s.grid.clone(), Level::Gamma, 0.4);
        let z = s.exterior(Some(&h), None).unwrap().zeta;
        assert!(z.region_nodes().all(|n| (z.values[n] - 0.4).abs() < 1e-12));
        let h0 = SurfaceField::zeros(s.grid.clone(), Level::Gamma);
        let s0 = solvers(0.2, SolverOptions::direct());
        let z0 = s0.exterior(Some(&h0), None).unwrap();
        assert_eq!(z0.zeta.sup_norm(), 0.0);
    }

    #[test]
    fn marching_matches_coupled_solve() {
        let march = solvers(0.2, SolverOptions::direct());
        let coupled = solvers(0.2, SolverOptions { exterior_mode: ExteriorMode::Coupled, ..SolverOptions::direct() });
        let g = march.grid.clone();
        let h = SurfaceField::from_fn(g.clone(), Level::Gamma, |x, z, up| {
            (3.0 * x).sin() + z * if up { 1.0 } else { -0.5 }
        });
        let f = Field3::from_fn(g.clone(), Region::Full, |x, y, z| x * y + z);
        let a = march.exterior(Some(&h), Some(&f)).unwrap().zeta;
        let b = coupled.exterior(Some(&h), Some(&f)).unwrap().zeta;
        for n in a.region_nodes() {
            assert!((a.values[n] - b.values[n]).abs() < 1e-11);
        }
    }

    #[test]
    fn face_solve_matches_coupled_strip() {
        let s = solvers(0.2, SolverOptions::direct());
        let g = s.grid.clone();
        let phi = SurfaceField::from_fn(g.clone(), Level::Gamma1, |x, z, up| x + z * z + if up { 1.0 } else { 0.0 });
        let sol = s.interior(Some(&phi), None).unwrap();
        let nx = g.nx();
        let j0 = g.j_zero();
        let jt = g.j_level(Level::Gamma1, true);
        let near: Vec<f64> = (0..nx).map(|i| sol.beta_plus.at(i, j0)).collect();
        let far: Vec<f64> = (0..nx).map(|i| sol.beta_plus.at(i, jt)).collect();
        let face = solve_face(&near, &far, Face::Plus, Region::Interior, &g, &s.params, &s.opts).unwrap();
        for (a, b) in face.values.iter().zip(&sol.beta_plus.values) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = vec![0.0; nx];
        let z = solve_face(&zero, &zero, Face::Minus, Region::Exterior, &g, &s.params, &s.opts).unwrap();
        assert_eq!(z.sup_norm(), 0.0);
    }

    #[test]
    fn upper_indicator_is_one_half_by_symmetry() {
        let s = solvers(0.0, SolverOptions::direct());
        let g = s.grid.clone();
        let phi = SurfaceField::from_fn(g.clone(), Level::Gamma1, |_, _, up| if up { 1.0 } else { 0.0 });
        let eta = s.interior(Some(&phi), None).unwrap().eta;
        let v = eta.at(2, g.j_zero(), g.nz() / 2);
        assert!((v - 0.5).abs() < 1e-12, "{v}");
    }

    #[test]
    fn zero_source_gives_zero_and_barriers_hold() {
        let s = solvers(0.2, SolverOptions::direct());
        let g = s.grid.clone();
        let zero = Field3::zeros(g.clone(), Region::Full);
        assert_eq!(s.interior(None, Some(&zero)).unwrap().eta.sup_norm(), 0.0);
        assert_eq!(s.exterior(None, Some(&zero)).unwrap().zeta.sup_norm(), 0.0);

        let f = Field3::from_fn(g.clone(), Region::Full, |x, y, z| 1.0 + 0.5 * (x + y * z).sin());
        let f_norm = f.sup_norm();
        let phi = BarrierGauge::phi_interior(&s.params, f_norm);
        assert!(phi.certificate(&s, f_norm) >= 0.0);
        let chi = s.interior(None, Some(&f)).unwrap().eta;
        assert!(chi.sup_norm() <= phi.interior_bound(&s.params, &s.levels));

        let psi = BarrierGauge::psi_exterior(&s.params, &s.levels, f_norm);
        assert!(psi.certified);
        assert!(psi.certificate(&s, f_norm) >= 0.0);
        let xi = s.exterior(None, Some(&f)).unwrap().zeta;
        for n in xi.region_nodes() {
            let (_, y, z) = g.point(n);
            assert!(xi.values[n].abs() <= psi.value(&s.params, y, z) + 1e-12);
        }
    }

    #[test]
    fn reference_reproduces_closed_form_lines() {
        let p = params(0.0);
        let g = build_grid(&p, &LEVELS, 3, 4, 9, 2.0).unwrap();
        let up: Vec<f64> = g.zs.iter().map(|z| 1.0 + z).collect();
        let dn: Vec<f64> = g.zs.iter().map(|z| z * z).collect();
        let r = solve_1d_reference(&up, &dn, &g, &p, &LEVELS, &SolverOptions::direct()).unwrap();
        let w = |l: f64| (2.0 * l * l + l).exp();
        let denom = simpson_oracle(w, 0.0, 1.0);
        let top = r.zs.len() - 1;
        let j0 = r.ys.iter().position(|&y| y == 0.0).unwrap();
        assert!((r.at(j0, top) - r.eta_y).abs() < 1e-14);
        for (jj, &y) in r.ys.iter().enumerate() {
            if y > 0.0 && y < 1.0 {
                let i0y = simpson_oracle(w, 0.0, y) / denom;
                let expect = r.eta_y * (1.0 - i0y) + up[top] * i0y;
                assert!((r.at(jj, top) - expect).abs() < 1e-9);
            }
        }
        let c = solve_1d_reference(&[2.0; 9], &[2.0; 9], &g, &p, &LEVELS, &SolverOptions::direct()).unwrap();
        assert!((c.eta_y - 2.0).abs() < 1e-12 && (c.eta_minus_y - 2.0).abs() < 1e-12);
        assert!(c.values.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }
}
