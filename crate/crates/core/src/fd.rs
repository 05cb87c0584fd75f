//! Monotone upwind discretization of the generator and the prepared linear
//! systems built from it.
//!
//! Every assembled row is a generator row: nonnegative off-diagonal rates and
//! zero row sum. Boundary conditions other than the `x = ±L` mirror and the
//! reflecting `y = ±y_max` closure are imposed by the solvers, which move the
//! columns of prescribed nodes to the right-hand side.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field3, Grid3};
use crate::linalg::{self, BandedLu, CsrMatrix};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowKind {
    InteriorA,
    FacePlus,
    FaceMinus,
    Dirichlet,
    NeumannX,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    /// Relaxed lexicographic Gauss-Seidel.
    GaussSeidel,
    /// Band LU without pivoting, factored once per system.
    #[default]
    Direct,
    /// Dense LU with partial pivoting (small systems only).
    DenseLu,
}

/// Condition imposed on the rows `y = ±y_max` of solver problems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruncationClosure {
    Dirichlet(f64),
    /// Reflecting mirror closure.
    Neumann,
}

impl Default for TruncationClosure {
    fn default() -> Self {
        TruncationClosure::Neumann
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExteriorMode {
    /// Slab-by-slab solves in `z` away from the plastic face.
    #[default]
    Marching,
    Coupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub relaxation: f64,
    pub epsilon_z: f64,
    pub method: SolverMethod,
    pub truncation: TruncationClosure,
    pub exterior_mode: ExteriorMode,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200_000,
            relaxation: 1.0,
            epsilon_z: 0.0,
            method: SolverMethod::default(),
            truncation: TruncationClosure::default(),
            exterior_mode: ExteriorMode::default(),
        }
    }
}

impl SolverOptions {
    pub fn direct() -> Self {
        Self {
            method: SolverMethod::Direct,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.tol > 0.0) {
            bad.push("tol must be positive");
        }
        if self.max_iter == 0 {
            bad.push("max_iter must be positive");
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            bad.push("relaxation must lie in (0, 2)");
        }
        if !(self.epsilon_z >= 0.0) {
            bad.push("epsilon_z must be nonnegative");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidOptions(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    pub grid: Arc<Grid3>,
    pub matrix: CsrMatrix,
    pub row_kind: Vec<RowKind>,
}

impl SparseOperator {
    pub fn n(&self) -> usize {
        self.matrix.n_rows
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.matrix.matvec(u)
    }
}

pub fn assemble_generator(grid: &Arc<Grid3>, p: &ModelParams, opts: &SolverOptions) -> SparseOperator {
    let g = grid.as_ref();
    let (nx, ny, nz) = (g.nx(), g.ny(), g.nz());
    let hz = g.zs[1] - g.zs[0];
    let eps = opts.epsilon_z;
    let mut rows = Vec::with_capacity(g.len());
    let mut kinds = Vec::with_capacity(g.len());
    for j in 0..ny {
        for k in 0..nz {
            for i in 0..nx {
                let n = g.node(i, j, k);
                let (x, y, z) = (g.xs[i], g.ys[j], g.zs[k]);
                let face_plus = k == nz - 1 && y > 0.0;
                let face_minus = k == 0 && y < 0.0;
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(9);

                if nx > 1 {
                    let hx = g.xs[1] - g.xs[0];
                    let bx = -p.alpha * x;
                    let d = 0.5 / (hx * hx);
                    if i == 0 {
                        row.push((n + 1, 2.0 * d + bx.abs() / hx));
                    } else if i == nx - 1 {
                        row.push((n - 1, 2.0 * d + bx.abs() / hx));
                    } else {
                        let (up, dn) = if bx > 0.0 { (bx / hx, 0.0) } else { (0.0, -bx / hx) };
                        row.push((n + 1, d + up));
                        row.push((n - 1, d + dn));
                    }
                }

                let by = -(p.beta * x + p.c0 * y + p.k * z);
                let stride = nx * nz;
                if j == 0 || j == ny - 1 {
                    let (nb, h) = if j == 0 {
                        (n + stride, g.ys[1] - g.ys[0])
                    } else {
                        (n - stride, g.ys[j] - g.ys[j - 1])
                    };
                    row.push((nb, 1.0 / (h * h) + by.abs() / h));
                } else {
                    let hp = g.ys[j + 1] - g.ys[j];
                    let hm = g.ys[j] - g.ys[j - 1];
                    let (up, dn) = if by > 0.0 { (by / hp, 0.0) } else { (0.0, -by / hm) };
                    row.push((n + stride, 1.0 / (hp * (hp + hm)) + up));
                    row.push((n - stride, 1.0 / (hm * (hp + hm)) + dn));
                }

                if !(face_plus || face_minus) {
                    if y > 0.0 && k < nz - 1 {
                        row.push((n + nx, y / hz));
                    } else if y < 0.0 && k > 0 {
                        row.push((n - nx, -y / hz));
                    }
                    if eps > 0.0 {
                        let d = 0.5 * eps / (hz * hz);
                        if k == 0 {
                            row.push((n + nx, 2.0 * d));
                        } else if k == nz - 1 {
                            row.push((n - nx, 2.0 * d));
                        } else {
                            row.push((n + nx, d));
                            row.push((n - nx, d));
                        }
                    }
                }

                let diag: f64 = -row.iter().map(|e| e.1).sum::<f64>();
                row.push((n, diag));
                rows.push(row);
                kinds.push(if face_plus {
                    RowKind::FacePlus
                } else if face_minus {
                    RowKind::FaceMinus
                } else if nx > 1 && (i == 0 || i == nx - 1) {
                    RowKind::NeumannX
                } else {
                    RowKind::InteriorA
                });
            }
        }
    }
    SparseOperator {
        grid: grid.clone(),
        matrix: CsrMatrix::from_rows(g.len(), rows),
        row_kind: kinds,
    }
}

/// Structural transpose. Row tags are carried over unchanged so that the
/// transpose of the transpose is the original operator.
pub fn transpose_generator(op: &SparseOperator) -> SparseOperator {
    SparseOperator {
        grid: op.grid.clone(),
        matrix: op.matrix.transpose(),
        row_kind: op.row_kind.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveStats {
    pub residual: f64,
    pub iterations: usize,
}

impl SolveStats {
    pub fn merge(self, other: SolveStats) -> SolveStats {
        SolveStats {
            residual: self.residual.max(other.residual),
            iterations: self.iterations + other.iterations,
        }
    }
}

#[derive(Debug, Clone)]
enum Factor {
    Iterative,
    Banded(BandedLu),
    Dense(Vec<Vec<f64>>),
}

/// The system `L u + f = 0` restricted to a set of unknown nodes; every
/// other column is treated as known data. Prepared once, solved many times.
#[derive(Debug, Clone)]
pub struct PreparedSystem {
    unknowns: Vec<usize>,
    a: CsrMatrix,
    coupling: CsrMatrix,
    factor: Factor,
    opts: SolverOptions,
}

impl PreparedSystem {
    pub fn new(op: &SparseOperator, unknowns: Vec<usize>, opts: &SolverOptions) -> Result<Self> {
        opts.check()?;
        let mut local = vec![u32::MAX; op.n()];
        for (l, &g) in unknowns.iter().enumerate() {
            local[g] = l as u32;
        }
        let mut a_rows = Vec::with_capacity(unknowns.len());
        let mut c_rows = Vec::with_capacity(unknowns.len());
        for &g in &unknowns {
            let mut ar = Vec::new();
            let mut cr = Vec::new();
            for (c, v) in op.matrix.row(g) {
                match local[c] {
                    u32::MAX => cr.push((c, v)),
                    l => ar.push((l as usize, -v)),
                }
            }
            a_rows.push(ar);
            c_rows.push(cr);
        }
        let a = CsrMatrix::from_rows(unknowns.len(), a_rows);
        let coupling = CsrMatrix::from_rows(op.n(), c_rows);
        let factor = match opts.method {
            SolverMethod::GaussSeidel => Factor::Iterative,
            SolverMethod::Direct => Factor::Banded(BandedLu::factor(&a)?),
            SolverMethod::DenseLu => Factor::Dense(a.to_dense()),
        };
        Ok(Self {
            unknowns,
            a,
            coupling,
            factor,
            opts: *opts,
        })
    }

    pub fn unknowns(&self) -> &[usize] {
        &self.unknowns
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.a
    }

    /// Solves for the unknown entries of `u` in place; the remaining
    /// entries of `u` provide the data. `f` is a global source vector.
    pub fn solve_into(&self, u: &mut [f64], f: Option<&[f64]>) -> Result<SolveStats> {
        let mut b = self.coupling.matvec(u);
        if let Some(f) = f {
            for (bi, &g) in b.iter_mut().zip(&self.unknowns) {
                *bi += f[g];
            }
        }
        let (x, iterations) = match &self.factor {
            Factor::Iterative => {
                let mut x: Vec<f64> = self.unknowns.iter().map(|&g| u[g]).collect();
                let (it, _) = linalg::gauss_seidel(
                    &self.a,
                    &b,
                    &mut x,
                    self.opts.relaxation,
                    self.opts.tol,
                    self.opts.max_iter,
                )?;
                (x, it)
            }
            Factor::Banded(lu) => (lu.solve(&b), 1),
            Factor::Dense(d) => (linalg::dense_solve(d, &b)?, 1),
        };
        let residual = linalg::relative_residual(&self.a, &x, &b);
        for (&g, v) in self.unknowns.iter().zip(x) {
            u[g] = v;
        }
        Ok(SolveStats { residual, iterations })
    }
}

/// Solves `L u + f = 0` on the nodes of `rhs.region` that are not masked;
/// masked nodes take `values`.
pub fn solve_linear(
    op: &SparseOperator,
    rhs: &Field3,
    mask: &[bool],
    values: &[f64],
    opts: &SolverOptions,
) -> Result<(Field3, SolveStats)> {
    let n = op.n();
    if mask.len() != n || values.len() != n || rhs.values.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "operator has {n} nodes, mask {} values {} rhs {}",
            mask.len(),
            values.len(),
            rhs.values.len()
        )));
    }
    let unknowns: Vec<usize> = rhs.region_nodes().filter(|&g| !mask[g]).collect();
    let sys = PreparedSystem::new(op, unknowns, opts)?;
    let mut out = Field3::zeros(rhs.grid.clone(), rhs.region);
    for g in 0..n {
        if mask[g] {
            out.values[g] = values[g];
        }
    }
    let stats = sys.solve_into(&mut out.values, Some(&rhs.values))?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, Region};
    use crate::model::{generator_apply, CycleLevels, GaussianBump, State};

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

    fn grid(nx: usize, nyb: usize, nz: usize) -> Arc<Grid3> {
        let c = CycleLevels { ybar: 0.5, ybar1: 1.0 };
        Arc::new(build_grid(&params(0.2), &c, nx, nyb, nz, 2.0).unwrap())
    }

    #[test]
    fn generator_rows_are_monotone_with_zero_sum() {
        for eps in [0.0, 1e-2] {
            let g = grid(5, 2, 7);
            let opts = SolverOptions { epsilon_z: eps, ..Default::default() };
            let op = assemble_generator(&g, &params(0.2), &opts);
            for r in 0..op.n() {
                let mut s = 0.0;
                for (c, v) in op.matrix.row(r) {
                    s += v;
                    if c != r {
                        assert!(v >= 0.0);
                    }
                }
                assert!(s.abs() < 1e-12, "row {r} sums to {s}");
            }
            let ones = vec![1.0; op.n()];
            assert!(linalg::sup(&op.apply(&ones)) < 1e-12);
        }
    }

    #[test]
    fn face_rows_have_no_z_coupling() {
        let g = grid(3, 2, 5);
        let op = assemble_generator(&g, &params(0.2), &SolverOptions::default());
        for r in 0..op.n() {
            let (_, j, k) = g.coords(r);
            if op.row_kind[r] == RowKind::FacePlus {
                assert!(g.ys[j] > 0.0 && k == g.nz() - 1);
                for (c, _) in op.matrix.row(r) {
                    assert_eq!(g.coords(c).2, k);
                }
            }
        }
        // Wrong-sign node on the upper face points inward.
        let n = g.node(1, 1, g.nz() - 1);
        assert_eq!(op.row_kind[n], RowKind::InteriorA);
        assert!(op.matrix.get(n, n - g.nx()) > 0.0);
    }

    #[test]
    fn transpose_is_involution_and_adjoint() {
        let g = grid(4, 1, 5);
        let op = assemble_generator(&g, &params(0.2), &SolverOptions::default());
        let t = transpose_generator(&op);
        assert_eq!(transpose_generator(&t), op);
        let ones = vec![1.0; op.n()];
        let col_sums = t.matrix.transpose().matvec(&ones);
        assert!(linalg::sup(&col_sums) < 1e-12);
        let u: Vec<f64> = (0..op.n()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let v: Vec<f64> = (0..op.n()).map(|i| ((i * 13) % 7) as f64 * 0.3).collect();
        let lhs: f64 = op.apply(&u).iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(t.apply(&v)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    fn consistency_error(nx: usize, nyb: usize, nz: usize) -> f64 {
        let p = params(0.2);
        let g = grid(nx, nyb, nz);
        let op = assemble_generator(&g, &p, &SolverOptions::default());
        let f = GaussianBump {
            x_bound: 1.0,
            x_mode: true,
            y0: 0.3,
            width: 0.5,
            z_poly: [0.2, 0.7, -0.4],
        };
        use crate::model::TestFunction;
        let u: Vec<f64> = (0..g.len())
            .map(|n| {
                let (x, y, z) = g.point(n);
                f.value(x, y, z)
            })
            .collect();
        let lu = op.apply(&u);
        let mut err: f64 = 0.0;
        for n in 0..g.len() {
            let (_, j, _) = g.coords(n);
            if j == 0 || j == g.ny() - 1 {
                continue;
            }
            let (x, y, z) = g.point(n);
            let exact = generator_apply(&f, &State::new(x, y, z), &p);
            err = err.max((lu[n] - exact).abs());
        }
        err
    }

    #[test]
    fn first_order_consistency() {
        let e1 = consistency_error(9, 4, 9);
        let e2 = consistency_error(17, 8, 17);
        assert!(e1 / e2 >= 1.8, "ratio {} ({e1}, {e2})", e1 / e2);
    }

    #[test]
    fn constant_boundary_data_gives_constant_solution() {
        let p = params(0.2);
        let g = grid(5, 2, 5);
        let op = assemble_generator(&g, &p, &SolverOptions::default());
        let rhs = Field3::zeros(g.clone(), Region::Interior);
        let (lo, hi) = g.j_range(Region::Interior);
        let mask: Vec<bool> = (0..g.len())
            .map(|n| {
                let j = g.coords(n).1;
                j == lo || j == hi
            })
            .collect();
        let vals = vec![3.25; g.len()];
        for method in [SolverMethod::GaussSeidel, SolverMethod::Direct, SolverMethod::DenseLu] {
            let opts = SolverOptions { method, tol: 1e-13, ..Default::default() };
            let (u, _) = solve_linear(&op, &rhs, &mask, &vals, &opts).unwrap();
            for n in u.region_nodes() {
                assert!((u.values[n] - 3.25).abs() < 1e-10);
            }
        }
    }
}
