//! Subcommand pipelines. Each command fills a [`RunReport`] and writes its
//! CSV outputs plus `report.json` and `log.txt` into the output directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::ValueEnum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dirichlet::{solve_1d_reference, BarrierGauge, DirichletSolvers};
use crate::ergodic::{
    self, binned_tv, coarse_bin, matrix_route, nearest_node, nu_functional, solve_complete_problem,
    solve_stationary_density, stationarity_residual, BoundaryMeasure, CycleContext, InvariantMeasure,
    N_COARSE_BINS,
};
use crate::error::{Error, Result};
use crate::export;
use crate::grid::{Field3, Grid3, Level, Region, SurfaceField};
use crate::model::{phase_of, validate_params, GaussianBump, Phase, State, TestFunction};
use crate::report::RunReport;
use crate::sim::{self, McOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Simulate,
    SolveInterior,
    SolveExterior,
    SolveInteriorSrc,
    SolveExteriorSrc,
    ApplyP,
    ApplyT,
    GammaStar,
    Nu,
    FokkerPlanck,
    Complete,
    Validate,
    OracleSuite,
}

impl Command {
    pub fn name(self) -> String {
        self.to_possible_value().expect("no skipped variants").get_name().to_string()
    }
}

/// Runs `cmd` and writes every output, including the report, into
/// `cfg.output.dir`. Failures are recorded in the returned report.
pub fn run_command(cmd: Command, cfg: &RunConfig) -> RunReport {
    let mut report = RunReport::new(&cmd.name(), cfg);
    let dir = cfg.output.dir.clone();
    let mut run = Run {
        cfg,
        dir: dir.clone(),
        report: &mut report,
    };
    if let Err(e) = run.exec(cmd) {
        report.fail(&e);
    }
    if let Err(e) = report.write(&dir) {
        report.fail(&e);
    }
    report
}

struct Run<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    report: &'a mut RunReport,
}

impl Run<'_> {
    fn tol(&self) -> f64 {
        self.cfg.solver.tol
    }

    fn emit(&mut self, name: &str, text: &str) -> Result<()> {
        if self.cfg.output.csv {
            let path = self.dir.join(name);
            std::fs::create_dir_all(&self.dir)?;
            std::fs::write(&path, text)?;
            self.report.outputs.push(name.to_string());
        }
        Ok(())
    }

    fn grid(&mut self) -> Result<Arc<Grid3>> {
        self.cfg.build_grid()
    }

    fn solvers(&mut self, grid: &Arc<Grid3>, name: &str) -> Result<DirichletSolvers> {
        let (cfg, g) = (self.cfg, grid.clone());
        self.report.stage(name, || {
            let s = DirichletSolvers::new(g, &cfg.model, &cfg.cycle, &cfg.solver)?;
            Ok((s, 0.0, 0))
        })
    }

    fn context(&mut self, grid: &Arc<Grid3>, name: &str) -> Result<CycleContext> {
        Ok(CycleContext {
            solvers: self.solvers(grid, name)?,
        })
    }

    fn exec(&mut self, cmd: Command) -> Result<()> {
        self.cfg.validate()?;
        for w in validate_params(&self.cfg.model, &self.cfg.cycle).warnings {
            self.report.note(format!("warning: {w}"));
        }
        match cmd {
            Command::Simulate => self.simulate(),
            Command::SolveInterior => self.solve_homogeneous(true),
            Command::SolveExterior => self.solve_homogeneous(false),
            Command::SolveInteriorSrc => self.solve_interior_src(),
            Command::SolveExteriorSrc => self.solve_exterior_src(),
            Command::ApplyP => self.apply_p(),
            Command::ApplyT => self.apply_t(),
            Command::GammaStar => self.gamma_star().map(|_| ()),
            Command::Nu => self.nu(),
            Command::FokkerPlanck => self.fokker_planck().map(|_| ()),
            Command::Complete => self.complete(),
            Command::Validate => self.validate(),
            Command::OracleSuite => self.oracle_suite(),
        }
    }

    fn require_checks(&self) -> Result<()> {
        let failed: Vec<String> = self
            .report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.clone())
            .collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(failed))
        }
    }

    fn simulate(&mut self) -> Result<()> {
        let (p, mc) = (self.cfg.model, self.cfg.mc);
        let [x, y, z] = self.cfg.data.start;
        let s0 = State::new(x, y, z);
        if !s0.is_admissible(&p) {
            return Err(Error::InvalidOptions(format!("start {:?} is not admissible", self.cfg.data.start)));
        }
        mc.check(&p)?;
        let steps = (mc.horizon / mc.dt).round() as usize;
        let stride = (steps / 5000).max(1);
        let mut rows = Vec::new();
        let mut counts = [0usize; 3];
        let mut n = 0usize;
        self.report.stage("simulate", || {
            sim::simulate_path(&s0, &p, &mc, |s| {
                n += 1;
                counts[match phase_of(s, &p) {
                    Phase::Elastic => 0,
                    Phase::PlasticPlus => 1,
                    Phase::PlasticMinus => 2,
                }] += 1;
                if n % stride == 0 {
                    rows.push(vec![s.t, s.x, s.y, s.z]);
                }
            });
            Ok(((), 0.0, n))
        })?;
        let total = n.max(1) as f64;
        self.report.value("fraction_elastic", counts[0] as f64 / total);
        self.report.value("fraction_plastic_plus", counts[1] as f64 / total);
        self.report.value("fraction_plastic_minus", counts[2] as f64 / total);
        if self.cfg.output.csv {
            export::write_numeric(&self.dir.join("path.csv"), "t,x,y,z", &rows)?;
            self.report.outputs.push("path.csv".into());
        }
        Ok(())
    }

    fn solve_homogeneous(&mut self, interior: bool) -> Result<()> {
        let g = self.grid()?;
        let s = self.solvers(&g, "assemble")?;
        let data = self.cfg.data.boundary.bind(&self.cfg.model);
        let level = if interior { Level::Gamma1 } else { Level::Gamma };
        let phi = data.surface(&g, level);
        let (field, faces, name) = if interior {
            let sol = self.report.stage("interior", || {
                let r = s.interior(Some(&phi), None)?;
                let (res, it) = (r.residual, r.iterations);
                Ok((r, res, it))
            })?;
            (sol.eta, [sol.beta_plus, sol.beta_minus], "interior")
        } else {
            let sol = self.report.stage("exterior", || {
                let r = s.exterior(Some(&phi), None)?;
                let (res, it) = (r.residual, r.iterations);
                Ok((r, res, it))
            })?;
            (sol.zeta, [sol.zeta_plus, sol.zeta_minus], "exterior")
        };
        self.report.check_le(
            "maximum principle",
            field.sup_norm(),
            phi.sup_norm() + 10.0 * self.tol(),
        );
        self.emit("boundary_data.csv", &export::surface_csv(&phi))?;
        self.emit(&format!("{name}.csv"), &export::volume_csv(&field))?;
        self.emit(&format!("{name}_faces.csv"), &export::faces_csv(&[&faces[0], &faces[1]]))?;
        self.require_checks()
    }

    fn source(&self, g: &Arc<Grid3>) -> Field3 {
        self.cfg.data.source.bind(&self.cfg.model).field(g)
    }

    fn solve_interior_src(&mut self) -> Result<()> {
        let g = self.grid()?;
        let s = self.solvers(&g, "assemble")?;
        let f = self.source(&g);
        let sol = self.report.stage("interior-source", || {
            let r = s.interior(None, Some(&f))?;
            let (res, it) = (r.residual, r.iterations);
            Ok((r, res, it))
        })?;
        let (p, c) = (&self.cfg.model, &self.cfg.cycle);
        let gauge = BarrierGauge::phi_interior(p, f.sup_norm());
        self.report.value("lambda", gauge.lambda);
        let cert = gauge.certificate(&s, f.sup_norm());
        self.report.check("interior barrier certificate", cert >= 0.0, cert, 0.0);
        self.report.check_le("interior barrier bound", sol.eta.sup_norm(), gauge.interior_bound(p, c));
        self.emit("interior_source.csv", &export::volume_csv(&sol.eta))?;
        self.emit(
            "interior_source_faces.csv",
            &export::faces_csv(&[&sol.beta_plus, &sol.beta_minus]),
        )?;
        self.require_checks()
    }

    fn solve_exterior_src(&mut self) -> Result<()> {
        let g = self.grid()?;
        let s = self.solvers(&g, "assemble")?;
        let f = self.source(&g);
        let sol = self.report.stage("exterior-source", || {
            let r = s.exterior(None, Some(&f))?;
            let (res, it) = (r.residual, r.iterations);
            Ok((r, res, it))
        })?;
        let gauge = BarrierGauge::psi_exterior(&self.cfg.model, &self.cfg.cycle, f.sup_norm());
        self.report.value("gamma", gauge.gamma_scale);
        self.report.value("k_offset", gauge.k_offset);
        if gauge.certified {
            let cert = gauge.certificate(&s, f.sup_norm());
            self.report.check("exterior barrier certificate", cert >= 0.0, cert, 0.0);
            let excess = psi_excess(&sol.zeta, &gauge, &self.cfg.model);
            self.report.check_le("exterior barrier nodewise", excess, 10.0 * self.tol());
        } else {
            self.report.note("exterior gauge not certified for these parameters");
        }
        self.emit("exterior_source.csv", &export::volume_csv(&sol.zeta))?;
        self.emit(
            "exterior_source_faces.csv",
            &export::faces_csv(&[&sol.zeta_plus, &sol.zeta_minus]),
        )?;
        self.require_checks()
    }

    fn apply_p(&mut self) -> Result<()> {
        let g = self.grid()?;
        let ctx = self.context(&g, "assemble")?;
        let phi = self.cfg.data.boundary.bind(&self.cfg.model).surface(&g, Level::Gamma1);
        let pphi = self.report.stage("apply-p", || Ok((ctx.apply_p(&phi)?, 0.0, 1)))?;
        self.report
            .check_le("contraction", pphi.sup_norm(), phi.sup_norm() + 2.0 * self.tol());
        let one = SurfaceField::constant(g.clone(), Level::Gamma1, 1.0);
        let p1 = self.report.stage("apply-p-constant", || Ok((ctx.apply_p(&one)?, 0.0, 1)))?;
        let dev = p1.to_vec().iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
        self.report.check_le("constant preserved", dev, 2.0 * self.tol());
        self.emit("apply_p.csv", &export::surface_csv(&pphi))?;
        self.require_checks()
    }

    fn apply_t(&mut self) -> Result<()> {
        let g = self.grid()?;
        let ctx = self.context(&g, "assemble")?;
        let f = self.source(&g);
        let tf = self.report.stage("apply-t", || Ok((ctx.apply_t(&f)?, 0.0, 1)))?;
        let one = Field3::constant(g.clone(), Region::Full, 1.0);
        let t1 = self.report.stage("apply-t-constant", || Ok((ctx.apply_t(&one)?, 0.0, 1)))?;
        self.report.check("T1 positive", t1.min() > 0.0, t1.min(), 0.0);
        self.emit("apply_t.csv", &export::surface_csv(&tf))?;
        self.emit("apply_t_one.csv", &export::surface_csv(&t1))?;
        self.require_checks()
    }

    /// `γ⋆` with checks; in matrix mode also writes the decay diagnostics.
    fn gamma_star_in(&mut self, ctx: &CycleContext) -> Result<BoundaryMeasure> {
        let g = ctx.grid().clone();
        let eo = self.cfg.ergodic;
        let gamma = match eo.mode {
            ergodic::MeasureMode::Matrix => {
                let (p, gamma, diag) = self.report.stage("gamma-star-matrix", || {
                    let r = matrix_route(ctx, &eo)?;
                    let n = r.0.len();
                    Ok((r, 0.0, n))
                })?;
                let fp = ergodic::fixed_point_residual(&p, &gamma);
                self.report.check_le("gamma fixed point", fp, 1e-8);
                self.report.value("rho_estimate", diag.rho_estimate);
                self.report.value("k_estimate", diag.k_estimate);
                self.report.value("r_squared", diag.r_squared);
                self.report.check("decay fit r2", diag.r_squared >= 0.95, diag.r_squared, 0.95);
                self.report.check(
                    "decay fit slope",
                    diag.rho_estimate > 0.0,
                    -diag.rho_estimate,
                    0.0,
                );
                let lag = diag.max_lagged_ratio(5);
                self.report.check("lagged increment ratio", lag < 1.0, lag, 1.0);
                let rows: Vec<Vec<f64>> = diag
                    .sup_diffs
                    .iter()
                    .enumerate()
                    .map(|(n, d)| vec![n as f64, *d])
                    .collect();
                if self.cfg.output.csv {
                    export::write_numeric(&self.dir.join("gamma_diagnostics.csv"), "n,value", &rows)?;
                    self.report.outputs.push("gamma_diagnostics.csv".into());
                }
                gamma
            }
            ergodic::MeasureMode::Mc => {
                let mc = self.cfg.mc;
                self.report.stage("gamma-star-mc", || {
                    let (gm, _) = ergodic::boundary_invariant_measure(ctx, &eo, &mc)?;
                    Ok((gm, 0.0, mc.n_paths))
                })?
            }
        };
        self.report
            .check_le("gamma mass", (gamma.mass() - 1.0).abs(), 1e-10);
        let mut sf = SurfaceField::zeros(g, Level::Gamma1);
        sf.lower = gamma.weights_lower.clone();
        sf.upper = gamma.weights_upper.clone();
        self.emit("gamma_star.csv", &export::surface_csv(&sf))?;
        Ok(gamma)
    }

    fn gamma_star(&mut self) -> Result<BoundaryMeasure> {
        let g = self.grid()?;
        let ctx = self.context(&g, "assemble")?;
        let gamma = self.gamma_star_in(&ctx)?;
        self.require_checks()?;
        Ok(gamma)
    }

    fn nu(&mut self) -> Result<()> {
        let g = self.grid()?;
        let ctx = self.context(&g, "assemble")?;
        let gamma = self.gamma_star_in(&ctx)?;
        let f = self.source(&g);
        let nu = self.report.stage("nu-cycle", || Ok((nu_functional(&f, &ctx, &gamma)?, 0.0, 2)))?;
        self.report.value("nu_cycle", nu);
        let one = Field3::constant(g.clone(), Region::Full, 1.0);
        let nu1 = nu_functional(&one, &ctx, &gamma)?;
        self.report.check("nu of constant", nu1 == 1.0, nu1, 1.0);
        let m = self.report.stage("stationary-density", || Ok((solve_stationary_density(&ctx)?, 0.0, 1)))?;
        let nu_fp = m.integrate_nodal(&f.values);
        self.report.value("nu_fp", nu_fp);
        self.require_checks()
    }

    fn density_checks(&mut self, m: &InvariantMeasure, suffix: &str) {
        let g = m.grid().clone();
        let tol = self.tol();
        let min = m
            .elastic
            .values
            .iter()
            .chain(&m.plastic_plus.values)
            .chain(&m.plastic_minus.values)
            .fold(f64::INFINITY, |a, &b| a.min(b));
        self.report.check(&format!("density nonnegative{suffix}"), min >= -tol, min, -tol);
        self.report
            .check_le(&format!("density mass{suffix}"), (m.total_mass() - 1.0).abs(), 1e-8);
        let mut wrong = 0.0f64;
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                if g.ys[j] <= 0.0 {
                    wrong = wrong.max(m.plastic_plus.at(i, j).abs());
                }
                if g.ys[j] >= 0.0 {
                    wrong = wrong.max(m.plastic_minus.at(i, j).abs());
                }
            }
        }
        self.report.check(&format!("wrong-sign faces zero{suffix}"), wrong == 0.0, wrong, 0.0);
        self.report.value(&format!("plastic_mass{suffix}"), m.plastic_mass());
        self.report.value(&format!("clipped_nodes{suffix}"), m.clipped as f64);
    }

    fn fokker_planck(&mut self) -> Result<InvariantMeasure> {
        let g = self.grid()?;
        let ctx = self.context(&g, "assemble")?;
        let m = self.report.stage("stationary-density", || Ok((solve_stationary_density(&ctx)?, 0.0, 1)))?;
        self.density_checks(&m, "");
        let f = self.cfg.data.source.bind(&self.cfg.model);
        self.report
            .value("stationarity_residual", stationarity_residual(&f, &m, &self.cfg.model));
        self.emit("density_elastic.csv", &export::volume_csv(&m.elastic))?;
        self.emit(
            "density_faces.csv",
            &export::faces_csv(&[&m.plastic_plus, &m.plastic_minus]),
        )?;
        self.require_checks()?;
        Ok(m)
    }

    fn complete(&mut self) -> Result<()> {
        let g = self.grid()?;
        let ctx = self.context(&g, "assemble")?;
        let gamma = self.gamma_star_in(&ctx)?;
        let mut f = self.source(&g);
        if self.cfg.data.center_source {
            let nu = self.report.stage("center-source", || Ok((nu_functional(&f, &ctx, &gamma)?, 0.0, 2)))?;
            self.report.value("nu_before_centering", nu);
            f.values.iter_mut().for_each(|v| *v -= nu);
        }
        let eo = self.cfg.ergodic;
        let res = self.report.stage("complete", || {
            let s = solve_complete_problem(&f, &ctx, &gamma, eo.solvability_tol, eo.max_terms)?;
            let (r, it) = (s.residual, s.iterations);
            Ok((s, r, it))
        });
        let sol = match res {
            Ok(s) => s,
            Err(Error::NotSolvable(nu)) => {
                self.report.value("nu", nu);
                return Err(Error::NotSolvable(nu));
            }
            Err(e) => return Err(e),
        };
        self.report.value("nu", sol.nu);
        self.report.value("glue_gap", sol.glue_gap);
        self.report.check_le("complete residual", sol.residual, 10.0 * self.tol());
        self.report.check_le("glue agreement", sol.glue_gap, 2.0 * self.tol());
        self.emit("complete.csv", &export::volume_csv(&sol.u))?;
        self.require_checks()
    }

    fn validate(&mut self) -> Result<()> {
        let (p, c) = (self.cfg.model, self.cfg.cycle);
        let v = validate_params(&p, &c);
        self.report.check("parameters valid", v.is_valid(), v.violations.len() as f64, 0.0);
        self.report
            .check_le("mc time step", self.cfg.mc.dt, McOptions::dt_limit(&p));
        let g = self.grid()?;
        self.report.value("nodes", g.len() as f64);
        // Degenerate face corners (y = 0, z = ±Y) keep the elastic stencil.
        let j0 = g.j_zero();
        self.report.value("corner_nodes", (2 * g.nx()) as f64);
        self.report.note(format!(
            "corner nodes at j = {j0}, k in {{0, {}}} carry elastic rows without z transport",
            g.nz() - 1
        ));
        let ctx = self.context(&g, "assemble")?;
        let q = &ctx.solvers.op.matrix;
        let (mut row_sum, mut min_off) = (0.0f64, f64::INFINITY);
        for r in 0..q.n_rows {
            let mut sum = 0.0;
            for (col, v) in q.row(r) {
                sum += v;
                if col != r {
                    min_off = min_off.min(v);
                }
            }
            row_sum = row_sum.max(sum.abs());
        }
        self.report
            .check_le("generator zero row sums", row_sum, 1e-12 * q.norm_inf().max(1.0));
        self.report
            .check("generator off-diagonals nonnegative", min_off >= 0.0, min_off, 0.0);
        let one = SurfaceField::constant(g.clone(), Level::Gamma1, 1.0);
        let p1 = ctx.apply_p(&one)?;
        let dev = p1.to_vec().iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
        self.report.check_le("P preserves constants", dev, 2.0 * self.tol());
        let phi = BarrierGauge::phi_interior(&p, 1.0);
        let cert = phi.certificate(&ctx.solvers, 1.0);
        self.report.check("interior barrier certificate", cert >= 0.0, cert, 0.0);
        let psi = BarrierGauge::psi_exterior(&p, &c, 1.0);
        if psi.certified {
            let cert = psi.certificate(&ctx.solvers, 1.0);
            self.report.check("exterior barrier certificate", cert >= 0.0, cert, 0.0);
        } else {
            self.report.note("exterior gauge not certified for these parameters");
        }
        self.require_checks()
    }

    fn oracle_suite(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let (p, c) = (cfg.model, cfg.cycle);
        let tol = self.tol();
        let g = self.grid()?;
        let ctx = self.context(&g, "assemble")?;
        let s = &ctx.solvers;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.mc.seed);

        // Maximum principle on random nodal data.
        let mut worst: f64 = f64::NEG_INFINITY;
        for _ in 0..5 {
            let mut v = vec![0.0; ctx.surface_len()];
            v.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
            let phi = SurfaceField::from_vec(g.clone(), Level::Gamma1, &v);
            let h = SurfaceField::from_vec(g.clone(), Level::Gamma, &v);
            let eta = s.interior(Some(&phi), None)?.eta;
            let zeta = s.exterior(Some(&h), None)?.zeta;
            worst = worst
                .max(eta.sup_norm() - phi.sup_norm())
                .max(zeta.sup_norm() - h.sup_norm());
        }
        self.report.check_le("maximum principle", worst, 10.0 * tol);

        // Boundary chain.
        let gamma = self.gamma_star_in(&ctx)?;
        let one_s = SurfaceField::constant(g.clone(), Level::Gamma1, 1.0);
        let mut v = one_s.clone();
        let mut dev: f64 = 0.0;
        for _ in 0..50 {
            v = ctx.apply_p(&v)?;
            dev = dev.max(v.to_vec().iter().fold(0.0f64, |m, x| m.max((x - 1.0).abs())));
        }
        self.report.check_le("P^n preserves constants", dev, 1e-6);
        let one = Field3::constant(g.clone(), Region::Full, 1.0);
        let t1 = ctx.apply_t(&one)?;
        self.report.check("T1 positive", t1.min() > 0.0, t1.min(), 0.0);
        let nu1 = nu_functional(&one, &ctx, &gamma)?;
        self.report.check("nu of constant", nu1 == 1.0, nu1, 1.0);

        // Reduced problem when the excitation decouples.
        if p.beta == 0.0 {
            let phi = cfg.data.boundary.bind(&p);
            let up: Vec<f64> = g.zs.iter().map(|&z| phi.value(0.0, c.ybar1, z)).collect();
            let lo: Vec<f64> = g.zs.iter().map(|&z| phi.value(0.0, -c.ybar1, z)).collect();
            let r = solve_1d_reference(&up, &lo, &g, &p, &c, &cfg.solver)?;
            self.report
                .check_le("closed-form face lines", r.discrete_face_deviation, 1e-6);
        } else {
            self.report.note("reduced reference skipped: beta != 0");
        }

        // Barriers.
        let f = self.source(&g);
        let fnorm = f.sup_norm();
        let chi = s.interior(None, Some(&f))?.eta;
        let phi_g = BarrierGauge::phi_interior(&p, fnorm);
        self.report
            .check_le("interior barrier bound", chi.sup_norm(), phi_g.interior_bound(&p, &c));
        let psi_g = BarrierGauge::psi_exterior(&p, &c, fnorm);
        if psi_g.certified {
            let xi = s.exterior(None, Some(&f))?.zeta;
            let excess = psi_excess(&xi, &psi_g, &p);
            self.report.check_le("exterior barrier nodewise", excess, 10.0 * tol);
        } else {
            self.report.note("exterior gauge not certified for these parameters");
        }

        // Stationary density and the cycle formula.
        let m = self.report.stage("stationary-density", || Ok((solve_stationary_density(&ctx)?, 0.0, 1)))?;
        self.density_checks(&m, "");
        let basket = basket(&p);
        let mut gap: f64 = 0.0;
        let mut nu_h = Vec::new();
        for (k, b) in basket.iter().enumerate() {
            let fk = Field3::from_fn(g.clone(), Region::Full, |x, y, z| b.value(x, y, z));
            let a = nu_functional(&fk, &ctx, &gamma)?;
            let bq = m.integrate_nodal(&fk.values);
            gap = gap.max((a - bq).abs());
            self.report.value(&format!("nu_cycle_{k}"), a);
            nu_h.push(bq);
        }
        self.report.check_le("cycle and density routes agree", gap, 1e-8);

        // Refinement gives the discretization budget for the Monte Carlo comparisons.
        let fine_spec = cfg.grid.refined();
        let gf = fine_spec.build(&p, &c)?;
        let fine_ctx = self.context(&gf, "assemble-fine")?;
        let mf = self.report.stage("stationary-density-fine", || {
            Ok((solve_stationary_density(&fine_ctx)?, 0.0, 1))
        })?;
        self.density_checks(&mf, " (fine)");
        let res_h: f64 = basket
            .iter()
            .take(5)
            .map(|b| stationarity_residual(b, &m, &p).abs())
            .sum();
        let res_h2: f64 = basket
            .iter()
            .take(5)
            .map(|b| stationarity_residual(b, &mf, &p).abs())
            .sum();
        self.report.value("stationarity_residual", res_h);
        self.report.check_le("stationarity residual decreases", res_h2, res_h);

        let mc = cfg.mc;
        let closures: Vec<_> = basket
            .iter()
            .map(|&b| move |st: &State| b.value(st.x, st.y, st.z))
            .collect();
        let fs: Vec<&(dyn Fn(&State) -> f64 + Sync)> = closures
            .iter()
            .map(|f| f as &(dyn Fn(&State) -> f64 + Sync))
            .collect();
        let bin = |st: &State| coarse_bin(&g, nearest_node(&g, st));
        let lr = self.report.stage("mc-longrun", || {
            Ok((sim::mc_longrun(&fs, Some((&bin, N_COARSE_BINS)), &p, &mc)?, 0.0, mc.n_paths))
        })?;
        let mut worst_ratio: f64 = 0.0;
        for (k, b) in basket.iter().enumerate() {
            let fk = Field3::from_fn(gf.clone(), Region::Full, |x, y, z| b.value(x, y, z));
            let ch = 2.0 * (mf.integrate_nodal(&fk.values) - nu_h[k]).abs();
            let budget = 3.0 * lr.averages[k].stderr + ch + tol;
            worst_ratio = worst_ratio.max((lr.averages[k].mean - nu_h[k]).abs() / budget);
        }
        self.report.check_le("long-run averages within budget", worst_ratio, 1.0);
        let mut fp_bins = vec![0.0; N_COARSE_BINS];
        for (n, w) in m.masses.iter().enumerate() {
            fp_bins[coarse_bin(&g, n)] += w;
        }
        let tv = binned_tv(&fp_bins, &lr.occupation, |b| b, N_COARSE_BINS);
        self.report.check_le("occupation total variation", tv, 0.05);

        // Boundary functional at one start point.
        let fine_s = &fine_ctx.solvers;
        let phi = cfg.data.boundary.bind(&p);
        let data = phi.surface(&g, Level::Gamma1);
        let data_f = phi.surface(&gf, Level::Gamma1);
        let eta = s.interior(Some(&data), None)?.eta;
        let eta_f = fine_s.interior(Some(&data_f), None)?.eta;
        let n0 = nearest_node(&g, &State::new(0.0, 0.25, 0.125));
        let (x0, y0, z0) = g.point(n0);
        let start = State::new(x0, y0, z0);
        let nf = nearest_node(&gf, &start);
        let ch = 2.0 * (eta.values[n0] - eta_f.values[nf]).abs();
        let est = self.report.stage("mc-boundary-functional", || {
            Ok((sim::mc_boundary_functional(&data, &start, &p, &c, &mc)?, 0.0, mc.n_paths))
        })?;
        self.report.value("mc_boundary_functional", est.mean);
        self.report.check_le(
            "boundary functional within budget",
            (est.mean - eta.values[n0]).abs(),
            3.0 * est.stderr + ch + tol,
        );

        // Solvability.
        let eo = cfg.ergodic;
        let not_solvable = matches!(
            solve_complete_problem(&one, &ctx, &gamma, eo.solvability_tol, eo.max_terms),
            Err(Error::NotSolvable(v)) if v == 1.0
        );
        self.report.check("constant source not solvable", not_solvable, 1.0, eo.solvability_tol);
        let mut fc = f.clone();
        let nu = nu_functional(&f, &ctx, &gamma)?;
        fc.values.iter_mut().for_each(|v| *v -= nu);
        let sol = self.report.stage("complete-centered", || {
            let s = solve_complete_problem(&fc, &ctx, &gamma, eo.solvability_tol, eo.max_terms)?;
            let (r, it) = (s.residual, s.iterations);
            Ok((s, r, it))
        })?;
        self.report.check_le("complete residual", sol.residual, 10.0 * tol);
        self.report.check_le("glue agreement", sol.glue_gap, 2.0 * tol);

        self.emit("density_elastic.csv", &export::volume_csv(&m.elastic))?;
        self.emit(
            "density_faces.csv",
            &export::faces_csv(&[&m.plastic_plus, &m.plastic_minus]),
        )?;
        self.emit("complete.csv", &export::volume_csv(&sol.u))?;
        self.require_checks()
    }
}

/// `max (|ξ| - Ψ)` over exterior nodes with `|y| >= ybar`.
pub fn psi_excess(xi: &Field3, gauge: &BarrierGauge, p: &crate::model::ModelParams) -> f64 {
    let g = &xi.grid;
    xi.region_nodes()
        .filter(|&n| g.point(n).1.abs() >= g.ybar)
        .map(|n| {
            let (_, y, z) = g.point(n);
            xi.values[n].abs() - gauge.value(p, y, z)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Ten smooth bounded test functions: five bumps concentrated inside the
/// truncated range, then five mixed shapes.
pub fn basket(p: &crate::model::ModelParams) -> Vec<BasketFn> {
    let bump = |y0: f64, width: f64, x_mode: bool, z_poly: [f64; 3]| {
        BasketFn::Bump(GaussianBump {
            x_bound: p.x_bound,
            x_mode,
            y0,
            width,
            z_poly,
        })
    };
    vec![
        bump(0.0, 0.6, true, [1.0, 0.0, 0.0]),
        bump(0.3, 0.5, false, [1.0, 1.0, 0.0]),
        bump(-0.4, 0.5, true, [0.5, -1.0, 2.0]),
        bump(0.8, 0.4, false, [1.0, 0.0, -2.0]),
        bump(-0.2, 0.8, true, [0.0, 1.0, 0.0]),
        BasketFn::Poly([0.0, 1.0, 0.0, 0.0]),
        BasketFn::Poly([0.0, 0.0, 0.0, 1.0]),
        BasketFn::Square,
        BasketFn::Sine,
        BasketFn::FaceWeight(p.yield_bound),
    ]
}

#[derive(Debug, Clone, Copy)]
pub enum BasketFn {
    Bump(GaussianBump),
    /// `c + a x + b tanh(y) + d z`.
    Poly([f64; 4]),
    /// `x² + tanh(y)² + z²`.
    Square,
    /// `sin(x + y) cos(3 z)`.
    Sine,
    /// `(z / Y)⁴`, concentrated near the plastic faces.
    FaceWeight(f64),
}

impl BasketFn {
    pub fn value(&self, x: f64, y: f64, z: f64) -> f64 {
        match *self {
            BasketFn::Bump(b) => b.value(x, y, z),
            BasketFn::Poly([c, a, b, d]) => c + a * x + b * y.tanh() + d * z,
            BasketFn::Square => x * x + y.tanh().powi(2) + z * z,
            BasketFn::Sine => (x + y).sin() * (3.0 * z).cos(),
            BasketFn::FaceWeight(yb) => (z / yb).powi(4),
        }
    }
}

impl TestFunction for BasketFn {
    fn value(&self, x: f64, y: f64, z: f64) -> f64 {
        BasketFn::value(self, x, y, z)
    }
    fn grad(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        match *self {
            BasketFn::Bump(b) => b.grad(x, y, z),
            BasketFn::Poly([_, a, b, d]) => [a, b * (1.0 - y.tanh().powi(2)), d],
            BasketFn::Square => {
                let t = y.tanh();
                [2.0 * x, 2.0 * t * (1.0 - t * t), 2.0 * z]
            }
            BasketFn::Sine => [
                (x + y).cos() * (3.0 * z).cos(),
                (x + y).cos() * (3.0 * z).cos(),
                -3.0 * (x + y).sin() * (3.0 * z).sin(),
            ],
            BasketFn::FaceWeight(yb) => [0.0, 0.0, 4.0 * z.powi(3) / yb.powi(4)],
        }
    }
    fn hess_diag(&self, x: f64, y: f64, z: f64) -> [f64; 2] {
        match *self {
            BasketFn::Bump(b) => b.hess_diag(x, y, z),
            BasketFn::Poly([_, _, b, _]) => {
                let t = y.tanh();
                [0.0, -2.0 * b * t * (1.0 - t * t)]
            }
            BasketFn::Square => {
                let t = y.tanh();
                let s = 1.0 - t * t;
                [2.0, 2.0 * s * s - 4.0 * t * t * s]
            }
            BasketFn::Sine => {
                let v = -(x + y).sin() * (3.0 * z).cos();
                [v, v]
            }
            BasketFn::FaceWeight(_) => [0.0; 2],
        }
    }
}

pub fn default_out(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.map_or_else(|| cfg.output.dir.clone(), Path::to_path_buf)
}
