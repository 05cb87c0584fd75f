//! Run configuration: a sectioned `key = value` file in TOML syntax.
//!
//! Sections are `[model]`, `[cycle]`, `[grid]`, `[solver]`, `[ergodic]`,
//! `[mc]`, `[output]` and `[data]`. Every key has a default, unknown or
//! duplicate keys are rejected.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ergodic::ErgodicOptions;
use crate::error::{Error, Result};
use crate::fd::SolverOptions;
use crate::grid::{build_grid, Field3, Grid3, Level, Region, SurfaceField};
use crate::model::{validate_params, CycleLevels, GaussianBump, ModelParams, TestFunction};
use crate::sim::McOptions;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny_per_band: usize,
    pub nz: usize,
    pub y_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nx: 9,
            ny_per_band: 4,
            nz: 17,
            y_max: 3.5,
        }
    }
}

impl GridSpec {
    pub fn build(&self, p: &ModelParams, c: &CycleLevels) -> Result<Arc<Grid3>> {
        Ok(Arc::new(build_grid(p, c, self.nx, self.ny_per_band, self.nz, self.y_max)?))
    }
    /// The grid with every spacing halved.
    pub fn refined(&self) -> Self {
        Self {
            nx: 2 * self.nx - 1,
            ny_per_band: 2 * self.ny_per_band,
            nz: 2 * self.nz - 1,
            y_max: self.y_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputOptions {
    pub dir: PathBuf,
    pub csv: bool,
    /// Wall-clock times make reports differ between runs, so they are off by default.
    pub record_timings: bool,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            csv: true,
            record_timings: false,
        }
    }
}

/// A named scalar function of `(x, y, z)`, written as an inline table such as
/// `{ kind = "wave", amplitude = 1.0, kx = 1.0, ky = 0.0, kz = 2.0, phase = 0.3 }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataFn {
    Constant {
        value: f64,
    },
    Linear {
        c: f64,
        x: f64,
        y: f64,
        z: f64,
    },
    /// Gaussian bump in `y` times a quadratic in `z`, optionally times a
    /// cosine profile in `x`.
    Bump {
        y0: f64,
        width: f64,
        #[serde(default)]
        x_mode: bool,
        z_poly: [f64; 3],
    },
    /// `amplitude · sin(kx·x + ky·y + kz·z + phase)`.
    Wave {
        amplitude: f64,
        kx: f64,
        ky: f64,
        kz: f64,
        phase: f64,
    },
}

impl DataFn {
    pub fn bind(self, p: &ModelParams) -> BoundFn {
        BoundFn {
            spec: self,
            x_bound: p.x_bound,
        }
    }
}

/// A [`DataFn`] together with the model scale it needs.
#[derive(Debug, Clone, Copy)]
pub struct BoundFn {
    pub spec: DataFn,
    pub x_bound: f64,
}

impl BoundFn {
    fn bump(&self) -> Option<GaussianBump> {
        match self.spec {
            DataFn::Bump {
                y0,
                width,
                x_mode,
                z_poly,
            } => Some(GaussianBump {
                x_bound: self.x_bound,
                x_mode,
                y0,
                width,
                z_poly,
            }),
            _ => None,
        }
    }

    pub fn field(&self, grid: &Arc<Grid3>) -> Field3 {
        Field3::from_fn(grid.clone(), Region::Full, |x, y, z| self.value(x, y, z))
    }

    /// Values on the surface `level`, evaluated at the level's `±y`.
    pub fn surface(&self, grid: &Arc<Grid3>, level: Level) -> SurfaceField {
        let y = grid.level_value(level);
        SurfaceField::from_fn(grid.clone(), level, |x, z, upper| {
            self.value(x, if upper { y } else { -y }, z)
        })
    }
}

impl TestFunction for BoundFn {
    fn value(&self, x: f64, y: f64, z: f64) -> f64 {
        match self.spec {
            DataFn::Constant { value } => value,
            DataFn::Linear { c, x: a, y: b, z: d } => c + a * x + b * y + d * z,
            DataFn::Bump { .. } => self.bump().unwrap().value(x, y, z),
            DataFn::Wave {
                amplitude,
                kx,
                ky,
                kz,
                phase,
            } => amplitude * (kx * x + ky * y + kz * z + phase).sin(),
        }
    }
    fn grad(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        match self.spec {
            DataFn::Constant { .. } => [0.0; 3],
            DataFn::Linear { x: a, y: b, z: d, .. } => [a, b, d],
            DataFn::Bump { .. } => self.bump().unwrap().grad(x, y, z),
            DataFn::Wave {
                amplitude,
                kx,
                ky,
                kz,
                phase,
            } => {
                let c = amplitude * (kx * x + ky * y + kz * z + phase).cos();
                [kx * c, ky * c, kz * c]
            }
        }
    }
    fn hess_diag(&self, x: f64, y: f64, z: f64) -> [f64; 2] {
        match self.spec {
            DataFn::Constant { .. } | DataFn::Linear { .. } => [0.0; 2],
            DataFn::Bump { .. } => self.bump().unwrap().hess_diag(x, y, z),
            DataFn::Wave {
                amplitude,
                kx,
                ky,
                kz,
                phase,
            } => {
                let s = -amplitude * (kx * x + ky * y + kz * z + phase).sin();
                [kx * kx * s, ky * ky * s]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Dirichlet data for the homogeneous solves and `P`.
    pub boundary: DataFn,
    /// Source term for the nonhomogeneous solves, `T`, `ν` and `complete`.
    pub source: DataFn,
    /// Subtract `ν(source)` before solving the complete problem.
    pub center_source: bool,
    /// Start point of `simulate`.
    pub start: [f64; 3],
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            boundary: DataFn::Wave {
                amplitude: 1.0,
                kx: 1.0,
                ky: 0.5,
                kz: PI,
                phase: 0.3,
            },
            source: DataFn::Bump {
                y0: 0.0,
                width: 1.0,
                x_mode: true,
                z_poly: [1.0, 0.5, 0.0],
            },
            center_source: false,
            start: [0.0, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelParams,
    pub cycle: CycleLevels,
    pub grid: GridSpec,
    pub solver: SolverOptions,
    pub ergodic: ErgodicOptions,
    pub mc: McOptions,
    pub output: OutputOptions,
    pub data: DataSpec,
}

impl RunConfig {
    /// Collects every violation instead of stopping at the first one.
    pub fn validate(&self) -> Result<()> {
        let mut bad = validate_params(&self.model, &self.cycle).violations;
        let push = |bad: &mut Vec<String>, r: Result<()>| match r {
            Err(Error::InvalidOptions(m)) => bad.push(m),
            Err(e) => bad.push(e.to_string()),
            Ok(()) => {}
        };
        push(&mut bad, self.solver.check());
        push(&mut bad, self.mc.check(&self.model));
        if bad.is_empty() {
            push(&mut bad, self.grid.build(&self.model, &self.cycle).map(|_| ()));
        }
        push(&mut bad, self.ergodic.check());
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    pub fn build_grid(&self) -> Result<Arc<Grid3>> {
        self.grid.build(&self.model, &self.cycle)
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn render_config(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::InvalidOptions(format!("cannot render config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{SolverMethod, TruncationClosure};

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config("[model]\nalpha = 1.5\n").unwrap();
        assert_eq!(c.model.alpha, 1.5);
        assert_eq!(c.model.beta, ModelParams::default().beta);
        assert_eq!(c.grid, GridSpec::default());
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_carry_lines() {
        match parse_config("[model]\nalpha = -1\n") {
            Err(Error::Validation(v)) => assert!(v[0].contains("alpha")),
            other => panic!("{other:?}"),
        }
        match parse_config("[model]\nalpha = 1.0\nbeta = 0.1\nalpha = 2.0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        match parse_config("[grid]\nnx = 9\n\nwidth = 3\n") {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("width"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_config("[data]\nsource = { kind = \"constant\", value = 1.0, extra = 2 }\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse_config("[grid]\nnx = 2\n"), Err(Error::Validation(_))));
    }

    #[test]
    fn render_round_trip() {
        let mut c = RunConfig::default();
        c.model.beta = 0.0;
        c.solver.method = SolverMethod::Direct;
        c.solver.truncation = TruncationClosure::Dirichlet(0.25);
        c.ergodic.mode = crate::ergodic::MeasureMode::Mc;
        c.data.source = DataFn::Linear { c: 0.1, x: 1.0 / 3.0, y: -2.0, z: 1e-17 };
        c.data.center_source = true;
        c.mc.seed = 7;
        let text = render_config(&c).unwrap();
        assert_eq!(parse_config(&text).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(parse_config(&render_config(&d).unwrap()).unwrap(), d);
    }

    #[test]
    fn data_functions_have_consistent_derivatives() {
        let p = ModelParams::default();
        let specs = [
            DataSpec::default().boundary,
            DataSpec::default().source,
            DataFn::Linear { c: 1.0, x: 2.0, y: 3.0, z: 4.0 },
        ];
        let h = 1e-5;
        for s in specs {
            let f = s.bind(&p);
            let (x, y, z) = (0.3, -0.4, 0.2);
            let g = f.grad(x, y, z);
            let fd = [
                (f.value(x + h, y, z) - f.value(x - h, y, z)) / (2.0 * h),
                (f.value(x, y + h, z) - f.value(x, y - h, z)) / (2.0 * h),
                (f.value(x, y, z + h) - f.value(x, y, z - h)) / (2.0 * h),
            ];
            for a in 0..3 {
                assert!((g[a] - fd[a]).abs() < 1e-8);
            }
            let hd = f.hess_diag(x, y, z);
            let fxx = (f.value(x + h, y, z) - 2.0 * f.value(x, y, z) + f.value(x - h, y, z)) / (h * h);
            assert!((hd[0] - fxx).abs() < 1e-4);
        }
    }
}
