//! Physical parameters, oscillator states and the pointwise generator.
//!
//! The state is the triple `(x, y, z)`: `x` is the reflected
//! Ornstein–Uhlenbeck excitation on `[-L, L]`, `y` the velocity and `z` the
//! elastic deformation, constrained to `[-Y, Y]`. On the plastic faces
//! `z = ±Y` with `±y > 0` the deformation is frozen and the generator loses
//! its transport term.

use serde::{Deserialize, Serialize};

/// Physical constants of the oscillator and its excitation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// OU relaxation rate of the excitation.
    pub alpha: f64,
    /// Coupling of the excitation into the velocity equation.
    pub beta: f64,
    /// Viscous damping.
    pub c0: f64,
    /// Stiffness.
    pub k: f64,
    /// Plastic yield bound `Y` on `z`.
    pub yield_bound: f64,
    /// Reflection bound `L` on `x`.
    pub x_bound: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.2,
            c0: 2.0,
            k: 1.0,
            yield_bound: 0.5,
            x_bound: 1.0,
        }
    }
}

impl ModelParams {
    /// Without excitation coupling the `(y, z)` pair evolves on its own.
    pub fn is_one_dimensional(&self) -> bool {
        self.beta == 0.0
    }
}

/// Inner (`ybar`) and outer (`ybar1`) velocity levels delimiting a cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleLevels {
    pub ybar: f64,
    pub ybar1: f64,
}

impl Default for CycleLevels {
    fn default() -> Self {
        Self {
            ybar: 0.5,
            ybar1: 1.0,
        }
    }
}

/// Outcome of [`validate_params`]. Violations make a configuration unusable,
/// warnings flag conditions under which the interior barrier argument is
/// not available in its original form.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_params(p: &ModelParams, c: &CycleLevels) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut positive = |name: &str, v: f64| {
        if !(v.is_finite() && v > 0.0) {
            report.violations.push(format!("{name} > 0 fails (got {v})"));
        }
    };
    positive("alpha", p.alpha);
    positive("c0", p.c0);
    positive("k", p.k);
    positive("yield_bound", p.yield_bound);
    positive("x_bound", p.x_bound);
    positive("ybar", c.ybar);
    positive("ybar1", c.ybar1);
    if !(p.beta.is_finite() && p.beta >= 0.0) {
        report
            .violations
            .push(format!("beta >= 0 fails (got {})", p.beta));
    }
    if !(c.ybar < c.ybar1) {
        report.violations.push(format!(
            "ybar < ybar1 fails (ybar = {}, ybar1 = {})",
            c.ybar, c.ybar1
        ));
    }
    if p.beta > 0.0 && p.x_bound > 0.0 {
        let limit = 1.0 / (2.0 * p.beta * p.x_bound);
        if 2.0 * c.ybar1 >= limit {
            report.warnings.push(format!(
                "2*ybar1 = {} >= 1/(2*beta*L) = {}",
                2.0 * c.ybar1,
                limit
            ));
        }
    }
    report
}

/// Point of the state space together with the elapsed time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub t: f64,
}

impl State {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z, t: 0.0 }
    }

    pub fn is_admissible(&self, p: &ModelParams) -> bool {
        self.x.abs() <= p.x_bound && self.z.abs() <= p.yield_bound && self.y.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Elastic,
    PlasticPlus,
    PlasticMinus,
}

/// Phase of a state. A face point with `y = 0` is elastic.
pub fn phase_of(s: &State, p: &ModelParams) -> Phase {
    if s.z >= p.yield_bound && s.y > 0.0 {
        Phase::PlasticPlus
    } else if s.z <= -p.yield_bound && s.y < 0.0 {
        Phase::PlasticMinus
    } else {
        Phase::Elastic
    }
}

/// Drift `(dx, dy, dz)` per unit time.
pub fn drift(s: &State, p: &ModelParams) -> (f64, f64, f64) {
    let dx = -p.alpha * s.x;
    let dy = -(p.beta * s.x + p.c0 * s.y + p.k * s.z);
    let dz = match phase_of(s, p) {
        Phase::Elastic => s.y,
        _ => 0.0,
    };
    (dx, dy, dz)
}

/// Smooth function with analytically supplied derivatives.
pub trait TestFunction {
    fn value(&self, x: f64, y: f64, z: f64) -> f64;
    /// `(∂x, ∂y, ∂z)`.
    fn grad(&self, x: f64, y: f64, z: f64) -> [f64; 3];
    /// `(∂xx, ∂yy)`; the generator has no second derivative in `z`.
    fn hess_diag(&self, x: f64, y: f64, z: f64) -> [f64; 2];
}

/// `A φ`, the elastic-phase generator.
pub fn operator_a(f: &dyn TestFunction, s: &State, p: &ModelParams) -> f64 {
    let [fx, fy, fz] = f.grad(s.x, s.y, s.z);
    let [fxx, fyy] = f.hess_diag(s.x, s.y, s.z);
    0.5 * fyy + 0.5 * fxx - p.alpha * s.x * fx - (p.beta * s.x + p.c0 * s.y + p.k * s.z) * fy
        + s.y * fz
}

/// `B± φ`, the generator on the plastic face `z = ±Y`.
pub fn operator_b(f: &dyn TestFunction, s: &State, p: &ModelParams, plus: bool) -> f64 {
    let z_face = if plus { p.yield_bound } else { -p.yield_bound };
    let [fx, fy, _] = f.grad(s.x, s.y, z_face);
    let [fxx, fyy] = f.hess_diag(s.x, s.y, z_face);
    0.5 * fyy + 0.5 * fxx - p.alpha * s.x * fx - (p.beta * s.x + p.c0 * s.y + p.k * z_face) * fy
}

/// Generator `Λ φ` at `s`, dispatching on the phase.
pub fn generator_apply(f: &dyn TestFunction, s: &State, p: &ModelParams) -> f64 {
    match phase_of(s, p) {
        Phase::Elastic => operator_a(f, s, p),
        Phase::PlasticPlus => operator_b(f, s, p, true),
        Phase::PlasticMinus => operator_b(f, s, p, false),
    }
}

/// Closure-backed [`TestFunction`].
pub struct FnTestFunction<V, G, H>
where
    V: Fn(f64, f64, f64) -> f64,
    G: Fn(f64, f64, f64) -> [f64; 3],
    H: Fn(f64, f64, f64) -> [f64; 2],
{
    pub value: V,
    pub grad: G,
    pub hess_diag: H,
}

impl<V, G, H> TestFunction for FnTestFunction<V, G, H>
where
    V: Fn(f64, f64, f64) -> f64,
    G: Fn(f64, f64, f64) -> [f64; 3],
    H: Fn(f64, f64, f64) -> [f64; 2],
{
    fn value(&self, x: f64, y: f64, z: f64) -> f64 {
        (self.value)(x, y, z)
    }
    fn grad(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        (self.grad)(x, y, z)
    }
    fn hess_diag(&self, x: f64, y: f64, z: f64) -> [f64; 2] {
        (self.hess_diag)(x, y, z)
    }
}

/// Constant function.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl TestFunction for Constant {
    fn value(&self, _: f64, _: f64, _: f64) -> f64 {
        self.0
    }
    fn grad(&self, _: f64, _: f64, _: f64) -> [f64; 3] {
        [0.0; 3]
    }
    fn hess_diag(&self, _: f64, _: f64, _: f64) -> [f64; 2] {
        [0.0; 2]
    }
}

/// `(1 + cos(π x / L) / 2) · exp(-(y - y0)² / w²) · (a + b z + c z²)`, with the
/// `x` factor replaced by 1 when `x_mode` is off.
///
/// The `x` factor has vanishing derivative at `x = ±L`, so the bump is
/// compatible with the reflecting boundary of the excitation.
#[derive(Debug, Clone, Copy)]
pub struct GaussianBump {
    pub x_bound: f64,
    pub x_mode: bool,
    pub y0: f64,
    pub width: f64,
    pub z_poly: [f64; 3],
}

impl GaussianBump {
    fn x_factor(&self, x: f64) -> (f64, f64, f64) {
        if self.x_mode {
            let w = std::f64::consts::PI / self.x_bound;
            let c = (w * x).cos();
            (1.0 + 0.5 * c, -0.5 * w * (w * x).sin(), -0.5 * w * w * c)
        } else {
            (1.0, 0.0, 0.0)
        }
    }
    fn y_factor(&self, y: f64) -> (f64, f64, f64) {
        let w2 = self.width * self.width;
        let d = y - self.y0;
        let g = (-d * d / w2).exp();
        let g1 = -2.0 * d / w2 * g;
        let g2 = (4.0 * d * d / (w2 * w2) - 2.0 / w2) * g;
        (g, g1, g2)
    }
    fn z_factor(&self, z: f64) -> (f64, f64) {
        let [a, b, c] = self.z_poly;
        (a + b * z + c * z * z, b + 2.0 * c * z)
    }
}

impl TestFunction for GaussianBump {
    fn value(&self, x: f64, y: f64, z: f64) -> f64 {
        self.x_factor(x).0 * self.y_factor(y).0 * self.z_factor(z).0
    }
    fn grad(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let (fx, fx1, _) = self.x_factor(x);
        let (fy, fy1, _) = self.y_factor(y);
        let (fz, fz1) = self.z_factor(z);
        [fx1 * fy * fz, fx * fy1 * fz, fx * fy * fz1]
    }
    fn hess_diag(&self, x: f64, y: f64, z: f64) -> [f64; 2] {
        let (fx, _, fx2) = self.x_factor(x);
        let (fy, _, fy2) = self.y_factor(y);
        let (fz, _) = self.z_factor(z);
        [fx2 * fy * fz, fx * fy2 * fz]
    }
}
