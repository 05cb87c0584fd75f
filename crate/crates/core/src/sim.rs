//! Euler scheme for the oscillator with projection of `x` onto `[-L, L]`
//! and of `z` onto `[-Y, Y]`, hitting times of `|y| = level`, cycles and
//! Monte Carlo estimators.
//!
//! Every path draws from its own ChaCha8 stream seeded from `(seed, index)`,
//! and ensemble results are reduced in path order, so estimates do not
//! depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SurfaceField;
use crate::model::{CycleLevels, ModelParams, State};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McOptions {
    pub dt: f64,
    pub n_paths: usize,
    pub horizon: f64,
    pub burn_in: f64,
    pub seed: u64,
    /// Detects level crossings `0.5826·√dt` early, which removes the leading
    /// `O(√dt)` bias of discretely monitored hitting times.
    pub hit_shift: bool,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            n_paths: 4000,
            horizon: 50.0,
            burn_in: 5.0,
            seed: 20_240_601,
            hit_shift: false,
        }
    }
}

impl McOptions {
    /// Largest admissible time step for the given parameters.
    pub fn dt_limit(p: &ModelParams) -> f64 {
        0.1 / p.alpha.max(p.c0).max(1.0)
    }

    pub fn check(&self, p: &ModelParams) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.dt > 0.0) || self.dt > Self::dt_limit(p) {
            bad.push(format!("dt = {} must lie in (0, {}]", self.dt, Self::dt_limit(p)));
        }
        if self.n_paths == 0 {
            bad.push("n_paths must be positive".into());
        }
        if !(self.horizon >= 0.0) {
            bad.push("horizon must be nonnegative".into());
        }
        if !(self.burn_in >= 0.0) {
            bad.push("burn_in must be nonnegative".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidOptions(bad.join("; ")))
        }
    }

    fn steps(&self, t: f64) -> u64 {
        (t / self.dt).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n as f64).sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleSample {
    pub start: State,
    pub hit_inner: State,
    pub hit_outer: State,
    pub tau_bar: f64,
    pub tau_bar1: f64,
    pub integral: f64,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for path `index`.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)))
}

fn noise(rng: &mut ChaCha8Rng, sqdt: f64) -> (f64, f64) {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    (a * sqdt, b * sqdt)
}

/// One Euler step; `noise` holds the Brownian increments.
pub fn step(s: &State, p: &ModelParams, dt: f64, noise: (f64, f64)) -> State {
    let (l, yb) = (p.x_bound, p.yield_bound);
    State {
        x: (s.x - p.alpha * s.x * dt + noise.0).clamp(-l, l),
        y: s.y - (p.beta * s.x + p.c0 * s.y + p.k * s.z) * dt + noise.1,
        z: (s.z + s.y * dt).clamp(-yb, yb),
        t: s.t + dt,
    }
}

/// Runs `horizon / dt` steps from `s0` on stream 0 of `opts.seed`.
pub fn simulate_path(
    s0: &State,
    p: &ModelParams,
    opts: &McOptions,
    mut observer: impl FnMut(&State),
) -> State {
    let mut rng = path_rng(opts.seed, 0);
    let sqdt = opts.dt.sqrt();
    let mut s = *s0;
    for _ in 0..opts.steps(opts.horizon) {
        s = step(&s, p, opts.dt, noise(&mut rng, sqdt));
        observer(&s);
    }
    s
}

/// `-ζ(1/2) / √(2π)`.
const HIT_SHIFT: f64 = 0.582_597_157_939_010_7;

/// Runs from `s0` until `|y|` crosses `level`. The integral of `f` is
/// accumulated with the left-point rule. Returns the hit state with `y`
/// snapped to `±level`, the elapsed time and the integral.
pub fn hit_level_with(
    rng: &mut ChaCha8Rng,
    s0: &State,
    level: f64,
    p: &ModelParams,
    opts: &McOptions,
    f: &dyn Fn(&State) -> f64,
) -> Result<(State, f64, f64)> {
    if s0.y.abs() == level {
        return Err(Error::InvalidOptions(format!("start already on |y| = {level}")));
    }
    let sqdt = opts.dt.sqrt();
    let max_steps = opts.steps(opts.horizon);
    let outside = s0.y.abs() > level;
    let shift = if opts.hit_shift { HIT_SHIFT * sqdt } else { 0.0 };
    let mut s = *s0;
    let mut integral = 0.0;
    for n in 1..=max_steps {
        let next = step(&s, p, opts.dt, noise(rng, sqdt));
        integral += f(&s) * opts.dt;
        let crossed = if outside {
            next.y.abs() <= level + shift
        } else {
            next.y.abs() >= level - shift
        };
        if crossed {
            let sign = if outside { s.y.signum() } else { next.y.signum() };
            let hit = State {
                y: sign * level,
                t: s0.t + n as f64 * opts.dt,
                ..next
            };
            return Ok((hit, n as f64 * opts.dt, integral));
        }
        s = next;
    }
    Err(Error::HorizonExceeded {
        level,
        horizon: opts.horizon,
    })
}

pub fn hit_level(s0: &State, level: f64, p: &ModelParams, opts: &McOptions) -> Result<(State, f64)> {
    let mut rng = path_rng(opts.seed, 0);
    hit_level_with(&mut rng, s0, level, p, opts, &|_| 0.0).map(|(s, t, _)| (s, t))
}

pub fn sample_cycle_with(
    rng: &mut ChaCha8Rng,
    s0: &State,
    f: &dyn Fn(&State) -> f64,
    p: &ModelParams,
    c: &CycleLevels,
    opts: &McOptions,
) -> Result<CycleSample> {
    let (inner, t1, i1) = hit_level_with(rng, s0, c.ybar, p, opts, f)?;
    let (outer, t2, i2) = hit_level_with(rng, &inner, c.ybar1, p, opts, f)?;
    Ok(CycleSample {
        start: *s0,
        hit_inner: inner,
        hit_outer: outer,
        tau_bar: t1,
        tau_bar1: t1 + t2,
        integral: i1 + i2,
    })
}

/// One cycle `Gamma1 -> Gamma -> Gamma1` on stream 0 of `opts.seed`.
pub fn sample_cycle(
    s0: &State,
    f: &dyn Fn(&State) -> f64,
    p: &ModelParams,
    c: &CycleLevels,
    opts: &McOptions,
) -> Result<CycleSample> {
    if (s0.y.abs() - c.ybar1).abs() > 1e-12 {
        return Err(Error::InvalidOptions("cycles start on |y| = ybar1".into()));
    }
    let mut rng = path_rng(opts.seed, 0);
    sample_cycle_with(&mut rng, s0, f, p, c, opts)
}

/// Runs `n_paths` independent paths in parallel; results are in path order.
pub fn ensemble<T: Send>(
    opts: &McOptions,
    run: impl Fn(&mut ChaCha8Rng) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    (0..opts.n_paths as u64)
        .into_par_iter()
        .map(|i| run(&mut path_rng(opts.seed, i)))
        .collect()
}

/// Estimates of `E φ(x(τ), z(τ))` for several data sets on one surface,
/// sharing the same paths. `τ` is the hitting time of the surface level.
pub fn mc_boundary_functionals(
    phis: &[&SurfaceField],
    s0: &State,
    p: &ModelParams,
    c: &CycleLevels,
    opts: &McOptions,
) -> Result<Vec<McEstimate>> {
    opts.check(p)?;
    let Some(first) = phis.first() else {
        return Ok(Vec::new());
    };
    if phis.iter().any(|f| f.level != first.level) {
        return Err(Error::ShapeMismatch("all data must live on one surface".into()));
    }
    let level = first.grid.level_value(first.level);
    let _ = c;
    let hits = ensemble(opts, |rng| hit_level_with(rng, s0, level, p, opts, &|_| 0.0))?;
    Ok(phis
        .iter()
        .map(|phi| {
            let v: Vec<f64> = hits
                .iter()
                .map(|(s, _, _)| phi.interpolate(s.x, s.z, s.y > 0.0))
                .collect();
            McEstimate::from_samples(&v)
        })
        .collect())
}

pub fn mc_boundary_functional(
    phi: &SurfaceField,
    s0: &State,
    p: &ModelParams,
    c: &CycleLevels,
    opts: &McOptions,
) -> Result<McEstimate> {
    Ok(mc_boundary_functionals(&[phi], s0, p, c, opts)?[0])
}

/// Mean hitting time of `|y| = level` and mean integral of `f` up to it.
pub fn mc_hitting_integral(
    f: &(dyn Fn(&State) -> f64 + Sync),
    s0: &State,
    level: f64,
    p: &ModelParams,
    opts: &McOptions,
) -> Result<(McEstimate, McEstimate)> {
    opts.check(p)?;
    let hits = ensemble(opts, |rng| hit_level_with(rng, s0, level, p, opts, f))?;
    let t: Vec<f64> = hits.iter().map(|h| h.1).collect();
    let i: Vec<f64> = hits.iter().map(|h| h.2).collect();
    Ok((McEstimate::from_samples(&t), McEstimate::from_samples(&i)))
}

/// Independent cycles from `s0`, one per path.
pub fn mc_cycles(
    f: &(dyn Fn(&State) -> f64 + Sync),
    s0: &State,
    p: &ModelParams,
    c: &CycleLevels,
    opts: &McOptions,
) -> Result<Vec<CycleSample>> {
    opts.check(p)?;
    ensemble(opts, |rng| sample_cycle_with(rng, s0, f, p, c, opts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongRun {
    pub averages: Vec<McEstimate>,
    /// Mean fraction of post-burn-in time spent in each bin.
    pub occupation: Vec<f64>,
}

/// Time averages over `[burn_in, horizon]` of each `f`, one long path per
/// replica started at the origin, plus occupation fractions of `bin_of`.
pub fn mc_longrun(
    fs: &[&(dyn Fn(&State) -> f64 + Sync)],
    bins: Option<(&(dyn Fn(&State) -> usize + Sync), usize)>,
    p: &ModelParams,
    opts: &McOptions,
) -> Result<LongRun> {
    opts.check(p)?;
    if !(opts.burn_in < opts.horizon) {
        return Err(Error::InvalidOptions("burn_in must be smaller than horizon".into()));
    }
    let n_total = opts.steps(opts.horizon);
    let n_burn = opts.steps(opts.burn_in);
    let n_bins = bins.map_or(0, |b| b.1);
    let sqdt = opts.dt.sqrt();
    let per_path = ensemble(opts, |rng| {
        let mut s = State::new(0.0, 0.0, 0.0);
        let mut sums = vec![0.0; fs.len()];
        let mut counts = vec![0u64; n_bins];
        for n in 0..n_total {
            if n >= n_burn {
                for (acc, f) in sums.iter_mut().zip(fs) {
                    *acc += f(&s);
                }
                if let Some((b, _)) = bins {
                    counts[b(&s)] += 1;
                }
            }
            s = step(&s, p, opts.dt, noise(rng, sqdt));
        }
        Ok((sums, counts))
    })?;
    let m = (n_total - n_burn) as f64;
    let averages = (0..fs.len())
        .map(|q| {
            let v: Vec<f64> = per_path.iter().map(|(s, _)| s[q] / m).collect();
            McEstimate::from_samples(&v)
        })
        .collect();
    let mut occupation = vec![0.0; n_bins];
    for (_, c) in &per_path {
        for (o, &k) in occupation.iter_mut().zip(c) {
            *o += k as f64 / m;
        }
    }
    for o in &mut occupation {
        *o /= per_path.len() as f64;
    }
    Ok(LongRun { averages, occupation })
}

pub fn mc_longrun_average(
    f: &(dyn Fn(&State) -> f64 + Sync),
    p: &ModelParams,
    opts: &McOptions,
) -> Result<McEstimate> {
    Ok(mc_longrun(&[f], None, p, opts)?.averages[0])
}

#[cfg(test)]
mod tests {
    use super::*;

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
    const C: CycleLevels = CycleLevels { ybar: 0.5, ybar1: 1.0 };

    fn opts(n_paths: usize) -> McOptions {
        McOptions {
            dt: 1e-3,
            n_paths,
            horizon: 100.0,
            burn_in: 1.0,
            seed: 7,
            hit_shift: false,
        }
    }

    #[test]
    fn step_examples() {
        let p = params(0.3);
        let o = State::new(0.0, 0.0, 0.0);
        let s = step(&o, &p, 0.01, (0.0, 0.0));
        assert_eq!((s.x, s.y, s.z), (0.0, 0.0, 0.0));
        let s = step(&State::new(1.0, 0.0, 0.0), &p, 0.01, (5.0, 0.0));
        assert_eq!(s.x, 1.0);
        let s = step(&State::new(0.0, 2.0, 0.5 - 1e-3), &p, 0.01, (0.0, 0.0));
        assert_eq!(s.z, 0.5);
    }

    #[test]
    fn horizon_zero_and_determinism() {
        let p = params(0.3);
        let s0 = State::new(0.2, 0.1, -0.1);
        let o = McOptions { horizon: 0.0, ..opts(1) };
        assert_eq!(simulate_path(&s0, &p, &o, |_| {}), s0);
        let o = McOptions { horizon: 5.0, ..opts(1) };
        let mut a = Vec::new();
        let mut b = Vec::new();
        simulate_path(&s0, &p, &o, |s| a.push(*s));
        simulate_path(&s0, &p, &o, |s| b.push(*s));
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.is_admissible(&p)));
    }

    #[test]
    fn hits_are_snapped() {
        let p = params(0.3);
        let (s, t) = hit_level(&State::new(0.0, 0.0, 0.0), 1.0, &p, &opts(1)).unwrap();
        assert_eq!(s.y.abs(), 1.0);
        assert!(t > 0.0);
        let bad = hit_level(&State::new(0.0, 1.0, 0.0), 1.0, &p, &opts(1));
        assert!(bad.is_err());
        let short = McOptions { horizon: 1e-3, ..opts(1) };
        assert!(matches!(
            hit_level(&State::new(0.0, 0.0, 0.0), 50.0, &p, &short),
            Err(Error::HorizonExceeded { .. })
        ));
    }

    #[test]
    fn deterministic_descent_without_noise() {
        // Zero noise: y decays monotonically from 2 and crosses 1.
        let p = params(0.0);
        let mut s = State::new(0.0, 2.0, 0.0);
        let mut n = 0;
        while s.y.abs() > 1.0 {
            s = step(&s, &p, 1e-3, (0.0, 0.0));
            n += 1;
        }
        assert!(n > 0 && n < 2000);
    }

    #[test]
    fn cycle_properties() {
        let p = params(0.3);
        let s0 = State::new(0.1, 1.0, 0.2);
        let one = sample_cycle(&s0, &|_| 1.0, &p, &C, &opts(1)).unwrap();
        assert!((one.integral - one.tau_bar1).abs() < 1e-9);
        assert!(one.tau_bar <= one.tau_bar1);
        assert_eq!(one.hit_outer.y.abs(), 1.0);
        assert_eq!(one.hit_inner.y.abs(), 0.5);
        let zero = sample_cycle(&s0, &|_| 0.0, &p, &C, &opts(1)).unwrap();
        assert_eq!(zero.integral, 0.0);
    }

    #[test]
    fn constant_functional_and_symmetry() {
        let p = params(0.0);
        let c = C;
        let g = std::sync::Arc::new(
            crate::grid::build_grid(&p, &c, 3, 2, 5, 2.0).unwrap(),
        );
        let one = SurfaceField::constant(g.clone(), crate::grid::Level::Gamma1, 2.0);
        let ind = SurfaceField::from_fn(g, crate::grid::Level::Gamma1, |_, _, up| if up { 1.0 } else { 0.0 });
        let est = mc_boundary_functionals(&[&one, &ind], &State::new(0.0, 0.0, 0.0), &p, &c, &opts(2000)).unwrap();
        assert_eq!(est[0].mean, 2.0);
        assert_eq!(est[0].stderr, 0.0);
        assert!((est[1].mean - 0.5).abs() <= 3.0 * est[1].stderr, "{:?}", est[1]);
    }

    #[test]
    fn longrun_examples() {
        let p = params(0.0);
        let o = McOptions { horizon: 20.0, n_paths: 16, ..opts(16) };
        let r = mc_longrun(&[&|_: &State| 1.0, &|s: &State| s.z], None, &p, &o).unwrap();
        assert_eq!(r.averages[0].mean, 1.0);
        assert!(r.averages[1].mean.abs() <= 3.0 * r.averages[1].stderr);
        let o2 = McOptions { n_paths: 3, ..o };
        let a = mc_longrun_average(&|s: &State| s.x * s.y, &p, &o2).unwrap();
        let b = mc_longrun_average(&|s: &State| s.x * s.y, &p, &o2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plastic_time_is_positive() {
        let p = params(0.3);
        let o = McOptions { horizon: 50.0, ..opts(1) };
        let mut plastic = 0usize;
        simulate_path(&State::new(0.0, 0.0, 0.0), &p, &o, |s| {
            if s.z.abs() == p.yield_bound {
                plastic += 1;
            }
        });
        assert!(plastic > 0);
    }

    #[test]
    fn dt_guard() {
        let p = params(0.0);
        let o = McOptions { dt: 0.2, ..opts(1) };
        assert!(o.check(&p).is_err());
        assert!(opts(1).check(&p).is_ok());
    }
}
