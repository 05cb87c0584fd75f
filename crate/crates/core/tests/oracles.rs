//! Closed-form and cross-route oracles for the simulator and the invariant
//! measure.

use plastokh::config::GridSpec;
use plastokh::ergodic::{
    matrix_route, mc_chain_histogram, solve_stationary_density, CycleContext, ErgodicOptions,
};
use plastokh::fd::SolverOptions;
use plastokh::model::{CycleLevels, ModelParams, State};
use plastokh::sim::{mc_longrun_average, McOptions};

/// `∫ x² e^{-a x²} / ∫ e^{-a x²}` over `[-l, l]` by composite Simpson.
fn truncated_gaussian_second_moment(a: f64, l: f64) -> f64 {
    let n = 20_000;
    let h = 2.0 * l / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=n {
        let x = -l + i as f64 * h;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let e = (-a * x * x).exp();
        num += w * x * x * e;
        den += w * e;
    }
    num / den
}

#[test]
fn reflected_ou_second_moment() {
    let p = ModelParams::default();
    let exact = truncated_gaussian_second_moment(p.alpha, p.x_bound);
    let x2 = |s: &State| s.x * s.x;
    let mc = McOptions {
        n_paths: 1000,
        horizon: 40.0,
        burn_in: 2.0,
        ..McOptions::default()
    };
    let coarse = mc_longrun_average(&x2, &p, &mc).unwrap();
    let fine = mc_longrun_average(&x2, &p, &McOptions { dt: mc.dt / 4.0, ..mc }).unwrap();
    let budget = 3.0 * coarse.stderr + 2.0 * (coarse.mean - fine.mean).abs();
    assert!(
        (coarse.mean - exact).abs() <= budget,
        "E x² = {} ± {}, exact {exact}, budget {budget}",
        coarse.mean,
        coarse.stderr
    );
}

/// Stationary law of the x-chain from detailed balance of the upwind rates
/// with mirrored end nodes.
fn x_chain_law(xs: &[f64], alpha: f64) -> Vec<f64> {
    let n = xs.len();
    let h = xs[1] - xs[0];
    let d = 0.5 / (h * h);
    let rate = |i: usize, up: bool| {
        let b = -alpha * xs[i];
        if i == 0 || i == n - 1 {
            2.0 * d + b.abs() / h
        } else if up {
            d + b.max(0.0) / h
        } else {
            d + (-b).max(0.0) / h
        }
    };
    let mut w = vec![1.0];
    for i in 0..n - 1 {
        let next = w[i] * rate(i, true) / rate(i + 1, false);
        w.push(next);
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

#[test]
fn uncoupled_density_factorizes() {
    let p = ModelParams {
        beta: 0.0,
        ..ModelParams::default()
    };
    let c = CycleLevels::default();
    let mut cont_err = Vec::new();
    for nx in [9, 17, 33] {
        let spec = GridSpec {
            nx,
            ..GridSpec::default()
        };
        let ctx = CycleContext::new(spec.build(&p, &c).unwrap(), &p, &c, &SolverOptions::default()).unwrap();
        let g = ctx.grid().clone();
        let m = solve_stationary_density(&ctx).unwrap();
        let mut mx = vec![0.0; g.nx()];
        let mut myz = vec![0.0; g.ny() * g.nz()];
        for n in 0..g.len() {
            let (i, j, k) = g.coords(n);
            mx[i] += m.masses[n];
            myz[j * g.nz() + k] += m.masses[n];
        }
        for n in 0..g.len() {
            let (i, j, k) = g.coords(n);
            let prod = mx[i] * myz[j * g.nz() + k];
            assert!((m.masses[n] - prod).abs() <= 1e-12, "node {n}: {} vs {prod}", m.masses[n]);
        }
        let law = x_chain_law(&g.xs, p.alpha);
        for (a, b) in mx.iter().zip(&law) {
            assert!((a - b).abs() <= 1e-12, "x marginal {a} vs {b}");
        }

        // Nodal density against the continuous truncated Gaussian.
        let h = g.xs[1] - g.xs[0];
        let z: f64 = {
            let n = 20_000;
            let dx = 2.0 * p.x_bound / n as f64;
            (0..n).map(|q| (-p.alpha * (-p.x_bound + (q as f64 + 0.5) * dx).powi(2)).exp() * dx).sum()
        };
        let err = (0..g.nx())
            .map(|i| {
                let w = if i == 0 || i == g.nx() - 1 { h / 2.0 } else { h };
                (mx[i] / w - (-p.alpha * g.xs[i] * g.xs[i]).exp() / z).abs()
            })
            .fold(0.0, f64::max);
        cont_err.push(err);
    }
    assert!(cont_err[1] < cont_err[0] && cont_err[2] < cont_err[1] / 1.8, "density error {cont_err:?}");
}

#[test]
fn embedded_chain_matches_gamma_star() {
    let p = ModelParams::default();
    let c = CycleLevels::default();
    let ctx = CycleContext::new(GridSpec::default().build(&p, &c).unwrap(), &p, &c, &SolverOptions::default()).unwrap();
    let g = ctx.grid().clone();
    let (_, gamma, _) = matrix_route(&ctx, &ErgodicOptions::default()).unwrap();
    let mc = McOptions {
        n_paths: 400,
        horizon: 60.0,
        burn_in: 5.0,
        hit_shift: true,
        ..McOptions::default()
    };
    let hist = mc_chain_histogram(&ctx, &mc).unwrap();
    // Bins: sheet × four z-quarters.
    let m = g.nx() * g.nz();
    let bin = |q: usize| {
        let k = (q % m) / g.nx();
        (q / m) * 4 + (4 * k / g.nz()).min(3)
    };
    let (mut a, mut b) = ([0.0; 8], [0.0; 8]);
    for (q, (u, v)) in gamma.to_vec().iter().zip(&hist).enumerate() {
        a[bin(q)] += u;
        b[bin(q)] += v;
    }
    let tv = 0.5 * a.iter().zip(&b).map(|(u, v)| (u - v).abs()).sum::<f64>();
    assert!(tv <= 0.05, "binned TV {tv}: {a:?} vs {b:?}");
}
