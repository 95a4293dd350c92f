//! Shared oracles for the integration suites. Everything here is an
//! independent route: straight-loop enumerations and a separate implicit
//! stepper, deliberately not reusing the library's solver internals.

#![allow(dead_code)]

use nonlocal_pde::grid::{TriField, TriangleGrid};

/// Independent slice Hölder norm: sup + both seminorms by full enumeration.
fn oracle_slice_norm(
    rows: &[Vec<f64>],
    dt: f64,
    dy: f64,
    n_space: usize,
    period: f64,
    alpha: f64,
) -> f64 {
    let mut sup = 0.0f64;
    for row in rows {
        for v in row {
            sup = sup.max(v.abs());
        }
    }
    let mut semi_s = 0.0f64;
    for k in 0..n_space {
        for a in 0..rows.len() {
            for b in 0..rows.len() {
                if a == b {
                    continue;
                }
                let gap = ((a as f64 - b as f64).abs() * dt).powf(alpha / 2.0);
                semi_s = semi_s.max((rows[a][k] - rows[b][k]).abs() / gap);
            }
        }
    }
    let mut semi_y = 0.0f64;
    for row in rows {
        for ka in 0..n_space {
            for kb in 0..n_space {
                if ka == kb {
                    continue;
                }
                let raw = (ka as f64 - kb as f64).abs() * dy;
                let dist = raw.min(period - raw);
                if dist == 0.0 {
                    continue;
                }
                semi_y = semi_y.max((row[ka] - row[kb]).abs() / dist.powf(alpha));
            }
        }
    }
    sup + semi_s + semi_y
}

/// Independent bracket and double-bracket norms (order alpha) of a
/// triangular field pair by exhaustive enumeration.
pub fn oracle_tri_norms(
    u: &TriField,
    v: &TriField,
    alpha: f64,
) -> (f64, f64) {
    let g = u.grid;
    let mut bracket = 0.0f64;
    let mut double = 0.0f64;
    for i_t in 0..g.n_time {
        let u_rows: Vec<Vec<f64>> = (0..=i_t).map(|j| u.row(i_t, j).to_vec()).collect();
        let v_rows: Vec<Vec<f64>> = (0..=i_t).map(|j| v.row(i_t, j).to_vec()).collect();
        let nu = oracle_slice_norm(&u_rows, g.dt(), g.dy(), g.spatial_len(), g.period, alpha);
        let nv = oracle_slice_norm(&v_rows, g.dt(), g.dy(), g.spatial_len(), g.period, alpha);
        bracket = bracket.max(nu);
        double = double.max(nu + nv);
    }
    (bracket, double)
}

/// Thomas + Sherman-Morrison solve of a cyclic tridiagonal system; the
/// oracle's own copy, kept separate from the library kernel.
pub fn oracle_cyclic_solve(
    sub: &[f64],
    diag: &[f64],
    sup: &[f64],
    rhs: &[f64],
) -> Vec<f64> {
    let n = diag.len();
    let gamma = -diag[0];
    let mut b = diag.to_vec();
    b[0] -= gamma;
    b[n - 1] -= sup[n - 1] * sub[0] / gamma;

    let solve_tri = |b: &[f64], r: &[f64]| -> Vec<f64> {
        let mut x = vec![0.0; n];
        let mut gam = vec![0.0; n];
        let mut bet = b[0];
        x[0] = r[0] / bet;
        for k in 1..n {
            gam[k] = sup[k - 1] / bet;
            bet = b[k] - sub[k] * gam[k];
            x[k] = (r[k] - sub[k] * x[k - 1]) / bet;
        }
        for k in (0..n - 1).rev() {
            x[k] -= gam[k + 1] * x[k + 1];
        }
        x
    };
    let x = solve_tri(&b, rhs);
    let mut corner = vec![0.0; n];
    corner[0] = gamma;
    corner[n - 1] = sup[n - 1];
    let z = solve_tri(&b, &corner);
    let factor = (x[0] + sub[0] * x[n - 1] / gamma) / (1.0 + z[0] + sub[0] * z[n - 1] / gamma);
    x.iter().zip(&z).map(|(xi, zi)| xi - factor * zi).collect()
}

/// Periodic central first derivative of a lattice row.
pub fn oracle_dy(row: &[f64], dy: f64) -> Vec<f64> {
    let n = row.len();
    (0..n)
        .map(|k| (row[(k + 1) % n] - row[(k + n - 1) % n]) / (2.0 * dy))
        .collect()
}

/// Periodic central second derivative of a lattice row.
pub fn oracle_dyy(row: &[f64], dy: f64) -> Vec<f64> {
    let n = row.len();
    (0..n)
        .map(|k| (row[(k + 1) % n] - 2.0 * row[k] + row[(k + n - 1) % n]) / (dy * dy))
        .collect()
}

/// Implicit-Euler resolvent step for `w -> (I - dt L)^{-1} (w + dt source)`
/// with `L = drift d/dy + half_sig2 d2/dy2` on the periodic lattice.
pub fn oracle_implicit_step(
    w: &[f64],
    drift: &[f64],
    half_sig2: f64,
    source: &[f64],
    dt: f64,
    dy: f64,
) -> Vec<f64> {
    let n = w.len();
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for k in 0..n {
        sub[k] = -dt * (half_sig2 / (dy * dy) - drift[k] / (2.0 * dy));
        sup[k] = -dt * (half_sig2 / (dy * dy) + drift[k] / (2.0 * dy));
        diag[k] = 1.0 + 2.0 * dt * half_sig2 / (dy * dy);
        rhs[k] = w[k] + dt * source[k];
    }
    oracle_cyclic_solve(&sub, &diag, &sup, &rhs)
}

/// Discrete-time backward game recursion for the reference-time discounted
/// quadratic control problem: `b = a`, constant `sigma`,
/// `h(t, tau, y, a) = exp(-rho (tau - t)) a^2`,
/// `g(t, y) = exp(-rho (T - t)) q(y)` with `q` the periodic quadratic.
/// Each player chooses the closed-form quadratic minimizer of its own
/// one-step cost; the expectation transfer is implicit Euler. Returns the
/// equilibrium value `v(s_j, y_k) = u(s_j, s_j, y_k)`.
pub fn oracle_tic_lq_recursion(
    grid: &TriangleGrid,
    rho: f64,
    sigma: f64,
    terminal: &dyn Fn(f64, f64) -> f64,
) -> Vec<Vec<f64>> {
    let n = grid.n_time;
    let n_y = grid.spatial_len();
    let dt = grid.dt();
    let dy = grid.dy();
    let half_sig2 = 0.5 * sigma * sigma;

    // u[t_idx] holds the current row u(t_idx, s_j, .) as j sweeps backward.
    let mut u: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n_y)
                .map(|k| terminal(grid.tau(i), grid.point(k)[0]))
                .collect()
        })
        .collect();
    let mut value: Vec<Vec<f64>> = vec![vec![0.0; n_y]; n];
    value[n - 1] = u[n - 1].clone();

    for j in (0..n - 1).rev() {
        let s_j = grid.tau(j);
        // The player at s_j minimizes exp(0) a^2 dt + a u_y dt + ...;
        // quadratic in a with minimizer -u_y/2 from its own row.
        let own_grad = oracle_dy(&u[j], dy);
        let policy: Vec<f64> = own_grad.iter().map(|g| -0.5 * g).collect();
        for i in 0..=j {
            let t_i = grid.tau(i);
            let discount = (-rho * (s_j - t_i)).exp();
            let source: Vec<f64> =
                policy.iter().map(|a| discount * a * a).collect();
            u[i] = oracle_implicit_step(&u[i], &policy, half_sig2, &source, dt, dy);
        }
        value[j] = u[j].clone();
    }
    value
}

/// Classical (local) HJB value by backward policy iteration with implicit
/// Euler transfer: `w_s + min_a { 1/2 sigma^2 w_yy + a w_y + a^2 + kappa cos y } = 0`,
/// `w(T, y) = g(y)`. Returns rows `w(s_j, .)` for `j = 0..n`.
pub fn oracle_classical_hjb(
    grid: &TriangleGrid,
    sigma: f64,
    kappa: f64,
    terminal: &dyn Fn(f64) -> f64,
) -> Vec<Vec<f64>> {
    let n = grid.n_time;
    let n_y = grid.spatial_len();
    let dt = grid.dt();
    let dy = grid.dy();
    let half_sig2 = 0.5 * sigma * sigma;
    let mut rows = vec![vec![0.0; n_y]; n];
    rows[n - 1] = (0..n_y).map(|k| terminal(grid.point(k)[0])).collect();
    for j in (0..n - 1).rev() {
        let w = &rows[j + 1];
        let grad = oracle_dy(w, dy);
        let policy: Vec<f64> = grad.iter().map(|g| -0.5 * g).collect();
        let source: Vec<f64> = (0..n_y)
            .map(|k| policy[k] * policy[k] + kappa * grid.point(k)[0].cos())
            .collect();
        rows[j] = oracle_implicit_step(w, &policy, half_sig2, &source, dt, dy);
    }
    rows
}

use nonlocal_pde::linear::{Coef, LinearCoefficients, SurfaceCoef};
use std::sync::Arc;

/// The manufactured linear problem: `u* = exp(t-s)(2 + sin y)`, `a = 1`,
/// `abar = 0.2`, exact source and initial data.
pub fn manufactured_linear_coeffs() -> LinearCoefficients {
    LinearCoefficients {
        d: 1,
        a: vec![Coef::constant(1.0)],
        a_bar: vec![Coef::constant(0.2)],
        b: vec![Coef::constant(0.0)],
        b_bar: vec![Coef::constant(0.0)],
        c: Coef::constant(0.0),
        c_bar: Coef::constant(0.0),
        f: Coef::with_dt(
            Arc::new(|t: f64, s: f64, y: &[f64]| {
                -(t - s).exp() * (2.0 + y[0].sin()) + (t - s).exp() * y[0].sin()
                    + 0.2 * y[0].sin()
            }),
            Arc::new(|t: f64, s: f64, y: &[f64]| {
                -(t - s).exp() * (2.0 + y[0].sin()) + (t - s).exp() * y[0].sin()
            }),
        ),
        g: SurfaceCoef::with_dt(
            Arc::new(|t: f64, y: &[f64]| t.exp() * (2.0 + y[0].sin())),
            Arc::new(|t: f64, y: &[f64]| t.exp() * (2.0 + y[0].sin())),
        ),
        h_t: None,
    }
}

pub fn manufactured_exact(t: f64, s: f64, y: f64) -> f64 {
    (t - s).exp() * (2.0 + y.sin())
}

/// Max-norm error of a solved field against the manufactured solution.
pub fn manufactured_error(sol: &nonlocal_pde::linear::LinearSolution) -> f64 {
    let g = sol.u.grid;
    let mut worst = 0.0f64;
    for i_t in 0..g.n_time {
        for j in 0..=i_t {
            for k in 0..g.spatial_len() {
                let e = manufactured_exact(g.tau(i_t), g.tau(j), g.point(k)[0]);
                worst = worst.max((sol.u.get(i_t, j, k) - e).abs());
            }
        }
    }
    worst
}
