//! Nonlocal linear solver.
//!
//! The equation couples the unknown at `(t, s, y)` with its values on the
//! diagonal `(s, s, y)`:
//!
//! ```text
//! u_s = a : u_yy + b . u_y + c u + abar : u_yy|diag + bbar . u_y|diag
//!       + cbar u|diag + f,        u(t, 0, y) = g(t, y).
//! ```
//!
//! Writing `v = u_t` and replacing each diagonal term with
//! `u(t,s,y) - ∫_s^t v(theta,s,y) dtheta` turns the equation into a coupled
//! `(u, v)` system whose fixed-point map `v -> V` is solved by Picard
//! iteration. Each iteration is a family of classical parabolic solves, one
//! per t-slice. When the measured contraction stalls, the time window is
//! halved and solved in sequence, re-anchoring initial data at the window
//! boundary; rows behind an accepted window are extended to later `t` by
//! parameterized local solves with the (then known) diagonal as a source.

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{
    gradient_row, hessian_row, integrate_row, restrict_diagonal, TriField, TriangleGrid,
};
use crate::manufacture::{axis_names, canonicalize, LinearExprs};
use crate::norms::{
    holder_norm_alpha, slice_derivatives, tri_norms, HolderConfig, NormOrder, NormReport,
    SliceField,
};
use crate::stepper::{advance_slice_step, OperatorSlice};
use serde::Serialize;
use std::sync::Arc;
use std::time::{Duration, Instant};

pub type SpaceTimeFn = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;
pub type SurfaceFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// A space-time coefficient sampler with an optional analytic t-derivative;
/// central finite differences with step `h_t` are the fallback.
#[derive(Clone)]
pub struct Coef {
    value: SpaceTimeFn,
    dt: Option<SpaceTimeFn>,
}

impl Coef {
    pub fn new(value: SpaceTimeFn) -> Self {
        Coef { value, dt: None }
    }

    pub fn with_dt(value: SpaceTimeFn, dt: SpaceTimeFn) -> Self {
        Coef { value, dt: Some(dt) }
    }

    pub fn constant(v: f64) -> Self {
        Coef {
            value: Arc::new(move |_, _, _| v),
            dt: Some(Arc::new(|_, _, _| 0.0)),
        }
    }

    /// Compiles an expression over `(t, s, y1[, y2])` together with its exact
    /// symbolic t-derivative.
    pub fn from_expr(expr: &Expr, d: usize) -> Result<Self> {
        let expr = canonicalize(expr);
        let axes = axis_names(d);
        let mut slots = vec!["t".to_string(), "s".to_string()];
        slots.extend(axes);
        let slot_refs: Vec<&str> = slots.iter().map(|s| s.as_str()).collect();
        let value = expr.compile(&slot_refs)?;
        let dt = expr.diff("t").compile(&slot_refs)?;
        let pack = move |t: f64, s: f64, y: &[f64]| {
            let mut buf = [0.0; 4];
            buf[0] = t;
            buf[1] = s;
            buf[2..2 + y.len()].copy_from_slice(y);
            buf
        };
        let v2 = value;
        let d2 = dt;
        let n_args = 2 + d;
        Ok(Coef {
            value: Arc::new(move |t, s, y| v2.eval(&pack(t, s, y)[..n_args])),
            dt: Some(Arc::new(move |t, s, y| d2.eval(&pack(t, s, y)[..n_args]))),
        })
    }

    /// Wraps grid tables: values looked up at nodes, the t-derivative table
    /// built once by edge-aware finite differences along `t`.
    pub fn from_table(table: Arc<TriField>) -> Self {
        let dt_table = Arc::new(t_derivative_table(&table));
        Self::from_tables(table, dt_table)
    }

    /// Wraps a value table and an explicitly supplied t-derivative table.
    pub fn from_tables(table: Arc<TriField>, dt_table: Arc<TriField>) -> Self {
        let grid = table.grid;
        let t1 = table.clone();
        let value: SpaceTimeFn = Arc::new(move |t, s, y| lookup(&t1, &grid, t, s, y));
        let dt: SpaceTimeFn = Arc::new(move |t, s, y| lookup(&dt_table, &grid, t, s, y));
        Coef { value, dt: Some(dt) }
    }

    #[inline]
    pub fn eval(&self, t: f64, s: f64, y: &[f64]) -> f64 {
        (self.value)(t, s, y)
    }

    /// Analytic t-derivative when available, else central differences.
    #[inline]
    pub fn eval_dt(&self, t: f64, s: f64, y: &[f64], h: f64) -> f64 {
        match &self.dt {
            Some(f) => f(t, s, y),
            None => ((self.value)(t + h, s, y) - (self.value)(t - h, s, y)) / (2.0 * h),
        }
    }
}

fn lookup(table: &TriField, grid: &TriangleGrid, t: f64, s: f64, y: &[f64]) -> f64 {
    let dt = grid.dt();
    let dy = grid.dy();
    let i_t = (t / dt).round() as usize;
    let i_s = (s / dt).round() as usize;
    debug_assert!((t - grid.tau(i_t)).abs() < 1e-6 * dt.max(1e-30));
    debug_assert!((s - grid.tau(i_s)).abs() < 1e-6 * dt.max(1e-30));
    let n = grid.n_space as isize;
    let wrap = |v: f64| -> usize {
        let i = (v / dy).round() as isize;
        (((i % n) + n) % n) as usize
    };
    let k = match grid.d {
        1 => wrap(y[0]),
        _ => wrap(y[0]) + grid.n_space * wrap(y[1]),
    };
    table.get(i_t, i_s.min(i_t), k)
}

/// Finite-difference t-derivative of a triangular table; second order in the
/// interior, one-sided at the triangle edges.
fn t_derivative_table(u: &TriField) -> TriField {
    let g = u.grid;
    let dt = g.dt();
    let mut out = TriField::zeros(g);
    for i_t in 0..g.n_time {
        for i_s in 0..=i_t {
            for k in 0..g.spatial_len() {
                let v = if i_t > i_s && i_t + 1 < g.n_time {
                    (u.get(i_t + 1, i_s, k) - u.get(i_t - 1, i_s, k)) / (2.0 * dt)
                } else if i_t == i_s {
                    if i_t + 2 < g.n_time {
                        (-3.0 * u.get(i_t, i_s, k) + 4.0 * u.get(i_t + 1, i_s, k)
                            - u.get(i_t + 2, i_s, k))
                            / (2.0 * dt)
                    } else if i_t + 1 < g.n_time {
                        (u.get(i_t + 1, i_s, k) - u.get(i_t, i_s, k)) / dt
                    } else {
                        0.0
                    }
                } else if i_t >= i_s + 2 {
                    (3.0 * u.get(i_t, i_s, k) - 4.0 * u.get(i_t - 1, i_s, k)
                        + u.get(i_t - 2, i_s, k))
                        / (2.0 * dt)
                } else {
                    (u.get(i_t, i_s, k) - u.get(i_t - 1, i_s, k)) / dt
                };
                out.set(i_t, i_s, k, v);
            }
        }
    }
    out
}

/// Initial-data sampler `g(t, y)` with optional analytic t-derivative.
#[derive(Clone)]
pub struct SurfaceCoef {
    value: SurfaceFn,
    dt: Option<SurfaceFn>,
}

impl SurfaceCoef {
    pub fn new(value: SurfaceFn) -> Self {
        SurfaceCoef { value, dt: None }
    }

    pub fn with_dt(value: SurfaceFn, dt: SurfaceFn) -> Self {
        SurfaceCoef { value, dt: Some(dt) }
    }

    pub fn from_expr(expr: &Expr, d: usize) -> Result<Self> {
        let expr = canonicalize(expr);
        let axes = axis_names(d);
        let mut slots = vec!["t".to_string()];
        slots.extend(axes);
        let slot_refs: Vec<&str> = slots.iter().map(|s| s.as_str()).collect();
        let value = expr.compile(&slot_refs)?;
        let dt = expr.diff("t").compile(&slot_refs)?;
        let n_args = 1 + d;
        Ok(SurfaceCoef {
            value: Arc::new(move |t, y| {
                let mut buf = [0.0; 3];
                buf[0] = t;
                buf[1..1 + y.len()].copy_from_slice(y);
                value.eval(&buf[..n_args])
            }),
            dt: Some(Arc::new(move |t, y| {
                let mut buf = [0.0; 3];
                buf[0] = t;
                buf[1..1 + y.len()].copy_from_slice(y);
                dt.eval(&buf[..n_args])
            })),
        })
    }

    #[inline]
    pub fn eval(&self, t: f64, y: &[f64]) -> f64 {
        (self.value)(t, y)
    }

    #[inline]
    pub fn eval_dt(&self, t: f64, y: &[f64], h: f64) -> f64 {
        match &self.dt {
            Some(f) => f(t, y),
            None => ((self.value)(t + h, y) - (self.value)(t - h, y)) / (2.0 * h),
        }
    }
}

/// Samplers for every coefficient family of the linear equation and the data
/// `(f, g)`, each with analytic-or-finite-difference t-derivatives.
#[derive(Clone)]
pub struct LinearCoefficients {
    pub d: usize,
    /// Local diffusion, row-major `d*d`.
    pub a: Vec<Coef>,
    /// Diagonal-term diffusion.
    pub a_bar: Vec<Coef>,
    pub b: Vec<Coef>,
    pub b_bar: Vec<Coef>,
    pub c: Coef,
    pub c_bar: Coef,
    pub f: Coef,
    pub g: SurfaceCoef,
    /// Finite-difference step for t-derivative fallbacks; grid `dt` when
    /// absent.
    pub h_t: Option<f64>,
}

impl LinearCoefficients {
    /// Builds from expression trees (exact symbolic t-derivatives throughout).
    pub fn from_exprs(exprs: &LinearExprs, f: &Expr, g: &Expr) -> Result<Self> {
        let d = exprs.d;
        let coef_vec = |es: &[Expr]| -> Result<Vec<Coef>> {
            es.iter().map(|e| Coef::from_expr(e, d)).collect()
        };
        Ok(LinearCoefficients {
            d,
            a: coef_vec(&exprs.a)?,
            a_bar: coef_vec(&exprs.a_bar)?,
            b: coef_vec(&exprs.b)?,
            b_bar: coef_vec(&exprs.b_bar)?,
            c: Coef::from_expr(&exprs.c, d)?,
            c_bar: Coef::from_expr(&exprs.c_bar, d)?,
            f: Coef::from_expr(f, d)?,
            g: SurfaceCoef::from_expr(g, d)?,
            h_t: None,
        })
    }

    fn fd_step(&self, grid: &TriangleGrid) -> f64 {
        self.h_t.unwrap_or_else(|| grid.dt())
    }

    /// Verifies both uniform ellipticity conditions at every triangle node;
    /// returns the witnessed minima for `a` and `a + abar`.
    pub fn check_ellipticity(&self, grid: &TriangleGrid) -> Result<(f64, f64)> {
        let d = self.d;
        let mut min_a = f64::INFINITY;
        let mut min_sum = f64::INFINITY;
        for i_t in 0..grid.n_time {
            let t = grid.tau(i_t);
            for i_s in 0..=i_t {
                let s = grid.tau(i_s);
                for k in 0..grid.spatial_len() {
                    let y = grid.point(k);
                    let eig = |vals: &[f64]| -> f64 {
                        match d {
                            1 => vals[0],
                            _ => {
                                let tr = vals[0] + vals[3];
                                let off = 0.5 * (vals[1] + vals[2]);
                                let det = vals[0] * vals[3] - off * off;
                                0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt())
                            }
                        }
                    };
                    let a_vals: Vec<f64> =
                        self.a.iter().map(|cf| cf.eval(t, s, &y)).collect();
                    let sum_vals: Vec<f64> = self
                        .a
                        .iter()
                        .zip(&self.a_bar)
                        .map(|(ca, cb)| ca.eval(t, s, &y) + cb.eval(t, s, &y))
                        .collect();
                    min_a = min_a.min(eig(&a_vals));
                    min_sum = min_sum.min(eig(&sum_vals));
                }
            }
        }
        if min_a <= 0.0 {
            return Err(Error::Model(format!(
                "uniform ellipticity fails for a (min eigenvalue {min_a:e})"
            )));
        }
        if min_sum <= 0.0 {
            return Err(Error::Model(format!(
                "uniform ellipticity fails for a + abar (min eigenvalue {min_sum:e})"
            )));
        }
        Ok((min_a, min_sum))
    }
}

/// Solver tuning knobs; the defaults match the CLI defaults.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub contraction_cap: f64,
    pub theta: f64,
    pub norms: HolderConfig,
    /// Pair budget for the per-iteration convergence monitor (0 = exhaustive,
    /// slow on fine grids).
    pub monitor_budget: usize,
    /// Cap on the first attempted window length in nodes (testing hook).
    pub max_window: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_iter: 200,
            contraction_cap: 0.9,
            theta: 0.5,
            norms: HolderConfig::default(),
            monitor_budget: 2048,
            max_window: None,
        }
    }
}

/// Per-iteration contraction factors, accepted sub-intervals, and the final
/// norm snapshot of a solve.
#[derive(Debug, Clone, Serialize)]
pub struct SolverReport {
    pub iterations: usize,
    /// Ratios of successive Picard increment norms, chronological.
    pub contraction_factors: Vec<f64>,
    /// Accepted windows as (start, end) node indices.
    pub subintervals: Vec<(usize, usize)>,
    /// Contraction factors grouped per accepted window.
    pub window_factors: Vec<Vec<f64>>,
    pub final_increment: f64,
    pub tolerance: f64,
    pub norm_snapshot: NormReport,
    /// Ellipticity witnesses (min eigenvalues of `a` and `a+abar`).
    pub ellipticity: (f64, f64),
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Converged solution pair `(u, v = u_t)` with its report.
#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub u: TriField,
    pub v: TriField,
    pub report: SolverReport,
}

/// Node-sampled coefficient values cached for one t-slice row.
struct RowCoeffs {
    a: Vec<f64>,
    a_bar: Vec<f64>,
    b: Vec<f64>,
    b_bar: Vec<f64>,
    c: Vec<f64>,
    c_bar: Vec<f64>,
    f: Vec<f64>,
    a_t: Vec<f64>,
    a_bar_t: Vec<f64>,
    b_t: Vec<f64>,
    b_bar_t: Vec<f64>,
    c_t: Vec<f64>,
    c_bar_t: Vec<f64>,
    f_t: Vec<f64>,
}

fn sample_row_coeffs(
    coeffs: &LinearCoefficients,
    grid: &TriangleGrid,
    i_t: usize,
    i_s: usize,
    h_t: f64,
) -> RowCoeffs {
    let d = coeffs.d;
    let n = grid.spatial_len();
    let t = grid.tau(i_t);
    let s = grid.tau(i_s);
    let mut rc = RowCoeffs {
        a: vec![0.0; n * d * d],
        a_bar: vec![0.0; n * d * d],
        b: vec![0.0; n * d],
        b_bar: vec![0.0; n * d],
        c: vec![0.0; n],
        c_bar: vec![0.0; n],
        f: vec![0.0; n],
        a_t: vec![0.0; n * d * d],
        a_bar_t: vec![0.0; n * d * d],
        b_t: vec![0.0; n * d],
        b_bar_t: vec![0.0; n * d],
        c_t: vec![0.0; n],
        c_bar_t: vec![0.0; n],
        f_t: vec![0.0; n],
    };
    for k in 0..n {
        let y = grid.point(k);
        for idx in 0..d * d {
            rc.a[k * d * d + idx] = coeffs.a[idx].eval(t, s, &y);
            rc.a_bar[k * d * d + idx] = coeffs.a_bar[idx].eval(t, s, &y);
            rc.a_t[k * d * d + idx] = coeffs.a[idx].eval_dt(t, s, &y, h_t);
            rc.a_bar_t[k * d * d + idx] = coeffs.a_bar[idx].eval_dt(t, s, &y, h_t);
        }
        for idx in 0..d {
            rc.b[k * d + idx] = coeffs.b[idx].eval(t, s, &y);
            rc.b_bar[k * d + idx] = coeffs.b_bar[idx].eval(t, s, &y);
            rc.b_t[k * d + idx] = coeffs.b[idx].eval_dt(t, s, &y, h_t);
            rc.b_bar_t[k * d + idx] = coeffs.b_bar[idx].eval_dt(t, s, &y, h_t);
        }
        rc.c[k] = coeffs.c.eval(t, s, &y);
        rc.c_bar[k] = coeffs.c_bar.eval(t, s, &y);
        rc.c_t[k] = coeffs.c.eval_dt(t, s, &y, h_t);
        rc.c_bar_t[k] = coeffs.c_bar.eval_dt(t, s, &y, h_t);
        rc.f[k] = coeffs.f.eval(t, s, &y);
        rc.f_t[k] = coeffs.f.eval_dt(t, s, &y, h_t);
    }
    rc
}

/// One application of the contraction map on the window triangle
/// `(i, j) in [start, end]^2, j <= i`: solves the `u` equation with the
/// integral terms of `v_in` as sources, then the `V` equation sourced by the
/// freshly computed `u`. Initial rows at `s = start` come from
/// `(u_init, v_init)`.
pub fn gamma_map(
    v_in: &TriField,
    coeffs: &LinearCoefficients,
    grid: &TriangleGrid,
    window: (usize, usize),
    initial_data: (&TriField, &TriField),
    theta: f64,
) -> Result<(TriField, TriField)> {
    let (lo, hi) = window;
    let d = coeffs.d;
    let n = grid.spatial_len();
    let dt = grid.dt();
    let h_t = coeffs.fd_step(grid);
    let (u_init, v_init) = initial_data;

    let mut u_out = TriField::zeros(*grid);
    let mut v_out = TriField::zeros(*grid);

    for i_t in lo..=hi {
        let rows = i_t - lo + 1;
        // Coefficients and integral terms per row.
        let mut rcs = Vec::with_capacity(rows);
        let mut integ = Vec::with_capacity(rows);
        let mut integ_y = Vec::with_capacity(rows);
        let mut integ_yy = Vec::with_capacity(rows);
        for j in lo..=i_t {
            rcs.push(sample_row_coeffs(coeffs, grid, i_t, j, h_t));
            let iv = integrate_row(v_in, i_t, j);
            integ_y.push(gradient_row(&iv, grid));
            integ_yy.push(hessian_row(&iv, grid));
            integ.push(iv);
        }

        // First equation: diffusion a+abar, drift b+bbar, reaction c+cbar,
        // source f minus the integral terms of v_in.
        let mut ops_u = Vec::with_capacity(rows);
        for (r, rc) in rcs.iter().enumerate() {
            let mut op = OperatorSlice::zeros(d, n);
            for k in 0..n {
                for idx in 0..d * d {
                    op.a[k * d * d + idx] = rc.a[k * d * d + idx] + rc.a_bar[k * d * d + idx];
                }
                for idx in 0..d {
                    op.b[k * d + idx] = rc.b[k * d + idx] + rc.b_bar[k * d + idx];
                }
                op.c[k] = rc.c[k] + rc.c_bar[k];
                let mut src = rc.f[k];
                for i in 0..d {
                    for j2 in 0..d {
                        src -= rc.a_bar[k * d * d + i * d + j2] * integ_yy[r][i * d + j2][k];
                    }
                    src -= rc.b_bar[k * d + i] * integ_y[r][i][k];
                }
                src -= rc.c_bar[k] * integ[r][k];
                op.source[k] = src;
            }
            ops_u.push(op);
        }

        let mut u_rows: Vec<Vec<f64>> = Vec::with_capacity(rows);
        u_rows.push(u_init.row(i_t, lo).to_vec());
        for r in 0..rows - 1 {
            let op = OperatorSlice::blend(&ops_u[r], &ops_u[r + 1], theta);
            u_rows.push(advance_slice_step(&u_rows[r], &op, grid, dt, theta)?);
        }

        // Second equation: diffusion a, drift b, reaction c; sources from the
        // t-derivatives of the coefficients against u and the integral terms.
        let mut ops_v = Vec::with_capacity(rows);
        for (r, rc) in rcs.iter().enumerate() {
            let u_grad = gradient_row(&u_rows[r], grid);
            let u_hess = hessian_row(&u_rows[r], grid);
            let mut op = OperatorSlice::zeros(d, n);
            for k in 0..n {
                for idx in 0..d * d {
                    op.a[k * d * d + idx] = rc.a[k * d * d + idx];
                }
                for idx in 0..d {
                    op.b[k * d + idx] = rc.b[k * d + idx];
                }
                op.c[k] = rc.c[k];
                let mut src = rc.f_t[k];
                for i in 0..d {
                    for j2 in 0..d {
                        let idx = i * d + j2;
                        src += (rc.a_t[k * d * d + idx] + rc.a_bar_t[k * d * d + idx])
                            * u_hess[idx][k];
                        src -= rc.a_bar_t[k * d * d + idx] * integ_yy[r][idx][k];
                    }
                    src += (rc.b_t[k * d + i] + rc.b_bar_t[k * d + i]) * u_grad[i][k];
                    src -= rc.b_bar_t[k * d + i] * integ_y[r][i][k];
                }
                src += (rc.c_t[k] + rc.c_bar_t[k]) * u_rows[r][k];
                src -= rc.c_bar_t[k] * integ[r][k];
                op.source[k] = src;
            }
            ops_v.push(op);
        }

        let mut v_rows: Vec<Vec<f64>> = Vec::with_capacity(rows);
        v_rows.push(v_init.row(i_t, lo).to_vec());
        for r in 0..rows - 1 {
            let op = OperatorSlice::blend(&ops_v[r], &ops_v[r + 1], theta);
            v_rows.push(advance_slice_step(&v_rows[r], &op, grid, dt, theta)?);
        }

        for (r, j) in (lo..=i_t).enumerate() {
            u_out.set_row(i_t, j, &u_rows[r]);
            v_out.set_row(i_t, j, &v_rows[r]);
        }
    }
    Ok((u_out, v_out))
}

/// Bracket norm of the difference `a - b` restricted to a window triangle,
/// used as the Picard convergence monitor.
fn window_increment(
    a: &TriField,
    b: &TriField,
    cfg: &HolderConfig,
    lo: usize,
    hi: usize,
) -> Result<f64> {
    let diff = a.sub(b)?;
    let mut bracket = 0.0f64;
    for i_t in lo..=hi {
        let slice = SliceField::from_tri_slice(&diff, i_t, lo);
        let derivs = slice_derivatives(&slice);
        let rep = holder_norm_alpha(&slice, cfg, NormOrder::TwoPlusAlpha, Some(&derivs))?;
        bracket = bracket.max(rep.c_2alpha);
    }
    Ok(bracket)
}

enum WindowOutcome {
    Converged { factors: Vec<f64>, iterations: usize, final_increment: f64 },
    Stalled { factors: Vec<f64>, iterations: usize },
}

/// Picard iteration of the contraction map on one window triangle. On
/// success the converged pair is written into `(u, v)`.
fn picard_window(
    u: &mut TriField,
    v: &mut TriField,
    coeffs: &LinearCoefficients,
    grid: &TriangleGrid,
    window: (usize, usize),
    opts: &SolveOptions,
) -> Result<WindowOutcome> {
    let (lo, hi) = window;
    let mut monitor_cfg = opts.norms;
    monitor_cfg.pair_budget = opts.monitor_budget;

    // Seed: v extended constantly in s from its initial row.
    let mut v_cur = v.clone();
    for i_t in lo..=hi {
        let row = v.row(i_t, lo).to_vec();
        for j in lo..=i_t {
            v_cur.set_row(i_t, j, &row);
        }
    }
    let mut factors = Vec::new();
    let mut prev_inc: Option<f64> = None;
    for iter in 1..=opts.max_iter {
        let (u_next, v_next) = gamma_map(&v_cur, coeffs, grid, window, (&*u, &*v), opts.theta)?;
        let inc = window_increment(&v_next, &v_cur, &monitor_cfg, lo, hi)?;
        if let Some(p) = prev_inc {
            if p > 0.0 {
                factors.push(inc / p);
            }
        }
        v_cur = v_next;
        if inc <= opts.tol {
            for i_t in lo..=hi {
                for j in lo..=i_t {
                    u.set_row(i_t, j, u_next.row(i_t, j));
                    v.set_row(i_t, j, v_cur.row(i_t, j));
                }
            }
            return Ok(WindowOutcome::Converged {
                factors,
                iterations: iter,
                final_increment: inc,
            });
        }
        let n_f = factors.len();
        if n_f >= 3 && factors[n_f - 3..].iter().all(|f| *f >= opts.contraction_cap) {
            return Ok(WindowOutcome::Stalled { factors, iterations: iter });
        }
        prev_inc = Some(inc);
    }
    Ok(WindowOutcome::Stalled { factors, iterations: opts.max_iter })
}

/// Extends rows `s in [lo, hi]` to slices `t > hi` by classical per-slice
/// marches: the diagonal is known up to `s = hi`, so the diagonal terms are
/// plain sources.
fn extend_rows(
    u: &mut TriField,
    v: &mut TriField,
    coeffs: &LinearCoefficients,
    grid: &TriangleGrid,
    lo: usize,
    hi: usize,
    t_end: usize,
    theta: f64,
) -> Result<()> {
    let d = coeffs.d;
    let n = grid.spatial_len();
    let dt = grid.dt();
    let h_t = coeffs.fd_step(grid);

    // Diagonal rows and their derivatives, shared by every extended slice.
    let diag = restrict_diagonal(u);
    let mut diag_grad = Vec::with_capacity(hi - lo + 1);
    let mut diag_hess = Vec::with_capacity(hi - lo + 1);
    for j in lo..=hi {
        diag_grad.push(gradient_row(diag.row(j), grid));
        diag_hess.push(hessian_row(diag.row(j), grid));
    }

    for i_t in hi + 1..=t_end {
        let rows = hi - lo + 1;
        let rcs: Vec<RowCoeffs> = (lo..=hi)
            .map(|j| sample_row_coeffs(coeffs, grid, i_t, j, h_t))
            .collect();

        // u equation: local operator plus known diagonal sources.
        let mut ops_u = Vec::with_capacity(rows);
        for (r, rc) in rcs.iter().enumerate() {
            let j = lo + r;
            let mut op = OperatorSlice::zeros(d, n);
            for k in 0..n {
                for idx in 0..d * d {
                    op.a[k * d * d + idx] = rc.a[k * d * d + idx];
                }
                for idx in 0..d {
                    op.b[k * d + idx] = rc.b[k * d + idx];
                }
                op.c[k] = rc.c[k];
                let mut src = rc.f[k];
                for i in 0..d {
                    for j2 in 0..d {
                        src += rc.a_bar[k * d * d + i * d + j2] * diag_hess[r][i * d + j2][k];
                    }
                    src += rc.b_bar[k * d + i] * diag_grad[r][i][k];
                }
                src += rc.c_bar[k] * diag.get(j, k);
                op.source[k] = src;
            }
            ops_u.push(op);
        }
        let mut u_rows: Vec<Vec<f64>> = Vec::with_capacity(rows);
        u_rows.push(u.row(i_t, lo).to_vec());
        for r in 0..rows - 1 {
            let op = OperatorSlice::blend(&ops_u[r], &ops_u[r + 1], theta);
            u_rows.push(advance_slice_step(&u_rows[r], &op, grid, dt, theta)?);
        }

        // v equation: sources from t-differentiated coefficients against the
        // fresh u rows and the known diagonal.
        let mut ops_v = Vec::with_capacity(rows);
        for (r, rc) in rcs.iter().enumerate() {
            let j = lo + r;
            let u_grad = gradient_row(&u_rows[r], grid);
            let u_hess = hessian_row(&u_rows[r], grid);
            let mut op = OperatorSlice::zeros(d, n);
            for k in 0..n {
                for idx in 0..d * d {
                    op.a[k * d * d + idx] = rc.a[k * d * d + idx];
                }
                for idx in 0..d {
                    op.b[k * d + idx] = rc.b[k * d + idx];
                }
                op.c[k] = rc.c[k];
                let mut src = rc.f_t[k];
                for i in 0..d {
                    for j2 in 0..d {
                        let idx = i * d + j2;
                        src += rc.a_t[k * d * d + idx] * u_hess[idx][k];
                        src += rc.a_bar_t[k * d * d + idx] * diag_hess[r][idx][k];
                    }
                    src += rc.b_t[k * d + i] * u_grad[i][k];
                    src += rc.b_bar_t[k * d + i] * diag_grad[r][i][k];
                }
                src += rc.c_t[k] * u_rows[r][k];
                src += rc.c_bar_t[k] * diag.get(j, k);
                op.source[k] = src;
            }
            ops_v.push(op);
        }
        let mut v_rows: Vec<Vec<f64>> = Vec::with_capacity(rows);
        v_rows.push(v.row(i_t, lo).to_vec());
        for r in 0..rows - 1 {
            let op = OperatorSlice::blend(&ops_v[r], &ops_v[r + 1], theta);
            v_rows.push(advance_slice_step(&v_rows[r], &op, grid, dt, theta)?);
        }

        for (r, j) in (lo..=hi).enumerate() {
            u.set_row(i_t, j, &u_rows[r]);
            v.set_row(i_t, j, &v_rows[r]);
        }
    }
    Ok(())
}

pub(crate) struct WindowRun {
    pub subintervals: Vec<(usize, usize)>,
    pub window_factors: Vec<Vec<f64>>,
    pub iterations: usize,
    pub final_increment: f64,
}

/// Adaptive fixed-point solve on `[lo, hi]` with initial rows already
/// written at `s = lo` of `(u, v)` for every `t >= lo`.
pub(crate) fn solve_on_window(
    u: &mut TriField,
    v: &mut TriField,
    coeffs: &LinearCoefficients,
    grid: &TriangleGrid,
    opts: &SolveOptions,
    lo: usize,
    hi: usize,
) -> Result<WindowRun> {
    let mut run = WindowRun {
        subintervals: Vec::new(),
        window_factors: Vec::new(),
        iterations: 0,
        final_increment: 0.0,
    };
    let mut start = lo;
    while start < hi {
        let mut end = match opts.max_window {
            Some(w) => (start + w.max(1)).min(hi),
            None => hi,
        };
        loop {
            match picard_window(u, v, coeffs, grid, (start, end), opts)? {
                WindowOutcome::Converged { factors, iterations, final_increment } => {
                    run.iterations += iterations;
                    run.subintervals.push((start, end));
                    run.window_factors.push(factors);
                    run.final_increment = final_increment;
                    break;
                }
                WindowOutcome::Stalled { factors, iterations } => {
                    run.iterations += iterations;
                    if end - start <= 1 {
                        return Err(Error::NonConvergence(format!(
                            "window [{start}, {end}] (minimal) failed after {iterations} \
                             iterations; last factors {:?}",
                            &factors[factors.len().saturating_sub(3)..]
                        )));
                    }
                    end = start + ((end - start) / 2).max(1);
                }
            }
        }
        if end < hi {
            extend_rows(u, v, coeffs, grid, start, end, hi, opts.theta)?;
        }
        start = end;
    }
    Ok(run)
}

/// Solves the nonlocal linear equation on the whole triangle by Picard
/// iteration of the contraction map with adaptive window halving.
pub fn solve_linear(
    coeffs: &LinearCoefficients,
    grid: &TriangleGrid,
    opts: &SolveOptions,
) -> Result<LinearSolution> {
    let clock = Instant::now();
    if coeffs.d != grid.d {
        return Err(Error::Argument("coefficient dimension does not match grid".into()));
    }
    let ellipticity = coeffs.check_ellipticity(grid)?;
    let h_t = coeffs.fd_step(grid);

    let mut u = TriField::zeros(*grid);
    let mut v = TriField::zeros(*grid);
    for i_t in 0..grid.n_time {
        let t = grid.tau(i_t);
        let n = grid.spatial_len();
        let mut g_row = vec![0.0; n];
        let mut gt_row = vec![0.0; n];
        for k in 0..n {
            let y = grid.point(k);
            g_row[k] = coeffs.g.eval(t, &y);
            gt_row[k] = coeffs.g.eval_dt(t, &y, h_t);
        }
        u.set_row(i_t, 0, &g_row);
        v.set_row(i_t, 0, &gt_row);
    }

    let run = solve_on_window(&mut u, &mut v, coeffs, grid, opts, 0, grid.n_time - 1)?;

    if !u.is_finite() || !v.is_finite() {
        return Err(Error::Numerical("solution contains non-finite values".into()));
    }
    let norm_snapshot = {
        let mut cfg = opts.norms;
        cfg.pair_budget = opts.monitor_budget;
        tri_norms(&u, Some(&v), &cfg, NormOrder::TwoPlusAlpha)?
    };
    let report = SolverReport {
        iterations: run.iterations,
        contraction_factors: run.window_factors.iter().flatten().copied().collect(),
        subintervals: run.subintervals,
        window_factors: run.window_factors,
        final_increment: run.final_increment,
        tolerance: opts.tol,
        norm_snapshot,
        ellipticity,
        wall_time: clock.elapsed(),
    };
    Ok(LinearSolution { u, v, report })
}

/// Node-sampled operators of the purely local problem (`abar`, `bbar`,
/// `cbar` ignored) for one fixed `t`-slice, rows `s = 0..=i_t`.
pub fn local_slice_operators(
    coeffs: &LinearCoefficients,
    grid: &TriangleGrid,
    i_t: usize,
) -> Vec<OperatorSlice> {
    let d = coeffs.d;
    let n = grid.spatial_len();
    let t = grid.tau(i_t);
    (0..=i_t)
        .map(|j| {
            let s = grid.tau(j);
            let mut op = OperatorSlice::zeros(d, n);
            for k in 0..n {
                let y = grid.point(k);
                for idx in 0..d * d {
                    op.a[k * d * d + idx] = coeffs.a[idx].eval(t, s, &y);
                }
                for idx in 0..d {
                    op.b[k * d + idx] = coeffs.b[idx].eval(t, s, &y);
                }
                op.c[k] = coeffs.c.eval(t, s, &y);
                op.source[k] = coeffs.f.eval(t, s, &y);
            }
            op
        })
        .collect()
}

/// Max over triangle nodes of `|v - D_t u|` with central differences along
/// `t` in the interior and one-sided differences at the edge t-nodes. The
/// one-sided edges dominate at rate O(dt).
pub fn check_equivalence(sol: &LinearSolution) -> f64 {
    let g = sol.u.grid;
    let dt = g.dt();
    let mut worst = 0.0f64;
    for i_t in 0..g.n_time {
        for i_s in 0..=i_t {
            for k in 0..g.spatial_len() {
                let d_t = if i_t > i_s && i_t + 1 < g.n_time {
                    (sol.u.get(i_t + 1, i_s, k) - sol.u.get(i_t - 1, i_s, k)) / (2.0 * dt)
                } else if i_t + 1 < g.n_time {
                    (sol.u.get(i_t + 1, i_s, k) - sol.u.get(i_t, i_s, k)) / dt
                } else if i_t > i_s {
                    (sol.u.get(i_t, i_s, k) - sol.u.get(i_t - 1, i_s, k)) / dt
                } else {
                    continue;
                };
                worst = worst.max((sol.v.get(i_t, i_s, k) - d_t).abs());
            }
        }
    }
    worst
}

fn sample_source_fields(
    coeffs: &LinearCoefficients,
    grid: &TriangleGrid,
) -> (TriField, TriField) {
    let h_t = coeffs.fd_step(grid);
    let f = TriField::from_fn(*grid, |t, s, y| coeffs.f.eval(t, s, y));
    let f_t = TriField::from_fn(*grid, |t, s, y| coeffs.f.eval_dt(t, s, y, h_t));
    (f, f_t)
}

/// `sup_t (|g(t,.)| + |g_t(t,.)|)` in the requested slice norm, treating
/// `g` as an s-independent single-row slice per `t`.
fn surface_double_norm(
    g_fn: &SurfaceCoef,
    grid: &TriangleGrid,
    cfg: &HolderConfig,
    order: NormOrder,
    h_t: f64,
) -> Result<f64> {
    let n = grid.spatial_len();
    let mut worst = 0.0f64;
    for i_t in 0..grid.n_time {
        let t = grid.tau(i_t);
        let mut row = vec![0.0; n];
        let mut row_t = vec![0.0; n];
        for k in 0..n {
            let y = grid.point(k);
            row[k] = g_fn.eval(t, &y);
            row_t[k] = g_fn.eval_dt(t, &y, h_t);
        }
        let norm_of = |row: Vec<f64>| -> Result<f64> {
            let slice = SliceField::single_row(row, grid);
            match order {
                NormOrder::Alpha => {
                    Ok(holder_norm_alpha(&slice, cfg, NormOrder::Alpha, None)?.c_alpha)
                }
                NormOrder::TwoPlusAlpha => {
                    let derivs = slice_derivatives(&slice);
                    Ok(holder_norm_alpha(&slice, cfg, order, Some(&derivs))?.c_2alpha)
                }
            }
        };
        worst = worst.max(norm_of(row)? + norm_of(row_t)?);
    }
    Ok(worst)
}

/// Empirical Schauder ratio
/// `||u||^(2+alpha) / (||f||^(alpha) + ||g||^(2+alpha))`.
/// Returns 0 for zero data with a vanishing numerator.
pub fn schauder_ratio(
    sol: &LinearSolution,
    coeffs: &LinearCoefficients,
    grid: &TriangleGrid,
    cfg: &HolderConfig,
) -> Result<f64> {
    let numerator =
        tri_norms(&sol.u, Some(&sol.v), cfg, NormOrder::TwoPlusAlpha)?.double_bracket;
    let (f, f_t) = sample_source_fields(coeffs, grid);
    let f_norm = tri_norms(&f, Some(&f_t), cfg, NormOrder::Alpha)?.double_bracket;
    let g_norm = surface_double_norm(
        &coeffs.g,
        grid,
        cfg,
        NormOrder::TwoPlusAlpha,
        coeffs.fd_step(grid),
    )?;
    let denominator = f_norm + g_norm;
    if denominator <= 1e-14 {
        if numerator <= 10.0 * sol.report.tolerance {
            return Ok(0.0);
        }
        return Err(Error::Consistency(format!(
            "zero data produced a nonzero solution (norm {numerator:e})"
        )));
    }
    Ok(numerator / denominator)
}

/// Solves both problems and returns the stability pairing
/// `(||u - u_hat||^(2+alpha), ||f - f_hat||^(alpha) + ||g - g_hat||^(2+alpha))`.
/// Both coefficient sets must share the principal part.
pub fn stability_probe(
    coeffs: &LinearCoefficients,
    perturbed: &LinearCoefficients,
    grid: &TriangleGrid,
    cfg: &HolderConfig,
    opts: &SolveOptions,
) -> Result<(f64, f64)> {
    // Closures cannot be compared; sample the principal coefficients instead.
    let mut worst = 0.0f64;
    for i_t in 0..grid.n_time {
        let t = grid.tau(i_t);
        for i_s in 0..=i_t {
            let s = grid.tau(i_s);
            for k in 0..grid.spatial_len() {
                let y = grid.point(k);
                for idx in 0..coeffs.d * coeffs.d {
                    worst = worst
                        .max((coeffs.a[idx].eval(t, s, &y) - perturbed.a[idx].eval(t, s, &y)).abs())
                        .max(
                            (coeffs.a_bar[idx].eval(t, s, &y)
                                - perturbed.a_bar[idx].eval(t, s, &y))
                            .abs(),
                        );
                }
                for idx in 0..coeffs.d {
                    worst = worst
                        .max((coeffs.b[idx].eval(t, s, &y) - perturbed.b[idx].eval(t, s, &y)).abs())
                        .max(
                            (coeffs.b_bar[idx].eval(t, s, &y)
                                - perturbed.b_bar[idx].eval(t, s, &y))
                            .abs(),
                        );
                }
                worst = worst
                    .max((coeffs.c.eval(t, s, &y) - perturbed.c.eval(t, s, &y)).abs())
                    .max((coeffs.c_bar.eval(t, s, &y) - perturbed.c_bar.eval(t, s, &y)).abs());
            }
        }
    }
    if worst > 1e-12 {
        return Err(Error::Argument(format!(
            "stability probe requires identical principal coefficients \
             (max deviation {worst:e})"
        )));
    }

    let sol = solve_linear(coeffs, grid, opts)?;
    let sol_hat = solve_linear(perturbed, grid, opts)?;
    let du = sol.u.sub(&sol_hat.u)?;
    let dv = sol.v.sub(&sol_hat.v)?;
    let lhs = tri_norms(&du, Some(&dv), cfg, NormOrder::TwoPlusAlpha)?.double_bracket;

    let (f_a, f_at) = sample_source_fields(coeffs, grid);
    let (f_b, f_bt) = sample_source_fields(perturbed, grid);
    let df = f_a.sub(&f_b)?;
    let dft = f_at.sub(&f_bt)?;
    let f_norm = tri_norms(&df, Some(&dft), cfg, NormOrder::Alpha)?.double_bracket;

    let h_t = coeffs.fd_step(grid);
    let g_a = coeffs.g.clone();
    let g_b = perturbed.g.clone();
    let g_diff = SurfaceCoef {
        value: {
            let (ga, gb) = (g_a.clone(), g_b.clone());
            Arc::new(move |t, y| ga.eval(t, y) - gb.eval(t, y))
        },
        dt: Some(Arc::new(move |t, y| {
            g_a.eval_dt(t, y, h_t) - g_b.eval_dt(t, y, h_t)
        })),
    };
    let g_norm = surface_double_norm(&g_diff, grid, cfg, NormOrder::TwoPlusAlpha, h_t)?;
    Ok((lhs, f_norm + g_norm))
}
