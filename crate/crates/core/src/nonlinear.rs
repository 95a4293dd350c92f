//! Fully nonlinear solver via anchored linearization.
//!
//! For `u_s = F(t, s, y, u, u_y, u_yy, u|diag, u_y|diag, u_yy|diag)` the
//! first derivatives of `F`, frozen at the initial-data anchor, define a
//! diagonal-coupled linear operator. Each fixed-point application solves
//!
//! ```text
//! U_s = L U + F(.., u, ..) - L u,    U(t, start, y) = initial row,
//! ```
//!
//! through the linear module, and Picard iteration drives `u` to the
//! solution. Windows are halved adaptively exactly as in the linear solver;
//! on every window after the first, the anchor is re-evaluated at the
//! running solution's initial row.

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{gradient_row, hessian_row, restrict_diagonal, TriField, TriangleGrid};
use crate::linear::{
    solve_on_window, Coef, LinearCoefficients, LinearSolution, SolveOptions, SolverReport,
    SurfaceCoef,
};
use crate::manufacture::{axis_names, canonicalize};
use crate::norms::{
    holder_norm_alpha, slice_derivatives, tri_norms, HolderConfig, NormOrder, SliceField,
};
use crate::stepper::{advance_slice_step, OperatorSlice};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

/// Argument pack of `F(t, s, y, u, p, q, l, m, n)`: `p`, `m` are gradients,
/// `q`, `n` row-major Hessians, `(l, m, n)` the diagonal triple.
#[derive(Debug, Clone, Copy)]
pub struct FArgs<'a> {
    pub t: f64,
    pub s: f64,
    pub y: &'a [f64],
    pub u: f64,
    pub p: &'a [f64],
    pub q: &'a [f64],
    pub l: f64,
    pub m: &'a [f64],
    pub n: &'a [f64],
}

pub type FFn = Arc<dyn Fn(&FArgs) -> f64 + Send + Sync>;

/// A fully nonlinear problem: the evaluator `F`, optional analytic first
/// derivatives (central finite differences with relative step `h_f`
/// otherwise), and initial data `g`.
#[derive(Clone)]
pub struct NonlinearProblem {
    pub d: usize,
    pub f: FFn,
    pub f_u: Option<FFn>,
    pub f_l: Option<FFn>,
    pub f_p: Option<Vec<FFn>>,
    pub f_m: Option<Vec<FFn>>,
    pub f_q: Option<Vec<FFn>>,
    pub f_n: Option<Vec<FFn>>,
    /// Explicit t-derivative of `F`; used by the extension march and the
    /// stochastic-representation checks.
    pub f_t: Option<FFn>,
    pub g: SurfaceCoef,
    pub h_f: f64,
}

impl NonlinearProblem {
    pub fn new(d: usize, f: FFn, g: SurfaceCoef) -> Self {
        NonlinearProblem {
            d,
            f,
            f_u: None,
            f_l: None,
            f_p: None,
            f_m: None,
            f_q: None,
            f_n: None,
            f_t: None,
            g,
            h_f: 1e-5,
        }
    }

    /// Builds evaluator and exact symbolic derivatives from an expression
    /// over `(t, s, y., u, p., q.., l, m., n..)`.
    pub fn from_expr(d: usize, f_expr: &Expr, g_expr: &Expr) -> Result<Self> {
        let f_expr = canonicalize(f_expr);
        let mut slots: Vec<String> = vec!["t".into(), "s".into()];
        slots.extend(axis_names(d));
        slots.push("u".into());
        for i in 1..=d {
            slots.push(format!("p{i}"));
        }
        for i in 1..=d {
            for j in 1..=d {
                slots.push(format!("q{i}{j}"));
            }
        }
        slots.push("l".into());
        for i in 1..=d {
            slots.push(format!("m{i}"));
        }
        for i in 1..=d {
            for j in 1..=d {
                slots.push(format!("n{i}{j}"));
            }
        }
        let slot_refs: Vec<&str> = slots.iter().map(|s| s.as_str()).collect();
        fn pack(args: &FArgs) -> Vec<f64> {
            let d = args.y.len();
            let mut vals = Vec::with_capacity(3 + 2 * (1 + d + d * d));
            vals.push(args.t);
            vals.push(args.s);
            vals.extend_from_slice(args.y);
            vals.push(args.u);
            vals.extend_from_slice(args.p);
            vals.extend_from_slice(args.q);
            vals.push(args.l);
            vals.extend_from_slice(args.m);
            vals.extend_from_slice(args.n);
            vals
        }
        let compile = |e: &Expr| -> Result<FFn> {
            let c = e.compile(&slot_refs)?;
            Ok(Arc::new(move |args: &FArgs| c.eval(&pack(args))))
        };
        let compile_vec = |names: Vec<String>| -> Result<Vec<FFn>> {
            names.iter().map(|n| compile(&f_expr.diff(n))).collect()
        };
        let p_names: Vec<String> = (1..=d).map(|i| format!("p{i}")).collect();
        let m_names: Vec<String> = (1..=d).map(|i| format!("m{i}")).collect();
        let mut q_names = Vec::new();
        let mut n_names = Vec::new();
        for i in 1..=d {
            for j in 1..=d {
                q_names.push(format!("q{i}{j}"));
                n_names.push(format!("n{i}{j}"));
            }
        }
        Ok(NonlinearProblem {
            d,
            f: compile(&f_expr)?,
            f_u: Some(compile(&f_expr.diff("u"))?),
            f_l: Some(compile(&f_expr.diff("l"))?),
            f_p: Some(compile_vec(p_names)?),
            f_m: Some(compile_vec(m_names)?),
            f_q: Some(compile_vec(q_names)?),
            f_n: Some(compile_vec(n_names)?),
            f_t: Some(compile(&f_expr.diff("t"))?),
            g: SurfaceCoef::from_expr(g_expr, d)?,
            h_f: 1e-5,
        })
    }

    #[inline]
    pub fn eval(&self, args: &FArgs) -> f64 {
        (self.f)(args)
    }

    fn fd_step(&self, magnitude: f64) -> f64 {
        self.h_f * (1.0 + magnitude.abs())
    }

    fn fd_scalar(&self, args: &FArgs, slot: Slot) -> f64 {
        let mut p = args.p.to_vec();
        let mut q = args.q.to_vec();
        let mut m = args.m.to_vec();
        let mut n = args.n.to_vec();
        let mut u = args.u;
        let mut l = args.l;
        let mut t = args.t;
        let magnitude = match slot {
            Slot::T => t,
            Slot::U => u,
            Slot::L => l,
            Slot::P(i) => p[i],
            Slot::M(i) => m[i],
            Slot::Q(i) => q[i],
            Slot::N(i) => n[i],
        };
        let h = self.fd_step(magnitude);
        let mut eval_at = |delta: f64| -> f64 {
            match slot {
                Slot::T => t = magnitude + delta,
                Slot::U => u = magnitude + delta,
                Slot::L => l = magnitude + delta,
                Slot::P(i) => p[i] = magnitude + delta,
                Slot::M(i) => m[i] = magnitude + delta,
                Slot::Q(i) => q[i] = magnitude + delta,
                Slot::N(i) => n[i] = magnitude + delta,
            }
            let shifted = FArgs { t, s: args.s, y: args.y, u, p: &p, q: &q, l, m: &m, n: &n };
            (self.f)(&shifted)
        };
        let hi = eval_at(h);
        let lo = eval_at(-h);
        (hi - lo) / (2.0 * h)
    }

    pub fn d_u(&self, args: &FArgs) -> f64 {
        match &self.f_u {
            Some(f) => f(args),
            None => self.fd_scalar(args, Slot::U),
        }
    }

    pub fn d_l(&self, args: &FArgs) -> f64 {
        match &self.f_l {
            Some(f) => f(args),
            None => self.fd_scalar(args, Slot::L),
        }
    }

    pub fn d_p(&self, args: &FArgs, i: usize) -> f64 {
        match &self.f_p {
            Some(f) => f[i](args),
            None => self.fd_scalar(args, Slot::P(i)),
        }
    }

    pub fn d_m(&self, args: &FArgs, i: usize) -> f64 {
        match &self.f_m {
            Some(f) => f[i](args),
            None => self.fd_scalar(args, Slot::M(i)),
        }
    }

    pub fn d_q(&self, args: &FArgs, idx: usize) -> f64 {
        match &self.f_q {
            Some(f) => f[idx](args),
            None => self.fd_scalar(args, Slot::Q(idx)),
        }
    }

    pub fn d_n(&self, args: &FArgs, idx: usize) -> f64 {
        match &self.f_n {
            Some(f) => f[idx](args),
            None => self.fd_scalar(args, Slot::N(idx)),
        }
    }

    pub fn d_t(&self, args: &FArgs) -> f64 {
        match &self.f_t {
            Some(f) => f(args),
            None => self.fd_scalar(args, Slot::T),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    T,
    U,
    L,
    P(usize),
    Q(usize),
    M(usize),
    N(usize),
}

/// First derivatives of `F` tabulated at the anchor points
/// `(t, start, y, R(t,y), R_y, R_yy, C(y), C_y, C_yy)` where `R` is the
/// anchor row and `C` its corner value; constant in `s` by construction.
pub struct AnchorLinearization {
    pub grid: TriangleGrid,
    /// Node index of the anchor row (window start).
    pub start: usize,
    /// Tables indexed `i_t * n_y + k`, valid for `i_t >= start`.
    pub a: Vec<Vec<f64>>,
    pub a_bar: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub b_bar: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub c_bar: Vec<f64>,
    /// Anchor argument record per node: `(u, p, q, l, m, n)` flattened.
    pub anchor_args: Vec<f64>,
}

fn table_len(grid: &TriangleGrid) -> usize {
    grid.n_time * grid.spatial_len()
}

/// Evaluates the six derivative families of `F` at the anchor generated by
/// the rows `rows[i_t]` (the values of `u(t_i, start, .)`).
fn anchor_linearization_at(
    prob: &NonlinearProblem,
    grid: &TriangleGrid,
    rows: &[Vec<f64>],
    start: usize,
) -> Result<AnchorLinearization> {
    let d = prob.d;
    let n = grid.spatial_len();
    let s_anchor = grid.tau(start);
    let corner = &rows[start];
    let corner_grad = gradient_row(corner, grid);
    let corner_hess = hessian_row(corner, grid);

    let stride = 2 * (1 + d + d * d);
    let mut out = AnchorLinearization {
        grid: *grid,
        start,
        a: vec![vec![0.0; table_len(grid)]; d * d],
        a_bar: vec![vec![0.0; table_len(grid)]; d * d],
        b: vec![vec![0.0; table_len(grid)]; d],
        b_bar: vec![vec![0.0; table_len(grid)]; d],
        c: vec![0.0; table_len(grid)],
        c_bar: vec![0.0; table_len(grid)],
        anchor_args: vec![0.0; table_len(grid) * stride],
    };

    for i_t in start..grid.n_time {
        let t = grid.tau(i_t);
        let row = &rows[i_t];
        let grad = gradient_row(row, grid);
        let hess = hessian_row(row, grid);
        for k in 0..n {
            let y = grid.point(k);
            let p: Vec<f64> = (0..d).map(|i| grad[i][k]).collect();
            let q: Vec<f64> = (0..d * d).map(|i| hess[i][k]).collect();
            let m: Vec<f64> = (0..d).map(|i| corner_grad[i][k]).collect();
            let nn: Vec<f64> = (0..d * d).map(|i| corner_hess[i][k]).collect();
            let args = FArgs {
                t,
                s: s_anchor,
                y: &y,
                u: row[k],
                p: &p,
                q: &q,
                l: corner[k],
                m: &m,
                n: &nn,
            };
            let at = i_t * n + k;
            for idx in 0..d * d {
                out.a[idx][at] = prob.d_q(&args, idx);
                out.a_bar[idx][at] = prob.d_n(&args, idx);
            }
            for idx in 0..d {
                out.b[idx][at] = prob.d_p(&args, idx);
                out.b_bar[idx][at] = prob.d_m(&args, idx);
            }
            out.c[at] = prob.d_u(&args);
            out.c_bar[at] = prob.d_l(&args);

            let rec = &mut out.anchor_args[at * stride..(at + 1) * stride];
            rec[0] = args.u;
            rec[1..1 + d].copy_from_slice(&p);
            rec[1 + d..1 + d + d * d].copy_from_slice(&q);
            rec[1 + d + d * d] = args.l;
            rec[2 + d + d * d..2 + 2 * d + d * d].copy_from_slice(&m);
            rec[2 + 2 * d + d * d..].copy_from_slice(&nn);

            let min_eig = |vals: &dyn Fn(usize) -> f64| -> f64 {
                match d {
                    1 => vals(0),
                    _ => {
                        let tr = vals(0) + vals(3);
                        let off = 0.5 * (vals(1) + vals(2));
                        let det = vals(0) * vals(3) - off * off;
                        0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt())
                    }
                }
            };
            let eig_a = min_eig(&|idx| out.a[idx][at]);
            let eig_sum = min_eig(&|idx| out.a[idx][at] + out.a_bar[idx][at]);
            if eig_a <= 0.0 || eig_sum <= 0.0 {
                return Err(Error::Model(format!(
                    "ellipticity fails at anchor node t={t:.6}, y={y:?}: \
                     dF/dq eigenvalue {eig_a:e}, dF/dq + dF/dn eigenvalue {eig_sum:e}"
                )));
            }
        }
    }
    Ok(out)
}

/// Anchor linearization at the initial data `g` (the whole-domain anchor).
pub fn anchor_linearization(
    prob: &NonlinearProblem,
    grid: &TriangleGrid,
) -> Result<AnchorLinearization> {
    let n = grid.spatial_len();
    let rows: Vec<Vec<f64>> = (0..grid.n_time)
        .map(|i_t| {
            let t = grid.tau(i_t);
            (0..n).map(|k| prob.g.eval(t, &grid.point(k))).collect()
        })
        .collect();
    anchor_linearization_at(prob, grid, &rows, 0)
}

/// t-derivative of a window-triangle table treating the window's top slice
/// as a one-sided edge.
fn window_t_derivative(table: &TriField, lo: usize, hi: usize) -> TriField {
    let g = table.grid;
    let dt = g.dt();
    let mut out = TriField::zeros(g);
    for i_t in lo..=hi {
        for j in lo..=i_t {
            for k in 0..g.spatial_len() {
                let v = if i_t > j && i_t < hi {
                    (table.get(i_t + 1, j, k) - table.get(i_t - 1, j, k)) / (2.0 * dt)
                } else if i_t == j {
                    if i_t + 2 <= hi {
                        (-3.0 * table.get(i_t, j, k) + 4.0 * table.get(i_t + 1, j, k)
                            - table.get(i_t + 2, j, k))
                            / (2.0 * dt)
                    } else if i_t + 1 <= hi {
                        (table.get(i_t + 1, j, k) - table.get(i_t, j, k)) / dt
                    } else {
                        0.0
                    }
                } else if i_t >= j + 2 {
                    // Top edge i_t == hi.
                    (3.0 * table.get(i_t, j, k) - 4.0 * table.get(i_t - 1, j, k)
                        + table.get(i_t - 2, j, k))
                        / (2.0 * dt)
                } else {
                    (table.get(i_t, j, k) - table.get(i_t - 1, j, k)) / dt
                };
                out.set(i_t, j, k, v);
            }
        }
    }
    out
}

fn flat_of(grid: &TriangleGrid, y: &[f64]) -> usize {
    let dy = grid.dy();
    let n = grid.n_space as isize;
    let wrap = |v: f64| -> usize {
        let i = (v / dy).round() as isize;
        (((i % n) + n) % n) as usize
    };
    match grid.d {
        1 => wrap(y[0]),
        _ => wrap(y[0]) + grid.n_space * wrap(y[1]),
    }
}

/// Coefficient sampler over a `(t, y)` table, constant in `s`, with the
/// t-derivative tabulated by finite differences over `[lo, hi]`.
fn ty_table_coef(grid: &TriangleGrid, table: Arc<Vec<f64>>, lo: usize, hi: usize) -> Coef {
    let n = grid.spatial_len();
    let dt = grid.dt();
    let mut dt_table = vec![0.0; table.len()];
    for i_t in lo..=hi {
        for k in 0..n {
            dt_table[i_t * n + k] = if i_t > lo && i_t < hi {
                (table[(i_t + 1) * n + k] - table[(i_t - 1) * n + k]) / (2.0 * dt)
            } else if i_t == lo && i_t + 2 <= hi {
                (-3.0 * table[i_t * n + k] + 4.0 * table[(i_t + 1) * n + k]
                    - table[(i_t + 2) * n + k])
                    / (2.0 * dt)
            } else if i_t == lo && i_t + 1 <= hi {
                (table[(i_t + 1) * n + k] - table[i_t * n + k]) / dt
            } else if i_t == hi && i_t >= lo + 2 {
                (3.0 * table[i_t * n + k] - 4.0 * table[(i_t - 1) * n + k]
                    + table[(i_t - 2) * n + k])
                    / (2.0 * dt)
            } else if i_t == hi && i_t >= lo + 1 {
                (table[i_t * n + k] - table[(i_t - 1) * n + k]) / dt
            } else {
                0.0
            };
        }
    }
    let dt_table = Arc::new(dt_table);
    let g1 = *grid;
    let val = table.clone();
    let value = Arc::new(move |t: f64, _s: f64, y: &[f64]| {
        let i_t = (t / g1.dt()).round() as usize;
        val[i_t * g1.spatial_len() + flat_of(&g1, y)]
    });
    let g2 = *grid;
    let deriv = Arc::new(move |t: f64, _s: f64, y: &[f64]| {
        let i_t = (t / g2.dt()).round() as usize;
        dt_table[i_t * g2.spatial_len() + flat_of(&g2, y)]
    });
    Coef::with_dt(value, deriv)
}

impl AnchorLinearization {
    /// Linear coefficients of the frozen operator with the given source
    /// tables, for a solve on the window `[lo, hi]`.
    pub fn to_linear_coefficients(
        &self,
        source: Arc<TriField>,
        source_t: Arc<TriField>,
        g: SurfaceCoef,
        lo: usize,
        hi: usize,
    ) -> LinearCoefficients {
        let grid = self.grid;
        let wrap_vec = |tables: &[Vec<f64>]| -> Vec<Coef> {
            tables
                .iter()
                .map(|t| ty_table_coef(&grid, Arc::new(t.clone()), lo, hi))
                .collect()
        };
        LinearCoefficients {
            d: grid.d,
            a: wrap_vec(&self.a),
            a_bar: wrap_vec(&self.a_bar),
            b: wrap_vec(&self.b),
            b_bar: wrap_vec(&self.b_bar),
            c: ty_table_coef(&grid, Arc::new(self.c.clone()), lo, hi),
            c_bar: ty_table_coef(&grid, Arc::new(self.c_bar.clone()), lo, hi),
            f: Coef::from_tables(source, source_t),
            g,
            h_t: None,
        }
    }
}

/// `F` evaluated at the discrete state of `u` for one row `(i_t, j)`.
fn eval_f_row(
    prob: &NonlinearProblem,
    grid: &TriangleGrid,
    u: &TriField,
    i_t: usize,
    j: usize,
    diag_row: &[f64],
    diag_grad: &[Vec<f64>],
    diag_hess: &[Vec<f64>],
) -> Vec<f64> {
    let d = prob.d;
    let n = grid.spatial_len();
    let t = grid.tau(i_t);
    let s = grid.tau(j);
    let row = u.row(i_t, j);
    let grad = gradient_row(row, grid);
    let hess = hessian_row(row, grid);
    let mut out = vec![0.0; n];
    for k in 0..n {
        let y = grid.point(k);
        let p: Vec<f64> = (0..d).map(|i| grad[i][k]).collect();
        let q: Vec<f64> = (0..d * d).map(|i| hess[i][k]).collect();
        let m: Vec<f64> = (0..d).map(|i| diag_grad[i][k]).collect();
        let nn: Vec<f64> = (0..d * d).map(|i| diag_hess[i][k]).collect();
        let args =
            FArgs { t, s, y: &y, u: row[k], p: &p, q: &q, l: diag_row[k], m: &m, n: &nn };
        out[k] = prob.eval(&args);
    }
    out
}

/// The frozen operator `L` applied to the discrete state of `u` at one row.
fn apply_anchor_operator_row(
    anchors: &AnchorLinearization,
    grid: &TriangleGrid,
    u: &TriField,
    i_t: usize,
    j: usize,
    diag_row: &[f64],
    diag_grad: &[Vec<f64>],
    diag_hess: &[Vec<f64>],
) -> Vec<f64> {
    let d = grid.d;
    let n = grid.spatial_len();
    let row = u.row(i_t, j);
    let grad = gradient_row(row, grid);
    let hess = hessian_row(row, grid);
    let mut out = vec![0.0; n];
    for k in 0..n {
        let at = i_t * n + k;
        let mut acc = 0.0;
        for idx in 0..d * d {
            acc += anchors.a[idx][at] * hess[idx][k];
            acc += anchors.a_bar[idx][at] * diag_hess[idx][k];
        }
        for idx in 0..d {
            acc += anchors.b[idx][at] * grad[idx][k];
            acc += anchors.b_bar[idx][at] * diag_grad[idx][k];
        }
        acc += anchors.c[at] * row[k];
        acc += anchors.c_bar[at] * diag_row[k];
        out[k] = acc;
    }
    out
}

/// Source `F(.., u_in, ..) - L u_in` tabulated on the window triangle.
fn assemble_lambda_source(
    prob: &NonlinearProblem,
    anchors: &AnchorLinearization,
    grid: &TriangleGrid,
    u_in: &TriField,
    lo: usize,
    hi: usize,
) -> TriField {
    let mut source = TriField::zeros(*grid);
    let diag = restrict_diagonal(u_in);
    for j in lo..=hi {
        let diag_row = diag.row(j).to_vec();
        let diag_grad = gradient_row(&diag_row, grid);
        let diag_hess = hessian_row(&diag_row, grid);
        for i_t in j..=hi {
            let f_row = eval_f_row(prob, grid, u_in, i_t, j, &diag_row, &diag_grad, &diag_hess);
            let l_row = apply_anchor_operator_row(
                anchors, grid, u_in, i_t, j, &diag_row, &diag_grad, &diag_hess,
            );
            let vals: Vec<f64> = f_row.iter().zip(&l_row).map(|(f, l)| f - l).collect();
            source.set_row(i_t, j, &vals);
        }
    }
    source
}

/// One application of the linearized fixed-point map on a window: assembles
/// the residual source at `u_in` and solves the frozen-coefficient
/// diagonal-coupled linear problem. Initial rows at `s = start` are taken
/// from `(u_init, v_init)`.
pub fn lambda_map(
    u_in: &TriField,
    prob: &NonlinearProblem,
    anchors: &AnchorLinearization,
    grid: &TriangleGrid,
    window: (usize, usize),
    initial_data: (&TriField, &TriField),
    opts: &SolveOptions,
) -> Result<(TriField, TriField)> {
    let (lo, hi) = window;
    let source = assemble_lambda_source(prob, anchors, grid, u_in, lo, hi);
    let source_t = window_t_derivative(&source, lo, hi);
    let lin = anchors.to_linear_coefficients(
        Arc::new(source),
        Arc::new(source_t),
        prob.g.clone(),
        lo,
        hi,
    );
    let mut u = initial_data.0.clone();
    let mut v = initial_data.1.clone();
    let mut inner_opts = opts.clone();
    inner_opts.max_window = None;
    solve_on_window(&mut u, &mut v, &lin, grid, &inner_opts, lo, hi)?;
    Ok((u, v))
}

/// `sup_t (|du slice| + |dv slice|)` at order 2+alpha on a window: the
/// double-bracket increment used as the outer convergence monitor.
fn window_increment_pair(
    du: &TriField,
    dv: &TriField,
    cfg: &HolderConfig,
    lo: usize,
    hi: usize,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for i_t in lo..=hi {
        let su = SliceField::from_tri_slice(du, i_t, lo);
        let du_derivs = slice_derivatives(&su);
        let nu = holder_norm_alpha(&su, cfg, NormOrder::TwoPlusAlpha, Some(&du_derivs))?.c_2alpha;
        let sv = SliceField::from_tri_slice(dv, i_t, lo);
        let dv_derivs = slice_derivatives(&sv);
        let nv = holder_norm_alpha(&sv, cfg, NormOrder::TwoPlusAlpha, Some(&dv_derivs))?.c_2alpha;
        worst = worst.max(nu + nv);
    }
    Ok(worst)
}

/// Nonlinear extension of rows `s in [lo, hi]` to slices `t > hi`: the
/// diagonal is known up to `s = hi`, so each slice is a local quasilinear
/// march. The implicit part freezes the derivative coefficients at the
/// running state; the remainder enters the source (predictor-corrector).
fn extend_nonlinear(
    u: &mut TriField,
    v: &mut TriField,
    prob: &NonlinearProblem,
    grid: &TriangleGrid,
    lo: usize,
    hi: usize,
    t_end: usize,
    theta: f64,
) -> Result<()> {
    let d = prob.d;
    let n = grid.spatial_len();
    let dt = grid.dt();
    let diag = restrict_diagonal(u);
    let mut diag_rows = Vec::new();
    for j in lo..=hi {
        let row = diag.row(j).to_vec();
        let grad = gradient_row(&row, grid);
        let hess = hessian_row(&row, grid);
        diag_rows.push((row, grad, hess));
    }

    let operator_at = |i_t: usize, j: usize, state: &[f64]| -> OperatorSlice {
        let t = grid.tau(i_t);
        let s = grid.tau(j);
        let (diag_row, diag_grad, diag_hess) = &diag_rows[j - lo];
        let grad = gradient_row(state, grid);
        let hess = hessian_row(state, grid);
        let mut op = OperatorSlice::zeros(d, n);
        for k in 0..n {
            let y = grid.point(k);
            let p: Vec<f64> = (0..d).map(|i| grad[i][k]).collect();
            let q: Vec<f64> = (0..d * d).map(|i| hess[i][k]).collect();
            let m: Vec<f64> = (0..d).map(|i| diag_grad[i][k]).collect();
            let nn: Vec<f64> = (0..d * d).map(|i| diag_hess[i][k]).collect();
            let args = FArgs {
                t,
                s,
                y: &y,
                u: state[k],
                p: &p,
                q: &q,
                l: diag_row[k],
                m: &m,
                n: &nn,
            };
            let f_val = prob.eval(&args);
            let mut l_val = 0.0;
            for idx in 0..d * d {
                let aq = prob.d_q(&args, idx);
                op.a[k * d * d + idx] = aq;
                l_val += aq * q[idx];
            }
            for idx in 0..d {
                let bp = prob.d_p(&args, idx);
                op.b[k * d + idx] = bp;
                l_val += bp * p[idx];
            }
            let cu = prob.d_u(&args);
            op.c[k] = cu;
            l_val += cu * state[k];
            op.source[k] = f_val - l_val;
        }
        op
    };

    for i_t in hi + 1..=t_end {
        // u rows by predictor-corrector on the nonlinear remainder.
        let mut u_rows: Vec<Vec<f64>> = vec![u.row(i_t, lo).to_vec()];
        for j in lo..hi {
            let op_lo = operator_at(i_t, j, &u_rows[j - lo]);
            let u_star = advance_slice_step(&u_rows[j - lo], &op_lo, grid, dt, theta)?;
            let op_hi = operator_at(i_t, j + 1, &u_star);
            let op = OperatorSlice::blend(&op_lo, &op_hi, theta);
            u_rows.push(advance_slice_step(&u_rows[j - lo], &op, grid, dt, theta)?);
        }
        for (r, j) in (lo..=hi).enumerate() {
            u.set_row(i_t, j, &u_rows[r]);
        }

        // v rows: v_s = F_q : v_yy + F_p . v_y + F_u v + F_t at the fresh u;
        // the diagonal terms of the original equation do not depend on t, so
        // they drop out of the differentiated equation here.
        let t = grid.tau(i_t);
        let mut ops_v = Vec::with_capacity(hi - lo + 1);
        for j in lo..=hi {
            let s = grid.tau(j);
            let (diag_row, diag_grad, diag_hess) = &diag_rows[j - lo];
            let state = u.row(i_t, j);
            let grad = gradient_row(state, grid);
            let hess = hessian_row(state, grid);
            let mut op = OperatorSlice::zeros(d, n);
            for k in 0..n {
                let y = grid.point(k);
                let p: Vec<f64> = (0..d).map(|i| grad[i][k]).collect();
                let q: Vec<f64> = (0..d * d).map(|i| hess[i][k]).collect();
                let m: Vec<f64> = (0..d).map(|i| diag_grad[i][k]).collect();
                let nn: Vec<f64> = (0..d * d).map(|i| diag_hess[i][k]).collect();
                let args = FArgs {
                    t,
                    s,
                    y: &y,
                    u: state[k],
                    p: &p,
                    q: &q,
                    l: diag_row[k],
                    m: &m,
                    n: &nn,
                };
                for idx in 0..d * d {
                    op.a[k * d * d + idx] = prob.d_q(&args, idx);
                }
                for idx in 0..d {
                    op.b[k * d + idx] = prob.d_p(&args, idx);
                }
                op.c[k] = prob.d_u(&args);
                op.source[k] = prob.d_t(&args);
            }
            ops_v.push(op);
        }
        let mut v_rows: Vec<Vec<f64>> = vec![v.row(i_t, lo).to_vec()];
        for r in 0..hi - lo {
            let op = OperatorSlice::blend(&ops_v[r], &ops_v[r + 1], theta);
            v_rows.push(advance_slice_step(&v_rows[r], &op, grid, dt, theta)?);
        }
        for (r, j) in (lo..=hi).enumerate() {
            v.set_row(i_t, j, &v_rows[r]);
        }
    }
    Ok(())
}

/// Solves the fully nonlinear equation by Picard iteration on the
/// linearized map, with adaptive window halving and per-window re-anchoring
/// at the running solution.
pub fn solve_nonlinear(
    prob: &NonlinearProblem,
    grid: &TriangleGrid,
    opts: &SolveOptions,
) -> Result<LinearSolution> {
    let clock = Instant::now();
    if prob.d != grid.d {
        return Err(Error::Argument("problem dimension does not match grid".into()));
    }
    let n = grid.spatial_len();
    let h_t = grid.dt();

    let mut u = TriField::zeros(*grid);
    let mut v = TriField::zeros(*grid);
    for i_t in 0..grid.n_time {
        let t = grid.tau(i_t);
        let g_row: Vec<f64> = (0..n).map(|k| prob.g.eval(t, &grid.point(k))).collect();
        let gt_row: Vec<f64> =
            (0..n).map(|k| prob.g.eval_dt(t, &grid.point(k), h_t)).collect();
        u.set_row(i_t, 0, &g_row);
        v.set_row(i_t, 0, &gt_row);
    }

    let mut monitor_cfg = opts.norms;
    monitor_cfg.pair_budget = opts.monitor_budget;

    let mut subintervals = Vec::new();
    let mut window_factors: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0usize;
    let mut final_increment = 0.0f64;
    let mut ellipticity = (f64::INFINITY, f64::INFINITY);

    let target = grid.n_time - 1;
    let mut lo = 0usize;
    while lo < target {
        let mut hi = match opts.max_window {
            Some(w) => (lo + w.max(1)).min(target),
            None => target,
        };
        'window: loop {
            // Re-anchor at the running initial row of this window.
            let rows: Vec<Vec<f64>> = (0..grid.n_time)
                .map(|i_t| {
                    if i_t >= lo {
                        u.row(i_t, lo).to_vec()
                    } else {
                        vec![0.0; n]
                    }
                })
                .collect();
            let anchors = anchor_linearization_at(prob, grid, &rows, lo)?;
            let mut min_a = f64::INFINITY;
            let mut min_sum = f64::INFINITY;
            for i_t in lo..=hi {
                for k in 0..n {
                    let at = i_t * n + k;
                    min_a = min_a.min(anchors.a[0][at]);
                    min_sum = min_sum.min(anchors.a[0][at] + anchors.a_bar[0][at]);
                }
            }
            ellipticity = (ellipticity.0.min(min_a), ellipticity.1.min(min_sum));

            // Seed: current fields extended constantly in s from row `lo`.
            let mut u_cur = u.clone();
            let mut v_cur = v.clone();
            for i_t in lo..=hi {
                let ur = u.row(i_t, lo).to_vec();
                let vr = v.row(i_t, lo).to_vec();
                for j in lo..=i_t {
                    u_cur.set_row(i_t, j, &ur);
                    v_cur.set_row(i_t, j, &vr);
                }
            }

            let mut factors = Vec::new();
            let mut prev_inc: Option<f64> = None;
            let mut converged = false;
            for _ in 0..opts.max_iter {
                iterations += 1;
                let (u_next, v_next) =
                    match lambda_map(&u_cur, prob, &anchors, grid, (lo, hi), (&u, &v), opts) {
                        Ok(pair) => pair,
                        Err(Error::NonConvergence(_)) if hi - lo > 1 => {
                            // The inner linear solve stalled: shrink.
                            hi = lo + ((hi - lo) / 2).max(1);
                            continue 'window;
                        }
                        Err(e) => return Err(e),
                    };
                let du = u_next.sub(&u_cur)?;
                let dv = v_next.sub(&v_cur)?;
                let inc = window_increment_pair(&du, &dv, &monitor_cfg, lo, hi)?;
                if let Some(p) = prev_inc {
                    if p > 0.0 {
                        factors.push(inc / p);
                    }
                }
                u_cur = u_next;
                v_cur = v_next;
                if inc <= opts.tol {
                    final_increment = inc;
                    converged = true;
                    break;
                }
                let n_f = factors.len();
                if n_f >= 3 && factors[n_f - 3..].iter().all(|f| *f >= opts.contraction_cap) {
                    break;
                }
                prev_inc = Some(inc);
            }
            if converged {
                for i_t in lo..=hi {
                    for j in lo..=i_t {
                        u.set_row(i_t, j, u_cur.row(i_t, j));
                        v.set_row(i_t, j, v_cur.row(i_t, j));
                    }
                }
                subintervals.push((lo, hi));
                window_factors.push(factors);
                break 'window;
            }
            if hi - lo <= 1 {
                return Err(Error::NonConvergence(format!(
                    "nonlinear window [{lo}, {hi}] (minimal) failed; last factors {:?}",
                    &factors[factors.len().saturating_sub(3)..]
                )));
            }
            hi = lo + ((hi - lo) / 2).max(1);
        }
        if hi < target {
            extend_nonlinear(&mut u, &mut v, prob, grid, lo, hi, target, opts.theta)?;
        }
        lo = hi;
    }

    if !u.is_finite() || !v.is_finite() {
        return Err(Error::Numerical("solution contains non-finite values".into()));
    }
    let norm_snapshot = tri_norms(&u, Some(&v), &monitor_cfg, NormOrder::TwoPlusAlpha)?;
    let report = SolverReport {
        iterations,
        contraction_factors: window_factors.iter().flatten().copied().collect(),
        subintervals,
        window_factors,
        final_increment,
        tolerance: opts.tol,
        norm_snapshot,
        ellipticity,
        wall_time: clock.elapsed(),
    };
    Ok(LinearSolution { u, v, report })
}

/// Max over triangle nodes of `|D_s u - F(...)|`: the discrete residual of
/// the nonlinear equation. Central differences along `s` in the interior,
/// second-order one-sided at the row edges when the slice has three rows.
pub fn residual_nonlinear(u: &TriField, prob: &NonlinearProblem) -> f64 {
    let grid = u.grid;
    let d = prob.d;
    let n = grid.spatial_len();
    let dt = grid.dt();
    let diag = restrict_diagonal(u);
    let mut diag_rows = Vec::new();
    for j in 0..grid.n_time {
        let row = diag.row(j).to_vec();
        let grad = gradient_row(&row, &grid);
        let hess = hessian_row(&row, &grid);
        diag_rows.push((row, grad, hess));
    }
    let mut worst = 0.0f64;
    for i_t in 1..grid.n_time {
        let t = grid.tau(i_t);
        for j in 0..=i_t {
            let rows = i_t + 1;
            let d_s: Vec<f64> = (0..n)
                .map(|k| {
                    if j > 0 && j < i_t {
                        (u.get(i_t, j + 1, k) - u.get(i_t, j - 1, k)) / (2.0 * dt)
                    } else if j == 0 {
                        if rows >= 3 {
                            (-3.0 * u.get(i_t, 0, k) + 4.0 * u.get(i_t, 1, k)
                                - u.get(i_t, 2, k))
                                / (2.0 * dt)
                        } else {
                            (u.get(i_t, 1, k) - u.get(i_t, 0, k)) / dt
                        }
                    } else if rows >= 3 {
                        (3.0 * u.get(i_t, j, k) - 4.0 * u.get(i_t, j - 1, k)
                            + u.get(i_t, j - 2, k))
                            / (2.0 * dt)
                    } else {
                        (u.get(i_t, j, k) - u.get(i_t, j - 1, k)) / dt
                    }
                })
                .collect();
            let s = grid.tau(j);
            let (diag_row, diag_grad, diag_hess) = &diag_rows[j];
            let state = u.row(i_t, j);
            let grad = gradient_row(state, &grid);
            let hess = hessian_row(state, &grid);
            for k in 0..n {
                let y = grid.point(k);
                let p: Vec<f64> = (0..d).map(|i| grad[i][k]).collect();
                let q: Vec<f64> = (0..d * d).map(|i| hess[i][k]).collect();
                let m: Vec<f64> = (0..d).map(|i| diag_grad[i][k]).collect();
                let nn: Vec<f64> = (0..d * d).map(|i| diag_hess[i][k]).collect();
                let args = FArgs {
                    t,
                    s,
                    y: &y,
                    u: state[k],
                    p: &p,
                    q: &q,
                    l: diag_row[k],
                    m: &m,
                    n: &nn,
                };
                worst = worst.max((d_s[k] - prob.eval(&args)).abs());
            }
        }
    }
    worst
}

/// Diagnostic regularity report: sampled Lipschitz estimates of `F` and its
/// first derivatives, growth flags, and sampled ellipticity.
#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    /// Per argument block: sampled Lipschitz constant of `F`.
    pub lipschitz: BTreeMap<String, f64>,
    /// Per derivative family: sampled Lipschitz constant over full pairs.
    pub derivative_lipschitz: BTreeMap<String, f64>,
    pub ellipticity_ok: bool,
    pub growth_flags: Vec<String>,
    pub samples: usize,
}

type SampledArgs = (f64, f64, Vec<f64>, f64, Vec<f64>, Vec<f64>, f64, Vec<f64>, Vec<f64>);

/// Monte Carlo regularity probe over `samples` random argument pairs.
pub fn check_regularity(
    prob: &NonlinearProblem,
    grid: &TriangleGrid,
    samples: usize,
    seed: u64,
) -> RegularityReport {
    let d = prob.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = grid.horizon;
    let blocks = ["t", "u", "p", "q", "l", "m", "n"];

    let sample_args = |rng: &mut ChaCha8Rng, radius: f64| -> SampledArgs {
        let s: f64 = rng.gen_range(0.0..horizon);
        let t: f64 = rng.gen_range(s..=horizon);
        let y: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..grid.period)).collect();
        let u: f64 = rng.gen_range(-radius..radius);
        let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-radius..radius)).collect();
        let q: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-radius..radius)).collect();
        let l: f64 = rng.gen_range(-radius..radius);
        let m: Vec<f64> = (0..d).map(|_| rng.gen_range(-radius..radius)).collect();
        let n: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-radius..radius)).collect();
        (t, s, y, u, p, q, l, m, n)
    };

    let mut lip_at_radius = |radius: f64, rng: &mut ChaCha8Rng| -> BTreeMap<String, f64> {
        let mut lip: BTreeMap<String, f64> =
            blocks.iter().map(|b| (b.to_string(), 0.0)).collect();
        for _ in 0..samples {
            let (t, s, y, u, p, q, l, m, n) = sample_args(rng, radius);
            let base = FArgs { t, s, y: &y, u, p: &p, q: &q, l, m: &m, n: &n };
            let f0 = prob.eval(&base);
            for block in blocks {
                let delta: f64 = rng.gen_range(0.01..radius);
                let mut t2 = t;
                let mut u2 = u;
                let mut l2 = l;
                let mut p2 = p.clone();
                let mut q2 = q.clone();
                let mut m2 = m.clone();
                let mut n2 = n.clone();
                match block {
                    "t" => t2 = (t + delta).min(horizon),
                    "u" => u2 += delta,
                    "l" => l2 += delta,
                    "p" => p2[0] += delta,
                    "q" => q2[0] += delta,
                    "m" => m2[0] += delta,
                    "n" => n2[0] += delta,
                    _ => unreachable!(),
                }
                let moved = (match block {
                    "t" => t2 - t,
                    _ => delta,
                })
                .abs();
                if moved == 0.0 {
                    continue;
                }
                let shifted =
                    FArgs { t: t2, s, y: &y, u: u2, p: &p2, q: &q2, l: l2, m: &m2, n: &n2 };
                let quotient = (prob.eval(&shifted) - f0).abs() / moved;
                let entry = lip.get_mut(block).unwrap();
                if quotient > *entry {
                    *entry = quotient;
                }
            }
        }
        lip
    };

    let lip_r1 = lip_at_radius(1.0, &mut rng);
    let lip_r4 = lip_at_radius(4.0, &mut rng);

    let mut growth_flags = Vec::new();
    for block in blocks {
        let a = lip_r1[block];
        let b = lip_r4[block];
        if a > 1e-12 && b > 4.0 * a {
            growth_flags.push(format!(
                "Lipschitz estimate in '{block}' grows with radius ({a:.3e} -> {b:.3e})"
            ));
        }
    }

    let mut deriv_lip: BTreeMap<String, f64> = BTreeMap::new();
    for name in ["F_t", "F_u", "F_p", "F_q", "F_l", "F_m", "F_n"] {
        deriv_lip.insert(name.to_string(), 0.0);
    }
    let mut ellipticity_ok = true;
    for _ in 0..samples {
        let (t, s, y, u, p, q, l, m, n) = sample_args(&mut rng, 2.0);
        let (t2, s2, y2, u2, p2, q2, l2, m2, n2) = sample_args(&mut rng, 2.0);
        let a1 = FArgs { t, s, y: &y, u, p: &p, q: &q, l, m: &m, n: &n };
        let a2 = FArgs {
            t: t2,
            s: s2,
            y: &y2,
            u: u2,
            p: &p2,
            q: &q2,
            l: l2,
            m: &m2,
            n: &n2,
        };
        let mut dist = (t - t2).abs() + (u - u2).abs() + (l - l2).abs();
        for i in 0..d {
            dist += (p[i] - p2[i]).abs() + (m[i] - m2[i]).abs();
        }
        for i in 0..d * d {
            dist += (q[i] - q2[i]).abs() + (n[i] - n2[i]).abs();
        }
        if dist < 1e-9 {
            continue;
        }
        let pairs: [(&str, f64, f64); 7] = [
            ("F_t", prob.d_t(&a1), prob.d_t(&a2)),
            ("F_u", prob.d_u(&a1), prob.d_u(&a2)),
            ("F_p", prob.d_p(&a1, 0), prob.d_p(&a2, 0)),
            ("F_q", prob.d_q(&a1, 0), prob.d_q(&a2, 0)),
            ("F_l", prob.d_l(&a1), prob.d_l(&a2)),
            ("F_m", prob.d_m(&a1, 0), prob.d_m(&a2, 0)),
            ("F_n", prob.d_n(&a1, 0), prob.d_n(&a2, 0)),
        ];
        for (name, v1, v2) in pairs {
            let qt = (v1 - v2).abs() / dist;
            let entry = deriv_lip.get_mut(name).unwrap();
            if qt > *entry {
                *entry = qt;
            }
        }
        let min_eig = |f: &dyn Fn(usize) -> f64| -> f64 {
            match d {
                1 => f(0),
                _ => {
                    let tr = f(0) + f(3);
                    let off = 0.5 * (f(1) + f(2));
                    let det = f(0) * f(3) - off * off;
                    0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt())
                }
            }
        };
        let e1 = min_eig(&|idx| prob.d_q(&a1, idx));
        let e2 = min_eig(&|idx| prob.d_q(&a1, idx) + prob.d_n(&a1, idx));
        if e1 <= 0.0 || e2 <= 0.0 {
            ellipticity_ok = false;
        }
    }

    RegularityReport {
        lipschitz: lip_r1,
        derivative_lipschitz: deriv_lip,
        ellipticity_ok,
        growth_flags,
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::linear::solve_linear;
    use std::f64::consts::PI;

    fn g_sin() -> SurfaceCoef {
        SurfaceCoef::with_dt(
            Arc::new(|_, y: &[f64]| y[0].sin()),
            Arc::new(|_, _: &[f64]| 0.0),
        )
    }

    #[test]
    fn anchor_of_pure_q_is_heat_operator() {
        let grid = build_grid(4, 1, 16, 1.0, 2.0 * PI).unwrap();
        let prob = NonlinearProblem::new(1, Arc::new(|a: &FArgs| a.q[0]), g_sin());
        let anchors = anchor_linearization(&prob, &grid).unwrap();
        for at in 0..grid.n_time * grid.spatial_len() {
            assert!((anchors.a[0][at] - 1.0).abs() < 1e-9);
            assert!(anchors.a_bar[0][at].abs() < 1e-9);
            assert!(anchors.b[0][at].abs() < 1e-9);
            assert!(anchors.b_bar[0][at].abs() < 1e-9);
            assert!(anchors.c[at].abs() < 1e-9);
            assert!(anchors.c_bar[at].abs() < 1e-9);
        }
    }

    #[test]
    fn anchor_of_q_plus_n() {
        let grid = build_grid(4, 1, 16, 1.0, 2.0 * PI).unwrap();
        let prob = NonlinearProblem::new(1, Arc::new(|a: &FArgs| a.q[0] + a.n[0]), g_sin());
        let anchors = anchor_linearization(&prob, &grid).unwrap();
        for at in 0..grid.n_time * grid.spatial_len() {
            assert!((anchors.a[0][at] - 1.0).abs() < 1e-9);
            assert!((anchors.a_bar[0][at] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn anchor_of_trig_nonlinearity_matches_symbolic() {
        // F = q + eps sin(n) with g = sin y: dF/dn at the anchor equals
        // eps cos(g_yy) = eps cos(-sin y) up to the stencil error in g_yy.
        let grid = build_grid(3, 1, 64, 1.0, 2.0 * PI).unwrap();
        let eps = 0.25;
        let prob = NonlinearProblem::new(
            1,
            Arc::new(move |a: &FArgs| a.q[0] + eps * a.n[0].sin()),
            g_sin(),
        );
        let anchors = anchor_linearization(&prob, &grid).unwrap();
        let dy = grid.dy();
        for k in 0..grid.spatial_len() {
            let y = grid.point(k)[0];
            let expect = eps * (-y.sin()).cos();
            let got = anchors.a_bar[0][k];
            assert!(
                (got - expect).abs() < eps * dy * dy + 1e-7,
                "node {k}: {got} vs {expect}"
            );
        }
        // Same anchor from the expression path with exact derivatives.
        let f_expr = Expr::parse("q + 0.25*sin(n)").unwrap();
        let g_expr = Expr::parse("sin(y)").unwrap();
        let prob2 = NonlinearProblem::from_expr(1, &f_expr, &g_expr).unwrap();
        let anchors2 = anchor_linearization(&prob2, &grid).unwrap();
        for at in 0..grid.n_time * grid.spatial_len() {
            assert!((anchors.a_bar[0][at] - anchors2.a_bar[0][at]).abs() < 1e-6);
        }
    }

    #[test]
    fn lambda_map_on_linear_f_converges_immediately() {
        // F = q: the residual source F - L u vanishes identically, so the
        // map is constant and the solve stabilizes after one application.
        let grid = build_grid(6, 1, 24, 0.5, 2.0 * PI).unwrap();
        let prob = NonlinearProblem::new(1, Arc::new(|a: &FArgs| a.q[0]), g_sin());
        let opts = SolveOptions::default();
        let sol = solve_nonlinear(&prob, &grid, &opts).unwrap();
        assert!(sol.report.iterations <= 2, "iterations {}", sol.report.iterations);
        // And it is the heat flow of sin: u = exp(-s) sin y for every t.
        let mut worst = 0.0f64;
        for i_t in 0..grid.n_time {
            for j in 0..=i_t {
                for k in 0..grid.spatial_len() {
                    let exact = (-grid.tau(j)).exp() * grid.point(k)[0].sin();
                    worst = worst.max((sol.u.get(i_t, j, k) - exact).abs());
                }
            }
        }
        let bound = grid.dt() * grid.dt() + grid.dy() * grid.dy();
        assert!(worst <= 5.0 * bound, "heat error {worst} vs bound {bound}");
    }

    #[test]
    fn zero_data_zero_nonlinearity_gives_zero() {
        let grid = build_grid(5, 1, 16, 1.0, 2.0 * PI).unwrap();
        let prob = NonlinearProblem::new(
            1,
            Arc::new(|a: &FArgs| a.q[0] + 0.5 * a.n[0] + a.u * a.l),
            SurfaceCoef::with_dt(Arc::new(|_, _| 0.0), Arc::new(|_, _| 0.0)),
        );
        let sol = solve_nonlinear(&prob, &grid, &SolveOptions::default()).unwrap();
        let zero = TriField::zeros(grid);
        assert_eq!(sol.u.max_abs_diff(&zero), 0.0);
    }

    fn manufactured_nonlinear(eps: f64) -> (Expr, Expr) {
        // u* = exp(t-s)(2 + sin y), F = q + eps n/(1+n^2) + f*(t,s,y).
        let u_star = Expr::parse("exp(t - s)*(2 + sin(y))").unwrap();
        let f_base = Expr::parse(&format!("q + {eps}*n/(1 + n^2)")).unwrap();
        (u_star, f_base)
    }

    fn nonlinear_error(n_time: usize, n_space: usize, eps: f64) -> f64 {
        let grid = build_grid(n_time, 1, n_space, 1.0, 2.0 * PI).unwrap();
        let (u_star, f_base) = manufactured_nonlinear(eps);
        let f_star =
            crate::manufacture::manufacture_source_nonlinear(&u_star, &f_base, 1, &grid)
                .unwrap();
        let full_f = crate::expr::add(f_base, f_star);
        let g_expr = Expr::parse("exp(t)*(2 + sin(y))").unwrap();
        let prob = NonlinearProblem::from_expr(1, &full_f, &g_expr).unwrap();
        let sol = solve_nonlinear(&prob, &grid, &SolveOptions::default()).unwrap();
        let mut worst = 0.0f64;
        for i_t in 0..grid.n_time {
            for j in 0..=i_t {
                for k in 0..grid.spatial_len() {
                    let exact =
                        (grid.tau(i_t) - grid.tau(j)).exp() * (2.0 + grid.point(k)[0].sin());
                    worst = worst.max((sol.u.get(i_t, j, k) - exact).abs());
                }
            }
        }
        worst
    }

    #[test]
    fn manufactured_nonlinear_recovers_solution() {
        let coarse = nonlinear_error(9, 16, 0.1);
        let fine = nonlinear_error(17, 32, 0.1);
        assert!(
            coarse / fine >= 3.0,
            "nonlinear refinement ratio {coarse} -> {fine}"
        );
    }

    #[test]
    fn linear_problem_through_both_paths() {
        // The same manufactured data solved as F = q + 0.2 n and through the
        // linear module with a = 1, abar = 0.2 must agree.
        let grid = build_grid(9, 1, 24, 1.0, 2.0 * PI).unwrap();
        let u_star = Expr::parse("exp(t - s)*(2 + sin(y))").unwrap();
        let f_base = Expr::parse("q + 0.2*n").unwrap();
        let f_star =
            crate::manufacture::manufacture_source_nonlinear(&u_star, &f_base, 1, &grid)
                .unwrap();
        let g_expr = Expr::parse("exp(t)*(2 + sin(y))").unwrap();

        let opts = SolveOptions::default();
        let prob = NonlinearProblem::from_expr(
            1,
            &crate::expr::add(f_base, f_star.clone()),
            &g_expr,
        )
        .unwrap();
        let nonlin = solve_nonlinear(&prob, &grid, &opts).unwrap();

        let exprs = crate::manufacture::LinearExprs::constant(1, 1.0, 0.2, 0.0, 0.0, 0.0, 0.0);
        let lin_coeffs = LinearCoefficients::from_exprs(&exprs, &f_star, &g_expr).unwrap();
        let lin = solve_linear(&lin_coeffs, &grid, &opts).unwrap();

        let diff = nonlin.u.max_abs_diff(&lin.u);
        assert!(diff <= 10.0 * opts.tol, "path difference {diff}");
    }

    #[test]
    fn residual_of_injected_exact_solution() {
        let grid = build_grid(17, 1, 32, 1.0, 2.0 * PI).unwrap();
        let (u_star, f_base) = manufactured_nonlinear(0.1);
        let f_star =
            crate::manufacture::manufacture_source_nonlinear(&u_star, &f_base, 1, &grid)
                .unwrap();
        let full_f = crate::expr::add(f_base, f_star);
        let g_expr = Expr::parse("exp(t)*(2 + sin(y))").unwrap();
        let prob = NonlinearProblem::from_expr(1, &full_f, &g_expr).unwrap();

        let exact = TriField::from_fn(grid, |t, s, y| (t - s).exp() * (2.0 + y[0].sin()));
        let injected = residual_nonlinear(&exact, &prob);
        let scale = grid.dt() * grid.dt() + grid.dy() * grid.dy();
        assert!(injected <= 20.0 * scale, "injected residual {injected}");

        let sol = solve_nonlinear(&prob, &grid, &SolveOptions::default()).unwrap();
        let solved = residual_nonlinear(&sol.u, &prob);
        assert!(
            solved <= 10.0 * injected.max(scale),
            "solved residual {solved} vs injected {injected}"
        );
    }

    #[test]
    fn forced_windows_re_anchor_without_seams() {
        let grid = build_grid(9, 1, 16, 1.0, 2.0 * PI).unwrap();
        let (u_star, f_base) = manufactured_nonlinear(0.1);
        let f_star =
            crate::manufacture::manufacture_source_nonlinear(&u_star, &f_base, 1, &grid)
                .unwrap();
        let full_f = crate::expr::add(f_base, f_star);
        let g_expr = Expr::parse("exp(t)*(2 + sin(y))").unwrap();
        let prob = NonlinearProblem::from_expr(1, &full_f, &g_expr).unwrap();
        let mut opts = SolveOptions::default();
        opts.max_window = Some(3);
        let sol = solve_nonlinear(&prob, &grid, &opts).unwrap();
        assert!(sol.report.subintervals.len() > 1);
        let mut worst = 0.0f64;
        for i_t in 0..grid.n_time {
            for j in 0..=i_t {
                for k in 0..grid.spatial_len() {
                    let exact =
                        (grid.tau(i_t) - grid.tau(j)).exp() * (2.0 + grid.point(k)[0].sin());
                    worst = worst.max((sol.u.get(i_t, j, k) - exact).abs());
                }
            }
        }
        let bound = grid.dt() * grid.dt() + grid.dy() * grid.dy();
        assert!(worst <= 20.0 * bound, "windowed solve error {worst}");
    }

    #[test]
    fn third_difference_stays_bounded_under_refinement() {
        let third_diff = |n_time: usize, n_space: usize| -> f64 {
            let grid = build_grid(n_time, 1, n_space, 1.0, 2.0 * PI).unwrap();
            let (u_star, f_base) = manufactured_nonlinear(0.1);
            let f_star = crate::manufacture::manufacture_source_nonlinear(
                &u_star, &f_base, 1, &grid,
            )
            .unwrap();
            let full_f = crate::expr::add(f_base, f_star);
            let g_expr = Expr::parse("exp(t)*(2 + sin(y))").unwrap();
            let prob = NonlinearProblem::from_expr(1, &full_f, &g_expr).unwrap();
            let sol = solve_nonlinear(&prob, &grid, &SolveOptions::default()).unwrap();
            let dy = grid.dy();
            let mut worst = 0.0f64;
            for i_t in 0..grid.n_time {
                for j in 0..=i_t {
                    let row = sol.u.row(i_t, j);
                    let n = row.len();
                    for k in 0..n {
                        let d3 = (row[(k + 2) % n] - 2.0 * row[(k + 1) % n]
                            + 2.0 * row[(k + n - 1) % n]
                            - row[(k + n - 2) % n])
                            / (2.0 * dy * dy * dy);
                        worst = worst.max(d3.abs());
                    }
                }
            }
            worst
        };
        let coarse = third_diff(7, 16);
        let fine = third_diff(13, 32);
        // u* has |u_yyy| <= e; the discrete probe must stay bounded.
        assert!(
            fine <= 1.5 * coarse.max(3.0),
            "third difference grows: {coarse} -> {fine}"
        );
    }

    #[test]
    fn regularity_of_pure_q() {
        let grid = build_grid(4, 1, 8, 1.0, 2.0 * PI).unwrap();
        let prob = NonlinearProblem::new(1, Arc::new(|a: &FArgs| a.q[0]), g_sin());
        let rep = check_regularity(&prob, &grid, 400, 11);
        assert!((rep.lipschitz["q"] - 1.0).abs() <= 1e-6);
        for block in ["t", "u", "p", "l", "m", "n"] {
            assert!(rep.lipschitz[block].abs() <= 1e-9, "block {block}");
        }
        assert!(rep.ellipticity_ok);
        assert!(rep.growth_flags.is_empty());
    }

    #[test]
    fn regularity_flags_negative_diffusion() {
        let grid = build_grid(4, 1, 8, 1.0, 2.0 * PI).unwrap();
        let prob = NonlinearProblem::new(1, Arc::new(|a: &FArgs| -a.q[0]), g_sin());
        let rep = check_regularity(&prob, &grid, 200, 3);
        assert!(!rep.ellipticity_ok);
    }

    #[test]
    fn regularity_estimates_small_trig_coupling() {
        let grid = build_grid(4, 1, 8, 1.0, 2.0 * PI).unwrap();
        let eps = 0.05;
        let prob = NonlinearProblem::new(
            1,
            Arc::new(move |a: &FArgs| a.q[0] + eps * a.n[0].sin()),
            g_sin(),
        );
        let rep = check_regularity(&prob, &grid, 2000, 5);
        // Oracle: independently sampled difference quotients in n.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut oracle = 0.0f64;
        for _ in 0..2000 {
            let n1: f64 = rng.gen_range(-1.0..1.0);
            let n2: f64 = rng.gen_range(-1.0..1.0);
            if (n1 - n2).abs() < 1e-9 {
                continue;
            }
            oracle = oracle.max(eps * (n1.sin() - n2.sin()).abs() / (n1 - n2).abs());
        }
        let got = rep.lipschitz["n"];
        assert!(
            (got - oracle).abs() <= 0.15 * eps,
            "sampled {got} vs oracle {oracle}"
        );
        assert!(got <= 1.05 * eps && got >= 0.5 * eps);
    }
}
