//! Equilibrium HJB front-end for time-inconsistent control.
//!
//! A control problem whose running and terminal costs depend on the
//! evaluation time `t` breaks Bellman optimality; the subgame-perfect
//! equilibrium is characterized by a diagonal-coupled HJB equation for
//! `u(t, s, y)` whose diagonal yields the equilibrium value
//! `v(s, y) = u(s, s, y)` and the policy
//! `e(s, y) = argmin_a H(s, s, y, a, v_y, v_yy)`.
//!
//! The equation lives backward on `{t <= s <= T}` with terminal data
//! `u(t, T, y) = g(t, y)`; reversing time maps it onto the forward triangle
//! where the nonlinear solver operates, and the diagonal maps to the
//! diagonal.

use crate::error::{Error, Result};
use crate::grid::{diag_derivatives, restrict_diagonal, DiagField, TriField, TriangleGrid};
use crate::linear::{SolveOptions, SolverReport, SurfaceCoef};
use crate::nonlinear::{solve_nonlinear, FArgs, FFn, NonlinearProblem};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

pub type DriftFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>;
pub type VolFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>;
pub type RunningCostFn = Arc<dyn Fn(f64, f64, &[f64], &[f64]) -> f64 + Send + Sync>;
pub type PolicyFn = Arc<dyn Fn(f64, f64, &[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// Admissible control set: a box searched on a grid (with one quadratic
/// refinement pass), or a user-supplied closed-form minimizer.
#[derive(Clone)]
pub enum ControlSet {
    Box { lower: Vec<f64>, upper: Vec<f64>, resolution: usize },
    ClosedForm(PolicyFn),
}

impl ControlSet {
    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Box { lower, .. } => lower.len(),
            ControlSet::ClosedForm(_) => 0,
        }
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        match self {
            ControlSet::Box { lower, upper, .. } => a
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(ai, (lo, hi))| *ai >= *lo - 1e-12 && *ai <= *hi + 1e-12),
            ControlSet::ClosedForm(_) => true,
        }
    }
}

/// A time-inconsistent stochastic control specification.
#[derive(Clone)]
pub struct ControlProblem {
    /// State dimension.
    pub d: usize,
    /// Brownian dimension.
    pub k_noise: usize,
    /// Drift `b(s, y, a)`.
    pub drift: DriftFn,
    /// Volatility `sigma(s, y, a)`, row-major `d x k`.
    pub vol: VolFn,
    /// Running cost `h(t, tau, y, a)`; `t` is the evaluation time.
    pub running_cost: RunningCostFn,
    /// Terminal cost `g(t, y)`.
    pub terminal: SurfaceCoef,
    pub control: ControlSet,
    pub horizon: f64,
}

/// `H(t, s, y, a, p, q) = 1/2 tr(q sigma sigma^T) + p . b + h(t, s, y, a)`.
pub fn hamiltonian(
    cp: &ControlProblem,
    t: f64,
    s: f64,
    y: &[f64],
    a: &[f64],
    p: &[f64],
    q: &[f64],
) -> Result<f64> {
    if !cp.control.contains(a) {
        return Err(Error::Argument(format!(
            "control {a:?} lies outside the admissible set"
        )));
    }
    Ok(hamiltonian_unchecked(cp, t, s, y, a, p, q))
}

fn hamiltonian_unchecked(
    cp: &ControlProblem,
    t: f64,
    s: f64,
    y: &[f64],
    a: &[f64],
    p: &[f64],
    q: &[f64],
) -> f64 {
    let d = cp.d;
    let k = cp.k_noise;
    let sigma = (cp.vol)(s, y, a);
    let b = (cp.drift)(s, y, a);
    let mut trace = 0.0;
    for i in 0..d {
        for j in 0..d {
            let mut ssij = 0.0;
            for kk in 0..k {
                ssij += sigma[i * k + kk] * sigma[j * k + kk];
            }
            trace += q[i * d + j] * ssij;
        }
    }
    let mut drift_term = 0.0;
    for i in 0..d {
        drift_term += p[i] * b[i];
    }
    0.5 * trace + drift_term + (cp.running_cost)(t, s, y, a)
}

/// Result of a pointwise Hamiltonian minimization.
#[derive(Debug, Clone)]
pub struct Argmin {
    pub control: Vec<f64>,
    pub value: f64,
    /// True when the grid search selected a box boundary point.
    pub at_boundary: bool,
}

/// Minimizes `a -> H(t, s, y, a, p, q)`: the user closed form when present,
/// else a grid search over the box refined once per axis by a local
/// quadratic fit. Ties break to the lexicographically smallest control.
pub fn argmin_control(
    cp: &ControlProblem,
    t: f64,
    s: f64,
    y: &[f64],
    p: &[f64],
    q: &[f64],
) -> Result<Argmin> {
    match &cp.control {
        ControlSet::ClosedForm(phi) => {
            let a = phi(t, s, y, p, q);
            let value = hamiltonian_unchecked(cp, t, s, y, &a, p, q);
            if !value.is_finite() {
                return Err(Error::Model(format!(
                    "closed-form control gives a non-finite Hamiltonian at t={t}, s={s}"
                )));
            }
            Ok(Argmin { control: a, value, at_boundary: false })
        }
        ControlSet::Box { lower, upper, resolution } => {
            let m = lower.len();
            let res = (*resolution).max(2);
            let coord = |axis: usize, idx: usize| -> f64 {
                lower[axis] + (upper[axis] - lower[axis]) * idx as f64 / (res - 1) as f64
            };
            // Lexicographic odometer scan; strict `<` keeps the first (and
            // therefore smallest) minimizer on ties.
            let mut best_idx = vec![0usize; m];
            let mut best_val = f64::INFINITY;
            let mut idx = vec![0usize; m];
            let mut a = vec![0.0; m];
            let mut any_finite = false;
            'scan: loop {
                for ax in 0..m {
                    a[ax] = coord(ax, idx[ax]);
                }
                let val = hamiltonian_unchecked(cp, t, s, y, &a, p, q);
                if val.is_finite() {
                    any_finite = true;
                    if val < best_val {
                        best_val = val;
                        best_idx.copy_from_slice(&idx);
                    }
                }
                // Advance with the last axis fastest.
                let mut ax = m;
                loop {
                    if ax == 0 {
                        break 'scan;
                    }
                    ax -= 1;
                    idx[ax] += 1;
                    if idx[ax] < res {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
            if !any_finite {
                return Err(Error::Model(format!(
                    "Hamiltonian is non-finite over the whole control grid at t={t}, s={s}"
                )));
            }

            let at_boundary = best_idx.iter().any(|i| *i == 0 || *i == res - 1);
            let mut best_a: Vec<f64> = (0..m).map(|ax| coord(ax, best_idx[ax])).collect();

            // One quadratic refinement per interior axis.
            let mut refined = best_a.clone();
            for ax in 0..m {
                if best_idx[ax] == 0 || best_idx[ax] == res - 1 {
                    continue;
                }
                let step = (upper[ax] - lower[ax]) / (res - 1) as f64;
                let mut probe = best_a.clone();
                probe[ax] = coord(ax, best_idx[ax] - 1);
                let f_lo = hamiltonian_unchecked(cp, t, s, y, &probe, p, q);
                probe[ax] = coord(ax, best_idx[ax] + 1);
                let f_hi = hamiltonian_unchecked(cp, t, s, y, &probe, p, q);
                let denom = f_lo - 2.0 * best_val + f_hi;
                if denom > 1e-300 {
                    let delta = 0.5 * (f_lo - f_hi) / denom * step;
                    refined[ax] =
                        (best_a[ax] + delta.clamp(-step, step)).clamp(lower[ax], upper[ax]);
                }
            }
            let refined_val = hamiltonian_unchecked(cp, t, s, y, &refined, p, q);
            if refined_val.is_finite() && refined_val < best_val {
                best_a = refined;
                best_val = refined_val;
            }
            Ok(Argmin { control: best_a, value: best_val, at_boundary })
        }
    }
}

/// Time reversal `(t, s) -> (T - t, T - s)`: maps a problem on the backward
/// wedge `{t <= s <= T}` with terminal data onto the forward triangle with
/// initial data, flipping the sign of the s-derivative. An involution.
pub fn time_reverse(prob: &NonlinearProblem, horizon: f64) -> NonlinearProblem {
    let t_max = horizon;
    let wrap_neg = |f: &FFn| -> FFn {
        let f = f.clone();
        Arc::new(move |args: &FArgs| {
            let rev = FArgs {
                t: t_max - args.t,
                s: t_max - args.s,
                y: args.y,
                u: args.u,
                p: args.p,
                q: args.q,
                l: args.l,
                m: args.m,
                n: args.n,
            };
            -f(&rev)
        })
    };
    let wrap_neg_opt = |f: &Option<FFn>| f.as_ref().map(|f| wrap_neg(f));
    let wrap_neg_vec = |fs: &Option<Vec<FFn>>| -> Option<Vec<FFn>> {
        fs.as_ref().map(|v| v.iter().map(|f| wrap_neg(f)).collect())
    };
    // d/dt' [-F(T - t', ...)] = +F_t(T - t', ...).
    let f_t = prob.f_t.as_ref().map(|f| -> FFn {
        let f = f.clone();
        Arc::new(move |args: &FArgs| {
            let rev = FArgs {
                t: t_max - args.t,
                s: t_max - args.s,
                y: args.y,
                u: args.u,
                p: args.p,
                q: args.q,
                l: args.l,
                m: args.m,
                n: args.n,
            };
            f(&rev)
        })
    });
    let g = prob.g.clone();
    let g_rev = SurfaceCoef::with_dt(
        {
            let g = g.clone();
            Arc::new(move |t: f64, y: &[f64]| g.eval(t_max - t, y))
        },
        {
            let g = g.clone();
            // Fallback step only matters when g lacks an analytic dt.
            Arc::new(move |t: f64, y: &[f64]| -g.eval_dt(t_max - t, y, 1e-6))
        },
    );
    NonlinearProblem {
        d: prob.d,
        f: wrap_neg(&prob.f),
        f_u: wrap_neg_opt(&prob.f_u),
        f_l: wrap_neg_opt(&prob.f_l),
        f_p: wrap_neg_vec(&prob.f_p),
        f_m: wrap_neg_vec(&prob.f_m),
        f_q: wrap_neg_vec(&prob.f_q),
        f_n: wrap_neg_vec(&prob.f_n),
        f_t,
        g: g_rev,
        h_f: prob.h_f,
    }
}

/// Equilibrium policy and value on the diagonal, plus the full solved field
/// in forward (reversed-time) coordinates.
pub struct EquilibriumPolicy {
    pub grid: TriangleGrid,
    pub horizon: f64,
    /// Per control axis: `e(s, y)` on the original backward s-axis.
    pub control: Vec<DiagField>,
    /// `v(s, y) = u(s, s, y)` on the original backward s-axis.
    pub value: DiagField,
    /// Solved field in forward coordinates `u~(t', s', y) = u(T-t', T-s', y)`.
    pub u_forward: TriField,
    pub v_forward: TriField,
    pub report: SolverReport,
    /// Argmin evaluations that landed on the control-box boundary.
    pub boundary_hits: usize,
}

impl EquilibriumPolicy {
    /// Backward-coordinate accessor: `u(t_i, s_j, y_k)` for `j >= i`.
    pub fn u_backward(&self, i_t: usize, i_s: usize, k: usize) -> f64 {
        let n = self.grid.n_time;
        assert!(i_s >= i_t, "backward field requires s >= t");
        self.u_forward.get(n - 1 - i_t, n - 1 - i_s, k)
    }
}

/// Builds the backward nonlocal nonlinearity
/// `F(t,s,y,u,p,q,l,m,n) = -H(t, s, y, argmin_a H(s,s,y,a,m,n), p, q)`
/// of the equilibrium HJB equation.
fn equilibrium_f(cp: &ControlProblem, boundary_hits: Arc<AtomicUsize>) -> FFn {
    let cp = cp.clone();
    Arc::new(move |args: &FArgs| {
        let am = argmin_control(&cp, args.s, args.s, args.y, args.m, args.n).unwrap_or(
            Argmin {
                control: vec![f64::NAN; cp.control.dim().max(1)],
                value: f64::NAN,
                at_boundary: false,
            },
        );
        if am.at_boundary {
            boundary_hits.fetch_add(1, Ordering::Relaxed);
        }
        -hamiltonian_unchecked(&cp, args.t, args.s, args.y, &am.control, args.p, args.q)
    })
}

/// Solves the equilibrium HJB equation: assembles the backward `F`, reverses
/// time, runs the nonlinear solver, and extracts policy and value from the
/// diagonal.
pub fn solve_equilibrium_hjb(
    cp: &ControlProblem,
    grid: &TriangleGrid,
    opts: &SolveOptions,
) -> Result<EquilibriumPolicy> {
    if (grid.horizon - cp.horizon).abs() > 1e-12 * cp.horizon.max(1.0) {
        return Err(Error::Argument(format!(
            "grid horizon {} does not match problem horizon {}",
            grid.horizon, cp.horizon
        )));
    }
    let boundary_hits = Arc::new(AtomicUsize::new(0));
    let backward = NonlinearProblem::new(
        cp.d,
        equilibrium_f(cp, boundary_hits.clone()),
        cp.terminal.clone(),
    );
    let forward = time_reverse(&backward, cp.horizon);
    let sol = solve_nonlinear(&forward, grid, opts).map_err(|e| match e {
        Error::Model(msg) => Error::Model(format!(
            "{msg}; the induced Hamiltonian linearization is not elliptic \
             (check the control set and volatility)"
        )),
        other => other,
    })?;

    // Diagonal extraction on the original backward axis.
    let n = grid.n_time;
    let diag_fwd = restrict_diagonal(&sol.u);
    let (diag_grad, diag_hess) = diag_derivatives(&diag_fwd);
    let d = cp.d;
    let m_dim = match &cp.control {
        ControlSet::Box { lower, .. } => lower.len(),
        ControlSet::ClosedForm(_) => {
            // Probe the closed form once for its output arity.
            let y0 = grid.point(0);
            let p0 = vec![0.0; d];
            let q0 = vec![0.0; d * d];
            argmin_control(cp, 0.0, 0.0, &y0, &p0, &q0)?.control.len()
        }
    };
    let mut value = DiagField::zeros(*grid);
    let mut control = vec![DiagField::zeros(*grid); m_dim];
    let mut diag_boundary = 0usize;
    for j in 0..n {
        let rev = n - 1 - j;
        let s = grid.tau(j);
        for k in 0..grid.spatial_len() {
            let y = grid.point(k);
            value.set(j, k, diag_fwd.get(rev, k));
            let p: Vec<f64> = (0..d).map(|i| diag_grad[i].get(rev, k)).collect();
            let q: Vec<f64> = (0..d * d).map(|i| diag_hess[i].get(rev, k)).collect();
            let am = argmin_control(cp, s, s, &y, &p, &q)?;
            if am.at_boundary {
                diag_boundary += 1;
            }
            for ax in 0..m_dim {
                control[ax].set(j, k, am.control[ax]);
            }
        }
    }

    Ok(EquilibriumPolicy {
        grid: *grid,
        horizon: cp.horizon,
        control,
        value,
        u_forward: sol.u,
        v_forward: sol.v,
        report: sol.report,
        boundary_hits: diag_boundary + boundary_hits.load(Ordering::Relaxed),
    })
}

/// Residuals of the two coupled HJB equations at the solved policy:
/// `res1` for the diagonal value equation, `res2` for the t-parameterized
/// equation along the frozen policy. Both vanish under refinement.
pub fn verify_hjb_system(
    policy: &EquilibriumPolicy,
    cp: &ControlProblem,
) -> Result<(f64, f64)> {
    let grid = policy.grid;
    let n = grid.n_time;
    let d = cp.d;
    let dt = grid.dt();

    // res1: v_s + inf_a H(s, s, y, a, v_y, v_yy) on the diagonal.
    let (v_grad, v_hess) = diag_derivatives(&policy.value);
    let mut res1 = 0.0f64;
    for j in 0..n {
        let s = grid.tau(j);
        for k in 0..grid.spatial_len() {
            let y = grid.point(k);
            let v_s = if j > 0 && j + 1 < n {
                (policy.value.get(j + 1, k) - policy.value.get(j - 1, k)) / (2.0 * dt)
            } else if j == 0 && n >= 3 {
                (-3.0 * policy.value.get(0, k) + 4.0 * policy.value.get(1, k)
                    - policy.value.get(2, k))
                    / (2.0 * dt)
            } else if j + 1 == n && n >= 3 {
                (3.0 * policy.value.get(j, k) - 4.0 * policy.value.get(j - 1, k)
                    + policy.value.get(j - 2, k))
                    / (2.0 * dt)
            } else {
                continue;
            };
            let p: Vec<f64> = (0..d).map(|i| v_grad[i].get(j, k)).collect();
            let q: Vec<f64> = (0..d * d).map(|i| v_hess[i].get(j, k)).collect();
            let am = argmin_control(cp, s, s, &y, &p, &q)?;
            res1 = res1.max((v_s + am.value).abs());
        }
    }

    // res2: u_s + H(t, s, y, e(s, y), u_y, u_yy) over the backward wedge.
    let mut res2 = 0.0f64;
    for i_t in 0..n {
        let t = grid.tau(i_t);
        for i_s in i_t..n {
            let s = grid.tau(i_s);
            let rows = n - i_t;
            let u_s_at = |k: usize| -> Option<f64> {
                if i_s > i_t && i_s + 1 < n {
                    Some(
                        (policy.u_backward(i_t, i_s + 1, k)
                            - policy.u_backward(i_t, i_s - 1, k))
                            / (2.0 * dt),
                    )
                } else if i_s == i_t && rows >= 3 {
                    Some(
                        (-3.0 * policy.u_backward(i_t, i_s, k)
                            + 4.0 * policy.u_backward(i_t, i_s + 1, k)
                            - policy.u_backward(i_t, i_s + 2, k))
                            / (2.0 * dt),
                    )
                } else if i_s + 1 == n && rows >= 3 {
                    Some(
                        (3.0 * policy.u_backward(i_t, i_s, k)
                            - 4.0 * policy.u_backward(i_t, i_s - 1, k)
                            + policy.u_backward(i_t, i_s - 2, k))
                            / (2.0 * dt),
                    )
                } else {
                    None
                }
            };
            // Spatial derivatives of the backward row (it is a forward
            // storage row on the same lattice).
            let rev_t = n - 1 - i_t;
            let rev_s = n - 1 - i_s;
            let row = policy.u_forward.row(rev_t, rev_s);
            let grad = crate::grid::gradient_row(row, &grid);
            let hess = crate::grid::hessian_row(row, &grid);
            for k in 0..grid.spatial_len() {
                let Some(u_s) = u_s_at(k) else { continue };
                let y = grid.point(k);
                let e: Vec<f64> = (0..policy.control.len())
                    .map(|ax| policy.control[ax].get(i_s, k))
                    .collect();
                let p: Vec<f64> = (0..d).map(|i| grad[i][k]).collect();
                let q: Vec<f64> = (0..d * d).map(|i| hess[i][k]).collect();
                let h = hamiltonian_unchecked(cp, t, s, &y, &e, &p, &q);
                res2 = res2.max((u_s + h).abs());
            }
        }
    }
    Ok((res1, res2))
}
