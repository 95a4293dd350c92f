//! Classical (local) linear parabolic stepper on the periodic lattice.
//!
//! Advances `u_s = A : u_yy + B . u_y + C u + phi` one node in `s` with the
//! theta-scheme (Crank-Nicolson by default). The implicit system is a cyclic
//! tridiagonal solve in one dimension and a matrix-free BiCGSTAB iteration on
//! the 9-point stencil in two.

use crate::error::{Error, Result};
use crate::grid::TriangleGrid;

/// Operator samples at one `s` level: per lattice node a symmetric diffusion
/// matrix `A`, drift `B`, reaction `C`, and source `phi`.
#[derive(Debug, Clone)]
pub struct OperatorSlice {
    pub d: usize,
    pub n_y: usize,
    /// Row-major `d*d` entries per node.
    pub a: Vec<f64>,
    /// `d` entries per node.
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub source: Vec<f64>,
}

impl OperatorSlice {
    pub fn zeros(d: usize, n_y: usize) -> Self {
        OperatorSlice {
            d,
            n_y,
            a: vec![0.0; n_y * d * d],
            b: vec![0.0; n_y * d],
            c: vec![0.0; n_y],
            source: vec![0.0; n_y],
        }
    }

    #[inline]
    pub fn a_at(&self, k: usize, i: usize, j: usize) -> f64 {
        self.a[k * self.d * self.d + i * self.d + j]
    }

    #[inline]
    pub fn b_at(&self, k: usize, i: usize) -> f64 {
        self.b[k * self.d + i]
    }

    /// Smallest eigenvalue of the symmetrized diffusion over all nodes;
    /// the discrete ellipticity witness.
    pub fn min_diffusion_eigenvalue(&self) -> f64 {
        let mut min = f64::INFINITY;
        for k in 0..self.n_y {
            let lambda = match self.d {
                1 => self.a_at(k, 0, 0),
                _ => {
                    let a11 = self.a_at(k, 0, 0);
                    let a22 = self.a_at(k, 1, 1);
                    let off = 0.5 * (self.a_at(k, 0, 1) + self.a_at(k, 1, 0));
                    let tr = a11 + a22;
                    let det = a11 * a22 - off * off;
                    0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt())
                }
            };
            min = min.min(lambda);
        }
        min
    }

    /// Convex blend of two node-sampled operators; `theta = 1/2` gives the
    /// midpoint operator used by Crank-Nicolson.
    pub fn blend(lo: &OperatorSlice, hi: &OperatorSlice, theta: f64) -> OperatorSlice {
        let w_hi = theta;
        let w_lo = 1.0 - theta;
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| w_lo * x + w_hi * y).collect()
        };
        OperatorSlice {
            d: lo.d,
            n_y: lo.n_y,
            a: mix(&lo.a, &hi.a),
            b: mix(&lo.b, &hi.b),
            c: mix(&lo.c, &hi.c),
            source: mix(&lo.source, &hi.source),
        }
    }
}

/// Applies `L u = A : u_yy + B . u_y + C u` on the periodic lattice.
pub fn apply_operator(op: &OperatorSlice, grid: &TriangleGrid, u: &[f64], out: &mut [f64]) {
    let dy = grid.dy();
    let dy2 = dy * dy;
    let n = grid.n_space as isize;
    match grid.d {
        1 => {
            let wrap = |i: isize| -> usize { (((i % n) + n) % n) as usize };
            for k in 0..op.n_y {
                let ki = k as isize;
                let up = u[wrap(ki + 1)];
                let um = u[wrap(ki - 1)];
                out[k] = op.a_at(k, 0, 0) * (up - 2.0 * u[k] + um) / dy2
                    + op.b_at(k, 0) * (up - um) / (2.0 * dy)
                    + op.c[k] * u[k];
            }
        }
        _ => {
            for k in 0..op.n_y {
                let ax = grid.axes(k);
                let (x, y) = (ax[0] as isize, ax[1] as isize);
                let at = |i: isize, j: isize| u[grid.flat(&[i, j])];
                let uxx = (at(x + 1, y) - 2.0 * u[k] + at(x - 1, y)) / dy2;
                let uyy = (at(x, y + 1) - 2.0 * u[k] + at(x, y - 1)) / dy2;
                let uxy = (at(x + 1, y + 1) - at(x + 1, y - 1) - at(x - 1, y + 1)
                    + at(x - 1, y - 1))
                    / (4.0 * dy2);
                let ux = (at(x + 1, y) - at(x - 1, y)) / (2.0 * dy);
                let uy = (at(x, y + 1) - at(x, y - 1)) / (2.0 * dy);
                out[k] = op.a_at(k, 0, 0) * uxx
                    + (op.a_at(k, 0, 1) + op.a_at(k, 1, 0)) * uxy
                    + op.a_at(k, 1, 1) * uyy
                    + op.b_at(k, 0) * ux
                    + op.b_at(k, 1) * uy
                    + op.c[k] * u[k];
            }
        }
    }
}

/// Thomas-algorithm solve of a cyclic tridiagonal system via the
/// Sherman-Morrison corner correction. Diagonals are given per row; `sub`
/// couples to `k-1` (periodically) and `sup` to `k+1`.
fn solve_cyclic_tridiagonal(
    sub: &[f64],
    diag: &[f64],
    sup: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let n = diag.len();
    let gamma = -diag[0];
    let mut b = diag.to_vec();
    b[0] -= gamma;
    b[n - 1] -= sup[n - 1] * sub[0] / gamma;

    let tridiag = |b: &[f64], r: &[f64]| -> Result<Vec<f64>> {
        let mut x = vec![0.0; n];
        let mut gam = vec![0.0; n];
        let mut bet = b[0];
        if bet.abs() < 1e-300 {
            return Err(Error::Numerical("zero pivot in tridiagonal solve at row 0".into()));
        }
        x[0] = r[0] / bet;
        for k in 1..n {
            gam[k] = sup[k - 1] / bet;
            bet = b[k] - sub[k] * gam[k];
            if bet.abs() < 1e-300 {
                return Err(Error::Numerical(format!(
                    "zero pivot in tridiagonal solve at row {k} (pivot {bet:e})"
                )));
            }
            x[k] = (r[k] - sub[k] * x[k - 1]) / bet;
        }
        for k in (0..n - 1).rev() {
            x[k] -= gam[k + 1] * x[k + 1];
        }
        Ok(x)
    };

    let x = tridiag(&b, rhs)?;
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = sup[n - 1];
    let z = tridiag(&b, &u)?;
    let denom = 1.0 + z[0] + sub[0] * z[n - 1] / gamma;
    if denom.abs() < 1e-14 {
        return Err(Error::Numerical(format!(
            "singular cyclic correction (denominator {denom:e})"
        )));
    }
    let factor = (x[0] + sub[0] * x[n - 1] / gamma) / denom;
    Ok(x.iter().zip(&z).map(|(xi, zi)| xi - factor * zi).collect())
}

/// Solves `(I - theta dt L) x = rhs` in one spatial dimension.
fn implicit_solve_1d(
    op: &OperatorSlice,
    grid: &TriangleGrid,
    dt: f64,
    theta: f64,
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let n = op.n_y;
    let dy = grid.dy();
    let dy2 = dy * dy;
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    for k in 0..n {
        let a = op.a_at(k, 0, 0);
        let b = op.b_at(k, 0);
        sub[k] = -theta * dt * (a / dy2 - b / (2.0 * dy));
        sup[k] = -theta * dt * (a / dy2 + b / (2.0 * dy));
        diag[k] = 1.0 - theta * dt * (-2.0 * a / dy2 + op.c[k]);
    }
    solve_cyclic_tridiagonal(&sub, &diag, &sup, rhs)
}

/// Matrix-free Jacobi-preconditioned BiCGSTAB for the 2-d implicit system.
fn implicit_solve_2d(
    op: &OperatorSlice,
    grid: &TriangleGrid,
    dt: f64,
    theta: f64,
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let n = op.n_y;
    let dy2 = grid.dy() * grid.dy();
    let apply_m = |x: &[f64], out: &mut [f64], scratch: &mut [f64]| {
        apply_operator(op, grid, x, scratch);
        for k in 0..n {
            out[k] = x[k] - theta * dt * scratch[k];
        }
    };
    let mut precon = vec![0.0; n];
    for k in 0..n {
        let diag = 1.0
            - theta
                * dt
                * (-2.0 * (op.a_at(k, 0, 0) + op.a_at(k, 1, 1)) / dy2 + op.c[k]);
        precon[k] = if diag.abs() > 1e-300 { 1.0 / diag } else { 1.0 };
    }

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let norm = |a: &[f64]| dot(a, a).sqrt();

    let rhs_norm = norm(rhs).max(1e-300);
    let tol = 1e-12 * rhs_norm;
    let mut x = rhs.to_vec();
    let mut scratch = vec![0.0; n];
    let mut r = vec![0.0; n];
    apply_m(&x, &mut r, &mut scratch);
    for k in 0..n {
        r[k] = rhs[k] - r[k];
    }
    let r0 = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let max_it = 40 * (n as usize).max(100);
    for _ in 0..max_it {
        if norm(&r) <= tol {
            return Ok(x);
        }
        let rho_new = dot(&r0, &r);
        if rho_new.abs() < 1e-300 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for k in 0..n {
            p[k] = r[k] + beta * (p[k] - omega * v[k]);
        }
        let p_hat: Vec<f64> = p.iter().zip(&precon).map(|(a, m)| a * m).collect();
        apply_m(&p_hat, &mut v, &mut scratch);
        alpha = rho / dot(&r0, &v);
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        if norm(&s) <= tol {
            for k in 0..n {
                x[k] += alpha * p_hat[k];
            }
            return Ok(x);
        }
        let s_hat: Vec<f64> = s.iter().zip(&precon).map(|(a, m)| a * m).collect();
        let mut t = vec![0.0; n];
        apply_m(&s_hat, &mut t, &mut scratch);
        let tt = dot(&t, &t);
        if tt.abs() < 1e-300 {
            break;
        }
        omega = dot(&t, &s) / tt;
        for k in 0..n {
            x[k] += alpha * p_hat[k] + omega * s_hat[k];
            r[k] = s[k] - omega * t[k];
        }
        if omega.abs() < 1e-300 {
            break;
        }
    }
    let res = norm(&r) / rhs_norm;
    if res <= 1e-10 {
        return Ok(x);
    }
    Err(Error::Numerical(format!(
        "BiCGSTAB failed to reach tolerance (relative residual {res:e})"
    )))
}

/// One theta-scheme step `s_j -> s_{j+1}`. The operator is sampled wherever
/// the caller chose (midpoint-blended for Crank-Nicolson):
/// `(I - theta dt L) u_next = (I + (1-theta) dt L) u + dt phi`.
pub fn advance_slice_step(
    state: &[f64],
    op: &OperatorSlice,
    grid: &TriangleGrid,
    dt: f64,
    theta: f64,
) -> Result<Vec<f64>> {
    let n = op.n_y;
    let mut rhs = vec![0.0; n];
    apply_operator(op, grid, state, &mut rhs);
    for k in 0..n {
        rhs[k] = state[k] + (1.0 - theta) * dt * rhs[k] + dt * op.source[k];
    }
    if theta == 0.0 {
        return Ok(rhs);
    }
    match grid.d {
        1 => implicit_solve_1d(op, grid, dt, theta, &rhs),
        _ => implicit_solve_2d(op, grid, dt, theta, &rhs),
    }
}

/// Marches a parameterized local problem from `s = tau_0` to `s = tau_up_to`
/// given per-node operator samples; returns all rows `0..=up_to`.
pub fn solve_parameterized_local(
    op_by_slice: &[OperatorSlice],
    initial: &[f64],
    up_to: usize,
    grid: &TriangleGrid,
    theta: f64,
) -> Result<Vec<Vec<f64>>> {
    if op_by_slice.len() < up_to + 1 {
        return Err(Error::Argument(format!(
            "need {} operator slices, got {}",
            up_to + 1,
            op_by_slice.len()
        )));
    }
    if !initial.iter().all(|v| v.is_finite()) {
        return Err(Error::Argument("non-finite initial data".into()));
    }
    let dt = grid.dt();
    let mut rows = Vec::with_capacity(up_to + 1);
    rows.push(initial.to_vec());
    for j in 0..up_to {
        let op = OperatorSlice::blend(&op_by_slice[j], &op_by_slice[j + 1], theta);
        let next = advance_slice_step(&rows[j], &op, grid, dt, theta)?;
        rows.push(next);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use std::f64::consts::PI;

    fn heat_op(grid: &TriangleGrid) -> OperatorSlice {
        let n = grid.spatial_len();
        let mut op = OperatorSlice::zeros(grid.d, n);
        for k in 0..n {
            for i in 0..grid.d {
                op.a[k * grid.d * grid.d + i * grid.d + i] = 1.0;
            }
        }
        op
    }

    #[test]
    fn heat_single_step_matches_decay() {
        let grid = build_grid(2, 1, 256, 1.0, 2.0 * PI).unwrap();
        let dt = 1e-3;
        let state: Vec<f64> = (0..grid.spatial_len()).map(|k| grid.point(k)[0].sin()).collect();
        let op = heat_op(&grid);
        let next = advance_slice_step(&state, &op, &grid, dt, 0.5).unwrap();
        let dy = grid.dy();
        let bound = dt * dt * dt + dt * dy * dy;
        for k in 0..grid.spatial_len() {
            let exact = (-dt_f(dt)).exp() * grid.point(k)[0].sin();
            assert!(
                (next[k] - exact).abs() <= 10.0 * bound,
                "node {k}: {} vs {exact}",
                next[k]
            );
        }
    }

    fn dt_f(dt: f64) -> f64 {
        dt
    }

    #[test]
    fn stationary_state_preserved() {
        // phi = -C keeps u = 1 stationary.
        let grid = build_grid(2, 1, 32, 1.0, 1.0).unwrap();
        let n = grid.spatial_len();
        let mut op = heat_op(&grid);
        for k in 0..n {
            op.c[k] = -0.7 + 0.1 * (k as f64 / n as f64);
            op.source[k] = -op.c[k];
        }
        let state = vec![1.0; n];
        let next = advance_slice_step(&state, &op, &grid, 0.05, 0.5).unwrap();
        for v in &next {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_state_zero_source_stays_zero() {
        let grid = build_grid(2, 1, 16, 1.0, 1.0).unwrap();
        let op = heat_op(&grid);
        let next = advance_slice_step(&vec![0.0; 16], &op, &grid, 0.1, 0.5).unwrap();
        assert!(next.iter().all(|v| *v == 0.0));
    }

    fn heat_march_error(n_time: usize, n_space: usize) -> f64 {
        let grid = build_grid(n_time, 1, n_space, 0.1, 2.0 * PI).unwrap();
        let ops = vec![heat_op(&grid); n_time];
        let initial: Vec<f64> =
            (0..grid.spatial_len()).map(|k| grid.point(k)[0].sin()).collect();
        let rows = solve_parameterized_local(&ops, &initial, n_time - 1, &grid, 0.5).unwrap();
        let mut worst = 0.0f64;
        for (j, row) in rows.iter().enumerate() {
            let s = grid.tau(j);
            for k in 0..grid.spatial_len() {
                let exact = (-s).exp() * grid.point(k)[0].sin();
                worst = worst.max((row[k] - exact).abs());
            }
        }
        worst
    }

    #[test]
    fn heat_march_second_order_convergence() {
        let coarse = heat_march_error(9, 32);
        let fine = heat_march_error(17, 64);
        assert!(
            coarse / fine >= 3.0,
            "halving dt and dy should cut the error >= 3x: {coarse} -> {fine}"
        );
    }

    #[test]
    fn zero_data_yields_zero_solution() {
        let grid = build_grid(6, 1, 16, 1.0, 1.0).unwrap();
        let ops = vec![heat_op(&grid); 6];
        let rows =
            solve_parameterized_local(&ops, &vec![0.0; 16], 5, &grid, 0.5).unwrap();
        for row in rows {
            assert!(row.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn linearity_in_sources() {
        let grid = build_grid(6, 1, 32, 0.5, 2.0 * PI).unwrap();
        let n = grid.spatial_len();
        let src1: Vec<f64> = (0..n).map(|k| grid.point(k)[0].sin()).collect();
        let src2: Vec<f64> = (0..n).map(|k| (2.0 * grid.point(k)[0]).cos()).collect();
        let solve_with = |w1: f64, w2: f64| {
            let ops: Vec<OperatorSlice> = (0..6)
                .map(|_| {
                    let mut op = heat_op(&grid);
                    for k in 0..n {
                        op.source[k] = w1 * src1[k] + w2 * src2[k];
                    }
                    op
                })
                .collect();
            solve_parameterized_local(&ops, &vec![0.0; n], 5, &grid, 0.5).unwrap()
        };
        let a = solve_with(1.0, 0.0);
        let b = solve_with(0.0, 1.0);
        let combo = solve_with(2.0, -3.0);
        for j in 0..6 {
            for k in 0..n {
                let lin = 2.0 * a[j][k] - 3.0 * b[j][k];
                assert!((combo[j][k] - lin).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn crank_nicolson_is_nonexpansive_for_diffusion() {
        // Homogeneous heat flow with C <= 0: sup norm must not grow.
        let grid = build_grid(12, 1, 24, 1.0, 1.0).unwrap();
        let n = grid.spatial_len();
        let mut op = heat_op(&grid);
        for k in 0..n {
            op.c[k] = -0.3;
        }
        let ops = vec![op; 12];
        let initial: Vec<f64> = (0..n)
            .map(|k| (2.0 * PI * grid.point(k)[0]).sin() + 0.5 * (6.0 * PI * grid.point(k)[0]).cos())
            .collect();
        let rows = solve_parameterized_local(&ops, &initial, 11, &grid, 0.5).unwrap();
        let sup = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut prev = sup(&rows[0]);
        for row in &rows[1..] {
            let cur = sup(row);
            assert!(cur <= prev + 1e-12);
            prev = cur;
        }
    }

    #[test]
    fn two_dimensional_heat_step() {
        let grid = build_grid(2, 2, 24, 1.0, 2.0 * PI).unwrap();
        let n = grid.spatial_len();
        let op = heat_op(&grid);
        let state: Vec<f64> = (0..n)
            .map(|k| {
                let p = grid.point(k);
                p[0].sin() * p[1].cos()
            })
            .collect();
        let dt = 5e-3;
        let next = advance_slice_step(&state, &op, &grid, dt, 0.5).unwrap();
        // Exact factor is exp(-2 dt) for this eigenfunction.
        let factor = (-2.0 * dt).exp();
        let dy = grid.dy();
        for k in 0..n {
            let exact = factor * state[k];
            assert!((next[k] - exact).abs() < 2.0 * (dt * dt * dt + dt * dy * dy));
        }
    }

    #[test]
    fn mixed_derivative_stencil_is_exact_on_bilinear_waves() {
        // L with pure mixed diffusion applied to sin(x)sin(y): the cross
        // stencil reproduces cos(x)cos(y) to second order.
        let grid = build_grid(2, 2, 48, 1.0, 2.0 * PI).unwrap();
        let n = grid.spatial_len();
        let mut op = OperatorSlice::zeros(2, n);
        for k in 0..n {
            op.a[k * 4 + 1] = 0.5;
            op.a[k * 4 + 2] = 0.5;
        }
        let state: Vec<f64> = (0..n)
            .map(|k| {
                let p = grid.point(k);
                p[0].sin() * p[1].sin()
            })
            .collect();
        let mut out = vec![0.0; n];
        apply_operator(&op, &grid, &state, &mut out);
        let dy = grid.dy();
        for k in 0..n {
            let p = grid.point(k);
            let exact = p[0].cos() * p[1].cos();
            assert!((out[k] - exact).abs() < dy * dy, "node {k}");
        }
    }
}
