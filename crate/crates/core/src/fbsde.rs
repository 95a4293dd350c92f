//! Monte Carlo verification of the stochastic representation.
//!
//! A solved backward field `u(t, s, y)` on `{t <= s <= T}` induces, along
//! Euler-Maruyama paths of a forward SDE,
//!
//! ```text
//! Y(t,s) = u(t,s,X(s)),          Z(t,s) = (sigma^T u_y)(t,s,X(s)),
//! Gamma  = (sigma^T u_y)_y sigma, A = D(sigma^T u_y),
//! D(phi) = phi_s + 1/2 (sigma sigma^T) : phi_yy + b . phi_y,
//! ```
//!
//! and the pair of integral identities
//!
//! ```text
//! Y(t,s) = g(t,X(T)) - int_s^T Fgen dtau - int_s^T Z^T dW,
//! Z(t,s) = Z(t,s0)   + int_s0^s A dtau  + int_s0^s Gamma dW,
//! ```
//!
//! whose per-path residuals this module accumulates statistically. All
//! derivative fields are built by central differences on the grid first and
//! interpolated along paths after; time integrals use the trapezoid rule and
//! stochastic integrals the left-point (Ito) rule.

use crate::error::{Error, Result};
use crate::grid::{gradient_row, hessian_row, TriField, TriangleGrid};
use crate::nonlinear::{FArgs, FFn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::sync::Arc;

pub type SdeDriftFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
pub type SdeVolFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Euler-Maruyama paths with their Brownian increments; reproducible from
/// the seed, bit for bit.
pub struct PathBundle {
    pub n_paths: usize,
    pub n_steps: usize,
    pub dim: usize,
    pub k_noise: usize,
    /// Step size `T / n_steps`.
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    /// `n_paths * n_steps * k_noise`.
    increments: Vec<f64>,
    /// `n_paths * (n_steps + 1) * dim`.
    states: Vec<f64>,
}

impl PathBundle {
    #[inline]
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let at = (path * (self.n_steps + 1) + step) * self.dim;
        &self.states[at..at + self.dim]
    }

    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let at = (path * self.n_steps + step) * self.k_noise;
        &self.increments[at..at + self.k_noise]
    }

    /// Sample mean and variance of the increments per noise component,
    /// with the standard errors of both.
    pub fn increment_moments(&self) -> Vec<(f64, f64, f64, f64)> {
        let count = (self.n_paths * self.n_steps) as f64;
        let mut out = Vec::with_capacity(self.k_noise);
        for comp in 0..self.k_noise {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for p in 0..self.n_paths {
                for m in 0..self.n_steps {
                    let w = self.increment(p, m)[comp];
                    sum += w;
                    sum_sq += w * w;
                }
            }
            let mean = sum / count;
            let var = sum_sq / count - mean * mean;
            let se_mean = (var / count).sqrt();
            // Variance of the sample variance of a Gaussian: 2 var^2 / n.
            let se_var = (2.0 * var * var / count).sqrt();
            out.push((mean, se_mean, var, se_var));
        }
        out
    }
}

/// Standard normal draw via Box-Muller from two uniform draws.
fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Simulates `n_paths` Euler-Maruyama trajectories of
/// `dX = b(s, X) ds + sigma(s, X) dW` from `y0` on `[0, T]`.
pub fn simulate_forward(
    drift: &SdeDriftFn,
    vol: &SdeVolFn,
    y0: &[f64],
    horizon: f64,
    n_paths: usize,
    n_steps: usize,
    k_noise: usize,
    seed: u64,
) -> Result<PathBundle> {
    if n_paths == 0 || n_steps == 0 {
        return Err(Error::Config("need at least one path and one step".into()));
    }
    let d = y0.len();
    let dt = horizon / n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut increments = vec![0.0; n_paths * n_steps * k_noise];
    let mut states = vec![0.0; n_paths * (n_steps + 1) * d];
    for path in 0..n_paths {
        let mut x = y0.to_vec();
        states[(path * (n_steps + 1)) * d..(path * (n_steps + 1) + 1) * d]
            .copy_from_slice(&x);
        for step in 0..n_steps {
            let s = step as f64 * dt;
            let b = drift(s, &x);
            let sg = vol(s, &x);
            let dw_at = (path * n_steps + step) * k_noise;
            for comp in 0..k_noise {
                increments[dw_at + comp] = sqrt_dt * normal_draw(&mut rng);
            }
            for i in 0..d {
                let mut diffusion = 0.0;
                for comp in 0..k_noise {
                    diffusion += sg[i * k_noise + comp] * increments[dw_at + comp];
                }
                x[i] += b[i] * dt + diffusion;
                if !x[i].is_finite() {
                    return Err(Error::Numerical(format!(
                        "path {path} blew up at step {step} (component {i})"
                    )));
                }
            }
            let at = (path * (n_steps + 1) + step + 1) * d;
            states[at..at + d].copy_from_slice(&x);
        }
    }
    Ok(PathBundle {
        n_paths,
        n_steps,
        dim: d,
        k_noise,
        dt,
        horizon,
        seed,
        increments,
        states,
    })
}

/// Sampled Lipschitz estimates of the SDE coefficients along the paths;
/// a diagnostic for the well-posedness hypotheses.
pub fn lipschitz_diagnostic(
    bundle: &PathBundle,
    drift: &SdeDriftFn,
    vol: &SdeVolFn,
) -> (f64, f64) {
    let mut lip_b = 0.0f64;
    let mut lip_s = 0.0f64;
    let probes = bundle.n_paths.min(64);
    for path in 0..probes {
        for step in 0..bundle.n_steps {
            let s = step as f64 * bundle.dt;
            let x0 = bundle.state(path, step);
            let x1 = bundle.state(path, step + 1);
            let dist: f64 = x0
                .iter()
                .zip(x1)
                .map(|(a, b)| (a - b).abs())
                .sum();
            if dist < 1e-12 {
                continue;
            }
            let b0 = drift(s, x0);
            let b1 = drift(s, x1);
            let s0 = vol(s, x0);
            let s1 = vol(s, x1);
            let db: f64 = b0.iter().zip(&b1).map(|(a, b)| (a - b).abs()).sum();
            let ds: f64 = s0.iter().zip(&s1).map(|(a, b)| (a - b).abs()).sum();
            lip_b = lip_b.max(db / dist);
            lip_s = lip_s.max(ds / dist);
        }
    }
    (lip_b, lip_s)
}

/// The solved backward field `u(t, s, y) = forward(T - t, T - s, y)`.
pub struct BackwardField {
    pub forward: TriField,
}

impl BackwardField {
    pub fn grid(&self) -> &TriangleGrid {
        &self.forward.grid
    }

    /// Row of backward values `u(t_i, s_j, .)`, `j >= i`.
    fn backward_row(&self, i_t: usize, i_s: usize) -> &[f64] {
        let n = self.forward.grid.n_time;
        self.forward.row(n - 1 - i_t, n - 1 - i_s)
    }
}

/// The flow problem a backward field is verified against: the backward
/// nonlinearity, the forward SDE coefficients, and the terminal data.
#[derive(Clone)]
pub struct FlowProblem {
    pub d: usize,
    pub k_noise: usize,
    /// `F` of the backward equation `u_s = F(...)`.
    pub f_backward: FFn,
    pub drift: SdeDriftFn,
    pub vol: SdeVolFn,
    pub terminal: TerminalFn,
}

/// Grids of every path-sampled quantity for one backward t-node: rows are
/// backward s-nodes `j = i_t .. n-1`, columns the spatial lattice.
struct NodeGrids {
    i_t: usize,
    n_rows: usize,
    n_y: usize,
    k: usize,
    u: Vec<f64>,
    /// sigma^T u_y, `k` components.
    z: Vec<f64>,
    /// Gamma = (grad z) sigma, `k*k` components.
    gamma: Vec<f64>,
    /// A = D(sigma^T u_y), `k` components.
    a: Vec<f64>,
    /// Generator integrand of the Y equation.
    gen: Vec<f64>,
}

fn build_node_grids(
    field: &BackwardField,
    fp: &FlowProblem,
    i_t: usize,
) -> NodeGrids {
    let grid = *field.grid();
    let n = grid.n_time;
    let n_y = grid.spatial_len();
    let d = grid.d;
    let k = fp.k_noise;
    let dt = grid.dt();
    let n_rows = n - i_t;
    let t = grid.tau(i_t);

    // Diagonal triple on the backward axis, shared across t-nodes but cheap
    // enough to rebuild here.
    let mut diag_vals = vec![0.0; n * n_y];
    let mut diag_grad = vec![0.0; n * n_y * d];
    let mut diag_hess = vec![0.0; n * n_y * d * d];
    for j in 0..n {
        let row = field.backward_row(j, j).to_vec();
        let g = gradient_row(&row, &grid);
        let h = hessian_row(&row, &grid);
        for kk in 0..n_y {
            diag_vals[j * n_y + kk] = row[kk];
            for i in 0..d {
                diag_grad[(j * n_y + kk) * d + i] = g[i][kk];
            }
            for i in 0..d * d {
                diag_hess[(j * n_y + kk) * d * d + i] = h[i][kk];
            }
        }
    }

    let mut u = vec![0.0; n_rows * n_y];
    let mut z = vec![0.0; n_rows * n_y * k];
    let mut gen = vec![0.0; n_rows * n_y];
    let mut grads = vec![0.0; n_rows * n_y * d];
    let mut hesses = vec![0.0; n_rows * n_y * d * d];
    for r in 0..n_rows {
        let j = i_t + r;
        let s = grid.tau(j);
        let row = field.backward_row(i_t, j).to_vec();
        let g = gradient_row(&row, &grid);
        let h = hessian_row(&row, &grid);
        for kk in 0..n_y {
            let y = grid.point(kk);
            u[r * n_y + kk] = row[kk];
            let sg = (fp.vol)(s, &y);
            for comp in 0..k {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += sg[i * k + comp] * g[i][kk];
                }
                z[(r * n_y + kk) * k + comp] = acc;
            }
            for i in 0..d {
                grads[(r * n_y + kk) * d + i] = g[i][kk];
            }
            for i in 0..d * d {
                hesses[(r * n_y + kk) * d * d + i] = h[i][kk];
            }
            // Generator: F_backward + 1/2 (sigma sigma^T) : u_yy + b . u_y.
            let p: Vec<f64> = (0..d).map(|i| g[i][kk]).collect();
            let q: Vec<f64> = (0..d * d).map(|i| h[i][kk]).collect();
            let m: Vec<f64> = (0..d).map(|i| diag_grad[(j * n_y + kk) * d + i]).collect();
            let nn: Vec<f64> =
                (0..d * d).map(|i| diag_hess[(j * n_y + kk) * d * d + i]).collect();
            let args = FArgs {
                t,
                s,
                y: &y,
                u: row[kk],
                p: &p,
                q: &q,
                l: diag_vals[j * n_y + kk],
                m: &m,
                n: &nn,
            };
            let mut val = (fp.f_backward)(&args);
            let b = (fp.drift)(s, &y);
            for i in 0..d {
                val += b[i] * g[i][kk];
            }
            for i in 0..d {
                for j2 in 0..d {
                    let mut ssij = 0.0;
                    for comp in 0..k {
                        ssij += sg[i * k + comp] * sg[j2 * k + comp];
                    }
                    val += 0.5 * ssij * h[i * d + j2][kk];
                }
            }
            gen[r * n_y + kk] = val;
        }
    }

    // z_s by finite differences over backward rows, then Gamma and A.
    let mut gamma = vec![0.0; n_rows * n_y * k * k];
    let mut a = vec![0.0; n_rows * n_y * k];
    for r in 0..n_rows {
        let j = i_t + r;
        let s = grid.tau(j);
        // Spatial derivatives of each z component on this row.
        let mut z_grad = vec![vec![0.0; n_y * d]; k];
        let mut z_hess = vec![vec![0.0; n_y * d * d]; k];
        for comp in 0..k {
            let z_row: Vec<f64> = (0..n_y).map(|kk| z[(r * n_y + kk) * k + comp]).collect();
            let zg = gradient_row(&z_row, &grid);
            let zh = hessian_row(&z_row, &grid);
            for kk in 0..n_y {
                for i in 0..d {
                    z_grad[comp][kk * d + i] = zg[i][kk];
                }
                for i in 0..d * d {
                    z_hess[comp][kk * d * d + i] = zh[i][kk];
                }
            }
        }
        for kk in 0..n_y {
            let y = grid.point(kk);
            let sg = (fp.vol)(s, &y);
            let b = (fp.drift)(s, &y);
            for comp in 0..k {
                // Gamma_{comp, lam} = sum_i dz_comp/dy_i sigma_{i, lam}.
                for lam in 0..k {
                    let mut acc = 0.0;
                    for i in 0..d {
                        acc += z_grad[comp][kk * d + i] * sg[i * k + lam];
                    }
                    gamma[((r * n_y + kk) * k + comp) * k + lam] = acc;
                }
                // A_comp = z_s + 1/2 (sigma sigma^T) : z_yy + b . z_y.
                let z_s = if r > 0 && r + 1 < n_rows {
                    (z[((r + 1) * n_y + kk) * k + comp] - z[((r - 1) * n_y + kk) * k + comp])
                        / (2.0 * dt)
                } else if r == 0 && n_rows >= 3 {
                    (-3.0 * z[(kk) * k + comp] + 4.0 * z[(n_y + kk) * k + comp]
                        - z[(2 * n_y + kk) * k + comp])
                        / (2.0 * dt)
                } else if r + 1 == n_rows && n_rows >= 3 {
                    (3.0 * z[(r * n_y + kk) * k + comp]
                        - 4.0 * z[((r - 1) * n_y + kk) * k + comp]
                        + z[((r - 2) * n_y + kk) * k + comp])
                        / (2.0 * dt)
                } else if n_rows == 2 {
                    (z[(n_y + kk) * k + comp] - z[(kk) * k + comp]) / dt
                } else {
                    0.0
                };
                let mut val = z_s;
                for i in 0..d {
                    val += b[i] * z_grad[comp][kk * d + i];
                }
                for i in 0..d {
                    for j2 in 0..d {
                        let mut ssij = 0.0;
                        for lam in 0..k {
                            ssij += sg[i * k + lam] * sg[j2 * k + lam];
                        }
                        val += 0.5 * ssij * z_hess[comp][kk * d * d + i * d + j2];
                    }
                }
                a[(r * n_y + kk) * k + comp] = val;
            }
        }
    }

    NodeGrids { i_t, n_rows, n_y, k, u, z, gamma, a, gen }
}

/// Precomputed multilinear weights for one `(s, x)` evaluation point:
/// up to 2 rows x 4 lattice corners shared by every field lookup.
struct InterpPoint {
    rows: [usize; 2],
    row_w: [f64; 2],
    corners: [usize; 4],
    corner_w: [f64; 4],
    n_corners: usize,
}

impl NodeGrids {
    fn locate(&self, grid: &TriangleGrid, s: f64, x: &[f64]) -> InterpPoint {
        let dt = grid.dt();
        let t = grid.tau(self.i_t);
        let rho = ((s - t) / dt).clamp(0.0, (self.n_rows - 1) as f64);
        let r0 = rho.floor() as usize;
        let r1 = (r0 + 1).min(self.n_rows - 1);
        let ws = rho - r0 as f64;
        let dy = grid.dy();
        let nsp = grid.n_space as isize;
        let wrap = |i: isize| -> usize { (((i % nsp) + nsp) % nsp) as usize };
        match grid.d {
            1 => {
                let xi = x[0] / dy;
                let k0 = xi.floor() as isize;
                let wy = xi - k0 as f64;
                InterpPoint {
                    rows: [r0, r1],
                    row_w: [1.0 - ws, ws],
                    corners: [wrap(k0), wrap(k0 + 1), 0, 0],
                    corner_w: [1.0 - wy, wy, 0.0, 0.0],
                    n_corners: 2,
                }
            }
            _ => {
                let xi = x[0] / dy;
                let yi = x[1] / dy;
                let k0 = xi.floor() as isize;
                let l0 = yi.floor() as isize;
                let wx = xi - k0 as f64;
                let wy = yi - l0 as f64;
                let nsp_u = grid.n_space;
                InterpPoint {
                    rows: [r0, r1],
                    row_w: [1.0 - ws, ws],
                    corners: [
                        wrap(k0) + nsp_u * wrap(l0),
                        wrap(k0 + 1) + nsp_u * wrap(l0),
                        wrap(k0) + nsp_u * wrap(l0 + 1),
                        wrap(k0 + 1) + nsp_u * wrap(l0 + 1),
                    ],
                    corner_w: [
                        (1.0 - wx) * (1.0 - wy),
                        wx * (1.0 - wy),
                        (1.0 - wx) * wy,
                        wx * wy,
                    ],
                    n_corners: 4,
                }
            }
        }
    }

    #[inline]
    fn at(&self, data: &[f64], stride: usize, comp: usize, pt: &InterpPoint) -> f64 {
        let mut acc = 0.0;
        for (r, rw) in pt.rows.iter().zip(pt.row_w) {
            if rw == 0.0 {
                continue;
            }
            let base = r * self.n_y;
            let mut row_val = 0.0;
            for c in 0..pt.n_corners {
                row_val += pt.corner_w[c] * data[(base + pt.corners[c]) * stride + comp];
            }
            acc += rw * row_val;
        }
        acc
    }

    /// Bilinear interpolation in `(s, y)` (periodic in `y`) of a stored
    /// component family.
    fn interp(
        &self,
        grid: &TriangleGrid,
        data: &[f64],
        stride: usize,
        comp: usize,
        s: f64,
        x: &[f64],
    ) -> f64 {
        let pt = self.locate(grid, s, x);
        self.at(data, stride, comp, &pt)
    }
}

/// Path-sampled representation fields for selected backward t-nodes.
pub struct FKFields {
    pub t_nodes: Vec<usize>,
    /// Index of the first SDE step at or after each t-node.
    pub offsets: Vec<usize>,
    /// Per node: `n_paths * (n_steps + 1)` values (entries before the offset
    /// are zero).
    pub y: Vec<Vec<f64>>,
    /// Per node: `n_paths * (n_steps + 1) * k`.
    pub z: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
}

/// Samples `(Y, Z, Gamma, A)` along the paths at the given backward
/// t-nodes. Memory scales with `t_nodes x paths x steps`; for full residual
/// statistics prefer [`bsde_residual_stats`], which streams.
pub fn evaluate_fk_fields(
    field: &BackwardField,
    fp: &FlowProblem,
    paths: &PathBundle,
    t_nodes: &[usize],
) -> Result<FKFields> {
    let grid = *field.grid();
    if paths.dim != grid.d {
        return Err(Error::Argument("path dimension does not match the grid".into()));
    }
    let k = fp.k_noise;
    let mut out = FKFields {
        t_nodes: t_nodes.to_vec(),
        offsets: Vec::new(),
        y: Vec::new(),
        z: Vec::new(),
        gamma: Vec::new(),
        a: Vec::new(),
    };
    for &i_t in t_nodes {
        let grids = build_node_grids(field, fp, i_t);
        let t = grid.tau(i_t);
        let offset = ((t / paths.dt).ceil() as usize).min(paths.n_steps);
        let steps = paths.n_steps + 1;
        let mut y_vals = vec![0.0; paths.n_paths * steps];
        let mut z_vals = vec![0.0; paths.n_paths * steps * k];
        let mut g_vals = vec![0.0; paths.n_paths * steps * k * k];
        let mut a_vals = vec![0.0; paths.n_paths * steps * k];
        for path in 0..paths.n_paths {
            for m in offset..steps {
                let s = (m as f64 * paths.dt).min(paths.horizon);
                let x = paths.state(path, m);
                y_vals[path * steps + m] = grids.interp(&grid, &grids.u, 1, 0, s, x);
                for comp in 0..k {
                    z_vals[(path * steps + m) * k + comp] =
                        grids.interp(&grid, &grids.z, k, comp, s, x);
                    a_vals[(path * steps + m) * k + comp] =
                        grids.interp(&grid, &grids.a, k, comp, s, x);
                    for lam in 0..k {
                        g_vals[((path * steps + m) * k + comp) * k + lam] =
                            grids.interp(&grid, &grids.gamma, k * k, comp * k + lam, s, x);
                    }
                }
            }
        }
        out.offsets.push(offset);
        out.y.push(y_vals);
        out.z.push(z_vals);
        out.gamma.push(g_vals);
        out.a.push(a_vals);
    }
    Ok(out)
}

/// Residual statistics of one equation at one t-node.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualStats {
    pub t_index: usize,
    pub t: f64,
    pub mean: f64,
    pub std_error: f64,
    pub max_abs: f64,
    /// `|mean| / SE`; 0 when the residual is deterministic (SE = 0).
    pub mean_over_se: f64,
}

/// Residual report over all requested t-nodes, for both the `Y` and the `Z`
/// integral identities.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub n_paths: usize,
    pub n_steps: usize,
    pub y_equation: Vec<ResidualStats>,
    pub z_equation: Vec<ResidualStats>,
    pub max_y_mean_over_se: f64,
    pub max_z_mean_over_se: f64,
    pub max_y_abs: f64,
    pub max_z_abs: f64,
}

fn stats_from(
    t_index: usize,
    t: f64,
    residuals: &[f64],
) -> ResidualStats {
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let var = residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let se = (var / n).sqrt();
    let max_abs = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let mean_over_se = if se > 1e-300 { mean.abs() / se } else { 0.0 };
    ResidualStats { t_index, t, mean, std_error: se, max_abs, mean_over_se }
}

/// Optional per-path residual sink (used by the CLI dump flag).
pub type PathSink<'a> = Option<&'a mut dyn FnMut(usize, usize, f64, f64)>;

/// Streams both residual identities over every path and the requested
/// t-nodes, accumulating mean, standard error, and the worst `|mean|/SE`.
pub fn bsde_residual_stats(
    field: &BackwardField,
    fp: &FlowProblem,
    paths: &PathBundle,
    t_nodes: &[usize],
    mut per_path: PathSink,
) -> Result<ResidualReport> {
    let grid = *field.grid();
    if paths.dim != grid.d {
        return Err(Error::Argument("path dimension does not match the grid".into()));
    }
    if (paths.horizon - grid.horizon).abs() > 1e-9 * grid.horizon {
        return Err(Error::Argument("path horizon does not match the grid".into()));
    }
    let k = fp.k_noise;
    let mut y_stats = Vec::new();
    let mut z_stats = Vec::new();

    for &i_t in t_nodes {
        let grids = build_node_grids(field, fp, i_t);
        let t = grid.tau(i_t);
        // First SDE node at or after t; the identities are evaluated on
        // [s0, T] so that stochastic integrals start on the step grid.
        let m0 = ((t / paths.dt).ceil() as usize).min(paths.n_steps);
        let s0 = m0 as f64 * paths.dt;

        let mut y_res = Vec::with_capacity(paths.n_paths);
        let mut z_res = Vec::with_capacity(paths.n_paths);
        for path in 0..paths.n_paths {
            // Trapezoid weights over SDE nodes m0..n_steps, left-point for
            // the stochastic integrals.
            let mut int_gen = 0.0;
            let mut int_z_dw = 0.0;
            let mut int_a = vec![0.0; k];
            let mut int_gamma_dw = vec![0.0; k];
            let mut prev_gen = 0.0;
            let mut prev_a = vec![0.0; k];
            let mut a_val = vec![0.0; k];
            for m in m0..=paths.n_steps {
                let s = (m as f64 * paths.dt).min(paths.horizon);
                let x = paths.state(path, m);
                let pt = grids.locate(&grid, s, x);
                let gen_val = grids.at(&grids.gen, 1, 0, &pt);
                for c in 0..k {
                    a_val[c] = grids.at(&grids.a, k, c, &pt);
                }
                if m > m0 {
                    int_gen += 0.5 * paths.dt * (prev_gen + gen_val);
                    for c in 0..k {
                        int_a[c] += 0.5 * paths.dt * (prev_a[c] + a_val[c]);
                    }
                }
                if m < paths.n_steps {
                    let dw = paths.increment(path, m);
                    for c in 0..k {
                        let z_c = grids.at(&grids.z, k, c, &pt);
                        int_z_dw += z_c * dw[c];
                        for lam in 0..k {
                            int_gamma_dw[c] +=
                                grids.at(&grids.gamma, k * k, c * k + lam, &pt) * dw[lam];
                        }
                    }
                }
                prev_gen = gen_val;
                std::mem::swap(&mut prev_a, &mut a_val);
            }

            let x0 = paths.state(path, m0);
            let x_end = paths.state(path, paths.n_steps);
            let y_start = grids.interp(&grid, &grids.u, 1, 0, s0, x0);
            let g_term = (fp.terminal)(t, x_end);
            // Y(t,s0) - g(t,X_T) + int F + int Z dW = 0.
            let r_y = y_start - g_term + int_gen + int_z_dw;

            // Z(t,T) - Z(t,s0) - int A - int Gamma dW = 0 (worst component).
            let mut r_z = 0.0f64;
            for c in 0..k {
                let z_end =
                    grids.interp(&grid, &grids.z, k, c, paths.horizon, x_end);
                let z_start = grids.interp(&grid, &grids.z, k, c, s0, x0);
                let res = z_end - z_start - int_a[c] - int_gamma_dw[c];
                if res.abs() > r_z.abs() {
                    r_z = res;
                }
            }
            if let Some(sink) = per_path.as_deref_mut() {
                sink(i_t, path, r_y, r_z);
            }
            y_res.push(r_y);
            z_res.push(r_z);
        }
        y_stats.push(stats_from(i_t, t, &y_res));
        z_stats.push(stats_from(i_t, t, &z_res));
    }

    let max_y = y_stats.iter().fold(0.0f64, |m, s| m.max(s.mean_over_se));
    let max_z = z_stats.iter().fold(0.0f64, |m, s| m.max(s.mean_over_se));
    let max_y_abs = y_stats.iter().fold(0.0f64, |m, s| m.max(s.max_abs));
    let max_z_abs = z_stats.iter().fold(0.0f64, |m, s| m.max(s.max_abs));
    Ok(ResidualReport {
        n_paths: paths.n_paths,
        n_steps: paths.n_steps,
        y_equation: y_stats,
        z_equation: z_stats,
        max_y_mean_over_se: max_y,
        max_z_mean_over_se: max_z,
        max_y_abs,
        max_z_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use std::f64::consts::PI;

    fn const_drift(v: f64) -> SdeDriftFn {
        Arc::new(move |_, _| vec![v])
    }

    fn const_vol(v: f64) -> SdeVolFn {
        Arc::new(move |_, _| vec![v])
    }

    #[test]
    fn deterministic_paths() {
        let b = const_drift(0.0);
        let s = const_vol(0.0);
        let paths = simulate_forward(&b, &s, &[2.5], 1.0, 8, 16, 1, 7).unwrap();
        for p in 0..8 {
            for m in 0..=16 {
                assert_eq!(paths.state(p, m)[0], 2.5);
            }
        }

        let b = const_drift(1.0);
        let paths = simulate_forward(&b, &s, &[1.0], 1.0, 4, 32, 1, 7).unwrap();
        for p in 0..4 {
            assert!((paths.state(p, 32)[0] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn brownian_variance_matches_horizon() {
        let b = const_drift(0.0);
        let s = const_vol(1.0);
        let paths = simulate_forward(&b, &s, &[0.0], 1.0, 10_000, 64, 1, 42).unwrap();
        let end: Vec<f64> = (0..paths.n_paths).map(|p| paths.state(p, 64)[0]).collect();
        let mean = end.iter().sum::<f64>() / end.len() as f64;
        let var = end.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
            / (end.len() - 1) as f64;
        // Var[X_T] = T = 1 within 5 standard errors of the variance.
        let se_var = (2.0_f64 * var * var / end.len() as f64).sqrt();
        assert!(
            (var - 1.0).abs() <= 5.0 * se_var,
            "sample variance {var} (se {se_var})"
        );

        // Increment moments: mean ~ 0 and variance ~ dt within 5 SE.
        for (mean, se_mean, var, se_var) in paths.increment_moments() {
            assert!(mean.abs() <= 5.0 * se_mean);
            assert!((var - paths.dt).abs() <= 5.0 * se_var);
        }
    }

    #[test]
    fn seed_determinism_is_bitwise() {
        let b = const_drift(0.3);
        let s = const_vol(0.7);
        let p1 = simulate_forward(&b, &s, &[1.0], 1.0, 16, 32, 1, 99).unwrap();
        let p2 = simulate_forward(&b, &s, &[1.0], 1.0, 16, 32, 1, 99).unwrap();
        assert_eq!(p1.states, p2.states);
        assert_eq!(p1.increments, p2.increments);
        let p3 = simulate_forward(&b, &s, &[1.0], 1.0, 16, 32, 1, 100).unwrap();
        assert_ne!(p1.states, p3.states);
    }

    #[test]
    fn blow_up_is_reported_with_step() {
        let b: SdeDriftFn = Arc::new(|_, x: &[f64]| vec![x[0] * x[0] * 1e6]);
        let s = const_vol(0.0);
        let err = match simulate_forward(&b, &s, &[10.0], 1.0, 1, 64, 1, 1) {
            Err(e) => e,
            Ok(_) => panic!("blow-up went undetected"),
        };
        assert!(err.to_string().contains("step"), "{err}");
    }

    /// Backward field u(t,s,y) = exp(-(T-s)) sin(y): heat flow in reversed
    /// time, independent of t.
    fn heat_backward(grid: &TriangleGrid) -> BackwardField {
        let t_max = grid.horizon;
        BackwardField {
            forward: TriField::from_fn(*grid, |_, s_fwd, y| {
                // forward(t', s', y) = u_b(T - t', T - s', y) and
                // u_b(t, s, y) = exp(-(T - s)) sin(y) = exp(-s') sin(y).
                let _ = t_max;
                (-s_fwd).exp() * y[0].sin()
            }),
        }
    }

    fn heat_flow_problem() -> FlowProblem {
        // u_b solves u_s = -u_yy backward; with sigma = sqrt(2), b = 0 the
        // generator F + 1/2 sigma^2 u_yy + b u_y collapses to -q + q = 0.
        FlowProblem {
            d: 1,
            k_noise: 1,
            f_backward: Arc::new(|a: &FArgs| -a.q[0]),
            drift: Arc::new(|_, _| vec![0.0]),
            vol: Arc::new(|_, _| vec![std::f64::consts::SQRT_2]),
            terminal: Arc::new(|_, y: &[f64]| y[0].sin()),
        }
    }

    #[test]
    fn zero_vol_means_zero_z() {
        let grid = build_grid(9, 1, 32, 1.0, 2.0 * PI).unwrap();
        let field = heat_backward(&grid);
        let mut fp = heat_flow_problem();
        fp.vol = Arc::new(|_, _| vec![0.0]);
        let b = const_drift(0.0);
        let paths = simulate_forward(&b, &fp.vol.clone(), &[1.0], 1.0, 4, 16, 1, 3).unwrap();
        let fields = evaluate_fk_fields(&field, &fp, &paths, &[0, 4]).unwrap();
        for z in &fields.z {
            assert!(z.iter().all(|v| *v == 0.0));
        }
        for g in &fields.gamma {
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn spatially_constant_field_means_zero_z() {
        let grid = build_grid(7, 1, 16, 1.0, 2.0 * PI).unwrap();
        let field = BackwardField {
            forward: TriField::from_fn(grid, |_, s, _| 1.0 + s),
        };
        let fp = heat_flow_problem();
        let paths =
            simulate_forward(&fp.drift.clone(), &fp.vol.clone(), &[1.0], 1.0, 4, 16, 1, 3)
                .unwrap();
        let fields = evaluate_fk_fields(&field, &fp, &paths, &[0, 3]).unwrap();
        for z in &fields.z {
            assert!(z.iter().all(|v| v.abs() < 1e-13));
        }
    }

    #[test]
    fn y_is_a_martingale_for_the_heat_generator() {
        // With sigma = sqrt(2) matching the generator, Y(t, .) along paths
        // is a martingale: E[Y(t,T) - Y(t,t)] ~ 0 within 3 SE.
        let grid = build_grid(17, 1, 64, 1.0, 2.0 * PI).unwrap();
        let field = heat_backward(&grid);
        let fp = heat_flow_problem();
        let paths =
            simulate_forward(&fp.drift.clone(), &fp.vol.clone(), &[PI / 2.0], 1.0, 4000, 128, 1, 11)
                .unwrap();
        let fields = evaluate_fk_fields(&field, &fp, &paths, &[0]).unwrap();
        let steps = paths.n_steps + 1;
        let diffs: Vec<f64> = (0..paths.n_paths)
            .map(|p| fields.y[0][p * steps + paths.n_steps] - fields.y[0][p * steps])
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!(
            mean.abs() <= 3.0 * se + 5e-3,
            "martingale drift {mean} vs se {se}"
        );
    }

    #[test]
    fn deterministic_residual_is_quadrature_error() {
        // sigma = 0, b = 0: X stays put and the residual is deterministic,
        // a pure discretization bias O(dt^2 + dy^2) of the grid fields;
        // halving both spacings must shrink it by >= 1.8.
        let run = |n_time: usize, n_space: usize| -> f64 {
            let grid = build_grid(n_time, 1, n_space, 1.0, 2.0 * PI).unwrap();
            let field = heat_backward(&grid);
            let mut fp = heat_flow_problem();
            fp.vol = Arc::new(|_, _| vec![0.0]);
            let paths = simulate_forward(
                &fp.drift.clone(),
                &fp.vol.clone(),
                &[1.2],
                1.0,
                2,
                128,
                1,
                5,
            )
            .unwrap();
            let rep = bsde_residual_stats(&field, &fp, &paths, &[0, 2], None).unwrap();
            rep.max_y_abs
        };
        let coarse = run(9, 32);
        let fine = run(17, 64);
        assert!(
            coarse / fine >= 1.8,
            "deterministic residual did not decay: {coarse} -> {fine}"
        );
    }

    #[test]
    fn heat_problem_residuals_within_three_se() {
        let grid = build_grid(17, 1, 64, 1.0, 2.0 * PI).unwrap();
        let field = heat_backward(&grid);
        let fp = heat_flow_problem();
        let paths = simulate_forward(
            &fp.drift.clone(),
            &fp.vol.clone(),
            &[PI / 2.0],
            1.0,
            2000,
            128,
            1,
            17,
        )
        .unwrap();
        let nodes: Vec<usize> = (0..grid.n_time).step_by(4).collect();
        let rep = bsde_residual_stats(&field, &fp, &paths, &nodes, None).unwrap();
        // Discretization bias scales with dt + dy^2 of the field grid; the
        // statistical test allows for it through the 3 SE + bias envelope.
        for st in rep.y_equation.iter().chain(rep.z_equation.iter()) {
            assert!(
                st.mean.abs() <= 3.0 * st.std_error + 2e-2,
                "t-node {}: mean {} se {}",
                st.t_index,
                st.mean,
                st.std_error
            );
        }
    }

    #[test]
    fn lipschitz_diagnostic_reports_constants() {
        let b: SdeDriftFn = Arc::new(|_, x: &[f64]| vec![2.0 * x[0]]);
        let s = const_vol(1.0);
        let paths = simulate_forward(&b, &s, &[1.0], 1.0, 32, 64, 1, 9).unwrap();
        let (lip_b, lip_s) = lipschitz_diagnostic(&paths, &b, &s);
        assert!((lip_b - 2.0).abs() < 1e-9);
        assert!(lip_s.abs() < 1e-12);
    }
}
