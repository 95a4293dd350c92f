//! Triangular space-time grid and field storage.
//!
//! Solutions live on the triangle `0 <= s <= t <= T`: `t` and `s` share one
//! uniform node set and the triangle is the index restriction `j <= i`, so the
//! diagonal `t = s` always lies exactly on nodes. The spatial domain is the
//! periodic torus `[0, L)^d` (d = 1 or 2), which keeps stencils and Hölder
//! seminorms free of artificial boundaries.

use crate::error::{Error, Result};

/// Uniform discretization of the triangle `{0 <= s <= t <= T}` times a
/// periodic lattice on `[0, L)^d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleGrid {
    /// Number of shared t/s nodes; nodes are `tau_i = i * dt`.
    pub n_time: usize,
    /// Spatial dimension, 1 or 2.
    pub d: usize,
    /// Nodes per spatial axis.
    pub n_space: usize,
    /// Final time `T`.
    pub horizon: f64,
    /// Spatial period `L`.
    pub period: f64,
}

/// Builds a grid, validating every precondition.
pub fn build_grid(
    n_time: usize,
    d: usize,
    n_space: usize,
    horizon: f64,
    period: f64,
) -> Result<TriangleGrid> {
    if n_time < 2 {
        return Err(Error::Config(format!("n_time must be >= 2, got {n_time}")));
    }
    if d != 1 && d != 2 {
        return Err(Error::Config(format!("spatial dimension must be 1 or 2, got {d}")));
    }
    if n_space < 4 {
        return Err(Error::Config(format!("n_space must be >= 4, got {n_space}")));
    }
    if !(horizon > 0.0) {
        return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
    }
    if !(period > 0.0) {
        return Err(Error::Config(format!("period must be positive, got {period}")));
    }
    Ok(TriangleGrid { n_time, d, n_space, horizon, period })
}

impl TriangleGrid {
    /// Time spacing `dt = T / (n_time - 1)`.
    pub fn dt(&self) -> f64 {
        self.horizon / (self.n_time - 1) as f64
    }

    /// Spatial spacing `dy = L / n_space`.
    pub fn dy(&self) -> f64 {
        self.period / self.n_space as f64
    }

    /// Time node `tau_i`.
    pub fn tau(&self, i: usize) -> f64 {
        self.dt() * i as f64
    }

    /// Total number of lattice points, `n_space^d`.
    pub fn spatial_len(&self) -> usize {
        self.n_space.pow(self.d as u32)
    }

    /// Coordinates of the lattice point with flat index `k`.
    pub fn point(&self, k: usize) -> Vec<f64> {
        let dy = self.dy();
        match self.d {
            1 => vec![k as f64 * dy],
            _ => vec![(k % self.n_space) as f64 * dy, (k / self.n_space) as f64 * dy],
        }
    }

    /// Flat index from per-axis indices (periodic wrap applied).
    pub fn flat(&self, axes: &[isize]) -> usize {
        let n = self.n_space as isize;
        let wrap = |i: isize| -> usize { (((i % n) + n) % n) as usize };
        match self.d {
            1 => wrap(axes[0]),
            _ => wrap(axes[0]) + self.n_space * wrap(axes[1]),
        }
    }

    /// Per-axis indices of a flat lattice index.
    pub fn axes(&self, k: usize) -> [usize; 2] {
        match self.d {
            1 => [k, 0],
            _ => [k % self.n_space, k / self.n_space],
        }
    }

    /// Shortest (wrapped) distance between two lattice points.
    pub fn periodic_distance(&self, k_a: usize, k_b: usize) -> f64 {
        let dy = self.dy();
        let a = self.axes(k_a);
        let b = self.axes(k_b);
        let mut sq = 0.0;
        for ax in 0..self.d {
            let raw = (a[ax] as f64 - b[ax] as f64).abs() * dy;
            let w = raw.min(self.period - raw);
            sq += w * w;
        }
        sq.sqrt()
    }

    fn tri_offset(&self, i_t: usize) -> usize {
        i_t * (i_t + 1) / 2 * self.spatial_len()
    }

    fn tri_len(&self) -> usize {
        self.n_time * (self.n_time + 1) / 2 * self.spatial_len()
    }
}

/// Samples `u(t_i, s_j, y_k)` for `j <= i`; the fundamental unknown container.
///
/// Storage is triangular: slice `i_t` holds rows `i_s = 0..=i_t`, each row a
/// full lattice. A published field is immutable; concurrent reads are safe.
#[derive(Debug, Clone, PartialEq)]
pub struct TriField {
    pub grid: TriangleGrid,
    values: Vec<f64>,
}

impl TriField {
    pub fn zeros(grid: TriangleGrid) -> Self {
        TriField { grid, values: vec![0.0; grid.tri_len()] }
    }

    /// Samples a closure `(t, s, y) -> f64` on every triangle node.
    pub fn from_fn<F: Fn(f64, f64, &[f64]) -> f64>(grid: TriangleGrid, f: F) -> Self {
        let mut field = TriField::zeros(grid);
        for i_t in 0..grid.n_time {
            let t = grid.tau(i_t);
            for i_s in 0..=i_t {
                let s = grid.tau(i_s);
                for k in 0..grid.spatial_len() {
                    field.set(i_t, i_s, k, f(t, s, &grid.point(k)));
                }
            }
        }
        field
    }

    #[inline]
    fn index(&self, i_t: usize, i_s: usize, k: usize) -> usize {
        assert!(
            i_s <= i_t && i_t < self.grid.n_time && k < self.grid.spatial_len(),
            "triangle index out of range: i_t={i_t}, i_s={i_s}, k={k}"
        );
        self.grid.tri_offset(i_t) + i_s * self.grid.spatial_len() + k
    }

    #[inline]
    pub fn get(&self, i_t: usize, i_s: usize, k: usize) -> f64 {
        self.values[self.index(i_t, i_s, k)]
    }

    #[inline]
    pub fn set(&mut self, i_t: usize, i_s: usize, k: usize, value: f64) {
        let idx = self.index(i_t, i_s, k);
        self.values[idx] = value;
    }

    /// Row `u(t_i, s_j, .)` as a lattice slice.
    pub fn row(&self, i_t: usize, i_s: usize) -> &[f64] {
        let start = self.index(i_t, i_s, 0);
        &self.values[start..start + self.grid.spatial_len()]
    }

    pub fn set_row(&mut self, i_t: usize, i_s: usize, row: &[f64]) {
        let start = self.index(i_t, i_s, 0);
        self.values[start..start + self.grid.spatial_len()].copy_from_slice(row);
    }

    /// All rows `s = 0..=i_t` of one t-slice, contiguous.
    pub fn slice(&self, i_t: usize) -> &[f64] {
        let start = self.grid.tri_offset(i_t);
        &self.values[start..start + (i_t + 1) * self.grid.spatial_len()]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Node-wise `self - other` (shared grid required).
    pub fn sub(&self, other: &TriField) -> Result<TriField> {
        if self.grid != other.grid {
            return Err(Error::Argument("grid mismatch in field subtraction".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(TriField { grid: self.grid, values })
    }

    pub fn max_abs_diff(&self, other: &TriField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Samples of a diagonal-restricted function `phi(s, s, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagField {
    pub grid: TriangleGrid,
    values: Vec<f64>,
}

impl DiagField {
    pub fn zeros(grid: TriangleGrid) -> Self {
        DiagField { grid, values: vec![0.0; grid.n_time * grid.spatial_len()] }
    }

    pub fn from_fn<F: Fn(f64, &[f64]) -> f64>(grid: TriangleGrid, f: F) -> Self {
        let mut field = DiagField::zeros(grid);
        for i_s in 0..grid.n_time {
            let s = grid.tau(i_s);
            for k in 0..grid.spatial_len() {
                field.set(i_s, k, f(s, &grid.point(k)));
            }
        }
        field
    }

    #[inline]
    pub fn get(&self, i_s: usize, k: usize) -> f64 {
        self.values[i_s * self.grid.spatial_len() + k]
    }

    #[inline]
    pub fn set(&mut self, i_s: usize, k: usize, value: f64) {
        self.values[i_s * self.grid.spatial_len() + k] = value;
    }

    pub fn row(&self, i_s: usize) -> &[f64] {
        let n = self.grid.spatial_len();
        &self.values[i_s * n..(i_s + 1) * n]
    }

    pub fn set_row(&mut self, i_s: usize, row: &[f64]) {
        let n = self.grid.spatial_len();
        self.values[i_s * n..(i_s + 1) * n].copy_from_slice(row);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Restriction to the diagonal: `out(s, y) = u(s, s, y)`.
pub fn restrict_diagonal(u: &TriField) -> DiagField {
    let mut out = DiagField::zeros(u.grid);
    for i_s in 0..u.grid.n_time {
        out.set_row(i_s, u.row(i_s, i_s));
    }
    out
}

/// Per-axis gradient of one lattice row, second-order central differences
/// with periodic wraparound. Returns `d` rows.
pub fn gradient_row(row: &[f64], grid: &TriangleGrid) -> Vec<Vec<f64>> {
    let n = grid.n_space as isize;
    let two_dy = 2.0 * grid.dy();
    let mut out = vec![vec![0.0; row.len()]; grid.d];
    for k in 0..row.len() {
        let ax = grid.axes(k);
        for axis in 0..grid.d {
            let mut hi = [ax[0] as isize, ax[1] as isize];
            let mut lo = hi;
            hi[axis] += 1;
            lo[axis] -= 1;
            let (kp, km) = match grid.d {
                1 => (grid.flat(&hi[..1]), grid.flat(&lo[..1])),
                _ => (grid.flat(&hi), grid.flat(&lo)),
            };
            out[axis][k] = (row[kp] - row[km]) / two_dy;
        }
        let _ = n;
    }
    out
}

/// Hessian of one lattice row as `d*d` rows (row-major over axis pairs).
/// Pure second derivatives use the 3-point stencil, mixed ones the 4-point
/// cross stencil; the result is symmetric by construction.
pub fn hessian_row(row: &[f64], grid: &TriangleGrid) -> Vec<Vec<f64>> {
    let dy2 = grid.dy() * grid.dy();
    let d = grid.d;
    let mut out = vec![vec![0.0; row.len()]; d * d];
    for k in 0..row.len() {
        let ax = grid.axes(k);
        for i in 0..d {
            for j in i..d {
                let val = if i == j {
                    let mut hi = [ax[0] as isize, ax[1] as isize];
                    let mut lo = hi;
                    hi[i] += 1;
                    lo[i] -= 1;
                    let (kp, km) = match d {
                        1 => (grid.flat(&hi[..1]), grid.flat(&lo[..1])),
                        _ => (grid.flat(&hi), grid.flat(&lo)),
                    };
                    (row[kp] - 2.0 * row[k] + row[km]) / dy2
                } else {
                    let base = [ax[0] as isize, ax[1] as isize];
                    let mut pp = base;
                    let mut pm = base;
                    let mut mp = base;
                    let mut mm = base;
                    pp[i] += 1;
                    pp[j] += 1;
                    pm[i] += 1;
                    pm[j] -= 1;
                    mp[i] -= 1;
                    mp[j] += 1;
                    mm[i] -= 1;
                    mm[j] -= 1;
                    (row[grid.flat(&pp)] - row[grid.flat(&pm)] - row[grid.flat(&mp)]
                        + row[grid.flat(&mm)])
                        / (4.0 * dy2)
                };
                out[i * d + j][k] = val;
                if i != j {
                    out[j * d + i][k] = val;
                }
            }
        }
    }
    out
}

/// First and second spatial derivatives of a diagonal field.
/// Differentiating the restriction equals restricting the derivative here,
/// since both read the same lattice values.
pub fn diag_derivatives(phi: &DiagField) -> (Vec<DiagField>, Vec<DiagField>) {
    let grid = phi.grid;
    let d = grid.d;
    let mut grad = vec![DiagField::zeros(grid); d];
    let mut hess = vec![DiagField::zeros(grid); d * d];
    for i_s in 0..grid.n_time {
        let g = gradient_row(phi.row(i_s), &grid);
        let h = hessian_row(phi.row(i_s), &grid);
        for axis in 0..d {
            grad[axis].set_row(i_s, &g[axis]);
        }
        for pair in 0..d * d {
            hess[pair].set_row(i_s, &h[pair]);
        }
    }
    (grad, hess)
}

/// Composite trapezoid approximation of `∫_s^t v(theta, s, y) dtheta` over
/// the nodes `theta = tau_{i_s}, ..., tau_{i_t}`. Zero when `i_s == i_t`.
pub fn integrate_t_segment(v: &TriField, i_t: usize, i_s: usize, k: usize) -> Result<f64> {
    if i_s > i_t {
        return Err(Error::Index(format!(
            "integrate_t_segment requires i_s <= i_t, got i_s={i_s}, i_t={i_t}"
        )));
    }
    let dt = v.grid.dt();
    let mut acc = 0.0;
    for th in i_s..i_t {
        acc += 0.5 * dt * (v.get(th, i_s, k) + v.get(th + 1, i_s, k));
    }
    Ok(acc)
}

/// Trapezoid values of `∫_{s_j}^{t_i} v(theta, s_j, .) dtheta` for one row,
/// as a lattice vector. Used by the contraction map's source assembly.
pub fn integrate_row(v: &TriField, i_t: usize, i_s: usize) -> Vec<f64> {
    let n = v.grid.spatial_len();
    let dt = v.grid.dt();
    let mut acc = vec![0.0; n];
    for th in i_s..i_t {
        let lo = v.row(th, i_s);
        let hi = v.row(th + 1, i_s);
        for k in 0..n {
            acc[k] += 0.5 * dt * (lo[k] + hi[k]);
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_grid(n_time: usize, n_space: usize) -> TriangleGrid {
        build_grid(n_time, 1, n_space, 1.0, 1.0).unwrap()
    }

    #[test]
    fn build_grid_spacings() {
        let g = build_grid(2, 1, 4, 1.0, 1.0).unwrap();
        assert_eq!(g.dt(), 1.0);
        assert_eq!(g.dy(), 0.25);

        let g = build_grid(11, 1, 8, 1.0, 6.2831853).unwrap();
        assert!((g.dt() - 0.1).abs() < 1e-15);
        assert!((g.dy() - 0.7853981625).abs() < 1e-9);
    }

    #[test]
    fn build_grid_rejects_bad_arguments() {
        assert!(matches!(build_grid(1, 1, 4, 1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(build_grid(4, 3, 4, 1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(build_grid(4, 1, 3, 1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(build_grid(4, 1, 4, 0.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(build_grid(4, 1, 4, 1.0, -2.0), Err(Error::Config(_))));
    }

    #[test]
    fn diagonal_restriction_substitutes_t_equals_s() {
        let g = unit_grid(5, 4);
        let u = TriField::from_fn(g, |t, s, _| t + s);
        let diag = restrict_diagonal(&u);
        for i_s in 0..g.n_time {
            for k in 0..g.spatial_len() {
                assert!((diag.get(i_s, k) - 2.0 * g.tau(i_s)).abs() < 1e-15);
            }
        }

        let u = TriField::from_fn(g, |t, _, y| t * y[0]);
        let diag = restrict_diagonal(&u);
        for i_s in 0..g.n_time {
            for k in 0..g.spatial_len() {
                assert!((diag.get(i_s, k) - g.tau(i_s) * g.point(k)[0]).abs() < 1e-15);
            }
        }

        let u = TriField::from_fn(g, |_, _, _| 7.0);
        let diag = restrict_diagonal(&u);
        for i_s in 0..g.n_time {
            for k in 0..g.spatial_len() {
                assert_eq!(diag.get(i_s, k), 7.0);
            }
        }
    }

    #[test]
    fn restriction_of_t_independent_field_is_identity_on_s_slice() {
        let g = unit_grid(6, 8);
        let shape = |s: f64, y: &[f64]| (2.0 * std::f64::consts::PI * y[0]).sin() + s;
        let u = TriField::from_fn(g, |_, s, y| shape(s, y));
        let diag = restrict_diagonal(&u);
        for i_s in 0..g.n_time {
            for k in 0..g.spatial_len() {
                assert_eq!(diag.get(i_s, k), shape(g.tau(i_s), &g.point(k)));
            }
        }
    }

    #[test]
    fn diag_derivatives_on_trig_fields() {
        let g = build_grid(3, 1, 64, 1.0, 2.0 * std::f64::consts::PI).unwrap();
        let dy = g.dy();

        let phi = DiagField::from_fn(g, |_, y| y[0].sin());
        let (grad, _) = diag_derivatives(&phi);
        let mut worst = 0.0f64;
        for i_s in 0..g.n_time {
            for k in 0..g.spatial_len() {
                worst = worst.max((grad[0].get(i_s, k) - g.point(k)[0].cos()).abs());
            }
        }
        assert!(worst <= dy * dy, "gradient error {worst} vs dy^2 {}", dy * dy);

        let phi = DiagField::from_fn(g, |_, y| y[0].cos());
        let (_, hess) = diag_derivatives(&phi);
        let mut worst = 0.0f64;
        for i_s in 0..g.n_time {
            for k in 0..g.spatial_len() {
                worst = worst.max((hess[0].get(i_s, k) + g.point(k)[0].cos()).abs());
            }
        }
        assert!(worst <= dy * dy, "hessian error {worst} vs dy^2 {}", dy * dy);

        let phi = DiagField::from_fn(g, |_, _| 3.25);
        let (grad, hess) = diag_derivatives(&phi);
        for i_s in 0..g.n_time {
            for k in 0..g.spatial_len() {
                assert_eq!(grad[0].get(i_s, k), 0.0);
                assert_eq!(hess[0].get(i_s, k), 0.0);
            }
        }
    }

    #[test]
    fn hessian_symmetric_in_two_dimensions() {
        let g = build_grid(3, 2, 16, 1.0, 1.0).unwrap();
        let tau = 2.0 * std::f64::consts::PI;
        let phi = DiagField::from_fn(g, |_, y| (tau * y[0]).sin() * (tau * y[1]).cos());
        let (_, hess) = diag_derivatives(&phi);
        for i_s in 0..g.n_time {
            for k in 0..g.spatial_len() {
                assert_eq!(hess[1].get(i_s, k), hess[2].get(i_s, k));
            }
        }
    }

    #[test]
    fn integrate_t_segment_examples() {
        let g = unit_grid(5, 4);
        let ones = TriField::from_fn(g, |_, _, _| 1.0);
        // t = 0.5 is node 2, s = 0.25 is node 1.
        assert!((integrate_t_segment(&ones, 2, 1, 0).unwrap() - 0.25).abs() < 1e-15);

        let lin = TriField::from_fn(g, |t, _, _| t);
        assert!((integrate_t_segment(&lin, 4, 0, 0).unwrap() - 0.5).abs() < 1e-15);

        let zero = TriField::zeros(g);
        assert_eq!(integrate_t_segment(&zero, 3, 1, 2).unwrap(), 0.0);
        assert_eq!(integrate_t_segment(&ones, 2, 2, 0).unwrap(), 0.0);

        assert!(matches!(integrate_t_segment(&ones, 1, 3, 0), Err(Error::Index(_))));
    }

    #[test]
    fn integrate_t_segment_second_order_in_dt() {
        // Against the analytic antiderivative of exp on [s, t].
        let exact = |s: f64, t: f64| t.exp() - s.exp();
        let mut errors = Vec::new();
        for n_time in [5usize, 9, 17] {
            let g = unit_grid(n_time, 4);
            let v = TriField::from_fn(g, |t, _, _| t.exp());
            let i_t = n_time - 1;
            let err = (integrate_t_segment(&v, i_t, 0, 0).unwrap() - exact(0.0, 1.0)).abs();
            errors.push(err);
        }
        assert!(errors[0] / errors[1] > 3.0);
        assert!(errors[1] / errors[2] > 3.0);
    }

    proptest! {
        #[test]
        fn integration_is_additive_across_a_midpoint(
            n_time in 3usize..8,
            split in 0usize..6,
        ) {
            let g = unit_grid(n_time, 4);
            let v = TriField::from_fn(g, |t, s, y| (t * 1.3).sin() + s + y[0]);
            let i_t = n_time - 1;
            let i_m = split.min(i_t);
            let full = integrate_t_segment(&v, i_t, 0, 1).unwrap();
            // Quadrature over [m, t] of the same row (second index stays 0).
            let dt = g.dt();
            let mut tail = 0.0;
            for th in i_m..i_t {
                tail += 0.5 * dt * (v.get(th, 0, 1) + v.get(th + 1, 0, 1));
            }
            let head = {
                let mut acc = 0.0;
                for th in 0..i_m {
                    acc += 0.5 * dt * (v.get(th, 0, 1) + v.get(th + 1, 0, 1));
                }
                acc
            };
            prop_assert!((full - (head + tail)).abs() < 1e-12);
        }
    }
}
