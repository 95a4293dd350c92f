//! Discrete parabolic Hölder norms on triangular fields.
//!
//! A slice is one external-time level `u(t_i, ., .)` viewed as a rectangle
//! `[0, t_i] x lattice`. Slice norms combine a sup norm with seminorms of
//! exponent `alpha/2` in `s` and `alpha` in `y`; the `2+alpha` variant adds
//! first-derivative sups and `alpha`-norms of `phi_s` and `phi_{y_i y_j}`.
//! Triangle norms take the sup of slice norms over `t` (`bracket`), the
//! double-bracket variant adding the `u_t` slice.
//!
//! Norms here are monitors, not solution components: seminorm pairs are
//! enumerated exhaustively by default, with optional uniform random
//! subsampling (`pair_budget`) for large grids, flagged in the report.

use crate::error::{Error, Result};
use crate::grid::{gradient_row, hessian_row, TriangleGrid, TriField};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Hölder exponent and seminorm sampling policy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HolderConfig {
    /// Exponent in (0, 1).
    pub alpha: f64,
    /// Cap on sampled index pairs per seminorm per slice; 0 = exhaustive.
    pub pair_budget: usize,
    /// Seed for pair subsampling (only used when `pair_budget > 0`).
    pub seed: u64,
}

impl Default for HolderConfig {
    fn default() -> Self {
        HolderConfig { alpha: 0.5, pair_budget: 0, seed: 0 }
    }
}

impl HolderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Which slice norm a triangle norm aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormOrder {
    /// `|.|^(alpha)`: sup + both seminorms.
    Alpha,
    /// `|.|^(2+alpha)`: adds derivative terms.
    TwoPlusAlpha,
}

/// Norm evaluation results. Entries not touched by an operation stay 0.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct NormReport {
    pub sup: f64,
    /// Seminorm of exponent alpha/2 in s.
    pub semi_s: f64,
    /// Seminorm of exponent alpha in y.
    pub semi_y: f64,
    /// sup + semi_s + semi_y.
    pub c_alpha: f64,
    /// The 2+alpha slice norm, when derivative slices were available.
    pub c_2alpha: f64,
    /// sup over t of slice norms.
    pub bracket: f64,
    /// sup over t of (slice norm of u + slice norm of u_t).
    pub double_bracket: f64,
    /// True when seminorm pairs were subsampled rather than enumerated.
    pub subsampled: bool,
}

/// Distance convention for the spatial seminorm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceMetric {
    /// Wrapped distance on the torus (the solver's convention).
    Periodic,
    /// Plain distance; useful for standalone rectangular slices.
    Euclidean,
}

/// A rectangular `[0, t] x lattice` sample owned by the caller.
#[derive(Debug, Clone)]
pub struct SliceField {
    pub data: Vec<f64>,
    pub n_rows: usize,
    /// Time spacing between consecutive rows.
    pub dt: f64,
    pub d: usize,
    pub n_space: usize,
    pub dy: f64,
    pub period: f64,
    pub metric: SpaceMetric,
}

impl SliceField {
    pub fn n_y(&self) -> usize {
        self.n_space.pow(self.d as u32)
    }

    #[inline]
    pub fn at(&self, row: usize, k: usize) -> f64 {
        self.data[row * self.n_y() + k]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.n_y();
        &self.data[row * n..(row + 1) * n]
    }

    /// Rows `i_s = lo..=i_t` of one t-slice of a triangular field.
    pub fn from_tri_slice(u: &TriField, i_t: usize, lo: usize) -> Self {
        let g = u.grid;
        let n = g.spatial_len();
        let mut data = Vec::with_capacity((i_t + 1 - lo) * n);
        for i_s in lo..=i_t {
            data.extend_from_slice(u.row(i_t, i_s));
        }
        SliceField {
            data,
            n_rows: i_t + 1 - lo,
            dt: g.dt(),
            d: g.d,
            n_space: g.n_space,
            dy: g.dy(),
            period: g.period,
            metric: SpaceMetric::Periodic,
        }
    }

    /// A single-row slice from a lattice sample (e.g. initial data `g(t,.)`).
    pub fn single_row(row: Vec<f64>, grid: &TriangleGrid) -> Self {
        SliceField {
            data: row,
            n_rows: 1,
            dt: grid.dt(),
            d: grid.d,
            n_space: grid.n_space,
            dy: grid.dy(),
            period: grid.period,
            metric: SpaceMetric::Periodic,
        }
    }

    fn axes(&self, k: usize) -> [usize; 2] {
        match self.d {
            1 => [k, 0],
            _ => [k % self.n_space, k / self.n_space],
        }
    }

    fn distance(&self, k_a: usize, k_b: usize) -> f64 {
        let a = self.axes(k_a);
        let b = self.axes(k_b);
        let mut sq = 0.0;
        for ax in 0..self.d {
            let raw = (a[ax] as f64 - b[ax] as f64).abs() * self.dy;
            let w = match self.metric {
                SpaceMetric::Periodic => raw.min(self.period - raw),
                SpaceMetric::Euclidean => raw,
            };
            sq += w * w;
        }
        sq.sqrt()
    }

    fn tri_grid(&self) -> TriangleGrid {
        TriangleGrid {
            n_time: self.n_rows.max(2),
            d: self.d,
            n_space: self.n_space,
            horizon: self.dt * (self.n_rows.max(2) - 1) as f64,
            period: self.period,
        }
    }
}

/// Derivative slices needed for the `2+alpha` norm.
#[derive(Debug, Clone)]
pub struct SliceDerivs {
    pub phi_s: SliceField,
    pub phi_y: Vec<SliceField>,
    pub phi_yy: Vec<SliceField>,
}

/// Finite-difference derivative slices of a periodic-lattice slice:
/// central differences in `s` (one-sided at the edge rows) and periodic
/// central stencils in `y`.
pub fn slice_derivatives(slice: &SliceField) -> SliceDerivs {
    let n_y = slice.n_y();
    let rows = slice.n_rows;
    let grid = slice.tri_grid();
    let mut phi_s = slice.clone();
    for r in 0..rows {
        for k in 0..n_y {
            let v = if rows == 1 {
                0.0
            } else if r == 0 {
                if rows >= 3 {
                    (-3.0 * slice.at(0, k) + 4.0 * slice.at(1, k) - slice.at(2, k))
                        / (2.0 * slice.dt)
                } else {
                    (slice.at(1, k) - slice.at(0, k)) / slice.dt
                }
            } else if r == rows - 1 {
                if rows >= 3 {
                    (3.0 * slice.at(r, k) - 4.0 * slice.at(r - 1, k) + slice.at(r - 2, k))
                        / (2.0 * slice.dt)
                } else {
                    (slice.at(r, k) - slice.at(r - 1, k)) / slice.dt
                }
            } else {
                (slice.at(r + 1, k) - slice.at(r - 1, k)) / (2.0 * slice.dt)
            };
            phi_s.data[r * n_y + k] = v;
        }
    }

    let d = slice.d;
    let mut phi_y = vec![slice.clone(); d];
    let mut phi_yy = vec![slice.clone(); d * d];
    for r in 0..rows {
        let grad = gradient_row(slice.row(r), &grid);
        let hess = hessian_row(slice.row(r), &grid);
        for axis in 0..d {
            phi_y[axis].data[r * n_y..(r + 1) * n_y].copy_from_slice(&grad[axis]);
        }
        for pair in 0..d * d {
            phi_yy[pair].data[r * n_y..(r + 1) * n_y].copy_from_slice(&hess[pair]);
        }
    }
    SliceDerivs { phi_s, phi_y, phi_yy }
}

/// Max of |values| over a slice.
pub fn sup_norm(slice: &SliceField) -> f64 {
    slice.data.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn semi_s(slice: &SliceField, exponent: f64, budget: usize, rng: &mut ChaCha8Rng) -> f64 {
    let n_y = slice.n_y();
    let rows = slice.n_rows;
    if rows < 2 {
        return 0.0;
    }
    let mut best = 0.0f64;
    if budget == 0 {
        for k in 0..n_y {
            for r_a in 0..rows {
                for r_b in r_a + 1..rows {
                    let gap = ((r_b - r_a) as f64 * slice.dt).powf(exponent);
                    let diff = (slice.at(r_a, k) - slice.at(r_b, k)).abs();
                    best = best.max(diff / gap);
                }
            }
        }
    } else {
        for _ in 0..budget {
            let k = rng.gen_range(0..n_y);
            let r_a = rng.gen_range(0..rows - 1);
            let r_b = rng.gen_range(r_a + 1..rows);
            let gap = ((r_b - r_a) as f64 * slice.dt).powf(exponent);
            let diff = (slice.at(r_a, k) - slice.at(r_b, k)).abs();
            best = best.max(diff / gap);
        }
    }
    best
}

fn semi_y(slice: &SliceField, exponent: f64, budget: usize, rng: &mut ChaCha8Rng) -> f64 {
    let n_y = slice.n_y();
    let rows = slice.n_rows;
    let mut best = 0.0f64;
    if budget == 0 {
        for r in 0..rows {
            for k_a in 0..n_y {
                for k_b in k_a + 1..n_y {
                    let dist = slice.distance(k_a, k_b);
                    if dist == 0.0 {
                        continue;
                    }
                    let diff = (slice.at(r, k_a) - slice.at(r, k_b)).abs();
                    best = best.max(diff / dist.powf(exponent));
                }
            }
        }
    } else {
        for _ in 0..budget {
            let r = rng.gen_range(0..rows);
            let k_a = rng.gen_range(0..n_y);
            let k_b = rng.gen_range(0..n_y);
            if k_a == k_b {
                continue;
            }
            let dist = slice.distance(k_a, k_b);
            if dist == 0.0 {
                continue;
            }
            let diff = (slice.at(r, k_a) - slice.at(r, k_b)).abs();
            best = best.max(diff / dist.powf(exponent));
        }
    }
    best
}

/// Slice Hölder norm: sup, both seminorms, and the `2+alpha` combination
/// when derivative slices are supplied.
pub fn holder_norm_alpha(
    slice: &SliceField,
    cfg: &HolderConfig,
    order: NormOrder,
    derivatives: Option<&SliceDerivs>,
) -> Result<NormReport> {
    cfg.validate()?;
    if slice.data.is_empty() {
        return Err(Error::Argument("empty slice".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = NormReport::default();
    report.subsampled = cfg.pair_budget > 0;
    report.sup = sup_norm(slice);
    report.semi_s = semi_s(slice, cfg.alpha / 2.0, cfg.pair_budget, &mut rng);
    report.semi_y = semi_y(slice, cfg.alpha, cfg.pair_budget, &mut rng);
    report.c_alpha = report.sup + report.semi_s + report.semi_y;

    if order == NormOrder::TwoPlusAlpha {
        let derivs = derivatives.ok_or_else(|| {
            Error::Argument("2+alpha norm requested without derivative slices".into())
        })?;
        let alpha_of = |s: &SliceField, rng: &mut ChaCha8Rng| {
            sup_norm(s)
                + semi_s(s, cfg.alpha / 2.0, cfg.pair_budget, rng)
                + semi_y(s, cfg.alpha, cfg.pair_budget, rng)
        };
        let mut acc = report.sup;
        acc += alpha_of(&derivs.phi_s, &mut rng);
        for g in &derivs.phi_y {
            acc += sup_norm(g);
        }
        for h in &derivs.phi_yy {
            acc += alpha_of(h, &mut rng);
        }
        report.c_2alpha = acc;
    }
    Ok(report)
}

fn slice_norm_value(
    slice: &SliceField,
    cfg: &HolderConfig,
    order: NormOrder,
) -> Result<f64> {
    match order {
        NormOrder::Alpha => Ok(holder_norm_alpha(slice, cfg, order, None)?.c_alpha),
        NormOrder::TwoPlusAlpha => {
            let derivs = slice_derivatives(slice);
            Ok(holder_norm_alpha(slice, cfg, order, Some(&derivs))?.c_2alpha)
        }
    }
}

/// Triangle norms over a node window `[lo, hi]`: slices `i_t = lo..=hi`,
/// rows `i_s = lo..=i_t`.
pub(crate) fn tri_norms_window(
    u: &TriField,
    v: Option<&TriField>,
    cfg: &HolderConfig,
    order: NormOrder,
    lo: usize,
    hi: usize,
) -> Result<NormReport> {
    cfg.validate()?;
    if let Some(v) = v {
        if v.grid != u.grid {
            return Err(Error::Argument("u and v live on different grids".into()));
        }
    }
    let v_field;
    let v_ref = match v {
        Some(f) => f,
        None => {
            v_field = t_derivative_field(u);
            &v_field
        }
    };
    let mut bracket = 0.0f64;
    let mut double = 0.0f64;
    for i_t in lo..=hi {
        let u_slice = SliceField::from_tri_slice(u, i_t, lo);
        let nu = slice_norm_value(&u_slice, cfg, order)?;
        let v_slice = SliceField::from_tri_slice(v_ref, i_t, lo);
        let nv = slice_norm_value(&v_slice, cfg, order)?;
        bracket = bracket.max(nu);
        double = double.max(nu + nv);
    }
    let mut report = NormReport::default();
    report.bracket = bracket;
    report.double_bracket = double;
    report.subsampled = cfg.pair_budget > 0;
    Ok(report)
}

/// Triangle norms of `u` (and `v = u_t`; finite differences of `u` along `t`
/// when absent): `bracket` is the sup over `t` of slice norms, and
/// `double_bracket` adds the `v` slice.
pub fn tri_norms(
    u: &TriField,
    v: Option<&TriField>,
    cfg: &HolderConfig,
    order: NormOrder,
) -> Result<NormReport> {
    tri_norms_window(u, v, cfg, order, 0, u.grid.n_time - 1)
}

/// Finite-difference `u_t` on the triangle: central where both neighbours
/// exist, one-sided otherwise.
pub fn t_derivative_field(u: &TriField) -> TriField {
    let g = u.grid;
    let dt = g.dt();
    let mut out = TriField::zeros(g);
    for i_t in 0..g.n_time {
        for i_s in 0..=i_t {
            for k in 0..g.spatial_len() {
                let v = if i_t > i_s && i_t + 1 < g.n_time {
                    (u.get(i_t + 1, i_s, k) - u.get(i_t - 1, i_s, k)) / (2.0 * dt)
                } else if i_t + 1 < g.n_time {
                    (u.get(i_t + 1, i_s, k) - u.get(i_t, i_s, k)) / dt
                } else if i_t > i_s {
                    (u.get(i_t, i_s, k) - u.get(i_t - 1, i_s, k)) / dt
                } else {
                    0.0
                };
                out.set(i_t, i_s, k, v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use proptest::prelude::*;

    fn toy_slice(n_rows: usize, n_space: usize, metric: SpaceMetric) -> SliceField {
        SliceField {
            data: vec![0.0; n_rows * n_space],
            n_rows,
            dt: if n_rows > 1 { 1.0 / (n_rows - 1) as f64 } else { 1.0 },
            d: 1,
            n_space,
            dy: 1.0 / n_space as f64,
            period: 1.0,
            metric,
        }
    }

    /// Fill a slice from (s, y) with unit square coordinates including the
    /// right endpoint in y, which is what the plain-metric examples assume.
    fn fill_unit_square<F: Fn(f64, f64) -> f64>(slice: &mut SliceField, f: F) {
        let n = slice.n_space;
        for r in 0..slice.n_rows {
            let s = r as f64 * slice.dt;
            for k in 0..n {
                let y = k as f64 / (n - 1) as f64;
                slice.data[r * n + k] = f(s, y);
            }
        }
    }

    #[test]
    fn sup_norm_examples() {
        let mut s = toy_slice(3, 8, SpaceMetric::Euclidean);
        fill_unit_square(&mut s, |_, _| -3.0);
        assert_eq!(sup_norm(&s), 3.0);

        fill_unit_square(&mut s, |_, _| 0.0);
        assert_eq!(sup_norm(&s), 0.0);

        fill_unit_square(&mut s, |t, _| t);
        assert_eq!(sup_norm(&s), 1.0);
    }

    #[test]
    fn holder_norm_constant_slice() {
        let mut s = toy_slice(4, 8, SpaceMetric::Euclidean);
        fill_unit_square(&mut s, |_, _| -2.5);
        let cfg = HolderConfig::default();
        let rep = holder_norm_alpha(&s, &cfg, NormOrder::Alpha, None).unwrap();
        assert_eq!(rep.semi_s, 0.0);
        assert_eq!(rep.semi_y, 0.0);
        assert_eq!(rep.c_alpha, 2.5);
    }

    #[test]
    fn holder_norm_linear_in_y_on_unit_square() {
        // phi(s,y) = y on [0,1]^2 with plain distance: the y-seminorm ratio
        // |y - y'| / |y - y'|^alpha is maximal at separation 1.
        let mut s = toy_slice(5, 9, SpaceMetric::Euclidean);
        s.dy = 1.0 / 8.0; // lattice includes both endpoints of [0,1]
        s.period = 10.0; // irrelevant under the plain metric
        fill_unit_square(&mut s, |_, y| y);
        let cfg = HolderConfig::default();
        let rep = holder_norm_alpha(&s, &cfg, NormOrder::Alpha, None).unwrap();
        let oracle = brute_force_slice(&s, cfg.alpha);
        assert_eq!(rep.semi_y, oracle.1);
        assert!((rep.semi_y - 1.0).abs() < 1e-12);
        assert!((rep.c_alpha - 2.0).abs() < 1e-12);
    }

    #[test]
    fn holder_norm_linear_in_s() {
        let mut s = toy_slice(5, 8, SpaceMetric::Euclidean);
        fill_unit_square(&mut s, |t, _| t);
        let cfg = HolderConfig::default();
        let rep = holder_norm_alpha(&s, &cfg, NormOrder::Alpha, None).unwrap();
        let oracle = brute_force_slice(&s, cfg.alpha);
        assert_eq!(rep.semi_s, oracle.0);
        // max separation 1 at exponent alpha/2 = 0.25: ratio 1/1 = 1.
        assert!((rep.semi_s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_plus_alpha_requires_derivatives() {
        let mut s = toy_slice(4, 8, SpaceMetric::Euclidean);
        fill_unit_square(&mut s, |t, y| t + y);
        let cfg = HolderConfig::default();
        let err = holder_norm_alpha(&s, &cfg, NormOrder::TwoPlusAlpha, None);
        assert!(matches!(err, Err(crate::error::Error::Argument(_))));
    }

    /// Independent O(N^2) enumeration of both seminorms.
    fn brute_force_slice(slice: &SliceField, alpha: f64) -> (f64, f64) {
        let n_y = slice.n_y();
        let mut semi_s = 0.0f64;
        for k in 0..n_y {
            for a in 0..slice.n_rows {
                for b in 0..slice.n_rows {
                    if a == b {
                        continue;
                    }
                    let gap = ((a as f64 - b as f64).abs() * slice.dt).powf(alpha / 2.0);
                    let val = (slice.at(a, k) - slice.at(b, k)).abs() / gap;
                    if val > semi_s {
                        semi_s = val;
                    }
                }
            }
        }
        let mut semi_y = 0.0f64;
        for r in 0..slice.n_rows {
            for ka in 0..n_y {
                for kb in 0..n_y {
                    if ka == kb {
                        continue;
                    }
                    let dist = slice.distance(ka, kb);
                    if dist == 0.0 {
                        continue;
                    }
                    let val = (slice.at(r, ka) - slice.at(r, kb)).abs() / dist.powf(alpha);
                    if val > semi_y {
                        semi_y = val;
                    }
                }
            }
        }
        (semi_s, semi_y)
    }

    #[test]
    fn exhaustive_matches_brute_force_on_periodic_slices() {
        let g = build_grid(6, 1, 12, 1.0, 2.0).unwrap();
        let u = TriField::from_fn(g, |t, s, y| {
            (std::f64::consts::PI * y[0]).sin() * (1.0 + t) + s * s
        });
        let cfg = HolderConfig::default();
        for i_t in 1..g.n_time {
            let slice = SliceField::from_tri_slice(&u, i_t, 0);
            let rep = holder_norm_alpha(&slice, &cfg, NormOrder::Alpha, None).unwrap();
            let (bs, by) = brute_force_slice(&slice, cfg.alpha);
            assert_eq!(rep.semi_s, bs);
            assert_eq!(rep.semi_y, by);
        }
    }

    #[test]
    fn tri_norms_trivial_fields() {
        let g = build_grid(4, 1, 8, 1.0, 1.0).unwrap();
        let zero = TriField::zeros(g);
        let cfg = HolderConfig::default();
        let rep = tri_norms(&zero, Some(&zero), &cfg, NormOrder::Alpha).unwrap();
        assert_eq!(rep.bracket, 0.0);
        assert_eq!(rep.double_bracket, 0.0);

        let c = TriField::from_fn(g, |_, _, _| -4.0);
        let zc = TriField::zeros(g);
        let rep = tri_norms(&c, Some(&zc), &cfg, NormOrder::Alpha).unwrap();
        assert_eq!(rep.bracket, 4.0);
        assert_eq!(rep.double_bracket, 4.0);
    }

    #[test]
    fn tri_norms_matches_brute_force_oracle() {
        // u(t,s,y) = t*s with v = s on a 3-node grid; oracle enumerates all
        // index pairs independently.
        let g = build_grid(3, 1, 6, 1.0, 1.0).unwrap();
        let u = TriField::from_fn(g, |t, s, _| t * s);
        let v = TriField::from_fn(g, |_, s, _| s);
        let cfg = HolderConfig::default();
        let rep = tri_norms(&u, Some(&v), &cfg, NormOrder::Alpha).unwrap();

        let mut bracket = 0.0f64;
        let mut double = 0.0f64;
        for i_t in 0..g.n_time {
            let us = SliceField::from_tri_slice(&u, i_t, 0);
            let vs = SliceField::from_tri_slice(&v, i_t, 0);
            let (uss, usy) = brute_force_slice(&us, cfg.alpha);
            let (vss, vsy) = brute_force_slice(&vs, cfg.alpha);
            let nu = sup_norm(&us) + uss + usy;
            let nv = sup_norm(&vs) + vss + vsy;
            bracket = bracket.max(nu);
            double = double.max(nu + nv);
        }
        assert_eq!(rep.bracket, bracket);
        assert_eq!(rep.double_bracket, double);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let g1 = build_grid(4, 1, 8, 1.0, 1.0).unwrap();
        let g2 = build_grid(5, 1, 8, 1.0, 1.0).unwrap();
        let u = TriField::zeros(g1);
        let v = TriField::zeros(g2);
        let cfg = HolderConfig::default();
        assert!(tri_norms(&u, Some(&v), &cfg, NormOrder::Alpha).is_err());
    }

    #[test]
    fn slice_norm_monotone_in_domain() {
        let g = build_grid(8, 1, 10, 1.0, 1.0).unwrap();
        let u = TriField::from_fn(g, |t, s, y| {
            (2.0 * std::f64::consts::PI * y[0]).cos() * (t - s) + t
        });
        let cfg = HolderConfig::default();
        let mut prev = 0.0;
        for i_t in 0..g.n_time {
            let slice = SliceField::from_tri_slice(&u, i_t, 0);
            let n = holder_norm_alpha(&slice, &cfg, NormOrder::Alpha, None).unwrap().c_alpha;
            assert!(n >= prev - 1e-12, "slice norm decreased at i_t={i_t}: {n} < {prev}");
            prev = n;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn absolute_homogeneity(lambda in -4.0f64..4.0, freq in 1usize..3) {
            let g = build_grid(4, 1, 8, 1.0, 1.0).unwrap();
            let base = TriField::from_fn(g, |t, s, y| {
                (2.0 * std::f64::consts::PI * freq as f64 * y[0]).sin() + t * s
            });
            let scaled = TriField::from_fn(g, |t, s, y| {
                lambda * ((2.0 * std::f64::consts::PI * freq as f64 * y[0]).sin() + t * s)
            });
            let cfg = HolderConfig::default();
            let nb = tri_norms(&base, None, &cfg, NormOrder::Alpha).unwrap().bracket;
            let ns = tri_norms(&scaled, None, &cfg, NormOrder::Alpha).unwrap().bracket;
            prop_assert!((ns - lambda.abs() * nb).abs() <= 1e-12 * (1.0 + nb));
        }

        #[test]
        fn triangle_inequality(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let g = build_grid(4, 1, 8, 1.0, 1.0).unwrap();
            let tau = 2.0 * std::f64::consts::PI;
            let phi = TriField::from_fn(g, |t, _, y| a * (tau * y[0]).sin() + t);
            let psi = TriField::from_fn(g, |_, s, y| b * (tau * y[0]).cos() * s);
            let sum = TriField::from_fn(g, |t, s, y| {
                a * (tau * y[0]).sin() + t + b * (tau * y[0]).cos() * s
            });
            let cfg = HolderConfig::default();
            let np = tri_norms(&phi, None, &cfg, NormOrder::Alpha).unwrap().bracket;
            let nq = tri_norms(&psi, None, &cfg, NormOrder::Alpha).unwrap().bracket;
            let ns = tri_norms(&sum, None, &cfg, NormOrder::Alpha).unwrap().bracket;
            prop_assert!(ns <= np + nq + 1e-10);
        }
    }
}
