//! Manufactured sources: pick an exact solution, derive the forcing that
//! makes it solve the equation, all by symbolic tree rewrites.
//!
//! Diagonal terms are handled by substituting `t := s` into the derivative
//! trees, so the induced source is exact and isolates discretization error.

use crate::error::{Error, Result};
use crate::expr::{sub as esub, var, Expr};
use crate::grid::TriangleGrid;

/// Axis variable names for dimension `d` (`y1`, `y2`).
pub fn axis_names(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("y{i}")).collect()
}

/// Normalizes the short names users write in one dimension (`y`, `p`, `m`,
/// `q`, `n`) to their indexed forms (`y1`, `p1`, `q11`, ...).
pub fn canonicalize(expr: &Expr) -> Expr {
    let mut out = expr.clone();
    for (short, long) in [("y", "y1"), ("p", "p1"), ("m", "m1"), ("q", "q11"), ("n", "n11")] {
        out = out.substitute(short, &var(long));
    }
    out
}

/// Symbolic ingredients of a linear problem:
/// `u_s = a:u_yy + b.u_y + c u + abar:diag(u_yy) + bbar.diag(u_y)
///        + cbar diag(u) + f`.
/// Matrix slots are row-major, length `d*d`; vector slots length `d`.
#[derive(Debug, Clone)]
pub struct LinearExprs {
    pub d: usize,
    pub a: Vec<Expr>,
    pub a_bar: Vec<Expr>,
    pub b: Vec<Expr>,
    pub b_bar: Vec<Expr>,
    pub c: Expr,
    pub c_bar: Expr,
}

impl LinearExprs {
    /// Constant-coefficient convenience constructor.
    pub fn constant(d: usize, a: f64, a_bar: f64, b: f64, b_bar: f64, c: f64, c_bar: f64) -> Self {
        let diag_mat = |v: f64| -> Vec<Expr> {
            (0..d * d)
                .map(|idx| {
                    if idx % (d + 1) == 0 {
                        crate::expr::num(v)
                    } else {
                        crate::expr::num(0.0)
                    }
                })
                .collect()
        };
        LinearExprs {
            d,
            a: diag_mat(a),
            a_bar: diag_mat(a_bar),
            b: vec![crate::expr::num(b); d],
            b_bar: vec![crate::expr::num(b_bar); d],
            c: crate::expr::num(c),
            c_bar: crate::expr::num(c_bar),
        }
    }
}

/// Spatial derivative trees of `u*`: gradient and Hessian in the `y` axes.
fn spatial_derivatives(u_star: &Expr, d: usize) -> (Vec<Expr>, Vec<Expr>) {
    let names = axis_names(d);
    let grad: Vec<Expr> = names.iter().map(|n| u_star.diff(n)).collect();
    let mut hess = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            hess.push(grad[i].diff(&names[j]));
        }
    }
    (grad, hess)
}

fn diag(e: &Expr) -> Expr {
    e.substitute("t", &var("s"))
}

fn validate_on_grid(f: &Expr, grid: &TriangleGrid, what: &str) -> Result<()> {
    let names = axis_names(grid.d);
    for i_t in 0..grid.n_time {
        for i_s in 0..=i_t {
            for k in [0, grid.spatial_len() / 2, grid.spatial_len() - 1] {
                let y = grid.point(k);
                let mut env: Vec<(&str, f64)> =
                    vec![("t", grid.tau(i_t)), ("s", grid.tau(i_s))];
                for (ax, name) in names.iter().enumerate() {
                    env.push((name.as_str(), y[ax]));
                }
                let v = f.eval(&env)?;
                if !v.is_finite() {
                    return Err(Error::Manufacture(format!(
                        "{what} evaluates to {v} at t={}, s={}",
                        grid.tau(i_t),
                        grid.tau(i_s)
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Source `f(t,s,y)` that makes `u*` an exact solution of the linear
/// equation with the given coefficient expressions.
pub fn manufacture_source_linear(
    u_star: &Expr,
    coeffs: &LinearExprs,
    grid: &TriangleGrid,
) -> Result<Expr> {
    if coeffs.d != grid.d {
        return Err(Error::Argument("coefficient dimension does not match grid".into()));
    }
    let u_star = canonicalize(u_star);
    let d = coeffs.d;
    let (grad, hess) = spatial_derivatives(&u_star, d);
    let mut rhs = crate::expr::num(0.0);
    for i in 0..d {
        for j in 0..d {
            rhs = crate::expr::add(
                rhs,
                crate::expr::mul(coeffs.a[i * d + j].clone(), hess[i * d + j].clone()),
            );
            rhs = crate::expr::add(
                rhs,
                crate::expr::mul(coeffs.a_bar[i * d + j].clone(), diag(&hess[i * d + j])),
            );
        }
    }
    for i in 0..d {
        rhs = crate::expr::add(rhs, crate::expr::mul(coeffs.b[i].clone(), grad[i].clone()));
        rhs = crate::expr::add(rhs, crate::expr::mul(coeffs.b_bar[i].clone(), diag(&grad[i])));
    }
    rhs = crate::expr::add(rhs, crate::expr::mul(coeffs.c.clone(), u_star.clone()));
    rhs = crate::expr::add(rhs, crate::expr::mul(coeffs.c_bar.clone(), diag(&u_star)));

    let f = esub(u_star.diff("s"), rhs);
    validate_on_grid(&f, grid, "manufactured linear source")?;
    Ok(f)
}

/// Source `f*(t,s,y)` such that `u*` solves `u_s = F(...) + f*`, for `F`
/// given as an expression over `(t,s,y.,u,p.,q..,l,m.,n..)`.
pub fn manufacture_source_nonlinear(
    u_star: &Expr,
    f_expr: &Expr,
    d: usize,
    grid: &TriangleGrid,
) -> Result<Expr> {
    let u_star = canonicalize(u_star);
    let f_expr = canonicalize(f_expr);
    let (grad, hess) = spatial_derivatives(&u_star, d);

    let mut composed = f_expr.substitute("u", &u_star);
    composed = composed.substitute("l", &diag(&u_star));
    for i in 0..d {
        composed = composed.substitute(&format!("p{}", i + 1), &grad[i]);
        composed = composed.substitute(&format!("m{}", i + 1), &diag(&grad[i]));
        for j in 0..d {
            composed = composed.substitute(&format!("q{}{}", i + 1, j + 1), &hess[i * d + j]);
            composed = composed.substitute(&format!("n{}{}", i + 1, j + 1), &diag(&hess[i * d + j]));
        }
    }
    let leftover: Vec<String> = composed
        .free_vars()
        .into_iter()
        .filter(|v| {
            v != "t" && v != "s" && !axis_names(d).contains(v)
        })
        .collect();
    if !leftover.is_empty() {
        return Err(Error::Manufacture(format!(
            "nonlinearity references unknown slots: {}",
            leftover.join(", ")
        )));
    }

    let f_star = esub(u_star.diff("s"), composed);
    validate_on_grid(&f_star, grid, "manufactured nonlinear source")?;
    Ok(f_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn heat_solution_needs_no_source() {
        let grid = build_grid(5, 1, 8, 1.0, 2.0 * std::f64::consts::PI).unwrap();
        let u_star = Expr::parse("exp(-s)*sin(y)").unwrap();
        let coeffs = LinearExprs::constant(1, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let f = manufacture_source_linear(&u_star, &coeffs, &grid).unwrap();
        for &(t, s, y) in &[(0.9, 0.3, 1.1), (0.5, 0.5, 4.0), (1.0, 0.0, 0.0)] {
            let v = f.eval(&[("t", t), ("s", s), ("y1", y)]).unwrap();
            assert!(v.abs() < 1e-12, "f({t},{s},{y}) = {v}");
        }
    }

    #[test]
    fn polynomial_against_hand_computation() {
        // u* = t + s with F = q: f* = d/ds u* - u*_yy = 1.
        let grid = build_grid(4, 1, 8, 1.0, 1.0).unwrap();
        let u_star = Expr::parse("t + s").unwrap();
        let f_expr = Expr::parse("q").unwrap();
        let f = manufacture_source_nonlinear(&u_star, &f_expr, 1, &grid).unwrap();
        for &(t, s, y) in &[(0.2, 0.1, 0.7), (1.0, 0.9, 0.1)] {
            let v = f.eval(&[("t", t), ("s", s), ("y1", y)]).unwrap();
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn manufactured_source_spot_checked_by_finite_differences() {
        // u* = exp(t-s)(2+sin y), a = 1, abar = 0.2: compare the symbolic
        // source against a finite-difference evaluation of the equation at
        // random nodes.
        let grid = build_grid(6, 1, 16, 1.0, 2.0 * std::f64::consts::PI).unwrap();
        let u_star = Expr::parse("exp(t - s)*(2 + sin(y))").unwrap();
        let coeffs = LinearExprs::constant(1, 1.0, 0.2, 0.0, 0.0, 0.0, 0.0);
        let f = manufacture_source_linear(&u_star, &coeffs, &grid).unwrap();

        let u = |t: f64, s: f64, y: f64| (t - s).exp() * (2.0 + y.sin());
        // Balances truncation against roundoff in the second differences.
        let h = 5e-4;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let t: f64 = rng.gen_range(0.2..1.0);
            let s: f64 = rng.gen_range(0.0..t - 0.1);
            let y: f64 = rng.gen_range(0.0..grid.period);
            let u_s = (u(t, s + h, y) - u(t, s - h, y)) / (2.0 * h);
            let u_yy = (u(t, s, y + h) - 2.0 * u(t, s, y) + u(t, s, y - h)) / (h * h);
            let u_yy_diag = (u(s, s, y + h) - 2.0 * u(s, s, y) + u(s, s, y - h)) / (h * h);
            let fd_source = u_s - (1.0 * u_yy + 0.2 * u_yy_diag);
            let sym = f.eval(&[("t", t), ("s", s), ("y1", y)]).unwrap();
            worst = worst.max((fd_source - sym).abs());
        }
        assert!(worst <= 1e-5, "max deviation {worst}");
    }

    #[test]
    fn rejects_unknown_slots() {
        let grid = build_grid(3, 1, 8, 1.0, 1.0).unwrap();
        let u_star = Expr::parse("t + s").unwrap();
        let f_expr = Expr::parse("q + w").unwrap();
        let err = manufacture_source_nonlinear(&u_star, &f_expr, 1, &grid);
        assert!(matches!(err, Err(Error::Manufacture(_))));
    }

    #[test]
    fn rejects_non_finite_sources() {
        let grid = build_grid(3, 1, 8, 1.0, 1.0).unwrap();
        // log(0) at s = 0 nodes.
        let u_star = Expr::parse("log(s)").unwrap();
        let coeffs = LinearExprs::constant(1, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let err = manufacture_source_linear(&u_star, &coeffs, &grid);
        assert!(matches!(err, Err(Error::Manufacture(_))));
    }
}
