//! Run configuration: a JSON document with expression strings for problem
//! data, a preset registry, validation, and builders that turn a parsed
//! config into solver inputs.

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{build_grid, TriangleGrid};
use crate::hjb::{ControlProblem, ControlSet};
use crate::linear::{Coef, LinearCoefficients, SolveOptions, SurfaceCoef};
use crate::manufacture::axis_names;
use crate::nonlinear::NonlinearProblem;
use crate::norms::HolderConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SolveLinear,
    SolveNonlinear,
    SolveHjb,
    VerifyFbsde,
    Manufacture,
    Norms,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "solve-linear" => Ok(Mode::SolveLinear),
            "solve-nonlinear" => Ok(Mode::SolveNonlinear),
            "solve-hjb" => Ok(Mode::SolveHjb),
            "verify-fbsde" => Ok(Mode::VerifyFbsde),
            "manufacture" => Ok(Mode::Manufacture),
            "norms" => Ok(Mode::Norms),
            other => Err(Error::Config(format!("unrecognized mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_time: usize,
    #[serde(default = "one")]
    pub d: usize,
    pub n_space: usize,
    pub horizon: f64,
    pub period: f64,
}

fn one() -> usize {
    1
}

impl GridConfig {
    pub fn build(&self) -> Result<TriangleGrid> {
        build_grid(self.n_time, self.d, self.n_space, self.horizon, self.period)
    }
}

/// Problem payload: a named preset or explicit expression strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemConfig {
    Preset {
        name: String,
    },
    /// Linear coefficients as expressions over `(t, s, y...)`; matrix slots
    /// row-major of length `d*d`, vectors of length `d`. Omitted families
    /// default to the identity diffusion and zero elsewhere.
    Linear {
        #[serde(default)]
        a: Option<Vec<String>>,
        #[serde(default)]
        a_bar: Option<Vec<String>>,
        #[serde(default)]
        b: Option<Vec<String>>,
        #[serde(default)]
        b_bar: Option<Vec<String>>,
        #[serde(default)]
        c: Option<String>,
        #[serde(default)]
        c_bar: Option<String>,
        #[serde(default)]
        f: Option<String>,
        g: String,
    },
    /// Fully nonlinear right-hand side over
    /// `(t, s, y..., u, p..., q..., l, m..., n...)`.
    Nonlinear { f: String, g: String },
    /// Control problem: drift/vol over `(s, y..., a...)`, running cost over
    /// `(t, s, y..., a...)`, terminal over `(t, y...)`; the control set is a
    /// box or a closed-form minimizer over `(t, s, y..., p..., q...)`.
    Hjb {
        drift: Vec<String>,
        vol: Vec<String>,
        running_cost: String,
        terminal: String,
        control: ControlConfig,
        #[serde(default)]
        k_noise: Option<usize>,
        #[serde(default)]
        maximize: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default)]
    pub lower: Option<Vec<f64>>,
    #[serde(default)]
    pub upper: Option<Vec<f64>>,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub closed_form: Option<Vec<String>>,
}

fn default_resolution() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbsdeConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub y0: Vec<f64>,
    /// SDE drift over `(s, y...)`, one expression per state component.
    pub drift: Vec<String>,
    /// SDE volatility over `(s, y...)`, row-major `d x k`.
    pub vol: Vec<String>,
    #[serde(default = "one")]
    pub k_noise: usize,
    /// Evaluate every `t_stride`-th grid node (1 = all).
    #[serde(default = "one")]
    pub t_stride: usize,
    #[serde(default)]
    pub dump_paths: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManufactureConfig {
    pub u_star: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormsFieldConfig {
    pub u: String,
    #[serde(default)]
    pub v: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub grid: GridConfig,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_contraction_cap")]
    pub contraction_cap: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Seminorm pair budget for reported norms (0 = exhaustive).
    #[serde(default)]
    pub pair_budget: usize,
    /// Pair budget of the solver's convergence monitor.
    #[serde(default = "default_monitor_budget")]
    pub monitor_budget: usize,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub fbsde: Option<FbsdeConfig>,
    #[serde(default)]
    pub manufacture: Option<ManufactureConfig>,
    #[serde(default)]
    pub norms_field: Option<NormsFieldConfig>,
}

fn default_tolerance() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    200
}
fn default_contraction_cap() -> f64 {
    0.9
}
fn default_alpha() -> f64 {
    0.5
}
fn default_monitor_budget() -> usize {
    2048
}
fn default_theta() -> f64 {
    0.5
}

impl RunConfig {
    /// Parses and validates a config document. Unknown keys are rejected by
    /// the schema; parse errors carry line and column.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            Error::Parse(format!("config error at {}:{}: {e}", e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        if !(self.contraction_cap > 0.0 && self.contraction_cap <= 1.0) {
            return Err(Error::Config("contraction_cap must lie in (0, 1]".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("alpha must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config("theta must lie in [0, 1]".into()));
        }
        self.grid.build()?;
        match self.mode {
            Mode::VerifyFbsde if self.fbsde.is_none() => {
                return Err(Error::Config("verify-fbsde requires an 'fbsde' section".into()));
            }
            Mode::Manufacture if self.manufacture.is_none() => {
                return Err(Error::Config(
                    "manufacture mode requires a 'manufacture' section".into(),
                ));
            }
            Mode::Norms if self.norms_field.is_none() => {
                return Err(Error::Config("norms mode requires a 'norms_field' section".into()));
            }
            _ => {}
        }
        if let Some(fb) = &self.fbsde {
            if fb.n_paths == 0 || fb.n_steps == 0 {
                return Err(Error::Config("fbsde.n_paths and fbsde.n_steps must be positive".into()));
            }
            if fb.t_stride == 0 {
                return Err(Error::Config("fbsde.t_stride must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            tol: self.tolerance,
            max_iter: self.max_iter,
            contraction_cap: self.contraction_cap,
            theta: self.theta,
            norms: HolderConfig { alpha: self.alpha, pair_budget: self.pair_budget, seed: self.seed },
            monitor_budget: self.monitor_budget,
            max_window: None,
        }
    }

    pub fn holder_config(&self) -> HolderConfig {
        HolderConfig { alpha: self.alpha, pair_budget: self.pair_budget, seed: self.seed }
    }

    /// A grid refined `level` times: each level halves both spacings.
    pub fn refined_grid(&self, level: u32) -> Result<TriangleGrid> {
        let factor = 1usize << level;
        build_grid(
            (self.grid.n_time - 1) * factor + 1,
            self.grid.d,
            self.grid.n_space * factor,
            self.grid.horizon,
            self.grid.period,
        )
    }
}

fn parse_expr(src: &str, what: &str) -> Result<Expr> {
    Expr::parse(src).map_err(|e| Error::Parse(format!("in '{what}': {e}")))
}

fn check_vars(expr: &Expr, allowed: &[String], what: &str) -> Result<()> {
    let allowed_aliases: Vec<String> = {
        let mut all = allowed.to_vec();
        // One-dimensional shorthand.
        for (short, long) in [("y", "y1"), ("p", "p1"), ("m", "m1"), ("q", "q11"), ("n", "n11"), ("a", "a1")] {
            if all.iter().any(|v| v == long) {
                all.push(short.to_string());
            }
        }
        all
    };
    for var in expr.free_vars() {
        if !allowed_aliases.iter().any(|v| *v == var) {
            return Err(Error::Config(format!(
                "variable '{var}' is not allowed in '{what}' (allowed: {})",
                allowed.join(", ")
            )));
        }
    }
    Ok(())
}

fn tsy_slots(d: usize) -> Vec<String> {
    let mut v = vec!["t".to_string(), "s".to_string()];
    v.extend(axis_names(d));
    v
}

/// Control shorthand `a` for `a1` in one-control-dimension payloads.
fn alias_control(expr: Expr) -> Expr {
    expr.substitute("a", &crate::expr::var("a1"))
}

/// Compiles a closure over `(s, y..., a...)` slots.
fn compile_sya(src: &str, d: usize, m: usize, what: &str) -> Result<Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>> {
    let expr = alias_control(crate::manufacture::canonicalize(&parse_expr(src, what)?));
    let mut slots = vec!["s".to_string()];
    slots.extend(axis_names(d));
    for i in 1..=m {
        slots.push(format!("a{i}"));
    }
    check_vars(&expr, &slots, what)?;
    let refs: Vec<&str> = slots.iter().map(|s| s.as_str()).collect();
    let compiled = expr.compile(&refs)?;
    Ok(Arc::new(move |s: f64, y: &[f64], a: &[f64]| {
        let mut vals = Vec::with_capacity(1 + y.len() + a.len());
        vals.push(s);
        vals.extend_from_slice(y);
        vals.extend_from_slice(a);
        compiled.eval(&vals)
    }))
}

/// Builds linear coefficients from the `Linear` payload (or a preset).
pub fn build_linear(cfg: &RunConfig) -> Result<LinearCoefficients> {
    let grid = cfg.grid.build()?;
    let d = grid.d;
    match &cfg.problem {
        ProblemConfig::Preset { name } => preset_linear(name, &grid),
        ProblemConfig::Linear { a, a_bar, b, b_bar, c, c_bar, f, g } => {
            let slots = tsy_slots(d);
            let mat = |src: &Option<Vec<String>>, what: &str, identity: bool| -> Result<Vec<Coef>> {
                match src {
                    Some(entries) => {
                        if entries.len() != d * d {
                            return Err(Error::Config(format!(
                                "'{what}' needs {} entries for d = {d}",
                                d * d
                            )));
                        }
                        entries
                            .iter()
                            .map(|e| {
                                let expr = parse_expr(e, what)?;
                                check_vars(&expr, &slots, what)?;
                                Coef::from_expr(&expr, d)
                            })
                            .collect()
                    }
                    None => Ok((0..d * d)
                        .map(|idx| {
                            Coef::constant(if identity && idx % (d + 1) == 0 { 1.0 } else { 0.0 })
                        })
                        .collect()),
                }
            };
            let vec_c = |src: &Option<Vec<String>>, what: &str| -> Result<Vec<Coef>> {
                match src {
                    Some(entries) => {
                        if entries.len() != d {
                            return Err(Error::Config(format!(
                                "'{what}' needs {d} entries for d = {d}"
                            )));
                        }
                        entries
                            .iter()
                            .map(|e| {
                                let expr = parse_expr(e, what)?;
                                check_vars(&expr, &slots, what)?;
                                Coef::from_expr(&expr, d)
                            })
                            .collect()
                    }
                    None => Ok(vec![Coef::constant(0.0); d]),
                }
            };
            let scalar = |src: &Option<String>, what: &str| -> Result<Coef> {
                match src {
                    Some(e) => {
                        let expr = parse_expr(e, what)?;
                        check_vars(&expr, &slots, what)?;
                        Coef::from_expr(&expr, d)
                    }
                    None => Ok(Coef::constant(0.0)),
                }
            };
            let g_expr = parse_expr(g, "g")?;
            let mut g_slots = vec!["t".to_string()];
            g_slots.extend(axis_names(d));
            check_vars(&g_expr, &g_slots, "g")?;
            Ok(LinearCoefficients {
                d,
                a: mat(a, "a", true)?,
                a_bar: mat(a_bar, "a_bar", false)?,
                b: vec_c(b, "b")?,
                b_bar: vec_c(b_bar, "b_bar")?,
                c: scalar(c, "c")?,
                c_bar: scalar(c_bar, "c_bar")?,
                f: scalar(f, "f")?,
                g: SurfaceCoef::from_expr(&g_expr, d)?,
                h_t: None,
            })
        }
        _ => Err(Error::Config("this mode needs a linear problem payload".into())),
    }
}

/// Builds a nonlinear problem from the `Nonlinear` payload (or a preset).
pub fn build_nonlinear(cfg: &RunConfig) -> Result<NonlinearProblem> {
    let grid = cfg.grid.build()?;
    let d = grid.d;
    match &cfg.problem {
        ProblemConfig::Preset { name } => preset_nonlinear(name, &grid),
        ProblemConfig::Nonlinear { f, g } => {
            let f_expr = parse_expr(f, "F")?;
            let mut slots = tsy_slots(d);
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
            check_vars(&f_expr, &slots, "F")?;
            let g_expr = parse_expr(g, "g")?;
            let mut g_slots = vec!["t".to_string()];
            g_slots.extend(axis_names(d));
            check_vars(&g_expr, &g_slots, "g")?;
            NonlinearProblem::from_expr(d, &f_expr, &g_expr)
        }
        _ => Err(Error::Config("this mode needs a nonlinear problem payload".into())),
    }
}

/// Builds a control problem from the `Hjb` payload (or a preset).
pub fn build_hjb(cfg: &RunConfig) -> Result<ControlProblem> {
    let grid = cfg.grid.build()?;
    let d = grid.d;
    match &cfg.problem {
        ProblemConfig::Preset { name } => preset_hjb(name, &grid),
        ProblemConfig::Hjb { drift, vol, running_cost, terminal, control, k_noise, maximize } => {
            let m = match (&control.lower, &control.closed_form) {
                (Some(lo), _) => lo.len(),
                (None, Some(cf)) => cf.len(),
                (None, None) => {
                    return Err(Error::Config(
                        "control needs either lower/upper bounds or a closed_form".into(),
                    ));
                }
            };
            let k = k_noise.unwrap_or(1);
            if drift.len() != d {
                return Err(Error::Config(format!("'drift' needs {d} components")));
            }
            if vol.len() != d * k {
                return Err(Error::Config(format!("'vol' needs {} components", d * k)));
            }
            let drift_fns: Vec<_> = drift
                .iter()
                .map(|e| compile_sya(e, d, m, "drift"))
                .collect::<Result<_>>()?;
            let vol_fns: Vec<_> =
                vol.iter().map(|e| compile_sya(e, d, m, "vol")).collect::<Result<_>>()?;

            let cost_expr = alias_control(crate::manufacture::canonicalize(&parse_expr(
                running_cost,
                "running_cost",
            )?));
            let mut cost_slots = tsy_slots(d);
            for i in 1..=m {
                cost_slots.push(format!("a{i}"));
            }
            check_vars(&cost_expr, &cost_slots, "running_cost")?;
            let cost_refs: Vec<&str> = cost_slots.iter().map(|s| s.as_str()).collect();
            let cost = cost_expr.compile(&cost_refs)?;
            let sign = if *maximize { -1.0 } else { 1.0 };

            let term_expr = parse_expr(terminal, "terminal")?;
            let mut t_slots = vec!["t".to_string()];
            t_slots.extend(axis_names(d));
            check_vars(&term_expr, &t_slots, "terminal")?;
            let term_signed = if *maximize {
                crate::expr::neg(term_expr)
            } else {
                term_expr
            };

            let control_set = match &control.closed_form {
                Some(cf) => {
                    let mut phi_slots = tsy_slots(d);
                    for i in 1..=d {
                        phi_slots.push(format!("p{i}"));
                    }
                    for i in 1..=d {
                        for j in 1..=d {
                            phi_slots.push(format!("q{i}{j}"));
                        }
                    }
                    let compiled: Vec<_> = cf
                        .iter()
                        .map(|e| {
                            let expr = crate::manufacture::canonicalize(&parse_expr(
                                e,
                                "closed_form",
                            )?);
                            check_vars(&expr, &phi_slots, "closed_form")?;
                            let refs: Vec<&str> =
                                phi_slots.iter().map(|s| s.as_str()).collect();
                            expr.compile(&refs)
                        })
                        .collect::<Result<_>>()?;
                    ControlSet::ClosedForm(Arc::new(move |t, s, y, p, q| {
                        let mut vals = Vec::with_capacity(2 + y.len() + p.len() + q.len());
                        vals.push(t);
                        vals.push(s);
                        vals.extend_from_slice(y);
                        vals.extend_from_slice(p);
                        vals.extend_from_slice(q);
                        compiled.iter().map(|c| c.eval(&vals)).collect()
                    }))
                }
                None => {
                    let lower = control.lower.clone().unwrap();
                    let upper = control
                        .upper
                        .clone()
                        .ok_or_else(|| Error::Config("control.upper is required".into()))?;
                    if lower.len() != upper.len() {
                        return Err(Error::Config(
                            "control.lower and control.upper must have equal length".into(),
                        ));
                    }
                    if lower.iter().zip(&upper).any(|(lo, hi)| lo >= hi) {
                        return Err(Error::Config(
                            "control.lower must be strictly below control.upper".into(),
                        ));
                    }
                    ControlSet::Box { lower, upper, resolution: control.resolution }
                }
            };

            let dcopy = d;
            Ok(ControlProblem {
                d,
                k_noise: k,
                drift: Arc::new(move |s, y, a| {
                    drift_fns.iter().map(|f| f(s, y, a)).collect()
                }),
                vol: Arc::new(move |s, y, a| vol_fns.iter().map(|f| f(s, y, a)).collect()),
                running_cost: Arc::new(move |t, s, y, a| {
                    let mut vals = Vec::with_capacity(2 + dcopy + a.len());
                    vals.push(t);
                    vals.push(s);
                    vals.extend_from_slice(y);
                    vals.extend_from_slice(a);
                    sign * cost.eval(&vals)
                }),
                terminal: SurfaceCoef::from_expr(&term_signed, d)?,
                control: control_set,
                horizon: grid.horizon,
            })
        }
        _ => Err(Error::Config("this mode needs an hjb problem payload".into())),
    }
}

/// The exact solution a preset was manufactured around, when one exists.
pub fn preset_exact(name: &str) -> Option<Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>> {
    match name {
        "heat" => Some(Arc::new(|_t, s, y: &[f64]| (-s).exp() * y[0].sin())),
        "linear-manufactured" | "nonlinear-manufactured" => {
            Some(Arc::new(|t, s, y: &[f64]| (t - s).exp() * (2.0 + y[0].sin())))
        }
        _ => None,
    }
}

fn preset_linear(name: &str, grid: &TriangleGrid) -> Result<LinearCoefficients> {
    match name {
        "heat" => Ok(LinearCoefficients {
            d: 1,
            a: vec![Coef::constant(1.0)],
            a_bar: vec![Coef::constant(0.0)],
            b: vec![Coef::constant(0.0)],
            b_bar: vec![Coef::constant(0.0)],
            c: Coef::constant(0.0),
            c_bar: Coef::constant(0.0),
            f: Coef::constant(0.0),
            g: SurfaceCoef::with_dt(
                Arc::new(|_, y: &[f64]| y[0].sin()),
                Arc::new(|_, _: &[f64]| 0.0),
            ),
            h_t: None,
        }),
        "linear-manufactured" => Ok(LinearCoefficients {
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
        }),
        "linear-timevarying" => {
            // t-dependent diagonal couplings so the fixed-point iteration
            // produces a genuine contraction-factor history.
            Ok(LinearCoefficients {
                d: 1,
                a: vec![Coef::constant(1.0)],
                a_bar: vec![Coef::with_dt(
                    Arc::new(|t: f64, s: f64, _y: &[f64]| 0.2 + 0.1 * (t + s).sin()),
                    Arc::new(|t: f64, s: f64, _y: &[f64]| 0.1 * (t + s).cos()),
                )],
                b: vec![Coef::constant(0.0)],
                b_bar: vec![Coef::constant(0.0)],
                c: Coef::constant(0.0),
                c_bar: Coef::with_dt(
                    Arc::new(|t: f64, _s: f64, _y: &[f64]| 0.3 * t.cos()),
                    Arc::new(|t: f64, _s: f64, _y: &[f64]| -0.3 * t.sin()),
                ),
                f: Coef::with_dt(
                    Arc::new(|t: f64, s: f64, y: &[f64]| (t - s).exp() * y[0].cos()),
                    Arc::new(|t: f64, s: f64, y: &[f64]| (t - s).exp() * y[0].cos()),
                ),
                g: SurfaceCoef::with_dt(
                    Arc::new(|t: f64, y: &[f64]| (1.0 + t) * (2.0 + y[0].sin())),
                    Arc::new(|_, y: &[f64]| 2.0 + y[0].sin()),
                ),
                h_t: None,
            })
        }
        other => Err(Error::Config(format!("unknown linear preset '{other}'"))),
    }
    .and_then(|c| {
        if c.d != grid.d {
            Err(Error::Config("preset dimension does not match the grid".into()))
        } else {
            Ok(c)
        }
    })
}

fn preset_nonlinear(name: &str, grid: &TriangleGrid) -> Result<NonlinearProblem> {
    match name {
        "nonlinear-manufactured" => {
            let u_star = Expr::parse("exp(t - s)*(2 + sin(y))").unwrap();
            let f_base = Expr::parse("q + 0.1*n/(1 + n^2)").unwrap();
            let f_star =
                crate::manufacture::manufacture_source_nonlinear(&u_star, &f_base, 1, grid)?;
            let g_expr = Expr::parse("exp(t)*(2 + sin(y))").unwrap();
            NonlinearProblem::from_expr(1, &crate::expr::add(f_base, f_star), &g_expr)
        }
        other => Err(Error::Config(format!("unknown nonlinear preset '{other}'"))),
    }
}

fn preset_hjb(name: &str, grid: &TriangleGrid) -> Result<ControlProblem> {
    match name {
        // Time-consistent quadratic control: b = a, constant vol,
        // h = a^2 + 0.2 cos y, g = 1 - cos y.
        "hjb-time-consistent" => Ok(ControlProblem {
            d: 1,
            k_noise: 1,
            drift: Arc::new(|_s, _y, a: &[f64]| vec![a[0]]),
            vol: Arc::new(|_s, _y, _a| vec![0.5]),
            running_cost: Arc::new(|_t, _s, y: &[f64], a: &[f64]| a[0] * a[0] + 0.2 * y[0].cos()),
            terminal: SurfaceCoef::with_dt(
                Arc::new(|_t, y: &[f64]| 1.0 - y[0].cos()),
                Arc::new(|_, _| 0.0),
            ),
            control: ControlSet::Box { lower: vec![-6.0], upper: vec![6.0], resolution: 64 },
            horizon: grid.horizon,
        }),
        // Reference-time discounted quadratic control on the torus: the
        // equilibrium policy has the closed form a* = -p e^{rho (s-t)} / 2.
        "hjb-lq-tic" => {
            let rho = 0.5;
            let t_max = grid.horizon;
            let period = grid.period;
            Ok(ControlProblem {
                d: 1,
                k_noise: 1,
                drift: Arc::new(|_s, _y, a: &[f64]| vec![a[0]]),
                vol: Arc::new(|_s, _y, _a| vec![0.5]),
                running_cost: Arc::new(move |t, s, _y: &[f64], a: &[f64]| {
                    (-rho * (s - t)).exp() * a[0] * a[0]
                }),
                terminal: SurfaceCoef::with_dt(
                    Arc::new(move |t: f64, y: &[f64]| {
                        (-rho * (t_max - t)).exp() * torus_quadratic(y[0], period)
                    }),
                    Arc::new(move |t: f64, y: &[f64]| {
                        rho * (-rho * (t_max - t)).exp() * torus_quadratic(y[0], period)
                    }),
                ),
                control: ControlSet::ClosedForm(Arc::new(move |t, s, _y, p: &[f64], _q| {
                    vec![-0.5 * p[0] * (rho * (s - t)).exp()]
                })),
                horizon: grid.horizon,
            })
        }
        other => Err(Error::Config(format!("unknown hjb preset '{other}'"))),
    }
}

/// Smooth periodic stand-in for `(y - L/2)^2` on the torus: equals the
/// squared distance to the centre to fourth order and stays C-infinity
/// across the wrap.
pub fn torus_quadratic(y: f64, period: f64) -> f64 {
    let omega = 2.0 * std::f64::consts::PI / period;
    let centre = period / 2.0;
    2.0 * (1.0 - (omega * (y - centre)).cos()) / (omega * omega)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_linear_json() -> String {
        r#"{
            "mode": "solve-linear",
            "grid": { "n_time": 5, "n_space": 8, "horizon": 1.0, "period": 6.283185307179586 },
            "problem": { "kind": "preset", "name": "heat" }
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_json(&minimal_linear_json()).unwrap();
        assert_eq!(cfg.tolerance, 1e-8);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.max_iter, 200);
        assert_eq!(cfg.contraction_cap, 0.9);
        assert_eq!(cfg.grid.d, 1);
    }

    #[test]
    fn negative_tolerance_is_a_semantic_error() {
        let text = minimal_linear_json().replace(
            "\"problem\"",
            "\"tolerance\": -1, \"problem\"",
        );
        let err = RunConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("tolerance must be positive"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let text = minimal_linear_json().replace("\"mode\"", "\"bogus\": 1, \"mode\"");
        let err = RunConfig::from_json(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus"), "{msg}");
        assert!(msg.contains(':'), "{msg}");
    }

    #[test]
    fn expression_payload_parses_with_free_vars_checked() {
        let text = r#"{
            "mode": "solve-nonlinear",
            "grid": { "n_time": 5, "n_space": 8, "horizon": 1.0, "period": 6.283185307179586 },
            "problem": { "kind": "nonlinear", "f": "q + 0.1*sin(n)", "g": "sin(y)" }
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        let prob = build_nonlinear(&cfg).unwrap();
        assert_eq!(prob.d, 1);

        let bad = text.replace("q + 0.1*sin(n)", "q + w");
        let cfg = RunConfig::from_json(&bad).unwrap();
        let err = match build_nonlinear(&cfg) {
            Err(e) => e,
            Ok(_) => panic!("free-variable check did not fire"),
        };
        assert!(err.to_string().contains("'w'"), "{err}");
    }

    #[test]
    fn config_round_trips_through_json() {
        let text = r#"{
            "mode": "verify-fbsde",
            "grid": { "n_time": 9, "n_space": 16, "horizon": 1.0, "period": 6.283185307179586 },
            "tolerance": 1e-9,
            "seed": 7,
            "problem": { "kind": "preset", "name": "linear-manufactured" },
            "fbsde": {
                "n_paths": 100, "n_steps": 32, "y0": [3.14],
                "drift": ["0"], "vol": ["1"]
            }
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        let serialized = serde_json::to_string_pretty(&cfg).unwrap();
        let cfg2 = RunConfig::from_json(&serialized).unwrap();
        assert_eq!(cfg, cfg2);
    }

    #[test]
    fn mode_requirements_are_validated() {
        let text = minimal_linear_json().replace("solve-linear", "verify-fbsde");
        let err = RunConfig::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("fbsde"), "{err}");
    }

    #[test]
    fn hjb_payload_builds() {
        let text = r#"{
            "mode": "solve-hjb",
            "grid": { "n_time": 5, "n_space": 8, "horizon": 1.0, "period": 6.283185307179586 },
            "problem": {
                "kind": "hjb",
                "drift": ["a"],
                "vol": ["0.5"],
                "running_cost": "a^2 + 0.2*cos(y)",
                "terminal": "1 - cos(y)",
                "control": { "lower": [-4.0], "upper": [4.0], "resolution": 32 }
            }
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        let cp = build_hjb(&cfg).unwrap();
        // h(t, s, y, a) at a = 2, y = 0: 4 + 0.2.
        let h = (cp.running_cost)(0.0, 0.0, &[0.0], &[2.0]);
        assert!((h - 4.2).abs() < 1e-14);
        let b = (cp.drift)(0.0, &[0.0], &[1.5]);
        assert_eq!(b[0], 1.5);
    }

    #[test]
    fn torus_quadratic_matches_parabola_near_centre() {
        let period = 2.0;
        let omega = std::f64::consts::PI;
        for dy in [-0.2f64, -0.05, 0.0, 0.1, 0.25] {
            let y = period / 2.0 + dy;
            let exact = dy * dy;
            let approx = torus_quadratic(y, period);
            // Fourth-order agreement: |q(y) - dy^2| <= omega^2 dy^4 / 12.
            let bound = omega * omega * dy.powi(4) / 12.0 + 1e-15;
            assert!((approx - exact).abs() <= bound, "dy={dy}");
        }
    }
}
