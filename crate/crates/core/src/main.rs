use clap::Parser;
use nonlocal_pde::config::{Mode, RunConfig};
use nonlocal_pde::pipeline::{run_refinement_study, run_solver_pipeline};
use std::path::PathBuf;
use std::process::ExitCode;

/// Batch solver for diagonal-coupled parabolic PDEs on the triangular time
/// domain: linear and fully nonlinear equations, an equilibrium-HJB
/// front-end, manufactured sources, norm reports, and a Monte Carlo
/// consistency check of the stochastic representation.
#[derive(Parser)]
#[command(name = "nonlocal-pde", version, about)]
struct Cli {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,

    /// Override the config's mode (solve-linear, solve-nonlinear, solve-hjb,
    /// verify-fbsde, manufacture, norms).
    #[arg(long)]
    mode: Option<String>,

    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override the random seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Run this many extra grid-refinement levels and emit a convergence
    /// table instead of a single solve.
    #[arg(long)]
    refine: Option<u32>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let diagnostic = serde_json::json!({
                "error": err.to_string(),
                "exit_code": err.exit_code(),
            });
            eprintln!("{diagnostic}");
            // Best effort: leave the diagnostic next to the other artifacts.
            if let Some(dir) = cli.out.as_deref() {
                let _ = std::fs::create_dir_all(dir);
                let _ = std::fs::write(dir.join("error.json"), diagnostic.to_string());
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> nonlocal_pde::Result<()> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(mode) = &cli.mode {
        cfg.mode = mode.parse::<Mode>()?;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    match cli.refine {
        Some(levels) => {
            let rows = run_refinement_study(&cfg, levels)?;
            for row in &rows {
                println!(
                    "level {}: n_time={} n_space={} error={:.6e}{}",
                    row.level,
                    row.n_time,
                    row.n_space,
                    row.error,
                    row.ratio
                        .map(|r| format!(" ratio={r:.3}"))
                        .unwrap_or_default()
                );
            }
        }
        None => {
            let artifacts = run_solver_pipeline(&cfg)?;
            for file in &artifacts.files {
                println!("wrote {}", file.display());
            }
        }
    }
    Ok(())
}
