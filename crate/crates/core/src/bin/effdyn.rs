use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use effdyn::cli::{
    cmd_bounds, cmd_coefficients, cmd_cosim, cmd_frobenius, cmd_scaling, cmd_simulate, resolve_seed,
    run_case_experiment, run_pipeline, Case, CliError, ExperimentConfig, SEED_ENV,
};

#[derive(Parser)]
#[command(
    name = "effdyn",
    version,
    about = "Effective dynamics: estimation, co-simulation and error bounds"
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration; EFFDYN_SEED overrides both.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trajectory of the full dynamics.
    Simulate,
    /// Estimate the effective coefficients and write the model file.
    Coefficients,
    /// Co-simulate full and effective dynamics with coupled noise.
    Cosim,
    /// Sweep a parameter and fit the error scaling.
    Scaling {
        /// Run a named case study (case1, case2, case3) instead of the configured system.
        #[arg(long)]
        case: Option<String>,
    },
    /// Check the Frobenius integrability residual; exits 1 above tolerance.
    Frobenius,
    /// Tabulate an error bound as CSV.
    Bounds,
    /// Full run with manifest.
    Pipeline,
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Invalid("--config is required".into()))?;
    let cfg = ExperimentConfig::load(&path)?;
    let env = std::env::var(SEED_ENV).ok();
    let seed = resolve_seed(cfg.seed, cli.seed, env.as_deref())?;
    let cfg = cfg.with_seed(seed);
    let out = cli.out.unwrap_or_else(|| cfg.output.dir.clone());

    match cli.command {
        Command::Simulate => {
            let file = cmd_simulate(&cfg, &out)?;
            println!("wrote {}", file.display());
        }
        Command::Coefficients => {
            let model = cmd_coefficients(&cfg, &out)?;
            println!(
                "estimated {} nodes ({:?}) into {}",
                model.grid.len(),
                model.method,
                out.display()
            );
        }
        Command::Cosim => {
            let rep = cmd_cosim(&cfg, &out)?;
            let (m, se) = rep.final_sup();
            println!("mean squared sup-error at t = {}: {m:.6e} ± {se:.2e}", rep.horizon);
            if rep.unreliable {
                eprintln!("warning: effective path left the grid too often; result flagged unreliable");
            }
        }
        Command::Scaling { case } => {
            let table = match case {
                Some(c) => {
                    let case: Case = c.parse()?;
                    let t = run_case_experiment(case, &cfg)?;
                    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime {
                        stage: "output",
                        source: e.into(),
                    })?;
                    t.write_csv(&out.join("scaling.csv")).map_err(|e| CliError::Runtime {
                        stage: "write",
                        source: e,
                    })?;
                    t
                }
                None => cmd_scaling(&cfg, &out)?,
            };
            for r in &table.rows {
                println!(
                    "{} = {}: {:.6e} ± {:.2e} [{}]",
                    table.parameter, r.value, r.mean_sq_sup, r.se, r.status
                );
            }
            match table.fit {
                Some(f) => println!("slope {:.4} ± {:.4}", f.slope, f.stderr),
                None => println!("fit skipped: fewer than 3 successful points"),
            }
        }
        Command::Frobenius => {
            let (scan, ok) = cmd_frobenius(&cfg, &out)?;
            println!("max residual {:.3e} (tolerance {:.1e})", scan.max(), cfg.frobenius_tol);
            if !ok {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Bounds => {
            let rows = cmd_bounds(&cfg, &out)?;
            println!("t,bound");
            for (t, b) in rows {
                println!("{t},{b}");
            }
        }
        Command::Pipeline => {
            let m = run_pipeline(&cfg, &out)?;
            println!(
                "pipeline finished in {:.1} s; {} outputs in {}",
                m.wall_clock_seconds,
                m.outputs.len(),
                out.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("effdyn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
