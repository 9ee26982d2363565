use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chdg_core::checks;
use chdg_core::error::Error;
use chdg_core::output::{eoc_string, write_csv, write_eoc, write_vtk};
use chdg_core::scenarios::{run_scenario, run_trig_eoc_with, ScenarioConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_SOLVER: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "chdg", version, about = "DG solver for Cahn-Hilliard with degenerate mobility")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write diagnostics.csv, VTK snapshots and the resolved config.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set n=16` or `--set limiter_settings.tol_avg=1e-12`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Convergence study of a trig_eoc config over `levels` meshes.
    Eoc {
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Randomized property checks of forms, limiter and degenerate flux.
    Check {
        #[arg(long, default_value_t = 20250101)]
        seed: u64,
    },
}

fn output_dir(cfg: &ScenarioConfig) -> PathBuf {
    match std::env::var_os("CHDG_OUTPUT_DIR") {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => cfg.output_dir.clone(),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_solver_failure() { EXIT_SOLVER } else { EXIT_USAGE })
}

fn write_config(cfg: &ScenarioConfig, dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn run(config: &Path, overrides: &[String]) -> ExitCode {
    let cfg = match ScenarioConfig::from_file(config, overrides) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let dir = output_dir(&cfg);
    if let Err(e) = write_config(&cfg, &dir) {
        return fail(&e);
    }
    let stride = 10usize;
    let result = run_scenario(&cfg, |r| {
        if r.step % stride == 0 {
            eprintln!(
                "step {:>6}  t = {:.6e}  E = {:.10e}  range [{:.6}, {:.6}]  newton {}",
                r.step, r.time, r.energy, r.min_sample, r.max_sample, r.newton_iters
            );
        }
    });
    let (out, error) = match result {
        Ok(out) => (out, None),
        Err(f) => (f.partial, Some(f.error)),
    };
    if let Err(e) = write_csv(&out.rows, &dir.join("diagnostics.csv")) {
        return fail(&e);
    }
    if cfg.write_vtk {
        for s in out.snapshots.iter().chain(error.is_none().then_some(&out.final_state)) {
            let name = if std::ptr::eq(s, &out.final_state) {
                "final.vtk".to_string()
            } else {
                format!("snapshot_{:06}.vtk", s.step)
            };
            if let Err(e) = write_vtk(s, &dir.join(name)) {
                return fail(&e);
            }
        }
    }
    match error {
        Some(e) => {
            eprintln!("partial diagnostics written to {}", dir.display());
            fail(&e)
        }
        None => {
            eprintln!("{} steps written to {}", out.rows.len().saturating_sub(1), dir.display());
            ExitCode::SUCCESS
        }
    }
}

fn eoc(config: &Path, levels: usize, overrides: &[String]) -> ExitCode {
    let cfg = match ScenarioConfig::from_file(config, overrides) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let dir = output_dir(&cfg);
    let table = match run_trig_eoc_with(&cfg, levels, |r| {
        eprintln!("finished N = {} ({} steps)", r.n, r.steps);
    }) {
        Ok(t) => t,
        Err(e) => return fail(&e),
    };
    print!("{}", eoc_string(&table));
    if let Err(e) = write_eoc(&table, &dir.join("eoc.txt")) {
        return fail(&e);
    }
    if table.failed() {
        return ExitCode::from(EXIT_SOLVER);
    }
    ExitCode::SUCCESS
}

fn check(seed: u64) -> ExitCode {
    let outcomes = match checks::run_all(seed) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    let mut ok = true;
    for c in &outcomes {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // clap uses 2 for usage errors, which is reserved for solver failures here.
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Run { config, overrides } => run(&config, &overrides),
        Command::Eoc {
            config,
            levels,
            overrides,
        } => eoc(&config, levels, &overrides),
        Command::Check { seed } => check(seed),
    }
}
