//! Command-line front end for `wiener-bayes`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure,
//! 3 some replicates failed (a `failures.json` manifest is written).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use wiener_bayes::experiment::output::{format_float, CsvTable};
use wiener_bayes::experiment::{
    emit_results, run_benchmark, run_design, run_estimate, run_validation, ExperimentConfig, OutputFormat,
};
use wiener_bayes::Error;

#[derive(Parser, Debug)]
#[command(name = "wiener-bayes", version, about = "Bayesian identification and input design for Wiener models")]
struct Cli {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.n_reps`.
    #[arg(long, global = true)]
    reps: Option<u64>,
    /// Output directory; overrides `run.output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Both)]
    format: Format,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
            Format::Both => OutputFormat::Both,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bayesian estimate from `run.measurements` under the nominal input.
    Estimate,
    /// Optimize the input trajectory only.
    Design,
    /// Run benchmark 1, 2, 3 or 4.
    Benchmark {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=4))]
        id: u8,
    },
    /// Check analytic invariants on the configured model.
    Validate,
}

enum Failure {
    Config(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Numerical(other.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(reps) = cli.reps {
        cfg.run.n_reps = reps;
    }
    if let Some(out) = &cli.out {
        cfg.run.output = out.display().to_string();
    }
    if let Command::Benchmark { id } = cli.command {
        cfg.run.benchmark = id;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).and_then(|_| std::fs::write(dir.join(name), bytes)).map_err(|e| {
        Failure::Numerical(format!("cannot write {}: {e}", dir.join(name).display()))
    })?;
    println!("wrote {}", dir.join(name).display());
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode, Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(format!("cannot start {n} worker threads: {e}")))?;
    }
    let cfg = load_config(cli)?;
    let dir = PathBuf::from(&cfg.run.output);
    let hash = cfg.sha256();
    match cli.command {
        Command::Estimate => {
            let post = run_estimate(&cfg)?;
            let report = json!({
                "config_sha256": hash,
                "seed": cfg.run.seed,
                "mu_pos": post.mu_pos.as_slice(),
                "sigma_pos": post.sigma_pos.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
                "j_star": post.sigma_pos.trace(),
            });
            let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Numerical(e.to_string()))?;
            println!("{text}");
            write_file(&dir, "estimate.json", text.as_bytes())?;
        }
        Command::Design => {
            let out = run_design(&cfg)?;
            let n_x = cfg.state_dim();
            let n_u = cfg.b_matrix()?.ncols();
            let width = n_x.max(n_u);
            let mut header = vec!["row".to_string()];
            header.extend((0..width).map(|i| format!("v{i}")));
            let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
            let mut table = CsvTable::new(&hash, cfg.run.seed, &header_refs)?;
            let u = out.u_star.stacked.as_slice();
            let pad = |label: String, values: &[f64]| {
                let mut row = vec![label];
                row.extend(values.iter().map(|v| format_float(*v)));
                row.resize(width + 1, String::new());
                row
            };
            table.row(pad("mu_x0".into(), &u[..n_x]))?;
            for (t, chunk) in u[n_x..].chunks(n_u).enumerate() {
                table.row(pad(format!("u_{t}"), chunk))?;
            }
            write_file(&dir, "design.csv", &table.into_bytes()?)?;
            let report = json!({
                "config_sha256": hash,
                "seed": cfg.run.seed,
                "j_initial": out.j_history[0],
                "j_final": out.j_history.last(),
                "iterations": out.iterations,
                "termination": format!("{:?}", out.termination),
                "j_history": out.j_history,
            });
            let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Numerical(e.to_string()))?;
            write_file(&dir, "design.json", text.as_bytes())?;
            println!(
                "J* {:.6e} -> {:.6e} after {} iterations ({:?})",
                out.j_history[0],
                out.j_history.last().copied().unwrap_or(f64::NAN),
                out.iterations,
                out.termination
            );
        }
        Command::Benchmark { .. } => {
            let output = run_benchmark(&cfg)?;
            for path in emit_results(&output, &dir, cli.format.into())? {
                println!("wrote {}", path.display());
            }
            if output.summary.failed_replicates > 0 {
                eprintln!("{} replicates had failures; see failures.json", output.summary.failed_replicates);
                return Ok(ExitCode::from(3));
            }
        }
        Command::Validate => {
            let checks = run_validation(&cfg)?;
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            if !ok {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
