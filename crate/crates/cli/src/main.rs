use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use evidloss::metrics::Scorer;
use evidloss::pipeline::{self, RunConfig, SweepFunction};
use evidloss::verify;

#[derive(Parser)]
#[command(
    name = "evidloss",
    version,
    about = "Evidential loss verification, sweeps and toy training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run verification suites and write a JSON report.
    Verify {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the gradient gap, its derivative or the Beta ratio.
    Sweep {
        #[arg(long, value_parser = parse_function)]
        function: SweepFunction,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        alpha0: Vec<f64>,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        gamma: Vec<f64>,
        #[arg(long, default_value_t = 99)]
        pbar_steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on synthetic data and write its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's output_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a saved model on the test split of a data file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the model head's natural scorer.
        #[arg(long)]
        scorer: Option<Scorer>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_function(s: &str) -> std::result::Result<SweepFunction, String> {
    s.parse()
        .map_err(|_| format!("expected one of f, g, grad-gap-derivative; got `{s}`"))
}

enum Outcome {
    Success,
    Failed,
    Usage(String),
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_verify(suite: &str, seed: u64, cases: usize, out: Option<&Path>) -> Result<Outcome> {
    if let Err(e) = verify::expand_selector(suite) {
        return Ok(Outcome::Usage(e.to_string()));
    }
    if cases == 0 {
        return Ok(Outcome::Usage("--cases must be positive".into()));
    }
    let report = verify::run_proposition_suite(suite, seed, cases)?;
    for c in &report.checks {
        println!(
            "{:<20} {:<30} {:>6}/{:<6} skipped {}",
            c.suite, c.check, c.passes, c.total, c.skipped
        );
    }
    for note in &report.notes {
        println!("note: {note}");
    }
    println!(
        "{} of {} checks passed, {} skipped, {:.1}s",
        report.passes,
        report.total,
        report.skipped,
        report.wall_time.as_secs_f64()
    );
    if let Some(path) = out {
        write(path, &pipeline::report_json(&report)?)?;
    }
    Ok(if report.is_success() {
        Outcome::Success
    } else {
        Outcome::Failed
    })
}

fn cmd_sweep(
    function: SweepFunction,
    alpha0: &[f64],
    gamma: &[f64],
    steps: usize,
    out: &Path,
) -> Result<Outcome> {
    if alpha0.is_empty() || gamma.is_empty() || steps == 0 {
        return Ok(Outcome::Usage(
            "--alpha0, --gamma and --pbar-steps must be nonempty".into(),
        ));
    }
    let rows = pipeline::sweep(function, alpha0, gamma, steps)?;
    let mut buf = Vec::new();
    pipeline::write_sweep_csv(function, &rows, &mut buf)?;
    write(out, std::str::from_utf8(&buf)?)?;
    Ok(Outcome::Success)
}

fn cmd_train(config: &Path, out_dir: Option<&Path>) -> Result<Outcome> {
    let cfg = RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let dir = out_dir.unwrap_or(&cfg.output_dir);
    let out = pipeline::run_to_dir(&cfg, dir)?;
    let r = &out.report;
    println!(
        "trained {} epochs; test accuracy {:.4}, ece {:.4}, ood aupr {}",
        cfg.train.epochs,
        r.accuracy,
        r.ece,
        r.ood_aupr.map_or("n/a".to_string(), |v| format!("{v:.4}"))
    );
    println!("artifacts in {}", dir.display());
    Ok(Outcome::Success)
}

fn cmd_eval(model: &Path, data: &Path, scorer: Option<Scorer>, out: &Path) -> Result<Outcome> {
    let report = pipeline::evaluate_files(model, data, scorer)?;
    write(out, &pipeline::report_json(&report)?)?;
    Ok(Outcome::Success)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify {
            suite,
            seed,
            cases,
            out,
        } => cmd_verify(suite, *seed, *cases, out.as_deref()),
        Command::Sweep {
            function,
            alpha0,
            gamma,
            pbar_steps,
            out,
        } => cmd_sweep(*function, alpha0, gamma, *pbar_steps, out),
        Command::Train { config, out_dir } => cmd_train(config, out_dir.as_deref()),
        Command::Eval {
            model,
            data,
            scorer,
            out,
        } => cmd_eval(model, data, *scorer, out),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Ok(Outcome::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
