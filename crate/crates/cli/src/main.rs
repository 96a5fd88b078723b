//! Command-line harness for the minbackprop experiments.
//!
//! Exit codes: 0 pass, 1 acceptance check failed, 2 usage or configuration
//! error, 3 numerical failure.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use minbackprop::backward::{BackwardMethod, Problem};
use minbackprop::experiments::{
    bench_essential, check_fundamental_toy, check_registration_toy, flag, gradcheck, p3p_example, toy_fundamental,
    toy_registration, trajectory_gap, BenchOptions, Check, ExperimentError, GradcheckOptions, ToyOptions,
};
use minbackprop::parallel::Exec;
use minbackprop::report::{RunReport, Value};
use minbackprop::synthetic::{RegistrationToyConfig, SceneConfig, FUNDAMENTAL_TOY_SEED};
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(name = "minbackprop", version, about = "Backpropagation through minimal solvers")]
struct Cli {
    /// Base seed (each command has its own default).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the CSV report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write the run summary as JSON to this file.
    #[arg(long, global = true)]
    json: Option<PathBuf>,
    /// JSON file with defaults for any flag; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate the worked P3P example against its printed values.
    P3pExample {
        /// Run with a deliberately wrong dh/dx; the comparison must fail.
        #[arg(long)]
        corrupt_self_test: bool,
    },
    /// Learn registration weights with one corrupted correspondence.
    ToyRegistration(ToyArgs),
    /// Learn 8-point weights with one outlier match.
    ToyFundamental(ToyArgs),
    /// Compare analytic backward passes with finite differences.
    Gradcheck {
        /// p3p, registration, fundamental, essential or all.
        #[arg(long)]
        problem: Option<String>,
        /// Random instances per problem (default 100).
        #[arg(long)]
        trials: Option<usize>,
        /// Relative-error threshold (per-problem default when omitted).
        #[arg(long)]
        tol: Option<f64>,
        /// Run trials on one thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Time the 5-point forward pass and its backward passes.
    BenchEssential {
        /// Random minimal samples (default 1000).
        #[arg(long)]
        trials: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct ToyArgs {
    /// Gradient steps (default 30).
    #[arg(long)]
    iters: Option<usize>,
    /// Step size, non-negative (default 0.1 for registration, 1000 for fundamental).
    #[arg(long)]
    lr: Option<f64>,
    /// ift-direct, kkt-ift, svd-closed-form or finite-difference.
    #[arg(long)]
    backward: Option<BackwardMethod>,
}

/// Contents of `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    iters: Option<usize>,
    lr: Option<f64>,
    backward: Option<String>,
    trials: Option<usize>,
    tol: Option<f64>,
    problem: Option<String>,
    registration: Option<RegistrationToyConfig>,
    scene: Option<SceneConfig>,
}

/// Largest per-iteration weight gap allowed between the exact backward passes.
const TRAJECTORY_TOL: f64 = 1e-3;

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::NotApplicable { .. } | ExperimentError::Config(_) => Failure::Usage(e.to_string()),
            ExperimentError::Synthetic(minbackprop::synthetic::SyntheticError::InvalidConfig(_)) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, Failure> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn toy_options(args: &ToyArgs, cfg: &FileConfig, base: ToyOptions, seed: u64) -> Result<ToyOptions, Failure> {
    let method = match (&args.backward, &cfg.backward) {
        (Some(m), _) => *m,
        (None, Some(s)) => s.parse().map_err(Failure::Usage)?,
        (None, None) => base.method,
    };
    let opts = ToyOptions {
        iters: args.iters.or(cfg.iters).unwrap_or(base.iters),
        lr: args.lr.or(cfg.lr).unwrap_or(base.lr),
        method,
        seed,
    };
    if opts.iters == 0 {
        return Err(Failure::Usage("iters must be at least 1".into()));
    }
    Ok(opts)
}

fn parse_problems(s: &str) -> Result<Vec<Problem>, Failure> {
    if s == "all" {
        Ok(Problem::ALL.to_vec())
    } else {
        s.parse().map(|p| vec![p]).map_err(Failure::Usage)
    }
}

/// Report plus the acceptance checks it was judged by.
struct Outcome {
    command: &'static str,
    report: RunReport,
    checks: Vec<Check>,
}

fn run(cli: &Cli) -> Result<Outcome, Failure> {
    let cfg = load_config(&cli.config)?;
    let seed = cli.seed.or(cfg.seed);
    Ok(match &cli.command {
        Command::P3pExample { corrupt_self_test } => {
            let report = p3p_example(*corrupt_self_test)?;
            let checks = ["pass_jx", "pass_ja", "pass_dxda"]
                .iter()
                .map(|k| Check::new(k, flag(&report, k), String::new()))
                .chain([Check::new("under 1 s", report.summary_value("time_ms").and_then(Value::as_f64).is_some_and(|t| t < 1000.0), String::new())])
                .collect();
            Outcome { command: "p3p-example", report, checks }
        }
        Command::ToyRegistration(args) => {
            let mut toy = cfg.registration.unwrap_or_default();
            if let Some(s) = seed {
                toy.seed = s;
            }
            let opts = toy_options(args, &cfg, ToyOptions::registration(), toy.seed)?;
            let report = toy_registration(&toy, &opts)?;
            let mut checks = vec![check_registration_toy(&report)];
            // the two exact backward passes must trace the same weights
            let other = match opts.method {
                BackwardMethod::KktIft => Some(BackwardMethod::SvdClosedForm),
                BackwardMethod::SvdClosedForm => Some(BackwardMethod::KktIft),
                _ => None,
            };
            if let Some(method) = other {
                let gap = trajectory_gap(&report, &toy_registration(&toy, &ToyOptions { method, ..opts })?);
                checks.push(Check::new("kkt vs svd trajectories", gap < TRAJECTORY_TOL, format!("max gap {gap:.1e}")));
            }
            Outcome { command: "toy-registration", report, checks }
        }
        Command::ToyFundamental(args) => {
            let mut scene = cfg.scene.unwrap_or_else(|| SceneConfig::fundamental_toy(FUNDAMENTAL_TOY_SEED));
            if let Some(s) = seed {
                scene.seed = s;
            }
            let opts = toy_options(args, &cfg, ToyOptions::fundamental(), scene.seed)?;
            let report = toy_fundamental(&scene, &opts)?;
            let checks = vec![check_fundamental_toy(&report)];
            Outcome { command: "toy-fundamental", report, checks }
        }
        Command::Gradcheck { problem, trials, tol, sequential } => {
            let problems = parse_problems(problem.as_deref().or(cfg.problem.as_deref()).unwrap_or("all"))?;
            let opts = GradcheckOptions {
                trials: trials.or(cfg.trials).unwrap_or(100),
                seed: seed.unwrap_or(0),
                tol: tol.or(cfg.tol),
                exec: if *sequential { Exec::Sequential } else { Exec::best() },
                ..GradcheckOptions::default()
            };
            if opts.trials == 0 {
                return Err(Failure::Usage("trials must be at least 1".into()));
            }
            if opts.tol.is_some_and(|t| !(t > 0.0)) {
                return Err(Failure::Usage("tol must be positive".into()));
            }
            let mut merged: Option<RunReport> = None;
            let mut checks = Vec::new();
            for p in problems {
                let r = gradcheck(p, &opts);
                checks.push(Check::new(p.name(), flag(&r, "pass"), String::new()));
                let m = merged.get_or_insert_with(|| RunReport::new(r.columns.clone()));
                m.rows.extend(r.rows);
                m.summary.extend(r.summary.into_iter().map(|(k, v)| (format!("{}.{k}", p.name()), v)));
            }
            Outcome { command: "gradcheck", report: merged.unwrap_or_default(), checks }
        }
        Command::BenchEssential { trials } => {
            let opts = BenchOptions { trials: trials.or(cfg.trials).unwrap_or(1000), seed: seed.unwrap_or(0), with_fd: true };
            if opts.trials == 0 {
                return Err(Failure::Usage("trials must be at least 1".into()));
            }
            let report = bench_essential(&opts);
            let get = |k: &str| report.summary_value(k).and_then(Value::as_f64).unwrap_or(f64::NAN);
            let checks = vec![
                Check::new("stability", get("stability_pct") == 100.0, format!("{}%", get("stability_pct"))),
                Check::new("speedup", get("speedup") >= 5.0, format!("{:.1}x", get("speedup"))),
            ];
            Outcome { command: "bench-essential", report, checks }
        }
    })
}

fn write_outputs(cli: &Cli, out: &Outcome) -> Result<(), Failure> {
    let io_err = |e: &dyn std::fmt::Display| Failure::Usage(format!("cannot write report: {e}"));
    match &cli.out {
        Some(path) => {
            let file = File::create(path).map_err(|e| io_err(&format!("{}: {e}", path.display())))?;
            out.report.write_csv(file).map_err(|e| io_err(&e))?;
        }
        None => out.report.write_csv(io::stdout().lock()).map_err(|e| io_err(&e))?,
    }
    if let Some(path) = &cli.json {
        let summary: serde_json::Map<String, serde_json::Value> = out
            .report
            .summary
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::to_value(v).unwrap_or(serde_json::Value::Null)))
            .collect();
        let checks: serde_json::Map<String, serde_json::Value> =
            out.checks.iter().map(|c| (c.name.clone(), serde_json::Value::Bool(c.pass))).collect();
        let pass = out.checks.iter().all(|c| c.pass);
        let doc = serde_json::json!({ "command": out.command, "pass": pass, "checks": checks, "summary": summary });
        let file = File::create(path).map_err(|e| io_err(&format!("{}: {e}", path.display())))?;
        let mut w = io::BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| io_err(&e))?;
        writeln!(w).map_err(|e| io_err(&e))?;
    }
    let mut err = io::stderr().lock();
    for (k, v) in &out.report.summary {
        let _ = writeln!(err, "{k}: {v}");
    }
    for c in &out.checks {
        let detail = if c.detail.is_empty() { String::new() } else { format!(" ({})", c.detail) };
        let _ = writeln!(err, "{} {}{detail}", if c.pass { "PASS" } else { "FAIL" }, c.name);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(&cli).and_then(|out| write_outputs(&cli, &out).map(|_| out));
    match result {
        Ok(out) if out.checks.iter().all(|c| c.pass) => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}
