//! Batch front end: A₂ constants, shift construction, invariant suites,
//! sweeps and reports.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.

mod checks;
mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dyadic_lab::corona::{build_stopping_cubes, carleson_check, corona_diagnostics, decompose_form};
use dyadic_lab::grid::{FiniteModel, StepFunction};
use dyadic_lab::shift::{
    haar_multiplier_uniform, petermichl_uniform, random_shift, ComplexityType, HaarShift,
};
use dyadic_lab::verify::{a2_sweep, fit_slope, random_pair, SweepRow, CSV_HEADER};
use dyadic_lab::weights::{a2_constant, cascade_weight, power_weight, random_a2_weight, Weight};
use serde_json::json;

use crate::checks::{run_check, CheckResult, Instances};
use crate::config::{ExperimentConfig, ModelSpec, Overrides};

#[derive(Parser)]
#[command(name = "dyadic-lab", version, about = "Haar shifts and A2 weights on a finite dyadic model")]
struct Cli {
    /// Worker threads for sweeps (default: available parallelism)
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the dyadic A2 constant of a weight as JSON
    A2(A2Args),
    /// Build a shift and print its JSON descriptor
    BuildShift(BuildShiftArgs),
    /// Run the invariant suites of a config and write report.json
    Verify(RunArgs),
    /// Run an A2 sweep and write sweep.csv, sweep.json, fit.json and plot.svg
    Sweep(RunArgs),
    /// Split the weighted bilinear form for the first weight and seed
    Decompose(RunArgs),
    /// Summarize the files in an output directory
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Power,
    Cascade,
    Explicit,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 1)]
    d: u32,
    #[arg(long = "N")]
    depth: u32,
}

#[derive(Args)]
struct A2Args {
    #[arg(long, value_enum, default_value_t = Family::Power)]
    family: Family,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// Target A2 constant for cascades
    #[arg(long)]
    target: Option<f64>,
    /// Fixed cascade amplitude, used when no target is given
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Leaf values of w, comma separated; implies the explicit family
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    explicit: Option<Vec<f64>>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShiftType {
    HaarMultiplier,
    Petermichl,
    Random,
}

#[derive(Args)]
struct BuildShiftArgs {
    #[arg(long = "type", value_enum)]
    kind: ShiftType,
    #[arg(long, default_value_t = 1)]
    m: u32,
    #[arg(long, default_value_t = 1)]
    n: u32,
    #[arg(long)]
    residue: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    sign: f64,
    #[command(flatten)]
    model: ModelArgs,
    /// Write the JSON here instead of standard output
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write the dense leaf matrix (u32 rows, u32 cols, f64 row-major, little endian)
    #[arg(long)]
    matrix: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON); built-in defaults when omitted
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    checks: Option<Vec<String>>,
    #[arg(long)]
    d: Option<u32>,
    #[arg(long = "N")]
    depth: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    dir: PathBuf,
}

enum Failure {
    Usage(String),
    Check(String),
}

impl From<dyadic_lab::LabError> for Failure {
    fn from(e: dyadic_lab::LabError) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::A2(args) => cmd_a2(args),
        Command::BuildShift(args) => cmd_build_shift(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Sweep(args) => cmd_sweep(args, cli.jobs),
        Command::Decompose(args) => cmd_decompose(args),
        Command::Report(args) => cmd_report(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn model_of(args: &ModelArgs) -> Result<FiniteModel, Failure> {
    Ok(FiniteModel::new(args.d, args.depth)?)
}

fn cmd_a2(args: A2Args) -> Outcome {
    let model = model_of(&args.model)?;
    let family = if args.explicit.is_some() { Family::Explicit } else { args.family };
    let w = match family {
        Family::Power => power_weight(args.alpha.ok_or_else(|| usage("--alpha is required for power weights"))?, model)?,
        Family::Cascade => match (args.target, args.amplitude) {
            (Some(t), _) => random_a2_weight(t, args.seed, model)?,
            (None, Some(a)) => cascade_weight(a, args.seed, model)?,
            (None, None) => return Err(usage("cascade weights need --target or --amplitude")),
        },
        Family::Explicit => {
            let values = args.explicit.ok_or_else(|| usage("--explicit needs leaf values"))?;
            Weight::from_density(StepFunction::from_values(model, values)?)?
        }
    };
    println!("{}", serde_json::to_string(&a2_constant(&w)).expect("serializable"));
    Ok(())
}

fn cmd_build_shift(args: BuildShiftArgs) -> Outcome {
    let model = model_of(&args.model)?;
    let mut shift = match args.kind {
        ShiftType::HaarMultiplier => haar_multiplier_uniform(model, args.sign)?,
        ShiftType::Petermichl => petermichl_uniform(model, args.sign)?,
        ShiftType::Random => random_shift(
            ComplexityType::new(args.m, args.n),
            args.residue.unwrap_or(0),
            args.seed,
            model,
        )?,
    };
    if let (Some(r), false) = (args.residue, matches!(args.kind, ShiftType::Random)) {
        shift = shift.separate(r)?;
    }
    let text = serde_json::to_string_pretty(&shift.to_json()).expect("serializable");
    match &args.output {
        Some(path) => write_file(path, text.as_bytes())?,
        None => println!("{text}"),
    }
    if let Some(path) = &args.matrix {
        let mat = shift.assemble_matrix()?;
        let mut buf = Vec::new();
        mat.write_binary(&mut buf).map_err(|e| usage(e.to_string()))?;
        write_file(path, &buf)?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let base = match &args.config {
        Some(path) => ExperimentConfig::load(path).map_err(Failure::Usage)?,
        None => ExperimentConfig::default(),
    };
    let over = Overrides {
        d: args.d,
        depth: args.depth,
        seed: args.seed,
        output: args.output.clone(),
        checks: args.checks.clone(),
    };
    base.resolve(&over).map_err(Failure::Usage)
}

fn prepare_output(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    let probe = dir.join(".write-test");
    fs::write(&probe, b"").map_err(|e| usage(format!("output directory {} is not writable: {e}", dir.display())))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn instances(cfg: &ExperimentConfig) -> Result<Instances, Failure> {
    let model = cfg.model.build().map_err(Failure::Usage)?;
    let shift = cfg.shift.with_seed(cfg.shift.seed()).build(model)?;
    let separated = match shift.residue() {
        Some(_) => shift.clone(),
        None => shift.separate(0)?,
    };
    if cfg.weights.params.is_empty() {
        return Err(usage("the weight parameter list is empty"));
    }
    let weights = cfg
        .weights
        .params
        .iter()
        .map(|&p| Ok((p, cfg.weights.spec.with_seed(cfg.weights.spec.seed()).build(p, model)?)))
        .collect::<Result<_, Failure>>()?;
    Ok(Instances {
        model,
        shift,
        separated,
        weights,
        seeds: cfg.seeds.clone(),
    })
}

fn cmd_verify(args: RunArgs) -> Outcome {
    let cfg = load_config(&args)?;
    prepare_output(&cfg.output)?;
    let inst = instances(&cfg)?;
    let mut results: Vec<CheckResult> = Vec::new();
    for name in &cfg.checks {
        let r = run_check(name, &inst)?;
        println!("{} {name}: {}", if r.passed { "PASS" } else { "FAIL" }, r.detail);
        results.push(r);
    }
    let passed = results.iter().all(|r| r.passed);
    let report = json!({
        "config": cfg,
        "passed": passed,
        "checks": results,
    });
    write_file(
        &cfg.output.join("report.json"),
        serde_json::to_string_pretty(&report).expect("serializable").as_bytes(),
    )?;
    if passed {
        Ok(())
    } else {
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        Err(Failure::Check(failed.join(", ")))
    }
}

fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(|e| usage(e.to_string()))?;
    for r in rows {
        w.write_record(r.csv_record()).map_err(|e| usage(e.to_string()))?;
    }
    w.into_inner().map_err(|e| usage(e.to_string()))
}

fn cmd_sweep(args: RunArgs, jobs: Option<usize>) -> Outcome {
    let cfg = load_config(&args)?;
    if cfg.weights.params.is_empty() {
        return Err(usage("the weight parameter list is empty"));
    }
    prepare_output(&cfg.output)?;
    let model = cfg.model.build().map_err(Failure::Usage)?;
    let seed = cfg.seed();
    let shift = cfg.shift.with_seed(seed);
    let weights = cfg.weights.spec.with_seed(seed);
    let rows = a2_sweep(&shift, &weights, &cfg.weights.params, model, jobs)?;
    write_file(&cfg.output.join("sweep.csv"), &sweep_csv(&rows)?)?;
    let fit = fit_slope(&rows, cfg.fit_a2_min);
    let fit_json = match &fit {
        Ok(f) => json!({
            "slope": f.slope,
            "intercept": f.intercept,
            "r2": f.r2,
            "points": f.points,
            "a2_min": cfg.fit_a2_min,
        }),
        Err(e) => json!({ "error": e.to_string(), "a2_min": cfg.fit_a2_min }),
    };
    write_file(
        &cfg.output.join("fit.json"),
        serde_json::to_string_pretty(&fit_json).expect("serializable").as_bytes(),
    )?;
    let full = json!({ "config": cfg, "rows": rows, "fit": fit_json });
    write_file(
        &cfg.output.join("sweep.json"),
        serde_json::to_string_pretty(&full).expect("serializable").as_bytes(),
    )?;
    let title = format!("{} at d={}, N={}", rows.first().map(|r| r.shift_id.as_str()).unwrap_or(""), model.dim(), model.depth());
    let svg = plot::sweep_svg(&rows, fit.as_ref().ok(), &title);
    write_file(&cfg.output.join("plot.svg"), svg.as_bytes())?;
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    match &fit {
        Ok(f) => println!("{} rows ({failed} failed), slope {:.4}, r2 {:.4}", rows.len(), f.slope, f.r2),
        Err(e) => println!("{} rows ({failed} failed), no fit: {e}", rows.len()),
    }
    Ok(())
}

fn separated_shift(cfg: &ExperimentConfig, model: FiniteModel) -> Result<HaarShift, Failure> {
    let shift = cfg.shift.with_seed(cfg.shift.seed()).build(model)?;
    Ok(match shift.residue() {
        Some(_) => shift,
        None => shift.separate(0)?,
    })
}

fn cmd_decompose(args: RunArgs) -> Outcome {
    let cfg = load_config(&args)?;
    prepare_output(&cfg.output)?;
    let model = cfg.model.build().map_err(Failure::Usage)?;
    let shift = separated_shift(&cfg, model)?;
    let param = *cfg.weights.params.first().ok_or_else(|| usage("the weight parameter list is empty"))?;
    let w = cfg.weights.spec.build(param, model)?;
    let (f, g) = random_pair(model, cfg.seed());
    let mut report = match decompose_form(&shift, &f, &g, &w) {
        Ok(r) => r,
        Err(e @ dyadic_lab::LabError::IdentityViolation { .. }) => return Err(Failure::Check(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let forest = build_stopping_cubes(&f, &w, shift.kappa(), shift.residue().unwrap_or(0))?;
    let diag = corona_diagnostics(&shift, &f, &w, &forest, None)?;
    report.I = diag.I;
    report.II = diag.II;
    let carleson = carleson_check(&forest, &f, &w)?;
    let out = json!({
        "model": ModelSpec { d: model.dim(), depth: model.depth() },
        "shift": shift.to_json(),
        "weight_param": param,
        "seed": cfg.seed(),
        "report": report,
        "identity_error": report.identity_error(),
        "normUf": diag.normUf,
        "carleson": carleson,
        "forest": forest.to_json(),
    });
    let text = serde_json::to_string_pretty(&out).expect("serializable");
    write_file(&cfg.output.join("decomposition.json"), text.as_bytes())?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Outcome {
    let read = |name: &str| -> Option<serde_json::Value> {
        let text = fs::read_to_string(args.dir.join(name)).ok()?;
        serde_json::from_str(&text).ok()
    };
    let mut found = false;
    let mut failed = Vec::new();
    if let Some(report) = read("report.json") {
        found = true;
        println!("checks:");
        for c in report["checks"].as_array().into_iter().flatten() {
            let ok = c["passed"].as_bool().unwrap_or(false);
            if !ok {
                failed.push(c["name"].as_str().unwrap_or("?").to_string());
            }
            println!(
                "  {} {:<16} {}",
                if ok { "PASS" } else { "FAIL" },
                c["name"].as_str().unwrap_or("?"),
                c["detail"].as_str().unwrap_or("")
            );
        }
    }
    if let Some(fit) = read("fit.json") {
        found = true;
        match fit["slope"].as_f64() {
            Some(s) => println!("fit: slope {s:.4}, r2 {:.4}, {} points", fit["r2"].as_f64().unwrap_or(f64::NAN), fit["points"]),
            None => println!("fit: {}", fit["error"].as_str().unwrap_or("unavailable")),
        }
    }
    if let Ok(text) = fs::read_to_string(args.dir.join("sweep.csv")) {
        found = true;
        println!("sweep: {} rows", text.lines().count().saturating_sub(1));
    }
    if let Some(dec) = read("decomposition.json") {
        found = true;
        println!("decomposition: identity error {}", dec["identity_error"]);
    }
    if !found {
        return Err(usage(format!("no report files in {}", args.dir.display())));
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join(", ")))
    }
}
