//! `plbilevel`: generate instances, run solvers, verify properties, compare
//! solvers over seeds and fit convergence rates.
//!
//! Exit codes: 0 success, 1 I/O failure or failed verification, 2 usage or
//! configuration error, 3 numeric failure (a partial trace is still written).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use pl_bilevel::diagnostics::{self, Metric, RateMode};
use pl_bilevel::experiment;
use pl_bilevel::problems::AnyInstance;
use pl_bilevel::spectral;
use pl_bilevel::suites::{self, Suite};
use pl_bilevel::trace_io::config::{OutputFormat, ProblemSpec};
use pl_bilevel::trace_io::trace::{TraceStatus, TRACE_FORMAT};
use pl_bilevel::trace_io::{self, instance, TraceFile};
use pl_bilevel::{Error, Result};

/// Environment variable naming the default output directory.
const OUT_DIR_ENV: &str = "PLBILEVEL_OUT_DIR";

#[derive(Parser)]
#[command(name = "plbilevel", version, about = "Momentum-based bilevel solvers for PL lower-level problems")]
#[command(after_help = "Exit codes: 0 success, 1 I/O failure or failed verification, \
2 usage or configuration error, 3 numeric failure.\n\
Output directory: --out, else the config's output.directory, else $PLBILEVEL_OUT_DIR, else ./out.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a problem instance (JSON manifest plus binary payload).
    Gen(GenArgs),
    /// Run one solver from a config file or a trace header.
    Run(RunArgs),
    /// Run a property suite and report pass/fail per property.
    Verify(VerifyArgs),
    /// Run several solvers over several seeds on one instance.
    Compare(CompareArgs),
    /// Fit log-log convergence slopes to trace files.
    Rates(RatesArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Plgame,
    Sensing,
    Quad,
}

#[derive(Args)]
struct GenArgs {
    family: Family,
    /// Upper dimension (all families).
    #[arg(long)]
    d: Option<usize>,
    /// Rank of the PL-game covariances (plgame).
    #[arg(long)]
    l: Option<usize>,
    /// Number of samples (plgame).
    #[arg(long)]
    n: Option<usize>,
    /// Factor rank (sensing).
    #[arg(long)]
    r: Option<usize>,
    /// Lower dimension (quad).
    #[arg(long)]
    p: Option<usize>,
    /// Smallest eigenvalue of the lower Hessian (quad).
    #[arg(long)]
    mu: Option<f64>,
    /// Largest eigenvalue of the lower Hessian (quad).
    #[arg(long)]
    lg: Option<f64>,
    /// Replace R² by B·Q so the lower minimizer exists (plgame).
    #[arg(long)]
    range_compatible: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path; defaults to <out dir>/<family>-seed<seed>.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Run config, or the header of an earlier trace.
    #[arg(long)]
    config: PathBuf,
    /// Root seed of the solver substreams (and of the instance when the
    /// config leaves the problem seed unset).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of recorded iterates T.
    #[arg(long)]
    horizon: Option<usize>,
    /// Upper step γ.
    #[arg(long)]
    gamma: Option<f64>,
    /// Lower step λ.
    #[arg(long)]
    lambda: Option<f64>,
    /// Minibatch size of each level.
    #[arg(long)]
    batch: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trace file stem; defaults to <solver>-seed<seed>.
    #[arg(long)]
    name: Option<String>,
    /// Also write a gnuplot script plotting grad_map_norm against t.
    #[arg(long)]
    gnuplot: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// spectral, derivatives, hypergrad, lemma3, lyapunov or bounds.
    suite: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    /// Compare config listing at least two solver entries.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stationarity threshold τ on the mean of grad_map_norm.
    #[arg(long)]
    threshold: Option<f64>,
    /// Rows in the trailing mean; 0 averages from t = 1.
    #[arg(long)]
    threshold_window: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    RunningMean,
    Raw,
}

#[derive(Args)]
struct RatesArgs {
    /// Trace files (CSV with header sidecar, or JSON).
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// Column to fit.
    #[arg(long, default_value = "grad_map_norm")]
    metric: String,
    /// Inclusive range of t to fit over.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [100u64, 10_000])]
    window: Vec<u64>,
    /// Predicted slope; traces more than 0.1 above it are flagged.
    #[arg(long, allow_hyphen_values = true)]
    theory: Option<f64>,
    #[arg(long, value_enum, default_value = "running-mean")]
    mode: ModeArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Rates(a) => cmd_rates(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_non_finite() {
        return 3;
    }
    match e {
        Error::Parse(_) | Error::InvalidConfig(_) | Error::InvalidInput(_) | Error::InsufficientData(_) => 2,
        Error::NonFinite { .. }
        | Error::SymmetryViolation { .. }
        | Error::Singular { .. }
        | Error::Infeasible { .. }
        | Error::OracleUnavailable(_)
        | Error::UnboundedBelow(_) => 3,
        Error::Io(_) | Error::Json(_) => 1,
    }
}

fn out_dir(flag: Option<PathBuf>, configured: Option<&PathBuf>) -> PathBuf {
    flag.or_else(|| configured.cloned())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen

fn cmd_gen(a: GenArgs) -> Result<u8> {
    let (family, allowed): (&str, &[&str]) = match a.family {
        Family::Plgame => ("plgame", &["d", "l", "n", "range_compatible"]),
        Family::Sensing => ("sensing", &["d", "r"]),
        Family::Quad => ("quad", &["d", "p", "mu", "lg"]),
    };
    let given: Vec<(&str, Value)> = [
        ("d", a.d.map(Value::from)),
        ("l", a.l.map(Value::from)),
        ("n", a.n.map(Value::from)),
        ("r", a.r.map(Value::from)),
        ("p", a.p.map(Value::from)),
        ("mu", a.mu.map(Value::from)),
        ("lg", a.lg.map(Value::from)),
        ("range_compatible", a.range_compatible.then_some(Value::Bool(true))),
    ]
    .into_iter()
    .filter_map(|(k, v)| v.map(|v| (k, v)))
    .collect();
    let mut spec = json!({"family": family, "seed": a.seed});
    for (key, value) in given {
        if !allowed.contains(&key) {
            return Err(Error::InvalidConfig(format!(
                "--{} does not apply to {family}",
                key.replace('_', "-")
            )));
        }
        spec[key] = value;
    }
    if matches!(a.family, Family::Quad) {
        let d = spec["d"].as_u64().unwrap_or(10);
        spec["d"] = d.into();
        if spec.get("p").is_none() {
            spec["p"] = d.into();
        }
    }
    let spec: ProblemSpec =
        serde_json::from_value(spec).map_err(|e| Error::InvalidConfig(format!("{family} parameters: {e}")))?;
    let inst = experiment::generate_instance(&spec)?;
    let path = match a.out {
        Some(p) => p,
        None => out_dir(None, None).join(format!("{family}-seed{}.json", a.seed)),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    instance::save_instance(&path, &inst)?;
    println!("wrote {} and {}", path.display(), instance::payload_path(&path).display());
    for line in instance_summary(&inst)? {
        println!("{line}");
    }
    Ok(0)
}

fn spectrum_line(name: &str, m: &nalgebra::DMatrix<f64>) -> Result<String> {
    let eig = spectral::sym_eig(m)?;
    let (lo, hi) = (eig.min_eigenvalue(), eig.max_eigenvalue());
    let rank = eig.eigenvalues().iter().filter(|t| t.abs() > 1e-10 * hi.abs().max(1e-300)).count();
    Ok(format!(
        "{name}: {0}x{0}, rank {rank}, eigenvalues in [{lo:.6e}, {hi:.6e}]",
        m.nrows()
    ))
}

fn instance_summary(inst: &AnyInstance<f64>) -> Result<Vec<String>> {
    Ok(match inst {
        AnyInstance::PlGame(g) => vec![
            format!("plgame: d = {}, l = {}, n = {}", g.params.d, g.params.l, g.params.n),
            spectrum_line("P", &g.p_mat)?,
            spectrum_line("Q", &g.q_mat)?,
            format!(
                "‖R¹‖ = {:.6e}, ‖R²‖ = {:.6e}, effective mu = {:.6e}",
                spectral::spectral_norm(&g.r1_mat),
                spectral::spectral_norm(&g.r2_mat),
                g.effective_mu()
            ),
        ],
        AnyInstance::Sensing(s) => vec![
            format!(
                "sensing: d = {}, r = {}, n = {} (train {}, validation {})",
                s.params.d,
                s.params.r,
                s.params.n(),
                s.train_idx.len(),
                s.val_idx.len()
            ),
            format!("‖H*‖_F = {:.6e}", s.h_star.norm()),
        ],
        AnyInstance::Quad(q) => vec![
            format!("quad: d = {}, p = {}", q.params.d, q.params.p),
            spectrum_line("Q", &q.q_mat)?,
            spectrum_line("hyper-objective Hessian", &q.hyper_hessian())?,
        ],
    })
}

// ---------------------------------------------------------------------------
// run

/// Applies command-line overrides to the config JSON before it is resolved.
fn apply_overrides(text: &str, a: &RunArgs) -> Result<String> {
    let mut value: Value =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("config is not valid JSON: {e}")))?;
    if value.get("format").and_then(Value::as_str) == Some(TRACE_FORMAT) {
        value = value
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Parse("trace header has no `config` member".into()))?;
    }
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Parse("config must be a JSON object".into()))?;
    if let Some(seed) = a.seed {
        obj.insert("seed".into(), seed.into());
    }
    if let Some(name) = &a.name {
        let output = obj.entry("output").or_insert_with(|| json!({}));
        output["name"] = name.clone().into();
    }
    let solver = obj
        .get_mut("solver")
        .and_then(Value::as_object_mut)
        .ok_or_else(|| Error::Parse("config key `solver`: missing".into()))?;
    if let Some(h) = a.horizon {
        solver.remove("T");
        solver.insert("horizon".into(), h.into());
    }
    if let Some(g) = a.gamma {
        solver.insert("gamma".into(), g.into());
    }
    if let Some(l) = a.lambda {
        solver.insert("lambda".into(), l.into());
    }
    if let Some(b) = a.batch {
        solver.insert("batch".into(), b.into());
    }
    Ok(value.to_string())
}

fn write_outputs(trace: &TraceFile, dir: &Path, stem: &str, formats: &[OutputFormat]) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    for format in formats {
        match format {
            OutputFormat::Csv => {
                let path = dir.join(format!("{stem}.csv"));
                trace_io::write_trace(&path, trace)?;
                written.push(path.clone());
                written.push(trace_io::trace::header_path(&path));
            }
            OutputFormat::Json => {
                let path = dir.join(format!("{stem}.json"));
                trace_io::write_trace_json(&path, trace)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

fn gnuplot_script(stem: &str, trace: &TraceFile) -> String {
    format!(
        "set datafile separator \",\"\n\
         set key top right\n\
         set logscale xy\n\
         set xlabel \"t\"\n\
         set ylabel \"grad_map_norm\"\n\
         plot \"{stem}.csv\" using 1:3 skip 1 with lines title \"{} seed {}\"\n",
        trace.header.solver, trace.header.seed
    )
}

fn cmd_run(a: RunArgs) -> Result<u8> {
    let text = fs::read_to_string(&a.config)?;
    let text = apply_overrides(&text, &a)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let cfg = trace_io::parse_config_in(&text, base)?;
    let trace = experiment::execute(&cfg, base, None)?;
    let dir = out_dir(a.out.clone(), cfg.output.directory.as_ref());
    let stem = cfg
        .output
        .name
        .clone()
        .unwrap_or_else(|| format!("{}-seed{}", cfg.solver.name, cfg.seed));
    let mut formats = cfg.output.formats.clone();
    if a.gnuplot && !formats.contains(&OutputFormat::Csv) {
        formats.push(OutputFormat::Csv);
    }
    for path in write_outputs(&trace, &dir, &stem, &formats)? {
        println!("wrote {}", path.display());
    }
    if a.gnuplot {
        let path = dir.join(format!("{stem}.gp"));
        fs::write(&path, gnuplot_script(&stem, &trace))?;
        println!("wrote {}", path.display());
    }
    for w in &trace.header.warnings {
        eprintln!("warning: {w}");
    }
    let last = trace.rows.last().expect("traces are never empty");
    println!(
        "{} seed {}: T = {}, final grad_map_norm {:.6e}, samples_used {}",
        trace.header.solver, trace.header.seed, last.t, last.grad_map_norm, last.samples_used
    );
    if trace.header.status == TraceStatus::NonFinite {
        eprintln!(
            "error: non-finite iterate at t = {}; partial trace written",
            trace.header.failed_at.unwrap_or(last.t + 1)
        );
        return Ok(3);
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// verify

fn cmd_verify(a: VerifyArgs) -> Result<u8> {
    let suite: Suite = a.suite.parse()?;
    let report = suites::run_suite(suite, a.seed)?;
    for check in &report.checks {
        println!("{check}");
    }
    let passed = report.checks.iter().filter(|c| c.passed).count();
    println!("{suite} (seed {}): {passed}/{} properties passed", a.seed, report.checks.len());
    Ok(if report.passed() { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// compare

fn cmd_compare(a: CompareArgs) -> Result<u8> {
    let mut cfg = trace_io::load_compare_config(&a.config)?;
    if let Some(t) = a.threshold {
        if !(t > 0.0) {
            return Err(Error::InvalidConfig("--threshold must be positive".into()));
        }
        cfg.threshold = t;
    }
    if let Some(w) = a.threshold_window {
        cfg.threshold_window = w;
    }
    let base = a.config.parent().unwrap_or(Path::new("."));
    let inst = experiment::load_problem(&cfg.problem, base)?;
    let (report, traces) = experiment::compare(&inst, &cfg)?;

    let dir = out_dir(a.out, cfg.output.directory.as_ref());
    for (trace, outcome) in traces.iter().zip(&report.outcomes) {
        let stem = format!("{}-{}-seed{}", outcome.entry, outcome.solver, outcome.seed);
        write_outputs(trace, &dir, &stem, &cfg.output.formats)?;
    }
    fs::write(dir.join("summary.csv"), experiment::summary_csv(&report))?;
    let verdict = json!({
        "config": cfg,
        "report": report,
        "verdict": {
            "first": cfg.solvers[0].name,
            "second": cfg.solvers[1].name,
            "seeds": cfg.seeds.len(),
            "second_wins": report.second_wins,
        }
    });
    let mut text = serde_json::to_string_pretty(&verdict)?;
    text.push('\n');
    fs::write(dir.join("verdict.json"), text)?;

    let window = match cfg.threshold_window {
        0 => "cumulative mean".to_string(),
        w => format!("trailing mean of {w} rows"),
    };
    println!("threshold {:e} on grad_map_norm ({window})", cfg.threshold);
    println!("{:<6} {:<10} {:>7} {:>16} {:>14} {:>12}", "entry", "solver", "reached", "median samples", "final mean", "final sd");
    for s in &report.summaries {
        println!(
            "{:<6} {:<10} {:>3}/{:<3} {:>16} {:>14.6e} {:>12}",
            s.entry,
            s.solver.to_string(),
            s.reached,
            s.runs,
            s.median_samples.map(|m| format!("{m:.0}")).unwrap_or_else(|| "censored".into()),
            s.final_mean,
            s.final_sd.map(|v| format!("{v:.4e}")).unwrap_or_default()
        );
    }
    println!(
        "{} reached the threshold with fewer samples than {} on {}/{} seeds",
        cfg.solvers[1].name,
        cfg.solvers[0].name,
        report.second_wins,
        cfg.seeds.len()
    );
    println!("wrote {}", dir.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// rates

fn cmd_rates(a: RatesArgs) -> Result<u8> {
    let metric: Metric = a.metric.parse()?;
    let window = (a.window[0], a.window[1]);
    if window.0 > window.1 {
        return Err(Error::InvalidInput(format!("window [{}, {}] is empty", window.0, window.1)));
    }
    let mode = match a.mode {
        ModeArg::RunningMean => RateMode::RunningMean,
        ModeArg::Raw => RateMode::Raw,
    };
    for path in &a.traces {
        let rows = trace_io::read_trace_rows(path)?;
        let fit = diagnostics::fit_rate(&rows, metric, window, mode)?;
        let mut line = format!(
            "{}: slope {:.4} (intercept {:.4}, r2 {:.4}, {} points)",
            path.display(),
            fit.slope,
            fit.intercept,
            fit.r2,
            fit.points
        );
        if let Some(theory) = a.theory {
            let verdict = if fit.slope > theory + 0.1 { "FLAG" } else { "PASS" };
            line.push_str(&format!(" {verdict} against theory {theory}"));
        }
        println!("{line}");
    }
    Ok(0)
}
