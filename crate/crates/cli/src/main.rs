//! Command-line surface over the exit-identity library: evaluate a single
//! identity, compare an analytic value against Monte Carlo, sweep one
//! parameter into CSV curve data, or trace a sample path. Every output
//! embeds a '#'-prefixed manifest so files are reproducible and diffable;
//! fixed seeds give byte-identical reruns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use psr_core::conv::{conv_exit_down, conv_exit_up};
use psr_core::error::{PsrError, Result};
use psr_core::exit::{
    classify_region, direct_exit_two_sided, evaluate, ExitOptions, ExitQuery, ExitValue, Side,
};
use psr_core::levy::ProcessSpec;
use psr_core::mc::{simulate_exit, simulate_path, SimConfig};
use psr_core::resolvent::SolveConfig;
use psr_core::total::{
    total_exit_down, total_exit_one_sided_down, total_exit_one_sided_up, total_exit_up,
    TotalResetContext,
};

/// Two-sided significance gate at the 0.1% level.
const Z_GATE: f64 = 3.29;

#[derive(Parser)]
#[command(
    name = "psr",
    version,
    about = "First-passage identities for spectrally negative processes with partial resetting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate one exit identity and print its diagnostics.
    Exit(ExitArgs),
    /// Compare an analytic value against a Monte Carlo estimate.
    Compare(CompareArgs),
    /// Evaluate along a parameter grid and emit CSV rows.
    Sweep(SweepArgs),
    /// Simulate one sample path and emit a CSV trace.
    Path(PathArgs),
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum SideArg {
    /// Upper barrier first, both barriers finite.
    Up2,
    /// Lower barrier first, both barriers finite.
    Down2,
    /// Upper barrier only.
    Up1,
    /// Lower barrier only.
    Down1,
}

impl SideArg {
    fn label(self) -> &'static str {
        match self {
            SideArg::Up2 => "up2",
            SideArg::Down2 => "down2",
            SideArg::Up1 => "up1",
            SideArg::Down1 => "down1",
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum MethodArg {
    /// Renewal-kernel fixed-point solver.
    Resolvent,
    /// Single solve on the classical driver with folded reset mass.
    Direct,
    /// Convolution-series route; two-sided with 0 <= b only.
    Conv,
    /// Closed forms of the full-reset limit p -> 0.
    Total,
}

impl MethodArg {
    fn label(self) -> &'static str {
        match self {
            MethodArg::Resolvent => "resolvent",
            MethodArg::Direct => "direct",
            MethodArg::Conv => "conv",
            MethodArg::Total => "total",
        }
    }
}

/// Flags shared by every query-shaped command.
#[derive(Args)]
struct QueryArgs {
    /// JSON model file for the driving process.
    #[arg(long)]
    model: PathBuf,
    /// Which passage problem to evaluate.
    #[arg(long, value_enum)]
    side: SideArg,
    /// Killing (discount) rate, > 0.
    #[arg(long)]
    q: f64,
    /// Poisson reset rate, >= 0.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Retention fraction applied at each reset.
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    /// Upper barrier; up2, down2 and up1 need it.
    #[arg(long, allow_negative_numbers = true)]
    a: Option<f64>,
    /// Lower barrier; up2, down2 and down1 need it.
    #[arg(long, allow_negative_numbers = true)]
    b: Option<f64>,
    /// Starting point.
    #[arg(long, allow_negative_numbers = true)]
    x: f64,
}

impl QueryArgs {
    fn load_spec(&self) -> Result<ProcessSpec> {
        let text = std::fs::read_to_string(&self.model)
            .map_err(|e| PsrError::parse(format!("cannot read {}: {e}", self.model.display())))?;
        ProcessSpec::from_json(&text)
    }

    fn build(&self, spec: ProcessSpec) -> Result<ExitQuery> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| {
                PsrError::domain(format!(
                    "side {} requires --{name}",
                    self.side.label()
                ))
            })
        };
        let reject = |v: Option<f64>, name: &str| {
            if v.is_some() {
                Err(PsrError::domain(format!(
                    "side {} takes no --{name}",
                    self.side.label()
                )))
            } else {
                Ok(())
            }
        };
        match self.side {
            SideArg::Up2 => {
                let (b, a) = (need(self.b, "b")?, need(self.a, "a")?);
                ExitQuery::up_two_sided(spec, self.q, self.lambda, self.p, b, a, self.x)
            }
            SideArg::Down2 => {
                let (b, a) = (need(self.b, "b")?, need(self.a, "a")?);
                ExitQuery::down_two_sided(spec, self.q, self.lambda, self.p, b, a, self.x)
            }
            SideArg::Up1 => {
                reject(self.b, "b")?;
                let a = need(self.a, "a")?;
                ExitQuery::up_one_sided(spec, self.q, self.lambda, self.p, a, self.x)
            }
            SideArg::Down1 => {
                reject(self.a, "a")?;
                let b = need(self.b, "b")?;
                ExitQuery::down_one_sided(spec, self.q, self.lambda, self.p, b, self.x)
            }
        }
    }

    fn manifest_params(&self) -> String {
        let mut s = format!(
            "side={} q={} lambda={} p={} x={}",
            self.side.label(),
            self.q,
            self.lambda,
            self.p,
            self.x
        );
        if let Some(b) = self.b {
            let _ = write!(s, " b={b}");
        }
        if let Some(a) = self.a {
            let _ = write!(s, " a={a}");
        }
        s
    }
}

#[derive(Args)]
struct ExitArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Evaluation route.
    #[arg(long, value_enum, default_value_t = MethodArg::Resolvent)]
    method: MethodArg,
    /// Override the solver grid resolution (odd, >= 33).
    #[arg(long)]
    grid_points: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Monte Carlo sample size.
    #[arg(long, default_value_t = 1_000_000)]
    n_paths: u64,
    /// Base seed; per-path streams derive from it.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Brownian step size; defaults to the largest admissible step.
    #[arg(long)]
    dt: Option<f64>,
    /// Censoring time for one-sided queries; defaults to ln(1e6)/q.
    #[arg(long)]
    horizon: Option<f64>,
    /// Accumulation chunks; fixed count pins the reduction order.
    #[arg(long, default_value_t = 64)]
    streams: u32,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum VaryArg {
    P,
    Lambda,
    X,
}

impl VaryArg {
    fn label(self) -> &'static str {
        match self {
            VaryArg::P => "p",
            VaryArg::Lambda => "lambda",
            VaryArg::X => "x",
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Which parameter the grid runs over.
    #[arg(long, value_enum)]
    vary: VaryArg,
    /// Inclusive grid lo:hi:n, e.g. 0.1:0.9:17.
    #[arg(long)]
    range: String,
    #[arg(long, value_enum, default_value_t = MethodArg::Resolvent)]
    method: MethodArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PathArgs {
    /// JSON model file for the driving process.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    /// Starting point.
    #[arg(long, allow_negative_numbers = true)]
    x: f64,
    /// Trace length in time units.
    #[arg(long)]
    horizon: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Brownian sampling resolution.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("PSR_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            // A second initialization (e.g. in tests) fails harmlessly.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                PsrError::Domain(_) | PsrError::Parse(_) => ExitCode::from(2),
                PsrError::Convergence { .. } => ExitCode::from(3),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Exit(args) => cmd_exit(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Path(args) => cmd_path(args),
    }
}

fn manifest(command: &str, model: &Path, params: &str, out: Option<&Path>, seed: Option<u64>) -> String {
    let out_name = out.map_or_else(|| "stdout".to_string(), |p| p.display().to_string());
    let seed_name = seed.map_or_else(|| "none".to_string(), |s| s.to_string());
    format!(
        "# command: {command}\n# model: {}\n# params: {params}\n# output: {out_name}\n# seed: {seed_name}\n# version: {}\n",
        model.display(),
        env!("CARGO_PKG_VERSION"),
    )
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| PsrError::domain(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn solve_config(grid_points: Option<usize>) -> SolveConfig {
    let mut cfg = SolveConfig::default();
    if let Some(n) = grid_points {
        cfg.grid_points = n;
    }
    cfg
}

/// Routes a query through the chosen evaluation path.
fn eval_method(query: &ExitQuery, method: MethodArg, cfg: &SolveConfig) -> Result<ExitValue> {
    match method {
        MethodArg::Resolvent => evaluate(query, cfg, &ExitOptions::default()),
        MethodArg::Direct => match query.side {
            Side::UpTwoSided | Side::DownTwoSided => direct_exit_two_sided(query, cfg),
            _ => Err(PsrError::domain(
                "method direct handles two-sided queries only",
            )),
        },
        MethodArg::Conv => {
            if !matches!(query.side, Side::UpTwoSided | Side::DownTwoSided) || query.b < 0.0 {
                return Err(PsrError::domain(
                    "method conv needs a two-sided query with 0 <= b < a",
                ));
            }
            let value = match query.side {
                Side::UpTwoSided => conv_exit_up(
                    query.spec, query.q, query.lambda, query.p, query.b, query.a, query.x,
                )?,
                _ => conv_exit_down(
                    query.spec, query.q, query.lambda, query.p, query.b, query.a, query.x,
                )?,
            };
            Ok(ExitValue {
                value,
                correction: 0.0,
                solver_residual: 0.0,
                region: classify_region(query.b, query.a),
            })
        }
        MethodArg::Total => match query.side {
            Side::UpTwoSided => {
                let ctx =
                    TotalResetContext::new(query.spec, query.q, query.lambda, query.b, query.a)?;
                total_exit_up(&ctx, query.x)
            }
            Side::DownTwoSided => {
                let ctx =
                    TotalResetContext::new(query.spec, query.q, query.lambda, query.b, query.a)?;
                total_exit_down(&ctx, query.x)
            }
            Side::UpOneSided => {
                total_exit_one_sided_up(query.spec, query.q, query.lambda, query.a, query.x)
            }
            Side::DownOneSided => {
                total_exit_one_sided_down(query.spec, query.q, query.lambda, query.b, query.x)
            }
        },
    }
}

fn cmd_exit(args: ExitArgs) -> Result<ExitCode> {
    let spec = args.query.load_spec()?;
    let query = args.query.build(spec)?;
    let cfg = solve_config(args.grid_points);
    let result = eval_method(&query, args.method, &cfg)?;
    let mut params = args.query.manifest_params();
    let _ = write!(
        params,
        " method={} grid_points={}",
        args.method.label(),
        cfg.grid_points
    );
    let mut text = manifest("exit", &args.query.model, &params, None, None);
    let _ = writeln!(text, "value = {:.14e}", result.value);
    let _ = writeln!(text, "correction = {:.14e}", result.correction);
    let _ = writeln!(text, "solver_residual = {:.14e}", result.solver_residual);
    let _ = writeln!(text, "region = {:?}", result.region);
    emit(&None, &text)?;
    Ok(ExitCode::SUCCESS)
}

/// Largest Brownian step the simulator admits for these barriers.
fn default_dt(query: &ExitQuery) -> f64 {
    let span = query.a - query.b;
    1e-3 * (span * span).min(1.0)
}

fn default_horizon(q: f64) -> f64 {
    6.0 * std::f64::consts::LN_10 / q
}

fn cmd_compare(args: CompareArgs) -> Result<ExitCode> {
    let spec = args.query.load_spec()?;
    let query = args.query.build(spec)?;
    let analytic = evaluate(&query, &SolveConfig::default(), &ExitOptions::default())?.value;
    let sim = SimConfig {
        n_paths: args.n_paths,
        seed: args.seed,
        dt: args.dt.unwrap_or_else(|| default_dt(&query)),
        horizon: args.horizon.unwrap_or_else(|| default_horizon(query.q)),
        stream_count: args.streams,
    };
    let est = simulate_exit(&query, &sim)?;
    // With zero spread the estimate is exact, so demand an exact match
    // instead of a z-score.
    let (z, pass) = if est.stderr > 0.0 {
        let z = (analytic - est.mean) / est.stderr;
        (z, z.abs() <= Z_GATE)
    } else {
        let gap = (analytic - est.mean).abs();
        (0.0, gap <= 1e-12)
    };
    let mut params = args.query.manifest_params();
    let _ = write!(
        params,
        " n_paths={} dt={} horizon={} streams={}",
        args.n_paths, sim.dt, sim.horizon, args.streams
    );
    let mut text = manifest("compare", &args.query.model, &params, args.out.as_deref(), Some(args.seed));
    text += "analytic,mc_mean,mc_stderr,z_score\n";
    let _ = writeln!(
        text,
        "{:.14e},{:.14e},{:.14e},{:.14e}",
        analytic, est.mean, est.stderr, z
    );
    emit(&args.out, &text)?;
    if pass {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "statistical mismatch: analytic {analytic:.8e} vs mc {:.8e} (stderr {:.3e})",
            est.mean, est.stderr
        );
        Ok(ExitCode::from(4))
    }
}

fn parse_range(text: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(PsrError::parse(format!(
            "range {text:?} is not of the form lo:hi:n"
        )));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| PsrError::parse(format!("bad range endpoint {:?}", parts[0])))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| PsrError::parse(format!("bad range endpoint {:?}", parts[1])))?;
    let n: usize = parts[2]
        .parse()
        .map_err(|_| PsrError::parse(format!("bad range count {:?}", parts[2])))?;
    if n < 1 || !lo.is_finite() || !hi.is_finite() || hi < lo {
        return Err(PsrError::domain(format!(
            "range needs finite lo <= hi and n >= 1, got {text:?}"
        )));
    }
    Ok((lo, hi, n))
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let spec = args.query.load_spec()?;
    let (lo, hi, n) = parse_range(&args.range)?;
    let cfg = SolveConfig::default();
    let mut params = args.query.manifest_params();
    let _ = write!(
        params,
        " vary={} range={} method={}",
        args.vary.label(),
        args.range,
        args.method.label()
    );
    let mut text = manifest("sweep", &args.query.model, &params, args.out.as_deref(), None);
    let _ = writeln!(text, "{},value", args.vary.label());
    for i in 0..n {
        let v = if n == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        };
        let mut point = QueryArgs {
            model: args.query.model.clone(),
            side: args.query.side,
            q: args.query.q,
            lambda: args.query.lambda,
            p: args.query.p,
            a: args.query.a,
            b: args.query.b,
            x: args.query.x,
        };
        match args.vary {
            VaryArg::P => point.p = v,
            VaryArg::Lambda => point.lambda = v,
            VaryArg::X => point.x = v,
        }
        let query = point.build(spec)?;
        let result = eval_method(&query, args.method, &cfg)?;
        let _ = writeln!(text, "{v},{:.14e}", result.value);
    }
    emit(&args.out, &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_path(args: PathArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.model)
        .map_err(|e| PsrError::parse(format!("cannot read {}: {e}", args.model.display())))?;
    let spec = ProcessSpec::from_json(&text)?;
    let cfg = SimConfig {
        seed: args.seed,
        dt: args.dt,
        ..SimConfig::default()
    };
    let rows = simulate_path(spec, args.lambda, args.p, args.x, args.horizon, &cfg)?;
    let params = format!(
        "lambda={} p={} x={} horizon={} dt={}",
        args.lambda, args.p, args.x, args.horizon, args.dt
    );
    let mut text = manifest("path", &args.model, &params, args.out.as_deref(), Some(args.seed));
    text += "t,u,event\n";
    for row in &rows {
        let _ = writeln!(text, "{:.14e},{:.14e},{}", row.t, row.u, row.event.label());
    }
    emit(&args.out, &text)?;
    Ok(ExitCode::SUCCESS)
}
