//! `ptadjust` command-line front end.
//!
//! Exit codes: 0 ok, 2 bad input data, 3 statistical failure, 4 bad
//! configuration or flags.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ptadjust::design::Threshold;
use ptadjust::estimators::{analyze_trial, EstimateReport, Interval, Method};
use ptadjust::exec::Threads;
use ptadjust::frt::{run_frt_many, FrtResult, FrtSpec, Mode, Statistic, DEFAULT_ENUMERATION_CAP, DEFAULT_REFDRAWS, DEFAULT_REPS};
use ptadjust::io::{read_trial_csv_path, write_population_csv};
use ptadjust::ols::HcVariant;
use ptadjust::population::generate_population;
use ptadjust::refdist::{pt_specific_ci, AdjustArm, MixtureReference, PtCiInputs};
use ptadjust::simharness::{run_simulation, SimulationConfig, SCHEMA_VERSION};
use ptadjust::Error;

#[derive(Parser)]
#[command(name = "ptadjust", version, about = "Covariate adjustment after a balance test, with randomization inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the average effect from a trial CSV (header z,y,x1..xJ).
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo study described by a TOML config.
    Simulate(SimulateArgs),
    /// Fisher randomization test on a trial CSV.
    Frt(FrtArgs),
    /// Quantile table of the preliminary-test limit law, as CSV.
    Refdist(RefdistArgs),
}

#[derive(Args, Clone)]
#[group(required = true, multiple = false)]
struct ThresholdArgs {
    /// Balance threshold on the Mahalanobis distance (`inf` never adjusts).
    #[arg(long = "a")]
    a: Option<String>,
    /// Threshold as a chi-square quantile level, e.g. 0.95.
    #[arg(long = "a-quantile")]
    a_quantile: Option<f64>,
}

impl ThresholdArgs {
    fn threshold(&self) -> Result<Threshold, Error> {
        match (&self.a, self.a_quantile) {
            (Some(a), _) => a.parse(),
            (None, Some(p)) => Ok(Threshold::ChiSquareQuantile(p)),
            (None, None) => Err(Error::InvalidConfig("one of --a or --a-quantile is required".into())),
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    csv: PathBuf,
    #[command(flatten)]
    threshold: ThresholdArgs,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value = "HC2")]
    hc: HcVariant,
    /// Also report intervals built from the plug-in preliminary-test law.
    #[arg(long)]
    pt_specific_ci: bool,
    /// Run these FRT statistics on the data as well (comma separated).
    #[arg(long, value_delimiter = ',')]
    statistic: Vec<Statistic>,
    #[arg(long, default_value = "unconditional")]
    mode: Mode,
    #[arg(long, default_value_t = DEFAULT_REPS)]
    reps: usize,
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    enumeration_cap: u64,
    #[arg(long, default_value_t = DEFAULT_REFDRAWS)]
    refdraws: usize,
    /// Required for the FRT and the preliminary-test-specific intervals.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct SimulateArgs {
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of replications.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long = "a")]
    a: Option<String>,
    #[arg(long = "a-quantile")]
    a_quantile: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    hc: Option<HcVariant>,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Write `<prefix>.csv` and `<prefix>.json` instead of JSON on stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write error, quantile, p-value and histogram CSVs next to `--out`.
    #[arg(long, requires = "out")]
    emit_plot_data: bool,
    /// Write the first generated population to this CSV.
    #[arg(long)]
    export_population: Option<PathBuf>,
}

#[derive(Args)]
struct FrtArgs {
    csv: PathBuf,
    #[command(flatten)]
    threshold: ThresholdArgs,
    /// One or more statistics, comma separated; they share permutations.
    #[arg(long, value_delimiter = ',', default_value = "t_L")]
    statistic: Vec<Statistic>,
    #[arg(long, default_value = "unconditional")]
    mode: Mode,
    #[arg(long, default_value_t = DEFAULT_REPS)]
    reps: usize,
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    enumeration_cap: u64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value = "HC2")]
    hc: HcVariant,
    #[arg(long, default_value_t = DEFAULT_REFDRAWS)]
    refdraws: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct RefdistArgs {
    /// Number of covariates J.
    #[arg(long)]
    dof: usize,
    #[command(flatten)]
    threshold: ThresholdArgs,
    #[arg(long)]
    v_n: f64,
    /// Asymptotic variance of the adjusted estimator used when unbalanced.
    #[arg(long)]
    v_adj: f64,
    #[arg(long)]
    v_l: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.005,0.025,0.05,0.1,0.25,0.5,0.75,0.9,0.95,0.975,0.995")]
    levels: Vec<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    draws: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Serialize)]
struct AnalyzeOutput {
    schema_version: u32,
    n: usize,
    covariates: usize,
    a: f64,
    balance: ptadjust::design::BalanceReport,
    estimates: Vec<EstimateReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pt_specific_ci: Vec<PtInterval>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    frt: Vec<FrtResult>,
}

#[derive(Serialize)]
struct PtInterval {
    method: Method,
    ci: Interval,
}

#[derive(Serialize)]
struct FrtOutput {
    schema_version: u32,
    n: usize,
    a: f64,
    results: Vec<FrtResult>,
}

fn need_seed(seed: Option<u64>, what: &str) -> Result<u64, Error> {
    seed.ok_or_else(|| Error::InvalidConfig(format!("{what} needs random draws; pass --seed")))
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Error> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn frt_spec(statistic: Statistic, mode: Mode, reps: usize, cap: u64, a: f64, alpha: f64, hc: HcVariant, refdraws: usize) -> FrtSpec {
    FrtSpec {
        statistic,
        mode,
        reps,
        enumeration_cap: cap,
        a,
        alpha,
        hc,
        refdraws,
    }
}

fn analyze(args: AnalyzeArgs) -> Result<(), Error> {
    let trial = read_trial_csv_path(&args.csv)?;
    let j = trial.x().ncols();
    let n = trial.len();
    let a = args.threshold.threshold()?.resolve(j)?;
    let report = analyze_trial(&trial, a, args.hc, args.alpha)?;

    let mut pt_cis = Vec::new();
    if args.pt_specific_ci {
        let seed = need_seed(args.seed, "--pt-specific-ci")?;
        let v = |m: Method| {
            let e = report.estimates.iter().find(|e| e.method == m).expect("all methods reported");
            n as f64 * e.se_hat * e.se_hat
        };
        for (method, arm) in [(Method::PtF, AdjustArm::F), (Method::PtL, AdjustArm::L)] {
            let est = report.estimates.iter().find(|e| e.method == method).expect("PT reported");
            let inputs = PtCiInputs {
                tau_hat: est.tau_hat,
                v_n: v(Method::N),
                v_f: v(Method::F),
                v_l: v(Method::L),
                dof: j,
                a,
                phi: report.balance.phi,
                arm,
                alpha: args.alpha,
                n,
            };
            let (lo, hi) = pt_specific_ci(&inputs, args.refdraws, seed)?;
            pt_cis.push(PtInterval {
                method,
                ci: Interval { lo, hi },
            });
        }
    }

    let mut frt = Vec::new();
    if !args.statistic.is_empty() {
        let seed = need_seed(args.seed, "the randomization test")?;
        let spec = frt_spec(args.statistic[0], args.mode, args.reps, args.enumeration_cap, a, args.alpha, args.hc, args.refdraws);
        spec.validate()?;
        frt = run_frt_many(&trial, &args.statistic, &spec, seed, Threads(args.threads))?;
    }

    print_json(&AnalyzeOutput {
        schema_version: SCHEMA_VERSION,
        n,
        covariates: j,
        a,
        balance: report.balance,
        estimates: report.estimates,
        pt_specific_ci: pt_cis,
        frt,
    })
}

fn simulate(args: SimulateArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut cfg = SimulationConfig::from_toml_str(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = args.reps {
        cfg.replications = reps;
    }
    match (&args.a, args.a_quantile) {
        (Some(_), Some(_)) => return Err(Error::InvalidConfig("pass only one of --a and --a-quantile".into())),
        (Some(a), None) => cfg.a = a.parse()?,
        (None, Some(p)) => cfg.a = Threshold::ChiSquareQuantile(p),
        (None, None) => {}
    }
    if let Some(alpha) = args.alpha {
        cfg.alpha = alpha;
    }
    if let Some(hc) = args.hc {
        cfg.hc = hc;
    }
    cfg.threads = args.threads;
    cfg.output_path = args.out.clone();
    cfg.validate()?;

    if let Some(path) = &args.export_population {
        let pop = generate_population(cfg.recipe, cfg.seed)?;
        write_population_csv(&pop, std::fs::File::create(path)?)?;
    }

    let summary = run_simulation(&cfg)?;
    match &args.out {
        Some(prefix) => {
            summary.write_outputs(prefix)?;
            if args.emit_plot_data {
                for p in summary.write_plot_data(prefix)? {
                    eprintln!("wrote {}", p.display());
                }
            }
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(summary.to_json()?.as_bytes())?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn frt(args: FrtArgs) -> Result<(), Error> {
    let trial = read_trial_csv_path(&args.csv)?;
    let a = args.threshold.threshold()?.resolve(trial.x().ncols())?;
    let spec = frt_spec(args.statistic[0], args.mode, args.reps, args.enumeration_cap, a, args.alpha, args.hc, args.refdraws);
    spec.validate()?;
    let results = run_frt_many(&trial, &args.statistic, &spec, args.seed, Threads(args.threads))?;
    print_json(&FrtOutput {
        schema_version: SCHEMA_VERSION,
        n: trial.len(),
        a,
        results,
    })
}

fn refdist(args: RefdistArgs) -> Result<(), Error> {
    if args.dof == 0 {
        return Err(Error::InvalidConfig("--dof must be >= 1".into()));
    }
    for (name, v) in [("--v-n", args.v_n), ("--v-adj", args.v_adj), ("--v-l", args.v_l)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidConfig(format!("{name} must be a finite non-negative variance")));
        }
    }
    if let Some(p) = args.levels.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::InvalidConfig(format!("quantile level {p} is outside (0, 1)")));
    }
    let a = args.threshold.threshold()?.resolve(args.dof)?;
    let mix = MixtureReference::pt_limit(args.dof, a, args.v_n, args.v_adj, args.v_l, args.draws, args.seed)?;
    let sample = mix.sample()?;
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    w.write_record(["level", "quantile"]).map_err(Error::from)?;
    for p in &args.levels {
        w.write_record([p.to_string(), sample.quantile(*p).to_string()])
            .map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_statistical() {
        return 3;
    }
    match e {
        Error::InvalidConfig(_) | Error::InvalidSizes { .. } => 4,
        _ => 2,
    }
}

fn hint(e: &Error) -> Option<&'static str> {
    match e {
        Error::RankDeficient { .. } | Error::RankDeficientObserved(_) => {
            Some("drop collinear or constant covariates, or use fewer covariates than units per arm")
        }
        Error::LeverageOne { .. } => Some("a unit has leverage one; try --hc HC0 or HC1, or drop the outlying unit"),
        Error::SingularCovariates => Some("covariates are collinear; remove a redundant column"),
        Error::EmptyConditionSet => Some("no replicate passed the balance test; raise --a or add replications"),
        Error::AcceptanceExhausted { .. } => Some("the conditioning event is too rare; raise --a"),
        _ => None,
    }
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Analyze(a) => analyze(a),
        Command::Simulate(s) => simulate(s),
        Command::Frt(f) => frt(f),
        Command::Refdist(r) => refdist(r),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(h) = hint(&e) {
                eprintln!("hint: {h}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
