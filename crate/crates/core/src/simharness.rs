//! Config-driven Monte Carlo studies: repeated complete randomization of one
//! fixed finite population, per-method summaries (overall, by balance status,
//! and over the balanced subset), and type-I-error studies of the FRT.
//!
//! Every replicate draws from its own substream, so summaries are identical
//! at any thread count.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::design::{complete_randomization, BalanceChecker, Threshold};
use crate::error::{Error, Result};
use crate::estimators::{fit_spec, Interval, Method, ObservedTrial, Spec};
use crate::exec::{try_map_indexed, Threads};
use crate::frt::{run_frt_many, FrtSpec, Mode, RandomizationReference, Statistic};
use crate::ols::HcVariant;
use crate::population::{generate_population, true_parameters, Recipe};
use crate::refdist::{normal_quantile, pi_a, pt_specific_ci_with, AdjustArm, DrawBank, PtCiInputs, TruncKind};
use crate::rng::{derive_seed, substream, Stream};

pub const SCHEMA_VERSION: u32 = 1;
pub const ALPHA_GRID: [f64; 3] = [0.01, 0.05, 0.10];
pub const HISTOGRAM_BINS: usize = 20;

fn default_config_id() -> String {
    "sim".into()
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_true() -> bool {
    true
}
fn default_alpha() -> f64 {
    0.05
}
fn default_one() -> usize {
    1
}
fn default_refdraws() -> usize {
    crate::frt::DEFAULT_REFDRAWS
}

/// FRT settings of a type-I-error study; all statistics share permutations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrtStudyConfig {
    pub statistics: Vec<Statistic>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_cap")]
    pub enumeration_cap: u64,
    #[serde(default = "default_refdraws")]
    pub refdraws: usize,
}

fn default_reps() -> usize {
    500
}
fn default_cap() -> u64 {
    crate::frt::DEFAULT_ENUMERATION_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_config_id")]
    pub config_id: String,
    pub recipe: Recipe,
    /// Treated count; the recipe default when absent.
    #[serde(default)]
    pub n1: Option<usize>,
    pub a: Threshold,
    pub replications: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_true")]
    pub conditional_breakdown: bool,
    #[serde(default)]
    pub frt: Option<FrtStudyConfig>,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub hc: HcVariant,
    #[serde(default = "default_one")]
    pub population_redraws: usize,
    /// Also score the preliminary-test-specific intervals.
    #[serde(default)]
    pub pt_specific_ci: bool,
    #[serde(default = "default_refdraws")]
    pub refdraws: usize,
    /// Worker threads (0 = all cores). Never affects results.
    #[serde(default, skip_serializing)]
    pub threads: usize,
    /// Prefix for `<prefix>.csv` and `<prefix>.json`.
    #[serde(default, skip_serializing)]
    pub output_path: Option<PathBuf>,
}

impl SimulationConfig {
    pub fn new(recipe: Recipe, a: Threshold, replications: usize, seed: u64) -> Self {
        SimulationConfig {
            config_id: default_config_id(),
            recipe,
            n1: None,
            a,
            replications,
            methods: default_methods(),
            conditional_breakdown: true,
            frt: None,
            seed,
            alpha: default_alpha(),
            hc: HcVariant::default(),
            population_redraws: 1,
            pt_specific_ci: false,
            refdraws: default_refdraws(),
            threads: 0,
            output_path: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SimulationConfig = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n1(&self) -> usize {
        self.n1.unwrap_or_else(|| self.recipe.default_n1())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.replications == 0 {
            return bad("replications must be >= 1".into());
        }
        if self.population_redraws == 0 {
            return bad("population_redraws must be >= 1".into());
        }
        let n = self.recipe.population_size();
        let n1 = self.n1();
        if n1 == 0 || n1 >= n {
            return Err(Error::InvalidSizes { n, n1 });
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.refdraws == 0 {
            return bad("refdraws must be positive".into());
        }
        self.a.resolve(self.recipe.covariates())?;
        if let Some(f) = &self.frt {
            if f.statistics.is_empty() {
                return bad("frt.statistics must not be empty".into());
            }
            self.frt_spec(f, 0.0).validate()?;
        }
        Ok(())
    }

    fn frt_spec(&self, f: &FrtStudyConfig, a: f64) -> FrtSpec {
        FrtSpec {
            statistic: f.statistics[0],
            mode: f.mode,
            reps: f.reps,
            enumeration_cap: f.enumeration_cap,
            a,
            alpha: self.alpha,
            hc: self.hc,
            refdraws: f.refdraws,
        }
    }

    fn population_seed(&self, index: usize) -> u64 {
        if index == 0 {
            self.seed
        } else {
            derive_seed(self.seed, index as u64)
        }
    }
}

/// A rate (or other estimate) with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub mc_se: f64,
}

/// Location and spread of `τ̂ − τ` over a set of replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub count: usize,
    pub mean: f64,
    pub bias: f64,
    pub sd: Estimate,
    pub q025: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub all: Spread,
    /// Over the replicates with `M < a`: the rerandomization subset.
    pub balanced: Option<Spread>,
    pub coverage: Estimate,
    pub coverage_balanced: Option<Estimate>,
    pub coverage_unbalanced: Option<Estimate>,
    pub mean_ci_length: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage_pt_specific: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRate {
    pub alpha: f64,
    pub rate: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrtStatisticSummary {
    pub statistic: Statistic,
    pub rejection: Vec<RejectionRate>,
    /// Counts of p-values in 20 equal bins of (0, 1].
    pub histogram: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub population_index: usize,
    pub population_seed: u64,
    pub a: f64,
    pub pi_a: f64,
    pub tau: f64,
    pub n_balanced: usize,
    pub n_unbalanced: usize,
    pub methods: Vec<MethodSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub frt: Vec<FrtStatisticSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub randomization_reference: Option<RandomizationReference>,
    /// Per-replicate records, kept for plot data and custom checks.
    #[serde(skip)]
    pub replicates: Vec<Replicate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub schema_version: u32,
    pub config: SimulationConfig,
    pub runs: Vec<RunSummary>,
    /// Wall-clock time; excluded from serialized output so reruns are
    /// byte-identical.
    #[serde(skip)]
    pub runtime_seconds: f64,
}

/// One method's output on one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub tau_hat: f64,
    pub se_hat: f64,
    pub ci: Interval,
    pub pt_specific: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub m: f64,
    pub phi: bool,
    /// Indexed like `SimulationConfig::methods`.
    pub draws: Vec<Draw>,
    /// Indexed like `FrtStudyConfig::statistics`.
    pub p_values: Vec<f64>,
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let k = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[k]
}

fn spread(errors: &[f64], tau: f64) -> Option<Spread> {
    let n = errors.len();
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let mean_err = errors.iter().sum::<f64>() / nf;
    let sd = if n > 1 {
        (errors.iter().map(|e| (e - mean_err).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
    } else {
        0.0
    };
    let sd_se = if n > 1 { sd / (2.0 * (nf - 1.0)).sqrt() } else { f64::NAN };
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(Spread {
        count: n,
        mean: tau + mean_err,
        bias: mean_err,
        sd: Estimate { value: sd, mc_se: sd_se },
        q025: quantile_sorted(&sorted, 0.025),
        q975: quantile_sorted(&sorted, 0.975),
    })
}

/// `p̂` with `√(p̂(1 − p̂)/R)`.
pub fn rate(hits: usize, total: usize) -> Option<Estimate> {
    if total == 0 {
        return None;
    }
    let p = hits as f64 / total as f64;
    Some(Estimate {
        value: p,
        mc_se: (p * (1.0 - p) / total as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy)]
struct Fit {
    tau: f64,
    se: f64,
}

/// Runs every configured replication on every population draw.
pub fn run_simulation(config: &SimulationConfig) -> Result<SimulationSummary> {
    config.validate()?;
    let start = std::time::Instant::now();
    let runs = (0..config.population_redraws)
        .map(|r| run_population(config, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulationSummary {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        runs,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

/// As [`run_simulation`], failing when no replicate lands in the balanced
/// subset, whose summaries stand in for rerandomization.
pub fn rem_vs_cr_overlay(config: &SimulationConfig) -> Result<SimulationSummary> {
    let summary = run_simulation(config)?;
    if summary.runs.iter().any(|r| r.n_balanced == 0) {
        return Err(Error::EmptyConditionSet);
    }
    Ok(summary)
}

/// Outer loop over assignments with an inner FRT per replicate.
pub fn frt_type1_study(config: &SimulationConfig) -> Result<SimulationSummary> {
    if config.frt.is_none() {
        return Err(Error::InvalidConfig("frt_type1_study needs an [frt] section".into()));
    }
    run_simulation(config)
}

fn run_population(config: &SimulationConfig, index: usize) -> Result<RunSummary> {
    let pop_seed = config.population_seed(index);
    let pop = generate_population(config.recipe, pop_seed)?;
    let j = pop.covariates();
    let a = config.a.resolve(j)?;
    let n = pop.len();
    let n1 = config.n1();
    let tau = pop.tau();
    let checker = BalanceChecker::new(pop.x())?;
    let q = normal_quantile(1.0 - config.alpha / 2.0);
    let need_pt_ci = config.pt_specific_ci && config.methods.iter().any(|m| matches!(m, Method::PtF | Method::PtL));
    let bank = if need_pt_ci {
        Some(DrawBank::new(
            j,
            a,
            config.refdraws,
            derive_seed(pop_seed, 0x6369),
            &[TruncKind::Inside, TruncKind::Outside],
        )?)
    } else {
        None
    };
    let frt_spec = config.frt.as_ref().map(|f| (f, config.frt_spec(f, a)));
    let threads = Threads(config.threads);

    let replicates = try_map_indexed(config.replications, threads, |i| -> Result<Replicate> {
        let mut rng = substream(pop_seed, Stream::Assignment, i as u64);
        let z = complete_randomization(n, n1, &mut rng)?;
        let m = checker.distance(z.indicators());
        let phi = m < a;
        let trial = ObservedTrial::from_population(&pop, z)?;
        let zi = trial.z().indicators();
        let fit = |spec| -> Result<Fit> {
            let f = fit_spec(zi, trial.y(), trial.x(), spec, config.hc)?;
            Ok(Fit { tau: f.tau, se: f.se })
        };
        let needs_f = config.methods.iter().any(|m| matches!(m, Method::F | Method::PtF));
        let needs_l = need_pt_ci || config.methods.iter().any(|m| matches!(m, Method::L | Method::PtL));
        let fn_ = fit(Spec::N)?;
        let ff = if needs_f || need_pt_ci { Some(fit(Spec::F)?) } else { None };
        let fl = if needs_l { Some(fit(Spec::L)?) } else { None };
        let nf = n as f64;
        let mut draws = Vec::with_capacity(config.methods.len());
        for &method in &config.methods {
            let chosen = match method {
                Method::N => fn_,
                Method::F => ff.expect("fitted"),
                Method::L => fl.expect("fitted"),
                Method::PtF => if phi { fn_ } else { ff.expect("fitted") },
                Method::PtL => if phi { fn_ } else { fl.expect("fitted") },
            };
            let pt_specific = match (&bank, method) {
                (Some(bank), Method::PtF | Method::PtL) => {
                    let v = |f: Option<Fit>| f.map(|f| nf * f.se * f.se).unwrap_or(f64::NAN);
                    let (lo, hi) = pt_specific_ci_with(
                        bank,
                        &PtCiInputs {
                            tau_hat: chosen.tau,
                            v_n: v(Some(fn_)),
                            v_f: v(ff),
                            v_l: v(fl),
                            dof: j,
                            a,
                            phi,
                            arm: if method == Method::PtF { AdjustArm::F } else { AdjustArm::L },
                            alpha: config.alpha,
                            n,
                        },
                    )?;
                    Some(Interval { lo, hi })
                }
                _ => None,
            };
            draws.push(Draw {
                tau_hat: chosen.tau,
                se_hat: chosen.se,
                ci: Interval {
                    lo: chosen.tau - q * chosen.se,
                    hi: chosen.tau + q * chosen.se,
                },
                pt_specific,
            });
        }
        let p_values = match &frt_spec {
            Some((f, spec)) => {
                let seed = derive_seed(pop_seed, (1u64 << 32) | i as u64);
                run_frt_many(&trial, &f.statistics, spec, seed, Threads::SINGLE)?
                    .into_iter()
                    .map(|r| r.p_value)
                    .collect()
            }
            None => Vec::new(),
        };
        Ok(Replicate { m, phi, draws, p_values })
    })?;

    let n_balanced = replicates.iter().filter(|r| r.phi).count();
    let n_unbalanced = replicates.len() - n_balanced;
    let methods = config
        .methods
        .iter()
        .enumerate()
        .map(|(k, &method)| summarize_method(config, &replicates, k, method, tau))
        .collect();
    let frt = match &config.frt {
        Some(f) => f
            .statistics
            .iter()
            .enumerate()
            .map(|(k, &statistic)| summarize_frt(&replicates, k, statistic))
            .collect(),
        None => Vec::new(),
    };
    let randomization_reference = if config.frt.is_some() {
        Some(RandomizationReference::from_parameters(&true_parameters(&pop, n1 as f64 / n as f64)?))
    } else {
        None
    };
    Ok(RunSummary {
        population_index: index,
        population_seed: pop_seed,
        a,
        pi_a: pi_a(j, a),
        tau,
        n_balanced,
        n_unbalanced,
        methods,
        frt,
        randomization_reference,
        replicates,
    })
}

fn summarize_method(config: &SimulationConfig, reps: &[Replicate], k: usize, method: Method, tau: f64) -> MethodSummary {
    let errors: Vec<f64> = reps.iter().map(|r| r.draws[k].tau_hat - tau).collect();
    let balanced: Vec<f64> = reps.iter().filter(|r| r.phi).map(|r| r.draws[k].tau_hat - tau).collect();
    let covered = |r: &Replicate| r.draws[k].ci.contains(tau);
    let hits_bal = reps.iter().filter(|r| r.phi && covered(r)).count();
    let hits_unbal = reps.iter().filter(|r| !r.phi && covered(r)).count();
    let n_bal = reps.iter().filter(|r| r.phi).count();
    let n_unbal = reps.len() - n_bal;
    let (coverage_balanced, coverage_unbalanced) = if config.conditional_breakdown {
        (rate(hits_bal, n_bal), rate(hits_unbal, n_unbal))
    } else {
        (None, None)
    };
    let pt_hits = reps
        .iter()
        .filter_map(|r| r.draws[k].pt_specific)
        .filter(|ci| ci.contains(tau))
        .count();
    let pt_total = reps.iter().filter(|r| r.draws[k].pt_specific.is_some()).count();
    MethodSummary {
        method,
        all: spread(&errors, tau).expect("at least one replicate"),
        balanced: spread(&balanced, tau),
        coverage: rate(hits_bal + hits_unbal, reps.len()).expect("at least one replicate"),
        coverage_balanced,
        coverage_unbalanced,
        mean_ci_length: reps.iter().map(|r| r.draws[k].ci.length()).sum::<f64>() / reps.len() as f64,
        coverage_pt_specific: rate(pt_hits, pt_total),
    }
}

fn summarize_frt(reps: &[Replicate], k: usize, statistic: Statistic) -> FrtStatisticSummary {
    let ps: Vec<f64> = reps.iter().map(|r| r.p_values[k]).collect();
    let rejection = ALPHA_GRID
        .iter()
        .map(|&alpha| RejectionRate {
            alpha,
            rate: rate(ps.iter().filter(|&&p| p <= alpha).count(), ps.len()).expect("nonempty"),
        })
        .collect();
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    for p in ps {
        let bin = ((p * HISTOGRAM_BINS as f64).ceil() as usize).clamp(1, HISTOGRAM_BINS) - 1;
        histogram[bin] += 1;
    }
    FrtStatisticSummary {
        statistic,
        rejection,
        histogram,
    }
}

impl SimulationSummary {
    fn run_id(&self, run: &RunSummary) -> String {
        if self.runs.len() == 1 {
            self.config.config_id.clone()
        } else {
            format!("{}#{}", self.config.config_id, run.population_index)
        }
    }

    /// Long-format rows `(config_id, method, metric, value, mc_se)`.
    pub fn long_rows(&self) -> Vec<(String, String, String, f64, Option<f64>)> {
        let mut rows = Vec::new();
        for run in &self.runs {
            let id = self.run_id(run);
            let mut push = |method: &str, metric: &str, value: f64, se: Option<f64>| {
                rows.push((id.clone(), method.to_string(), metric.to_string(), value, se));
            };
            push("design", "a", run.a, None);
            push("design", "pi_a", run.pi_a, None);
            push("design", "tau", run.tau, None);
            push("design", "n_balanced", run.n_balanced as f64, None);
            push("design", "n_unbalanced", run.n_unbalanced as f64, None);
            for m in &run.methods {
                let name = m.method.as_str();
                let mut spread_rows = |prefix: &str, s: &Spread| {
                    push(name, &format!("{prefix}mean"), s.mean, None);
                    push(name, &format!("{prefix}bias"), s.bias, None);
                    push(name, &format!("{prefix}sd"), s.sd.value, Some(s.sd.mc_se));
                    push(name, &format!("{prefix}q025"), s.q025, None);
                    push(name, &format!("{prefix}q975"), s.q975, None);
                };
                spread_rows("", &m.all);
                if let Some(b) = &m.balanced {
                    spread_rows("rem_", b);
                }
                push(name, "coverage", m.coverage.value, Some(m.coverage.mc_se));
                if let Some(c) = m.coverage_balanced {
                    push(name, "coverage_phi1", c.value, Some(c.mc_se));
                }
                if let Some(c) = m.coverage_unbalanced {
                    push(name, "coverage_phi0", c.value, Some(c.mc_se));
                }
                push(name, "ci_length", m.mean_ci_length, None);
                if let Some(c) = m.coverage_pt_specific {
                    push(name, "coverage_pt_specific", c.value, Some(c.mc_se));
                }
            }
            for f in &run.frt {
                for r in &f.rejection {
                    push(f.statistic.as_str(), &format!("reject_{}", r.alpha), r.rate.value, Some(r.rate.mc_se));
                }
            }
        }
        rows
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["config_id", "method", "metric", "value", "mc_se"])?;
        for (id, method, metric, value, se) in self.long_rows() {
            let se = se.map(|s| s.to_string()).unwrap_or_default();
            w.write_record([id, method, metric, value.to_string(), se])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<prefix>.csv` and `<prefix>.json`.
    pub fn write_outputs(&self, prefix: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(with_suffix(prefix, "csv"))?)?;
        std::fs::write(with_suffix(prefix, "json"), self.to_json()? + "\n")?;
        Ok(())
    }

    /// Writes figure-ready CSVs next to `prefix`: per-replicate estimation
    /// errors and their 0.025/0.975 quantiles (overall and over the balanced
    /// subset), and for FRT studies the p-values and 20-bin histograms.
    pub fn write_plot_data(&self, prefix: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let path = with_suffix(prefix, "errors.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["config_id", "replicate", "phi", "method", "error"])?;
        for run in &self.runs {
            let id = self.run_id(run);
            for (i, r) in run.replicates.iter().enumerate() {
                for (m, d) in self.config.methods.iter().zip(&r.draws) {
                    w.write_record([
                        id.clone(),
                        i.to_string(),
                        (r.phi as u8).to_string(),
                        m.as_str().to_string(),
                        (d.tau_hat - run.tau).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        written.push(path);

        let path = with_suffix(prefix, "quantiles.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["config_id", "method", "subset", "q025", "q975", "sd"])?;
        for run in &self.runs {
            let id = self.run_id(run);
            for m in &run.methods {
                for (subset, s) in [("cr", Some(&m.all)), ("rem", m.balanced.as_ref())] {
                    if let Some(s) = s {
                        w.write_record([
                            id.clone(),
                            m.method.as_str().to_string(),
                            subset.to_string(),
                            s.q025.to_string(),
                            s.q975.to_string(),
                            s.sd.value.to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        written.push(path);

        if let Some(f) = &self.config.frt {
            let path = with_suffix(prefix, "pvalues.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["config_id", "replicate", "statistic", "p_value"])?;
            for run in &self.runs {
                let id = self.run_id(run);
                for (i, r) in run.replicates.iter().enumerate() {
                    for (s, p) in f.statistics.iter().zip(&r.p_values) {
                        w.write_record([id.clone(), i.to_string(), s.as_str().to_string(), p.to_string()])?;
                    }
                }
            }
            w.flush()?;
            written.push(path);

            let path = with_suffix(prefix, "histogram.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["config_id", "statistic", "bin_lo", "bin_hi", "count"])?;
            for run in &self.runs {
                let id = self.run_id(run);
                for s in &run.frt {
                    for (b, c) in s.histogram.iter().enumerate() {
                        let lo = b as f64 / HISTOGRAM_BINS as f64;
                        let hi = (b + 1) as f64 / HISTOGRAM_BINS as f64;
                        w.write_record([id.clone(), s.statistic.as_str().to_string(), lo.to_string(), hi.to_string(), c.to_string()])?;
                    }
                }
            }
            w.flush()?;
            written.push(path);
        }
        Ok(written)
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{estimate_n, estimate_pt};

    fn small(recipe: Recipe, reps: usize) -> SimulationConfig {
        SimulationConfig::new(recipe, Threshold::ChiSquareQuantile(0.5), reps, 17)
    }

    #[test]
    fn coverage_splits_into_weighted_average() {
        let s = run_simulation(&small(Recipe::Coverage { sigma_eps: 1.5 }, 300)).unwrap();
        let run = &s.runs[0];
        assert_eq!(run.n_balanced + run.n_unbalanced, 300);
        for m in &run.methods {
            let c1 = m.coverage_balanced.map(|c| c.value).unwrap_or(0.0);
            let c0 = m.coverage_unbalanced.map(|c| c.value).unwrap_or(0.0);
            let mix = (run.n_balanced as f64 * c1 + run.n_unbalanced as f64 * c0) / 300.0;
            assert!((mix - m.coverage.value).abs() < 1e-12);
        }
    }

    #[test]
    fn single_replicate_matches_estimate_report() {
        let cfg = small(Recipe::FrtP2, 1);
        let s = run_simulation(&cfg).unwrap();
        let pop = generate_population(cfg.recipe, cfg.seed).unwrap();
        let mut rng = substream(cfg.seed, Stream::Assignment, 0);
        let z = complete_randomization(pop.len(), cfg.n1(), &mut rng).unwrap();
        let trial = ObservedTrial::from_population(&pop, z).unwrap();
        let a = s.runs[0].a;
        let n = estimate_n(&trial, HcVariant::HC2, 0.05).unwrap();
        let pt = estimate_pt(&trial, a, AdjustArm::L, HcVariant::HC2, 0.05).unwrap();
        let run = &s.runs[0];
        assert_eq!(run.methods[0].all.mean, pop.tau() + (n.tau_hat - pop.tau()));
        assert_eq!(run.methods[0].coverage.value, n.ci.contains(pop.tau()) as u8 as f64);
        assert!((run.methods[4].all.mean - pt.tau_hat).abs() < 1e-12);
        assert_eq!(run.methods[0].all.sd.value, 0.0);
        assert_eq!(run.n_balanced, pt.balance.unwrap().phi as usize);
    }

    #[test]
    fn infinite_threshold_makes_rem_columns_equal_cr() {
        let mut cfg = small(Recipe::Efficiency, 200);
        cfg.a = Threshold::Value(f64::INFINITY);
        let s = rem_vs_cr_overlay(&cfg).unwrap();
        for m in &s.runs[0].methods {
            assert_eq!(Some(&m.all), m.balanced.as_ref());
        }
    }

    #[test]
    fn zero_threshold_has_empty_condition_set() {
        let mut cfg = small(Recipe::FrtP1, 50);
        cfg.a = Threshold::Value(0.0);
        assert!(matches!(rem_vs_cr_overlay(&cfg), Err(Error::EmptyConditionSet)));
    }

    #[test]
    fn outputs_do_not_depend_on_threads() {
        let mut cfg = small(Recipe::FrtP1, 40);
        cfg.pt_specific_ci = true;
        cfg.refdraws = 500;
        cfg.frt = Some(FrtStudyConfig {
            statistics: vec![Statistic::TL, Statistic::PrepivotPtL],
            mode: Mode::Unconditional,
            reps: 100,
            enumeration_cap: 0,
            refdraws: 300,
        });
        cfg.threads = 1;
        let a = run_simulation(&cfg).unwrap();
        cfg.threads = 4;
        let b = run_simulation(&cfg).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.runs[0].frt[0].histogram.iter().sum::<u64>(), 40);
    }

    #[test]
    fn toml_config_round_trip() {
        let text = r#"
            config_id = "cov"
            a = "chi2_quantile(0.75)"
            replications = 10
            seed = 3
            methods = ["N", "F", "PT_F"]
            [recipe]
            kind = "coverage"
            sigma_eps = 1.5
        "#;
        let cfg = SimulationConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.methods, vec![Method::N, Method::F, Method::PtF]);
        assert_eq!(cfg.recipe, Recipe::Coverage { sigma_eps: 1.5 });
        assert!(SimulationConfig::from_toml_str("replications = 0").is_err());
        let bad = text.replace("replications = 10", "replications = 0");
        assert!(matches!(SimulationConfig::from_toml_str(&bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn population_redraws_use_distinct_seeds() {
        let mut cfg = small(Recipe::FrtP1, 5);
        cfg.population_redraws = 3;
        let s = run_simulation(&cfg).unwrap();
        let seeds: std::collections::HashSet<u64> = s.runs.iter().map(|r| r.population_seed).collect();
        assert_eq!(seeds.len(), 3);
        assert!(s.long_rows().iter().any(|r| r.0 == "sim#2"));
    }
}
