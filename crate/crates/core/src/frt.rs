//! Fisher randomization tests: unconditional, conditional on the observed
//! balance status, and prepivoted.
//!
//! Permutations are either enumerated (all `C(N, n1)` distinct assignments,
//! equal weight) or drawn by Monte Carlo with per-draw RNG substreams, so
//! the p-value does not depend on the thread count.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::{complete_randomization, Assignment, BalanceChecker};
use crate::error::{Error, Result};
use crate::estimators::{fit_spec, ObservedTrial, Spec};
use crate::exec::{map_indexed, try_map_indexed, Threads};
use crate::ols::HcVariant;
use crate::population::TrueParameters;
use crate::refdist::{pi_a, AdjustArm, DrawBank, TruncKind};
use crate::rng::{derive_seed, substream, Stream};

pub const DEFAULT_REPS: usize = 1000;
pub const DEFAULT_ENUMERATION_CAP: u64 = 100_000;
pub const DEFAULT_REFDRAWS: usize = 4000;
pub const MIN_MONTE_CARLO_REPS: usize = 100;
/// Draws allowed per accepted permutation in conditional Monte Carlo mode.
pub const MAX_CONDITIONAL_ATTEMPTS: u64 = 100_000;

/// Relative slack when comparing a permuted statistic with the observed
/// one, so that ties broken only by rounding still count.
const TIE_TOLERANCE: f64 = 1e-9;
const ENUMERATION_CHUNK: u64 = 2048;
const BANK_SALT: u64 = 0x7072_6570_6976_6f74;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Statistic {
    TauN,
    TauF,
    TauL,
    TauPtF,
    TauPtL,
    TN,
    TF,
    TL,
    TPtF,
    TPtL,
    PrepivotPtF,
    PrepivotPtL,
    PrepivotTPtF,
    PrepivotTPtL,
}

impl Statistic {
    pub const ALL: [Statistic; 14] = [
        Statistic::TauN,
        Statistic::TauF,
        Statistic::TauL,
        Statistic::TauPtF,
        Statistic::TauPtL,
        Statistic::TN,
        Statistic::TF,
        Statistic::TL,
        Statistic::TPtF,
        Statistic::TPtL,
        Statistic::PrepivotPtF,
        Statistic::PrepivotPtL,
        Statistic::PrepivotTPtF,
        Statistic::PrepivotTPtL,
    ];

    /// The ten statistics that are compared two-sided without prepivoting.
    pub const PLAIN: [Statistic; 10] = [
        Statistic::TauN,
        Statistic::TauF,
        Statistic::TauL,
        Statistic::TauPtF,
        Statistic::TauPtL,
        Statistic::TN,
        Statistic::TF,
        Statistic::TL,
        Statistic::TPtF,
        Statistic::TPtL,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Statistic::TauN => "tau_N",
            Statistic::TauF => "tau_F",
            Statistic::TauL => "tau_L",
            Statistic::TauPtF => "tau_PT_F",
            Statistic::TauPtL => "tau_PT_L",
            Statistic::TN => "t_N",
            Statistic::TF => "t_F",
            Statistic::TL => "t_L",
            Statistic::TPtF => "t_PT_F",
            Statistic::TPtL => "t_PT_L",
            Statistic::PrepivotPtF => "prepivot_PT_F",
            Statistic::PrepivotPtL => "prepivot_PT_L",
            Statistic::PrepivotTPtF => "prepivot_t_PT_F",
            Statistic::PrepivotTPtL => "prepivot_t_PT_L",
        }
    }

    pub fn is_prepivoted(&self) -> bool {
        matches!(
            self,
            Statistic::PrepivotPtF | Statistic::PrepivotPtL | Statistic::PrepivotTPtF | Statistic::PrepivotTPtL
        )
    }

    fn needs(&self) -> Needs {
        use Statistic::*;
        match self {
            TauN | TN => Needs { n: true, f: false, l: false },
            TauF | TF => Needs { n: false, f: true, l: false },
            TauL | TL => Needs { n: false, f: false, l: true },
            TauPtF | TPtF => Needs { n: true, f: true, l: false },
            TauPtL | TPtL => Needs { n: true, f: false, l: true },
            PrepivotPtF | PrepivotTPtF => Needs { n: true, f: true, l: true },
            PrepivotPtL | PrepivotTPtL => Needs { n: true, f: false, l: true },
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Statistic::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown statistic `{s}`")))
    }
}

impl Serialize for Statistic {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Statistic {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Unconditional,
    Conditional,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unconditional" => Ok(Mode::Unconditional),
            "conditional" => Ok(Mode::Conditional),
            _ => Err(Error::InvalidConfig(format!("unknown FRT mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrtSpec {
    pub statistic: Statistic,
    pub mode: Mode,
    pub reps: usize,
    pub enumeration_cap: u64,
    pub a: f64,
    pub alpha: f64,
    pub hc: HcVariant,
    /// Monte Carlo draws behind the prepivoting CDF.
    pub refdraws: usize,
}

impl Default for FrtSpec {
    fn default() -> Self {
        FrtSpec {
            statistic: Statistic::TL,
            mode: Mode::Unconditional,
            reps: DEFAULT_REPS,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            a: f64::INFINITY,
            alpha: 0.05,
            hc: HcVariant::default(),
            refdraws: DEFAULT_REFDRAWS,
        }
    }
}

impl FrtSpec {
    pub fn validate(&self) -> Result<()> {
        if self.a.is_nan() || self.a < 0.0 {
            return Err(Error::InvalidConfig(format!("threshold a must be >= 0, got {}", self.a)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.refdraws == 0 {
            return Err(Error::InvalidConfig("refdraws must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrtResult {
    pub statistic: Statistic,
    pub mode: Mode,
    pub p_value: f64,
    pub observed_stat: f64,
    /// Permutations evaluated: the size of the (restricted) assignment set
    /// when exact, the Monte Carlo draw count otherwise.
    pub reps_used: u64,
    pub exact: bool,
    pub phi_observed: bool,
    pub rejected: bool,
}

/// Randomization-distribution constants of the pseudo population that
/// imputes `Y(0) = Y(1) = Y` under the sharp null.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomizationReference {
    pub v_tilde_n: f64,
    pub v_tilde_l: f64,
    pub rho_tilde_n: f64,
}

impl RandomizationReference {
    pub fn from_parameters(p: &TrueParameters) -> Self {
        let tau2 = p.tau * p.tau;
        let v_tilde_n = p.s2_0.n / p.e1 + p.s2_1.n / p.e0 + tau2;
        let v_tilde_l = p.s2_0.f / p.e1 + p.s2_1.f / p.e0 + tau2;
        let rho_tilde_n = if v_tilde_n > 0.0 { v_tilde_l / v_tilde_n } else { 1.0 };
        RandomizationReference {
            v_tilde_n,
            v_tilde_l,
            rho_tilde_n,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Needs {
    n: bool,
    f: bool,
    l: bool,
}

#[derive(Debug, Clone, Copy)]
struct Est {
    tau: f64,
    se: f64,
}

/// Fits shared by all statistics at one assignment; `None` marks a
/// rank-deficient (or otherwise unfittable) regression.
#[derive(Debug, Clone, Copy)]
struct Quantities {
    phi: bool,
    n: Option<Est>,
    f: Option<Est>,
    l: Option<Est>,
}

/// Which test statistic the prepivoting CDF transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrepivotBase {
    AbsTauPt,
    AbsTPt,
}

/// `F̂(t)` for the plug-in mixture behind a prepivoted statistic, using the
/// draws of `bank`. `v_*` are `N·ŝe²` of the unadjusted, chosen-adjusted
/// and interacted fits.
pub fn prepivot_cdf(bank: &DrawBank, base: PrepivotBase, v_n: f64, v_adj: f64, v_l: f64, t: f64) -> Result<f64> {
    let weight = pi_a(bank.dof(), bank.a());
    let (v_n, v_adj, v_l) = (v_n.max(0.0), v_adj.max(0.0), v_l.max(0.0));
    let comps = match base {
        PrepivotBase::AbsTauPt => [
            (weight, v_l.sqrt(), (v_n - v_l).max(0.0).sqrt(), TruncKind::Inside),
            (1.0 - weight, v_l.sqrt(), (v_adj - v_l).max(0.0).sqrt(), TruncKind::Outside),
        ],
        PrepivotBase::AbsTPt => {
            let rho = |v: f64| if v > 0.0 { (v_l / v).clamp(0.0, 1.0) } else { 1.0 };
            let (rn, ra) = (rho(v_n), rho(v_adj));
            [
                (weight, rn.sqrt(), (1.0 - rn).sqrt(), TruncKind::Inside),
                (1.0 - weight, ra.sqrt(), (1.0 - ra).sqrt(), TruncKind::Outside),
            ]
        }
    };
    let mut total = 0.0;
    for (w, se, st, kind) in comps {
        if w > 0.0 {
            total += w * bank.folded_cdf(se, st, kind, t)?;
        }
    }
    Ok(total.clamp(0.0, 1.0))
}

struct Engine<'a> {
    y: &'a [f64],
    x: &'a DMatrix<f64>,
    n1: usize,
    checker: BalanceChecker,
    a: f64,
    hc: HcVariant,
    needs: Needs,
    bank: Option<DrawBank>,
}

impl<'a> Engine<'a> {
    fn new(trial: &'a ObservedTrial, statistics: &[Statistic], spec: &FrtSpec, seed: u64) -> Result<Self> {
        let mut needs = Needs::default();
        for s in statistics {
            let k = s.needs();
            needs.n |= k.n;
            needs.f |= k.f;
            needs.l |= k.l;
        }
        let bank = if statistics.iter().any(Statistic::is_prepivoted) {
            Some(DrawBank::new(
                trial.x().ncols(),
                spec.a,
                spec.refdraws,
                derive_seed(seed, BANK_SALT),
                &[TruncKind::Inside, TruncKind::Outside],
            )?)
        } else {
            None
        };
        Ok(Engine {
            y: trial.y(),
            x: trial.x(),
            n1: trial.z().n1(),
            checker: BalanceChecker::new(trial.x())?,
            a: spec.a,
            hc: spec.hc,
            needs,
            bank,
        })
    }

    fn phi(&self, z: &[bool]) -> bool {
        self.checker.distance(z) < self.a
    }

    fn fit(&self, z: &[bool], spec: Spec) -> Result<Est> {
        let f = fit_spec(z, self.y, self.x, spec, self.hc)?;
        Ok(Est { tau: f.tau, se: f.se })
    }

    fn quantities(&self, z: &[bool], phi: bool) -> Quantities {
        let get = |need: bool, spec| if need { self.fit(z, spec).ok() } else { None };
        Quantities {
            phi,
            n: get(self.needs.n, Spec::N),
            f: get(self.needs.f, Spec::F),
            l: get(self.needs.l, Spec::L),
        }
    }

    /// Observed-data quantities; any failing fit aborts the test.
    fn observed(&self, z: &[bool]) -> Result<Quantities> {
        let get = |need: bool, spec| -> Result<Option<Est>> {
            if need {
                self.fit(z, spec).map(Some).map_err(|e| Error::RankDeficientObserved(Box::new(e)))
            } else {
                Ok(None)
            }
        };
        Ok(Quantities {
            phi: self.phi(z),
            n: get(self.needs.n, Spec::N)?,
            f: get(self.needs.f, Spec::F)?,
            l: get(self.needs.l, Spec::L)?,
        })
    }

    /// Raw statistic; `None` when a needed fit failed.
    fn value(&self, q: &Quantities, stat: Statistic) -> Result<Option<f64>> {
        use Statistic::*;
        let ratio = |e: Est| {
            if e.se > 0.0 {
                e.tau / e.se
            } else if e.tau == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(e.tau)
            }
        };
        let pt = |adj: Option<Est>| if q.phi { q.n } else { adj };
        let v = match stat {
            TauN => q.n.map(|e| e.tau),
            TauF => q.f.map(|e| e.tau),
            TauL => q.l.map(|e| e.tau),
            TauPtF => pt(q.f).map(|e| e.tau),
            TauPtL => pt(q.l).map(|e| e.tau),
            TN => q.n.map(ratio),
            TF => q.f.map(ratio),
            TL => q.l.map(ratio),
            TPtF => pt(q.f).map(ratio),
            TPtL => pt(q.l).map(ratio),
            PrepivotPtF | PrepivotPtL | PrepivotTPtF | PrepivotTPtL => {
                let arm = if matches!(stat, PrepivotPtF | PrepivotTPtF) { AdjustArm::F } else { AdjustArm::L };
                let base = if matches!(stat, PrepivotPtF | PrepivotPtL) {
                    PrepivotBase::AbsTauPt
                } else {
                    PrepivotBase::AbsTPt
                };
                let adj = match arm {
                    AdjustArm::F => q.f,
                    AdjustArm::L => q.l,
                };
                let (Some(n), Some(adj), Some(l)) = (q.n, adj, q.l) else {
                    return Ok(None);
                };
                let bank = self.bank.as_ref().expect("bank built for prepivoted statistics");
                return Ok(Some(prepivot_from_fits(bank, base, q.phi, n, adj, l, self.y.len())?));
            }
        };
        Ok(v)
    }

    /// Values compared across permutations: `|T|` for two-sided tests, `T′`
    /// for prepivoted ones, `+∞` for failed fits.
    fn comparable(&self, q: &Quantities, stats: &[Statistic]) -> Result<Vec<f64>> {
        stats
            .iter()
            .map(|&s| {
                Ok(match self.value(q, s)? {
                    Some(v) if s.is_prepivoted() => v,
                    Some(v) => v.abs(),
                    None => f64::INFINITY,
                })
            })
            .collect()
    }
}

fn prepivot_from_fits(bank: &DrawBank, base: PrepivotBase, phi: bool, n: Est, adj: Est, l: Est, size: usize) -> Result<f64> {
    let nf = size as f64;
    let chosen = if phi { n } else { adj };
    let t = match base {
        PrepivotBase::AbsTauPt => nf.sqrt() * chosen.tau.abs(),
        PrepivotBase::AbsTPt => {
            if chosen.se > 0.0 {
                chosen.tau.abs() / chosen.se
            } else if chosen.tau == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        }
    };
    let v = |e: Est| nf * e.se * e.se;
    prepivot_cdf(bank, base, v(n), v(adj), v(l), t)
}

/// `T′ = F̂(T)` on the observed trial.
pub fn prepivot_statistic(
    trial: &ObservedTrial,
    base: PrepivotBase,
    arm: AdjustArm,
    a: f64,
    hc: HcVariant,
    refdraws: usize,
    seed: u64,
) -> Result<f64> {
    let stat = match (base, arm) {
        (PrepivotBase::AbsTauPt, AdjustArm::F) => Statistic::PrepivotPtF,
        (PrepivotBase::AbsTauPt, AdjustArm::L) => Statistic::PrepivotPtL,
        (PrepivotBase::AbsTPt, AdjustArm::F) => Statistic::PrepivotTPtF,
        (PrepivotBase::AbsTPt, AdjustArm::L) => Statistic::PrepivotTPtL,
    };
    let spec = FrtSpec {
        statistic: stat,
        a,
        hc,
        refdraws,
        ..FrtSpec::default()
    };
    spec.validate()?;
    let engine = Engine::new(trial, &[stat], &spec, seed)?;
    let q = engine.observed(trial.z().indicators())?;
    Ok(engine.value(&q, stat)?.expect("observed fits succeeded"))
}

fn at_least(t: f64, observed: f64) -> bool {
    if observed.is_infinite() {
        t >= observed
    } else {
        t >= observed - TIE_TOLERANCE * observed.abs().max(1.0)
    }
}

/// `C(n, k)`, saturating at `u64::MAX`.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
        if r > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    r as u64
}

/// The `rank`-th `k`-subset of `0..n` in lexicographic order.
pub fn unrank_combination(n: usize, k: usize, mut rank: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut next = 0;
    for slot in 0..k {
        loop {
            let rest = binomial(n - next - 1, k - slot - 1);
            if rank < rest {
                break;
            }
            rank -= rest;
            next += 1;
        }
        out.push(next);
        next += 1;
    }
    out
}

/// Advances to the next `k`-subset in lexicographic order; `false` at the
/// last one.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn indicators(n: usize, chosen: &[usize], buf: &mut Vec<bool>) {
    buf.clear();
    buf.resize(n, false);
    for &i in chosen {
        buf[i] = true;
    }
}

/// One test for `spec.statistic`.
pub fn run_frt(trial: &ObservedTrial, spec: &FrtSpec, seed: u64, threads: Threads) -> Result<FrtResult> {
    let spec = FrtSpec {
        mode: Mode::Unconditional,
        ..spec.clone()
    };
    Ok(run_frt_many(trial, &[spec.statistic], &spec, seed, threads)?.remove(0))
}

/// Test restricted to assignments sharing the observed balance status.
pub fn run_conditional_frt(trial: &ObservedTrial, spec: &FrtSpec, seed: u64, threads: Threads) -> Result<FrtResult> {
    let spec = FrtSpec {
        mode: Mode::Conditional,
        ..spec.clone()
    };
    Ok(run_frt_many(trial, &[spec.statistic], &spec, seed, threads)?.remove(0))
}

/// Runs the tests for several statistics over one shared set of
/// permutations; `spec.statistic` is ignored. Each permutation fits every
/// needed regression once.
pub fn run_frt_many(
    trial: &ObservedTrial,
    statistics: &[Statistic],
    spec: &FrtSpec,
    seed: u64,
    threads: Threads,
) -> Result<Vec<FrtResult>> {
    spec.validate()?;
    if statistics.is_empty() {
        return Err(Error::InvalidConfig("no FRT statistic requested".into()));
    }
    let engine = Engine::new(trial, statistics, spec, seed)?;
    let z_obs = trial.z().indicators();
    let q_obs = engine.observed(z_obs)?;
    let mut observed_raw = Vec::with_capacity(statistics.len());
    for &s in statistics {
        observed_raw.push(engine.value(&q_obs, s)?.expect("observed fits succeeded"));
    }
    let observed = engine.comparable(&q_obs, statistics)?;
    let conditional = spec.mode == Mode::Conditional;
    let phi_obs = q_obs.phi;

    let n = trial.len();
    let n1 = engine.n1;
    let total = binomial(n, n1);
    let (counts, support, exact) = if total <= spec.enumeration_cap {
        let chunks = total.div_ceil(ENUMERATION_CHUNK);
        let parts = try_map_indexed(chunks as usize, threads, |c| -> Result<(Vec<u64>, u64)> {
            let start = c as u64 * ENUMERATION_CHUNK;
            let end = (start + ENUMERATION_CHUNK).min(total);
            let mut comb = unrank_combination(n, n1, start);
            let mut z = Vec::with_capacity(n);
            let mut counts = vec![0u64; statistics.len()];
            let mut support = 0u64;
            for r in start..end {
                if r > start {
                    next_combination(&mut comb, n);
                }
                indicators(n, &comb, &mut z);
                let phi = engine.phi(&z);
                if conditional && phi != phi_obs {
                    continue;
                }
                support += 1;
                let vals = engine.comparable(&engine.quantities(&z, phi), statistics)?;
                for (k, v) in vals.iter().enumerate() {
                    if at_least(*v, observed[k]) {
                        counts[k] += 1;
                    }
                }
            }
            Ok((counts, support))
        })?;
        let mut counts = vec![0u64; statistics.len()];
        let mut support = 0;
        for (c, s) in parts {
            support += s;
            for (acc, v) in counts.iter_mut().zip(c) {
                *acc += v;
            }
        }
        (counts, support, true)
    } else {
        if spec.reps < MIN_MONTE_CARLO_REPS {
            return Err(Error::InvalidConfig(format!(
                "Monte Carlo FRT needs at least {MIN_MONTE_CARLO_REPS} permutations, got {}",
                spec.reps
            )));
        }
        let hits = try_map_indexed(spec.reps, threads, |r| -> Result<Vec<bool>> {
            let mut rng = substream(seed, Stream::Permutation, r as u64);
            let mut attempts = 0u64;
            let (z, phi) = loop {
                let z = complete_randomization(n, n1, &mut rng)?;
                let phi = engine.phi(z.indicators());
                attempts += 1;
                if !conditional || phi == phi_obs {
                    break (z, phi);
                }
                if attempts >= MAX_CONDITIONAL_ATTEMPTS {
                    return Err(Error::AcceptanceExhausted { attempts });
                }
            };
            let vals = engine.comparable(&engine.quantities(z.indicators(), phi), statistics)?;
            Ok(vals.iter().zip(&observed).map(|(v, o)| at_least(*v, *o)).collect())
        })?;
        let mut counts = vec![0u64; statistics.len()];
        for h in hits {
            for (acc, b) in counts.iter_mut().zip(h) {
                *acc += b as u64;
            }
        }
        (counts, spec.reps as u64, false)
    };

    Ok(statistics
        .iter()
        .enumerate()
        .map(|(k, &statistic)| {
            let p_value = if exact {
                counts[k] as f64 / support as f64
            } else {
                (1 + counts[k]) as f64 / (support + 1) as f64
            };
            FrtResult {
                statistic,
                mode: spec.mode,
                p_value,
                observed_stat: observed_raw[k],
                reps_used: support,
                exact,
                phi_observed: phi_obs,
                rejected: p_value <= spec.alpha,
            }
        })
        .collect())
}

/// Every distinct assignment of `n1` treated among `n` units, in
/// lexicographic order. Intended for small `n`.
pub fn enumerate_assignments(n: usize, n1: usize) -> Vec<Assignment> {
    let total = binomial(n, n1);
    let mut comb: Vec<usize> = (0..n1).collect();
    let mut z = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(total as usize);
    loop {
        indicators(n, &comb, &mut z);
        out.push(Assignment::new(z.clone()).expect("valid subset"));
        if !next_combination(&mut comb, n) {
            break;
        }
    }
    out
}

/// Distinct values of `p` over all `C(N, n1)` observed assignments for a
/// fixed outcome vector (sharp null); used for exactness checks.
pub fn sharp_null_p_values(
    y: &[f64],
    x: &DMatrix<f64>,
    n1: usize,
    statistics: &[Statistic],
    spec: &FrtSpec,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let assignments = enumerate_assignments(y.len(), n1);
    let per = map_indexed(assignments.len(), Threads::SINGLE, |i| {
        let trial = ObservedTrial::new(assignments[i].clone(), y.to_vec(), x.clone())?;
        run_frt_many(&trial, statistics, spec, seed, Threads::SINGLE)
    });
    let mut out = vec![Vec::with_capacity(assignments.len()); statistics.len()];
    for r in per {
        for (k, res) in r?.into_iter().enumerate() {
            out[k].push(res.p_value);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{generate_population, true_parameters, FinitePopulation, Recipe};
    use crate::refdist::{chi2_quantile, normal_cdf};

    fn sharp_null_fixture() -> (Vec<f64>, DMatrix<f64>) {
        let y = vec![1.3, -0.4, 2.2, 0.7, -1.1, 0.05, 1.9, -0.6];
        let x = DMatrix::from_row_slice(8, 1, &[0.5, -1.2, 1.4, 0.1, -0.9, -0.3, 1.1, -0.7]);
        (y, x)
    }

    fn p1_trial(seed: u64) -> ObservedTrial {
        let pop = generate_population(Recipe::FrtP1, seed).unwrap();
        let mut rng = substream(seed, Stream::Assignment, 0);
        let z = complete_randomization(pop.len(), 10, &mut rng).unwrap();
        ObservedTrial::from_population(&pop, z).unwrap()
    }

    fn super_uniform(ps: &[f64]) -> bool {
        let n = ps.len() as f64;
        ps.iter().all(|&alpha| {
            let below = ps.iter().filter(|&&p| p <= alpha).count() as f64;
            below <= alpha * n + 1e-9
        })
    }

    #[test]
    fn binomial_and_unranking() {
        assert_eq!(binomial(8, 4), 70);
        assert_eq!(binomial(100, 10), 17_310_309_456_440);
        assert_eq!(binomial(2000, 100), u64::MAX);
        let mut c: Vec<usize> = (0..3).collect();
        let mut rank = 0;
        loop {
            assert_eq!(unrank_combination(7, 3, rank), c);
            rank += 1;
            if !next_combination(&mut c, 7) {
                break;
            }
        }
        assert_eq!(rank, binomial(7, 3));
    }

    #[test]
    fn constant_outcome_gives_unit_p() {
        let x = DMatrix::from_row_slice(8, 1, &[0.5, -1.2, 1.4, 0.1, -0.9, -0.3, 1.1, -0.7]);
        let z = Assignment::new(vec![true, false, true, false, true, false, true, false]).unwrap();
        let trial = ObservedTrial::new(z, vec![3.0; 8], x).unwrap();
        let spec = FrtSpec {
            statistic: Statistic::TauN,
            ..FrtSpec::default()
        };
        let r = run_frt(&trial, &spec, 1, Threads::SINGLE).unwrap();
        assert!(r.exact);
        assert_eq!(r.reps_used, 70);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn sharp_null_p_values_are_super_uniform() {
        let (y, x) = sharp_null_fixture();
        let spec = FrtSpec {
            a: 1.0,
            ..FrtSpec::default()
        };
        let ps = sharp_null_p_values(&y, &x, 4, &Statistic::PLAIN, &spec, 3).unwrap();
        for (s, p) in Statistic::PLAIN.iter().zip(&ps) {
            assert_eq!(p.len(), 70);
            assert!(super_uniform(p), "{s}");
            assert!(p.iter().all(|v| (v * 70.0 - (v * 70.0).round()).abs() < 1e-9));
        }
    }

    #[test]
    fn conditional_sharp_null_is_super_uniform_within_balance_class() {
        let (y, x) = sharp_null_fixture();
        let spec = FrtSpec {
            a: 0.5,
            mode: Mode::Conditional,
            ..FrtSpec::default()
        };
        let checker = BalanceChecker::new(&x).unwrap();
        let assignments = enumerate_assignments(8, 4);
        for class in [true, false] {
            let members: Vec<&Assignment> = assignments
                .iter()
                .filter(|z| (checker.distance(z.indicators()) < spec.a) == class)
                .collect();
            assert!(!members.is_empty());
            let ps: Vec<f64> = members
                .iter()
                .map(|z| {
                    let t = ObservedTrial::new((*z).clone(), y.clone(), x.clone()).unwrap();
                    let r = run_frt_many(&t, &[Statistic::TPtL], &spec, 0, Threads::SINGLE).unwrap();
                    assert_eq!(r[0].reps_used, members.len() as u64);
                    r[0].p_value
                })
                .collect();
            assert!(super_uniform(&ps));
        }
    }

    #[test]
    fn relabeling_units_leaves_enumeration_p_unchanged() {
        let t = p1_trial(2);
        let y: Vec<f64> = t.y()[..10].to_vec();
        let x = DMatrix::from_fn(10, 1, |r, _| t.x()[(r, 0)]);
        let z: Vec<bool> = (0..10).map(|i| i % 5 == 0 || i == 3 || i == 7).collect();
        let perm = [3, 7, 1, 9, 0, 5, 2, 8, 6, 4];
        let trial = ObservedTrial::new(Assignment::new(z.clone()).unwrap(), y.clone(), x.clone()).unwrap();
        let relabeled = ObservedTrial::new(
            Assignment::new(perm.iter().map(|&i| z[i]).collect()).unwrap(),
            perm.iter().map(|&i| y[i]).collect(),
            DMatrix::from_fn(10, 1, |r, _| x[(perm[r], 0)]),
        )
        .unwrap();
        let spec = FrtSpec {
            a: 0.8,
            ..FrtSpec::default()
        };
        let a = run_frt_many(&trial, &Statistic::ALL, &spec, 4, Threads::SINGLE).unwrap();
        let b = run_frt_many(&relabeled, &Statistic::ALL, &spec, 4, Threads::SINGLE).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert!(ra.exact);
            assert!((ra.p_value - rb.p_value).abs() < 1e-12, "{}", ra.statistic);
        }
    }

    #[test]
    fn monte_carlo_approaches_enumeration() {
        let (y, x) = sharp_null_fixture();
        let z = Assignment::new(vec![true, true, false, false, true, false, true, false]).unwrap();
        let trial = ObservedTrial::new(z, y, x).unwrap();
        let exact_spec = FrtSpec {
            a: 1.0,
            refdraws: 1000,
            ..FrtSpec::default()
        };
        let mc_spec = FrtSpec {
            enumeration_cap: 10,
            reps: 50 * 70,
            ..exact_spec.clone()
        };
        let e = run_frt_many(&trial, &Statistic::ALL, &exact_spec, 8, Threads::SINGLE).unwrap();
        let m = run_frt_many(&trial, &Statistic::ALL, &mc_spec, 8, Threads::SINGLE).unwrap();
        for (re, rm) in e.iter().zip(&m) {
            assert!(re.exact && !rm.exact);
            assert!((re.p_value - rm.p_value).abs() < 0.02, "{}: {} vs {}", re.statistic, re.p_value, rm.p_value);
        }
    }

    #[test]
    fn monte_carlo_p_has_add_one_form_and_is_thread_invariant() {
        let t = p1_trial(5);
        let spec = FrtSpec {
            a: chi2_quantile(1, 0.5),
            reps: 199,
            refdraws: 500,
            ..FrtSpec::default()
        };
        let one = run_frt_many(&t, &Statistic::ALL, &spec, 9, Threads::SINGLE).unwrap();
        let many = run_frt_many(&t, &Statistic::ALL, &spec, 9, Threads(4)).unwrap();
        assert_eq!(one, many);
        for r in &one {
            let k = r.p_value * 200.0 - 1.0;
            assert!((k - k.round()).abs() < 1e-9 && k >= -1e-9);
        }
    }

    #[test]
    fn conditional_with_infinite_threshold_matches_unconditional() {
        let t = p1_trial(6);
        for cap in [0, DEFAULT_ENUMERATION_CAP] {
            let spec = FrtSpec {
                statistic: Statistic::TPtL,
                reps: 150,
                enumeration_cap: cap,
                ..FrtSpec::default()
            };
            let small = if cap == 0 { t.clone() } else { small_trial() };
            let u = run_frt(&small, &spec, 11, Threads::SINGLE).unwrap();
            let c = run_conditional_frt(&small, &spec, 11, Threads::SINGLE).unwrap();
            assert_eq!(u.p_value, c.p_value);
            assert_eq!(u.reps_used, c.reps_used);
        }
    }

    fn small_trial() -> ObservedTrial {
        let (y, x) = sharp_null_fixture();
        let z = Assignment::new(vec![false, true, true, false, true, false, false, true]).unwrap();
        ObservedTrial::new(z, y, x).unwrap()
    }

    #[test]
    fn conditional_monte_carlo_restricts_to_observed_class() {
        let t = p1_trial(7);
        let spec = FrtSpec {
            statistic: Statistic::TPtL,
            reps: 120,
            enumeration_cap: 0,
            a: chi2_quantile(1, 0.5),
            ..FrtSpec::default()
        };
        let r = run_conditional_frt(&t, &spec, 2, Threads::SINGLE).unwrap();
        assert_eq!(r.mode, Mode::Conditional);
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        let unreachable = FrtSpec { a: 0.0, ..spec };
        // a = 0 puts every assignment in the unbalanced class; the observed one too.
        assert!(run_conditional_frt(&t, &unreachable, 2, Threads::SINGLE).is_ok());
    }

    #[test]
    fn rank_deficient_observed_aborts_and_permuted_failures_count() {
        let x = DMatrix::from_row_slice(8, 1, &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let y = vec![0.3, 1.0, -0.2, 0.8, 1.5, 2.1, 2.9, 4.2];
        let bad = Assignment::new(vec![true, true, true, true, false, false, false, false]).unwrap();
        let trial = ObservedTrial::new(bad, y.clone(), x.clone()).unwrap();
        let spec = FrtSpec {
            statistic: Statistic::TL,
            ..FrtSpec::default()
        };
        assert!(matches!(
            run_frt(&trial, &spec, 0, Threads::SINGLE),
            Err(Error::RankDeficientObserved(_))
        ));
        let good = Assignment::new(vec![true, false, true, false, true, false, true, false]).unwrap();
        let trial = ObservedTrial::new(good, y, x).unwrap();
        let r = run_frt(&trial, &spec, 0, Threads::SINGLE).unwrap();
        // The all-zero-x arm split is degenerate and counts against us.
        assert!(r.p_value >= 2.0 / 70.0);
    }

    #[test]
    fn prepivoted_values_lie_in_unit_interval() {
        for seed in 0..10 {
            let t = p1_trial(seed);
            for base in [PrepivotBase::AbsTauPt, PrepivotBase::AbsTPt] {
                for arm in [AdjustArm::F, AdjustArm::L] {
                    let v = prepivot_statistic(&t, base, arm, 0.45, HcVariant::HC2, 500, seed).unwrap();
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn equal_variances_give_folded_normal_cdf() {
        let k = 20_000;
        let bank = DrawBank::new(2, 1.5, k, 5, &[TruncKind::Inside, TruncKind::Outside]).unwrap();
        let v: f64 = 2.5;
        for t in [0.3, 1.0, 2.0, 3.5] {
            let oracle = 2.0 * normal_cdf(t / v.sqrt()) - 1.0;
            let got = prepivot_cdf(&bank, PrepivotBase::AbsTauPt, v, v, v, t).unwrap();
            assert!((got - oracle).abs() < 2.0 / (k as f64).sqrt(), "{t}: {got} vs {oracle}");
            let oracle_t = 2.0 * normal_cdf(t) - 1.0;
            let got_t = prepivot_cdf(&bank, PrepivotBase::AbsTPt, v, v, v, t).unwrap();
            assert!((got_t - oracle_t).abs() < 2.0 / (k as f64).sqrt());
        }
    }

    #[test]
    fn median_maps_to_one_half() {
        let k = 40_000;
        let bank = DrawBank::new(1, 0.45, k, 6, &[TruncKind::Inside, TruncKind::Outside]).unwrap();
        let f = |t: f64| prepivot_cdf(&bank, PrepivotBase::AbsTauPt, 3.0, 2.0, 1.0, t).unwrap();
        let (mut lo, mut hi) = (0.0, 20.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((f(hi) - 0.5).abs() < 1e-3);
    }

    #[test]
    fn randomization_reference_orders_variances() {
        for seed in 0..5 {
            let pop: FinitePopulation = generate_population(Recipe::FrtP1, seed).unwrap();
            let p = true_parameters(&pop, 0.1).unwrap();
            let r = RandomizationReference::from_parameters(&p);
            assert!(r.v_tilde_l <= r.v_tilde_n + 1e-12);
            assert!(r.rho_tilde_n <= 1.0 && r.rho_tilde_n > 0.0);
        }
    }

    #[test]
    fn statistic_names_round_trip() {
        for s in Statistic::ALL {
            assert_eq!(s.as_str().parse::<Statistic>().unwrap(), s);
            let j = serde_json::to_string(&s).unwrap();
            assert_eq!(serde_json::from_str::<Statistic>(&j).unwrap(), s);
        }
        assert!("t_Q".parse::<Statistic>().is_err());
    }
}
