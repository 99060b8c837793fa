//! Reference laws of the large-sample theory.
//!
//! Everything here is built from three independent ingredients: a standard
//! normal `ε`, and the first coordinate of `D ~ N(0, I_J)` conditioned inside
//! (`L`) or outside (`L′`) the ball `DᵀD < a`. Laws of the form
//! `s_ε·ε + s_T·T` and their mixtures are evaluated by Monte Carlo over a
//! seeded [`DrawBank`]; reusing one bank across many scale settings gives
//! common random numbers, which keeps per-permutation CDF rebuilds cheap and
//! deterministic.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Default number of Monte Carlo draws behind a quantile query.
pub const DEFAULT_SAMPLE_COUNT: usize = 1_000_000;

/// Rejection sampling refuses regions with smaller acceptance than this.
pub const MIN_ACCEPTANCE: f64 = 1e-6;

/// `π_a = P(χ²_J < a)`.
pub fn pi_a(dof: usize, a: f64) -> f64 {
    assert!(dof >= 1, "degrees of freedom must be positive");
    if a.is_nan() || a <= 0.0 {
        return 0.0;
    }
    if a.is_infinite() {
        return 1.0;
    }
    statrs::function::gamma::gamma_lr(dof as f64 / 2.0, a / 2.0)
}

/// Inverse of [`pi_a`] in `a`: the `p`-quantile of `χ²_J`.
pub fn chi2_quantile(dof: usize, p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0, 1)");
    let mut lo = 0.0;
    let mut hi = dof as f64 + 1.0;
    while pi_a(dof, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    // Bisection to the limit of double precision.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if pi_a(dof, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncKind {
    /// `D₁ | DᵀD < a`
    Inside,
    /// `D₁ | DᵀD ≥ a`
    Outside,
    /// `D₁`, i.e. a standard normal.
    Unconstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGaussianComponent {
    pub kind: TruncKind,
    pub dof: usize,
    pub a: f64,
}

impl TruncatedGaussianComponent {
    pub fn new(kind: TruncKind, dof: usize, a: f64) -> Result<Self> {
        let c = TruncatedGaussianComponent { kind, dof, a };
        if dof == 0 || a.is_nan() || a < 0.0 {
            return Err(Error::InvalidConfig(format!("invalid truncation J = {dof}, a = {a}")));
        }
        match kind {
            TruncKind::Inside if pi_a(dof, a) <= 0.0 => Err(Error::InvalidConfig(
                "inside truncation needs a > 0".into(),
            )),
            TruncKind::Outside if pi_a(dof, a) >= 1.0 => Err(Error::InvalidConfig(
                "outside truncation needs a finite".into(),
            )),
            _ => Ok(c),
        }
    }

    /// Probability that an unconstrained draw lands in the region.
    pub fn acceptance(&self) -> f64 {
        match self.kind {
            TruncKind::Inside => pi_a(self.dof, self.a),
            TruncKind::Outside => 1.0 - pi_a(self.dof, self.a),
            TruncKind::Unconstrained => 1.0,
        }
    }
}

/// `n` i.i.d. draws of the component by rejection from `N(0, I_J)`.
pub fn sample_truncated<R: Rng + ?Sized>(
    component: &TruncatedGaussianComponent,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let acc = component.acceptance();
    if acc < MIN_ACCEPTANCE {
        return Err(Error::AcceptanceExhausted { attempts: 0 });
    }
    let mut out = Vec::with_capacity(n);
    let j = component.dof;
    while out.len() < n {
        let d1: f64 = StandardNormal.sample(rng);
        if component.kind == TruncKind::Unconstrained {
            out.push(d1);
            continue;
        }
        let mut r2 = d1 * d1;
        for _ in 1..j {
            let d: f64 = StandardNormal.sample(rng);
            r2 += d * d;
        }
        let inside = r2 < component.a;
        if inside == (component.kind == TruncKind::Inside) {
            out.push(d1);
        }
    }
    Ok(out)
}

/// Seeded draws of `ε` and of the truncated coordinates for one `(J, a)`.
#[derive(Debug, Clone)]
pub struct DrawBank {
    dof: usize,
    a: f64,
    eps: Vec<f64>,
    inside: Option<Vec<f64>>,
    outside: Option<Vec<f64>>,
    free: Option<Vec<f64>>,
}

impl DrawBank {
    /// Draws `count` values of `ε` and of every requested kind. Kinds whose
    /// region has zero probability are skipped; asking for their draws later
    /// is an error.
    pub fn new(dof: usize, a: f64, count: usize, seed: u64, kinds: &[TruncKind]) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidConfig("draw count must be positive".into()));
        }
        let mut rng = substream(seed, Stream::RefDist, 0);
        let eps: Vec<f64> = (0..count).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut bank = DrawBank {
            dof,
            a,
            eps,
            inside: None,
            outside: None,
            free: None,
        };
        for (k, kind) in [TruncKind::Inside, TruncKind::Outside, TruncKind::Unconstrained]
            .into_iter()
            .enumerate()
        {
            if !kinds.contains(&kind) {
                continue;
            }
            let comp = TruncatedGaussianComponent { kind, dof, a };
            if comp.acceptance() <= 0.0 {
                continue;
            }
            let mut rng = substream(seed, Stream::RefDist, 1 + k as u64);
            let draws = sample_truncated(&comp, count, &mut rng)?;
            match kind {
                TruncKind::Inside => bank.inside = Some(draws),
                TruncKind::Outside => bank.outside = Some(draws),
                TruncKind::Unconstrained => bank.free = Some(draws),
            }
        }
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn truncated(&self, kind: TruncKind) -> Result<&[f64]> {
        let v = match kind {
            TruncKind::Inside => &self.inside,
            TruncKind::Outside => &self.outside,
            TruncKind::Unconstrained => &self.free,
        };
        v.as_deref()
            .ok_or_else(|| Error::InvalidConfig(format!("draw bank has no {kind:?} draws")))
    }

    /// Fraction of `|s_ε ε + s_T T| ≤ t` over the bank.
    pub fn folded_cdf(&self, scale_eps: f64, scale_trunc: f64, kind: TruncKind, t: f64) -> Result<f64> {
        if scale_trunc == 0.0 {
            let hits = self.eps.iter().filter(|e| (scale_eps * **e).abs() <= t).count();
            return Ok(hits as f64 / self.eps.len() as f64);
        }
        let tr = self.truncated(kind)?;
        let hits = self
            .eps
            .iter()
            .zip(tr)
            .filter(|(e, d)| (scale_eps * **e + scale_trunc * **d).abs() <= t)
            .count();
        Ok(hits as f64 / self.eps.len() as f64)
    }

    /// Upper `level` quantile of `|s_ε ε + s_T T|`; equivalently the
    /// `(1 + level)/2` quantile of the symmetrized law.
    pub fn folded_quantile(&self, scale_eps: f64, scale_trunc: f64, kind: TruncKind, level: f64) -> Result<f64> {
        let mut v: Vec<f64> = if scale_trunc == 0.0 {
            self.eps.iter().map(|e| (scale_eps * e).abs()).collect()
        } else {
            let tr = self.truncated(kind)?;
            self.eps
                .iter()
                .zip(tr)
                .map(|(e, d)| (scale_eps * e + scale_trunc * d).abs())
                .collect()
        };
        let k = empirical_index(v.len(), level);
        let (_, q, _) = v.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
        Ok(*q)
    }
}

fn empirical_index(len: usize, p: f64) -> usize {
    ((p * len as f64).ceil() as usize).clamp(1, len) - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub scale_eps: f64,
    pub scale_trunc: f64,
    pub trunc: TruncKind,
}

/// A finite mixture of laws `s_ε·ε + s_T·T` sharing one `(J, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureReference {
    pub dof: usize,
    pub a: f64,
    pub components: Vec<MixtureComponent>,
    pub sample_count: usize,
    pub seed: u64,
}

impl MixtureReference {
    pub fn new(dof: usize, a: f64, components: Vec<MixtureComponent>, sample_count: usize, seed: u64) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if components.is_empty()
            || components
                .iter()
                .any(|c| !(c.weight >= 0.0) || !(c.scale_eps >= 0.0) || !(c.scale_trunc >= 0.0))
            || (total - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidConfig(
                "mixture weights must be nonnegative and sum to one; scales nonnegative".into(),
            ));
        }
        if sample_count == 0 {
            return Err(Error::InvalidConfig("sample_count must be positive".into()));
        }
        Ok(MixtureReference {
            dof,
            a,
            components,
            sample_count,
            seed,
        })
    }

    /// Weights `(π_a, 1 − π_a)` on the inside/outside components of the
    /// preliminary-test limit: `√v_L ε + √(v_N − v_L) L` and
    /// `√v_L ε + √(v_adj − v_L) L′`. Negative differences are clamped to 0.
    pub fn pt_limit(dof: usize, a: f64, v_n: f64, v_adj: f64, v_l: f64, sample_count: usize, seed: u64) -> Result<Self> {
        let p = pi_a(dof, a);
        let s_eps = v_l.max(0.0).sqrt();
        let comps = vec![
            MixtureComponent {
                weight: p,
                scale_eps: s_eps,
                scale_trunc: (v_n - v_l).max(0.0).sqrt(),
                trunc: TruncKind::Inside,
            },
            MixtureComponent {
                weight: 1.0 - p,
                scale_eps: s_eps,
                scale_trunc: (v_adj - v_l).max(0.0).sqrt(),
                trunc: TruncKind::Outside,
            },
        ];
        MixtureReference::new(dof, a, comps, sample_count, seed)
    }

    /// Draws the mixture. Each component is evaluated on every bank draw and
    /// paired with its mirror image, so the empirical law is exactly
    /// symmetric; components enter with their mixture weight.
    pub fn sample(&self) -> Result<MixtureSample> {
        let kinds: Vec<TruncKind> = self
            .components
            .iter()
            .filter(|c| c.weight > 0.0 && c.scale_trunc > 0.0)
            .map(|c| c.trunc)
            .collect();
        let bank = DrawBank::new(self.dof, self.a, self.sample_count, self.seed, &kinds)?;
        let k = bank.len() as f64;
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for c in self.components.iter().filter(|c| c.weight > 0.0) {
            let w = c.weight / (2.0 * k);
            if c.scale_trunc > 0.0 {
                let tr = bank.truncated(c.trunc)?;
                for (e, d) in bank.eps().iter().zip(tr) {
                    let v = c.scale_eps * e + c.scale_trunc * d;
                    pts.push((v, w));
                    pts.push((-v, w));
                }
            } else {
                for e in bank.eps() {
                    let v = c.scale_eps * e;
                    pts.push((v, w));
                    pts.push((-v, w));
                }
            }
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        let mut values = Vec::with_capacity(pts.len());
        let mut cumulative = Vec::with_capacity(pts.len());
        for (v, w) in pts {
            acc += w;
            values.push(v);
            cumulative.push(acc);
        }
        Ok(MixtureSample { values, cumulative })
    }
}

/// Sorted weighted draws of a [`MixtureReference`].
#[derive(Debug, Clone)]
pub struct MixtureSample {
    values: Vec<f64>,
    cumulative: Vec<f64>,
}

impl MixtureSample {
    /// Smallest draw whose cumulative weight reaches `p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let total = *self.cumulative.last().expect("nonempty sample");
        let target = p * total;
        let i = self.cumulative.partition_point(|&c| c < target - 1e-15);
        self.values[i.min(self.values.len() - 1)]
    }

    /// Weighted fraction of draws `≤ t`.
    pub fn cdf(&self, t: f64) -> f64 {
        let i = self.values.partition_point(|&v| v <= t);
        if i == 0 {
            0.0
        } else {
            self.cumulative[i - 1] / self.cumulative.last().unwrap()
        }
    }
}

/// `p`-quantile of a mixture reference; deterministic given its seed.
pub fn mixture_quantile(reference: &MixtureReference, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidConfig(format!("quantile level must lie in (0, 1), got {p}")));
    }
    Ok(reference.sample()?.quantile(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AdjustArm {
    F,
    L,
}

/// Trial-level inputs to the preliminary-test-specific interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PtCiInputs {
    pub tau_hat: f64,
    /// `N·ŝe²` for the unadjusted, additive and interacted fits.
    pub v_n: f64,
    pub v_f: f64,
    pub v_l: f64,
    pub dof: usize,
    pub a: f64,
    pub phi: bool,
    pub arm: AdjustArm,
    pub alpha: f64,
    pub n: usize,
}

/// Interval from the central `1 − α` range of the plug-in conditional law:
/// `√v̂_L ε + √(v̂_N − v̂_L) L` when balanced, `√v̂_L ε + √(v̂_F − v̂_L) L′`
/// when unbalanced with additive adjustment, and `N(0, v̂_L)` when
/// unbalanced with interacted adjustment. All laws are symmetric, so the
/// half-width is the `1 − α` quantile of the folded law over `√N`.
pub fn pt_specific_ci_with(bank: &DrawBank, inputs: &PtCiInputs) -> Result<(f64, f64)> {
    let PtCiInputs {
        tau_hat,
        v_n,
        v_f,
        v_l,
        phi,
        arm,
        alpha,
        n,
        ..
    } = *inputs;
    let level = 1.0 - alpha;
    let s_eps = v_l.max(0.0).sqrt();
    let half = match (phi, arm) {
        (true, _) => bank.folded_quantile(s_eps, (v_n - v_l).max(0.0).sqrt(), TruncKind::Inside, level)?,
        (false, AdjustArm::F) => bank.folded_quantile(s_eps, (v_f - v_l).max(0.0).sqrt(), TruncKind::Outside, level)?,
        (false, AdjustArm::L) => normal_quantile(1.0 - alpha / 2.0) * s_eps,
    } / (n as f64).sqrt();
    Ok((tau_hat - half, tau_hat + half))
}

/// As [`pt_specific_ci_with`], drawing a fresh bank of `draws` values.
pub fn pt_specific_ci(inputs: &PtCiInputs, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let kind = if inputs.phi { TruncKind::Inside } else { TruncKind::Outside };
    let bank = DrawBank::new(inputs.dof, inputs.a, draws, seed, &[kind])?;
    pt_specific_ci_with(&bank, inputs)
}
