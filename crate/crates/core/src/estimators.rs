//! Point estimators, robust standard errors and normal-approximation
//! intervals: difference in means (`N`), additive adjustment (`F`), fully
//! interacted adjustment (`L`), and the preliminary-test composites that use
//! `N` when the balance test passes and `F` or `L` otherwise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{Assignment, BalanceChecker, BalanceReport};
use crate::error::{Error, Result};
use crate::ols::{self, HcVariant};
use crate::population::{center_columns, FinitePopulation};
use crate::refdist::{normal_quantile, AdjustArm};

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Data available to the analyst after one assignment.
#[derive(Debug, Clone)]
pub struct ObservedTrial {
    z: Assignment,
    y: Vec<f64>,
    x: DMatrix<f64>,
}

impl ObservedTrial {
    /// Covariates are re-centered at the full-sample mean.
    pub fn new(z: Assignment, y: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        if y.len() != z.len() || x.nrows() != z.len() {
            return Err(Error::DimensionMismatch(format!(
                "z has {} units, y {}, x {}",
                z.len(),
                y.len(),
                x.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::DimensionMismatch("need at least one covariate".into()));
        }
        Ok(ObservedTrial {
            z,
            y,
            x: center_columns(x),
        })
    }

    pub fn from_population(pop: &FinitePopulation, z: Assignment) -> Result<Self> {
        let y = pop.observe(z.indicators());
        ObservedTrial::new(z, y, pop.x().clone())
    }

    pub fn z(&self) -> &Assignment {
        &self.z
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Same units and covariates, new assignment; outcomes are kept as
    /// observed (imputation under the sharp null).
    pub fn with_assignment(&self, z: Assignment) -> Result<Self> {
        if z.len() != self.len() {
            return Err(Error::DimensionMismatch("assignment length differs".into()));
        }
        Ok(ObservedTrial {
            z,
            y: self.y.clone(),
            x: self.x.clone(),
        })
    }
}

/// Regression specification behind an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Spec {
    N,
    F,
    L,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    N,
    F,
    L,
    #[serde(rename = "PT_F")]
    PtF,
    #[serde(rename = "PT_L")]
    PtL,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::N, Method::F, Method::L, Method::PtF, Method::PtL];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::N => "N",
            Method::F => "F",
            Method::L => "L",
            Method::PtF => "PT_F",
            Method::PtL => "PT_L",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmUsed {
    Unadjusted,
    Adjusted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: Method,
    pub tau_hat: f64,
    pub se_hat: f64,
    pub ci: Interval,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balance: Option<BalanceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjusted_arm_used: Option<ArmUsed>,
}

/// Treatment coefficient, its robust SE, and the covariate slope `γ̂` that
/// makes `τ̂ = τ̂_N − γ̂ᵀ τ̂_x` (zero-length for `N`).
#[derive(Debug, Clone)]
pub struct SpecFit {
    pub tau: f64,
    pub se: f64,
    pub gamma: DVector<f64>,
}

fn design_matrix(z: &[bool], x: &DMatrix<f64>, spec: Spec) -> DMatrix<f64> {
    let n = z.len();
    let j = x.ncols();
    let p = match spec {
        Spec::N => 2,
        Spec::F => 2 + j,
        Spec::L => 2 + 2 * j,
    };
    DMatrix::from_fn(n, p, |i, c| {
        let zi = if z[i] { 1.0 } else { 0.0 };
        match c {
            0 => 1.0,
            1 => zi,
            c if c < 2 + j => x[(i, c - 2)],
            c => zi * x[(i, c - 2 - j)],
        }
    })
}

/// Fits one specification on raw data. `x` must be centered for the `L`
/// coefficient to target the average effect.
pub fn fit_spec(z: &[bool], y: &[f64], x: &DMatrix<f64>, spec: Spec, hc: HcVariant) -> Result<SpecFit> {
    let design = design_matrix(z, x, spec);
    let fit = ols::fit(&design, y, hc)?;
    let j = x.ncols();
    let gamma = match spec {
        Spec::N => DVector::zeros(0),
        Spec::F => fit.coefficients.rows(2, j).into_owned(),
        Spec::L => {
            let n = z.len() as f64;
            let e1 = z.iter().filter(|&&t| t).count() as f64 / n;
            let e0 = 1.0 - e1;
            let g0 = fit.coefficients.rows(2, j).into_owned();
            let g1 = &g0 + fit.coefficients.rows(2 + j, j);
            g1 * e0 + g0 * e1
        }
    };
    Ok(SpecFit {
        tau: fit.coefficients[1],
        se: fit.se(1),
        gamma,
    })
}

fn report(method: Method, fit: &SpecFit, alpha: f64) -> EstimateReport {
    let q = normal_quantile(1.0 - alpha / 2.0);
    EstimateReport {
        method,
        tau_hat: fit.tau,
        se_hat: fit.se,
        ci: Interval {
            lo: fit.tau - q * fit.se,
            hi: fit.tau + q * fit.se,
        },
        alpha,
        balance: None,
        adjusted_arm_used: None,
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

pub fn estimate_n(trial: &ObservedTrial, hc: HcVariant, alpha: f64) -> Result<EstimateReport> {
    check_alpha(alpha)?;
    let fit = fit_spec(trial.z.indicators(), &trial.y, &trial.x, Spec::N, hc)?;
    Ok(report(Method::N, &fit, alpha))
}

pub fn estimate_f(trial: &ObservedTrial, hc: HcVariant, alpha: f64) -> Result<EstimateReport> {
    check_alpha(alpha)?;
    let fit = fit_spec(trial.z.indicators(), &trial.y, &trial.x, Spec::F, hc)?;
    Ok(report(Method::F, &fit, alpha))
}

pub fn estimate_l(trial: &ObservedTrial, hc: HcVariant, alpha: f64) -> Result<EstimateReport> {
    check_alpha(alpha)?;
    let fit = fit_spec(trial.z.indicators(), &trial.y, &trial.x, Spec::L, hc)?;
    Ok(report(Method::L, &fit, alpha))
}

/// Preliminary-test estimate: the `N` report when `M < a`, otherwise the
/// report of the adjusted specification.
pub fn estimate_pt(trial: &ObservedTrial, a: f64, arm: AdjustArm, hc: HcVariant, alpha: f64) -> Result<EstimateReport> {
    let checker = BalanceChecker::new(&trial.x)?;
    estimate_pt_with(&checker, trial, a, arm, hc, alpha)
}

pub fn estimate_pt_with(
    checker: &BalanceChecker,
    trial: &ObservedTrial,
    a: f64,
    arm: AdjustArm,
    hc: HcVariant,
    alpha: f64,
) -> Result<EstimateReport> {
    let balance = checker.report(&trial.z, a)?;
    let method = match arm {
        AdjustArm::F => Method::PtF,
        AdjustArm::L => Method::PtL,
    };
    let (mut rep, used) = if balance.phi {
        (estimate_n(trial, hc, alpha)?, ArmUsed::Unadjusted)
    } else {
        let r = match arm {
            AdjustArm::F => estimate_f(trial, hc, alpha)?,
            AdjustArm::L => estimate_l(trial, hc, alpha)?,
        };
        (r, ArmUsed::Adjusted)
    };
    rep.method = method;
    rep.balance = Some(balance);
    rep.adjusted_arm_used = Some(used);
    Ok(rep)
}

/// Balance report plus all five estimates, as produced by `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub balance: BalanceReport,
    pub estimates: Vec<EstimateReport>,
}

pub fn analyze_trial(trial: &ObservedTrial, a: f64, hc: HcVariant, alpha: f64) -> Result<AnalysisReport> {
    let checker = BalanceChecker::new(&trial.x)?;
    let balance = checker.report(&trial.z, a)?;
    let estimates = vec![
        estimate_n(trial, hc, alpha)?,
        estimate_f(trial, hc, alpha)?,
        estimate_l(trial, hc, alpha)?,
        estimate_pt_with(&checker, trial, a, AdjustArm::F, hc, alpha)?,
        estimate_pt_with(&checker, trial, a, AdjustArm::L, hc, alpha)?,
    ];
    Ok(AnalysisReport { balance, estimates })
}

/// `τ̂_N − γ̂ᵀ τ̂_x` computed without the joint regression: `γ̂_F` from the
/// additive fit, `γ̂_L = e0·γ̂_{L,1} + e1·γ̂_{L,0}` from separate per-arm fits
/// of `y ~ 1 + x`.
pub fn identity_route(trial: &ObservedTrial, spec: Spec) -> Result<f64> {
    let z = trial.z.indicators();
    let n = trial.len() as f64;
    let n1 = trial.z.n1() as f64;
    let (e1, e0) = (n1 / n, 1.0 - n1 / n);
    let j = trial.x.ncols();

    let mut s1 = 0.0;
    let mut s0 = 0.0;
    let mut x1 = DVector::zeros(j);
    let mut x0 = DVector::zeros(j);
    for (i, &t) in z.iter().enumerate() {
        let row = trial.x.row(i).transpose();
        if t {
            s1 += trial.y[i];
            x1 += row;
        } else {
            s0 += trial.y[i];
            x0 += row;
        }
    }
    let n0 = n - n1;
    let tau_n = s1 / n1 - s0 / n0;
    let tau_x = x1 / n1 - x0 / n0;

    let gamma = match spec {
        Spec::N => return Ok(tau_n),
        Spec::F => fit_spec(z, &trial.y, &trial.x, Spec::F, HcVariant::HC0)?.gamma,
        Spec::L => {
            let arm_slope = |arm: bool| -> Result<DVector<f64>> {
                let rows: Vec<usize> = (0..z.len()).filter(|&i| z[i] == arm).collect();
                let design = DMatrix::from_fn(rows.len(), j + 1, |r, c| {
                    if c == 0 {
                        1.0
                    } else {
                        trial.x[(rows[r], c - 1)]
                    }
                });
                let y: Vec<f64> = rows.iter().map(|&i| trial.y[i]).collect();
                Ok(ols::fit(&design, &y, HcVariant::HC0)?.coefficients.rows(1, j).into_owned())
            };
            arm_slope(true)? * e0 + arm_slope(false)? * e1
        }
    };
    Ok(tau_n - gamma.dot(&tau_x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::complete_randomization;
    use crate::population::generate_population;
    use crate::population::Recipe;
    use crate::rng::{substream, Stream};
    use proptest::prelude::*;

    fn trial(z: &[u8], y: &[f64], x: &[f64]) -> ObservedTrial {
        let zb: Vec<bool> = z.iter().map(|&v| v == 1).collect();
        let n = z.len();
        let j = x.len() / n;
        ObservedTrial::new(
            Assignment::new(zb).unwrap(),
            y.to_vec(),
            DMatrix::from_row_slice(n, j, x),
        )
        .unwrap()
    }

    fn random_trial(seed: u64) -> ObservedTrial {
        let pop = generate_population(Recipe::FrtP1, seed).unwrap();
        let mut rng = substream(seed, Stream::Assignment, 0);
        let z = complete_randomization(pop.len(), 30, &mut rng).unwrap();
        ObservedTrial::from_population(&pop, z).unwrap()
    }

    #[test]
    fn outcome_equal_to_treatment_gives_unit_effect() {
        let z = [1, 0, 1, 0, 0, 1];
        let y: Vec<f64> = z.iter().map(|&v| v as f64).collect();
        let t = trial(&z, &y, &[0.1, 0.5, -0.3, 0.9, -1.0, 0.2]);
        let r = estimate_n(&t, HcVariant::HC2, 0.05).unwrap();
        assert!((r.tau_hat - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_outcome_gives_zero_effect_and_zero_se() {
        let t = trial(&[1, 0, 1, 0, 0, 1], &[2.0; 6], &[0.1, 0.5, -0.3, 0.9, -1.0, 0.2]);
        let r = estimate_n(&t, HcVariant::HC2, 0.05).unwrap();
        assert!(r.tau_hat.abs() < 1e-12);
        assert!(r.se_hat < 1e-12);
    }

    #[test]
    fn additive_equals_unadjusted_when_covariate_is_irrelevant_and_balanced() {
        // Within each arm x is orthogonal to y, and the arm means of x agree.
        let z = [1, 1, 1, 1, 0, 0, 0, 0];
        let x = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let y = [3.0, 3.0, 5.0, 5.0, 1.0, 1.0, 2.0, 2.0];
        let t = trial(&z, &y, &x);
        let n = estimate_n(&t, HcVariant::HC2, 0.05).unwrap();
        let f = estimate_f(&t, HcVariant::HC2, 0.05).unwrap();
        assert!((n.tau_hat - f.tau_hat).abs() < 1e-10);
    }

    #[test]
    fn six_unit_additive_fit_matches_hand_arithmetic() {
        // Normal equations solved in closed form for lm(y ~ 1 + z + x).
        let z = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let x = [0.5, -0.2, 1.1, -0.9, 0.3, -0.8];
        let y = [2.0, 0.4, 2.9, -0.5, 1.7, 0.1];
        let t = trial(&[1, 0, 1, 0, 1, 0], &y, &x);
        // Frisch–Waugh: residualize y and z on [1, x], then regress.
        let xm = x.iter().sum::<f64>() / 6.0;
        let xc: Vec<f64> = x.iter().map(|v| v - xm).collect();
        let sxx: f64 = xc.iter().map(|v| v * v).sum();
        let resid = |v: &[f64]| -> Vec<f64> {
            let m = v.iter().sum::<f64>() / 6.0;
            let b = v.iter().zip(&xc).map(|(a, c)| (a - m) * c).sum::<f64>() / sxx;
            v.iter().zip(&xc).map(|(a, c)| a - m - b * c).collect()
        };
        let rz = resid(&z);
        let ry = resid(&y);
        let expect = rz.iter().zip(&ry).map(|(a, b)| a * b).sum::<f64>() / rz.iter().map(|v| v * v).sum::<f64>();
        let f = estimate_f(&t, HcVariant::HC2, 0.05).unwrap();
        assert!((f.tau_hat - expect).abs() < 1e-12);
    }

    #[test]
    fn interacted_equals_additive_when_arm_slopes_coincide() {
        // Duplicate arms: same x, treated outcomes shifted by a constant.
        let xs = [0.4, -1.0, 0.7, 1.5, -0.3];
        let ys = [1.0, -0.5, 2.2, 3.1, 0.4];
        let mut z = vec![];
        let mut x = vec![];
        let mut y = vec![];
        for (a, b) in xs.iter().zip(&ys) {
            z.push(0u8);
            x.push(*a);
            y.push(*b);
            z.push(1u8);
            x.push(*a);
            y.push(*b + 2.0);
        }
        let t = trial(&z, &y, &x);
        let f = estimate_f(&t, HcVariant::HC2, 0.05).unwrap();
        let l = estimate_l(&t, HcVariant::HC2, 0.05).unwrap();
        assert!((f.tau_hat - l.tau_hat).abs() < 1e-10);
    }

    #[test]
    fn identities_hold_on_random_trials() {
        for seed in 0..20 {
            let t = random_trial(seed);
            let n = estimate_n(&t, HcVariant::HC2, 0.05).unwrap().tau_hat;
            assert!((identity_route(&t, Spec::N).unwrap() - n).abs() < 1e-12);
            for (spec, est) in [
                (Spec::F, estimate_f(&t, HcVariant::HC2, 0.05).unwrap()),
                (Spec::L, estimate_l(&t, HcVariant::HC2, 0.05).unwrap()),
            ] {
                let via = identity_route(&t, spec).unwrap();
                assert!((via - est.tau_hat).abs() < 1e-10, "{spec:?}");
            }
        }
    }

    #[test]
    fn interacted_fit_fails_when_an_arm_is_too_small() {
        // Two treated units cannot identify intercept + 2 slopes.
        let z = [1, 1, 0, 0, 0, 0, 0, 0];
        let x = [0.1, 1.0, -0.4, 0.6, 1.2, -1.1, 0.0, 0.3, 0.9, -0.2, 0.5, -0.7, 0.8, 0.1, -0.5, 0.4];
        let y = [1.0, 2.0, 0.5, 0.1, -0.3, 0.8, 1.1, 0.2];
        let t = trial(&z, &y, &x);
        assert!(matches!(
            estimate_l(&t, HcVariant::HC0, 0.05),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn pt_extremes_reduce_to_constituents() {
        let t = random_trial(3);
        let n = estimate_n(&t, HcVariant::HC2, 0.05).unwrap();
        let f = estimate_f(&t, HcVariant::HC2, 0.05).unwrap();
        let l = estimate_l(&t, HcVariant::HC2, 0.05).unwrap();

        let never = estimate_pt(&t, f64::INFINITY, AdjustArm::L, HcVariant::HC2, 0.05).unwrap();
        assert_eq!((never.tau_hat, never.se_hat, never.ci), (n.tau_hat, n.se_hat, n.ci));
        assert_eq!(never.adjusted_arm_used, Some(ArmUsed::Unadjusted));
        assert_eq!(never.method, Method::PtL);

        let always_f = estimate_pt(&t, 0.0, AdjustArm::F, HcVariant::HC2, 0.05).unwrap();
        assert_eq!((always_f.tau_hat, always_f.se_hat), (f.tau_hat, f.se_hat));
        let always_l = estimate_pt(&t, 0.0, AdjustArm::L, HcVariant::HC2, 0.05).unwrap();
        assert_eq!((always_l.tau_hat, always_l.se_hat), (l.tau_hat, l.se_hat));
        assert_eq!(always_l.adjusted_arm_used, Some(ArmUsed::Adjusted));
    }

    #[test]
    fn ci_is_symmetric_normal_interval() {
        let t = random_trial(4);
        for alpha in [0.01, 0.05, 0.1] {
            let r = estimate_l(&t, HcVariant::HC2, alpha).unwrap();
            let q = normal_quantile(1.0 - alpha / 2.0);
            assert!((r.ci.lo - (r.tau_hat - q * r.se_hat)).abs() < 1e-12);
            assert!((r.ci.hi - (r.tau_hat + q * r.se_hat)).abs() < 1e-12);
        }
        assert!(estimate_n(&t, HcVariant::HC2, 0.0).is_err());
    }

    #[test]
    fn analysis_serializes_method_tags() {
        let t = random_trial(5);
        let rep = analyze_trial(&t, 1.0, HcVariant::HC2, 0.05).unwrap();
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"PT_F\"") && json.contains("\"PT_L\""));
        assert_eq!(rep.estimates.len(), 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn location_scale_equivariance(seed in 0u64..1000, c in 0.2f64..5.0, d in -10.0f64..10.0, a in 0.0f64..4.0) {
            let t = random_trial(seed);
            let y2: Vec<f64> = t.y().iter().map(|v| c * v + d).collect();
            let t2 = ObservedTrial::new(t.z().clone(), y2, t.x().clone()).unwrap();
            let r1 = analyze_trial(&t, a, HcVariant::HC2, 0.05).unwrap();
            let r2 = analyze_trial(&t2, a, HcVariant::HC2, 0.05).unwrap();
            prop_assert_eq!(r1.balance.phi, r2.balance.phi);
            prop_assert!((r1.balance.m - r2.balance.m).abs() < 1e-12);
            for (e1, e2) in r1.estimates.iter().zip(&r2.estimates) {
                prop_assert!((c * e1.tau_hat - e2.tau_hat).abs() < 1e-9 * (1.0 + e2.tau_hat.abs()));
                prop_assert!((c * e1.se_hat - e2.se_hat).abs() < 1e-9 * (1.0 + e2.se_hat));
            }
        }

        #[test]
        fn pt_composition_identity(seed in 0u64..1000, a in 0.0f64..4.0) {
            let t = random_trial(seed);
            let rep = analyze_trial(&t, a, HcVariant::HC2, 0.05).unwrap();
            let phi = if rep.balance.phi { 1.0 } else { 0.0 };
            let n = &rep.estimates[0];
            for (adj, pt) in [(&rep.estimates[1], &rep.estimates[3]), (&rep.estimates[2], &rep.estimates[4])] {
                prop_assert_eq!(pt.tau_hat, phi * n.tau_hat + (1.0 - phi) * adj.tau_hat);
                prop_assert_eq!(pt.se_hat, phi * n.se_hat + (1.0 - phi) * adj.se_hat);
                prop_assert_eq!(pt.adjusted_arm_used == Some(ArmUsed::Unadjusted), rep.balance.phi);
            }
        }
    }
}
