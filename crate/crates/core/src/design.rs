//! Assignment mechanisms and the Mahalanobis balance test.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::population::{covariance_cholesky, covariate_covariance};
use crate::refdist::chi2_quantile;

/// Default cap on rerandomization draws.
pub const DEFAULT_MAX_ATTEMPTS: u64 = 1_000_000;

/// Treatment indicators with both arms nonempty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    z: Vec<bool>,
    n1: usize,
}

impl Assignment {
    pub fn new(z: Vec<bool>) -> Result<Self> {
        let n1 = z.iter().filter(|&&t| t).count();
        let n = z.len();
        if n1 == 0 || n1 == n {
            return Err(Error::InvalidSizes { n, n1 });
        }
        Ok(Assignment { z, n1 })
    }

    pub fn indicators(&self) -> &[bool] {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n0(&self) -> usize {
        self.z.len() - self.n1
    }

    /// Arm-swapped complement.
    pub fn complement(&self) -> Assignment {
        Assignment {
            z: self.z.iter().map(|t| !t).collect(),
            n1: self.n0(),
        }
    }
}

/// Uniform draw over all `C(N, n1)` assignments by a partial Fisher–Yates
/// shuffle of the unit indices.
pub fn complete_randomization<R: Rng + ?Sized>(n: usize, n1: usize, rng: &mut R) -> Result<Assignment> {
    if n1 == 0 || n1 >= n {
        return Err(Error::InvalidSizes { n, n1 });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut z = vec![false; n];
    for i in 0..n1 {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
        z[idx[i]] = true;
    }
    Ok(Assignment { z, n1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    /// Difference in covariate means, treated minus control.
    pub tau_x: Vec<f64>,
    /// Mahalanobis distance of `tau_x` under its exact design covariance.
    pub m: f64,
    pub a: f64,
    /// `true` when `m < a` (balanced: skip adjustment).
    pub phi: bool,
}

/// Reusable evaluator of `M(z)` for a fixed covariate matrix.
///
/// `cov(τ̂_x) = S²_x / (N e0 e1)` is the exact design covariance under
/// complete randomization, so `M(z)` needs no refit for a new `z`.
#[derive(Debug, Clone)]
pub struct BalanceChecker {
    x: DMatrix<f64>,
    chol_l: DMatrix<f64>,
}

impl BalanceChecker {
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        if x.nrows() < 2 || x.ncols() == 0 {
            return Err(Error::DimensionMismatch("balance test needs N >= 2 and J >= 1".into()));
        }
        let s2x = covariate_covariance(x);
        let chol = covariance_cholesky(&s2x)?;
        Ok(BalanceChecker {
            x: x.clone(),
            chol_l: chol.unpack(),
        })
    }

    pub fn covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn tau_x(&self, z: &[bool]) -> DVector<f64> {
        let j = self.x.ncols();
        let mut s1 = DVector::zeros(j);
        let mut s0 = DVector::zeros(j);
        let mut n1 = 0usize;
        for (i, &t) in z.iter().enumerate() {
            let row = self.x.row(i).transpose();
            if t {
                s1 += row;
                n1 += 1;
            } else {
                s0 += row;
            }
        }
        let n0 = z.len() - n1;
        s1 / n1 as f64 - s0 / n0 as f64
    }

    /// Mahalanobis distance `M(z)`.
    pub fn distance(&self, z: &[bool]) -> f64 {
        self.distance_of(z, &self.tau_x(z))
    }

    fn distance_of(&self, z: &[bool], tau_x: &DVector<f64>) -> f64 {
        let n = z.len() as f64;
        let n1 = z.iter().filter(|&&t| t).count() as f64;
        let (e1, e0) = (n1 / n, 1.0 - n1 / n);
        let w = self
            .chol_l
            .solve_lower_triangular(tau_x)
            .expect("Cholesky factor has a positive diagonal");
        (n * e0 * e1 * w.norm_squared()).max(0.0)
    }

    pub fn report(&self, z: &Assignment, a: f64) -> Result<BalanceReport> {
        if z.len() != self.x.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "assignment has {} units, covariates have {}",
                z.len(),
                self.x.nrows()
            )));
        }
        let tau_x = self.tau_x(z.indicators());
        let m = self.distance_of(z.indicators(), &tau_x);
        Ok(BalanceReport {
            tau_x: tau_x.iter().copied().collect(),
            m,
            a,
            phi: m < a,
        })
    }
}

/// One-shot balance test; see [`BalanceChecker`] for repeated use.
pub fn balance_test(x: &DMatrix<f64>, z: &Assignment, a: f64) -> Result<BalanceReport> {
    BalanceChecker::new(x)?.report(z, a)
}

/// Rerandomization: redraw complete randomizations until `M < a`. Returns the
/// accepted assignment and the number of draws used.
pub fn rem_randomization<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    n1: usize,
    a: f64,
    rng: &mut R,
    max_attempts: u64,
) -> Result<(Assignment, u64)> {
    let checker = BalanceChecker::new(x)?;
    rem_with_checker(&checker, n1, a, rng, max_attempts)
}

pub fn rem_with_checker<R: Rng + ?Sized>(
    checker: &BalanceChecker,
    n1: usize,
    a: f64,
    rng: &mut R,
    max_attempts: u64,
) -> Result<(Assignment, u64)> {
    if !(a > 0.0) {
        return Err(Error::InvalidConfig(format!("rerandomization threshold must be positive, got {a}")));
    }
    let n = checker.x.nrows();
    for attempt in 1..=max_attempts {
        let z = complete_randomization(n, n1, rng)?;
        if checker.distance(z.indicators()) < a {
            return Ok((z, attempt));
        }
    }
    Err(Error::AcceptanceExhausted {
        attempts: max_attempts,
    })
}

/// Balance threshold, given directly or as a χ²_J quantile level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Value(f64),
    ChiSquareQuantile(f64),
}

impl Threshold {
    pub fn resolve(&self, covariates: usize) -> Result<f64> {
        match *self {
            Threshold::Value(a) if a >= 0.0 => Ok(a),
            Threshold::Value(a) => Err(Error::InvalidConfig(format!("threshold must be >= 0, got {a}"))),
            Threshold::ChiSquareQuantile(p) if p > 0.0 && p < 1.0 => Ok(chi2_quantile(covariates, p)),
            Threshold::ChiSquareQuantile(p) if p == 0.0 => Ok(0.0),
            Threshold::ChiSquareQuantile(p) if p == 1.0 => Ok(f64::INFINITY),
            Threshold::ChiSquareQuantile(p) => Err(Error::InvalidConfig(format!(
                "chi-square quantile level must lie in [0, 1], got {p}"
            ))),
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Value(a) if a.is_infinite() => f.write_str("inf"),
            Threshold::Value(a) => write!(f, "{a}"),
            Threshold::ChiSquareQuantile(p) => write!(f, "chi2_quantile({p})"),
        }
    }
}

impl FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let bad = || Error::InvalidConfig(format!("cannot parse threshold `{s}`"));
        if let Some(inner) = t.strip_prefix("chi2_quantile(").and_then(|r| r.strip_suffix(')')) {
            let p: f64 = inner.trim().parse().map_err(|_| bad())?;
            return Ok(Threshold::ChiSquareQuantile(p));
        }
        match t.to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" => Ok(Threshold::Value(f64::INFINITY)),
            _ => t.parse::<f64>().map(Threshold::Value).map_err(|_| bad()),
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Value(a) if a.is_finite() => s.serialize_f64(*a),
            _ => s.serialize_str(&self.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(a) => Ok(Threshold::Value(a)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refdist::pi_a;
    use crate::rng::{substream, Stream};
    use std::collections::HashMap;

    fn grid_covariates(n: usize, j: usize, seed: u64) -> DMatrix<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = substream(seed, Stream::Population, 0);
        crate::population::center_columns(DMatrix::from_fn(n, j, |_, _| StandardNormal.sample(&mut rng)))
    }

    #[test]
    fn assignment_validates_arms() {
        assert!(Assignment::new(vec![true, true]).is_err());
        assert!(Assignment::new(vec![false, false]).is_err());
        let a = Assignment::new(vec![true, false, false]).unwrap();
        assert_eq!((a.n1(), a.n0()), (1, 2));
        assert_eq!(a.complement().n1(), 2);
        let mut rng = substream(1, Stream::Assignment, 0);
        assert!(matches!(
            complete_randomization(5, 0, &mut rng),
            Err(Error::InvalidSizes { .. })
        ));
        assert!(complete_randomization(5, 5, &mut rng).is_err());
    }

    #[test]
    fn two_unit_design_is_fair() {
        let mut rng = substream(2, Stream::Assignment, 0);
        let first = (0..10_000)
            .filter(|_| complete_randomization(2, 1, &mut rng).unwrap().indicators()[0])
            .count();
        assert!((first as f64 / 1e4 - 0.5).abs() < 0.02);
    }

    #[test]
    fn arm_size_is_fixed() {
        let mut rng = substream(3, Stream::Assignment, 0);
        for _ in 0..200 {
            let z = complete_randomization(500, 100, &mut rng).unwrap();
            assert_eq!(z.indicators().iter().filter(|&&t| t).count(), 100);
        }
    }

    #[test]
    fn eight_choose_four_is_uniform() {
        // Pearson goodness of fit over all 70 assignments; the χ²₆₉ survival
        // function comes from the regularized incomplete gamma.
        let mut rng = substream(4, Stream::Assignment, 0);
        let draws = 70_000;
        let mut counts: HashMap<Vec<bool>, usize> = HashMap::new();
        for _ in 0..draws {
            let z = complete_randomization(8, 4, &mut rng).unwrap();
            *counts.entry(z.indicators().to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), 70);
        let expected = draws as f64 / 70.0;
        let stat: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - pi_a(69, stat);
        assert!(p > 0.001, "chi-square {stat}, p {p}");
    }

    #[test]
    fn zero_imbalance_and_zero_threshold() {
        // Arms are mirror images so τ̂_x = 0.
        let x = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let z = Assignment::new(vec![true, true, false, false]).unwrap();
        let r = balance_test(&x, &z, 0.5).unwrap();
        assert_eq!(r.m, 0.0);
        assert!(r.phi);
        let r0 = balance_test(&x, &z, 0.0).unwrap();
        assert!(!r0.phi);
    }

    #[test]
    fn twenty_percent_of_allocations_balance() {
        let x = {
            use rand_distr::{Distribution, Uniform};
            let mut rng = substream(5, Stream::Population, 0);
            let u = Uniform::new(-1.0, 1.0).unwrap();
            crate::population::center_columns(DMatrix::from_fn(500, 5, |_, _| u.sample(&mut rng)))
        };
        let checker = BalanceChecker::new(&x).unwrap();
        let a = chi2_quantile(5, 0.2);
        let mut rng = substream(5, Stream::Assignment, 0);
        let reps = 10_000;
        let hits = (0..reps)
            .filter(|_| {
                let z = complete_randomization(500, 100, &mut rng).unwrap();
                checker.distance(z.indicators()) < a
            })
            .count();
        let rate = hits as f64 / reps as f64;
        assert!((rate - 0.20).abs() < 0.015, "{rate}");
    }

    #[test]
    fn mahalanobis_is_affine_invariant_and_swap_symmetric() {
        let x = grid_covariates(40, 3, 6);
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, -1.0, 1.0, 0.3, 0.0, 0.2, 3.0]);
        let xa = &x * a;
        let c1 = BalanceChecker::new(&x).unwrap();
        let c2 = BalanceChecker::new(&xa).unwrap();
        let mut rng = substream(6, Stream::Assignment, 0);
        for _ in 0..50 {
            let z = complete_randomization(40, 20, &mut rng).unwrap();
            let m1 = c1.distance(z.indicators());
            let m2 = c2.distance(z.indicators());
            assert!((m1 - m2).abs() <= 1e-8 * m1.max(1.0));
            let mc = c1.distance(z.complement().indicators());
            assert!((m1 - mc).abs() <= 1e-10 * m1.max(1.0));
        }
    }

    #[test]
    fn singular_covariates_are_rejected() {
        let x = DMatrix::from_fn(6, 2, |i, j| i as f64 * (j + 1) as f64);
        assert!(matches!(BalanceChecker::new(&x), Err(Error::SingularCovariates)));
    }

    #[test]
    fn rem_with_infinite_threshold_accepts_first_draw() {
        let x = grid_covariates(30, 2, 7);
        let mut r1 = substream(7, Stream::Assignment, 0);
        let mut r2 = substream(7, Stream::Assignment, 0);
        let (z, attempts) = rem_randomization(&x, 10, f64::INFINITY, &mut r1, 10).unwrap();
        assert_eq!(attempts, 1);
        assert_eq!(z, complete_randomization(30, 10, &mut r2).unwrap());
    }

    #[test]
    fn rem_waiting_time_is_geometric() {
        let x = grid_covariates(200, 5, 8);
        let checker = BalanceChecker::new(&x).unwrap();
        let a = chi2_quantile(5, 0.8);
        let mut rng = substream(8, Stream::Assignment, 0);
        let runs = 10_000;
        let total: u64 = (0..runs)
            .map(|_| {
                let (z, k) = rem_with_checker(&checker, 50, a, &mut rng, 1000).unwrap();
                assert!(checker.distance(z.indicators()) < a);
                k
            })
            .sum();
        let mean = total as f64 / runs as f64;
        assert!((mean - 1.25).abs() < 0.05, "{mean}");
    }

    #[test]
    fn rem_acceptance_matches_pi_a_in_one_dimension() {
        let x = grid_covariates(400, 1, 9);
        let checker = BalanceChecker::new(&x).unwrap();
        let a = chi2_quantile(1, 0.05);
        let mut rng = substream(9, Stream::Assignment, 0);
        let runs = 2_000;
        let total: u64 = (0..runs)
            .map(|_| rem_with_checker(&checker, 100, a, &mut rng, 100_000).unwrap().1)
            .sum();
        let rate = runs as f64 / total as f64;
        // Three-sigma band for a binomial proportion over `total` trials.
        let se = (0.05f64 * 0.95 / total as f64).sqrt();
        assert!((rate - 0.05).abs() < 0.01f64.max(3.0 * se), "{rate}");
    }

    #[test]
    fn rem_reports_exhaustion() {
        let x = grid_covariates(30, 2, 10);
        let mut rng = substream(10, Stream::Assignment, 0);
        assert!(matches!(
            rem_randomization(&x, 10, 1e-12, &mut rng, 50),
            Err(Error::AcceptanceExhausted { attempts: 50 })
        ));
    }

    #[test]
    fn threshold_parsing() {
        assert_eq!("inf".parse::<Threshold>().unwrap(), Threshold::Value(f64::INFINITY));
        assert_eq!("2.5".parse::<Threshold>().unwrap(), Threshold::Value(2.5));
        assert_eq!(
            "chi2_quantile(0.2)".parse::<Threshold>().unwrap(),
            Threshold::ChiSquareQuantile(0.2)
        );
        assert!("nope".parse::<Threshold>().is_err());
        let a = Threshold::ChiSquareQuantile(0.2).resolve(5).unwrap();
        assert!((pi_a(5, a) - 0.2).abs() < 1e-12);
        assert_eq!(Threshold::ChiSquareQuantile(1.0).resolve(3).unwrap(), f64::INFINITY);
    }
}
