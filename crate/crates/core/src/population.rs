//! Finite populations (the full science table), their oracle parameters, and
//! the data-generating recipes used by the simulation studies.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Redraws allowed when an anchored recipe solves for an unusable anchor.
const MAX_ANCHOR_REDRAWS: usize = 10_000;
const ANCHOR_TOLERANCE: f64 = 1e-6;
/// The solved noise term must look like the others: `|ε_1| ≤ 3σ`.
const ANCHOR_SD_LIMIT: f64 = 3.0;

/// Potential outcomes and covariates for every unit. Covariate columns are
/// centered on construction.
#[derive(Debug, Clone)]
pub struct FinitePopulation {
    y0: Vec<f64>,
    y1: Vec<f64>,
    x: DMatrix<f64>,
}

impl FinitePopulation {
    pub fn new(y0: Vec<f64>, y1: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = y0.len();
        if y1.len() != n || x.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "y0 has {n} rows, y1 has {}, x has {}",
                y1.len(),
                x.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::DimensionMismatch("need at least one covariate".into()));
        }
        if n < 2 {
            return Err(Error::DimensionMismatch("need at least two units".into()));
        }
        Ok(FinitePopulation {
            y0,
            y1,
            x: center_columns(x),
        })
    }

    pub fn y0(&self) -> &[f64] {
        &self.y0
    }

    pub fn y1(&self) -> &[f64] {
        &self.y1
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.y0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y0.is_empty()
    }

    pub fn covariates(&self) -> usize {
        self.x.ncols()
    }

    /// Average treatment effect.
    pub fn tau(&self) -> f64 {
        mean(&self.y1) - mean(&self.y0)
    }

    /// Observed outcomes under assignment `z`.
    pub fn observe(&self, z: &[bool]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, &t)| if t { self.y1[i] } else { self.y0[i] })
            .collect()
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Finite-population variance with divisor `N − 1`.
pub(crate) fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

pub fn center_columns(mut x: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in x.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    x
}

/// `S²_x` with divisor `N − 1`, computed about the column means.
pub fn covariate_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let xc = center_columns(x.clone());
    xc.tr_mul(&xc) / (x.nrows() as f64 - 1.0)
}

/// Cholesky factor of `S²_x`, rejecting numerically singular matrices.
pub(crate) fn covariance_cholesky(s2x: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let chol = s2x.clone().cholesky().ok_or(Error::SingularCovariates)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = (diag.min(), diag.max());
    // Pivots are square roots of eigen-scale quantities; compare squared.
    if !(hi > 0.0) || (lo * lo) / (hi * hi) <= crate::ols::RANK_TOLERANCE {
        return Err(Error::SingularCovariates);
    }
    Ok(chol)
}

/// A quantity indexed by the three regression specifications: unadjusted
/// (difference in means), additive, and fully interacted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BySpec<T> {
    pub n: T,
    pub f: T,
    pub l: T,
}

/// Oracle parameters of a finite population under arm proportion `e1`.
#[derive(Debug, Clone)]
pub struct TrueParameters {
    pub tau: f64,
    pub gamma0: DVector<f64>,
    pub gamma1: DVector<f64>,
    pub gamma_f: DVector<f64>,
    pub s2_0: BySpec<f64>,
    pub s2_1: BySpec<f64>,
    pub s2_tau: BySpec<f64>,
    pub v: BySpec<f64>,
    pub kappa: BySpec<f64>,
    pub rho: BySpec<f64>,
    pub c: BySpec<DVector<f64>>,
    pub s2_x: DMatrix<f64>,
    pub e0: f64,
    pub e1: f64,
}

/// Oracle parameters: population regression slopes, adjusted potential
/// outcomes, their variances, and the asymptotic variances `v_*`.
pub fn true_parameters(pop: &FinitePopulation, e1: f64) -> Result<TrueParameters> {
    let n = pop.len();
    let nf = n as f64;
    if !(e1 > 0.0 && e1 < 1.0) {
        return Err(Error::InvalidSizes { n, n1: (e1 * nf).round() as usize });
    }
    let n1 = e1 * nf;
    if (n1 - n1.round()).abs() > 1e-9 {
        return Err(Error::InvalidSizes { n, n1: n1.round() as usize });
    }
    let e0 = 1.0 - e1;
    let x = pop.x();
    let s2_x = x.tr_mul(x) / (nf - 1.0);
    let chol = covariance_cholesky(&s2_x)?;

    let slope = |y: &[f64]| -> DVector<f64> {
        let m = mean(y);
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - m));
        chol.solve(&(x.tr_mul(&yc) / (nf - 1.0)))
    };
    let gamma0 = slope(pop.y0());
    let gamma1 = slope(pop.y1());
    let gamma_f = &gamma0 * e0 + &gamma1 * e1;

    let adjust = |y: &[f64], g: &DVector<f64>| -> Vec<f64> {
        let xg = x * g;
        y.iter().zip(xg.iter()).map(|(a, b)| a - b).collect()
    };
    let y0 = pop.y0().to_vec();
    let y1 = pop.y1().to_vec();
    let y0_f = adjust(&y0, &gamma_f);
    let y1_f = adjust(&y1, &gamma_f);
    let y0_l = adjust(&y0, &gamma0);
    let y1_l = adjust(&y1, &gamma1);

    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| u - v).collect() };
    let s2_0 = BySpec {
        n: variance(&y0),
        f: variance(&y0_f),
        l: variance(&y0_l),
    };
    let s2_1 = BySpec {
        n: variance(&y1),
        f: variance(&y1_f),
        l: variance(&y1_l),
    };
    let s2_tau = BySpec {
        n: variance(&diff(&y1, &y0)),
        f: variance(&diff(&y1_f, &y0_f)),
        l: variance(&diff(&y1_l, &y0_l)),
    };
    let vof = |s0: f64, s1: f64, st: f64| s0 / e0 + s1 / e1 - st;
    let v = BySpec {
        n: vof(s2_0.n, s2_1.n, s2_tau.n),
        f: vof(s2_0.f, s2_1.f, s2_tau.f),
        l: vof(s2_0.l, s2_1.l, s2_tau.l),
    };
    let kof = |v: f64, st: f64| if v + st > 0.0 { v / (v + st) } else { 1.0 };
    let kappa = BySpec {
        n: kof(v.n, s2_tau.n),
        f: kof(v.f, s2_tau.f),
        l: kof(v.l, s2_tau.l),
    };
    let rof = |vs: f64| if vs > 0.0 { v.l / vs } else { 1.0 };
    let rho = BySpec {
        n: rof(v.n),
        f: rof(v.f),
        l: 1.0,
    };
    let c = BySpec {
        n: &s2_x * (&gamma0 / e0 + &gamma1 / e1),
        f: &s2_x * ((&gamma1 - &gamma0) * (1.0 / e1 - 1.0 / e0)),
        l: DVector::zeros(x.ncols()),
    };

    Ok(TrueParameters {
        tau: pop.tau(),
        gamma0,
        gamma1,
        gamma_f,
        s2_0,
        s2_1,
        s2_tau,
        v,
        kappa,
        rho,
        c,
        s2_x,
        e0,
        e1,
    })
}

/// Data-generating recipes of the three simulation studies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Recipe {
    /// N = 500, J = 5 uniform covariates, cubic outcome surfaces.
    Efficiency,
    /// N = 2000, J = 1 normal covariate, linear outcomes with orthogonal noise.
    Coverage { sigma_eps: f64 },
    /// N = 100, J = 1, cubic outcomes recentered to a zero average effect.
    FrtP1,
    /// N = 100, J = 1, linear control outcome, orthogonal noise, zero average effect.
    FrtP2,
}

impl Recipe {
    pub fn population_size(&self) -> usize {
        match self {
            Recipe::Efficiency => 500,
            Recipe::Coverage { .. } => 2000,
            Recipe::FrtP1 | Recipe::FrtP2 => 100,
        }
    }

    pub fn default_n1(&self) -> usize {
        match self {
            Recipe::Efficiency => 100,
            Recipe::Coverage { .. } => 100,
            Recipe::FrtP1 | Recipe::FrtP2 => 10,
        }
    }

    pub fn covariates(&self) -> usize {
        match self {
            Recipe::Efficiency => 5,
            _ => 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Recipe::Coverage { sigma_eps } = self {
            if !(*sigma_eps > 0.0 && sigma_eps.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "sigma_eps must be positive, got {sigma_eps}"
                )));
            }
        }
        Ok(())
    }
}

/// Draws a population from `recipe` on the population stream of `seed`.
///
/// Covariates are centered before outcomes are built from them. Recipes that
/// need `Σ εᵢ xᵢ = 0` solve for the first unit's noise; if that value is
/// implausible the whole population is redrawn on the next substream.
pub fn generate_population(recipe: Recipe, seed: u64) -> Result<FinitePopulation> {
    recipe.validate()?;
    for attempt in 0..MAX_ANCHOR_REDRAWS {
        let mut rng = substream(seed, Stream::Population, attempt as u64);
        if let Some(pop) = draw_once(recipe, &mut rng)? {
            return Ok(pop);
        }
    }
    Err(Error::DegenerateAnchor {
        attempts: MAX_ANCHOR_REDRAWS,
    })
}

fn draw_once<R: Rng>(recipe: Recipe, rng: &mut R) -> Result<Option<FinitePopulation>> {
    let n = recipe.population_size();
    let j = recipe.covariates();
    let unif = Uniform::new(-1.0, 1.0).expect("valid bounds");
    let x = match recipe {
        Recipe::Efficiency | Recipe::FrtP1 => DMatrix::from_fn(n, j, |_, _| unif.sample(rng)),
        Recipe::Coverage { .. } | Recipe::FrtP2 => {
            DMatrix::from_fn(n, j, |_, _| StandardNormal.sample(rng))
        }
    };
    let x = center_columns(x);
    let normal = |rng: &mut R, mu: f64, sd: f64| -> f64 {
        Normal::new(mu, sd).expect("valid sd").sample(rng)
    };

    let (y0, y1) = match recipe {
        Recipe::Efficiency => {
            let mut y0 = Vec::with_capacity(n);
            let mut y1 = Vec::with_capacity(n);
            for i in 0..n {
                let cube: f64 = x.row(i).iter().map(|v| v * v * v).sum();
                y0.push(normal(rng, -cube, 0.1));
                y1.push(normal(rng, cube, 0.4));
            }
            (y0, y1)
        }
        Recipe::FrtP1 => {
            let mut y0 = Vec::with_capacity(n);
            let mut y1 = Vec::with_capacity(n);
            for i in 0..n {
                let c = x[(i, 0)].powi(3);
                y1.push(normal(rng, c, 1.0));
                y0.push(normal(rng, -c, 0.5));
            }
            recenter(&mut y0);
            recenter(&mut y1);
            (y0, y1)
        }
        Recipe::Coverage { sigma_eps } => {
            let Some(eps) = anchored_noise(&x, sigma_eps, rng) else {
                return Ok(None);
            };
            let y0 = (0..n).map(|i| -2.5 * x[(i, 0)] + eps[i]).collect();
            let y1 = (0..n).map(|i| x[(i, 0)] + eps[i]).collect();
            (y0, y1)
        }
        Recipe::FrtP2 => {
            let Some(eps) = anchored_noise(&x, 1.0, rng) else {
                return Ok(None);
            };
            let mut y0: Vec<f64> = (0..n).map(|i| x[(i, 0)] + eps[i]).collect();
            let mut y1 = eps;
            recenter(&mut y0);
            recenter(&mut y1);
            (y0, y1)
        }
    };
    FinitePopulation::new(y0, y1, x).map(Some)
}

/// Noise with `ε_2..ε_N ~ N(0, σ²)` and `ε_1` solved so that `Σ εᵢ xᵢ = 0`
/// for the (single, centered) covariate. `None` when `x_1` is near zero or
/// the solved `ε_1` falls outside `±3σ`; left unchecked it is usually an
/// extreme outlier that dominates the design variance.
fn anchored_noise<R: Rng>(x: &DMatrix<f64>, sigma: f64, rng: &mut R) -> Option<Vec<f64>> {
    let n = x.nrows();
    let x1 = x[(0, 0)];
    if x1.abs() < ANCHOR_TOLERANCE {
        return None;
    }
    let dist = Normal::new(0.0, sigma).expect("valid sd");
    let mut eps = vec![0.0; n];
    let mut cross = 0.0;
    for i in 1..n {
        eps[i] = dist.sample(rng);
        cross += eps[i] * x[(i, 0)];
    }
    eps[0] = -cross / x1;
    (eps[0].abs() <= ANCHOR_SD_LIMIT * sigma).then_some(eps)
}

fn recenter(v: &mut [f64]) {
    let m = mean(v);
    v.iter_mut().for_each(|a| *a -= m);
}
