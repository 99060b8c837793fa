//! Dense least squares with heteroskedasticity-robust (sandwich) covariance.
//!
//! Fits go through a Householder QR of the design matrix; the normal
//! equations are never formed. With `X = QR`, the sandwich
//! `(XᵀX)⁻¹ Xᵀ diag(ωᵢ eᵢ²) X (XᵀX)⁻¹` is evaluated as
//! `R⁻¹ (Qᵀ diag(ωᵢ eᵢ²) Q) R⁻ᵀ`, and the hat diagonals are the squared row
//! norms of the thin `Q`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted ratio of extreme singular values of the design matrix.
/// Fixed so that results are reproducible across callers.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Leverage values this close to one are treated as exactly one.
const LEVERAGE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HcVariant {
    HC0,
    HC1,
    #[default]
    HC2,
    HC3,
}

impl std::str::FromStr for HcVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HC0" => Ok(HcVariant::HC0),
            "HC1" => Ok(HcVariant::HC1),
            "HC2" => Ok(HcVariant::HC2),
            "HC3" => Ok(HcVariant::HC3),
            other => Err(Error::InvalidConfig(format!("unknown HC variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for HcVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            HcVariant::HC0 => "HC0",
            HcVariant::HC1 => "HC1",
            HcVariant::HC2 => "HC2",
            HcVariant::HC3 => "HC3",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub coefficients: DVector<f64>,
    pub robust_cov: DMatrix<f64>,
    pub residuals: DVector<f64>,
    pub hat_diagonals: DVector<f64>,
    pub n: usize,
    pub p: usize,
}

impl RegressionFit {
    /// Robust standard error of coefficient `j`.
    pub fn se(&self, j: usize) -> f64 {
        self.robust_cov[(j, j)].max(0.0).sqrt()
    }

    pub fn fitted(&self, design: &DMatrix<f64>) -> DVector<f64> {
        design * &self.coefficients
    }
}

/// Least-squares fit of `response` on the columns of `design`.
pub fn fit(design: &DMatrix<f64>, response: &[f64], hc: HcVariant) -> Result<RegressionFit> {
    let (n, p) = design.shape();
    if response.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows but response has {} entries",
            response.len()
        )));
    }
    if p == 0 || n <= p {
        return Err(Error::DimensionMismatch(format!(
            "need n > p >= 1, got n = {n}, p = {p}"
        )));
    }

    let qr = design.clone().qr();
    let r = qr.r();
    let q = qr.q();

    let sv = r.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(ratio > RANK_TOLERANCE) {
        return Err(Error::RankDeficient { ratio });
    }

    let y = DVector::from_column_slice(response);
    let qty = q.tr_mul(&y);
    let coefficients = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficient { ratio })?;
    let residuals = &y - &q * &qty;

    let hat_diagonals = DVector::from_iterator(n, q.row_iter().map(|row| row.norm_squared()));

    let dof_scale = n as f64 / (n - p) as f64;
    let mut scaled = q.clone();
    for i in 0..n {
        let e2 = residuals[i] * residuals[i];
        let h = hat_diagonals[i];
        let w = match hc {
            HcVariant::HC0 => e2,
            HcVariant::HC1 => dof_scale * e2,
            HcVariant::HC2 | HcVariant::HC3 => {
                if h >= 1.0 - LEVERAGE_TOLERANCE {
                    return Err(Error::LeverageOne { index: i });
                }
                if hc == HcVariant::HC2 {
                    e2 / (1.0 - h)
                } else {
                    e2 / ((1.0 - h) * (1.0 - h))
                }
            }
        };
        let s = w.sqrt();
        scaled.row_mut(i).scale_mut(s);
    }
    let meat = scaled.tr_mul(&scaled);
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(Error::RankDeficient { ratio })?;
    let cov = &r_inv * meat * r_inv.transpose();
    let robust_cov = (&cov + cov.transpose()) * 0.5;

    Ok(RegressionFit {
        coefficients,
        robust_cov,
        residuals,
        hat_diagonals,
        n,
        p,
    })
}
