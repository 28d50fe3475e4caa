//! Unsupervised feature denoising and per-dimension noise-variance estimates.
//!
//! A noisy matrix `S` is split into `clean + residual`; the noise variance of
//! feature `j` is the population variance of residual column `j`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DenoiseMethod {
    /// Keep singular values above the universal hard threshold for an
    /// unknown noise level.
    #[default]
    SvdThreshold,
    /// Centered moving average down each column with an odd window.
    ColumnSmooth {
        window: usize,
    },
    Identity,
}

impl FromStr for DenoiseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svd" => Ok(DenoiseMethod::SvdThreshold),
            "none" => Ok(DenoiseMethod::Identity),
            _ => {
                let w = s.strip_prefix("smooth:").and_then(|w| w.parse::<usize>().ok()).ok_or_else(|| {
                    Error::InvalidParameter(format!("unknown denoiser {s:?} (expected svd, smooth:<window> or none)"))
                })?;
                if w == 0 || w % 2 == 0 {
                    return Err(Error::InvalidParameter(format!("smoothing window must be odd and positive, got {w}")));
                }
                Ok(DenoiseMethod::ColumnSmooth { window: w })
            }
        }
    }
}

impl fmt::Display for DenoiseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenoiseMethod::SvdThreshold => f.write_str("svd"),
            DenoiseMethod::ColumnSmooth { window } => write!(f, "smooth:{window}"),
            DenoiseMethod::Identity => f.write_str("none"),
        }
    }
}

impl TryFrom<String> for DenoiseMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DenoiseMethod> for String {
    fn from(m: DenoiseMethod) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug)]
pub struct DenoiseResult {
    pub clean: DMatrix<f64>,
    pub residual: DMatrix<f64>,
    pub sigma_x: Vec<f64>,
}

pub fn denoise(s: &DMatrix<f64>, method: DenoiseMethod) -> Result<DenoiseResult> {
    if s.nrows() < 2 {
        return Err(Error::InvalidParameter(format!("denoising needs at least 2 rows, got {}", s.nrows())));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input features".into()));
    }
    let estimate = match method {
        DenoiseMethod::SvdThreshold => svd_threshold(s),
        DenoiseMethod::ColumnSmooth { window } => column_smooth(s, window)?,
        DenoiseMethod::Identity => s.clone(),
    };
    let (clean, residual) = exact_split(s, estimate);
    let sigma_x = noise_variance(&residual)?;
    Ok(DenoiseResult { clean, residual, sigma_x })
}

/// Per-column variance with `1/n` normalization.
pub fn noise_variance(residual: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = residual.nrows();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("variance needs at least 2 rows, got {n}")));
    }
    Ok(residual
        .column_iter()
        .map(|c| {
            let mean = c.sum() / n as f64;
            c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
        })
        .collect())
}

/// Approximation of the optimal hard-threshold coefficient for an unknown
/// noise level, applied to the median singular value.
fn omega(beta: f64) -> f64 {
    0.56 * beta.powi(3) - 0.95 * beta.powi(2) + 1.82 * beta + 1.43
}

/// Projects `s` onto the singular subspace whose singular values exceed the
/// threshold. Singular values come from the eigendecomposition of the smaller
/// Gram matrix, which stays accurate for exactly rank-deficient inputs.
fn svd_threshold(s: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = s.shape();
    let beta = n.min(d) as f64 / n.max(d) as f64;
    let tall = n >= d;
    let gram = if tall { s.tr_mul(s) } else { s * s.transpose() };
    let eig = gram.symmetric_eigen();
    let sv: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
    let mut sorted = sv.clone();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let median = if k % 2 == 1 { sorted[k / 2] } else { 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]) };
    let tau = omega(beta) * median;
    let kept: Vec<usize> = (0..k).filter(|&i| sv[i] > tau).collect();
    if kept.is_empty() {
        return DMatrix::zeros(n, d);
    }
    let basis = eig.eigenvectors.select_columns(&kept);
    let projector = &basis * basis.transpose();
    if tall {
        s * projector
    } else {
        projector * s
    }
}

fn column_smooth(s: &DMatrix<f64>, window: usize) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("smoothing window must be odd and positive, got {window}")));
    }
    if window >= n {
        return Err(Error::InvalidParameter(format!(
            "smoothing window {window} must be smaller than the row count {n}"
        )));
    }
    let half = window / 2;
    let mut out = DMatrix::zeros(n, s.ncols());
    for (j, col) in s.column_iter().enumerate() {
        for i in 0..n {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let sum: f64 = (lo..=hi).map(|r| col[r]).sum();
            out[(i, j)] = sum / (hi - lo + 1) as f64;
        }
    }
    Ok(out)
}

/// Chooses `clean ≈ estimate` and `residual` so that `clean + residual`
/// reproduces `s` exactly in floating point.
fn exact_split(s: &DMatrix<f64>, estimate: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut clean = estimate;
    let mut residual = DMatrix::zeros(s.nrows(), s.ncols());
    for (idx, &target) in s.iter().enumerate() {
        let mut c = clean[idx];
        let mut r = target - c;
        let mut tries = 0;
        while c + r != target && tries < 4 {
            c = target - r;
            r = target - c;
            tries += 1;
        }
        if c + r != target {
            c = target;
            r = 0.0;
        }
        clean[idx] = c;
        residual[idx] = r;
    }
    (clean, residual)
}
