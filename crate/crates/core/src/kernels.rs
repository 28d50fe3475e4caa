//! Covariance functions: ARD squared exponential, a sum of thirty independent
//! squared exponentials, and the powered squared exponential.
//!
//! Trainable hyperparameters are exposed in log space so that gradient steps
//! can never produce a non-positive lengthscale or output scale.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::rows;

/// Number of components in the summed kernel.
pub const SUM_RBF_COMPONENTS: usize = 30;

/// Admissible exponent range for the powered kernel, `[ALPHA_MIN, ALPHA_MAX)`.
pub const ALPHA_MIN: f64 = 0.9;
pub const ALPHA_MAX: f64 = 2.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RbfRepr {
    lengthscales: Vec<f64>,
    output_scale: f64,
}

/// ARD squared-exponential parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RbfRepr", into = "RbfRepr")]
pub struct RbfParams {
    lengthscales: Vec<f64>,
    output_scale: f64,
    // 1 / lengthscale^2
    inv_sq: Vec<f64>,
}

impl TryFrom<RbfRepr> for RbfParams {
    type Error = Error;

    fn try_from(r: RbfRepr) -> Result<Self> {
        RbfParams::new(r.lengthscales, r.output_scale)
    }
}

impl From<RbfParams> for RbfRepr {
    fn from(p: RbfParams) -> Self {
        RbfRepr { lengthscales: p.lengthscales, output_scale: p.output_scale }
    }
}

impl RbfParams {
    pub fn new(lengthscales: Vec<f64>, output_scale: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::InvalidParameter("kernel needs at least one lengthscale".into()));
        }
        if let Some(l) = lengthscales.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidParameter(format!("lengthscale must be positive, got {l}")));
        }
        if !(output_scale.is_finite() && output_scale > 0.0) {
            return Err(Error::InvalidParameter(format!("output scale must be positive, got {output_scale}")));
        }
        let inv_sq = lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        Ok(RbfParams { lengthscales, output_scale, inv_sq })
    }

    /// Same lengthscale in every dimension.
    pub fn isotropic(dim: usize, lengthscale: f64, output_scale: f64) -> Result<Self> {
        Self::new(vec![lengthscale; dim], output_scale)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn output_scale(&self) -> f64 {
        self.output_scale
    }

    fn num_params(&self) -> usize {
        self.dim() + 1
    }

    fn write_log_params(&self, out: &mut Vec<f64>) {
        out.extend(self.lengthscales.iter().map(|l| l.ln()));
        out.push(self.output_scale.ln());
    }

    fn read_log_params(&mut self, p: &[f64]) -> Result<()> {
        let d = self.dim();
        *self = Self::new(p[..d].iter().map(|v| v.exp()).collect(), p[d].exp())?;
        Ok(())
    }

    /// Scaled squared distance `Σ_d ((a_d - b_d) / ℓ_d)²`.
    #[inline]
    fn scaled_sq_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).zip(&self.inv_sq).map(|((x, y), w)| (x - y) * (x - y) * w).sum()
    }

    /// `s · exp(-power/2 · r²)`
    #[inline]
    fn eval_pow(&self, a: &[f64], b: &[f64], power: f64) -> f64 {
        self.output_scale * (-0.5 * power * self.scaled_sq_dist(a, b)).exp()
    }

    fn add_grad_x1(&self, a: &[f64], b: &[f64], power: f64, out: &mut [f64]) {
        let k = self.eval_pow(a, b, power);
        for (((g, x), y), w) in out.iter_mut().zip(a).zip(b).zip(&self.inv_sq) {
            *g -= power * k * (x - y) * w;
        }
    }

    fn write_param_grad(&self, a: &[f64], b: &[f64], power: f64, out: &mut [f64]) {
        let k = self.eval_pow(a, b, power);
        let d = self.dim();
        for i in 0..d {
            let diff = a[i] - b[i];
            out[i] = power * k * diff * diff * self.inv_sq[i];
        }
        out[d] = k;
    }
}

/// Thirty independent ARD squared-exponential components, summed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumRbfParams {
    components: Vec<RbfParams>,
}

impl SumRbfParams {
    pub fn new(components: Vec<RbfParams>) -> Result<Self> {
        let p = SumRbfParams { components };
        p.validate()?;
        Ok(p)
    }

    /// Component lengthscales and output scales are each drawn log-uniformly
    /// from `[0.1, 10] ×` the given initial values.
    pub fn random<R: Rng + ?Sized>(dim: usize, lengthscale: f64, output_scale: f64, rng: &mut R) -> Result<Self> {
        let ln10 = std::f64::consts::LN_10;
        let components = (0..SUM_RBF_COMPONENTS)
            .map(|_| {
                let fl = (rng.random_range(-1.0..=1.0) * ln10).exp();
                let fs = (rng.random_range(-1.0..=1.0) * ln10).exp();
                RbfParams::isotropic(dim, lengthscale * fl, output_scale * fs)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(components)
    }

    pub fn components(&self) -> &[RbfParams] {
        &self.components
    }

    fn validate(&self) -> Result<()> {
        if self.components.len() != SUM_RBF_COMPONENTS {
            return Err(Error::InvalidParameter(format!(
                "summed kernel needs {SUM_RBF_COMPONENTS} components, got {}",
                self.components.len()
            )));
        }
        let d = self.components[0].dim();
        for c in &self.components {
            check_dim(d, c.dim())?;
        }
        Ok(())
    }
}

/// `s · (k_rbf / s)^α`: the power applies to the correlation part only, so
/// the output scale means the same thing as for the plain kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoweredRbfParams {
    base: RbfParams,
    alpha: f64,
}

impl PoweredRbfParams {
    pub fn new(base: RbfParams, alpha: f64) -> Result<Self> {
        let p = PoweredRbfParams { base, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn base(&self) -> &RbfParams {
        &self.base
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn validate(&self) -> Result<()> {
        if (ALPHA_MIN..ALPHA_MAX).contains(&self.alpha) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "powered kernel exponent must lie in [{ALPHA_MIN}, {ALPHA_MAX}), got {}",
                self.alpha
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Kernel {
    Rbf(RbfParams),
    #[serde(rename = "rbf30")]
    SumRbf(SumRbfParams),
    #[serde(rename = "powrbf")]
    PoweredRbf(PoweredRbfParams),
}

impl Kernel {
    pub fn rbf(lengthscales: Vec<f64>, output_scale: f64) -> Result<Self> {
        Ok(Kernel::Rbf(RbfParams::new(lengthscales, output_scale)?))
    }

    pub fn powered_rbf(lengthscales: Vec<f64>, output_scale: f64, alpha: f64) -> Result<Self> {
        Ok(Kernel::PoweredRbf(PoweredRbfParams::new(RbfParams::new(lengthscales, output_scale)?, alpha)?))
    }

    pub fn dim(&self) -> usize {
        match self {
            Kernel::Rbf(p) => p.dim(),
            Kernel::SumRbf(p) => p.components[0].dim(),
            Kernel::PoweredRbf(p) => p.base.dim(),
        }
    }

    /// Checks invariants that deserialization cannot enforce on its own.
    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::Rbf(p) if p.dim() == 0 => Err(Error::InvalidParameter("kernel has no dimensions".into())),
            Kernel::Rbf(_) => Ok(()),
            Kernel::SumRbf(p) => p.validate(),
            Kernel::PoweredRbf(p) => p.validate(),
        }
    }

    /// Prior variance `k(x, x)`, the same for every `x`.
    pub fn variance(&self) -> f64 {
        match self {
            Kernel::Rbf(p) => p.output_scale,
            Kernel::SumRbf(p) => p.components.iter().map(|c| c.output_scale).sum(),
            Kernel::PoweredRbf(p) => p.base.output_scale,
        }
    }

    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        self.check_pair(x1, x2)?;
        Ok(self.eval_unchecked(x1, x2))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x1: &[f64], x2: &[f64]) -> f64 {
        match self {
            Kernel::Rbf(p) => p.eval_pow(x1, x2, 1.0),
            Kernel::SumRbf(p) => p.components.iter().map(|c| c.eval_pow(x1, x2, 1.0)).sum(),
            Kernel::PoweredRbf(p) => p.base.eval_pow(x1, x2, p.alpha),
        }
    }

    /// Gram matrix between the rows of `a` and the rows of `b`.
    pub fn gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), a.ncols())?;
        check_dim(self.dim(), b.ncols())?;
        Ok(self.gram_rows(&rows(a), &rows(b)))
    }

    pub(crate) fn gram_rows(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval_unchecked(&a[i], &b[j]))
    }

    /// Gradient of `k(x1, x2)` with respect to `x1`.
    pub fn grad_x1(&self, x1: &[f64], x2: &[f64]) -> Result<Vec<f64>> {
        self.check_pair(x1, x2)?;
        let mut g = vec![0.0; x1.len()];
        self.add_grad_x1(x1, x2, 1.0, &mut g);
        Ok(g)
    }

    /// Adds `weight · ∂k(x1, x2)/∂x1` into `out`.
    pub(crate) fn add_grad_x1(&self, x1: &[f64], x2: &[f64], weight: f64, out: &mut [f64]) {
        if weight == 0.0 {
            return;
        }
        let mut g = vec![0.0; x1.len()];
        match self {
            Kernel::Rbf(p) => p.add_grad_x1(x1, x2, 1.0, &mut g),
            Kernel::SumRbf(p) => {
                for c in &p.components {
                    c.add_grad_x1(x1, x2, 1.0, &mut g);
                }
            }
            Kernel::PoweredRbf(p) => p.base.add_grad_x1(x1, x2, p.alpha, &mut g),
        }
        for (o, gi) in out.iter_mut().zip(&g) {
            *o += weight * gi;
        }
    }

    /// Number of trainable hyperparameters. The powered kernel's exponent is
    /// fixed and not counted.
    pub fn num_params(&self) -> usize {
        match self {
            Kernel::Rbf(p) => p.num_params(),
            Kernel::SumRbf(p) => p.components.iter().map(RbfParams::num_params).sum(),
            Kernel::PoweredRbf(p) => p.base.num_params(),
        }
    }

    /// Trainable hyperparameters in log space: per component, the
    /// log-lengthscales followed by the log output scale.
    pub fn log_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        match self {
            Kernel::Rbf(p) => p.write_log_params(&mut out),
            Kernel::SumRbf(p) => p.components.iter().for_each(|c| c.write_log_params(&mut out)),
            Kernel::PoweredRbf(p) => p.base.write_log_params(&mut out),
        }
        out
    }

    pub fn set_log_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len())?;
        if let Some(v) = params.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("kernel log-parameter {v}")));
        }
        match self {
            Kernel::Rbf(p) => p.read_log_params(params),
            Kernel::SumRbf(p) => {
                let mut offset = 0;
                for c in &mut p.components {
                    let n = c.num_params();
                    c.read_log_params(&params[offset..offset + n])?;
                    offset += n;
                }
                Ok(())
            }
            Kernel::PoweredRbf(p) => p.base.read_log_params(params),
        }
    }

    /// Writes `∂k(x1, x2)/∂θ` for every log-hyperparameter `θ` into `out`
    /// (length `num_params`).
    pub(crate) fn param_grad(&self, x1: &[f64], x2: &[f64], out: &mut [f64]) {
        match self {
            Kernel::Rbf(p) => p.write_param_grad(x1, x2, 1.0, out),
            Kernel::SumRbf(p) => {
                let mut offset = 0;
                for c in &p.components {
                    let n = c.num_params();
                    c.write_param_grad(x1, x2, 1.0, &mut out[offset..offset + n]);
                    offset += n;
                }
            }
            Kernel::PoweredRbf(p) => p.base.write_param_grad(x1, x2, p.alpha, out),
        }
    }

    fn check_pair(&self, x1: &[f64], x2: &[f64]) -> Result<()> {
        if x1.len() != x2.len() {
            return Err(Error::DimensionMismatch { expected: x1.len(), found: x2.len() });
        }
        check_dim(self.dim(), x1.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Rbf30,
    Powrbf,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(KernelFamily::Rbf),
            "rbf30" => Ok(KernelFamily::Rbf30),
            "powrbf" => Ok(KernelFamily::Powrbf),
            other => {
                Err(Error::InvalidParameter(format!("unknown kernel family {other:?} (expected rbf, rbf30 or powrbf)")))
            }
        }
    }
}

/// Recipe for building a node kernel once the input dimension is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Exponent of the powered kernel; ignored by the other families.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Initial lengthscale shared by all dimensions. `None` picks the median
    /// pairwise distance of the training inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengthscale: Option<f64>,
    pub output_scale: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { family: KernelFamily::Rbf, alpha: None, lengthscale: None, output_scale: 1.0 }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::InvalidParameter(format!("output scale must be positive, got {}", self.output_scale)));
        }
        if let Some(l) = self.lengthscale {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::InvalidParameter(format!("lengthscale must be positive, got {l}")));
            }
        }
        if self.family == KernelFamily::Powrbf {
            let alpha = self.alpha.ok_or_else(|| Error::InvalidParameter("powrbf kernel requires alpha".into()))?;
            if !(ALPHA_MIN..ALPHA_MAX).contains(&alpha) {
                return Err(Error::InvalidParameter(format!(
                    "powered kernel exponent must lie in [{ALPHA_MIN}, {ALPHA_MAX}), got {alpha}"
                )));
            }
        }
        Ok(())
    }

    /// `fallback_lengthscale` is used when the spec leaves it unset.
    pub fn build<R: Rng + ?Sized>(&self, dim: usize, fallback_lengthscale: f64, rng: &mut R) -> Result<Kernel> {
        self.validate()?;
        let ls = self.lengthscale.unwrap_or(fallback_lengthscale);
        match self.family {
            KernelFamily::Rbf => Ok(Kernel::Rbf(RbfParams::isotropic(dim, ls, self.output_scale)?)),
            KernelFamily::Rbf30 => Ok(Kernel::SumRbf(SumRbfParams::random(dim, ls, self.output_scale, rng)?)),
            KernelFamily::Powrbf => Ok(Kernel::PoweredRbf(PoweredRbfParams::new(
                RbfParams::isotropic(dim, ls, self.output_scale)?,
                self.alpha.unwrap_or(1.0),
            )?)),
        }
    }
}
