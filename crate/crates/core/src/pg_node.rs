//! Binary sparse Gaussian process classifier with Pólya-Gamma augmentation.
//!
//! The logistic likelihood is made conditionally Gaussian with one
//! Pólya-Gamma variable per instance. The variational family is
//! `q(u) = N(μ̃, Σ̃)` over the values at `m` inducing locations and
//! `q(w_i) = PG(1, c_i)`. Both blocks have closed-form optimal updates, so a
//! coordinate-ascent sweep never lowers the evidence lower bound.
//!
//! Kernel hyperparameters and inducing locations are trained by gradient
//! ascent on the same bound with `q` held fixed; see [`PGNode::hyper_step`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::Kernel;
use crate::kmeans::kmeans;
use crate::linalg::{from_rows, jittered_cholesky, log_det, matrix_rows, rows, symmetrize, vector};

const JITTER_REL: f64 = 1e-6;
const MAX_JITTER_REL: f64 = 1e-2;

/// `E[w]` for `w ~ PG(1, c)`, i.e. `tanh(c/2) / (2c)`, continuous at zero.
pub fn pg_expectation(c: f64) -> f64 {
    let c = c.abs();
    if c < 1e-4 {
        0.25 - c * c / 48.0
    } else {
        (0.5 * c).tanh() / (2.0 * c)
    }
}

fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Gaussian over a node's latent function at one test input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentPrediction {
    pub mean: f64,
    pub variance: f64,
}

/// Diagonal input-noise covariance, one variance per feature dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    sigma_x: Vec<f64>,
}

impl NoiseModel {
    pub fn new(sigma_x: Vec<f64>) -> Result<Self> {
        if let Some(v) = sigma_x.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidParameter(format!("noise variance must be finite and nonnegative, got {v}")));
        }
        Ok(NoiseModel { sigma_x })
    }

    pub fn zeros(dim: usize) -> Self {
        NoiseModel { sigma_x: vec![0.0; dim] }
    }

    pub fn sigma_x(&self) -> &[f64] {
        &self.sigma_x
    }

    pub fn dim(&self) -> usize {
        self.sigma_x.len()
    }

    /// `gᵀ diag(σ_x) g`
    pub fn quadratic_form(&self, g: &[f64]) -> f64 {
        self.sigma_x.iter().zip(g).map(|(s, gi)| s * gi * gi).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PGNode {
    kernel: Kernel,
    #[serde(with = "matrix_rows")]
    inducing: DMatrix<f64>,
    #[serde(with = "vector")]
    q_mean: DVector<f64>,
    #[serde(with = "matrix_rows")]
    q_cov: DMatrix<f64>,
    /// Pólya-Gamma tilting parameters of the training instances; not
    /// persisted since prediction does not need them.
    #[serde(skip)]
    pg_c: Vec<f64>,
    jitter: f64,
}

/// Per-call quantities shared by the bound, its gradient, and the updates.
struct Fit {
    chol: Cholesky<f64, Dyn>,
    /// `K_nm`, n × m
    knm: DMatrix<f64>,
    /// `K⁻¹ K_mn`, m × n
    b: DMatrix<f64>,
    /// marginal means of `q(f_i)`
    a: DVector<f64>,
    /// marginal variances of `q(f_i)`
    s: DVector<f64>,
}

impl PGNode {
    /// Places `m` inducing points at k-means centers of `x` (k-means++
    /// seeding, `kmeans_iters` Lloyd steps) and sets `q(u)` to the prior.
    pub fn init<R: Rng + ?Sized>(
        x: &DMatrix<f64>,
        y: &[bool],
        kernel: Kernel,
        m: usize,
        kmeans_iters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_dim(kernel.dim(), x.ncols())?;
        check_dim(x.nrows(), y.len())?;
        if m == 0 || m > x.nrows() {
            return Err(Error::InvalidParameter(format!("inducing count {m} must lie in 1..={}", x.nrows())));
        }
        if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
            return Err(Error::DegenerateNode);
        }
        let centers = kmeans(&rows(x), m, kmeans_iters, rng)?;
        Self::with_inducing(kernel, from_rows(&centers, x.ncols()), x.nrows())
    }

    /// Node with the given inducing locations, `q(u) = N(0, K_mm + jitter·I)`
    /// and `c_i = 1` for `n` training instances.
    pub fn with_inducing(kernel: Kernel, inducing: DMatrix<f64>, n: usize) -> Result<Self> {
        check_dim(kernel.dim(), inducing.ncols())?;
        if inducing.nrows() == 0 {
            return Err(Error::InvalidParameter("node needs at least one inducing point".into()));
        }
        let jitter = JITTER_REL * kernel.variance();
        let zr = rows(&inducing);
        let kmm = kernel.gram_rows(&zr, &zr);
        let (_, jitter) = jittered_cholesky(&kmm, jitter, MAX_JITTER_REL * kernel.variance())?;
        let m = inducing.nrows();
        let mut q_cov = kmm;
        for i in 0..m {
            q_cov[(i, i)] += jitter;
        }
        Ok(PGNode { kernel, inducing, q_mean: DVector::zeros(m), q_cov, pg_c: vec![1.0; n], jitter })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn inducing(&self) -> &DMatrix<f64> {
        &self.inducing
    }

    pub fn q_mean(&self) -> &DVector<f64> {
        &self.q_mean
    }

    pub fn q_cov(&self) -> &DMatrix<f64> {
        &self.q_cov
    }

    pub fn pg_c(&self) -> &[f64] {
        &self.pg_c
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    /// Overwrites the variational Gaussian; `cov` must be symmetric
    /// positive definite.
    pub fn set_variational(&mut self, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<()> {
        let m = self.num_inducing();
        check_dim(m, mean.len())?;
        check_dim(m, cov.nrows())?;
        check_dim(m, cov.ncols())?;
        if Cholesky::new(cov.clone()).is_none() {
            return Err(Error::InvalidParameter("variational covariance is not positive definite".into()));
        }
        self.q_mean = mean;
        self.q_cov = cov;
        Ok(())
    }

    /// Structural checks for a node read from a model file.
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        check_dim(self.kernel.dim(), self.inducing.ncols())?;
        let m = self.num_inducing();
        check_dim(m, self.q_mean.len())?;
        check_dim(m, self.q_cov.nrows())?;
        check_dim(m, self.q_cov.ncols())?;
        if !(self.jitter.is_finite() && self.jitter > 0.0) {
            return Err(Error::InvalidParameter(format!("jitter must be positive, got {}", self.jitter)));
        }
        Ok(())
    }

    fn max_jitter(&self) -> f64 {
        MAX_JITTER_REL * self.kernel.variance()
    }

    fn kmm_chol(&self, inducing_rows: &[Vec<f64>]) -> Result<(Cholesky<f64, Dyn>, f64)> {
        let kmm = self.kernel.gram_rows(inducing_rows, inducing_rows);
        jittered_cholesky(&kmm, self.jitter, self.max_jitter())
    }

    fn check_data(&self, x: &DMatrix<f64>, y: &[bool]) -> Result<()> {
        check_dim(self.dim(), x.ncols())?;
        check_dim(x.nrows(), y.len())?;
        check_dim(x.nrows(), self.pg_c.len())
    }

    fn fit(&self, xr: &[Vec<f64>]) -> Result<(Fit, f64)> {
        let zr = rows(&self.inducing);
        let (chol, jitter) = self.kmm_chol(&zr)?;
        let knm = self.kernel.gram_rows(xr, &zr);
        let b = chol.solve(&knm.transpose());
        let a = b.tr_mul(&self.q_mean);
        let sb = &self.q_cov * &b;
        let kdiag = self.kernel.variance();
        let s = DVector::from_fn(xr.len(), |i, _| {
            let bi = b.column(i);
            kdiag - knm.row(i).transpose().dot(&bi) + bi.dot(&sb.column(i))
        });
        Ok((Fit { chol, knm, b, a, s }, jitter))
    }

    /// One coordinate-ascent sweep: the optimal `c_i` for the current `q(u)`,
    /// then the optimal `q(u)` for the resulting Pólya-Gamma moments.
    pub fn update_variational(&mut self, x: &DMatrix<f64>, y: &[bool]) -> Result<()> {
        self.check_data(x, y)?;
        let xr = rows(x);
        let (fit, jitter) = self.fit(&xr)?;
        self.jitter = jitter;

        for (i, c) in self.pg_c.iter_mut().enumerate() {
            // clamp guards a marginal variance that rounding pushed below zero
            *c = (fit.a[i] * fit.a[i] + fit.s[i].max(0.0)).sqrt().max(1e-12);
        }
        let theta: Vec<f64> = self.pg_c.iter().map(|&c| pg_expectation(c)).collect();

        // Σ̃ = K P⁻¹ K and μ̃ = K P⁻¹ K_mn κ with P = K + K_mn Θ K_nm, which
        // equals (K⁻¹ + K⁻¹K_mn Θ K_nm K⁻¹)⁻¹ without forming K⁻¹.
        let mut k = fit.chol.l() * fit.chol.l().transpose();
        symmetrize(&mut k);
        let mut weighted = fit.knm.clone();
        for (i, t) in theta.iter().enumerate() {
            weighted.row_mut(i).scale_mut(*t);
        }
        let mut p = &k + fit.knm.tr_mul(&weighted);
        symmetrize(&mut p);
        let p_chol = match Cholesky::new(p.clone()) {
            Some(ch) => ch,
            None => jittered_cholesky(&p, self.jitter, self.max_jitter())?.0,
        };
        let kappa = DVector::from_iterator(y.len(), y.iter().map(|&v| if v { 0.5 } else { -0.5 }));
        let rhs = fit.knm.tr_mul(&kappa);
        let p_inv_k = p_chol.solve(&k);
        let mut cov = &k * &p_inv_k;
        symmetrize(&mut cov);
        let mean = &k * p_chol.solve(&rhs);
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("variational update".into()));
        }
        self.q_mean = mean;
        self.q_cov = cov;
        Ok(())
    }

    /// Evidence lower bound of the augmented model at the current `q(u)` and
    /// the stored Pólya-Gamma parameters.
    pub fn elbo(&self, x: &DMatrix<f64>, y: &[bool]) -> Result<f64> {
        self.check_data(x, y)?;
        let (fit, _) = self.fit(&rows(x))?;
        let value = self.data_term(&fit, y) - self.kl_term(&fit.chol)?;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite("evidence lower bound".into()))
        }
    }

    fn data_term(&self, fit: &Fit, y: &[bool]) -> f64 {
        let mut total = 0.0;
        for (i, (&c, &yi)) in self.pg_c.iter().zip(y).enumerate() {
            let kappa = if yi { 0.5 } else { -0.5 };
            let theta = pg_expectation(c);
            let (a, s) = (fit.a[i], fit.s[i]);
            total += -std::f64::consts::LN_2 + kappa * a - 0.5 * theta * (a * a + s) - log_cosh(0.5 * c)
                + 0.5 * c * c * theta;
        }
        total
    }

    /// `KL(N(μ̃, Σ̃) ‖ N(0, K_mm + jitter·I))`
    pub fn kl_divergence(&self) -> Result<f64> {
        let (chol, _) = self.kmm_chol(&rows(&self.inducing))?;
        self.kl_term(&chol)
    }

    fn kl_term(&self, chol: &Cholesky<f64, Dyn>) -> Result<f64> {
        let m = self.num_inducing() as f64;
        let s_chol = Cholesky::new(self.q_cov.clone())
            .ok_or_else(|| Error::InvalidParameter("variational covariance is not positive definite".into()))?;
        let trace = chol.solve(&self.q_cov).trace();
        let quad = self.q_mean.dot(&chol.solve(&self.q_mean));
        Ok(0.5 * (trace + quad - m + log_det(chol) - log_det(&s_chol)))
    }

    /// Trainable parameters: kernel log-hyperparameters followed by the
    /// inducing locations in row-major order.
    pub fn hyper_params(&self) -> Vec<f64> {
        let mut p = self.kernel.log_params();
        for r in self.inducing.row_iter() {
            p.extend(r.iter());
        }
        p
    }

    pub fn set_hyper_params(&mut self, p: &[f64]) -> Result<()> {
        let nk = self.kernel.num_params();
        let (m, d) = self.inducing.shape();
        check_dim(nk + m * d, p.len())?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hyperparameters".into()));
        }
        self.kernel.set_log_params(&p[..nk])?;
        self.inducing = DMatrix::from_row_slice(m, d, &p[nk..]);
        Ok(())
    }

    /// The bound and its analytic gradient with respect to
    /// [`hyper_params`](Self::hyper_params), holding `q(u)` and `c` fixed.
    pub fn elbo_grad(&self, x: &DMatrix<f64>, y: &[bool]) -> Result<(f64, Vec<f64>)> {
        self.check_data(x, y)?;
        let xr = rows(x);
        let zr = rows(&self.inducing);
        let (fit, _) = self.fit(&xr)?;
        let value = self.data_term(&fit, y) - self.kl_term(&fit.chol)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("evidence lower bound".into()));
        }

        let (n, m) = fit.knm.shape();
        let kinv = fit.chol.inverse();
        let alpha = &kinv * &self.q_mean;
        let e = &kinv * (&self.q_cov * &fit.b);
        let theta = DVector::from_iterator(n, self.pg_c.iter().map(|&c| pg_expectation(c)));
        let r = DVector::from_fn(n, |i, _| {
            let kappa = if y[i] { 0.5 } else { -0.5 };
            kappa - theta[i] * fit.a[i]
        });

        // ∂bound/∂K_mm (as a full, unsymmetrized matrix gradient)
        let mut b_theta = fit.b.clone();
        for (i, t) in theta.iter().enumerate() {
            b_theta.column_mut(i).scale_mut(*t);
        }
        let g_data = -(&fit.b * &r) * alpha.transpose() - 0.5 * &b_theta * fit.b.transpose() + &e * b_theta.transpose();
        let kinv_s_kinv = &kinv * &self.q_cov * &kinv;
        let g_kl = 0.5 * (-kinv_s_kinv - &alpha * alpha.transpose() + &kinv);
        let g_kmm = g_data - g_kl;
        // ∂bound/∂K_nm
        let g_knm = &r * alpha.transpose() + DMatrix::from_diagonal(&theta) * (&fit.b - &e).transpose();
        let g_diag_total = -0.5 * theta.sum();

        let nk = self.kernel.num_params();
        let d = self.dim();
        let mut grad = vec![0.0; nk + m * d];
        let mut pg = vec![0.0; nk];
        {
            let (gk, gz) = grad.split_at_mut(nk);
            for j in 0..m {
                for k in 0..m {
                    let w = g_kmm[(j, k)];
                    self.kernel.param_grad(&zr[j], &zr[k], &mut pg);
                    for (g, p) in gk.iter_mut().zip(&pg) {
                        *g += w * p;
                    }
                    if j != k {
                        self.kernel.add_grad_x1(&zr[j], &zr[k], w + g_kmm[(k, j)], &mut gz[j * d..(j + 1) * d]);
                    }
                }
            }
            for i in 0..n {
                for j in 0..m {
                    let w = g_knm[(i, j)];
                    self.kernel.param_grad(&xr[i], &zr[j], &mut pg);
                    for (g, p) in gk.iter_mut().zip(&pg) {
                        *g += w * p;
                    }
                    self.kernel.add_grad_x1(&zr[j], &xr[i], w, &mut gz[j * d..(j + 1) * d]);
                }
            }
            // k(x, x) is the same for every x
            if n > 0 {
                self.kernel.param_grad(&xr[0], &xr[0], &mut pg);
                for (g, p) in gk.iter_mut().zip(&pg) {
                    *g += g_diag_total * p;
                }
            }
        }
        Ok((value, grad))
    }

    /// One Adam step on the hyperparameters, halving the step until the
    /// bound does not decrease (at most ten times, else the step is dropped).
    /// Returns the bound after the step.
    pub fn hyper_step(
        &mut self,
        x: &DMatrix<f64>,
        y: &[bool],
        opt: &mut HyperOptimizer,
        learning_rate: f64,
    ) -> Result<f64> {
        let (start, grad) = self.elbo_grad(x, y)?;
        let step = opt.direction(&grad, learning_rate);
        let base = self.hyper_params();
        let saved = (self.kernel.clone(), self.inducing.clone());
        let mut scale = 1.0;
        for _ in 0..10 {
            let cand: Vec<f64> = base.iter().zip(&step).map(|(p, s)| p + scale * s).collect();
            if self.set_hyper_params(&cand).is_ok() {
                if let Ok(v) = self.elbo(x, y) {
                    if v >= start {
                        return Ok(v);
                    }
                }
            }
            scale *= 0.5;
        }
        self.kernel = saved.0;
        self.inducing = saved.1;
        Ok(start)
    }

    /// Precomputes the factorizations needed for repeated prediction.
    pub fn predictor(&self) -> Result<NodePredictor<'_>> {
        let zr = rows(&self.inducing);
        let (chol, _) = self.kmm_chol(&zr)?;
        let alpha = chol.solve(&self.q_mean);
        Ok(NodePredictor { node: self, zr, chol, alpha })
    }

    /// Predictive Gaussian of the latent function at `x_star`.
    pub fn predict_latent(&self, x_star: &[f64]) -> Result<LatentPrediction> {
        self.predictor()?.latent(x_star)
    }

    /// `∂μ*/∂x_star`
    pub fn mean_grad(&self, x_star: &[f64]) -> Result<Vec<f64>> {
        self.predictor()?.mean_grad(x_star)
    }

    /// Predictive Gaussian with the variance inflated by
    /// `(∂μ*/∂x)ᵀ Σ_x (∂μ*/∂x)`.
    pub fn predict_latent_noisy(&self, x_star: &[f64], noise: &NoiseModel) -> Result<LatentPrediction> {
        self.predictor()?.latent_noisy(x_star, noise)
    }
}

/// A node with its inducing Gram matrix factorized.
pub struct NodePredictor<'a> {
    node: &'a PGNode,
    zr: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    /// `K⁻¹ μ̃`
    alpha: DVector<f64>,
}

impl NodePredictor<'_> {
    pub fn latent(&self, x_star: &[f64]) -> Result<LatentPrediction> {
        check_dim(self.node.dim(), x_star.len())?;
        let kernel = &self.node.kernel;
        let ks = DVector::from_iterator(self.zr.len(), self.zr.iter().map(|z| kernel.eval_unchecked(x_star, z)));
        let kss = kernel.variance();
        let mean = ks.dot(&self.alpha);
        let b = self.chol.solve(&ks);
        let var = kss - ks.dot(&b) + b.dot(&(&self.node.q_cov * &b));
        Ok(LatentPrediction { mean, variance: var.max(kss * 1e-12) })
    }

    pub fn mean_grad(&self, x_star: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.node.dim(), x_star.len())?;
        let mut g = vec![0.0; x_star.len()];
        for (z, a) in self.zr.iter().zip(self.alpha.iter()) {
            self.node.kernel.add_grad_x1(x_star, z, *a, &mut g);
        }
        Ok(g)
    }

    pub fn latent_noisy(&self, x_star: &[f64], noise: &NoiseModel) -> Result<LatentPrediction> {
        check_dim(self.node.dim(), noise.dim())?;
        let mut p = self.latent(x_star)?;
        p.variance += noise.quadratic_form(&self.mean_grad(x_star)?);
        Ok(p)
    }

    /// Plain prediction when `noise` is `None`.
    pub fn latent_with(&self, x_star: &[f64], noise: Option<&NoiseModel>) -> Result<LatentPrediction> {
        match noise {
            Some(n) => self.latent_noisy(x_star, n),
            None => self.latent(x_star),
        }
    }
}

/// Adam moment estimates for one node's hyperparameters.
#[derive(Clone, Debug, Default)]
pub struct HyperOptimizer {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl HyperOptimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new() -> Self {
        Self::default()
    }

    /// Ascent direction for gradient `g`.
    fn direction(&mut self, g: &[f64], lr: f64) -> Vec<f64> {
        if self.m.len() != g.len() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
            self.t = 0;
        }
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(g)
            .map(|((m, v), gi)| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gi;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gi * gi;
                lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn two_clusters(n_per: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, Vec<bool>) {
        let mut v = Vec::new();
        let mut y = Vec::new();
        for i in 0..2 * n_per {
            let centre = if i % 2 == 0 { -3.0 } else { 3.0 };
            let e: f64 = StandardNormal.sample(rng);
            v.push(centre + 0.5 * e);
            y.push(i % 2 == 1);
        }
        (DMatrix::from_column_slice(v.len(), 1, &v), y)
    }

    fn random_problem(seed: u64, n: usize, d: usize) -> (DMatrix<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
        let mut y: Vec<bool> = (0..n).map(|i| x[(i, 0)] + 0.3 * x[(i, d - 1)] > 0.0).collect();
        y[0] = true;
        y[1] = false;
        (x, y)
    }

    #[test]
    fn pg_expectation_limits() {
        assert!((pg_expectation(1e-8) - 0.25).abs() < 1e-6);
        assert!((pg_expectation(0.0) - 0.25).abs() < 1e-15);
        let c: f64 = 2.0;
        assert!((pg_expectation(c) - (1.0f64).tanh() / 4.0).abs() < 1e-15);
        // series and closed form agree near the switch point
        let c: f64 = 1.0001e-4;
        assert!(((0.5 * c).tanh() / (2.0 * c) - (0.25 - c * c / 48.0)).abs() < 1e-14);
    }

    #[test]
    fn log_cosh_is_stable() {
        assert!((log_cosh(0.3) - 0.3f64.cosh().ln()).abs() < 1e-15);
        assert!((log_cosh(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn init_sets_prior() {
        let (x, y) = random_problem(0, 10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = Kernel::rbf(vec![1.0, 1.0], 1.0).unwrap();
        let node = PGNode::init(&x, &y, k, 2, 10, &mut rng).unwrap();
        assert_eq!(node.num_inducing(), 2);
        assert_eq!(node.q_mean().as_slice(), &[0.0, 0.0]);
        assert_eq!(node.pg_c(), &[1.0; 10]);
        assert!(node.kl_divergence().unwrap().abs() < 1e-12);
    }

    #[test]
    fn init_with_all_points_uses_the_data() {
        let (x, y) = random_problem(4, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = Kernel::rbf(vec![1.0, 1.0], 1.0).unwrap();
        let node = PGNode::init(&x, &y, k, 6, 0, &mut rng).unwrap();
        let mut got = rows(node.inducing());
        let mut want = rows(&x);
        let key = |a: &Vec<f64>, b: &Vec<f64>| a.partial_cmp(b).unwrap();
        got.sort_by(key);
        want.sort_by(key);
        assert_eq!(got, want);
    }

    #[test]
    fn init_errors() {
        let (x, y) = random_problem(0, 5, 1);
        let k = Kernel::rbf(vec![1.0], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(PGNode::init(&x, &y, k.clone(), 6, 5, &mut rng).is_err());
        assert!(matches!(PGNode::init(&x, &[true; 5], k.clone(), 2, 5, &mut rng), Err(Error::DegenerateNode)));
        for m in 2..=5 {
            assert!(PGNode::init(&x, &y, k.clone(), m, 5, &mut rng).is_ok());
        }
    }

    #[test]
    fn separable_clusters_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, y) = two_clusters(10, &mut rng);
        let k = Kernel::rbf(vec![2.0], 1.0).unwrap();
        let mut node = PGNode::init(&x, &y, k, 2, 10, &mut rng).unwrap();
        for _ in 0..20 {
            node.update_variational(&x, &y).unwrap();
        }
        let p = node.predictor().unwrap();
        for i in 0..x.nrows() {
            let mu = p.latent(&[x[(i, 0)]]).unwrap().mean;
            assert_eq!(mu > 0.0, y[i]);
        }
    }

    #[test]
    fn sweeps_never_lower_the_bound() {
        let (x, y) = random_problem(3, 30, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Kernel::rbf(vec![1.0, 1.5], 2.0).unwrap();
        let mut node = PGNode::init(&x, &y, k, 5, 10, &mut rng).unwrap();
        let mut prev = node.elbo(&x, &y).unwrap();
        let first = prev;
        for _ in 0..20 {
            node.update_variational(&x, &y).unwrap();
            let e = node.elbo(&x, &y).unwrap();
            assert!(e >= prev - 1e-8, "{e} < {prev}");
            prev = e;
        }
        assert!(prev > first);
    }

    #[test]
    fn prediction_at_inducing_point_with_zero_mean() {
        let (x, y) = random_problem(5, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let node = PGNode::init(&x, &y, Kernel::rbf(vec![1.0, 1.0], 1.0).unwrap(), 3, 5, &mut rng).unwrap();
        let z: Vec<f64> = node.inducing().row(0).iter().copied().collect();
        let p = node.predict_latent(&z).unwrap();
        assert_eq!(p.mean, 0.0);
        assert!(p.variance > 0.0);
        assert!(p.variance <= node.kernel().variance() + node.jitter());
        assert_eq!(node.mean_grad(&z).unwrap(), vec![0.0, 0.0]);
        assert!(node.predict_latent(&[0.0]).is_err());
    }

    #[test]
    fn noisy_prediction_adds_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, y) = two_clusters(6, &mut rng);
        let mut node = PGNode::init(&x, &y, Kernel::rbf(vec![2.0], 1.0).unwrap(), 2, 10, &mut rng).unwrap();
        for _ in 0..5 {
            node.update_variational(&x, &y).unwrap();
        }
        let xs = [0.4];
        let plain = node.predict_latent(&xs).unwrap();
        let g = node.mean_grad(&xs).unwrap()[0];
        assert!(g.abs() > 1e-6);
        let noisy = node.predict_latent_noisy(&xs, &NoiseModel::new(vec![0.3]).unwrap()).unwrap();
        assert_eq!(noisy.mean, plain.mean);
        assert!((noisy.variance - (plain.variance + 0.3 * g * g)).abs() < 1e-14);
        let same = node.predict_latent_noisy(&xs, &NoiseModel::zeros(1)).unwrap();
        assert_eq!(same, plain);
        assert!(node.predict_latent_noisy(&xs, &NoiseModel::zeros(2)).is_err());
    }

    #[test]
    fn noise_model_rejects_negative_variance() {
        assert!(NoiseModel::new(vec![0.1, -0.1]).is_err());
        assert!(NoiseModel::new(vec![f64::NAN]).is_err());
    }

    /// Finite-difference check of the hyperparameter gradient, for each
    /// kernel family, at a point where `q` is away from the prior.
    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let (x, y) = random_problem(11, 15, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kernels = [
            Kernel::rbf(vec![0.8, 1.3], 1.7).unwrap(),
            Kernel::powered_rbf(vec![0.8, 1.3], 1.7, 1.5).unwrap(),
            crate::kernels::KernelSpec {
                family: crate::kernels::KernelFamily::Rbf30,
                alpha: None,
                lengthscale: Some(1.0),
                output_scale: 0.1,
            }
            .build(2, 1.0, &mut rng)
            .unwrap(),
        ];
        for k in kernels {
            let mut node = PGNode::init(&x, &y, k, 4, 10, &mut rng).unwrap();
            for _ in 0..3 {
                node.update_variational(&x, &y).unwrap();
            }
            let (_, g) = node.elbo_grad(&x, &y).unwrap();
            let p0 = node.hyper_params();
            let h = 1e-6;
            for i in 0..p0.len() {
                let mut probe = node.clone();
                let mut p = p0.clone();
                p[i] += h;
                probe.set_hyper_params(&p).unwrap();
                let up = probe.elbo(&x, &y).unwrap();
                p[i] -= 2.0 * h;
                probe.set_hyper_params(&p).unwrap();
                let down = probe.elbo(&x, &y).unwrap();
                let fd = (up - down) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "param {i}: analytic {} vs fd {fd}", g[i]);
            }
        }
    }

    #[test]
    fn hyper_step_does_not_lower_the_bound() {
        let (x, y) = random_problem(12, 25, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut node = PGNode::init(&x, &y, Kernel::rbf(vec![1.0, 1.0], 1.0).unwrap(), 3, 10, &mut rng).unwrap();
        let mut opt = HyperOptimizer::new();
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..10 {
            node.update_variational(&x, &y).unwrap();
            let before = node.elbo(&x, &y).unwrap();
            assert!(before >= prev - 1e-8);
            let after = node.hyper_step(&x, &y, &mut opt, 0.3).unwrap();
            assert!(after >= before);
            prev = after;
        }
    }

    #[test]
    fn serde_round_trip_predicts_identically() {
        let (x, y) = random_problem(2, 12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut node = PGNode::init(&x, &y, Kernel::rbf(vec![1.0; 3], 1.0).unwrap(), 3, 10, &mut rng).unwrap();
        node.update_variational(&x, &y).unwrap();
        let back: PGNode = serde_json::from_str(&serde_json::to_string(&node).unwrap()).unwrap();
        back.validate().unwrap();
        let q = [0.1, -0.2, 0.3];
        assert_eq!(node.predict_latent(&q).unwrap(), back.predict_latent(&q).unwrap());
    }
}
