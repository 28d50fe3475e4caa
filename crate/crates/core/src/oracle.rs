//! Brute-force references for testing: the full-rank Pólya-Gamma GP
//! classifier and tree probabilities by explicit path enumeration.
//!
//! Deliberately slow and self-contained. The dense algebra here is plain
//! Gaussian elimination on nested vectors and shares nothing with the
//! factorizations used by the node and tree code.

#![allow(clippy::needless_range_loop)]

use std::f64::consts::{LN_2, PI};

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};
use crate::kernels::Kernel;
use crate::pg_node::NoiseModel;
use crate::tree::{Child, ClassTree};

/// Largest problem the exact posterior accepts.
pub const MAX_EXACT_N: usize = 12;
/// Largest problem whose evidence is integrated by quadrature.
pub const MAX_QUADRATURE_N: usize = 3;
const QUADRATURE_NODES: usize = 50;
const JITTER_REL: f64 = 1e-9;
const TOLERANCE: f64 = 1e-10;
const MAX_ITERS: usize = 100_000;

type Mat = Vec<Vec<f64>>;

/// Gaussian `q(f) = N(mean, cov)` over the latent values at the training
/// inputs, after coordinate ascent on the full-rank bound.
#[derive(Clone, Debug)]
pub struct ExactPosterior {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    /// Log marginal likelihood by quadrature when `evidence_is_exact`,
    /// otherwise the converged bound (a lower bound on it).
    pub log_evidence: f64,
    pub evidence_is_exact: bool,
    /// Converged value of the full-rank bound.
    pub elbo: f64,
    pub iterations: usize,
}

/// Solves `a · X = b` by Gaussian elimination with partial pivoting.
fn solve(a: &Mat, b: &Mat) -> Result<Mat> {
    let n = a.len();
    let k = b[0].len();
    let mut aug: Mat = a.iter().zip(b).map(|(ra, rb)| ra.iter().chain(rb).copied().collect()).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs())).expect("nonempty range");
        if aug[piv][col] == 0.0 {
            return Err(Error::NonFinite("singular system in oracle".into()));
        }
        aug.swap(col, piv);
        for r in (col + 1)..n {
            let f = aug[r][col] / aug[col][col];
            if f != 0.0 {
                for c in col..(n + k) {
                    aug[r][c] -= f * aug[col][c];
                }
            }
        }
    }
    let mut x = vec![vec![0.0; k]; n];
    for c in 0..k {
        for r in (0..n).rev() {
            let mut acc = aug[r][n + c];
            for j in (r + 1)..n {
                acc -= aug[r][j] * x[j][c];
            }
            x[r][c] = acc / aug[r][r];
        }
    }
    Ok(x)
}

/// `ln |det a|` via elimination.
fn log_abs_det(a: &Mat) -> Result<f64> {
    let n = a.len();
    let mut m = a.clone();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).expect("nonempty range");
        if m[piv][col] == 0.0 {
            return Err(Error::NonFinite("singular matrix in oracle".into()));
        }
        m.swap(col, piv);
        acc += m[col][col].abs().ln();
        for r in (col + 1)..n {
            let f = m[r][col] / m[col][col];
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    Ok(acc)
}

fn column(v: &[f64]) -> Mat {
    v.iter().map(|x| vec![*x]).collect()
}

fn identity(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn pg_mean(c: f64) -> f64 {
    if c < 1e-4 {
        0.25 - c * c / 48.0
    } else {
        (c / 2.0).tanh() / (2.0 * c)
    }
}

fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

/// Full-rank bound `E_q[log p(y, w | f)] - KL(q(w)) - KL(q(f) || p(f))`.
fn bound(k: &Mat, mean: &[f64], cov: &Mat, c: &[f64], kappa: &[f64]) -> Result<f64> {
    let n = mean.len();
    let mut data = 0.0;
    for i in 0..n {
        let t = pg_mean(c[i]);
        data += -LN_2 + kappa[i] * mean[i] - t * (mean[i] * mean[i] + cov[i][i]) / 2.0 - ln_cosh(c[i] / 2.0)
            + c[i] * c[i] * t / 2.0;
    }
    let k_inv_s = solve(k, cov)?;
    let k_inv_m = solve(k, &column(mean))?;
    let trace: f64 = (0..n).map(|i| k_inv_s[i][i]).sum();
    let quad: f64 = (0..n).map(|i| mean[i] * k_inv_m[i][0]).sum();
    let kl = 0.5 * (trace + quad - n as f64 + log_abs_det(k)? - log_abs_det(cov)?);
    Ok(data - kl)
}

/// Full-rank Pólya-Gamma GP classifier on `x` with binary labels `y`, run
/// by coordinate ascent until the bound changes by less than 1e-10.
pub fn exact_pg_binary(x: &DMatrix<f64>, y: &[bool], kernel: &Kernel) -> Result<ExactPosterior> {
    let n = x.nrows();
    check_dim(n, y.len())?;
    if n == 0 || n > MAX_EXACT_N {
        return Err(Error::InvalidParameter(format!("exact posterior supports 1..={MAX_EXACT_N} instances, got {n}")));
    }
    let pts: Mat = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    let jitter = JITTER_REL * kernel.variance();
    let mut k: Mat = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            k[i][j] = kernel.eval(&pts[i], &pts[j])?;
        }
        k[i][i] += jitter;
    }
    let kappa: Vec<f64> = y.iter().map(|&b| if b { 0.5 } else { -0.5 }).collect();

    let mut mean = vec![0.0; n];
    let mut cov = k.clone();
    let mut c = vec![1.0; n];
    let mut prev = bound(&k, &mean, &cov, &c, &kappa)?;
    let mut iterations = 0;
    loop {
        iterations += 1;
        for i in 0..n {
            c[i] = (mean[i] * mean[i] + cov[i][i].max(0.0)).sqrt();
        }
        // (I + K Θ) S = K gives S = (K⁻¹ + Θ)⁻¹
        let mut lhs = identity(n);
        for i in 0..n {
            for j in 0..n {
                lhs[i][j] += k[i][j] * pg_mean(c[j]);
            }
        }
        cov = solve(&lhs, &k)?;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (cov[i][j] + cov[j][i]);
                cov[i][j] = v;
                cov[j][i] = v;
            }
        }
        mean = (0..n).map(|i| (0..n).map(|j| cov[i][j] * kappa[j]).sum()).collect();
        let value = bound(&k, &mean, &cov, &c, &kappa)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("oracle bound".into()));
        }
        let done = (value - prev).abs() < TOLERANCE || iterations >= MAX_ITERS;
        prev = value;
        if done {
            break;
        }
    }

    let (log_evidence, evidence_is_exact) =
        if n <= MAX_QUADRATURE_N { (quadrature_log_evidence(&k, y)?, true) } else { (prev, false) };
    Ok(ExactPosterior { mean, cov, log_evidence, evidence_is_exact, elbo: prev, iterations })
}

/// Lower-triangular `l` with `l lᵀ = a`.
fn cholesky(a: &Mat) -> Result<Mat> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|p| l[i][p] * l[j][p]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 {
                    return Err(Error::NonFinite("oracle Cholesky".into()));
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Nodes and weights for `∫ g(x) exp(-x²) dx`, by Newton iteration on the
/// normalized Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 3e-14 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

/// `ln ∫ ∏ σ(±f_i) N(f | 0, K) df` on a tensor Gauss-Hermite grid.
fn quadrature_log_evidence(k: &Mat, y: &[bool]) -> Result<f64> {
    let n = k.len();
    let l = cholesky(k)?;
    let (nodes, weights) = gauss_hermite(QUADRATURE_NODES);
    let total = QUADRATURE_NODES.pow(n as u32);
    let mut terms = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        let z: Vec<f64> = idx.iter().map(|&i| std::f64::consts::SQRT_2 * nodes[i]).collect();
        let mut lw: f64 = idx.iter().map(|&i| weights[i].ln()).sum::<f64>() - 0.5 * n as f64 * PI.ln();
        for i in 0..n {
            let f: f64 = (0..=i).map(|j| l[i][j] * z[j]).sum();
            lw += log_sigmoid(if y[i] { f } else { -f });
        }
        terms.push(lw);
        for d in 0..n {
            idx[d] += 1;
            if idx[d] < QUADRATURE_NODES {
                break;
            }
            idx[d] = 0;
        }
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
}

/// Class probabilities by walking every root-to-leaf path separately and
/// multiplying the branch probabilities met along it.
pub fn enumerate_tree_probs(tree: &ClassTree, x_star: &[f64], noise: Option<&NoiseModel>) -> Result<Vec<f64>> {
    let nodes = tree.nodes();
    let mut branch = Vec::with_capacity(nodes.len());
    for node in nodes {
        let lp = match noise {
            Some(nm) => node.gp.predict_latent_noisy(x_star, nm)?,
            None => node.gp.predict_latent(x_star)?,
        };
        let t = lp.mean / (1.0 + PI * lp.variance / 8.0).sqrt();
        branch.push(1.0 / (1.0 + (-t).exp()));
    }
    let mut probs = Vec::with_capacity(tree.num_classes());
    for class in 0..tree.num_classes() {
        let mut v = 0;
        let mut p = 1.0;
        loop {
            let node = &nodes[v];
            let left = node.left_classes.contains(&class);
            p *= if left { branch[v] } else { 1.0 - branch[v] };
            match if left { node.left } else { node.right } {
                Child::Leaf(_) => break,
                Child::Node(w) => v = w,
            }
        }
        probs.push(p);
    }
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_moments() {
        let (x, w) = gauss_hermite(QUADRATURE_NODES);
        let s0: f64 = w.iter().sum();
        let s2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        let s4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        let rp = PI.sqrt();
        assert!((s0 - rp).abs() < 1e-12);
        assert!((s2 - rp / 2.0).abs() < 1e-12);
        assert!((s4 - 3.0 * rp / 4.0).abs() < 1e-12);
    }

    #[test]
    fn elimination_solves() {
        let a = vec![vec![0.0, 2.0], vec![3.0, 1.0]];
        let x = solve(&a, &column(&[4.0, 5.0])).unwrap();
        assert!((x[0][0] - 1.0).abs() < 1e-15 && (x[1][0] - 2.0).abs() < 1e-15);
        assert!((log_abs_det(&a).unwrap() - 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn antipodal_pair_has_opposite_means() {
        let x = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let k = Kernel::rbf(vec![1.0], 1.0).unwrap();
        let post = exact_pg_binary(&x, &[false, true], &k).unwrap();
        assert!(post.mean[0] < 0.0 && post.mean[1] > 0.0);
        assert!((post.mean[0] + post.mean[1]).abs() < 1e-12);
        assert!(post.evidence_is_exact);
        assert!(post.elbo <= post.log_evidence + 1e-9);
    }

    #[test]
    fn single_point_evidence_is_half() {
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let k = Kernel::rbf(vec![1.0], 2.0).unwrap();
        let post = exact_pg_binary(&x, &[true], &k).unwrap();
        // σ(f) + σ(-f) = 1 and f is symmetric, so p(y=1) = 1/2
        assert!((post.log_evidence - 0.5f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn long_lengthscale_gives_constant_latent() {
        let x = DMatrix::from_row_slice(4, 1, &[-1.0, 0.0, 0.5, 2.0]);
        let k = Kernel::rbf(vec![1e6], 1.0).unwrap();
        let post = exact_pg_binary(&x, &[true, false, true, true], &k).unwrap();
        for m in &post.mean {
            assert!((m - post.mean[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn size_guard() {
        let x = DMatrix::zeros(13, 1);
        let k = Kernel::rbf(vec![1.0], 1.0).unwrap();
        assert!(exact_pg_binary(&x, &[true; 13], &k).is_err());
    }
}
