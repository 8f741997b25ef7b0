//! Shared helpers for the integration tests: naive dense oracles computed
//! with explicit inverses and determinants (no Cholesky, no low-rank
//! identities), finite-difference machinery, and seeded random instances.
//! Everything here is deliberately independent of the library's numerical
//! paths.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svgp_core::kernels::{KernelSpec, KernelTerm};
use svgp_core::svgp::{SvgpModel, VariationalGaussian};

pub const LN_2PI: f64 = 1.8378770664093453;

/// log N(y | 0, cov) by explicit inverse and LU determinant.
pub fn naive_log_gauss(y: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let inv = cov.clone().try_inverse().expect("oracle inverse");
    let det = cov.determinant();
    -0.5 * y.dot(&(&inv * y)) - 0.5 * det.ln() - 0.5 * n * LN_2PI
}

/// The residual conditional covariance K_nn − K_nm K_mm⁻¹ K_mn, dense.
pub fn naive_ktilde(spec: &KernelSpec, x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let knn = spec.matrix(x, x).unwrap();
    let kmm = spec.matrix(z, z).unwrap();
    let knm = spec.matrix(x, z).unwrap();
    let kmm_inv = kmm.try_inverse().expect("oracle inverse");
    // Remove the jitter the self-covariance added on the diagonal of K_nn:
    // k̃ is defined against the noiseless prior variances.
    let mut knn = knn;
    for i in 0..knn.nrows() {
        knn[(i, i)] -= spec.jitter();
    }
    &knn - &knm * kmm_inv * knm.transpose()
}

/// Collapsed bound by explicitly building the n×n low-rank covariance.
pub fn naive_collapsed_bound(model: &SvgpModel, x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let spec = model.kernel();
    let z = model.inducing();
    let beta = model.beta();
    let kmm = spec.matrix(z, z).unwrap();
    let knm = spec.matrix(x, z).unwrap();
    let kmm_inv = kmm.try_inverse().expect("oracle inverse");
    let qnn = &knm * &kmm_inv * knm.transpose();
    let mut cov = qnn.clone();
    for i in 0..x.nrows() {
        cov[(i, i)] += 1.0 / beta;
    }
    let ktilde = naive_ktilde(spec, x, z);
    let trace: f64 = (0..x.nrows()).map(|i| ktilde[(i, i)].max(0.0)).sum();
    naive_log_gauss(y, &cov) - 0.5 * beta * trace
}

/// Optimal q(u) from the explicit precision and mean formulas.
pub fn naive_optimal_q(
    model: &SvgpModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let spec = model.kernel();
    let z = model.inducing();
    let beta = model.beta();
    let kmm = spec.matrix(z, z).unwrap();
    let knm = spec.matrix(x, z).unwrap();
    let kmm_inv = kmm.try_inverse().expect("oracle inverse");
    let lambda = &kmm_inv * knm.transpose() * &knm * &kmm_inv * beta + &kmm_inv;
    let s = lambda.clone().try_inverse().expect("oracle inverse");
    let mean = &s * &kmm_inv * knm.transpose() * y * beta;
    (mean, s)
}

/// KL(N(m,S) ‖ N(0,K)) by explicit inverse and determinants.
pub fn naive_kl(m: &DVector<f64>, s: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
    let k_inv = k.clone().try_inverse().expect("oracle inverse");
    let md = m.len() as f64;
    0.5 * ((&k_inv * s).trace() + m.dot(&(&k_inv * m)) - md + k.determinant().ln()
        - s.determinant().ln())
}

/// The uncollapsed bound as a literal per-point sum, dense inverses only.
pub fn naive_elbo(
    model: &SvgpModel,
    x_batch: &DMatrix<f64>,
    y_batch: &DVector<f64>,
    scale: f64,
) -> f64 {
    let spec = model.kernel();
    let z = model.inducing();
    let beta = model.beta();
    let kmm = spec.matrix(z, z).unwrap();
    let kmm_inv = kmm.clone().try_inverse().expect("oracle inverse");
    let knm = spec.matrix(x_batch, z).unwrap();
    let kdiag = spec.diag(x_batch).unwrap();
    let qm = model.q().mean();
    let qs = model.q().cov();

    let mut total = 0.0;
    for i in 0..x_batch.nrows() {
        let ki = knm.row(i).transpose(); // k_i, the i-th column of K_mn
        let mu_i = ki.dot(&(&kmm_inv * qm));
        let ktilde_i = (kdiag[i] - ki.dot(&(&kmm_inv * &ki))).max(0.0);
        let lambda_i = &kmm_inv * &ki * ki.transpose() * &kmm_inv * beta;
        let log_lik = -0.5 * LN_2PI + 0.5 * beta.ln() - 0.5 * beta * (y_batch[i] - mu_i).powi(2);
        total += log_lik - 0.5 * beta * ktilde_i - 0.5 * (&qs * lambda_i).trace();
    }
    scale * total - naive_kl(qm, &qs, &kmm)
}

/// Exact GP marginal likelihood via dense inverse, jitter consistent with
/// the library's self-covariance.
pub fn naive_exact_log_marginal(
    spec: &KernelSpec,
    log_beta: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> f64 {
    let mut cov = spec.matrix(x, x).unwrap();
    for i in 0..x.nrows() {
        cov[(i, i)] += (-log_beta).exp();
    }
    naive_log_gauss(y, &cov)
}

/// Exact GP predictive moments via dense inverse.
pub fn naive_exact_predict(
    spec: &KernelSpec,
    log_beta: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    xstar: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let mut cov = spec.matrix(x, x).unwrap();
    for i in 0..x.nrows() {
        cov[(i, i)] += (-log_beta).exp();
    }
    let inv = cov.try_inverse().expect("oracle inverse");
    let ksn = spec.matrix(xstar, x).unwrap();
    let mean = &ksn * &inv * y;
    let kdiag = spec.diag(xstar).unwrap();
    let cross = &ksn * &inv * ksn.transpose();
    let var = DVector::from_fn(xstar.nrows(), |i, _| kdiag[i] - cross[(i, i)]);
    (mean, var)
}

/// Central finite difference of a scalar function.
pub fn central_diff(f: impl Fn(f64) -> f64, at: f64, h: f64) -> f64 {
    (f(at + h) - f(at - h)) / (2.0 * h)
}

/// Asserts |analytic − fd| ≤ max(rel·|fd|, floor).
pub fn assert_grad_close(analytic: f64, fd: f64, rel: f64, floor: f64, label: &str) {
    let diff = (analytic - fd).abs();
    let tol = (rel * fd.abs()).max(floor);
    assert!(
        diff <= tol,
        "{label}: analytic {analytic:.10e} vs fd {fd:.10e} (diff {diff:.3e} > tol {tol:.3e})"
    );
}

/// A seeded random SVGP test instance with smooth targets.
pub struct Instance {
    pub model: SvgpModel,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Random instance: inputs in a unit box, smooth noisy targets, randomized
/// hyperparameters, inducing inputs scattered over the same box.
pub fn random_instance(seed: u64, n: usize, m: usize, d: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| uniform(&mut rng, 0.0, 2.0));
    let y = DVector::from_fn(n, |i, _| {
        let mut v = 0.0;
        for j in 0..d {
            v += ((j + 2) as f64 * x[(i, j)]).sin();
        }
        v + 0.1 * uniform(&mut rng, -1.0, 1.0)
    });
    let z = DMatrix::from_fn(m, d, |_, _| uniform(&mut rng, 0.0, 2.0));

    let variance = uniform(&mut rng, 0.5, 2.0);
    let ls: Vec<f64> = (0..d).map(|_| uniform(&mut rng, 0.4, 1.5)).collect();
    let const_var = uniform(&mut rng, 0.1, 0.5);
    let spec = KernelSpec::with_default_jitter(vec![
        KernelTerm::rbf_ard(variance, &ls),
        KernelTerm::constant(const_var),
    ])
    .unwrap();
    let log_beta = uniform(&mut rng, -0.5, 1.5);
    let model = SvgpModel::with_prior_q(spec, log_beta, z, n).unwrap();
    Instance { model, x, y }
}

/// A random PD variational state for the given dimension.
pub fn random_q(seed: u64, m: usize) -> VariationalGaussian {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DMatrix::from_fn(m, m, |_, _| uniform(&mut rng, -1.0, 1.0));
    let s = &w * w.transpose() / m as f64 + DMatrix::identity(m, m) * 0.3;
    let mean = DVector::from_fn(m, |_, _| uniform(&mut rng, -1.5, 1.5));
    VariationalGaussian::from_mean_cov(mean, s).unwrap()
}
