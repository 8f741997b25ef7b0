//! Dense O(n³) GP regression: exact marginal likelihood, exact prediction,
//! and type-II maximum-likelihood fitting. This is the baseline the sparse
//! model is compared against, and the right-hand side of the bound chain in
//! tests.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::CholFactor;
use crate::svgp::Prediction;

/// Dense GP posterior state: the Cholesky factor of `K_nn + β⁻¹I` and the
/// weights `α = (K_nn + β⁻¹I)⁻¹ y`. Immutable once constructed.
#[derive(Debug, Clone)]
pub struct ExactGp {
    spec: KernelSpec,
    log_beta: f64,
    x: DMatrix<f64>,
    y: DVector<f64>,
    chol: CholFactor,
    alpha: DVector<f64>,
}

impl ExactGp {
    pub fn new(spec: KernelSpec, log_beta: f64, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::config("exact GP needs at least one data point"));
        }
        if y.len() != n {
            return Err(Error::config("inputs and targets disagree"));
        }
        let beta_inv = (-log_beta).exp();
        let mut c = spec.matrix(&x, &x)?;
        for i in 0..n {
            c[(i, i)] += beta_inv;
        }
        let chol = CholFactor::new(c, "K_nn + noise")?;
        let alpha = chol.solve_vec(&y);
        Ok(ExactGp {
            spec,
            log_beta,
            x,
            y,
            chol,
            alpha,
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn log_beta(&self) -> f64 {
        self.log_beta
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn factor(&self) -> &CholFactor {
        &self.chol
    }

    /// `log N(y | 0, K_nn + β⁻¹I)`.
    pub fn log_marginal(&self) -> f64 {
        let n = self.n() as f64;
        -0.5 * self.y.dot(&self.alpha)
            - 0.5 * self.chol.logdet()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// The marginal likelihood and its gradient with respect to every log
    /// kernel hyperparameter and `log β` (appended last): the standard
    /// `½ tr((ααᵀ − C⁻¹) ∂C/∂θ)` identity.
    pub fn log_marginal_grad(&self) -> Result<(f64, DVector<f64>)> {
        let value = self.log_marginal();
        let c_inv = self.chol.inverse();
        let outer = &self.alpha * self.alpha.transpose() - &c_inv;
        let grads = self.spec.grad_matrices(&self.x, &self.x)?;
        let nh = self.spec.hyper_dim();
        let mut g = DVector::zeros(nh + 1);
        for h in 0..nh {
            g[h] = 0.5 * outer.dot(&grads[h]);
        }
        // ∂C/∂log β = −β⁻¹ I.
        let beta_inv = (-self.log_beta).exp();
        g[nh] = -0.5 * beta_inv * (outer.trace());
        Ok((value, g))
    }

    /// Exact predictive mean and latent variance at `xstar`; the observed
    /// variance adds `β⁻¹`.
    pub fn predict(&self, xstar: &DMatrix<f64>) -> Result<Prediction> {
        if xstar.ncols() != self.x.ncols() {
            return Err(Error::config(format!(
                "prediction inputs have {} columns, model expects {}",
                xstar.ncols(),
                self.x.ncols()
            )));
        }
        let ksn = self.spec.matrix(xstar, &self.x)?;
        let mean = &ksn * &self.alpha;
        let v = self.chol.forward_mat(&ksn.transpose()); // n × n*
        let kdiag = self.spec.diag(xstar)?;
        let beta_inv = (-self.log_beta).exp();
        let mut latent = DVector::zeros(xstar.nrows());
        let mut clamped = 0;
        for i in 0..xstar.nrows() {
            let val = kdiag[i] - v.column(i).norm_squared();
            latent[i] = if val < 0.0 {
                clamped += 1;
                0.0
            } else {
                val
            };
        }
        let observed = latent.map(|val| val + beta_inv);
        Ok(Prediction {
            mean,
            latent_var: latent,
            observed_var: observed,
            clamped,
        })
    }
}

/// Settings for [`fit_ml2`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Stop when the gradient sup-norm falls below this.
    pub grad_tol: f64,
    pub init_step: f64,
    /// Refuse to fit more points than this; dense factorization misuse
    /// should fail fast.
    pub dense_cap: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 100,
            grad_tol: 1e-3,
            init_step: 0.05,
            dense_cap: 5000,
        }
    }
}

/// What happened during a [`fit_ml2`] run.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Objective after each accepted step (index 0 is the initial value).
    pub objective_trace: Vec<f64>,
    /// `log β` after each accepted step, same indexing.
    pub log_beta_trace: Vec<f64>,
    pub stop_reason: String,
}

/// Type-II maximum likelihood: gradient ascent on the log hyperparameters
/// with a backtracking step. The step only ever accepts finite, non-decreasing
/// objectives, so the returned state is always the best seen.
pub fn fit_ml2(
    spec: KernelSpec,
    log_beta: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    opts: &FitOptions,
) -> Result<(ExactGp, FitReport)> {
    if x.nrows() > opts.dense_cap {
        return Err(Error::config(format!(
            "{} points exceed the dense-fit cap of {}; raise dense_cap only if O(n^3) is intended",
            x.nrows(),
            opts.dense_cap
        )));
    }
    let mut gp = ExactGp::new(spec, log_beta, x.clone(), y.clone())?;
    let (mut value, mut grad) = gp.log_marginal_grad()?;
    if !value.is_finite() {
        return Err(Error::numerical(
            "marginal likelihood is not finite at the initial hyperparameters",
        ));
    }
    let mut theta = pack(&gp);
    let mut step = opts.init_step;
    let mut objective_trace = vec![value];
    let mut log_beta_trace = vec![gp.log_beta()];
    let mut iterations = 0;
    let mut stop_reason = "iteration cap reached".to_string();

    for _ in 0..opts.max_iters {
        if grad.amax() <= opts.grad_tol {
            stop_reason = "gradient below tolerance".to_string();
            break;
        }
        // Backtracking: shrink until the objective is finite and does not
        // decrease.
        let mut accepted = None;
        for _ in 0..40 {
            let trial_theta = &theta + &grad * step;
            match rebuild(&gp, &trial_theta, x, y) {
                Ok(trial_gp) => {
                    let trial_value = trial_gp.log_marginal();
                    if trial_value.is_finite() && trial_value >= value {
                        accepted = Some((trial_gp, trial_value, trial_theta));
                        break;
                    }
                }
                Err(_) => {}
            }
            step *= 0.5;
        }
        let Some((next_gp, next_value, next_theta)) = accepted else {
            stop_reason = "line search stalled".to_string();
            break;
        };
        gp = next_gp;
        value = next_value;
        theta = next_theta;
        step = (step * 1.5).min(1.0);
        iterations += 1;
        objective_trace.push(value);
        log_beta_trace.push(gp.log_beta());
        grad = gp.log_marginal_grad()?.1;
    }
    let grad_norm = grad.amax();
    let converged = grad_norm <= opts.grad_tol;
    if converged {
        stop_reason = "gradient below tolerance".to_string();
    }
    Ok((
        gp,
        FitReport {
            iterations,
            grad_norm,
            converged,
            objective_trace,
            log_beta_trace,
            stop_reason,
        },
    ))
}

fn pack(gp: &ExactGp) -> DVector<f64> {
    let k = gp.spec().pack_hypers();
    let mut v = Vec::with_capacity(k.len() + 1);
    v.extend(k.iter());
    v.push(gp.log_beta());
    DVector::from_vec(v)
}

fn rebuild(gp: &ExactGp, theta: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<ExactGp> {
    let nh = theta.len() - 1;
    let kernel_part = DVector::from_iterator(nh, theta.iter().take(nh).copied());
    let spec = gp.spec().with_hypers(&kernel_part)?;
    ExactGp::new(spec, theta[nh], x.clone(), y.clone())
}
