//! Sparse variational GP state, lower bounds, and gradients.
//!
//! The model keeps an explicit Gaussian `q(u) = N(m, S)` over the function
//! values at the inducing inputs. Training alternates natural-gradient steps
//! on `q` with gradient steps on the hyperparameters; both consume the same
//! per-minibatch sufficient statistics ([`BatchStats`]).
//!
//! Conventions used throughout: `K_mm` is the (jittered) self-covariance of
//! the inducing inputs, `K_nm` the batch-to-inducing cross covariance,
//! `A = K_nm K_mm⁻¹`, and `k̃_ii = k(x_i,x_i) − k_iᵀ K_mm⁻¹ k_i` the residual
//! conditional variance. All `K_mm⁻¹` applications go through triangular
//! solves against one Cholesky factor; explicit inverses appear only where a
//! full precision matrix is required.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{frob_sq, symmetrize, CholFactor};

/// Negative residual variances above this magnitude are treated as round-off
/// and clamped to zero (counted); anything more negative is clamped too but
/// indicates a degenerate configuration such as `Z ⊇ X`.
const KTILDE_FLOOR: f64 = -1e-8;

/// Gaussian variational distribution over the inducing values, stored via
/// the Cholesky factor of its covariance.
#[derive(Debug, Clone)]
pub struct VariationalGaussian {
    mean: DVector<f64>,
    cov_chol: CholFactor,
}

impl VariationalGaussian {
    pub fn from_mean_cov(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if mean.len() != cov.nrows() || !cov.is_square() {
            return Err(Error::config("variational mean/covariance shape mismatch"));
        }
        let cov_chol = CholFactor::new(symmetrize(&cov), "variational covariance")?;
        Ok(VariationalGaussian { mean, cov_chol })
    }

    /// The prior at the inducing sites: zero mean, covariance `K_mm`.
    pub fn prior(kmm_chol: CholFactor) -> Self {
        VariationalGaussian {
            mean: DVector::zeros(kmm_chol.dim()),
            cov_chol: kmm_chol,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov_chol(&self) -> &CholFactor {
        &self.cov_chol
    }

    pub fn cov(&self) -> DMatrix<f64> {
        self.cov_chol.reconstruct()
    }

    /// Canonical parameters `(S⁻¹m, −½S⁻¹)`.
    pub fn natural_params(&self) -> (DVector<f64>, DMatrix<f64>) {
        let theta1 = self.cov_chol.solve_vec(&self.mean);
        let theta2 = self.cov_chol.inverse() * -0.5;
        (theta1, theta2)
    }

    /// Expectation parameters `(m, mmᵀ + S)`.
    pub fn expectation_params(&self) -> (DVector<f64>, DMatrix<f64>) {
        let eta2 = &self.mean * self.mean.transpose() + self.cov();
        (self.mean.clone(), eta2)
    }
}

/// The trainable sparse-GP state.
#[derive(Debug, Clone)]
pub struct SvgpModel {
    kernel: KernelSpec,
    log_beta: f64,
    inducing: DMatrix<f64>,
    q: VariationalGaussian,
    n_total: usize,
}

impl SvgpModel {
    pub fn new(
        kernel: KernelSpec,
        log_beta: f64,
        inducing: DMatrix<f64>,
        q: VariationalGaussian,
        n_total: usize,
    ) -> Result<Self> {
        if q.dim() != inducing.nrows() {
            return Err(Error::config(format!(
                "q(u) has dimension {} but there are {} inducing inputs",
                q.dim(),
                inducing.nrows()
            )));
        }
        if n_total == 0 {
            return Err(Error::config("model must represent at least one data point"));
        }
        Ok(SvgpModel {
            kernel,
            log_beta,
            inducing,
            q,
            n_total,
        })
    }

    /// Builds the model with `q(u)` initialized to the prior at `inducing`.
    pub fn with_prior_q(
        kernel: KernelSpec,
        log_beta: f64,
        inducing: DMatrix<f64>,
        n_total: usize,
    ) -> Result<Self> {
        let kmm = kernel.matrix(&inducing, &inducing)?;
        let chol = CholFactor::new(kmm, "K_mm at the inducing inputs")?;
        let q = VariationalGaussian::prior(chol);
        SvgpModel::new(kernel, log_beta, inducing, q, n_total)
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn log_beta(&self) -> f64 {
        self.log_beta
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn inducing(&self) -> &DMatrix<f64> {
        &self.inducing
    }

    pub fn q(&self) -> &VariationalGaussian {
        &self.q
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn set_q(&mut self, q: VariationalGaussian) -> Result<()> {
        if q.dim() != self.inducing.nrows() {
            return Err(Error::config("replacement q(u) has the wrong dimension"));
        }
        self.q = q;
        Ok(())
    }

    pub fn set_inducing(&mut self, z: DMatrix<f64>) -> Result<()> {
        if z.shape() != self.inducing.shape() {
            return Err(Error::config("replacement Z has the wrong shape"));
        }
        self.inducing = z;
        Ok(())
    }

    /// All log-hyperparameters: kernel hypers in pack order, then `log β`.
    pub fn pack_hypers(&self) -> DVector<f64> {
        let k = self.kernel.pack_hypers();
        let mut v = Vec::with_capacity(k.len() + 1);
        v.extend(k.iter());
        v.push(self.log_beta);
        DVector::from_vec(v)
    }

    /// Inverse of [`pack_hypers`](Self::pack_hypers).
    pub fn set_hypers(&mut self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.kernel.hyper_dim() + 1 {
            return Err(Error::config(format!(
                "hyperparameter vector has length {}, model expects {}",
                v.len(),
                self.kernel.hyper_dim() + 1
            )));
        }
        let kernel_part = DVector::from_iterator(v.len() - 1, v.iter().take(v.len() - 1).copied());
        self.kernel = self.kernel.with_hypers(&kernel_part)?;
        self.log_beta = v[v.len() - 1];
        Ok(())
    }
}

/// Per-minibatch sufficient statistics.
#[derive(Debug, Clone)]
pub struct BatchStats {
    /// Cholesky factor of the jittered `K_mm`.
    pub kmm_chol: CholFactor,
    /// Batch-to-inducing cross covariance, `b × m`.
    pub knm: DMatrix<f64>,
    /// `A = K_nm K_mm⁻¹`, `b × m`.
    pub a: DMatrix<f64>,
    /// Residual conditional variances `k̃_ii`, clamped at zero from below.
    pub ktilde_diag: DVector<f64>,
    /// Batch inputs (kept for hyperparameter and inducing gradients).
    pub x_batch: DMatrix<f64>,
    pub y_batch: DVector<f64>,
    /// `n_total / b`; 1 for a full batch.
    pub scale: f64,
    /// How many `k̃_ii` fell below the round-off floor and were clamped.
    pub clamped: usize,
}

impl BatchStats {
    pub fn compute(model: &SvgpModel, x_batch: &DMatrix<f64>, y_batch: &DVector<f64>) -> Result<Self> {
        let b = x_batch.nrows();
        if b == 0 {
            return Err(Error::config("minibatch is empty"));
        }
        if y_batch.len() != b {
            return Err(Error::config("batch target length does not match inputs"));
        }
        if b > model.n_total() {
            return Err(Error::config(
                "minibatch is larger than the dataset the model represents",
            ));
        }
        let z = model.inducing();
        if x_batch.ncols() != z.ncols() {
            return Err(Error::config(format!(
                "batch has {} input columns, inducing inputs have {}",
                x_batch.ncols(),
                z.ncols()
            )));
        }
        let kmm = model.kernel().matrix(z, z)?;
        let kmm_chol = CholFactor::new(kmm, "K_mm at the inducing inputs")?;
        let knm = model.kernel().matrix(x_batch, z)?;
        // k̃ via triangular solves: with B = L⁻¹ K_mn, k̃_ii = k_ii − ‖b_i‖².
        let bmat = kmm_chol.forward_mat(&knm.transpose());
        let kdiag = model.kernel().diag(x_batch)?;
        let mut clamped = 0;
        let mut ktilde = DVector::zeros(b);
        for i in 0..b {
            let v = kdiag[i] - bmat.column(i).norm_squared();
            ktilde[i] = if v < 0.0 {
                if v < KTILDE_FLOOR {
                    clamped += 1;
                }
                0.0
            } else {
                v
            };
        }
        let a = kmm_chol
            .lower()
            .tr_solve_lower_triangular(&bmat)
            .expect("Cholesky factor has positive diagonal")
            .transpose();
        Ok(BatchStats {
            kmm_chol,
            knm,
            a,
            ktilde_diag: ktilde,
            x_batch: x_batch.clone(),
            y_batch: y_batch.clone(),
            scale: model.n_total() as f64 / b as f64,
            clamped,
        })
    }

    pub fn batch_len(&self) -> usize {
        self.y_batch.len()
    }
}

/// KL divergence from `q(u) = N(m, S)` to the prior `N(0, K_mm)`.
pub fn kl_to_prior(q: &VariationalGaussian, kmm_chol: &CholFactor) -> f64 {
    let md = q.dim() as f64;
    let ls = q.cov_chol().lower();
    // tr(K_mm⁻¹ S) = ‖L⁻¹ L_S‖_F².
    let half_solved = kmm_chol.forward_mat(ls);
    let trace = frob_sq(&half_solved);
    let quad = kmm_chol.forward_vec(q.mean()).norm_squared();
    0.5 * (trace + quad - md + kmm_chol.logdet() - q.cov_chol().logdet())
}

/// The stochastic lower bound estimated on one minibatch: the scaled
/// per-point expected log likelihoods minus the (unscaled) KL to the prior.
/// On a full batch this is the exact uncollapsed bound.
pub fn elbo(model: &SvgpModel, stats: &BatchStats) -> f64 {
    let beta = model.beta();
    let b = stats.batch_len() as f64;
    let r = &stats.y_batch - &stats.a * model.q().mean();
    let fit = -0.5 * b * (2.0 * std::f64::consts::PI).ln() + 0.5 * b * model.log_beta()
        - 0.5 * beta * r.norm_squared();
    let resid = -0.5 * beta * stats.ktilde_diag.sum();
    // tr(A S Aᵀ) = ‖A L_S‖_F².
    let smear = -0.5 * beta * frob_sq(&(&stats.a * model.q().cov_chol().lower()));
    stats.scale * (fit + resid + smear) - kl_to_prior(model.q(), &stats.kmm_chol)
}

/// The collapsed bound on the full data: `log N(y | 0, K_nm K_mm⁻¹ K_mn +
/// β⁻¹I) − β/2 tr(K̃)`, evaluated in O(nm²) through the m×m capacitance
/// matrix rather than any n×n factorization.
pub fn collapsed_bound(model: &SvgpModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let n = x.nrows();
    if y.len() != n || n == 0 {
        return Err(Error::config("inputs and targets disagree"));
    }
    let beta = model.beta();
    let z = model.inducing();
    let m = z.nrows();
    let kmm = model.kernel().matrix(z, z)?;
    let kmm_chol = CholFactor::new(kmm, "K_mm at the inducing inputs")?;
    let knm = model.kernel().matrix(x, z)?;
    let bmat = kmm_chol.forward_mat(&knm.transpose()); // m × n
    let kdiag = model.kernel().diag(x)?;
    let mut trace_resid = 0.0;
    for i in 0..n {
        let v = kdiag[i] - bmat.column(i).norm_squared();
        if v > 0.0 {
            trace_resid += v;
        }
    }
    // Capacitance M = I + β B Bᵀ; log det and quadratic form through it.
    let mut cap = &bmat * bmat.transpose() * beta;
    for i in 0..m {
        cap[(i, i)] += 1.0;
    }
    let cap_chol = CholFactor::new(cap, "low-rank capacitance matrix")?;
    let by = &bmat * y;
    let quad = beta * y.norm_squared() - beta * beta * cap_chol.forward_vec(&by).norm_squared();
    let logdet = -(n as f64) * model.log_beta() + cap_chol.logdet();
    Ok(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
        - 0.5 * beta * trace_resid)
}

/// The optimal `q(u)` for fixed hyperparameters on the full data, with
/// precision `K_mm⁻¹ + β K_mm⁻¹ K_mn K_nm K_mm⁻¹` and matching mean.
pub fn optimal_variational(
    model: &SvgpModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<VariationalGaussian> {
    if x.nrows() != y.len() || x.nrows() == 0 {
        return Err(Error::config("inputs and targets disagree"));
    }
    let beta = model.beta();
    let z = model.inducing();
    let kmm = model.kernel().matrix(z, z)?;
    let knm = model.kernel().matrix(x, z)?;
    // S = K_mm G⁻¹ K_mm and û = β K_mm G⁻¹ K_mn y with G = K_mm + β K_mn K_nm.
    let g = &kmm + knm.tr_mul(&knm) * beta;
    let g_chol = CholFactor::new(g, "collapsed-precision inner matrix")?;
    let s = symmetrize(&(&kmm * g_chol.solve_mat(&kmm)));
    let kmn_y: DVector<f64> = knm.tr_mul(y);
    let mean = &kmm * g_chol.solve_vec(&kmn_y) * beta;
    VariationalGaussian::from_mean_cov(mean, s)
}

/// The minibatch estimates of the natural-gradient fixed point: the scaled
/// precision target `Λ̂ = K_mm⁻¹ + (n/b) β K_mm⁻¹ K_mB K_Bm K_mm⁻¹` and the
/// scaled first canonical parameter target `(n/b) β K_mm⁻¹ K_mB y_B`.
/// Averaging these over a disjoint partition of the data reproduces the
/// full-batch quantities exactly.
pub fn natural_statistics(model: &SvgpModel, stats: &BatchStats) -> (DMatrix<f64>, DVector<f64>) {
    let beta = model.beta();
    let lambda_hat = stats.kmm_chol.inverse() + stats.a.tr_mul(&stats.a) * (stats.scale * beta);
    let theta1_target: DVector<f64> = stats.a.tr_mul(&stats.y_batch) * (stats.scale * beta);
    (symmetrize(&lambda_hat), theta1_target)
}

/// One natural-gradient step of length `step ∈ (0,1]` on the canonical
/// parameters of `q(u)`. The updated precision `(1−ℓ)S⁻¹ + ℓΛ̂` is a convex
/// combination of positive definite matrices, so the step preserves positive
/// definiteness for any admissible length.
pub fn natural_gradient_step(
    model: &SvgpModel,
    stats: &BatchStats,
    step: f64,
) -> Result<VariationalGaussian> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::config(format!(
            "natural-gradient step length must lie in (0, 1], got {step}"
        )));
    }
    let q = model.q();
    let (lambda_hat, theta1_target) = natural_statistics(model, stats);
    let precision_old = q.cov_chol().inverse();
    let theta1_old = q.cov_chol().solve_vec(q.mean());
    let precision_new = symmetrize(&(precision_old * (1.0 - step) + lambda_hat * step));
    let theta1_new = theta1_old * (1.0 - step) + theta1_target * step;
    // A failure here means S⁻¹ or Λ̂ was not PD to begin with: a bug signal,
    // not an expected runtime condition.
    let prec_chol = CholFactor::new(precision_new, "natural-gradient updated precision")?;
    let mean_new = prec_chol.solve_vec(&theta1_new);
    let cov_new = prec_chol.inverse();
    VariationalGaussian::from_mean_cov(mean_new, cov_new)
}

/// Adjoint (reverse-mode) weights of the stochastic bound with respect to the
/// kernel matrices: `dL = <w_nm, dK_nm> + <w_mm, dK_mm> + Σ_i w_diag_i dk_ii`
/// with `q` held fixed. `w_mm` is returned symmetrized.
struct BoundAdjoints {
    w_nm: DMatrix<f64>,
    w_mm: DMatrix<f64>,
    w_diag: DVector<f64>,
    /// s·[b/2 − β/2(‖r‖² + Σk̃ + tr(A S Aᵀ))]: the log β derivative.
    g_log_beta: f64,
}

fn bound_adjoints(model: &SvgpModel, stats: &BatchStats) -> BoundAdjoints {
    let beta = model.beta();
    let s = stats.scale;
    let q = model.q();
    let b = stats.batch_len();

    let w = stats.kmm_chol.solve_vec(q.mean()); // K_mm⁻¹ m
    let r = &stats.y_batch - &stats.a * q.mean();
    let cov = q.cov();
    let kmm_inv = stats.kmm_chol.inverse();
    let s_kmm_inv = &cov * &kmm_inv;
    let ata = stats.a.tr_mul(&stats.a);

    // Rows whose k̃ was clamped contribute a constant zero to the residual
    // trace; mask them out of that term's adjoints.
    let any_clamped = stats.clamped > 0;
    let a_masked = if any_clamped {
        let mut am = stats.a.clone();
        for i in 0..b {
            if stats.ktilde_diag[i] == 0.0 {
                am.fill_row(i, 0.0);
            }
        }
        am
    } else {
        stats.a.clone()
    };
    let ata_masked = if any_clamped {
        a_masked.tr_mul(&a_masked)
    } else {
        ata.clone()
    };

    let mut w_diag = DVector::from_element(b, -0.5 * beta * s);
    if any_clamped {
        for i in 0..b {
            if stats.ktilde_diag[i] == 0.0 {
                w_diag[i] = 0.0;
            }
        }
    }

    let w_nm = (&r * w.transpose() + &a_masked - &stats.a * &s_kmm_inv) * (beta * s);

    let atr: DVector<f64> = stats.a.tr_mul(&r);
    let w_mm_data = (-&atr * w.transpose() - &ata_masked * 0.5 + &ata * &s_kmm_inv) * (beta * s);
    let w_mm_kl = (&kmm_inv * &cov * &kmm_inv + &w * w.transpose() - &kmm_inv) * 0.5;
    let w_mm = symmetrize(&(w_mm_data + w_mm_kl));

    let smear = frob_sq(&(&stats.a * q.cov_chol().lower()));
    let g_log_beta = s * (0.5 * b as f64
        - 0.5 * beta * (r.norm_squared() + stats.ktilde_diag.sum() + smear));

    BoundAdjoints {
        w_nm,
        w_mm,
        w_diag,
        g_log_beta,
    }
}

/// Gradient of the stochastic bound with respect to every log kernel
/// hyperparameter and `log β`, holding `q(u)` fixed. Layout matches
/// [`SvgpModel::pack_hypers`].
pub fn hyper_gradients(model: &SvgpModel, stats: &BatchStats) -> Result<DVector<f64>> {
    let adj = bound_adjoints(model, stats);
    let z = model.inducing();
    let grads_nm = model.kernel().grad_matrices(&stats.x_batch, z)?;
    let grads_mm = model.kernel().grad_matrices(z, z)?;
    let grads_diag = grad_diag(model.kernel(), &stats.x_batch);

    let nh = model.kernel().hyper_dim();
    let mut out = DVector::zeros(nh + 1);
    for h in 0..nh {
        let mut g = grads_nm[h].dot(&adj.w_nm) + grads_mm[h].dot(&adj.w_mm);
        g += grads_diag[h].dot(&adj.w_diag);
        out[h] = g;
    }
    out[nh] = adj.g_log_beta;
    Ok(out)
}

/// Gradient of the stochastic bound with respect to the inducing input
/// coordinates, `q(u)` held fixed. Returns an `m × d` matrix.
pub fn inducing_gradients(model: &SvgpModel, stats: &BatchStats) -> Result<DMatrix<f64>> {
    let adj = bound_adjoints(model, stats);
    let z = model.inducing();
    // K_nm adjoint acts on K(Z, X) as its transpose; K_mm entries depend on
    // their row and column point, giving the doubled symmetric adjoint.
    let g_cross = model
        .kernel()
        .contract_grad_z(z, &stats.x_batch, &adj.w_nm.transpose())?;
    let g_self = model.kernel().contract_grad_z(z, z, &(&adj.w_mm * 2.0))?;
    Ok(g_cross + g_self)
}

/// Per-hyperparameter derivative of the stationary diagonal `k(x_i, x_i)`:
/// the term variance for each `log σ²`, zero for lengthscales.
fn grad_diag(spec: &KernelSpec, x: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let n = x.nrows();
    let mut out = Vec::with_capacity(spec.hyper_dim());
    for t in spec.terms() {
        match t {
            crate::kernels::KernelTerm::RbfArd {
                log_variance,
                log_lengthscales,
            } => {
                out.push(DVector::from_element(n, log_variance.exp()));
                for _ in 0..log_lengthscales.len() {
                    out.push(DVector::zeros(n));
                }
            }
            crate::kernels::KernelTerm::Constant { log_variance } => {
                out.push(DVector::from_element(n, log_variance.exp()));
            }
        }
    }
    out
}

/// Predictive mean and variance at new inputs.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mean: DVector<f64>,
    /// Variance of the latent function value.
    pub latent_var: DVector<f64>,
    /// Latent variance plus the observation noise `β⁻¹`.
    pub observed_var: DVector<f64>,
    /// Variances that came out negative from round-off and were clamped.
    pub clamped: usize,
}

/// Sparse predictive distribution: `mean = K_*m K_mm⁻¹ m`, latent variance
/// `k_** − diag(K_*m K_mm⁻¹ K_m*) + diag(K_*m K_mm⁻¹ S K_mm⁻¹ K_m*)`.
pub fn predict(model: &SvgpModel, xstar: &DMatrix<f64>) -> Result<Prediction> {
    let z = model.inducing();
    if xstar.ncols() != z.ncols() {
        return Err(Error::config(format!(
            "prediction inputs have {} columns, model expects {}",
            xstar.ncols(),
            z.ncols()
        )));
    }
    let nstar = xstar.nrows();
    let kmm = model.kernel().matrix(z, z)?;
    let kmm_chol = CholFactor::new(kmm, "K_mm at the inducing inputs")?;
    let ksm = model.kernel().matrix(xstar, z)?;
    let bmat = kmm_chol.forward_mat(&ksm.transpose()); // m × n*
    let astar = kmm_chol
        .lower()
        .tr_solve_lower_triangular(&bmat)
        .expect("Cholesky factor has positive diagonal")
        .transpose(); // n* × m
    let mean = &astar * model.q().mean();
    let smear = &astar * model.q().cov_chol().lower();
    let kdiag = model.kernel().diag(xstar)?;
    let beta_inv = (-model.log_beta()).exp();
    let mut latent = DVector::zeros(nstar);
    let mut clamped = 0;
    for i in 0..nstar {
        let v = kdiag[i] - bmat.column(i).norm_squared() + smear.row(i).norm_squared();
        latent[i] = if v < 0.0 {
            clamped += 1;
            0.0
        } else {
            v
        };
    }
    let observed = latent.map(|v| v + beta_inv);
    Ok(Prediction {
        mean,
        latent_var: latent,
        observed_var: observed,
        clamped,
    })
}
