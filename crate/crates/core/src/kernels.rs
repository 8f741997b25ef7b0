//! Covariance functions and their hyperparameter gradients.
//!
//! A [`KernelSpec`] is an ordered sum of terms (ARD squared exponential,
//! constant) plus a jitter that is added to the diagonal of square
//! self-covariances only. All hyperparameters live in log space so that the
//! exponentiated values are positive by construction.
//!
//! The flat hyperparameter vector used by optimizers packs, in term order,
//! `log_variance` followed by the `log_lengthscales` of each ARD term, with
//! the log noise precision appended last by the callers that own it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One additive covariance term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum KernelTerm {
    /// `σ² exp(−½ Σ_j (a_j − b_j)² / ℓ_j²)` with one lengthscale per input
    /// dimension.
    RbfArd {
        log_variance: f64,
        log_lengthscales: DVector<f64>,
    },
    /// `σ²` between any pair of points; a bias accounting for non-zero-mean
    /// data.
    Constant { log_variance: f64 },
}

impl KernelTerm {
    /// ARD squared-exponential term with per-dimension lengthscales.
    pub fn rbf_ard(variance: f64, lengthscales: &[f64]) -> Self {
        KernelTerm::RbfArd {
            log_variance: variance.ln(),
            log_lengthscales: DVector::from_iterator(
                lengthscales.len(),
                lengthscales.iter().map(|l| l.ln()),
            ),
        }
    }

    pub fn constant(variance: f64) -> Self {
        KernelTerm::Constant {
            log_variance: variance.ln(),
        }
    }

    /// Number of log-hyperparameters this term contributes.
    pub fn hyper_dim(&self) -> usize {
        match self {
            KernelTerm::RbfArd {
                log_lengthscales, ..
            } => 1 + log_lengthscales.len(),
            KernelTerm::Constant { .. } => 1,
        }
    }

    fn variance(&self) -> f64 {
        match self {
            KernelTerm::RbfArd { log_variance, .. } => log_variance.exp(),
            KernelTerm::Constant { log_variance } => log_variance.exp(),
        }
    }

    /// k(a_i, b_j) between row `i` of `a` and row `j` of `b`.
    fn eval(&self, a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
        match self {
            KernelTerm::RbfArd {
                log_variance,
                log_lengthscales,
            } => {
                // Scaled squared differences accumulated explicitly; the
                // expand-the-square shortcut cancels catastrophically for
                // near-duplicate points.
                let mut s = 0.0;
                for q in 0..log_lengthscales.len() {
                    let z = (a[(i, q)] - b[(j, q)]) / log_lengthscales[q].exp();
                    s += z * z;
                }
                log_variance.exp() * (-0.5 * s).exp()
            }
            KernelTerm::Constant { log_variance } => log_variance.exp(),
        }
    }
}

/// A sum of covariance terms with a diagonal jitter for square
/// self-covariances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpec {
    terms: Vec<KernelTerm>,
    jitter: f64,
}

impl KernelSpec {
    pub fn new(terms: Vec<KernelTerm>, jitter: f64) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::config("kernel needs at least one term"));
        }
        if !(jitter >= 0.0) {
            return Err(Error::config(format!("jitter must be >= 0, got {jitter}")));
        }
        let dims: Vec<usize> = terms
            .iter()
            .filter_map(|t| match t {
                KernelTerm::RbfArd {
                    log_lengthscales, ..
                } => Some(log_lengthscales.len()),
                KernelTerm::Constant { .. } => None,
            })
            .collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::config("ARD terms disagree on input dimensionality"));
        }
        Ok(KernelSpec { terms, jitter })
    }

    /// Builds the spec with the default jitter, `1e-6` times the prior
    /// diagonal (the summed term variances at construction time). The jitter
    /// is a fixed number afterwards so that hyperparameter gradients stay
    /// exact.
    pub fn with_default_jitter(terms: Vec<KernelTerm>) -> Result<Self> {
        let diag: f64 = terms.iter().map(|t| t.variance()).sum();
        Self::new(terms, 1e-6 * diag)
    }

    pub fn terms(&self) -> &[KernelTerm] {
        &self.terms
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Input dimensionality pinned by the ARD terms, if any.
    pub fn input_dim(&self) -> Option<usize> {
        self.terms.iter().find_map(|t| match t {
            KernelTerm::RbfArd {
                log_lengthscales, ..
            } => Some(log_lengthscales.len()),
            KernelTerm::Constant { .. } => None,
        })
    }

    /// Number of kernel log-hyperparameters (noise precision not included).
    pub fn hyper_dim(&self) -> usize {
        self.terms.iter().map(|t| t.hyper_dim()).sum()
    }

    /// Packs all log-hyperparameters into a flat vector, term by term,
    /// variance before lengthscales.
    pub fn pack_hypers(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.hyper_dim());
        for t in &self.terms {
            match t {
                KernelTerm::RbfArd {
                    log_variance,
                    log_lengthscales,
                } => {
                    out.push(*log_variance);
                    out.extend(log_lengthscales.iter());
                }
                KernelTerm::Constant { log_variance } => out.push(*log_variance),
            }
        }
        DVector::from_vec(out)
    }

    /// Rebuilds a spec with the same structure and jitter but hyperparameters
    /// taken from `v` (the inverse of [`pack_hypers`](Self::pack_hypers)).
    pub fn with_hypers(&self, v: &DVector<f64>) -> Result<KernelSpec> {
        if v.len() != self.hyper_dim() {
            return Err(Error::config(format!(
                "hyperparameter vector has length {}, kernel expects {}",
                v.len(),
                self.hyper_dim()
            )));
        }
        let mut terms = Vec::with_capacity(self.terms.len());
        let mut k = 0;
        for t in &self.terms {
            match t {
                KernelTerm::RbfArd {
                    log_lengthscales, ..
                } => {
                    let d = log_lengthscales.len();
                    terms.push(KernelTerm::RbfArd {
                        log_variance: v[k],
                        log_lengthscales: DVector::from_iterator(d, (0..d).map(|j| v[k + 1 + j])),
                    });
                    k += 1 + d;
                }
                KernelTerm::Constant { .. } => {
                    terms.push(KernelTerm::Constant { log_variance: v[k] });
                    k += 1;
                }
            }
        }
        Ok(KernelSpec {
            terms,
            jitter: self.jitter,
        })
    }

    fn check_dims(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
        if a.ncols() != b.ncols() {
            return Err(Error::config(format!(
                "point sets have {} and {} columns",
                a.ncols(),
                b.ncols()
            )));
        }
        if let Some(d) = self.input_dim() {
            if a.ncols() != d {
                return Err(Error::config(format!(
                    "points have {} columns but the kernel lengthscales expect {d}",
                    a.ncols()
                )));
            }
        }
        Ok(())
    }

    /// Covariance matrix between two point sets (rows are points). When the
    /// two sets are identical the jitter is added to the diagonal, making the
    /// result usable as a square self-covariance.
    pub fn matrix(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dims(a, b)?;
        let (na, nb) = (a.nrows(), b.nrows());
        let mut out = DMatrix::zeros(na, nb);
        for j in 0..nb {
            for i in 0..na {
                out[(i, j)] = self.terms.iter().map(|t| t.eval(a, i, b, j)).sum();
            }
        }
        if same_point_set(a, b) {
            for i in 0..na {
                out[(i, i)] += self.jitter;
            }
        }
        Ok(out)
    }

    /// Diagonal of the self-covariance, without jitter.
    pub fn diag(&self, a: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_dims(a, a)?;
        let mut out = DVector::zeros(a.nrows());
        for i in 0..a.nrows() {
            out[i] = self.terms.iter().map(|t| t.eval(a, i, a, i)).sum();
        }
        Ok(out)
    }

    /// One matrix `∂K(A,B)/∂θ_h` per kernel log-hyperparameter, in
    /// [`pack_hypers`](Self::pack_hypers) order. The jitter is a constant and
    /// contributes nothing.
    pub fn grad_matrices(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        self.check_dims(a, b)?;
        let (na, nb) = (a.nrows(), b.nrows());
        let mut grads: Vec<DMatrix<f64>> = (0..self.hyper_dim())
            .map(|_| DMatrix::zeros(na, nb))
            .collect();
        let mut scaled_sq = vec![0.0; a.ncols()];
        for j in 0..nb {
            for i in 0..na {
                let mut k = 0;
                for t in &self.terms {
                    match t {
                        KernelTerm::RbfArd {
                            log_variance,
                            log_lengthscales,
                        } => {
                            let d = log_lengthscales.len();
                            let mut s = 0.0;
                            for q in 0..d {
                                let z = (a[(i, q)] - b[(j, q)]) / log_lengthscales[q].exp();
                                scaled_sq[q] = z * z;
                                s += z * z;
                            }
                            let val = log_variance.exp() * (-0.5 * s).exp();
                            // d/d log σ² = the term value itself.
                            grads[k][(i, j)] = val;
                            // d/d log ℓ_q = k · (a_q − b_q)²/ℓ_q².
                            for q in 0..d {
                                grads[k + 1 + q][(i, j)] = val * scaled_sq[q];
                            }
                            k += 1 + d;
                        }
                        KernelTerm::Constant { log_variance } => {
                            grads[k][(i, j)] = log_variance.exp();
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Derivatives of `K(Z, X)` with respect to the coordinates of the rows
    /// of `Z`, contracted against an adjoint weight matrix `W` of the same
    /// shape as `K(Z, X)`: returns the `m × d` matrix with entries
    /// `Σ_i W[p,i] ∂k(z_p, x_i)/∂z_pq`. Constant terms do not depend on the
    /// points and contribute nothing.
    pub fn contract_grad_z(
        &self,
        z: &DMatrix<f64>,
        x: &DMatrix<f64>,
        w: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        self.check_dims(z, x)?;
        if w.shape() != (z.nrows(), x.nrows()) {
            return Err(Error::config("adjoint shape does not match K(Z, X)"));
        }
        let (m, d) = (z.nrows(), z.ncols());
        let mut out = DMatrix::zeros(m, d);
        for t in &self.terms {
            let inv_ls_sq: Vec<f64> = match t {
                KernelTerm::RbfArd {
                    log_lengthscales, ..
                } => log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect(),
                KernelTerm::Constant { .. } => continue,
            };
            for p in 0..m {
                for i in 0..x.nrows() {
                    let wv = w[(p, i)];
                    if wv == 0.0 {
                        continue;
                    }
                    let val = t.eval(z, p, x, i);
                    for q in 0..d {
                        // ∂k(z_p, x_i)/∂z_pq = k · (x_iq − z_pq)/ℓ_q².
                        out[(p, q)] += wv * val * (x[(i, q)] - z[(p, q)]) * inv_ls_sq[q];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Per-feature relevance as inverse lengthscales of the dominant ARD term
/// (largest variance wins when several are present), sorted descending.
pub fn ard_relevances(spec: &KernelSpec, feature_names: &[String]) -> Result<Vec<(String, f64)>> {
    let term = spec
        .terms()
        .iter()
        .filter_map(|t| match t {
            KernelTerm::RbfArd {
                log_variance,
                log_lengthscales,
            } => Some((log_variance, log_lengthscales)),
            KernelTerm::Constant { .. } => None,
        })
        .max_by(|a, b| a.0.total_cmp(b.0));
    let (_, log_ls) = term.ok_or_else(|| Error::config("model has no ARD kernel term"))?;
    if feature_names.len() != log_ls.len() {
        return Err(Error::config(format!(
            "{} feature names but {} lengthscales",
            feature_names.len(),
            log_ls.len()
        )));
    }
    let mut out: Vec<(String, f64)> = feature_names
        .iter()
        .cloned()
        .zip(log_ls.iter().map(|l| (-l).exp()))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(out)
}

fn same_point_set(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    std::ptr::eq(a, b) || (a.shape() == b.shape() && a == b)
}
