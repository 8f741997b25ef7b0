//! Inducing-input selection: k-means++ seeding followed by Lloyd iterations.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAX_LLOYD_ITERS: usize = 100;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// `m × d` cluster centers, used directly as initial inducing inputs.
    pub centroids: DMatrix<f64>,
    /// Cluster index per input row.
    pub assignment: Vec<usize>,
    /// Total within-cluster squared distance at convergence.
    pub inertia: f64,
    /// Inertia after each assignment pass; non-increasing.
    pub inertia_history: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding, run to an assignment fixed
/// point or the iteration cap. Deterministic given the seed; distance ties
/// go to the lowest cluster index.
pub fn kmeans(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<KmeansResult> {
    let n = x.nrows();
    let d = x.ncols();
    if m == 0 || m > n {
        return Err(Error::config(format!(
            "cannot place {m} centroids on {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seed(x, m, &mut rng);

    let mut assignment = vec![0usize; n];
    let mut inertia_history = Vec::new();
    let mut inertia = f64::INFINITY;

    for _ in 0..MAX_LLOYD_ITERS {
        // Assignment pass.
        let mut changed = false;
        let mut total = 0.0;
        for i in 0..n {
            let (best, dist) = nearest_centroid(x, i, &centroids);
            total += dist;
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        inertia = total;
        inertia_history.push(total);
        if !changed && inertia_history.len() > 1 {
            break;
        }

        // Update pass.
        let mut counts = vec![0usize; m];
        let mut sums: DMatrix<f64> = DMatrix::zeros(m, d);
        for i in 0..n {
            let k = assignment[i];
            counts[k] += 1;
            for j in 0..d {
                sums[(k, j)] += x[(i, j)];
            }
        }
        for k in 0..m {
            if counts[k] > 0 {
                for j in 0..d {
                    centroids[(k, j)] = sums[(k, j)] / counts[k] as f64;
                }
            } else {
                // Re-seed an empty cluster at the point that fits its
                // current centroid worst.
                let far = worst_fit_point(x, &assignment, &centroids);
                for j in 0..d {
                    centroids[(k, j)] = x[(far, j)];
                }
            }
        }
    }

    Ok(KmeansResult {
        centroids,
        assignment,
        inertia,
        inertia_history,
    })
}

/// A seeded random subset of `m` distinct rows of `x`; the trivial fallback
/// initializer.
pub fn random_subset(x: &DMatrix<f64>, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if m == 0 || m > n {
        return Err(Error::config(format!(
            "cannot sample {m} rows from {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates: the first m entries become the sample.
    for i in 0..m {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut out = DMatrix::zeros(m, x.ncols());
    for (row, &i) in idx[..m].iter().enumerate() {
        out.set_row(row, &x.row(i));
    }
    Ok(out)
}

fn plus_plus_seed(x: &DMatrix<f64>, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let mut centroids = DMatrix::zeros(m, d);
    let first = rng.random_range(0..n);
    centroids.set_row(0, &x.row(first));

    let mut dist_sq = vec![0.0f64; n];
    for i in 0..n {
        dist_sq[i] = row_dist_sq(x, i, &centroids, 0);
    }
    for k in 1..m {
        let total: f64 = dist_sq.iter().sum();
        let pick = if total > 0.0 {
            // Sample proportional to squared distance via the cumulative sum.
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for i in 0..n {
                acc += dist_sq[i];
                if acc > u {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with existing centroids (duplicates);
            // any choice is as good as another.
            rng.random_range(0..n)
        };
        centroids.set_row(k, &x.row(pick));
        for i in 0..n {
            let dk = row_dist_sq(x, i, &centroids, k);
            if dk < dist_sq[i] {
                dist_sq[i] = dk;
            }
        }
    }
    centroids
}

fn row_dist_sq(x: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>, k: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..x.ncols() {
        let v = x[(i, j)] - centroids[(k, j)];
        s += v * v;
    }
    s
}

fn nearest_centroid(x: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..centroids.nrows() {
        let dk = row_dist_sq(x, i, centroids, k);
        if dk < best_d {
            best_d = dk;
            best = k;
        }
    }
    (best, best_d)
}

fn worst_fit_point(x: &DMatrix<f64>, assignment: &[usize], centroids: &DMatrix<f64>) -> usize {
    let mut worst = 0;
    let mut worst_d = -1.0;
    for i in 0..x.nrows() {
        let dk = row_dist_sq(x, i, centroids, assignment[i]);
        if dk > worst_d {
            worst_d = dk;
            worst = i;
        }
    }
    worst
}
