//! Dataset ingestion, normalization, splitting, and synthetic generators.
//!
//! The single ingestion format is headered CSV with decimal-point floats.
//! Features and target are z-scored; the statistics live in a
//! [`NormalizationRecord`] so that predictions can be mapped back to the
//! original units. Rows with unparseable or non-finite cells are dropped and
//! counted rather than failing the load, because large public CSVs are dirty.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Z-scoring statistics fitted on a training set, plus the optional log
/// transform applied to the target before scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub feature_mean: Vec<f64>,
    pub feature_sd: Vec<f64>,
    pub target_mean: f64,
    pub target_sd: f64,
    /// When set, the target was replaced by its natural log before z-scoring.
    pub log_target: bool,
}

impl NormalizationRecord {
    pub fn identity(d: usize, log_target: bool) -> Self {
        NormalizationRecord {
            feature_mean: vec![0.0; d],
            feature_sd: vec![1.0; d],
            target_mean: 0.0,
            target_sd: 1.0,
            log_target,
        }
    }

    /// Fits z-scoring statistics. Fails naming the column when a feature (or
    /// the target) is constant.
    pub fn fit(
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        feature_names: &[String],
        log_target: bool,
    ) -> Result<Self> {
        let n = x.nrows() as f64;
        let mut feature_mean = Vec::with_capacity(x.ncols());
        let mut feature_sd = Vec::with_capacity(x.ncols());
        for j in 0..x.ncols() {
            let col = x.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            if !(sd > 0.0) {
                let name = feature_names
                    .get(j)
                    .cloned()
                    .unwrap_or_else(|| format!("column {j}"));
                return Err(Error::data(format!(
                    "feature '{name}' is constant; a z-scored model cannot use it"
                )));
            }
            feature_mean.push(mean);
            feature_sd.push(sd);
        }
        let target_mean = y.sum() / n;
        let var = y
            .iter()
            .map(|v| (v - target_mean) * (v - target_mean))
            .sum::<f64>()
            / n;
        let target_sd = var.sqrt();
        if !(target_sd > 0.0) {
            return Err(Error::data("target column is constant"));
        }
        Ok(NormalizationRecord {
            feature_mean,
            feature_sd,
            target_mean,
            target_sd,
            log_target,
        })
    }

    pub fn apply_features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.feature_mean[j]) / self.feature_sd[j]
        })
    }

    pub fn invert_features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            x[(i, j)] * self.feature_sd[j] + self.feature_mean[j]
        })
    }

    /// Z-scores a target that is already in log space when `log_target` is
    /// set.
    pub fn apply_target(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.target_mean) / self.target_sd)
    }

    pub fn invert_target(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.target_sd + self.target_mean)
    }
}

/// A loaded, normalized dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `n × d` z-scored features.
    pub x: DMatrix<f64>,
    /// z-scored (and possibly log-transformed) targets.
    pub y: DVector<f64>,
    pub feature_names: Vec<String>,
    pub norm: NormalizationRecord,
    /// Rows discarded during loading (bad cells, non-finite values,
    /// non-positive targets under a log transform).
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn from_raw(
        x_raw: DMatrix<f64>,
        y_raw: DVector<f64>,
        feature_names: Vec<String>,
        log_target: bool,
        dropped_rows: usize,
    ) -> Result<Dataset> {
        let norm = NormalizationRecord::fit(&x_raw, &y_raw, &feature_names, log_target)?;
        let x = norm.apply_features(&x_raw);
        let y = norm.apply_target(&y_raw);
        Ok(Dataset {
            x,
            y,
            feature_names,
            norm,
            dropped_rows,
        })
    }
}

/// Loads a headered CSV, extracting `target_column` and either the named
/// feature columns or every other column in file order. With `log_target`
/// the target is replaced by its natural log before normalization.
pub fn load_csv(
    path: &Path,
    target_column: &str,
    feature_columns: Option<&[String]>,
    log_target: bool,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::config(format!("target column '{target_column}' not in header")))?;
    let feature_idx: Vec<usize> = match feature_columns {
        Some(cols) => {
            let mut idx = Vec::with_capacity(cols.len());
            for c in cols {
                let i = headers
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| Error::config(format!("feature column '{c}' not in header")))?;
                idx.push(i);
            }
            idx
        }
        None => (0..headers.len()).filter(|&i| i != target_idx).collect(),
    };
    if feature_idx.is_empty() {
        return Err(Error::config("no feature columns"));
    }
    let feature_names: Vec<String> = feature_idx.iter().map(|&i| headers[i].clone()).collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record?;
        let mut row = Vec::with_capacity(feature_idx.len());
        let mut ok = true;
        for &i in &feature_idx {
            match record.get(i).and_then(|s| s.trim().parse::<f64>().ok()) {
                Some(v) if v.is_finite() => row.push(v),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        let target = record
            .get(target_idx)
            .and_then(|s| s.trim().parse::<f64>().ok());
        let target = match target {
            Some(v) if v.is_finite() => {
                if log_target {
                    if v > 0.0 {
                        Some(v.ln())
                    } else {
                        None
                    }
                } else {
                    Some(v)
                }
            }
            _ => None,
        };
        match (ok, target) {
            (true, Some(t)) => {
                rows.push(row);
                targets.push(t);
            }
            _ => dropped += 1,
        }
    }
    if rows.is_empty() {
        return Err(Error::data(format!(
            "no usable rows in {} ({dropped} dropped)",
            path.display()
        )));
    }
    let d = feature_idx.len();
    let x_raw = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let y_raw = DVector::from_vec(targets);
    Dataset::from_raw(x_raw, y_raw, feature_names, log_target, dropped)
}

/// Seeded disjoint train/test split. Normalization statistics are refitted on
/// the training rows only and applied to both sides.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test fraction must lie in (0,1), got {test_fraction}"
        )));
    }
    let n = data.n();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::config(format!(
            "split of {n} rows at fraction {test_fraction} leaves an empty side"
        )));
    }
    // Undo the z-scoring so the train statistics are fitted on raw values
    // (the log transform, when present, stays).
    let x_raw = data.norm.invert_features(&data.x);
    let y_raw = data.norm.invert_target(&data.y);

    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let (test_idx, train_idx) = idx.split_at(n_test);

    let take = |ids: &[usize]| -> (DMatrix<f64>, DVector<f64>) {
        let xm = DMatrix::from_fn(ids.len(), data.dim(), |i, j| x_raw[(ids[i], j)]);
        let yv = DVector::from_fn(ids.len(), |i, _| y_raw[ids[i]]);
        (xm, yv)
    };
    let (x_train, y_train) = take(train_idx);
    let (x_test, y_test) = take(test_idx);

    let norm = NormalizationRecord::fit(
        &x_train,
        &y_train,
        &data.feature_names,
        data.norm.log_target,
    )?;
    let train = Dataset {
        x: norm.apply_features(&x_train),
        y: norm.apply_target(&y_train),
        feature_names: data.feature_names.clone(),
        norm: norm.clone(),
        dropped_rows: 0,
    };
    let test = Dataset {
        x: norm.apply_features(&x_test),
        y: norm.apply_target(&y_test),
        feature_names: data.feature_names.clone(),
        norm,
        dropped_rows: 0,
    };
    Ok((train, test))
}

fn synth(
    n: usize,
    d: usize,
    noise_sd: f64,
    seed: u64,
    f: impl Fn(&[f64]) -> f64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    let normal = StandardNormal;
    let mut point = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            point[j] = rng.random::<f64>();
            x[(i, j)] = point[j];
        }
        let eps: f64 = normal.sample(&mut rng);
        y[i] = f(&point) + noise_sd * eps;
    }
    let feature_names = (0..d).map(|j| format!("x{j}")).collect();
    Dataset {
        x,
        y,
        feature_names,
        norm: NormalizationRecord::identity(d, false),
        dropped_rows: 0,
    }
}

/// 1-D sinusoid: `x ~ U(0,1)`, `y = sin(6x) + noise_sd · ε`. Returned
/// unnormalized (identity record).
pub fn synth_sin_1d(n: usize, noise_sd: f64, seed: u64) -> Dataset {
    synth(n, 1, noise_sd, seed, |p| (6.0 * p[0]).sin())
}

/// 2-D sinusoid: `x ~ U(0,1)²`, `y = sin(4x₀)·cos(4x₁) + noise_sd · ε`.
pub fn synth_sin_2d(n: usize, noise_sd: f64, seed: u64) -> Dataset {
    synth(n, 2, noise_sd, seed, |p| {
        (4.0 * p[0]).sin() * (4.0 * p[1]).cos()
    })
}

/// 4-D benchmark surface: fine oscillatory detail in the first two inputs
/// (too fine for small subsamples to resolve) plus mild linear trends in the
/// other two. `y = sin(25x₀)·cos(25x₁) + 0.5x₂ − 0.3x₃ + noise_sd · ε`.
pub fn synth_wave_4d(n: usize, noise_sd: f64, seed: u64) -> Dataset {
    synth(n, 4, noise_sd, seed, |p| {
        (25.0 * p[0]).sin() * (25.0 * p[1]).cos() + 0.5 * p[2] - 0.3 * p[3]
    })
}

/// Eight features of which only the first two carry signal:
/// `y = sin(4x₀) + 0.7·cos(5x₁) + noise_sd · ε`.
pub fn synth_relevance_8d(n: usize, noise_sd: f64, seed: u64) -> Dataset {
    synth(n, 8, noise_sd, seed, |p| {
        (4.0 * p[0]).sin() + 0.7 * (5.0 * p[1]).cos()
    })
}

/// Generator registry for the CLI and tests.
pub fn synth_by_name(name: &str, n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    match name {
        "sin1d" => Ok(synth_sin_1d(n, noise_sd, seed)),
        "sin2d" => Ok(synth_sin_2d(n, noise_sd, seed)),
        "wave4d" => Ok(synth_wave_4d(n, noise_sd, seed)),
        "relevance8d" => Ok(synth_relevance_8d(n, noise_sd, seed)),
        other => Err(Error::config(format!(
            "unknown synthetic dataset '{other}' (sin1d, sin2d, wave4d, relevance8d)"
        ))),
    }
}
