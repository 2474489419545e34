//! One-hidden-layer ReLU network regression as a minibatch potential, with
//! CSV ingestion, standardization and mixture predictive evaluation.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::samplers::{run, CollectionPolicy, GradientModel, InitConfig, RunConfig, SamplerConfig, SamplerKind, StepSchedule};
use crate::streams::stream;
use crate::targets::{minibatch_grad, MinibatchPotential};

const LN_2PI: f64 = 1.8378770664093453;
pub const BNN_SCHEMA_VERSION: u32 = 1;
pub const MIN_ROWS: usize = 20;

/// Per-column mean and population standard deviation (ddof = 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Statistics of the given rows only.
    pub fn fit(data: ArrayView2<f64>, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("cannot standardize over zero rows"));
        }
        let n = rows.len() as f64;
        let cols = data.ncols();
        let mut mean = vec![0.0; cols];
        let mut std = vec![0.0; cols];
        for c in 0..cols {
            let m = rows.iter().map(|&r| data[[r, c]]).sum::<f64>() / n;
            let v = rows.iter().map(|&r| (data[[r, c]] - m).powi(2)).sum::<f64>() / n;
            mean[c] = m;
            std[c] = v.sqrt();
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, data: ArrayView2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(data.dim(), |(r, c)| (data[[r, c]] - self.mean[c]) / self.std[c])
    }

    pub fn invert(&self, data: ArrayView2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(data.dim(), |(r, c)| data[[r, c]] * self.std[c] + self.mean[c])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Standardized features for every row, retained columns only.
    pub features: Array2<f64>,
    /// Standardized targets for every row.
    pub targets: Vec<f64>,
    pub feature_stats: Standardization,
    pub target_mean: f64,
    pub target_std: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub split_seed: u64,
    /// Feature columns removed for zero training variance.
    pub dropped: Vec<String>,
}

impl RegressionDataset {
    /// Splits, then standardizes with training statistics. `raw` holds every
    /// column including the target, in the order of `names`.
    pub fn from_columns(
        names: Vec<String>,
        raw: Array2<f64>,
        target: &str,
        train_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let (n, cols) = raw.dim();
        if names.len() != cols {
            return Err(invalid("column names do not match the data width"));
        }
        let target_col = names
            .iter()
            .position(|c| c == target)
            .ok_or_else(|| invalid(format!("target column `{target}` not found")))?;
        if n < MIN_ROWS {
            return Err(invalid(format!("need at least {MIN_ROWS} rows, got {n}")));
        }
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(invalid("train fraction must lie in (0, 1)"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, 0));
        let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let train = order[..n_train].to_vec();
        let test = order[n_train..].to_vec();

        let stats = Standardization::fit(raw.view(), &train)?;
        let target_mean = stats.mean[target_col];
        let target_std = stats.std[target_col];
        if !(target_std > 0.0) {
            return Err(invalid("target column has zero variance on the training split"));
        }
        let mut keep = Vec::new();
        let mut dropped = Vec::new();
        for c in (0..cols).filter(|&c| c != target_col) {
            if stats.std[c] > 0.0 {
                keep.push(c);
            } else {
                log::warn!("dropping feature `{}`: zero variance on the training split", names[c]);
                dropped.push(names[c].clone());
            }
        }
        if keep.is_empty() {
            return Err(invalid("no feature column with non-zero variance"));
        }
        let feature_stats = Standardization {
            mean: keep.iter().map(|&c| stats.mean[c]).collect(),
            std: keep.iter().map(|&c| stats.std[c]).collect(),
        };
        let picked = Array2::from_shape_fn((n, keep.len()), |(r, j)| raw[[r, keep[j]]]);
        Ok(Self {
            feature_names: keep.iter().map(|&c| names[c].clone()).collect(),
            target_name: target.to_string(),
            features: feature_stats.apply(picked.view()),
            targets: (0..n).map(|r| (raw[[r, target_col]] - target_mean) / target_std).collect(),
            feature_stats,
            target_mean,
            target_std,
            train,
            test,
            split_seed: seed,
            dropped,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn destandardize_target(&self, y: f64) -> f64 {
        y * self.target_std + self.target_mean
    }

    /// Target of row `i` in original units.
    pub fn original_target(&self, i: usize) -> f64 {
        self.destandardize_target(self.targets[i])
    }

    fn rows(&self, idx: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn((idx.len(), self.input_dim()), |(r, c)| self.features[[idx[r], c]])
    }
}

/// Reads a comma-separated file with a header row of numeric columns.
pub fn load_csv(path: &Path, target: &str, train_fraction: f64, seed: u64) -> Result<RegressionDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let names: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: names[c].clone(),
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: r + 1,
                    column: names[c].clone(),
                    message: format!("`{cell}` is not finite"),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    let raw = Array2::from_shape_vec((rows, names.len()), values)
        .map_err(|e| invalid(format!("ragged csv: {e}")))?;
    RegressionDataset::from_columns(names, raw, target, train_fraction, seed)
}

/// `y = w·x + noise` with `x ~ N(0, I)` and `w ~ N(0, I)`, returned as named
/// columns `x0 … x{p-1}, y`.
pub fn synthetic_linear(rows: usize, inputs: usize, noise_std: f64, seed: u64) -> (Vec<String>, Array2<f64>) {
    let mut rng = stream(seed, 0);
    let w: Vec<f64> = (0..inputs).map(|_| rng.sample(StandardNormal)).collect();
    let mut raw = Array2::zeros((rows, inputs + 1));
    for r in 0..rows {
        let mut y = 0.0;
        for c in 0..inputs {
            let x: f64 = rng.sample(StandardNormal);
            raw[[r, c]] = x;
            y += w[c] * x;
        }
        let e: f64 = rng.sample(StandardNormal);
        raw[[r, inputs]] = y + noise_std * e;
    }
    let mut names: Vec<String> = (0..inputs).map(|c| format!("x{c}")).collect();
    names.push("y".into());
    (names, raw)
}

// ---------------------------------------------------------------------------
// Network potential

/// Parameter layout: `W₁` (hidden × input, row-major), `b₁`, `w₂`, `b₂`.
#[derive(Debug, Clone)]
pub struct BnnPotential {
    pub input_dim: usize,
    pub hidden: usize,
    pub prior_std: f64,
    pub noise_std: f64,
    x: Array2<f64>,
    y: Vec<f64>,
}

impl BnnPotential {
    pub fn new(x: Array2<f64>, y: Vec<f64>, hidden: usize, prior_std: f64, noise_std: f64) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(invalid("feature rows and targets differ in length"));
        }
        if hidden == 0 || x.ncols() == 0 {
            return Err(invalid("input and hidden dimensions must be positive"));
        }
        if !(prior_std > 0.0 && noise_std > 0.0) {
            return Err(invalid("prior_std and noise_std must be positive"));
        }
        let x = x.as_standard_layout().into_owned();
        Ok(Self {
            input_dim: x.ncols(),
            hidden,
            prior_std,
            noise_std,
            x,
            y,
        })
    }

    /// Potential over the training split of `data`.
    pub fn from_dataset(data: &RegressionDataset, hidden: usize, prior_std: f64, noise_std: f64) -> Result<Self> {
        let y = data.train.iter().map(|&i| data.targets[i]).collect();
        Self::new(data.rows(&data.train), y, hidden, prior_std, noise_std)
    }

    pub fn param_len(&self) -> usize {
        self.hidden * (self.input_dim + 1) + self.hidden + 1
    }

    /// Initial draw `N(0, 1/√fan_in)` per parameter: fan-in is the input
    /// dimension for the first layer and the hidden width for the output.
    pub fn init_config(&self) -> InitConfig {
        let (h, p) = (self.hidden, self.input_dim);
        let first = 1.0 / (p as f64).sqrt();
        let second = 1.0 / (h as f64).sqrt();
        let mut std = vec![first; h * p + h];
        std.extend(std::iter::repeat_n(second, h + 1));
        InitConfig {
            mean: vec![0.0; self.param_len()],
            std,
        }
    }

    fn hidden_pre(&self, theta: &[f64], x: &[f64], j: usize) -> f64 {
        let p = self.input_dim;
        let w = &theta[j * p..(j + 1) * p];
        w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + theta[self.hidden * p + j]
    }

    /// Network output for one standardized input row.
    pub fn forward(&self, theta: &[f64], x: &[f64]) -> f64 {
        let (h, p) = (self.hidden, self.input_dim);
        let w2 = &theta[h * p + h..h * p + 2 * h];
        let b2 = theta[h * p + 2 * h];
        (0..h).map(|j| w2[j] * self.hidden_pre(theta, x, j).max(0.0)).sum::<f64>() + b2
    }

    fn row(&self, i: usize) -> &[f64] {
        let p = self.input_dim;
        let all = self.x.as_slice().expect("features stored in standard layout");
        &all[i * p..(i + 1) * p]
    }

    fn point_log_lik(&self, theta: &[f64], i: usize) -> f64 {
        let u = (self.y[i] - self.forward(theta, self.row(i))) / self.noise_std;
        -0.5 * u * u - self.noise_std.ln() - 0.5 * LN_2PI
    }

    fn add_point_grad(&self, theta: &[f64], i: usize, pre: &mut [f64], g: &mut [f64]) {
        let (h, p) = (self.hidden, self.input_dim);
        let x = self.row(i);
        for (j, v) in pre.iter_mut().enumerate() {
            *v = self.hidden_pre(theta, x, j);
        }
        let w2 = &theta[h * p + h..h * p + 2 * h];
        let f = pre.iter().zip(w2).map(|(a, w)| w * a.max(0.0)).sum::<f64>() + theta[h * p + 2 * h];
        let r = (self.y[i] - f) / (self.noise_std * self.noise_std);
        for j in 0..h {
            if pre[j] > 0.0 {
                g[h * p + h + j] += r * pre[j];
                let back = r * w2[j];
                for (gk, xk) in g[j * p..(j + 1) * p].iter_mut().zip(x) {
                    *gk += back * xk;
                }
                g[h * p + j] += back;
            }
        }
        g[h * p + 2 * h] += r;
    }

    /// `U(θ) = −log p(θ) − (N/|Ω|) Σ_{i∈Ω} log p(y_i | x_i, θ)`.
    pub fn potential(&self, theta: &[f64], batch: &[usize]) -> f64 {
        let n = self.dataset_size();
        let mut u = -self.log_prior(theta);
        if n > 0 && !batch.is_empty() {
            u -= n as f64 / batch.len() as f64 * self.data_log_lik(theta, batch);
        }
        u
    }

    /// `∇U(θ)` on a minibatch.
    pub fn potential_grad(&self, theta: &[f64], batch: &[usize]) -> Result<Vec<f64>> {
        let g = minibatch_grad(self, theta, batch)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite potential gradient"));
        }
        Ok(g.into_iter().map(|v| -v).collect())
    }
}

impl MinibatchPotential for BnnPotential {
    fn dim(&self) -> usize {
        self.param_len()
    }

    fn dataset_size(&self) -> usize {
        self.y.len()
    }

    fn log_prior(&self, params: &[f64]) -> f64 {
        let s = self.prior_std;
        params
            .iter()
            .map(|t| -0.5 * (t / s).powi(2) - s.ln() - 0.5 * LN_2PI)
            .sum()
    }

    fn prior_grad(&self, params: &[f64]) -> Vec<f64> {
        let inv = 1.0 / (self.prior_std * self.prior_std);
        params.iter().map(|t| -t * inv).collect()
    }

    fn data_log_lik(&self, params: &[f64], batch: &[usize]) -> f64 {
        batch.iter().map(|&i| self.point_log_lik(params, i)).sum()
    }

    fn data_grad(&self, params: &[f64], batch: &[usize]) -> Vec<f64> {
        let mut g = vec![0.0; self.param_len()];
        let mut pre = vec![0.0; self.hidden];
        for &i in batch {
            self.add_point_grad(params, i, &mut pre, &mut g);
        }
        g
    }
}

// ---------------------------------------------------------------------------
// Prediction

/// Equal-weight Gaussian mixture predictive in standardized units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[particle][row]` component means.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub noise_std: f64,
}

impl Prediction {
    /// `log (1/K) Σ_k N(y | μ_k(x), noise_std²)` for row `row`.
    pub fn log_lik(&self, row: usize, y: f64) -> f64 {
        let means: Vec<f64> = self.components.iter().map(|c| c[row]).collect();
        mixture_log_lik(&means, self.noise_std, y)
    }
}

/// Log density of an equal-weight Gaussian mixture, by log-sum-exp.
pub fn mixture_log_lik(means: &[f64], std: f64, y: f64) -> f64 {
    let logs: Vec<f64> = means
        .iter()
        .map(|m| {
            let u = (y - m) / std;
            -0.5 * u * u - std.ln() - 0.5 * LN_2PI
        })
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln() - (means.len() as f64).ln()
}

/// Predictive over `particles` (rows of θ) at standardized inputs `x`.
pub fn predict(model: &BnnPotential, particles: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Prediction> {
    if particles.nrows() == 0 {
        return Err(invalid("prediction needs at least one particle"));
    }
    if particles.ncols() != model.param_len() || x.ncols() != model.input_dim {
        return Err(invalid("particle or input width does not match the network"));
    }
    let components: Vec<Vec<f64>> = particles
        .rows()
        .into_iter()
        .map(|theta| {
            let theta = theta.to_vec();
            x.rows().into_iter().map(|r| model.forward(&theta, &r.to_vec())).collect()
        })
        .collect();
    let k = components.len() as f64;
    let rows = x.nrows();
    let mean: Vec<f64> = (0..rows).map(|r| components.iter().map(|c| c[r]).sum::<f64>() / k).collect();
    let std = (0..rows)
        .map(|r| {
            let spread = components.iter().map(|c| (c[r] - mean[r]).powi(2)).sum::<f64>() / k;
            (model.noise_std * model.noise_std + spread).sqrt()
        })
        .collect();
    Ok(Prediction {
        components,
        mean,
        std,
        noise_std: model.noise_std,
    })
}

/// Test RMSE and mean test log-likelihood in original target units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub rmse: f64,
    pub test_ll: f64,
}

pub fn evaluate(model: &BnnPotential, particles: ArrayView2<f64>, data: &RegressionDataset) -> Result<Evaluation> {
    let x = data.rows(&data.test);
    let pred = predict(model, particles, x.view())?;
    let n = data.test.len() as f64;
    let mut sq = 0.0;
    let mut ll = 0.0;
    for (r, &i) in data.test.iter().enumerate() {
        let err = data.destandardize_target(pred.mean[r]) - data.original_target(i);
        sq += err * err;
        // Change of variables y = s·y' + m contributes −ln s.
        ll += pred.log_lik(r, data.targets[i]) - data.target_std.ln();
    }
    Ok(Evaluation {
        rmse: (sq / n).sqrt(),
        test_ll: ll / n,
    })
}

// ---------------------------------------------------------------------------
// Protocol

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BnnProtocol {
    pub particles: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub hidden: usize,
    pub prior_std: f64,
    pub noise_std: f64,
    pub train_fraction: f64,
}

impl Default for BnnProtocol {
    fn default() -> Self {
        Self {
            particles: 20,
            iterations: 2000,
            batch_size: 100,
            step_size: 1e-4,
            hidden: 50,
            prior_std: 1.0,
            noise_std: 0.5,
            train_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnnReport {
    pub schema_version: u32,
    pub dataset: String,
    pub sampler: String,
    pub seed: u64,
    pub rmse: f64,
    pub test_ll: f64,
    pub config_hash: String,
    pub protocol: BnnProtocol,
}

/// Samples the network posterior on the training split and evaluates the
/// final ensemble on the test split.
pub fn run_bnn(
    data: &RegressionDataset,
    dataset_name: &str,
    sampler: SamplerKind,
    protocol: &BnnProtocol,
    seed: u64,
) -> Result<BnnReport> {
    let model = BnnPotential::from_dataset(data, protocol.hidden, protocol.prior_std, protocol.noise_std)?;
    let batch_size = protocol.batch_size.min(model.dataset_size());
    let cfg = RunConfig {
        sampler: SamplerConfig::new(sampler),
        particles: protocol.particles,
        init: model.init_config(),
        schedule: StepSchedule::Constant {
            eps: protocol.step_size,
        },
        collection: CollectionPolicy {
            burn_in: protocol.iterations / 2,
            thin: 10,
        },
        iterations: protocol.iterations,
        seed,
    };
    let out = run(
        &cfg,
        GradientModel::Minibatch {
            potential: &model,
            batch_size,
        },
    )?;
    let eval = evaluate(&model, out.final_ensemble.positions.view(), data)?;
    Ok(BnnReport {
        schema_version: BNN_SCHEMA_VERSION,
        dataset: dataset_name.to_string(),
        sampler: sampler.name().to_string(),
        seed,
        rmse: eval.rmse,
        test_ll: eval.test_ll,
        config_hash: String::new(),
        protocol: *protocol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn small_model(rows: usize, seed: u64) -> BnnPotential {
        let (_, raw) = synthetic_linear(rows, 3, 0.3, seed);
        let x = raw.slice(ndarray::s![.., 0..3]).to_owned();
        let y = raw.column(3).to_vec();
        BnnPotential::new(x, y, 5, 1.0, 0.5).unwrap()
    }

    fn random_theta(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, 7);
        (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn standardization_of_ten_rows_is_exact() {
        let data = Array2::from_shape_fn((10, 3), |(r, c)| (r * r) as f64 + 3.0 * c as f64 - 0.5 * (r * c) as f64);
        let rows: Vec<usize> = (0..10).collect();
        let s = Standardization::fit(data.view(), &rows).unwrap();
        let z = s.apply(data.view());
        for c in 0..3 {
            let col = z.column(c);
            let mean = col.sum() / 10.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-14);
            assert!((var - 1.0).abs() < 1e-14);
        }
        let back = s.invert(z.view());
        assert!((&back - &data).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let (names, raw) = synthetic_linear(100, 2, 0.1, 1);
        let a = RegressionDataset::from_columns(names.clone(), raw.clone(), "y", 0.9, 5).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (90, 10));
        let b = RegressionDataset::from_columns(names.clone(), raw.clone(), "y", 0.9, 5).unwrap();
        assert_eq!(a.train, b.train);
        let c = RegressionDataset::from_columns(names, raw, "y", 0.9, 6).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn test_rows_use_training_statistics() {
        let (names, raw) = synthetic_linear(60, 2, 0.1, 2);
        let d = RegressionDataset::from_columns(names, raw.clone(), "y", 0.5, 3).unwrap();
        let train_mean = d.train.iter().map(|&i| d.features[[i, 0]]).sum::<f64>() / d.train.len() as f64;
        assert!(train_mean.abs() < 1e-12);
        let i = d.test[0];
        let expect = (raw[[i, 0]] - d.feature_stats.mean[0]) / d.feature_stats.std[0];
        assert_eq!(d.features[[i, 0]], expect);
        for &i in &d.test {
            assert!((d.original_target(i) - raw[[i, 2]]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_variance_column_dropped() {
        let (mut names, raw) = synthetic_linear(30, 2, 0.1, 3);
        let mut wide = Array2::from_elem((30, 4), 4.0);
        wide.slice_mut(ndarray::s![.., 0..3]).assign(&raw);
        names.push("flat".into());
        let d = RegressionDataset::from_columns(names, wide, "y", 0.8, 0).unwrap();
        assert_eq!(d.dropped, vec!["flat".to_string()]);
        assert_eq!(d.input_dim(), 2);
    }

    #[test]
    fn too_few_rows_rejected() {
        let (names, raw) = synthetic_linear(19, 2, 0.1, 3);
        assert!(RegressionDataset::from_columns(names, raw, "y", 0.8, 0).is_err());
    }

    #[test]
    fn csv_parse_error_names_row_and_column() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,b,y").unwrap();
        for r in 0..25 {
            if r == 4 {
                writeln!(f, "1.0,abc,2.0").unwrap();
            } else {
                writeln!(f, "{},{},{}", r, r * 2, r % 3).unwrap();
            }
        }
        match load_csv(f.path(), "y", 0.8, 0) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 5);
                assert_eq!(column, "b");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bundled_diabetes_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/diabetes.csv");
        let d = load_csv(&path, "target", 0.9, 0).unwrap();
        assert_eq!(d.features.nrows(), 442);
        assert_eq!(d.input_dim(), 10);
        assert_eq!(d.train.len(), 398);
    }

    #[test]
    fn parameter_count() {
        let m = small_model(30, 0);
        assert_eq!(m.param_len(), 5 * 4 + 5 + 1);
        assert_eq!(m.init_config().std.len(), m.param_len());
    }

    #[test]
    fn potential_gradient_matches_finite_differences() {
        let m = small_model(40, 1);
        let batch: Vec<usize> = (0..40).step_by(3).collect();
        for s in 0..10 {
            let theta = random_theta(m.param_len(), s);
            let g = m.potential_grad(&theta, &batch).unwrap();
            let h = 1e-5;
            let mut worst = 0.0_f64;
            for k in 0..theta.len() {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (m.potential(&up, &batch) - m.potential(&dn, &batch)) / (2.0 * h);
                worst = worst.max((g[k] - fd).abs() / fd.abs().max(1.0));
            }
            assert!(worst < 1e-5, "seed {s}: {worst}");
        }
    }

    #[test]
    fn empty_dataset_gives_prior_gradient() {
        let m = BnnPotential::new(Array2::zeros((0, 3)), vec![], 4, 2.0, 0.5).unwrap();
        let theta = random_theta(m.param_len(), 2);
        let g = m.potential_grad(&theta, &[]).unwrap();
        for (gi, t) in g.iter().zip(&theta) {
            assert_eq!(*gi, t / 4.0);
        }
    }

    #[test]
    fn dead_unit_has_no_first_layer_data_gradient() {
        let m = small_model(30, 3);
        let mut theta = random_theta(m.param_len(), 3);
        let p = m.input_dim;
        // Unit 0: zero weights and a negative bias keep it inactive everywhere.
        for c in 0..p {
            theta[c] = 0.0;
        }
        theta[m.hidden * p] = -1.0;
        let batch: Vec<usize> = (0..30).collect();
        let g = m.data_grad(&theta, &batch);
        assert!(g[..p].iter().all(|&v| v == 0.0));
        assert_eq!(g[m.hidden * p], 0.0);
    }

    #[test]
    fn disjoint_partition_reproduces_full_gradient() {
        let m = small_model(60, 4);
        let theta = random_theta(m.param_len(), 4);
        let all: Vec<usize> = (0..60).collect();
        let full = m.potential_grad(&theta, &all).unwrap();
        let mut avg = vec![0.0; full.len()];
        for chunk in all.chunks(10) {
            for (a, g) in avg.iter_mut().zip(m.potential_grad(&theta, chunk).unwrap()) {
                *a += g / 6.0;
            }
        }
        for (a, f) in avg.iter().zip(&full) {
            assert!((a - f).abs() <= 1e-12 * f.abs().max(1.0));
        }
    }

    #[test]
    fn single_particle_prediction() {
        let m = small_model(30, 5);
        let theta = random_theta(m.param_len(), 5);
        let x = Array2::from_shape_fn((4, 3), |(r, c)| r as f64 - c as f64);
        let parts = Array2::from_shape_vec((1, theta.len()), theta.clone()).unwrap();
        let pred = predict(&m, parts.view(), x.view()).unwrap();
        for r in 0..4 {
            assert_eq!(pred.mean[r], m.forward(&theta, &x.row(r).to_vec()));
            assert_eq!(pred.std[r], 0.5);
        }
    }

    #[test]
    fn identical_particles_collapse_to_one_gaussian() {
        let means = vec![0.3; 7];
        let direct = -0.5 * ((1.1_f64 - 0.3) / 0.5).powi(2) - 0.5_f64.ln() - 0.5 * LN_2PI;
        assert!((mixture_log_lik(&means, 0.5, 1.1) - direct).abs() < 1e-12);
    }

    #[test]
    fn mixture_log_lik_matches_direct_summation() {
        let means = [-1.0_f64, 0.2, 0.9, 2.5];
        let sd = 0.7;
        for y in [-2.0_f64, 0.0, 0.5, 3.0] {
            let density: f64 = means
                .iter()
                .map(|m| (-(y - m) * (y - m) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt()))
                .sum::<f64>()
                / means.len() as f64;
            assert!((mixture_log_lik(&means, sd, y) - density.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn short_runs_stay_finite_for_both_samplers() {
        let (names, raw) = synthetic_linear(200, 3, 0.5, 9);
        let d = RegressionDataset::from_columns(names, raw, "y", 0.9, 0).unwrap();
        let protocol = BnnProtocol {
            particles: 4,
            iterations: 200,
            batch_size: 50,
            hidden: 10,
            ..BnnProtocol::default()
        };
        for kind in [SamplerKind::Sgld, SamplerKind::SgldR] {
            for eps in [1e-5, 1e-4] {
                let p = BnnProtocol { step_size: eps, ..protocol };
                let r = run_bnn(&d, "synthetic", kind, &p, 1).unwrap();
                assert!(r.rmse.is_finite() && r.test_ll.is_finite(), "{kind:?} {eps}");
            }
        }
    }
}
