//! Effective sample size, potential scale reduction, moment errors and a
//! grid-based Fokker-Planck stationarity check.

use ndarray::{Array3, Axis};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{invalid, Error, Result};
use crate::targets::{MomentSpec, Target};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const MIN_CHAIN: usize = 10;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Biased autocovariance at lags `0..=max_lag`.
fn autocovariance(xs: &[f64], max_lag: usize) -> Vec<f64> {
    let n = xs.len();
    let m = mean(xs);
    let centered: Vec<f64> = xs.iter().map(|x| x - m).collect();
    (0..=max_lag.min(n - 1))
        .map(|k| {
            centered[..n - k]
                .iter()
                .zip(&centered[k..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

/// `N / (1 + 2 Σ ρ̂_k)`, summing autocorrelations until the first
/// non-positive estimate; clamped to `[1, N]`.
pub fn ess(chain: &[f64]) -> Result<f64> {
    let n = chain.len();
    if n < MIN_CHAIN {
        return Err(invalid(format!("chain length {n} below minimum {MIN_CHAIN}")));
    }
    if chain.iter().any(|x| !x.is_finite()) {
        return Err(invalid("chain contains non-finite values"));
    }
    let m = mean(chain);
    let centered: Vec<f64> = chain.iter().map(|x| x - m).collect();
    let c0 = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return Err(Error::DegenerateChain("chain has zero variance".into()));
    }
    let mut tau = 1.0;
    for k in 1..n {
        let ck = centered[..n - k]
            .iter()
            .zip(&centered[k..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64;
        let rho = ck / c0;
        if rho <= 0.0 {
            break;
        }
        tau += 2.0 * rho;
    }
    Ok((n as f64 / tau).clamp(1.0, n as f64))
}

fn check_chains(chains: &[Vec<f64>]) -> Result<usize> {
    let first = chains.first().ok_or_else(|| invalid("no chains"))?.len();
    if chains.iter().any(|c| c.len() != first) {
        return Err(invalid("chains have unequal lengths"));
    }
    if first < MIN_CHAIN {
        return Err(invalid(format!("chain length {first} below minimum {MIN_CHAIN}")));
    }
    if chains.iter().flatten().any(|x| !x.is_finite()) {
        return Err(invalid("chain contains non-finite values"));
    }
    Ok(first)
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Pooled ESS over parallel chains: autocorrelations combine the
/// within-chain autocovariances with the between-chain variance, so
/// chains stuck in different regions lower the estimate. Reduces to a
/// single-chain estimate for one chain.
pub fn multichain_ess(chains: &[Vec<f64>]) -> Result<f64> {
    let n = check_chains(chains)?;
    let m = chains.len();
    if m == 1 {
        return ess(&chains[0]);
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().map(|c| sample_var(c)).sum::<f64>() / m as f64;
    let b = n as f64 * sample_var(&means);
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    if var_plus <= 0.0 {
        return Err(Error::DegenerateChain("all chains constant and equal".into()));
    }
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c, n - 1)).collect();
    let mut tau = 1.0;
    for k in 1..n {
        let mean_acov = acov.iter().map(|a| a[k]).sum::<f64>() / m as f64;
        let rho = 1.0 - (w - mean_acov) / var_plus;
        if rho <= 0.0 {
            break;
        }
        tau += 2.0 * rho;
    }
    let total = (n * m) as f64;
    Ok((total / tau).clamp(1.0, total))
}

/// ESS of the particles pooled into one sequence in collection order:
/// snapshot by snapshot, particles in index order within a snapshot.
pub fn pooled_ess(chains: &[Vec<f64>]) -> Result<f64> {
    let n = chains.first().map_or(0, Vec::len);
    if chains.iter().any(|c| c.len() != n) {
        return Err(invalid("chains have unequal lengths"));
    }
    let pooled: Vec<f64> = (0..n).flat_map(|t| chains.iter().map(move |c| c[t])).collect();
    ess(&pooled)
}

/// Potential scale reduction `sqrt(var⁺ / W)` with
/// `var⁺ = (n-1)/n · W + B/n`.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(invalid("at least two chains are required"));
    }
    let n = check_chains(chains)? as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().map(|c| sample_var(c)).sum::<f64>() / chains.len() as f64;
    let b = n * sample_var(&means);
    if w <= 0.0 {
        return Ok(if b <= 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok((((n - 1.0) / n * w + b / n) / w).sqrt())
}

/// Raw sample moment `mean(x^order)`.
pub fn sample_moment(samples: &[f64], order: u32) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("no samples"));
    }
    Ok(samples.iter().map(|x| x.powi(order as i32)).sum::<f64>() / samples.len() as f64)
}

pub fn moment_error(samples: &[f64], order: u32, exact: f64) -> Result<f64> {
    Ok((sample_moment(samples, order)? - exact).abs())
}

/// Maximum over the grid interior of
/// `|-∂_z[drift·π] + diffusion·∂²_z π|`, with `π` the target density
/// normalized by the trapezoid rule and derivatives taken by central
/// differences. Zero (up to O(Δz²)) exactly when `π` is stationary for the
/// diffusion.
pub fn fp_residual(
    log_density: impl Fn(f64) -> f64,
    drift: impl Fn(f64) -> f64,
    diffusion: f64,
    range: (f64, f64),
    points: usize,
) -> Result<f64> {
    if !(diffusion >= 0.0 && diffusion.is_finite()) {
        return Err(invalid(format!("diffusion must be non-negative, got {diffusion}")));
    }
    if points < 100 {
        return Err(invalid(format!("need at least 100 grid points, got {points}")));
    }
    let (a, b) = range;
    if !(a < b && a.is_finite() && b.is_finite()) {
        return Err(invalid("grid range must be finite and increasing"));
    }
    let dz = (b - a) / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|i| a + i as f64 * dz).collect();
    let logs: Vec<f64> = grid.iter().map(|&z| log_density(z)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pi: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let mass = dz * (pi.iter().sum::<f64>() - 0.5 * (pi[0] + pi[points - 1]));
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(invalid("target density has no mass on the grid"));
    }
    pi.iter_mut().for_each(|p| *p /= mass);
    let flux: Vec<f64> = grid.iter().zip(&pi).map(|(&z, p)| drift(z) * p).collect();
    let mut worst = 0.0_f64;
    for i in 1..points - 1 {
        let dflux = (flux[i + 1] - flux[i - 1]) / (2.0 * dz);
        let lap = (pi[i + 1] - 2.0 * pi[i] + pi[i - 1]) / (dz * dz);
        worst = worst.max((-dflux + diffusion * lap).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentErrorEntry {
    pub label: String,
    pub estimate: f64,
    pub exact: f64,
    pub error: f64,
}

/// Diagnostics for one sampler run.
///
/// `ess` treats the collected particles as one sample, ordered as collected
/// (snapshot by snapshot, particles in index order), and reports the minimum
/// over dimensions. `ess_multichain` treats each particle as its own chain.
/// Either is `None` when the chains are too short or constant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub sampler: String,
    pub target: String,
    pub seed: u64,
    pub particles: usize,
    pub collected_count: usize,
    pub ess: Option<f64>,
    pub ess_multichain: Option<f64>,
    pub ess_per_second: Option<f64>,
    pub wall_clock: f64,
    pub rhat: Vec<f64>,
    pub moment_errors: Vec<MomentErrorEntry>,
}

impl RunReport {
    /// Zeroes every field derived from wall-clock time so the report is a
    /// deterministic function of the run.
    pub fn without_timing(mut self) -> Self {
        self.wall_clock = 0.0;
        if self.ess_per_second.is_some() {
            self.ess_per_second = Some(0.0);
        }
        self
    }

    pub fn moment_error(&self, label: &str) -> Option<f64> {
        self.moment_errors.iter().find(|m| m.label == label).map(|m| m.error)
    }

    /// Flat `(key, value)` pairs in a fixed order; nested lists are spread
    /// into indexed keys.
    pub fn flat_fields(&self) -> Vec<(String, Value)> {
        let mut out: Vec<(String, Value)> = vec![
            ("schema_version".into(), self.schema_version.into()),
            ("sampler".into(), self.sampler.clone().into()),
            ("target".into(), self.target.clone().into()),
            ("seed".into(), self.seed.into()),
            ("particles".into(), self.particles.into()),
            ("collected_count".into(), self.collected_count.into()),
            ("ess".into(), opt(self.ess)),
            ("ess_multichain".into(), opt(self.ess_multichain)),
            ("ess_per_second".into(), opt(self.ess_per_second)),
            ("wall_clock".into(), self.wall_clock.into()),
        ];
        for (i, r) in self.rhat.iter().enumerate() {
            out.push((format!("rhat_{i}"), finite_or_null(*r)));
        }
        for m in &self.moment_errors {
            out.push((format!("{}_estimate", m.label), m.estimate.into()));
            out.push((format!("{}_exact", m.label), m.exact.into()));
            out.push((format!("{}_error", m.label), m.error.into()));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let map: Map<String, Value> = self.flat_fields().into_iter().collect();
        let mut s = serde_json::to_string_pretty(&Value::Object(map)).expect("report serializes");
        s.push('\n');
        s
    }

    /// Header line and one data row.
    pub fn to_csv(&self) -> String {
        let fields = self.flat_fields();
        let header: Vec<&str> = fields.iter().map(|(k, _)| k.as_str()).collect();
        let row: Vec<String> = fields.iter().map(|(_, v)| csv_cell(v)).collect();
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

fn opt(x: Option<f64>) -> Value {
    x.map_or(Value::Null, finite_or_null)
}

fn finite_or_null(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format_float(f),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

/// 17 significant digits, enough to round-trip any f64.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Per-dimension chains (one per particle) from snapshots shaped
/// `[snapshot, particle, dim]`, mapped to the reporting space.
fn chains_by_dim(samples: &Array3<f64>, target: Option<&dyn Target>) -> Vec<Vec<Vec<f64>>> {
    let (s, l, d) = samples.dim();
    let mut out = vec![vec![Vec::with_capacity(s); l]; d];
    for snap in samples.axis_iter(Axis(0)) {
        for (p, row) in snap.axis_iter(Axis(0)).enumerate() {
            let z = row.to_vec();
            let z = target.map_or(z.clone(), |t| t.to_reporting_space(&z));
            for (c, x) in z.into_iter().enumerate() {
                out[c][p].push(x);
            }
        }
    }
    out
}

pub fn build_report(samples: &Array3<f64>, target: Option<&dyn Target>, wall_clock: f64) -> Result<RunReport> {
    let (s, l, _) = samples.dim();
    let chains = chains_by_dim(samples, target);
    let min_over_dims = |per_dim: Vec<Option<f64>>| {
        per_dim
            .into_iter()
            .collect::<Option<Vec<f64>>>()
            .and_then(|v| v.into_iter().reduce(f64::min))
    };
    let ess = min_over_dims(chains.iter().map(|c| pooled_ess(c).ok()).collect());
    let ess_multichain = min_over_dims(chains.iter().map(|c| multichain_ess(c).ok()).collect());
    let ess_per_second = ess.map(|e| if wall_clock > 0.0 { e / wall_clock } else { 0.0 });
    let rhat = if l >= 2 && s >= MIN_CHAIN {
        chains.iter().map(|c| gelman_rubin(c)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let mut moment_errors = Vec::new();
    if let Some(t) = target {
        for r in t.reference_moments() {
            let pooled: Vec<f64> = chains[r.spec.dim].iter().flatten().copied().collect();
            let estimate = sample_moment(&pooled, r.spec.order)?;
            moment_errors.push(MomentErrorEntry {
                label: r.spec.label(),
                estimate,
                exact: r.exact,
                error: (estimate - r.exact).abs(),
            });
        }
    }
    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        sampler: String::new(),
        target: target.map_or("minibatch".into(), |t| t.name().to_string()),
        seed: 0,
        particles: l,
        collected_count: s * l,
        ess,
        ess_multichain,
        ess_per_second,
        wall_clock,
        rhat,
        moment_errors,
    })
}

/// Convenience lookup of a moment spec label.
pub fn moment_label(dim: usize, order: u32) -> String {
    MomentSpec { dim, order }.label()
}
