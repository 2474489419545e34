//! Target log-densities with analytic gradients and reference moments.
//!
//! Targets are stored in log-density convention; samplers that work with the
//! potential `H = -log π` negate at their own boundary.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{log_sum_exp, Tape, Var};
use crate::error::{invalid, Result};

/// Raw moment `E[z_dim^order]`, measured in the target's reporting space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentSpec {
    pub dim: usize,
    pub order: u32,
}

impl MomentSpec {
    pub fn label(&self) -> String {
        format!("e_z{}_pow{}", self.dim, self.order)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceMoment {
    pub spec: MomentSpec,
    pub exact: f64,
}

pub trait Target: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// `log π(z)` up to an additive constant.
    fn log_density(&self, z: &[f64]) -> f64;
    fn grad_log_density(&self, z: &[f64]) -> Vec<f64>;

    fn reference_moments(&self) -> Vec<ReferenceMoment> {
        Vec::new()
    }

    /// Map from the sampling space to the reporting space (identity unless the
    /// target was reparameterized).
    fn to_reporting_space(&self, z: &[f64]) -> Vec<f64> {
        z.to_vec()
    }
}

/// Targets whose log-density and gradient can be recorded on an autodiff tape.
pub trait TapeTarget: Target {
    fn log_density_var<'t>(&self, tape: &'t Tape, z: &[Var<'t>]) -> Var<'t>;
    fn grad_log_density_var<'t>(&self, tape: &'t Tape, z: &[Var<'t>]) -> Vec<Var<'t>>;
}

const LN_2PI: f64 = 1.8378770664093453;

// ---------------------------------------------------------------------------
// Gaussian

/// Diagonal Gaussian `N(mean, diag(std²))`, normalized.
#[derive(Debug, Clone)]
pub struct DiagGaussian {
    name: String,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(invalid("gaussian mean/std must be non-empty and equal length"));
        }
        if std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid("gaussian std must be positive"));
        }
        Ok(Self {
            name: "gaussian".into(),
            mean,
            std,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// Exact draws, used as a reference sampler in tests.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

pub fn std_gaussian(dim: usize) -> Result<DiagGaussian> {
    if dim == 0 {
        return Err(invalid("dimension must be at least 1"));
    }
    let mut g = DiagGaussian::new(vec![0.0; dim], vec![1.0; dim])?;
    g.name = "std_gaussian".into();
    Ok(g)
}

impl Target for DiagGaussian {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| {
                let u = (x - m) / s;
                -0.5 * u * u - s.ln() - 0.5 * LN_2PI
            })
            .sum()
    }

    fn grad_log_density(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| -(x - m) / (s * s))
            .collect()
    }

    fn reference_moments(&self) -> Vec<ReferenceMoment> {
        let mut out = Vec::new();
        for (dim, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            out.push(ReferenceMoment {
                spec: MomentSpec { dim, order: 1 },
                exact: *m,
            });
            out.push(ReferenceMoment {
                spec: MomentSpec { dim, order: 2 },
                exact: m * m + s * s,
            });
        }
        out
    }
}

impl TapeTarget for DiagGaussian {
    fn log_density_var<'t>(&self, tape: &'t Tape, z: &[Var<'t>]) -> Var<'t> {
        let terms: Vec<_> = z
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&x, &m), &s)| x.gaussian_log_pdf(tape.constant(m), tape.constant(s)))
            .collect();
        tape.sum(&terms)
    }

    fn grad_log_density_var<'t>(&self, _tape: &'t Tape, z: &[Var<'t>]) -> Vec<Var<'t>> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&x, &m), &s)| (x - m).scale(-1.0 / (s * s)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Mixture of exponentials, sampled in y = ln z

#[derive(Debug, Clone)]
pub struct MixtureOfExponentials {
    rates: [f64; 2],
    weights: [f64; 2],
}

/// Two-component exponential mixture (rates 1.5 and 0.5, weights 1/3 and 2/3),
/// reparameterized to `y = ln z` with density `p(e^y) e^y`.
pub fn mixture_of_exponentials() -> MixtureOfExponentials {
    MixtureOfExponentials {
        rates: [1.5, 0.5],
        weights: [1.0 / 3.0, 2.0 / 3.0],
    }
}

impl MixtureOfExponentials {
    /// `E[z^n] = Σ w_i n! / λ_i^n` in the original space.
    pub fn raw_moment(&self, n: u32) -> f64 {
        let fact: f64 = (1..=n).map(f64::from).product();
        self.rates
            .iter()
            .zip(&self.weights)
            .map(|(l, w)| w * fact / l.powi(n as i32))
            .sum()
    }

    fn component_logs(&self, y: f64) -> [f64; 2] {
        let z = y.exp();
        [
            (self.weights[0] * self.rates[0]).ln() - self.rates[0] * z,
            (self.weights[1] * self.rates[1]).ln() - self.rates[1] * z,
        ]
    }
}

fn lse2(a: [f64; 2]) -> f64 {
    let m = a[0].max(a[1]);
    m + ((a[0] - m).exp() + (a[1] - m).exp()).ln()
}

impl Target for MixtureOfExponentials {
    fn name(&self) -> &str {
        "moe"
    }

    fn dim(&self) -> usize {
        1
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let y = z[0];
        lse2(self.component_logs(y)) + y
    }

    fn grad_log_density(&self, z: &[f64]) -> Vec<f64> {
        let y = z[0];
        let logs = self.component_logs(y);
        let norm = lse2(logs);
        let mean_rate: f64 = logs
            .iter()
            .zip(&self.rates)
            .map(|(l, r)| (l - norm).exp() * r)
            .sum();
        vec![1.0 - y.exp() * mean_rate]
    }

    fn reference_moments(&self) -> Vec<ReferenceMoment> {
        vec![
            ReferenceMoment {
                spec: MomentSpec { dim: 0, order: 1 },
                exact: self.raw_moment(1),
            },
            ReferenceMoment {
                spec: MomentSpec { dim: 0, order: 2 },
                exact: self.raw_moment(2),
            },
        ]
    }

    fn to_reporting_space(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|y| y.exp()).collect()
    }
}

// ---------------------------------------------------------------------------
// 3×3 grid of isotropic Gaussians

#[derive(Debug, Clone)]
pub struct MogGrid {
    centers: Vec<[f64; 2]>,
    var: f64,
}

/// Equal-weight mixture of nine Gaussians with covariance `0.1·I` centered on
/// `{-2, 0, 2}²`.
pub fn mog_grid() -> MogGrid {
    let mut centers = Vec::with_capacity(9);
    for a in [-2.0, 0.0, 2.0] {
        for b in [-2.0, 0.0, 2.0] {
            centers.push([a, b]);
        }
    }
    MogGrid { centers, var: 0.1 }
}

impl MogGrid {
    fn component_logs(&self, z: &[f64]) -> Vec<f64> {
        let norm = -(self.centers.len() as f64).ln() - (2.0 * PI * self.var).ln();
        self.centers
            .iter()
            .map(|c| {
                let r = (z[0] - c[0]).powi(2) + (z[1] - c[1]).powi(2);
                norm - r / (2.0 * self.var)
            })
            .collect()
    }
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Target for MogGrid {
    fn name(&self) -> &str {
        "mog"
    }

    fn dim(&self) -> usize {
        2
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        lse(&self.component_logs(z))
    }

    fn grad_log_density(&self, z: &[f64]) -> Vec<f64> {
        let logs = self.component_logs(z);
        let norm = lse(&logs);
        let mut g = vec![0.0; 2];
        for (l, c) in logs.iter().zip(&self.centers) {
            let r = (l - norm).exp();
            g[0] -= r * (z[0] - c[0]) / self.var;
            g[1] -= r * (z[1] - c[1]) / self.var;
        }
        g
    }

    fn reference_moments(&self) -> Vec<ReferenceMoment> {
        let n = self.centers.len() as f64;
        let mut out = Vec::new();
        for dim in 0..2 {
            out.push(ReferenceMoment {
                spec: MomentSpec { dim, order: 1 },
                exact: self.centers.iter().map(|c| c[dim]).sum::<f64>() / n,
            });
            out.push(ReferenceMoment {
                spec: MomentSpec { dim, order: 2 },
                exact: self.var + self.centers.iter().map(|c| c[dim] * c[dim]).sum::<f64>() / n,
            });
        }
        out
    }
}

impl TapeTarget for MogGrid {
    fn log_density_var<'t>(&self, tape: &'t Tape, z: &[Var<'t>]) -> Var<'t> {
        let norm = -(self.centers.len() as f64).ln() - (2.0 * PI * self.var).ln();
        let logs: Vec<_> = self
            .centers
            .iter()
            .map(|c| ((z[0] - c[0]).square() + (z[1] - c[1]).square()).scale(-0.5 / self.var) + norm)
            .collect();
        log_sum_exp(tape, &logs)
    }

    fn grad_log_density_var<'t>(&self, tape: &'t Tape, z: &[Var<'t>]) -> Vec<Var<'t>> {
        let norm = -(self.centers.len() as f64).ln() - (2.0 * PI * self.var).ln();
        let logs: Vec<_> = self
            .centers
            .iter()
            .map(|c| ((z[0] - c[0]).square() + (z[1] - c[1]).square()).scale(-0.5 / self.var) + norm)
            .collect();
        let total = log_sum_exp(tape, &logs);
        let resp: Vec<_> = logs.iter().map(|&l| (l - total).exp()).collect();
        (0..2)
            .map(|d| {
                let terms: Vec<_> = resp
                    .iter()
                    .zip(&self.centers)
                    .map(|(&r, c)| r * (z[d] - c[d]))
                    .collect();
                tape.sum(&terms).scale(-1.0 / self.var)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Funnel

/// Two-dimensional funnel: `z₁ ~ N(0, s₁²)`, `z₂ | z₁ ~ N(0, exp(z₁)²)`.
#[derive(Debug, Clone)]
pub struct Funnel {
    z1_std: f64,
}

/// Funnel with `z₁` scale 1.35 read as a standard deviation.
pub fn funnel() -> Funnel {
    Funnel { z1_std: 1.35 }
}

impl Funnel {
    /// `scale_is_variance` reads 1.35 as the variance of `z₁` instead.
    pub fn with_scale(scale: f64, scale_is_variance: bool) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(invalid("funnel scale must be positive"));
        }
        let z1_std = if scale_is_variance { scale.sqrt() } else { scale };
        Ok(Self { z1_std })
    }

    pub fn z1_std(&self) -> f64 {
        self.z1_std
    }
}

impl Target for Funnel {
    fn name(&self) -> &str {
        "funnel"
    }

    fn dim(&self) -> usize {
        2
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let s = self.z1_std;
        let (a, b) = (z[0], z[1]);
        -0.5 * (a / s).powi(2) - s.ln() - 0.5 * b * b * (-2.0 * a).exp() - a - LN_2PI
    }

    fn grad_log_density(&self, z: &[f64]) -> Vec<f64> {
        let s = self.z1_std;
        let (a, b) = (z[0], z[1]);
        let w = (-2.0 * a).exp();
        vec![-a / (s * s) + b * b * w - 1.0, -b * w]
    }

    fn reference_moments(&self) -> Vec<ReferenceMoment> {
        vec![
            ReferenceMoment {
                spec: MomentSpec { dim: 0, order: 1 },
                exact: 0.0,
            },
            ReferenceMoment {
                spec: MomentSpec { dim: 1, order: 1 },
                exact: 0.0,
            },
        ]
    }
}

impl TapeTarget for Funnel {
    fn log_density_var<'t>(&self, _tape: &'t Tape, z: &[Var<'t>]) -> Var<'t> {
        let s = self.z1_std;
        let (a, b) = (z[0], z[1]);
        let w = a.scale(-2.0).exp();
        a.square().scale(-0.5 / (s * s)) - (b.square() * w).scale(0.5) - a - (s.ln() + LN_2PI)
    }

    fn grad_log_density_var<'t>(&self, _tape: &'t Tape, z: &[Var<'t>]) -> Vec<Var<'t>> {
        let s = self.z1_std;
        let (a, b) = (z[0], z[1]);
        let w = a.scale(-2.0).exp();
        vec![a.scale(-1.0 / (s * s)) + b.square() * w - 1.0, -(b * w)]
    }
}

// ---------------------------------------------------------------------------
// Gradient audit and registry

/// Largest relative discrepancy between the analytic gradient and central
/// differences (step `step`) over `points`.
pub fn gradient_audit(target: &dyn Target, points: &[Vec<f64>], step: f64) -> f64 {
    let mut worst = 0.0_f64;
    for z in points {
        let g = target.grad_log_density(z);
        for c in 0..z.len() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[c] += step;
            zm[c] -= step;
            let fd = (target.log_density(&zp) - target.log_density(&zm)) / (2.0 * step);
            let rel = (g[c] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Deterministic audit points: standard normal draws in the sampling space.
pub fn audit_points(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

pub const AUDIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    StdGaussian { dim: usize },
    Moe,
    MogGrid,
    Funnel { scale: f64, scale_is_variance: bool },
}

/// Builds a target and runs the gradient audit before handing it out.
pub fn build(spec: &TargetSpec) -> Result<Box<dyn Target>> {
    let target: Box<dyn Target> = match spec {
        TargetSpec::StdGaussian { dim } => Box::new(std_gaussian(*dim)?),
        TargetSpec::Moe => Box::new(mixture_of_exponentials()),
        TargetSpec::MogGrid => Box::new(mog_grid()),
        TargetSpec::Funnel {
            scale,
            scale_is_variance,
        } => Box::new(Funnel::with_scale(*scale, *scale_is_variance)?),
    };
    let points = audit_points(target.dim(), 8, 0x5eed);
    let err = gradient_audit(target.as_ref(), &points, 1e-5);
    if err > AUDIT_TOLERANCE {
        return Err(invalid(format!(
            "target `{}` failed gradient audit (relative error {err:.3e})",
            target.name()
        )));
    }
    Ok(target)
}

// ---------------------------------------------------------------------------
// Minibatch potentials

/// Data-driven log posterior `log p(θ) + Σ_i log p(x_i | θ)`, accessed through
/// minibatches.
pub trait MinibatchPotential: Send + Sync {
    fn dim(&self) -> usize;
    fn dataset_size(&self) -> usize;
    fn log_prior(&self, params: &[f64]) -> f64;
    fn prior_grad(&self, params: &[f64]) -> Vec<f64>;
    /// `Σ_{i ∈ batch} log p(x_i | θ)`.
    fn data_log_lik(&self, params: &[f64], batch: &[usize]) -> f64;
    /// `Σ_{i ∈ batch} ∇ log p(x_i | θ)`.
    fn data_grad(&self, params: &[f64], batch: &[usize]) -> Vec<f64>;
}

/// `∇ log p(θ) + (N/|Ω|) Σ_{i∈Ω} ∇ log p(x_i | θ)`.
pub fn minibatch_grad(
    potential: &dyn MinibatchPotential,
    params: &[f64],
    batch: &[usize],
) -> Result<Vec<f64>> {
    let n = potential.dataset_size();
    let mut g = potential.prior_grad(params);
    if n == 0 {
        return Ok(g);
    }
    if batch.is_empty() {
        return Err(invalid("minibatch must be non-empty"));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= n) {
        return Err(invalid(format!("batch index {bad} outside dataset of size {n}")));
    }
    let scale = n as f64 / batch.len() as f64;
    let data = potential.data_grad(params, batch);
    for (gi, di) in g.iter_mut().zip(data) {
        *gi += scale * di;
    }
    Ok(g)
}

/// Potential assembled from closures over an indexed dataset.
pub struct ClosurePotential<P, L>
where
    P: Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync,
    L: Fn(&[f64], usize) -> (f64, Vec<f64>) + Send + Sync,
{
    pub dim: usize,
    pub dataset_size: usize,
    /// Returns `(log p(θ), ∇ log p(θ))`.
    pub prior: P,
    /// Returns `(log p(x_i | θ), ∇ log p(x_i | θ))`.
    pub per_point: L,
}

impl<P, L> MinibatchPotential for ClosurePotential<P, L>
where
    P: Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync,
    L: Fn(&[f64], usize) -> (f64, Vec<f64>) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn dataset_size(&self) -> usize {
        self.dataset_size
    }

    fn log_prior(&self, params: &[f64]) -> f64 {
        (self.prior)(params).0
    }

    fn prior_grad(&self, params: &[f64]) -> Vec<f64> {
        (self.prior)(params).1
    }

    fn data_log_lik(&self, params: &[f64], batch: &[usize]) -> f64 {
        batch.iter().map(|&i| (self.per_point)(params, i).0).sum()
    }

    fn data_grad(&self, params: &[f64], batch: &[usize]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for &i in batch {
            for (gi, di) in g.iter_mut().zip((self.per_point)(params, i).1) {
                *gi += di;
            }
        }
        g
    }
}

/// A minibatch potential frozen to one batch, usable wherever a [`Target`] is.
pub struct BatchedTarget<'a> {
    pub potential: &'a dyn MinibatchPotential,
    pub batch: &'a [usize],
}

impl Target for BatchedTarget<'_> {
    fn name(&self) -> &str {
        "minibatch"
    }

    fn dim(&self) -> usize {
        self.potential.dim()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let n = self.potential.dataset_size();
        let prior = self.potential.log_prior(z);
        if n == 0 || self.batch.is_empty() {
            return prior;
        }
        prior + n as f64 / self.batch.len() as f64 * self.potential.data_log_lik(z, self.batch)
    }

    fn grad_log_density(&self, z: &[f64]) -> Vec<f64> {
        minibatch_grad(self.potential, z, self.batch)
            .unwrap_or_else(|_| vec![f64::NAN; self.potential.dim()])
    }
}
