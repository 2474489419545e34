//! Variationally inferred sampler: a diagonal-Gaussian guide refined by `T`
//! steps of an inner sampler, trained by back-propagating the ELBO through
//! the refinement.
//!
//! All randomness of one ELBO evaluation is drawn up front as a
//! [`RefinementNoise`] with a fixed layout (initial draws, then one block per
//! inner step), so every entropy mode and AD mode sees common random numbers.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::kernel::{median_bandwidth, resolve_bandwidth, KernelConfig};
use crate::targets::{TapeTarget, Target};

const LN_2PI: f64 = 1.8378770664093453;

/// Initial guide `q₀ = N(μ, diag(σ²))`, with σ stored as `log σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussianGuide {
    pub mean: Vec<f64>,
    pub log_scale: Vec<f64>,
}

impl DiagonalGaussianGuide {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != scale.len() {
            return Err(invalid("guide mean and scale must be non-empty and of equal length"));
        }
        if scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(invalid("guide scales must be positive and finite"));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(invalid("guide mean must be finite"));
        }
        Ok(Self {
            mean,
            log_scale: scale.iter().map(|s| s.ln()).collect(),
        })
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn scale(&self) -> Vec<f64> {
        self.log_scale.iter().map(|l| l.exp()).collect()
    }

    /// Closed-form differential entropy.
    pub fn entropy(&self) -> f64 {
        self.log_scale.iter().sum::<f64>() + 0.5 * self.dim() as f64 * (1.0 + LN_2PI)
    }

    pub fn log_pdf(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.mean)
            .zip(&self.log_scale)
            .map(|((z, m), ls)| {
                let u = (z - m) / ls.exp();
                -0.5 * u * u - ls - 0.5 * LN_2PI
            })
            .sum()
    }

    /// Reparameterized draws `μ + σ ⊙ ξ`, one per row of `xi`.
    pub fn transform(&self, xi: ArrayView2<f64>) -> Array2<f64> {
        let scale = self.scale();
        let mut z = xi.to_owned();
        for mut row in z.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.mean[c] + scale[c] * *v;
            }
        }
        z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSampler {
    /// `z ← z + η∇log p(z)`.
    Sgd,
    /// `z ← z + η∇log p(z) + N(0, 2ηI)`.
    Sgld,
    /// Repulsive kernel flow over the sample set.
    Svgd,
    /// Deterministic flow `z ← z + η(∇log p(z) − ∇log q(z))` with the
    /// kernel-smoothed entropy gradient.
    FpFlow,
}

impl InnerSampler {
    pub fn is_stochastic(self) -> bool {
        matches!(self, InnerSampler::Sgld)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Dirac particles plus the entropy of the initial guide.
    P,
    /// Joint factorization over the trajectory; closed-form SGLD transitions.
    Mc,
    /// Gaussian of the guide's scale centered on the refined point.
    G,
    /// Particles moved by the deterministic flow, with the initial guide
    /// entropy.
    Fp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdMode {
    /// Differentiate through the refinement displacement.
    Full,
    /// Treat the displacement as a constant: `z₀ + ⊥(z_T − z₀)`.
    Fast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedGuide {
    pub guide: DiagonalGaussianGuide,
    pub inner: InnerSampler,
    pub log_eta: f64,
    pub t_refine: usize,
    pub t_infer: usize,
    pub entropy: EntropyMode,
    pub ad: AdMode,
}

impl RefinedGuide {
    pub fn new(
        guide: DiagonalGaussianGuide,
        inner: InnerSampler,
        eta: f64,
        t_refine: usize,
        entropy: EntropyMode,
        ad: AdMode,
    ) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(invalid("inner step size must be positive"));
        }
        let rg = Self {
            guide,
            inner,
            log_eta: eta.ln(),
            t_refine,
            t_infer: t_refine,
            entropy,
            ad,
        };
        rg.validate()?;
        Ok(rg)
    }

    pub fn eta(&self) -> f64 {
        self.log_eta.exp()
    }

    pub fn dim(&self) -> usize {
        self.guide.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.log_eta.is_finite() {
            return Err(Error::Config("log_eta must be finite".into()));
        }
        match (self.entropy, self.inner) {
            (EntropyMode::Fp, InnerSampler::FpFlow) => Ok(()),
            (EntropyMode::Fp, other) => Err(Error::Config(format!(
                "entropy mode fp requires the fp_flow inner sampler, got {other:?}"
            ))),
            (EntropyMode::Mc, InnerSampler::Sgld) => Ok(()),
            (EntropyMode::Mc, other) => Err(Error::Config(format!(
                "entropy mode mc needs Gaussian transitions (sgld), got {other:?}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Standard-normal draws for one ELBO evaluation with `samples` particles and
/// `steps` inner steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementNoise {
    pub initial: Array2<f64>,
    pub steps: Vec<Array2<f64>>,
}

impl RefinementNoise {
    /// Draws the initial block first, then one `samples × dim` block per step,
    /// each row-major. The layout does not depend on the inner sampler.
    pub fn draw(samples: usize, dim: usize, steps: usize, rng: &mut impl Rng) -> Result<Self> {
        if samples == 0 {
            return Err(invalid("sample count must be at least 1"));
        }
        let mut block = || Array2::from_shape_simple_fn((samples, dim), || rng.sample(StandardNormal));
        let initial = block();
        let steps = (0..steps).map(|_| block()).collect();
        Ok(Self { initial, steps })
    }

    pub fn samples(&self) -> usize {
        self.initial.nrows()
    }
}

// ---------------------------------------------------------------------------
// Kernel-smoothed entropy gradient

/// Kernel-smoothed estimate of `−∇log q` at each particle for the RBF kernel
/// `exp(−‖a − b‖²/h)`. Row m is
/// `−Σ_n ∇₁K(z_m,z_n)/Σ_n K(z_m,z_n) − Σ_l ∇₁K(z_m,z_l)/Σ_n K(z_n,z_l)`,
/// which is the gradient of `−Σ_l log Σ_n K(z_l, z_n)` with respect to `z_m`.
pub fn kde_entropy_grad(particles: ArrayView2<f64>, h: f64) -> Array2<f64> {
    let (l, d) = particles.dim();
    let mut k = Array2::<f64>::zeros((l, l));
    for i in 0..l {
        k[[i, i]] = 1.0;
        for j in 0..i {
            let sq: f64 = (0..d)
                .map(|c| (particles[[i, c]] - particles[[j, c]]).powi(2))
                .sum();
            let v = (-sq / h).exp();
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    let rowsum: Vec<f64> = k.rows().into_iter().map(|r| r.sum()).collect();
    let mut out = Array2::<f64>::zeros((l, d));
    for m in 0..l {
        for n in 0..l {
            if n == m {
                continue;
            }
            let w = (2.0 / h) * k[[m, n]] * (1.0 / rowsum[m] + 1.0 / rowsum[n]);
            for c in 0..d {
                out[[m, c]] += w * (particles[[m, c]] - particles[[n, c]]);
            }
        }
    }
    out
}

fn kde_entropy_grad_var<'t>(tape: &'t Tape, z: &[Vec<Var<'t>>], h: f64) -> Vec<Vec<Var<'t>>> {
    let l = z.len();
    let d = z.first().map_or(0, Vec::len);
    let one = tape.constant(1.0);
    let mut k = vec![vec![one; l]; l];
    for i in 0..l {
        for j in 0..i {
            let diffs: Vec<_> = (0..d).map(|c| (z[i][c] - z[j][c]).square()).collect();
            let v = tape.sum(&diffs).scale(-1.0 / h).exp();
            k[i][j] = v;
            k[j][i] = v;
        }
    }
    let inv_rowsum: Vec<_> = k.iter().map(|r| 1.0 / tape.sum(r)).collect();
    (0..l)
        .map(|m| {
            let weights: Vec<_> = (0..l)
                .filter(|&n| n != m)
                .map(|n| (n, (k[m][n] * (inv_rowsum[m] + inv_rowsum[n])).scale(2.0 / h)))
                .collect();
            (0..d)
                .map(|c| {
                    let terms: Vec<_> = weights
                        .iter()
                        .map(|&(n, w)| w * (z[m][c] - z[n][c]))
                        .collect();
                    tape.sum(&terms)
                })
                .collect()
        })
        .collect()
}

/// One deterministic flow step `z ← z + η(∇log p(z) + kde_entropy_grad(z))`.
pub fn vis_fp_step(
    particles: &Array2<f64>,
    target: &dyn Target,
    kernel: &KernelConfig,
    eta: f64,
) -> Result<Array2<f64>> {
    if !(eta > 0.0) {
        return Err(invalid("eta must be positive"));
    }
    if particles.ncols() != target.dim() {
        return Err(invalid("particle dimension does not match the target"));
    }
    kernel.validate()?;
    let (h, _) = resolve_bandwidth(particles.view(), kernel);
    let repulse = kde_entropy_grad(particles.view(), h);
    let mut next = particles.clone();
    for (m, mut row) in next.rows_mut().into_iter().enumerate() {
        let g = target.grad_log_density(&particles.row(m).to_vec());
        for c in 0..row.len() {
            row[c] += eta * (g[c] + repulse[[m, c]]);
        }
    }
    Ok(next)
}

// ---------------------------------------------------------------------------
// Refinement on the tape

fn values(z: &[Vec<Var<'_>>]) -> Array2<f64> {
    let d = z.first().map_or(0, Vec::len);
    Array2::from_shape_fn((z.len(), d), |(i, c)| z[i][c].value())
}

fn inner_step<'t>(
    tape: &'t Tape,
    inner: InnerSampler,
    target: &dyn TapeTarget,
    z: &[Vec<Var<'t>>],
    eta: Var<'t>,
    xi: ArrayView2<f64>,
) -> Vec<Vec<Var<'t>>> {
    let grads: Vec<_> = z.iter().map(|zi| target.grad_log_density_var(tape, zi)).collect();
    match inner {
        InnerSampler::Sgd => z
            .iter()
            .zip(&grads)
            .map(|(zi, gi)| zi.iter().zip(gi).map(|(&a, &g)| a + eta * g).collect())
            .collect(),
        InnerSampler::Sgld => {
            let noise_scale = (eta * 2.0).sqrt();
            z.iter()
                .zip(&grads)
                .enumerate()
                .map(|(i, (zi, gi))| {
                    zi.iter()
                        .zip(gi)
                        .enumerate()
                        .map(|(c, (&a, &g))| a + eta * g + noise_scale * xi[[i, c]])
                        .collect()
                })
                .collect()
        }
        InnerSampler::Svgd => {
            let l = z.len();
            let d = z[0].len();
            let (h, _) = median_bandwidth(values(z).view());
            let mut k = vec![vec![tape.constant(1.0); l]; l];
            for i in 0..l {
                for j in 0..i {
                    let diffs: Vec<_> = (0..d).map(|c| (z[i][c] - z[j][c]).square()).collect();
                    let v = tape.sum(&diffs).scale(-1.0 / h).exp();
                    k[i][j] = v;
                    k[j][i] = v;
                }
            }
            (0..l)
                .map(|i| {
                    (0..d)
                        .map(|c| {
                            let terms: Vec<_> = (0..l)
                                .map(|j| k[j][i] * (grads[j][c] + (z[i][c] - z[j][c]).scale(2.0 / h)))
                                .collect();
                            z[i][c] + eta * tape.sum(&terms).scale(1.0 / l as f64)
                        })
                        .collect()
                })
                .collect()
        }
        InnerSampler::FpFlow => {
            let (h, _) = median_bandwidth(values(z).view());
            let repulse = kde_entropy_grad_var(tape, z, h);
            z.iter()
                .zip(&grads)
                .zip(&repulse)
                .map(|((zi, gi), ri)| {
                    zi.iter()
                        .zip(gi)
                        .zip(ri)
                        .map(|((&a, &g), &r)| a + eta * (g + r))
                        .collect()
                })
                .collect()
        }
    }
}

fn check_finite(z: &[Vec<Var<'_>>], prev: &[Vec<Var<'_>>], step: usize) -> Result<()> {
    for (i, row) in z.iter().enumerate() {
        if row.iter().any(|v| !v.value().is_finite()) {
            return Err(Error::Divergence {
                iteration: step,
                particle: i,
                last_good: Box::new(values(prev)),
            });
        }
    }
    Ok(())
}

/// Differentiable leaves of one ELBO evaluation.
pub struct GuideVars<'t> {
    pub mean: Vec<Var<'t>>,
    pub log_scale: Vec<Var<'t>>,
    pub log_eta: Var<'t>,
}

impl<'t> GuideVars<'t> {
    pub fn new(tape: &'t Tape, rg: &RefinedGuide) -> Self {
        Self {
            mean: tape.vars(&rg.guide.mean),
            log_scale: tape.vars(&rg.guide.log_scale),
            log_eta: tape.var(rg.log_eta),
        }
    }
}

struct TapeTrajectory<'t> {
    z0: Vec<Vec<Var<'t>>>,
    zt: Vec<Vec<Var<'t>>>,
}

fn refine_on_tape<'t>(
    tape: &'t Tape,
    rg: &RefinedGuide,
    target: &dyn TapeTarget,
    p: &GuideVars<'t>,
    noise: &RefinementNoise,
) -> Result<TapeTrajectory<'t>> {
    if noise.initial.ncols() != rg.dim() || target.dim() != rg.dim() {
        return Err(invalid("guide, target and noise dimensions disagree"));
    }
    if noise.steps.len() < rg.t_refine {
        return Err(invalid("noise has fewer step blocks than refinement steps"));
    }
    let scale: Vec<_> = p.log_scale.iter().map(|l| l.exp()).collect();
    let z0: Vec<Vec<_>> = noise
        .initial
        .rows()
        .into_iter()
        .map(|xi| {
            (0..rg.dim())
                .map(|c| p.mean[c] + scale[c] * xi[c])
                .collect()
        })
        .collect();
    let eta = p.log_eta.exp();
    let mut z = z0.clone();
    for (t, xi) in noise.steps.iter().take(rg.t_refine).enumerate() {
        let next = inner_step(tape, rg.inner, target, &z, eta, xi.view());
        check_finite(&next, &z, t)?;
        z = next;
    }
    Ok(TapeTrajectory { z0, zt: z })
}

/// Refined ELBO as a tape node, together with its differentiable leaves.
pub struct ElboTape<'t> {
    pub value: Var<'t>,
    pub vars: GuideVars<'t>,
}

/// Monte-Carlo refined ELBO `(1/M)Σ[log p(z_T) − log q(z)]` under the guide's
/// entropy mode and AD mode.
pub fn elbo<'t>(
    tape: &'t Tape,
    rg: &RefinedGuide,
    target: &dyn TapeTarget,
    noise: &RefinementNoise,
) -> Result<ElboTape<'t>> {
    rg.validate()?;
    let p = GuideVars::new(tape, rg);
    let traj = refine_on_tape(tape, rg, target, &p, noise)?;
    let scale: Vec<_> = p.log_scale.iter().map(|l| l.exp()).collect();
    let d = rg.dim();
    let endpoints: Vec<Vec<_>> = match rg.ad {
        AdMode::Full => traj.zt.clone(),
        AdMode::Fast => traj
            .z0
            .iter()
            .zip(&traj.zt)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x + (y - x).stop_gradient()).collect())
            .collect(),
    };
    let mut terms = Vec::with_capacity(noise.samples());
    for (z0, zt) in traj.z0.iter().zip(&endpoints) {
        let log_p = target.log_density_var(tape, zt);
        let log_q = match rg.entropy {
            EntropyMode::P | EntropyMode::Mc | EntropyMode::Fp => {
                let parts: Vec<_> = (0..d)
                    .map(|c| z0[c].gaussian_log_pdf(p.mean[c], scale[c]))
                    .collect();
                tape.sum(&parts)
            }
            EntropyMode::G => {
                let parts: Vec<_> = (0..d)
                    .map(|c| {
                        let center = p.mean[c] + (zt[c] - z0[c]).stop_gradient();
                        zt[c].gaussian_log_pdf(center, scale[c])
                    })
                    .collect();
                tape.sum(&parts)
            }
        };
        terms.push(log_p - log_q);
    }
    let mut value = tape.sum(&terms).scale(1.0 / noise.samples() as f64);
    if rg.entropy == EntropyMode::Mc && rg.t_refine > 0 {
        let log_eta = match rg.ad {
            AdMode::Full => p.log_eta,
            AdMode::Fast => p.log_eta.stop_gradient(),
        };
        let per_step = (log_eta + (4.0 * std::f64::consts::PI * std::f64::consts::E).ln())
            .scale(0.5 * d as f64);
        value = value + per_step.scale(rg.t_refine as f64);
    }
    tape.check()?;
    Ok(ElboTape { value, vars: p })
}

/// Closed-form entropy of one SGLD transition, `N(·, 2ηI)` in `dim` dimensions.
pub fn sgld_transition_entropy(dim: usize, eta: f64) -> f64 {
    0.5 * dim as f64 * (4.0 * std::f64::consts::PI * std::f64::consts::E * eta).ln()
}

/// Unrefined estimator `(1/M)Σ[log p(z₀) − log q₀(z₀)]` evaluated without a
/// tape.
pub fn plain_elbo(guide: &DiagonalGaussianGuide, target: &dyn TapeTarget, xi: ArrayView2<f64>) -> f64 {
    let z = guide.transform(xi);
    let total: f64 = z
        .rows()
        .into_iter()
        .map(|row| {
            let row = row.to_vec();
            target.log_density(&row) - guide.log_pdf(&row)
        })
        .sum();
    total / z.nrows() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient {
    pub value: f64,
    pub mean: Vec<f64>,
    pub log_scale: Vec<f64>,
    pub log_eta: f64,
}

pub fn elbo_grad(rg: &RefinedGuide, target: &dyn TapeTarget, noise: &RefinementNoise) -> Result<ElboGradient> {
    let tape = Tape::new();
    let e = elbo(&tape, rg, target, noise)?;
    let g = tape.backward(e.value)?;
    Ok(ElboGradient {
        value: e.value.value(),
        mean: e.vars.mean.iter().map(|&v| g.wrt(v)).collect(),
        log_scale: e.vars.log_scale.iter().map(|&v| g.wrt(v)).collect(),
        log_eta: g.wrt(e.vars.log_eta),
    })
}

// ---------------------------------------------------------------------------
// Sampling without gradients

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    /// `T + 1` snapshots `[z₀, z₁, …, z_T]`, each `M × d`.
    pub trajectory: Vec<Array2<f64>>,
}

impl Refinement {
    pub fn initial(&self) -> &Array2<f64> {
        &self.trajectory[0]
    }

    pub fn last(&self) -> &Array2<f64> {
        self.trajectory.last().expect("trajectory holds z0")
    }
}

fn step_values(
    inner: InnerSampler,
    target: &dyn TapeTarget,
    z: &Array2<f64>,
    eta: f64,
    xi: ArrayView2<f64>,
    step: usize,
) -> Result<Array2<f64>> {
    let tape = Tape::new();
    let zv: Vec<Vec<_>> = z.rows().into_iter().map(|r| tape.constants(&r.to_vec())).collect();
    let next = inner_step(&tape, inner, target, &zv, tape.constant(eta), xi);
    check_finite(&next, &zv, step)?;
    Ok(values(&next))
}

/// Draws `z₀` from the guide and applies `t_refine` inner steps using the
/// given noise.
pub fn sample_refined(rg: &RefinedGuide, target: &dyn TapeTarget, noise: &RefinementNoise) -> Result<Refinement> {
    rg.validate()?;
    if noise.initial.ncols() != rg.dim() || target.dim() != rg.dim() {
        return Err(invalid("guide, target and noise dimensions disagree"));
    }
    if noise.steps.len() < rg.t_refine {
        return Err(invalid("noise has fewer step blocks than refinement steps"));
    }
    let mut trajectory = vec![rg.guide.transform(noise.initial.view())];
    for (t, xi) in noise.steps.iter().take(rg.t_refine).enumerate() {
        let next = step_values(rg.inner, target, &trajectory[t], rg.eta(), xi.view(), t)?;
        trajectory.push(next);
    }
    Ok(Refinement { trajectory })
}

/// Inference phase: `samples` draws from the guide pushed through `t_infer`
/// inner steps with fresh noise from `rng`.
pub fn infer(rg: &RefinedGuide, target: &dyn TapeTarget, samples: usize, rng: &mut impl Rng) -> Result<Array2<f64>> {
    let mut fresh = rg.clone();
    fresh.t_refine = rg.t_infer;
    let noise = RefinementNoise::draw(samples, rg.dim(), rg.t_infer, rng)?;
    Ok(sample_refined(&fresh, target, &noise)?.last().clone())
}

// ---------------------------------------------------------------------------
// Outer optimization

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterOptimizer {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OuterOptimizer {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OuterOptimizer {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "outer optimizer needs lr > 0, betas in [0, 1), epsilon > 0".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutput {
    pub guide: RefinedGuide,
    /// Negative ELBO estimate at each outer iteration, before its update.
    pub loss_trace: Vec<f64>,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam ascent on the refined ELBO over `(μ, log σ, log η)`. Each iteration
/// draws fresh noise with `samples` particles. `log η` moves only in full AD
/// mode.
pub fn optimize(
    rg: &RefinedGuide,
    target: &dyn TapeTarget,
    iterations: usize,
    samples: usize,
    opt: &OuterOptimizer,
    rng: &mut impl Rng,
) -> Result<OptimizeOutput> {
    if iterations == 0 {
        return Err(invalid("outer iterations must be at least 1"));
    }
    rg.validate()?;
    opt.validate()?;
    let d = rg.dim();
    let mut guide = rg.clone();
    let mut state = AdamState {
        m: vec![0.0; 2 * d + 1],
        v: vec![0.0; 2 * d + 1],
        t: 0,
    };
    let mut trace = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let noise = RefinementNoise::draw(samples, d, guide.t_refine, rng)?;
        let g = elbo_grad(&guide, target, &noise)?;
        trace.push(-g.value);
        let finite = g.value.is_finite()
            && g.mean.iter().chain(&g.log_scale).all(|x| x.is_finite())
            && g.log_eta.is_finite();
        if !finite {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                trace,
            });
        }
        let mut grad: Vec<f64> = g.mean.iter().chain(&g.log_scale).copied().collect();
        grad.push(if guide.ad == AdMode::Full { g.log_eta } else { 0.0 });
        state.t += 1;
        let bc1 = 1.0 - opt.beta1.powi(state.t);
        let bc2 = 1.0 - opt.beta2.powi(state.t);
        let mut step = vec![0.0; grad.len()];
        for k in 0..grad.len() {
            state.m[k] = opt.beta1 * state.m[k] + (1.0 - opt.beta1) * grad[k];
            state.v[k] = opt.beta2 * state.v[k] + (1.0 - opt.beta2) * grad[k] * grad[k];
            step[k] = opt.learning_rate * (state.m[k] / bc1) / ((state.v[k] / bc2).sqrt() + opt.epsilon);
        }
        for c in 0..d {
            guide.guide.mean[c] += step[c];
            guide.guide.log_scale[c] += step[d + c];
        }
        guide.log_eta += step[2 * d];
    }
    Ok(OptimizeOutput {
        guide,
        loss_trace: trace,
    })
}
