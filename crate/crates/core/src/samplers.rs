//! Particle update rules and the ensemble runner.
//!
//! Targets hand out `∇ log π`; every sampler here converts to the potential
//! gradient `∇H = -∇ log π` once, in [`potential_grads`], and is written in
//! terms of `∇H` from then on.

use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::diagnostics::{build_report, RunReport};
use crate::error::{invalid, Error, Result};
use crate::kernel::{kernel_matrix, sample_repulsive_noise, KernelConfig, KernelMatrix};
use crate::streams::{stream, ParticleStreams, MINIBATCH_STREAM};
use crate::targets::{BatchedTarget, MinibatchPotential, Target};

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub positions: Array2<f64>,
    pub step_index: usize,
}

impl ParticleEnsemble {
    pub fn new(positions: Array2<f64>) -> Result<Self> {
        if positions.nrows() == 0 || positions.ncols() == 0 {
            return Err(invalid("ensemble needs at least one particle and one dimension"));
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(invalid("initial particles must be finite"));
        }
        Ok(Self {
            positions,
            step_index: 0,
        })
    }

    /// Draws each particle from `N(mean, diag(std²))` on its own stream.
    pub fn gaussian(init: &InitConfig, particles: usize, streams: &mut ParticleStreams) -> Result<Self> {
        init.validate()?;
        if particles == 0 || streams.len() != particles {
            return Err(invalid("particle count must match the number of streams and be positive"));
        }
        let xi = streams.standard_normal(init.mean.len());
        let mut positions = xi;
        for mut row in positions.rows_mut() {
            for ((x, m), s) in row.iter_mut().zip(&init.mean).zip(&init.std) {
                *x = m + s * *x;
            }
        }
        Self::new(positions)
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    /// Replaces the positions if every coordinate is finite; otherwise leaves
    /// the ensemble untouched and reports the first offending particle.
    fn commit(&mut self, proposed: Array2<f64>) -> Result<()> {
        if let Some(particle) = first_non_finite(&proposed) {
            return Err(self.divergence(particle));
        }
        self.positions = proposed;
        self.step_index += 1;
        Ok(())
    }

    fn divergence(&self, particle: usize) -> Error {
        Error::Divergence {
            iteration: self.step_index,
            particle,
            last_good: Box::new(self.positions.clone()),
        }
    }
}

fn first_non_finite(a: &Array2<f64>) -> Option<usize> {
    a.rows()
        .into_iter()
        .position(|r| r.iter().any(|x| !x.is_finite()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InitConfig {
    pub fn isotropic(dim: usize, mean: f64, std: f64) -> Self {
        Self {
            mean: vec![mean; dim],
            std: vec![std; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || self.mean.len() != self.std.len() {
            return Err(invalid("init mean/std must be non-empty and equal length"));
        }
        if self.mean.iter().any(|m| !m.is_finite()) || self.std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(invalid("init mean must be finite and std non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant { eps: f64 },
    /// `ε_t = eps0 · (1 + t)^(-gamma)`.
    RobbinsMonro { eps0: f64, gamma: f64 },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::Constant { eps } => {
                if !(eps.is_finite() && eps >= 0.0) {
                    return Err(invalid(format!("step size must be non-negative, got {eps}")));
                }
            }
            StepSchedule::RobbinsMonro { eps0, gamma } => {
                if !(eps0.is_finite() && eps0 > 0.0) {
                    return Err(invalid(format!("eps0 must be positive, got {eps0}")));
                }
                if !(gamma > 0.5 && gamma <= 1.0) {
                    return Err(invalid(format!("decay exponent must lie in (0.5, 1], got {gamma}")));
                }
            }
        }
        Ok(())
    }

    pub fn eps(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant { eps } => eps,
            StepSchedule::RobbinsMonro { eps0, gamma } => eps0 * (1.0 + t as f64).powf(-gamma),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollectionPolicy {
    pub burn_in: usize,
    pub thin: usize,
}

impl CollectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(invalid("thin must be at least 1"));
        }
        Ok(())
    }

    /// Whether the state after iteration `t` (0-based) is collected.
    pub fn collects(&self, t: usize) -> bool {
        let done = t + 1;
        done > self.burn_in && (done - self.burn_in).is_multiple_of(self.thin)
    }

    pub fn count(&self, iterations: usize) -> usize {
        iterations.saturating_sub(self.burn_in) / self.thin
    }
}

/// Auxiliary momentum variables for SGDM+R and Adam+NR.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub momenta: Array2<f64>,
    /// Running second moments of the gradient (Adam+NR only).
    pub second_moments: Array2<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub stabilizer: f64,
}

impl MomentumState {
    /// Momenta drawn from `N(0, I)` on the particle streams.
    pub fn sgdm(particles: usize, dim: usize, streams: &mut ParticleStreams) -> Result<Self> {
        if streams.len() != particles {
            return Err(invalid("stream count must match particle count"));
        }
        Ok(Self {
            momenta: streams.standard_normal(dim),
            second_moments: Array2::zeros((particles, dim)),
            beta1: 0.0,
            beta2: 0.0,
            stabilizer: 0.0,
        })
    }

    pub fn adam(particles: usize, dim: usize, beta1: f64, beta2: f64, stabilizer: f64) -> Result<Self> {
        let state = Self {
            momenta: Array2::zeros((particles, dim)),
            second_moments: Array2::zeros((particles, dim)),
            beta1,
            beta2,
            stabilizer,
        };
        state.validate_adam()?;
        Ok(state)
    }

    fn validate_adam(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(invalid("beta1 and beta2 must lie in (0, 1)"));
        }
        if !(self.stabilizer >= 0.0 && self.stabilizer.is_finite()) {
            return Err(invalid("stabilizer must be non-negative"));
        }
        Ok(())
    }

    fn check_shape(&self, ens: &ParticleEnsemble) -> Result<()> {
        if self.momenta.dim() != ens.positions.dim() || self.second_moments.dim() != ens.positions.dim() {
            return Err(invalid("momentum state shape does not match the ensemble"));
        }
        Ok(())
    }
}

/// Below this ensemble size thread dispatch costs more than it saves.
const PARALLEL_MIN_PARTICLES: usize = 16;

/// `∇H(z_i) = -∇ log π(z_i)` for every particle. Rows are evaluated in
/// parallel; each row depends only on its own particle.
pub fn potential_grads(ens: &ParticleEnsemble, target: &dyn Target) -> Result<Array2<f64>> {
    if target.dim() != ens.dim() {
        return Err(invalid(format!(
            "target dimension {} does not match ensemble dimension {}",
            target.dim(),
            ens.dim()
        )));
    }
    let eval = |i: usize| -> Vec<f64> {
        let z: Vec<f64> = ens.positions.row(i).to_vec();
        target.grad_log_density(&z).into_iter().map(|g| -g).collect()
    };
    let rows: Vec<Vec<f64>> = if ens.len() >= PARALLEL_MIN_PARTICLES {
        (0..ens.len()).into_par_iter().map(eval).collect()
    } else {
        (0..ens.len()).map(eval).collect()
    };
    let mut out = Array2::zeros(ens.positions.dim());
    for (i, row) in rows.into_iter().enumerate() {
        if row.iter().any(|g| !g.is_finite()) {
            return Err(ens.divergence(i));
        }
        for (c, g) in row.into_iter().enumerate() {
            out[[i, c]] = g;
        }
    }
    Ok(out)
}

/// `K · X` with the sum over `l` taken in index order.
fn kernel_apply(k: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut out = Array2::zeros((n, d));
    let dst = out.as_slice_mut().expect("fresh array is contiguous");
    for i in 0..n {
        let acc = &mut dst[i * d..(i + 1) * d];
        for l in 0..n {
            let w = k[[i, l]];
            for (a, v) in acc.iter_mut().zip(&src[l * d..(l + 1) * d]) {
                *a += w * v;
            }
        }
    }
    out
}

/// Stein drift `(1/L)(K·∇H - Γ)`, where row i of `Γ` is the repulsion
/// `Σ_l ∇_{z_l} k(z_l, z_i)`. Stepping `z ← z - ε·direction` moves particles
/// downhill on `H` while pushing them apart.
pub fn svgd_direction(grad_h: &Array2<f64>, kernel: &KernelMatrix) -> Array2<f64> {
    let n = grad_h.nrows() as f64;
    let mut dir = kernel_apply(&kernel.entries, grad_h);
    dir -= &kernel.grad_terms;
    dir.mapv_inplace(|x| x / n);
    dir
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(invalid(format!("step size must be non-negative, got {eps}")));
    }
    Ok(())
}

/// Independent Langevin step `z ← z + ε∇log π(z) + N(0, 2ε I)`.
pub fn sgld_step(
    ens: &mut ParticleEnsemble,
    target: &dyn Target,
    eps: f64,
    streams: &mut ParticleStreams,
) -> Result<()> {
    check_eps(eps)?;
    let grad_h = potential_grads(ens, target)?;
    let xi = streams.standard_normal(ens.dim());
    let scale = (2.0 * eps).sqrt();
    let mut next = &ens.positions - &(grad_h * eps);
    next.zip_mut_with(&xi, |z, x| *z += scale * x);
    ens.commit(next)
}

pub fn svgd_step(ens: &mut ParticleEnsemble, target: &dyn Target, kernel: &KernelConfig, eps: f64) -> Result<()> {
    check_eps(eps)?;
    let grad_h = potential_grads(ens, target)?;
    let k = kernel_matrix(ens.positions.view(), kernel)?;
    let dir = svgd_direction(&grad_h, &k);
    let next = &ens.positions - &(dir * eps);
    ens.commit(next)
}

/// SVGD drift plus kernel-correlated noise `N(0, 2εK/L)`.
pub fn sgld_r_step(
    ens: &mut ParticleEnsemble,
    target: &dyn Target,
    kernel: &KernelConfig,
    eps: f64,
    streams: &mut ParticleStreams,
) -> Result<()> {
    let k = kernel_matrix(ens.positions.view(), kernel)?;
    sgld_r_step_with(ens, target, &k, kernel.jitter, eps, streams)
}

fn sgld_r_step_with(
    ens: &mut ParticleEnsemble,
    target: &dyn Target,
    k: &KernelMatrix,
    jitter: f64,
    eps: f64,
    streams: &mut ParticleStreams,
) -> Result<()> {
    check_eps(eps)?;
    let grad_h = potential_grads(ens, target)?;
    let dir = svgd_direction(&grad_h, k);
    let noise = sample_repulsive_noise(k, jitter, eps, ens.dim(), streams)?;
    let mut next = &ens.positions - &(dir * eps);
    next += &noise;
    ens.commit(next)
}

/// Position update shared by the momentum samplers:
/// `z + (ε/L)·K·velocity`, plus `(ε/L)Γ + noise` when `noise` is given.
pub fn kernel_position_update(
    positions: &Array2<f64>,
    k: &KernelMatrix,
    velocity: &Array2<f64>,
    eps: f64,
    noise: Option<&Array2<f64>>,
) -> Array2<f64> {
    let n = positions.nrows() as f64;
    let mut drift = kernel_apply(&k.entries, velocity);
    if noise.is_some() {
        drift += &k.grad_terms;
    }
    let mut next = positions + &(drift * (eps / n));
    if let Some(noise) = noise {
        next += noise;
    }
    next
}

/// Adam+NR position update: the velocity is the preconditioned momentum
/// `m / sqrt(v + stabilizer)`, followed by repulsion and correlated noise.
pub fn adam_nr_position_update(
    positions: &Array2<f64>,
    k: &KernelMatrix,
    momenta: &Array2<f64>,
    second_moments: &Array2<f64>,
    stabilizer: f64,
    eps: f64,
    noise: &Array2<f64>,
) -> Array2<f64> {
    let (n, d) = positions.dim();
    let mut next = positions.clone();
    let step = eps / n as f64;
    for i in 0..n {
        for c in 0..d {
            let mut s = 0.0;
            for l in 0..n {
                s += k.entries[[i, l]] * (momenta[[l, c]] / (second_moments[[l, c]] + stabilizer).sqrt());
            }
            next[[i, c]] += (s + k.grad_terms[[i, c]]) * step;
        }
    }
    next += noise;
    next
}

/// Block matrix `Q_K = [[0, -K], [K, 0]]` over (positions, momenta), with
/// `K` standing for `K ⊗ I_d`. Only used to inspect the dynamics.
pub fn q_k_matrix(k: &KernelMatrix, dim: usize) -> Array2<f64> {
    let n = k.len();
    let size = n * dim;
    let mut q = Array2::zeros((2 * size, 2 * size));
    for i in 0..n {
        for j in 0..n {
            for c in 0..dim {
                let (r, s) = (i * dim + c, j * dim + c);
                q[[r, size + s]] = -k.entries[[i, j]];
                q[[size + r, s]] = k.entries[[i, j]];
            }
        }
    }
    q
}

/// Kernel-coupled momentum step:
/// `z ← z + (ε/L)K m`, `m ← m - (ε/L)(K∇H - Γ)`, both from the current state.
/// With `position_noise` the positions also receive `(ε/L)Γ` and
/// `N(0, 2εK/L)`.
pub fn sgdm_r_step(
    ens: &mut ParticleEnsemble,
    state: &mut MomentumState,
    target: &dyn Target,
    kernel: &KernelConfig,
    eps: f64,
    position_noise: bool,
    streams: &mut ParticleStreams,
) -> Result<()> {
    let k = kernel_matrix(ens.positions.view(), kernel)?;
    sgdm_r_step_with(ens, state, target, &k, kernel.jitter, eps, position_noise, streams)
}

#[allow(clippy::too_many_arguments)]
fn sgdm_r_step_with(
    ens: &mut ParticleEnsemble,
    state: &mut MomentumState,
    target: &dyn Target,
    k: &KernelMatrix,
    jitter: f64,
    eps: f64,
    position_noise: bool,
    streams: &mut ParticleStreams,
) -> Result<()> {
    check_eps(eps)?;
    state.check_shape(ens)?;
    let grad_h = potential_grads(ens, target)?;
    let noise = if position_noise {
        Some(sample_repulsive_noise(k, jitter, eps, ens.dim(), streams)?)
    } else {
        None
    };
    let next_z = kernel_position_update(&ens.positions, k, &state.momenta, eps, noise.as_ref());
    let dir = svgd_direction(&grad_h, k);
    let next_m = &state.momenta - &(dir * eps);
    if let Some(p) = first_non_finite(&next_m) {
        return Err(ens.divergence(p));
    }
    ens.commit(next_z)?;
    state.momenta = next_m;
    Ok(())
}

/// Adam+NR: `m ← β₁m + (1-β₁)(-∇H)`, `v ← β₂v + (1-β₂)∇H²`, then the
/// preconditioned kernel position update with repulsion and noise.
pub fn adam_nr_step(
    ens: &mut ParticleEnsemble,
    state: &mut MomentumState,
    target: &dyn Target,
    kernel: &KernelConfig,
    eps: f64,
    streams: &mut ParticleStreams,
) -> Result<()> {
    let k = kernel_matrix(ens.positions.view(), kernel)?;
    adam_nr_step_with(ens, state, target, &k, kernel.jitter, eps, streams)
}

fn adam_nr_step_with(
    ens: &mut ParticleEnsemble,
    state: &mut MomentumState,
    target: &dyn Target,
    k: &KernelMatrix,
    jitter: f64,
    eps: f64,
    streams: &mut ParticleStreams,
) -> Result<()> {
    check_eps(eps)?;
    state.validate_adam()?;
    state.check_shape(ens)?;
    let grad_h = potential_grads(ens, target)?;
    let (b1, b2) = (state.beta1, state.beta2);
    let mut m = state.momenta.clone();
    m.zip_mut_with(&grad_h, |m, g| *m = b1 * *m - (1.0 - b1) * g);
    let mut v = state.second_moments.clone();
    v.zip_mut_with(&grad_h, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
    let noise = sample_repulsive_noise(k, jitter, eps, ens.dim(), streams)?;
    let next = adam_nr_position_update(&ens.positions, k, &m, &v, state.stabilizer, eps, &noise);
    ens.commit(next)?;
    state.momenta = m;
    state.second_moments = v;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplerKind {
    Sgld,
    Svgd,
    SgldR,
    SgdmR,
    AdamNr,
}

impl SamplerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Sgld => "sgld",
            SamplerKind::Svgd => "svgd",
            SamplerKind::SgldR => "sgld_r",
            SamplerKind::SgdmR => "sgdm_r",
            SamplerKind::AdamNr => "adam_nr",
        }
    }

    fn uses_kernel(&self) -> bool {
        !matches!(self, SamplerKind::Sgld)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub kernel: KernelConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub stabilizer: f64,
    /// SGDM+R only: add repulsion and correlated noise to the positions.
    pub position_noise: bool,
    /// From this iteration on the kernel is replaced by the identity
    /// (`D_K = I`): no interaction, and each particle moves as an independent
    /// Langevin chain with step `ε/L`.
    pub repulsion_cutoff: Option<usize>,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind) -> Self {
        Self {
            kind,
            kernel: KernelConfig::default(),
            beta1: 0.9,
            beta2: 0.999,
            stabilizer: 1e-8,
            position_noise: false,
            repulsion_cutoff: None,
        }
    }
}

/// Where particle gradients come from.
#[derive(Clone, Copy)]
pub enum GradientModel<'a> {
    Full(&'a dyn Target),
    /// A fresh batch (without replacement) is drawn every iteration from a
    /// dedicated stream.
    Minibatch {
        potential: &'a dyn MinibatchPotential,
        batch_size: usize,
    },
}

impl GradientModel<'_> {
    fn dim(&self) -> usize {
        match self {
            GradientModel::Full(t) => t.dim(),
            GradientModel::Minibatch { potential, .. } => potential.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sampler: SamplerConfig,
    pub particles: usize,
    pub init: InitConfig,
    pub schedule: StepSchedule,
    pub collection: CollectionPolicy,
    pub iterations: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Config("particles must be at least 1".into()));
        }
        self.init.validate().map_err(as_config)?;
        self.schedule.validate().map_err(as_config)?;
        self.collection.validate().map_err(as_config)?;
        self.sampler.kernel.validate().map_err(as_config)?;
        if self.iterations <= self.collection.burn_in {
            return Err(Error::Config(format!(
                "iterations ({}) must exceed burn_in ({}); nothing would be collected",
                self.iterations, self.collection.burn_in
            )));
        }
        if self.collection.count(self.iterations) == 0 {
            return Err(Error::Config("collection policy collects no samples".into()));
        }
        Ok(())
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Collected snapshots, shaped `[snapshot, particle, dim]`, in the
    /// sampling space.
    pub samples: Array3<f64>,
    pub final_ensemble: ParticleEnsemble,
    pub report: RunReport,
}

/// Evolves an ensemble and collects snapshots per the policy. Output is a
/// deterministic function of the configuration (timing fields aside).
pub fn run(cfg: &RunConfig, model: GradientModel<'_>) -> Result<RunOutput> {
    cfg.validate()?;
    let dim = model.dim();
    if cfg.init.mean.len() != dim {
        return Err(Error::Config(format!(
            "init dimension {} does not match target dimension {dim}",
            cfg.init.mean.len()
        )));
    }
    if let GradientModel::Minibatch { potential, batch_size } = model {
        if batch_size == 0 || batch_size > potential.dataset_size().max(1) {
            return Err(Error::Config(format!(
                "batch size {batch_size} must lie in 1..={}",
                potential.dataset_size()
            )));
        }
    }

    let l = cfg.particles;
    let mut streams = ParticleStreams::new(cfg.seed, l);
    let mut batch_rng = stream(cfg.seed, MINIBATCH_STREAM);
    let mut ens = ParticleEnsemble::gaussian(&cfg.init, l, &mut streams)?;
    let sc = &cfg.sampler;
    let mut momentum = match sc.kind {
        SamplerKind::SgdmR => Some(MomentumState::sgdm(l, dim, &mut streams)?),
        SamplerKind::AdamNr => Some(MomentumState::adam(l, dim, sc.beta1, sc.beta2, sc.stabilizer).map_err(as_config)?),
        _ => None,
    };

    let n_collect = cfg.collection.count(cfg.iterations);
    let mut samples = Array3::zeros((n_collect, l, dim));
    let mut collected = 0;
    let mut fallbacks = 0usize;
    let start = Instant::now();

    for t in 0..cfg.iterations {
        let eps = cfg.schedule.eps(t);
        let batch;
        let batched;
        let target: &dyn Target = match model {
            GradientModel::Full(t) => t,
            GradientModel::Minibatch { potential, batch_size } => {
                batch = draw_batch(&mut batch_rng, potential.dataset_size(), batch_size);
                batched = BatchedTarget {
                    potential,
                    batch: &batch,
                };
                &batched
            }
        };

        let kernel = if sc.kind.uses_kernel() {
            let interacting = sc.repulsion_cutoff.is_none_or(|c| t < c);
            let k = if interacting {
                kernel_matrix(ens.positions.view(), &sc.kernel)?
            } else {
                KernelMatrix::identity(l, dim)
            };
            if k.bandwidth_fallback && l > 1 {
                fallbacks += 1;
            }
            Some(k)
        } else {
            None
        };

        let jitter = sc.kernel.jitter;
        match (sc.kind, kernel.as_ref()) {
            (SamplerKind::Sgld, _) => sgld_step(&mut ens, target, eps, &mut streams)?,
            (SamplerKind::Svgd, Some(k)) => {
                check_eps(eps)?;
                let grad_h = potential_grads(&ens, target)?;
                let next = &ens.positions - &(svgd_direction(&grad_h, k) * eps);
                ens.commit(next)?;
            }
            (SamplerKind::SgldR, Some(k)) => sgld_r_step_with(&mut ens, target, k, jitter, eps, &mut streams)?,
            (SamplerKind::SgdmR, Some(k)) => sgdm_r_step_with(
                &mut ens,
                momentum.as_mut().expect("momentum initialized for SGDM+R"),
                target,
                k,
                jitter,
                eps,
                sc.position_noise,
                &mut streams,
            )?,
            (SamplerKind::AdamNr, Some(k)) => adam_nr_step_with(
                &mut ens,
                momentum.as_mut().expect("momentum initialized for Adam+NR"),
                target,
                k,
                jitter,
                eps,
                &mut streams,
            )?,
            (_, None) => unreachable!("kernel computed for every interacting sampler"),
        }

        if cfg.collection.collects(t) {
            samples.index_axis_mut(Axis(0), collected).assign(&ens.positions);
            collected += 1;
        }
    }
    let wall_clock = start.elapsed().as_secs_f64();
    if fallbacks > 0 {
        log::warn!("median bandwidth fell back to h = 1 on {fallbacks} iterations");
    }

    let reference = match model {
        GradientModel::Full(t) => Some(t),
        GradientModel::Minibatch { .. } => None,
    };
    let mut report = build_report(&samples, reference, wall_clock)?;
    report.sampler = sc.kind.name().to_string();
    report.seed = cfg.seed;
    report.particles = l;
    Ok(RunOutput {
        samples,
        final_ensemble: ens,
        report,
    })
}

/// Uniform batch without replacement; the full index range when the batch
/// covers the dataset.
pub fn draw_batch(rng: &mut impl Rng, n: usize, batch_size: usize) -> Vec<usize> {
    if batch_size >= n {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, batch_size).into_vec()
}

/// Standard-normal matrix drawn from one generator, row-major.
pub fn standard_normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}
