//! Experiment configuration for the `run` command.
//!
//! Configs are JSON documents validated against a strict schema: unknown keys
//! are rejected and every error names the offending field path.

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernel::{Bandwidth, KernelConfig};
use crate::samplers::{CollectionPolicy, InitConfig, RunConfig, SamplerConfig, SamplerKind, StepSchedule};
use crate::targets::TargetSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetEntry,
    pub samplers: Vec<SamplerEntry>,
    /// Defaults to `N(0, I)` in the sampling space.
    #[serde(default)]
    pub init: Option<InitEntry>,
    pub iterations: usize,
    pub collection: CollectionEntry,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetEntry {
    StdGaussian {
        dim: usize,
    },
    Moe {},
    MogGrid {},
    Funnel {
        #[serde(default = "unit")]
        scale: f64,
        #[serde(default)]
        scale_is_variance: bool,
    },
}

fn unit() -> f64 {
    1.0
}

impl TargetEntry {
    pub fn spec(&self) -> TargetSpec {
        match *self {
            TargetEntry::StdGaussian { dim } => TargetSpec::StdGaussian { dim },
            TargetEntry::Moe {} => TargetSpec::Moe,
            TargetEntry::MogGrid {} => TargetSpec::MogGrid,
            TargetEntry::Funnel {
                scale,
                scale_is_variance,
            } => TargetSpec::Funnel {
                scale,
                scale_is_variance,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerName {
    Sgld,
    Svgd,
    SgldR,
    SgdmR,
    AdamNr,
}

impl SamplerName {
    pub fn kind(self) -> SamplerKind {
        match self {
            SamplerName::Sgld => SamplerKind::Sgld,
            SamplerName::Svgd => SamplerKind::Svgd,
            SamplerName::SgldR => SamplerKind::SgldR,
            SamplerName::SgdmR => SamplerKind::SgdmR,
            SamplerName::AdamNr => SamplerKind::AdamNr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepEntry {
    Constant { eps: f64 },
    RobbinsMonro { eps0: f64, gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthEntry {
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelEntry {
    #[serde(default = "median")]
    pub bandwidth: BandwidthEntry,
    #[serde(default)]
    pub jitter: f64,
}

fn median() -> BandwidthEntry {
    BandwidthEntry::Median
}

impl Default for KernelEntry {
    fn default() -> Self {
        Self {
            bandwidth: BandwidthEntry::Median,
            jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerEntry {
    pub name: SamplerName,
    pub particles: usize,
    pub step: StepEntry,
    #[serde(default)]
    pub kernel: KernelEntry,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "stabilizer")]
    pub stabilizer: f64,
    #[serde(default)]
    pub position_noise: bool,
    #[serde(default)]
    pub repulsion_cutoff: Option<usize>,
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn stabilizer() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitEntry {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionEntry {
    pub burn_in: usize,
    pub thin: usize,
}

/// Parses a config, reporting the field path and source position on failure.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Config(format!(
            "field `{path}` (line {}, column {}): {inner}",
            inner.line(),
            inner.column()
        ))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text)
}

impl ExperimentConfig {
    /// Checks every run configuration before any compute starts.
    pub fn validate(&self) -> Result<()> {
        if self.samplers.is_empty() {
            return Err(Error::Config("field `samplers`: at least one sampler is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("field `seeds`: at least one seed is required".into()));
        }
        let mut seen = HashSet::new();
        for (i, s) in self.samplers.iter().enumerate() {
            if !seen.insert(s.name) {
                return Err(Error::Config(format!(
                    "field `samplers[{i}].name`: sampler `{}` listed twice",
                    s.name.kind().name()
                )));
            }
        }
        let dim = crate::targets::build(&self.target.spec())
            .map_err(|e| Error::Config(format!("field `target`: {e}")))?
            .dim();
        for (i, _) in self.samplers.iter().enumerate() {
            let cfg = self.run_config(i, self.seeds[0], dim);
            cfg.validate()
                .map_err(|e| Error::Config(format!("field `samplers[{i}]`: {}", strip_prefix(&e))))?;
            if cfg.init.mean.len() != dim {
                return Err(Error::Config(format!(
                    "field `init`: dimension {} does not match target dimension {dim}",
                    cfg.init.mean.len()
                )));
            }
        }
        Ok(())
    }

    /// The run configuration for sampler `index` under `seed`.
    pub fn run_config(&self, index: usize, seed: u64, dim: usize) -> RunConfig {
        let s = &self.samplers[index];
        let bandwidth = match s.kernel.bandwidth {
            BandwidthEntry::Median => Bandwidth::Median,
            BandwidthEntry::Fixed(h) => Bandwidth::Fixed(h),
        };
        let schedule = match s.step {
            StepEntry::Constant { eps } => StepSchedule::Constant { eps },
            StepEntry::RobbinsMonro { eps0, gamma } => StepSchedule::RobbinsMonro { eps0, gamma },
        };
        let init = match &self.init {
            Some(i) => InitConfig {
                mean: i.mean.clone(),
                std: i.std.clone(),
            },
            None => InitConfig::isotropic(dim, 0.0, 1.0),
        };
        RunConfig {
            sampler: SamplerConfig {
                kind: s.name.kind(),
                kernel: KernelConfig {
                    bandwidth,
                    jitter: s.kernel.jitter,
                },
                beta1: s.beta1,
                beta2: s.beta2,
                stabilizer: s.stabilizer,
                position_noise: s.position_noise,
                repulsion_cutoff: s.repulsion_cutoff,
            },
            particles: s.particles,
            init,
            schedule,
            collection: CollectionPolicy {
                burn_in: self.collection.burn_in,
                thin: self.collection.thin,
            },
            iterations: self.iterations,
            seed,
        }
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::InvalidArgument(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Hex SHA-256 of the canonical JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MOE: &str = r#"{
        "target": {"name": "moe"},
        "samplers": [
            {"name": "sgld", "particles": 10, "step": {"schedule": "constant", "eps": 0.005}},
            {"name": "sgld_r", "particles": 10, "step": {"schedule": "constant", "eps": 0.05}}
        ],
        "iterations": 1000,
        "collection": {"burn_in": 500, "thin": 10},
        "seeds": [0, 1]
    }"#;

    fn config_error(text: &str) -> String {
        match parse(text) {
            Err(Error::Config(m)) => m,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn parses_with_defaults() {
        let cfg = parse(MOE).unwrap();
        assert_eq!(cfg.samplers.len(), 2);
        assert_eq!(cfg.samplers[1].kernel, KernelEntry::default());
        assert_eq!(cfg.samplers[1].beta1, 0.9);
        let rc = cfg.run_config(1, 7, 1);
        assert_eq!(rc.seed, 7);
        assert_eq!(rc.sampler.kind, SamplerKind::SgldR);
        assert_eq!(rc.init, InitConfig::isotropic(1, 0.0, 1.0));
    }

    #[test]
    fn invalid_sampler_name_names_field() {
        let msg = config_error(&MOE.replace("\"sgld_r\"", "\"sgld_x\""));
        assert!(msg.contains("samplers[1].name"), "{msg}");
        assert!(msg.contains("line 5"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let msg = config_error(&MOE.replace("\"seeds\"", "\"sedes\": [], \"seeds\""));
        assert!(msg.contains("sedes"), "{msg}");
        let msg = config_error(&MOE.replace("\"eps\": 0.05", "\"eps\": 0.05, \"lr\": 1"));
        assert!(msg.contains("samplers[1].step"), "{msg}");
        let msg = config_error(&MOE.replace("{\"name\": \"moe\"}", "{\"name\": \"moe\", \"dim\": 3}"));
        assert!(msg.contains("target"), "{msg}");
    }

    #[test]
    fn semantic_errors_name_field() {
        let msg = config_error(&MOE.replace("\"eps\": 0.05", "\"eps\": -1.0"));
        assert!(msg.contains("samplers[1]"), "{msg}");
        let msg = config_error(&MOE.replace("\"thin\": 10", "\"thin\": 0"));
        assert!(msg.contains("thin"), "{msg}");
        let msg = config_error(&MOE.replace("\"sgld_r\"", "\"sgld\""));
        assert!(msg.contains("listed twice"), "{msg}");
        let msg = config_error(&MOE.replace("\"seeds\": [0, 1]", "\"seeds\": [0, 1], \"init\": {\"mean\": [0, 0], \"std\": [1, 1]}"));
        assert!(msg.contains("init"), "{msg}");
    }

    #[test]
    fn fixed_bandwidth_and_schedule_variants() {
        let text = MOE.replace(
            "\"step\": {\"schedule\": \"constant\", \"eps\": 0.05}",
            "\"step\": {\"schedule\": \"robbins_monro\", \"eps0\": 0.1, \"gamma\": 0.6}, \"kernel\": {\"bandwidth\": {\"fixed\": 0.5}}",
        );
        let cfg = parse(&text).unwrap();
        let rc = cfg.run_config(1, 0, 1);
        assert_eq!(rc.sampler.kernel.bandwidth, Bandwidth::Fixed(0.5));
        assert_eq!(rc.schedule, StepSchedule::RobbinsMonro { eps0: 0.1, gamma: 0.6 });
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = parse(MOE).unwrap();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
        b.iterations += 1;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
