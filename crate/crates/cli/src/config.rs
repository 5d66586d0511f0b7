//! Experiment configuration: a single human-editable tree (TOML, with JSON
//! also accepted), validated up front with every problem listed. Seeds are
//! mandatory — there are no entropy defaults anywhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use koopman_core::dynamics::{builtin_with_params, DynamicalSystem, IntegrationConfig};
use koopman_core::training::{ArchSpec, RefinementConfig, TrainingConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub integration: IntegrationSection,
    pub sampling: SamplingSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<ArchitectureSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<RefinementSection>,
    pub lqr: LqrSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub name: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationSection {
    pub dt: f64,
    pub substeps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub signal: SignalSection,
    pub trajectories: usize,
    pub steps: usize,
    /// Axis-aligned box the initial states are drawn from, one (lo, hi) per
    /// state dimension.
    pub x0_box: Vec<(f64, f64)>,
    pub x0_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalSection {
    Uniform { lower: f64, upper: f64, seed: u64 },
    /// Trajectories are split round-robin into one group per frequency and
    /// driven by `u_k = cos(ω_i k Δt)`.
    CosineGroups { frequencies: Vec<f64> },
    Zero,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchitectureSection {
    Network {
        feature_dim: usize,
        hidden: Vec<usize>,
        #[serde(default = "default_true")]
        final_activation: bool,
    },
    Dictionary {
        name: String,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    Identity,
}

fn default_true() -> bool {
    true
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_lambda")]
    pub lambda1: f64,
    #[serde(default = "default_lambda")]
    pub lambda2: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementSection {
    pub eps_a: f64,
    pub eps_b: f64,
    /// Fraction of the augmented dataset that is newly collected data
    /// (half closed-loop, half fresh open-loop).
    #[serde(default = "default_mix")]
    pub mix: f64,
    pub epochs: usize,
    #[serde(default = "default_refine_lr")]
    pub learning_rate: f64,
    pub x0_seed: u64,
    #[serde(default = "default_blow_up")]
    pub blow_up_radius: f64,
}

fn default_mix() -> f64 {
    0.5
}

fn default_refine_lr() -> f64 {
    1e-4
}

fn default_blow_up() -> f64 {
    100.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrSection {
    pub state_weights: Vec<f64>,
    pub input_weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub x0: Vec<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<HeatmapSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basin: Option<BasinSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict: Option<PredictSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxisSection {
    /// "state" or "input".
    pub target: String,
    pub index: usize,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapSection {
    pub axis1: GridAxisSection,
    pub axis2: GridAxisSection,
    pub x_fixed: Vec<f64>,
    pub u_fixed: Vec<f64>,
    #[serde(default)]
    pub first_block_only: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasinSection {
    pub axis1_dim: usize,
    pub axis1_range: (f64, f64),
    pub axis1_count: usize,
    pub axis2_dim: usize,
    pub axis2_range: (f64, f64),
    pub axis2_count: usize,
    pub fixed: Vec<f64>,
    pub horizon: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSection {
    pub x_box: Vec<(f64, f64)>,
    pub u_box: Vec<(f64, f64)>,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    pub x0: Vec<f64>,
    /// Prediction horizon; the input sequence is identically zero.
    pub steps: usize,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let is_json = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false)
            || text.trim_start().starts_with('{');
        let config: ExperimentConfig = if is_json {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(config)
    }

    /// Canonical JSON used both for the config hash and the `config.json`
    /// artifact.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Overrides every seed in the config from a single CLI seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.sampling.x0_seed = seed;
        if let SignalSection::Uniform { seed: s, .. } = &mut self.sampling.signal {
            *s = seed.wrapping_add(1);
        }
        if let Some(t) = &mut self.training {
            t.seed = seed.wrapping_add(2);
        }
        if let Some(r) = &mut self.refinement {
            r.x0_seed = seed.wrapping_add(3);
        }
        if let Some(b) = &mut self.analysis.bound {
            b.seed = seed.wrapping_add(4);
        }
    }

    pub fn build_system(&self) -> anyhow::Result<DynamicalSystem> {
        Ok(builtin_with_params(&self.system.name, &self.system.params)?)
    }

    pub fn integration(&self) -> anyhow::Result<IntegrationConfig> {
        Ok(IntegrationConfig::new(
            self.integration.dt,
            self.integration.substeps,
        )?)
    }

    pub fn training_config(&self) -> Option<TrainingConfig> {
        self.training.as_ref().map(|t| TrainingConfig {
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            ..Default::default()
        })
    }

    pub fn arch_spec(&self) -> Option<ArchSpec> {
        match &self.architecture {
            Some(ArchitectureSection::Network {
                feature_dim,
                hidden,
                final_activation,
            }) => Some(ArchSpec {
                feature_dim: *feature_dim,
                hidden: hidden.clone(),
                final_activation: *final_activation,
            }),
            _ => None,
        }
    }

    pub fn refinement_config(&self) -> Option<RefinementConfig> {
        self.refinement.as_ref().map(|r| RefinementConfig {
            eps_a: r.eps_a,
            eps_b: r.eps_b,
            mix: r.mix,
        })
    }

    /// Validates the whole tree, listing every problem found.
    pub fn validate(&self) -> anyhow::Result<()> {
        let mut problems = Vec::new();
        let system = match self.build_system() {
            Ok(s) => Some(s),
            Err(e) => {
                problems.push(format!("system: {e}"));
                None
            }
        };
        if let Err(e) = self.integration() {
            problems.push(format!("integration: {e}"));
        }
        if self.sampling.trajectories == 0 || self.sampling.steps == 0 {
            problems.push("sampling: trajectories and steps must be at least 1".to_string());
        }
        if let Some(sys) = &system {
            if self.sampling.x0_box.len() != sys.n {
                problems.push(format!(
                    "sampling: x0_box has {} dims, system `{}` has {}",
                    self.sampling.x0_box.len(),
                    sys.name,
                    sys.n
                ));
            }
            if self.lqr.state_weights.len() != sys.n {
                problems.push(format!(
                    "lqr: {} state weights for a system with n={}",
                    self.lqr.state_weights.len(),
                    sys.n
                ));
            }
            if self.lqr.input_weights.len() != sys.p {
                problems.push(format!(
                    "lqr: {} input weights for a system with p={}",
                    self.lqr.input_weights.len(),
                    sys.p
                ));
            }
            if let Some(sim) = &self.simulate {
                if sim.x0.len() != sys.n {
                    problems.push(format!(
                        "simulate: x0 has {} dims, system has {}",
                        sim.x0.len(),
                        sys.n
                    ));
                }
            }
            if let Some(p) = &self.analysis.predict {
                if p.x0.len() != sys.n {
                    problems.push(format!(
                        "analysis.predict: x0 has {} dims, system has {}",
                        p.x0.len(),
                        sys.n
                    ));
                }
            }
            if let Some(h) = &self.analysis.heatmap {
                if h.x_fixed.len() != sys.n || h.u_fixed.len() != sys.p {
                    problems.push("analysis.heatmap: fixed coordinates do not match the system dimensions".to_string());
                }
                for axis in [&h.axis1, &h.axis2] {
                    match axis.target.as_str() {
                        "state" if axis.index < sys.n => {}
                        "input" if axis.index < sys.p => {}
                        "state" | "input" => problems
                            .push(format!("analysis.heatmap: axis index {} out of range", axis.index)),
                        other => problems.push(format!(
                            "analysis.heatmap: axis target must be `state` or `input`, got `{other}`"
                        )),
                    }
                }
            }
            if let Some(b) = &self.analysis.basin {
                if b.fixed.len() != sys.n {
                    problems.push("analysis.basin: fixed coordinates do not match n".to_string());
                }
                if b.axis1_dim >= sys.n || b.axis2_dim >= sys.n {
                    problems.push("analysis.basin: swept axis out of range".to_string());
                }
            }
            if let Some(b) = &self.analysis.bound {
                if b.x_box.len() != sys.n || b.u_box.len() != sys.p {
                    problems.push("analysis.bound: measure boxes do not match the system dimensions".to_string());
                }
            }
        }
        for (lo, hi) in &self.sampling.x0_box {
            if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
                problems.push(format!("sampling: bad x0_box interval [{lo}, {hi}]"));
            }
        }
        if let Some(SignalSection::CosineGroups { frequencies }) =
            Some(&self.sampling.signal).filter(|s| matches!(s, SignalSection::CosineGroups { .. }))
        {
            if frequencies.is_empty() {
                problems.push("sampling: cosine_groups needs at least one frequency".to_string());
            }
        }
        match &self.architecture {
            Some(ArchitectureSection::Network { feature_dim, .. }) if *feature_dim == 0 => {
                problems.push("architecture: feature_dim must be at least 1".to_string());
            }
            Some(ArchitectureSection::Dictionary { name, scale }) => {
                if koopman_core::observables::fixed_dictionary(name).is_err() {
                    problems.push(format!("architecture: unknown dictionary `{name}`"));
                }
                if *scale == 0.0 {
                    problems.push("architecture: dictionary scale must be nonzero".to_string());
                }
            }
            _ => {}
        }
        if let Some(t) = &self.training {
            if self.arch_spec().is_none() {
                problems.push(
                    "training requires a network architecture section".to_string(),
                );
            }
            if t.batch_size == 0 || t.lambda1 < 0.0 || t.lambda2 < 0.0 {
                problems.push("training: bad hyperparameters".to_string());
            }
        }
        if let Some(r) = &self.refinement {
            if r.eps_a < 0.0 || r.eps_b < 0.0 || !(0.0..=1.0).contains(&r.mix) {
                problems.push("refinement: budgets must be nonnegative and mix in [0,1]".to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            bail!("invalid config:\n  - {}", problems.join("\n  - "))
        }
    }
}
