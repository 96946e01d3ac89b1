use std::path::{Path, PathBuf};

use latentplan::env::EnvConfig;
use latentplan::model::{AnyModel, Architecture, DeepMdpModel, LatentModel, ModelVariant, StatePredModel};
use latentplan::nn::Activation;
use latentplan::planner::CemConfig;
use latentplan::trainer::{OfflineConfig, OnlineConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub d_z: usize,
    pub gamma: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Weight of the latent transition term (DeepMDP only).
    pub lambda: f64,
    pub stop_target_gradient: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        Self {
            variant: ModelVariant::Reward,
            d_z: 3,
            gamma: 0.99,
            hidden: arch.hidden,
            activation: arch.activation,
            lambda: 1.0,
            stop_target_gradient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub steps: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self { steps: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Master seed; every component seed is set from it.
    pub seed: u64,
    pub eval_episodes: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            seed: 0,
            eval_episodes: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub planner: CemConfig,
    pub collect: CollectConfig,
    pub offline: OfflineConfig,
    pub online: OnlineConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
    }

    /// Copies the master seed into every seeded section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.output.seed = seed;
        self.env.seed = seed;
        self.planner.seed = seed;
        self.offline.seed = seed;
        self.online.seed = seed;
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let v = |e: latentplan::Error| Failure::Validation(e.to_string());
        self.env.validate().map_err(v)?;
        self.planner.validate().map_err(v)?;
        self.offline.validate().map_err(v)?;
        self.online.validate().map_err(v)?;
        let bad = |m: String| Err(Failure::Validation(m));
        if self.planner.action_dim() != self.env.action_dim() {
            return bad(format!(
                "planner has {} action dimensions, environment has {}",
                self.planner.action_dim(),
                self.env.action_dim()
            ));
        }
        let max = self.env.max_torque;
        if self.planner.action_low.iter().chain(&self.planner.action_high).any(|b| b.abs() > max) {
            return bad(format!("planner action bounds exceed the environment's max torque {max}"));
        }
        if self.model.d_z == 0 {
            return bad("model.d_z must be >= 1".into());
        }
        if self.model.hidden.contains(&0) {
            return bad("model.hidden sizes must be >= 1".into());
        }
        if !(self.model.gamma > 0.0 && self.model.gamma <= 1.0) {
            return bad(format!("model.gamma must be in (0, 1], got {}", self.model.gamma));
        }
        if !(self.model.lambda >= 0.0) {
            return bad("model.lambda must be >= 0".into());
        }
        if self.collect.steps == 0 {
            return bad("collect.steps must be >= 1".into());
        }
        if self.output.eval_episodes == 0 {
            return bad("output.eval_episodes must be >= 1".into());
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
        }
    }

    /// A freshly initialized model of the configured variant, sized for the environment.
    pub fn build_model(&self) -> Result<AnyModel, Failure> {
        let (d_s, d_a, m) = (self.env.obs_dim(), self.env.action_dim(), &self.model);
        let arch = self.architecture();
        let seed = self.output.seed;
        let v = |e: latentplan::Error| Failure::Validation(e.to_string());
        Ok(match m.variant {
            ModelVariant::Reward => AnyModel::Reward(LatentModel::new(d_s, d_a, m.d_z, m.gamma, &arch, seed).map_err(v)?),
            ModelVariant::StatePred => {
                AnyModel::StatePred(StatePredModel::new(d_s, d_a, m.d_z, m.gamma, &arch, seed).map_err(v)?)
            }
            ModelVariant::DeepMdp => AnyModel::DeepMdp(
                DeepMdpModel::new(
                    LatentModel::new(d_s, d_a, m.d_z, m.gamma, &arch, seed).map_err(v)?,
                    m.lambda,
                    m.stop_target_gradient,
                )
                .map_err(v)?,
            ),
        })
    }

    /// Rejects a checkpoint whose dimensions disagree with the environment.
    pub fn check_model(&self, model: &AnyModel) -> Result<(), Failure> {
        let l = model.latent();
        if l.d_s() != self.env.obs_dim() || l.d_a() != self.env.action_dim() {
            return Err(Failure::Validation(format!(
                "checkpoint expects {} state and {} action dimensions, environment with {} pendulums has {} and {}",
                l.d_s(),
                l.d_a(),
                self.env.n_pendulums,
                self.env.obs_dim(),
                self.env.action_dim()
            )));
        }
        Ok(())
    }
}
