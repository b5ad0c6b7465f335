//! Experiment configuration document (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::agent::LoopMode;
use crate::agent::trial::DEFAULT_STEP_CEILING;
use crate::perception::PerceptionPipeline;
use crate::robot::{HandEyeCalibration, MotionConfig};
use crate::scene::{EnvironmentConfig, EnvironmentKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    PegTransfer,
    GauzeRetrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlannerConfig {
    #[default]
    Rule,
    /// Chat-completion endpoint. The bearer token is read from `SURGTWIN_LLM_TOKEN`.
    Llm {
        endpoint: String,
        #[serde(default = "default_model")]
        model: String,
    },
    /// Scripted responses, replayed from the start for every trial.
    Stub { responses: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SupervisorConfig {
    Scripted {
        #[serde(default = "default_tau")]
        tau: f64,
    },
    Interactive,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        SupervisorConfig::Scripted { tau: default_tau() }
    }
}

fn default_model() -> String {
    crate::agent::llm::DEFAULT_MODEL.to_string()
}

fn default_tau() -> f64 {
    0.002
}

fn default_pipeline() -> PerceptionPipeline {
    PerceptionPipeline::oracle()
}

fn default_trials() -> usize {
    1
}

fn default_ceiling() -> usize {
    DEFAULT_STEP_CEILING
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: TaskKind,
    #[serde(default)]
    pub environment: EnvironmentConfig,
    #[serde(default = "default_pipeline")]
    pub pipeline: PerceptionPipeline,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub loop_mode: LoopMode,
    #[serde(default)]
    pub supervisor: SupervisorConfig,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub motion: MotionConfig,
    #[serde(default)]
    pub calibration: HandEyeCalibration,
    #[serde(default = "default_ceiling")]
    pub step_ceiling: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::PegTransfer,
            environment: EnvironmentConfig::default(),
            pipeline: default_pipeline(),
            planner: PlannerConfig::Rule,
            loop_mode: LoopMode::Closed,
            supervisor: SupervisorConfig::default(),
            trials: 1,
            base_seed: 0,
            output: None,
            motion: MotionConfig::default(),
            calibration: HandEyeCalibration::default(),
            step_ceiling: DEFAULT_STEP_CEILING,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        if self.trials == 0 {
            return err("trials must be >= 1".into());
        }
        if self.supervisor == SupervisorConfig::Interactive && self.loop_mode != LoopMode::Closed {
            return err("the interactive supervisor requires loop_mode = \"closed\"".into());
        }
        if let SupervisorConfig::Scripted { tau } = self.supervisor {
            if !(tau > 0.0) {
                return err(format!("supervisor tau must be positive, got {tau}"));
            }
        }
        if let PlannerConfig::Llm { endpoint, .. } = &self.planner {
            if endpoint.trim().is_empty() {
                return err("planner endpoint must not be empty".into());
            }
        }
        if self.step_ceiling == 0 {
            return err("step_ceiling must be >= 1".into());
        }
        let gauze_env = self.environment.environment == EnvironmentKind::Gauze;
        match (self.task, gauze_env) {
            (TaskKind::GauzeRetrieval, false) => return err("gauze retrieval needs environment = \"gauze\"".into()),
            (TaskKind::PegTransfer, true) => return err("peg transfer needs a pegboard environment".into()),
            _ => {}
        }
        if self.task == TaskKind::PegTransfer && self.environment.blocks().is_empty() {
            return err("peg transfer needs at least one block".into());
        }
        self.environment
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.pipeline
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.motion.validate().map_err(HarnessError::Config)?;
        Ok(())
    }
}
