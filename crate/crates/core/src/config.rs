//! Run configuration: one JSON document with every knob, defaults filled in
//! and unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::blend::BlendConfig;
use crate::error::{Error, Result};
use crate::refine::RefineConfig;
use crate::rewards::{RewardConfig, RewardKind};
use crate::rl::{Env, PpoConfig};
use crate::samplers::Paradigm;
use crate::transforms::{Activator, Schedule};
use crate::worlds::{DiscreteWorldConfig, GmmWorldConfig, World, WorldConfig, KAPPA_MAX};

fn default_beta() -> f64 {
    0.8
}

fn default_true() -> bool {
    true
}

fn default_checkpoint_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generations per class.
    pub samples: usize,
    pub coverage_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 1000,
            coverage_radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paradigm: Paradigm,
    /// Number of generation steps.
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
    /// Defaults to the discrete world for token paradigms and the Gaussian
    /// mixture otherwise.
    #[serde(default)]
    pub world: Option<WorldConfig>,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default = "default_beta")]
    pub smoothing_beta: f64,
    /// Heuristic schedule encoded into the activation offsets.
    #[serde(default)]
    pub schedule: Option<Schedule>,
    #[serde(default = "default_true")]
    pub init_from_schedule: bool,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub blend: BlendConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl RunConfig {
    /// Smallest valid config; everything else takes its default.
    pub fn minimal(paradigm: Paradigm, horizon: usize, seed: u64) -> Self {
        RunConfig {
            paradigm,
            horizon,
            seed,
            world: None,
            agent: AgentConfig::default(),
            ppo: PpoConfig::default(),
            reward: RewardConfig::default(),
            smoothing_beta: default_beta(),
            schedule: None,
            init_from_schedule: true,
            refine: RefineConfig::default(),
            blend: BlendConfig::default(),
            eval: EvalConfig::default(),
            checkpoint_every: default_checkpoint_every(),
            out_dir: None,
        }
        .resolved()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Fills the paradigm-dependent defaults (world and schedule).
    pub fn resolved(mut self) -> Self {
        if self.world.is_none() {
            self.world = Some(if self.paradigm.is_discrete() {
                WorldConfig::Discrete(DiscreteWorldConfig::default())
            } else {
                WorldConfig::Gmm(GmmWorldConfig::default())
            });
        }
        if self.schedule.is_none() {
            let vocab = match &self.world {
                Some(WorldConfig::Discrete(d)) => d.vocab,
                _ => 0,
            };
            self.schedule = Some(Schedule::default_for(self.paradigm, vocab));
        }
        self
    }

    pub fn world_config(&self) -> Result<&WorldConfig> {
        self.world
            .as_ref()
            .ok_or_else(|| Error::config("world", "unresolved"))
    }

    pub fn validate(&self) -> Result<()> {
        let world = self.world_config()?;
        if self.horizon == 0 {
            return Err(Error::config("T", "must be at least 1"));
        }
        match (world, self.paradigm) {
            (WorldConfig::Discrete(d), Paradigm::Ar) if self.horizon != d.grid => {
                return Err(Error::config(
                    "T",
                    format!("autoregressive sampling needs T equal to the grid size {}", d.grid),
                ));
            }
            (WorldConfig::Discrete(_), Paradigm::Maskgit | Paradigm::Ar) => {}
            (WorldConfig::Gmm(_), Paradigm::Diffusion | Paradigm::Flow) => {
                if self.paradigm == Paradigm::Diffusion && self.horizon > KAPPA_MAX {
                    return Err(Error::config("T", format!("diffusion allows at most {KAPPA_MAX} steps")));
                }
            }
            _ => {
                return Err(Error::config(
                    "world.kind",
                    format!("does not match paradigm {}", self.paradigm),
                ))
            }
        }
        if !(0.0..=1.0).contains(&self.smoothing_beta) {
            return Err(Error::config("smoothing_beta", "must lie in [0, 1]"));
        }
        self.agent.validate()?;
        self.ppo.validate()?;
        self.reward.validate()?;
        self.refine.validate(self.paradigm)?;
        self.blend.validate()?;
        if let Some(s) = &self.schedule {
            if s.paradigm != self.paradigm {
                return Err(Error::config("schedule.paradigm", "must match the run paradigm"));
            }
            s.validate()?;
        }
        if self.reward.kind == RewardKind::Metric {
            if self.paradigm.is_discrete() {
                return Err(Error::config("reward.kind", "the metric reward needs a continuous world"));
            }
            if self.agent.adaptive {
                return Err(Error::config(
                    "agent.adaptive",
                    "the metric reward is batch-level and needs a non-adaptive agent",
                ));
            }
        }
        if !(self.eval.coverage_radius > 0.0) {
            return Err(Error::config("eval.coverage_radius", "must be positive"));
        }
        Ok(())
    }

    /// Builds the world and action pipeline.
    pub fn env(&self) -> Result<Env> {
        self.validate()?;
        let world = World::build(self.world_config()?)?;
        let vocab = world.as_discrete().map(|d| d.vocab()).unwrap_or(0);
        let init = if self.init_from_schedule {
            self.schedule.as_ref()
        } else {
            None
        };
        let activator = Activator::new(self.paradigm, self.agent.action_mode, self.horizon, vocab, init)?;
        Ok(Env {
            world,
            paradigm: self.paradigm,
            horizon: self.horizon,
            activator,
            beta: self.smoothing_beta,
        })
    }
}
