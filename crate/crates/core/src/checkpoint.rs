//! Versioned JSON checkpoints. Parameter and optimizer arrays are stored as
//! decimal strings with 17 significant digits, which round-trip every `f64`
//! exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::PolicyAgent;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, OptState};
use crate::rewards::RewardModel;
use crate::rl::Trainer;

pub const FORMAT_VERSION: u32 = 1;

fn encode(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| format!("{v:.16e}")).collect()
}

fn decode(values: &[String], what: &str) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| Error::Checkpoint(format!("{what}: bad number {s:?}: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetRecord {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub modulation_steps: Option<usize>,
    pub params: Vec<String>,
}

impl NetRecord {
    pub fn from_net(net: &DenseNet) -> Self {
        NetRecord {
            sizes: net.sizes().to_vec(),
            activation: net.activation(),
            modulation_steps: net.modulation_steps(),
            params: encode(net.params()),
        }
    }

    pub fn to_net(&self) -> Result<DenseNet> {
        let params = decode(&self.params, "network parameters")?;
        DenseNet::from_params(&self.sizes, self.activation, self.modulation_steps, params)
            .map_err(|e| Error::Checkpoint(format!("network record: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptRecord {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<String>,
    pub v: Vec<String>,
}

impl OptRecord {
    pub fn from_state(s: &OptState) -> Self {
        OptRecord {
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            step: s.step,
            m: encode(&s.m),
            v: encode(&s.v),
        }
    }

    pub fn to_state(&self) -> Result<OptState> {
        Ok(OptState {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            step: self.step,
            m: decode(&self.m, "first moments")?,
            v: decode(&self.v, "second moments")?,
        })
    }
}

/// Random state. Every stream is derived from `(seed, iteration, role,
/// index)`, so the seed and iteration counter determine it completely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngRecord {
    pub seed: u64,
    pub scheme: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub iteration: usize,
    pub start_metric: Option<f64>,
    pub rng: RngRecord,
    pub agent: NetRecord,
    pub agent_opt: OptRecord,
    pub reward_model: Option<NetRecord>,
    pub reward_opt: Option<OptRecord>,
    /// Present once a fidelity policy has been trained next to `agent`.
    pub fidelity_agent: Option<NetRecord>,
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, trainer: &Trainer) -> Self {
        // During blending the trainer's agent is the fidelity learner.
        let (agent, fidelity) = match trainer.blend_base() {
            Some(base) => (base, Some(NetRecord::from_net(trainer.agent().net()))),
            None => (trainer.agent(), None),
        };
        Checkpoint {
            version: FORMAT_VERSION,
            config: config.clone(),
            iteration: trainer.iteration,
            start_metric: trainer.start_metric,
            rng: RngRecord {
                seed: trainer.seed,
                scheme: "derived-chacha8".into(),
            },
            agent: NetRecord::from_net(agent.net()),
            agent_opt: OptRecord::from_state(&trainer.agent_opt),
            reward_model: trainer.reward_model.as_ref().map(|m| NetRecord::from_net(m.net())),
            reward_opt: trainer.reward_opt.as_ref().map(OptRecord::from_state),
            fidelity_agent: fidelity,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version:?}, expected {FORMAT_VERSION}"
            )));
        }
        let ckpt: Checkpoint = serde_json::from_value(value)?;
        ckpt.config.validate()?;
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn agent(&self) -> Result<PolicyAgent> {
        let env = self.config.env()?;
        PolicyAgent::from_net(self.agent.to_net()?, env.layout(&self.config.agent), self.config.agent.sigma)
    }

    pub fn fidelity_agent(&self) -> Result<Option<PolicyAgent>> {
        let Some(rec) = &self.fidelity_agent else {
            return Ok(None);
        };
        let env = self.config.env()?;
        Ok(Some(PolicyAgent::from_net(
            rec.to_net()?,
            env.layout(&self.config.agent),
            self.config.agent.sigma,
        )?))
    }

    pub fn reward_model(&self) -> Result<Option<RewardModel>> {
        let Some(rec) = &self.reward_model else {
            return Ok(None);
        };
        let env = self.config.env()?;
        Ok(Some(RewardModel::from_net(rec.to_net()?, &env.world)?))
    }

    /// Rebuilds a trainer that continues exactly where this checkpoint stopped.
    pub fn restore_trainer(&self) -> Result<Trainer> {
        if self.fidelity_agent.is_some() {
            return Err(Error::Checkpoint("blended checkpoints cannot resume training".into()));
        }
        let cfg = &self.config;
        let mut t = Trainer::new(cfg.env()?, &cfg.agent, cfg.ppo.clone(), cfg.reward.clone(), cfg.seed)?;
        t.coverage_radius = cfg.eval.coverage_radius;
        t.agent = self.agent()?;
        t.agent_opt = self.agent_opt.to_state()?;
        if t.agent_opt.m.len() != t.agent.params().len() {
            return Err(Error::Checkpoint("agent optimizer state has the wrong length".into()));
        }
        match (self.reward_model()?, &self.reward_opt) {
            (Some(m), Some(o)) => {
                t.reward_model = Some(m);
                t.reward_opt = Some(o.to_state()?);
            }
            (None, None) => {
                t.reward_model = None;
                t.reward_opt = None;
            }
            _ => return Err(Error::Checkpoint("reward model and optimizer must appear together".into())),
        }
        t.iteration = self.iteration;
        t.start_metric = self.start_metric;
        Ok(t)
    }
}

/// Writes through a temporary file in the same directory and renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::precondition(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
