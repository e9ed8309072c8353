//! Fidelity/diversity blending: a second policy whose raw actions are mixed
//! with a frozen original policy, trained on a mixed reward.

use serde::{Deserialize, Serialize};

use crate::agent::PolicyAgent;
use crate::error::{Error, Result};
use crate::rewards::{FidelityCalibration, RewardModel};
use crate::rl::{IterationLog, Trainer};

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::precondition(format!("blend weight {lambda} is outside [0, 1]")))
    }
}

/// `(1 - lambda) a + lambda a'` in raw action space.
pub fn blend_action(a: &[f64], a_prime: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if a.len() != a_prime.len() {
        return Err(Error::Dimension {
            context: "blended actions",
            expected: a.len(),
            got: a_prime.len(),
        });
    }
    if lambda == 0.0 {
        return Ok(a.to_vec());
    }
    if lambda == 1.0 {
        return Ok(a_prime.to_vec());
    }
    Ok(a.iter()
        .zip(a_prime)
        .map(|(x, y)| (1.0 - lambda) * x + lambda * y)
        .collect())
}

/// `(1 - lambda) r + lambda r'`.
pub fn blend_reward(r: f64, r_prime: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if lambda == 0.0 {
        return Ok(r);
    }
    if lambda == 1.0 {
        return Ok(r_prime);
    }
    Ok((1.0 - lambda) * r + lambda * r_prime)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlendConfig {
    /// Training iterations for the fidelity policy.
    pub iterations: usize,
    /// Blend weights evaluated by the sweep command.
    pub sweep: Vec<f64>,
    /// Radius multiplier for mode coverage.
    pub coverage_radius: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig {
            iterations: 200,
            sweep: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            coverage_radius: 1.0,
        }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.sweep.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::config("blend.sweep", format!("{l} is outside [0, 1]")));
        }
        if !(self.coverage_radius > 0.0) {
            return Err(Error::config("blend.coverage_radius", "must be positive"));
        }
        Ok(())
    }
}

/// Result of fidelity-policy training.
#[derive(Debug, Clone)]
pub struct FidelityRun {
    pub fidelity_agent: PolicyAgent,
    pub logs: Vec<IterationLog>,
    pub original_hash_before: String,
    pub original_hash_after: String,
    pub reward_hash_before: String,
    pub reward_hash_after: String,
}

/// Trains a fidelity policy next to the frozen original agent and
/// discriminator held by `trainer`. The trainer's agent is swapped for a
/// fresh fidelity agent; every trajectory draws its own blend weight.
pub fn train_fidelity_policy(
    trainer: &mut Trainer,
    calibration: FidelityCalibration,
    iterations: usize,
) -> Result<FidelityRun> {
    let original = trainer.agent().clone();
    let reward_model: RewardModel = trainer
        .reward_model()
        .cloned()
        .ok_or_else(|| Error::precondition("fidelity training needs the adversarial reward model"))?;
    let original_hash_before = original.param_hash();
    let reward_hash_before = crate::agent::param_hash(reward_model.params());
    trainer.start_blend(original, calibration)?;
    let mut logs = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        logs.push(trainer.step()?);
    }
    let base = trainer
        .blend_base()
        .ok_or_else(|| Error::precondition("blend state lost"))?;
    Ok(FidelityRun {
        fidelity_agent: trainer.agent().clone(),
        logs,
        original_hash_before,
        original_hash_after: base.param_hash(),
        reward_hash_before,
        reward_hash_after: crate::agent::param_hash(
            trainer.reward_model().map(|m| m.params()).unwrap_or(&[]),
        ),
    })
}
