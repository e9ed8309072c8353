//! Inference-time refinement: best-of-(M+1) generations ranked by the
//! discriminator, and value-guided lookahead over stochastic transitions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::PolicyAgent;
use crate::error::{Error, Result};
use crate::rewards::RewardModel;
use crate::rl::{derive_seed, rollout, tag, Control, Env, RolloutOptions, TrajectoryRng};
use crate::samplers::{transition, Action, Paradigm, State};
use crate::worlds::Sample;

/// How a lookahead step picks among its candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Highest value estimate, lowest index on ties.
    #[default]
    Value,
    /// Uniformly random candidate (comparison baseline).
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lookahead {
    pub k: usize,
    pub selection: Selection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Extra trials; `M + 1` generations run in total.
    pub m: usize,
    /// Candidates per lookahead step.
    pub k: usize,
    pub lookahead: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            m: 3,
            k: 2,
            lookahead: false,
        }
    }
}

const DETERMINISTIC_REASON: &str =
    "lookahead needs stochastic transitions; the ODE state transition is deterministic, use repeated sampling only";

impl RefineConfig {
    pub fn validate(&self, paradigm: Paradigm) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("refine.k", "must be at least 1"));
        }
        if self.lookahead && !paradigm.is_stochastic() {
            return Err(Error::config("refine.lookahead", format!("{paradigm}: {DETERMINISTIC_REASON}")));
        }
        Ok(())
    }

    pub fn lookahead(&self) -> Option<Lookahead> {
        (self.lookahead && self.k > 1).then_some(Lookahead {
            k: self.k,
            selection: Selection::Value,
        })
    }
}

/// Draws `k` candidate next states with their value estimates. Candidate 0
/// consumes the trajectory's main environment stream; the others use
/// per-step sub-streams.
pub fn lookahead_candidates(
    env: &Env,
    state: &State,
    action: &Action,
    agent: &PolicyAgent,
    k: usize,
    rng: &mut TrajectoryRng,
) -> Result<Vec<(State, f64)>> {
    if !env.paradigm.is_stochastic() {
        return Err(Error::Unsupported(format!("{}: {DETERMINISTIC_REASON}", env.paradigm)));
    }
    if k == 0 {
        return Err(Error::precondition("lookahead needs at least one candidate"));
    }
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let next = if i == 0 {
            transition(env.paradigm, state, action, &env.world, &mut rng.env)?
        } else {
            let mut sub = rng.branch(state.t, i);
            transition(env.paradigm, state, action, &env.world, &mut sub)?
        };
        let v = agent.value(&agent.featurize(&next), next.t)?;
        out.push((next, v));
    }
    Ok(out)
}

/// One lookahead transition.
pub fn lookahead_step(
    env: &Env,
    state: &State,
    action: &Action,
    agent: &PolicyAgent,
    lookahead: Lookahead,
    rng: &mut TrajectoryRng,
) -> Result<State> {
    let cands = lookahead_candidates(env, state, action, agent, lookahead.k, rng)?;
    let pick = match lookahead.selection {
        Selection::Value => {
            let mut best = 0;
            for (i, (_, v)) in cands.iter().enumerate() {
                if *v > cands[best].1 {
                    best = i;
                }
            }
            best
        }
        Selection::Random => rng.branch(state.t, usize::MAX).random_range(0..cands.len()),
    };
    Ok(cands.into_iter().nth(pick).expect("pick is in range").0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub sample: Sample,
    pub reward: f64,
    /// Discriminator reward of every trial, in order.
    pub trial_rewards: Vec<f64>,
    pub best_trial: usize,
}

/// Stream seed of trial `i`; trial 0 is the unrefined generation's stream.
pub fn trial_seed(seed: u64, i: usize) -> u64 {
    if i == 0 {
        seed
    } else {
        derive_seed(&[seed, tag::REFINE, i as u64])
    }
}

/// Runs `M + 1` inference generations (with lookahead when enabled) and keeps
/// the one the discriminator scores highest; earlier trials win ties.
pub fn refine_generate(
    env: &Env,
    control: Control<'_>,
    reward_model: &RewardModel,
    config: &RefineConfig,
    class: usize,
    seed: u64,
) -> Result<Refined> {
    config.validate(env.paradigm)?;
    let options = RolloutOptions {
        inference: true,
        lookahead: config.lookahead(),
    };
    let mut best: Option<(Sample, f64, usize)> = None;
    let mut trial_rewards = Vec::with_capacity(config.m + 1);
    for i in 0..=config.m {
        let mut rng = TrajectoryRng::new(trial_seed(seed, i));
        let traj = rollout(env, control, class, &options, &mut rng)?;
        let r = reward_model.reward(&env.world, &traj.sample, class)?;
        trial_rewards.push(r);
        if best.as_ref().is_none_or(|(_, b, _)| r > *b) {
            best = Some((traj.sample, r, i));
        }
    }
    let (sample, reward, best_trial) = best.expect("at least one trial");
    Ok(Refined {
        sample,
        reward,
        trial_rewards,
        best_trial,
    })
}
