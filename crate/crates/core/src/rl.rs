//! Rollouts and PPO training with a terminal-only reward, alternating policy
//! and discriminator updates.
//!
//! Every random draw comes from a stream keyed by `(seed, iteration, role,
//! index)`, so a batch is identical however its rollouts are scheduled and a
//! resumed run continues exactly where it stopped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, FeatureLayout, PolicyAgent};
use crate::blend::{blend_action, blend_reward};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{adam_step, GradVector, OptState};
use crate::refine::{lookahead_step, Lookahead};
use crate::rewards::{
    disc_update, metric_reward, FidelityCalibration, ReferenceStats, RewardConfig, RewardKind, RewardModel,
};
use crate::samplers::{initial_state, transition, Action, Paradigm};
use crate::transforms::{Activator, Smoother};
use crate::worlds::{Sample, World};

/// Trajectories per parallel work unit; gradient partial sums are combined
/// in unit order.
const CHUNK: usize = 16;

pub(crate) mod tag {
    pub const INIT_AGENT: u64 = 1;
    pub const INIT_REWARD: u64 = 2;
    pub const CALIBRATION: u64 = 3;
    pub const ROLLOUT: u64 = 10;
    pub const FAKE: u64 = 11;
    pub const REAL: u64 = 12;
    pub const EVAL: u64 = 13;
    pub const REFINE: u64 = 14;
}

/// SplitMix64 over a sequence of words.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Independent random streams of one trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryRng {
    seed: u64,
    /// Exploration noise and blend weights.
    pub policy: ChaCha8Rng,
    /// Initial noise and sampler transitions.
    pub env: ChaCha8Rng,
}

impl TrajectoryRng {
    pub fn new(seed: u64) -> Self {
        TrajectoryRng {
            seed,
            policy: ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 1])),
            env: ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 2])),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sub-stream for lookahead candidate `k >= 1` at step `t`.
    pub fn branch(&self, t: usize, k: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 3, t as u64, k as u64]))
    }
}

/// Everything a rollout needs besides the policy.
#[derive(Debug, Clone)]
pub struct Env {
    pub world: World,
    pub paradigm: Paradigm,
    pub horizon: usize,
    pub activator: Activator,
    pub beta: f64,
}

impl Env {
    pub fn layout(&self, agent: &AgentConfig) -> FeatureLayout {
        FeatureLayout::new(self.paradigm, self.horizon, &self.world, agent)
    }
}

/// Who produces the executed raw actions.
#[derive(Debug, Clone, Copy)]
pub enum Control<'a> {
    Single(&'a PolicyAgent),
    /// `(1 - lambda) base + lambda learner`; only the learner explores.
    Blend {
        base: &'a PolicyAgent,
        learner: &'a PolicyAgent,
        lambda: f64,
    },
}

impl<'a> Control<'a> {
    pub fn learner(&self) -> &'a PolicyAgent {
        match *self {
            Control::Single(a) => a,
            Control::Blend { learner, .. } => learner,
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match *self {
            Control::Single(_) => None,
            Control::Blend { lambda, .. } => Some(lambda),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RolloutOptions {
    /// Use policy means without exploration noise.
    pub inference: bool,
    pub lookahead: Option<Lookahead>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub t: usize,
    pub features: Vec<f64>,
    /// Learner's raw mean.
    pub mean: Vec<f64>,
    /// Learner's raw draw; the log-probability refers to it.
    pub raw: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    /// Executed action after blending, smoothing and activation.
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub class: usize,
    pub steps: Vec<Step>,
    pub sample: Sample,
    /// Terminal reward; zero until a reward is assigned.
    pub reward: f64,
    pub lambda: Option<f64>,
}

/// Runs one generation from the initial state to `T`.
pub fn rollout(
    env: &Env,
    control: Control<'_>,
    class: usize,
    options: &RolloutOptions,
    rng: &mut TrajectoryRng,
) -> Result<Trajectory> {
    let learner = control.learner();
    let mut state = initial_state(env.paradigm, &env.world, class, env.horizon, &mut rng.env)?;
    let mut smoother = Smoother::new(env.beta)?;
    let mut steps = Vec::with_capacity(env.horizon);
    for t in 0..env.horizon {
        let features = learner.featurize(&state);
        let (mean, value) = learner.evaluate(&features, t)?;
        let (raw, log_prob) = learner.sample_action(&mean, options.inference, &mut rng.policy);
        let executed = match control {
            Control::Single(_) => raw.clone(),
            Control::Blend { base, lambda, .. } => {
                let base_mean = base.policy_mean(&base.featurize(&state), t)?;
                blend_action(&base_mean, &raw, lambda)?
            }
        };
        let smoothed = smoother.smooth(&executed);
        let action = env.activator.action(&smoothed, t, state.kappa().unwrap_or(0.0));
        let next = match options.lookahead {
            Some(la) if la.k > 1 => lookahead_step(env, &state, &action, learner, la, rng)?,
            _ => transition(env.paradigm, &state, &action, &env.world, &mut rng.env)?,
        };
        steps.push(Step {
            t,
            features,
            mean,
            raw,
            log_prob,
            value,
            action,
        });
        state = next;
    }
    let sample = state
        .sample()
        .ok_or_else(|| Error::precondition("generation ended with masked tokens"))?;
    Ok(Trajectory {
        class,
        steps,
        sample,
        reward: 0.0,
        lambda: control.lambda(),
    })
}

/// `R - V_t` for every step.
pub fn advantage(traj: &Trajectory) -> Vec<f64> {
    traj.steps.iter().map(|s| traj.reward - s.value).collect()
}

/// `min(rho A, clip(rho, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip_eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub batch: usize,
    pub updates_per_iter: usize,
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub normalize_advantages: bool,
    /// Iterations between evaluation snapshots (0 disables them).
    pub eval_every: usize,
    /// Inference samples per class for each snapshot.
    pub eval_samples: usize,
    /// Stop when the snapshot metric grows beyond ten times its first value.
    pub divergence_check: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            value_coef: 0.5,
            batch: 256,
            updates_per_iter: 5,
            iterations: 1000,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            normalize_advantages: false,
            eval_every: 50,
            eval_samples: 256,
            divergence_check: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0) {
            return Err(Error::config("ppo.clip_eps", "must be positive"));
        }
        if !(self.value_coef >= 0.0) {
            return Err(Error::config("ppo.value_coef", "must be non-negative"));
        }
        if self.batch == 0 {
            return Err(Error::config("ppo.batch", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("ppo.lr", "must be non-negative"));
        }
        for (name, b) in [("ppo.beta1", self.beta1), ("ppo.beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(name, "must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

/// Loss, gradient and diagnostics of one PPO evaluation.
#[derive(Debug, Clone)]
pub struct PpoLoss {
    pub loss: f64,
    pub grad: GradVector,
    /// Probability ratios of included steps, in batch order.
    pub ratios: Vec<f64>,
    pub clip_fraction: f64,
    /// Steps dropped for a non-finite ratio.
    pub excluded: usize,
}

/// Clipped-surrogate loss with value regression,
/// `-mean_t[min(rho A, clip(rho) A) - c (V - R)^2]`, and its exact gradient.
pub fn ppo_loss(
    agent: &PolicyAgent,
    batch: &[Trajectory],
    advantages: &[Vec<f64>],
    clip_eps: f64,
    value_coef: f64,
) -> Result<PpoLoss> {
    if batch.len() != advantages.len() {
        return Err(Error::Dimension {
            context: "advantages",
            expected: batch.len(),
            got: advantages.len(),
        });
    }
    let sigma2 = agent.sigma() * agent.sigma();
    let n_params = agent.params().len();
    struct Partial {
        loss: f64,
        grad: GradVector,
        ratios: Vec<f64>,
        clipped: usize,
        excluded: usize,
    }
    let partials: Vec<Result<Partial>> = batch
        .par_chunks(CHUNK)
        .zip(advantages.par_chunks(CHUNK))
        .map(|(trajs, advs)| {
            let mut p = Partial {
                loss: 0.0,
                grad: GradVector::zeros(n_params),
                ratios: Vec::new(),
                clipped: 0,
                excluded: 0,
            };
            for (traj, adv) in trajs.iter().zip(advs) {
                for (step, &a) in traj.steps.iter().zip(adv) {
                    let (mean, value) = agent.evaluate(&step.features, step.t)?;
                    let ratio = (agent.log_prob(&mean, &step.raw) - step.log_prob).exp();
                    if !ratio.is_finite() {
                        log::warn!("ppo: non-finite ratio excluded");
                        p.excluded += 1;
                        continue;
                    }
                    let unclipped = ratio * a;
                    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
                    let active = unclipped <= clipped;
                    if !active {
                        p.clipped += 1;
                    }
                    let dv = value - traj.reward;
                    p.loss += -(unclipped.min(clipped) - value_coef * dv * dv);
                    let d_mean: Vec<f64> = if active {
                        mean.iter()
                            .zip(&step.raw)
                            .map(|(m, x)| -a * ratio * (x - m) / sigma2)
                            .collect()
                    } else {
                        vec![0.0; mean.len()]
                    };
                    agent.backward_into(&step.features, step.t, &d_mean, 2.0 * value_coef * dv, &mut p.grad)?;
                    p.ratios.push(ratio);
                }
            }
            Ok(p)
        })
        .collect();
    let mut total = Partial {
        loss: 0.0,
        grad: GradVector::zeros(n_params),
        ratios: Vec::new(),
        clipped: 0,
        excluded: 0,
    };
    for p in partials {
        let p = p?;
        total.loss += p.loss;
        total.grad.add_assign(&p.grad);
        total.ratios.extend(p.ratios);
        total.clipped += p.clipped;
        total.excluded += p.excluded;
    }
    let n = total.ratios.len();
    if n == 0 {
        return Err(Error::precondition("no usable steps in the PPO batch"));
    }
    total.grad.scale(1.0 / n as f64);
    Ok(PpoLoss {
        loss: total.loss / n as f64,
        grad: total.grad,
        ratios: total.ratios,
        clip_fraction: total.clipped as f64 / n as f64,
        excluded: total.excluded,
    })
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_reward: f64,
    /// Loss of the first update of the iteration.
    pub ppo_loss: f64,
    /// Mean discriminator loss over the iteration's updates; NaN if none ran.
    pub disc_loss: f64,
    pub eval_metric: Option<f64>,
    pub clip_fraction: f64,
    pub aborted: usize,
}

impl IterationLog {
    pub const CSV_HEADER: &'static str = "iteration,mean_reward,ppo_loss,disc_loss,eval_metric";

    pub fn csv_row(&self) -> String {
        let metric = self.eval_metric.map(|m| format!("{m:e}")).unwrap_or_default();
        format!(
            "{},{:e},{:e},{:e},{}",
            self.iteration, self.mean_reward, self.ppo_loss, self.disc_loss, metric
        )
    }
}

/// Training state: agent, discriminator, optimizers and iteration counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub(crate) env: Env,
    pub(crate) ppo: PpoConfig,
    pub(crate) reward_cfg: RewardConfig,
    pub(crate) seed: u64,
    pub(crate) agent: PolicyAgent,
    pub(crate) agent_opt: OptState,
    pub(crate) reward_model: Option<RewardModel>,
    pub(crate) reward_opt: Option<OptState>,
    pub(crate) fidelity: Option<FidelityCalibration>,
    pub(crate) reference: Option<ReferenceStats>,
    pub(crate) blend_base: Option<PolicyAgent>,
    pub(crate) iteration: usize,
    pub(crate) start_metric: Option<f64>,
    pub(crate) coverage_radius: f64,
}

impl Trainer {
    pub fn new(env: Env, agent_cfg: &AgentConfig, ppo: PpoConfig, reward_cfg: RewardConfig, seed: u64) -> Result<Self> {
        ppo.validate()?;
        reward_cfg.validate()?;
        let layout = env.layout(agent_cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, tag::INIT_AGENT]));
        let agent = PolicyAgent::init(layout, agent_cfg, &mut rng)?;
        let agent_opt = OptState::new(agent.params().len(), ppo.lr, ppo.beta1, ppo.beta2);
        let (reward_model, reward_opt) = if reward_cfg.kind == RewardKind::Adversarial {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, tag::INIT_REWARD]));
            let m = RewardModel::init(&env.world, &reward_cfg.hidden, &mut rng)?;
            let opt = OptState::new(m.params().len(), reward_cfg.lr, reward_cfg.beta1, reward_cfg.beta2);
            (Some(m), Some(opt))
        } else {
            (None, None)
        };
        let fidelity = if reward_cfg.kind == RewardKind::FidelityProxy {
            Some(calibrate(&env.world, &reward_cfg, seed)?)
        } else {
            None
        };
        let reference = if reward_cfg.kind == RewardKind::Metric {
            if agent_cfg.adaptive {
                return Err(Error::config(
                    "agent.adaptive",
                    "the metric reward is shared across a batch and needs a non-adaptive agent",
                ));
            }
            if ppo.batch < metrics::FRECHET_MIN_SAMPLES * env.world.class_count() {
                return Err(Error::config(
                    "ppo.batch",
                    format!(
                        "the metric reward needs at least {} trajectories per class",
                        metrics::FRECHET_MIN_SAMPLES
                    ),
                ));
            }
            Some(ReferenceStats::exact(&env.world)?)
        } else {
            None
        };
        Ok(Trainer {
            env,
            ppo,
            reward_cfg,
            seed,
            agent,
            agent_opt,
            reward_model,
            reward_opt,
            fidelity,
            reference,
            blend_base: None,
            iteration: 0,
            start_metric: None,
            coverage_radius: 1.0,
        })
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn ppo(&self) -> &PpoConfig {
        &self.ppo
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn agent(&self) -> &PolicyAgent {
        &self.agent
    }

    pub fn agent_mut(&mut self) -> &mut PolicyAgent {
        &mut self.agent
    }

    pub fn reward_model(&self) -> Option<&RewardModel> {
        self.reward_model.as_ref()
    }

    pub fn blend_base(&self) -> Option<&PolicyAgent> {
        self.blend_base.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn set_coverage_radius(&mut self, r: f64) {
        self.coverage_radius = r;
    }

    /// Switches to fidelity-policy training: `base` is frozen, a fresh agent
    /// with the same architecture learns, and the discriminator is frozen.
    pub fn start_blend(&mut self, base: PolicyAgent, calibration: FidelityCalibration) -> Result<()> {
        if self.reward_model.is_none() {
            return Err(Error::precondition("blending needs the adversarial reward model"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, tag::INIT_AGENT, 1]));
        let mut learner = base.clone();
        let fresh = PolicyAgent::init(*base.layout(), &self.agent_config_of(&base), &mut rng)?;
        learner.params_mut().copy_from_slice(fresh.params());
        self.agent_opt = OptState::new(learner.params().len(), self.ppo.lr, self.ppo.beta1, self.ppo.beta2);
        self.agent = learner;
        self.blend_base = Some(base);
        self.fidelity = Some(calibration);
        self.iteration = 0;
        self.start_metric = None;
        Ok(())
    }

    fn agent_config_of(&self, agent: &PolicyAgent) -> AgentConfig {
        let net = agent.net();
        let sizes = net.sizes();
        AgentConfig {
            hidden: sizes[1..sizes.len() - 1].to_vec(),
            activation: net.activation(),
            sigma: agent.sigma(),
            adaptive: agent.layout().adaptive,
            step_cond: agent.layout().step_cond,
            ..AgentConfig::default()
        }
    }

    fn control<'a>(&'a self, lambda: f64) -> Control<'a> {
        match &self.blend_base {
            Some(base) => Control::Blend {
                base,
                learner: &self.agent,
                lambda,
            },
            None => Control::Single(&self.agent),
        }
    }

    fn collect(&self, role: u64, count: usize, inference: bool) -> Vec<Result<Trajectory>> {
        let classes = self.env.world.class_count();
        let it = self.iteration as u64;
        (0..count)
            .into_par_iter()
            .map(|j| {
                let mut rng = TrajectoryRng::new(derive_seed(&[self.seed, role, it, j as u64]));
                let lambda = if self.blend_base.is_some() {
                    rng.policy.random::<f64>()
                } else {
                    0.0
                };
                let options = RolloutOptions {
                    inference,
                    lookahead: None,
                };
                rollout(&self.env, self.control(lambda), j % classes, &options, &mut rng)
            })
            .collect()
    }

    fn assign_rewards(&self, batch: &mut [Trajectory]) -> Result<()> {
        let world = &self.env.world;
        if let Some(reference) = &self.reference {
            let classes = world.class_count();
            let mut total = 0.0;
            for c in 0..classes {
                let pts: Vec<_> = batch
                    .iter()
                    .filter(|t| t.class == c)
                    .filter_map(|t| t.sample.as_point())
                    .collect();
                total += metric_reward(&pts, reference, c)?;
            }
            let r = total / classes as f64;
            batch.iter_mut().for_each(|t| t.reward = r);
            return Ok(());
        }
        let rewards: Vec<Result<f64>> = batch
            .par_iter()
            .map(|t| {
                let adv = match &self.reward_model {
                    Some(m) => Some(m.reward(world, &t.sample, t.class)?),
                    None => None,
                };
                let fid = self.fidelity.as_ref().map(|f| f.reward(world, &t.sample, t.class));
                match (t.lambda, adv, fid) {
                    (Some(l), Some(r), Some(r2)) => blend_reward(r, r2, l),
                    (None, Some(r), _) => Ok(r),
                    (None, None, Some(r2)) => Ok(r2),
                    _ => Err(Error::precondition("no reward source configured")),
                }
            })
            .collect();
        for (t, r) in batch.iter_mut().zip(rewards) {
            t.reward = r?;
        }
        Ok(())
    }

    /// Runs one iteration: rollouts, policy updates, discriminator updates on
    /// fresh samples, and an optional evaluation snapshot.
    pub fn step(&mut self) -> Result<IterationLog> {
        let mut aborted = 0;
        let mut batch = Vec::with_capacity(self.ppo.batch);
        for r in self.collect(tag::ROLLOUT, self.ppo.batch, false) {
            match r {
                Ok(t) => batch.push(t),
                Err(e) => {
                    log::warn!("rollout aborted: {e}");
                    aborted += 1;
                }
            }
        }
        if batch.is_empty() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                reason: "every rollout in the batch was rejected".into(),
            });
        }
        self.assign_rewards(&mut batch)?;
        let mean_reward = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64;
        if !mean_reward.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                reason: format!("mean reward is {mean_reward}"),
            });
        }
        let mut advantages: Vec<Vec<f64>> = batch.iter().map(advantage).collect();
        if self.ppo.normalize_advantages {
            normalize(&mut advantages);
        }
        let mut first_loss = f64::NAN;
        let mut clip_fraction = 0.0;
        for u in 0..self.ppo.updates_per_iter {
            let out = ppo_loss(&self.agent, &batch, &advantages, self.ppo.clip_eps, self.ppo.value_coef)?;
            if u == 0 {
                first_loss = out.loss;
            }
            clip_fraction = out.clip_fraction;
            adam_step(self.agent.params_mut(), &out.grad, &mut self.agent_opt)?;
        }
        let disc_loss = self.update_discriminator()?;
        let eval_metric = self.snapshot()?;
        let log = IterationLog {
            iteration: self.iteration,
            mean_reward,
            ppo_loss: first_loss,
            disc_loss,
            eval_metric,
            clip_fraction,
            aborted,
        };
        self.iteration += 1;
        if let (Some(m), Some(start), true) = (eval_metric, self.start_metric, self.ppo.divergence_check) {
            if m > 10.0 * start.max(1e-3) {
                return Err(Error::Diverged {
                    iteration: log.iteration,
                    reason: format!("evaluation metric grew from {start} to {m}"),
                });
            }
        }
        if let (Some(m), None) = (eval_metric, self.start_metric) {
            self.start_metric = Some(m);
        }
        Ok(log)
    }

    fn update_discriminator(&mut self) -> Result<f64> {
        if self.blend_base.is_some() || self.reward_cfg.updates_per_iter == 0 {
            return Ok(f64::NAN);
        }
        let (Some(_), Some(_)) = (&self.reward_model, &self.reward_opt) else {
            return Ok(f64::NAN);
        };
        let n = self.reward_cfg.batch;
        let fake: Vec<(Sample, usize)> = self
            .collect(tag::FAKE, n, false)
            .into_iter()
            .filter_map(|r| r.ok().map(|t| (t.sample, t.class)))
            .collect();
        let classes = self.env.world.class_count();
        let it = self.iteration as u64;
        let real: Vec<(Sample, usize)> = (0..n)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, tag::REAL, it, j as u64]));
                (self.env.world.sample_target(j % classes, &mut rng), j % classes)
            })
            .collect();
        let model = self.reward_model.as_mut().expect("checked above");
        let opt = self.reward_opt.as_mut().expect("checked above");
        let mut total = 0.0;
        for _ in 0..self.reward_cfg.updates_per_iter {
            total += disc_update(model, &self.env.world, &real, &fake, opt, self.reward_cfg.label_smoothing)?.loss;
        }
        Ok(total / self.reward_cfg.updates_per_iter as f64)
    }

    fn snapshot(&self) -> Result<Option<f64>> {
        if self.ppo.eval_every == 0 || (self.iteration + 1) % self.ppo.eval_every != 0 {
            return Ok(None);
        }
        let seed = derive_seed(&[self.seed, tag::EVAL, self.iteration as u64]);
        let lambda = if self.blend_base.is_some() { 0.5 } else { 0.0 };
        let samples = generate(&self.env, self.control(lambda), self.ppo.eval_samples, seed, &RolloutOptions {
            inference: true,
            lookahead: None,
        })?;
        Ok(metrics::compute(&self.env.world, &samples, self.coverage_radius)?.headline())
    }

    /// Runs until `iterations` iterations have completed in total.
    pub fn train_until(&mut self, iterations: usize, mut on_iter: impl FnMut(&Trainer, &IterationLog) -> Result<()>) -> Result<Vec<IterationLog>> {
        let mut logs = Vec::new();
        while self.iteration < iterations {
            let log = self.step()?;
            on_iter(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

fn normalize(advantages: &mut [Vec<f64>]) {
    let all: Vec<f64> = advantages.iter().flatten().copied().collect();
    let n = all.len() as f64;
    if n < 2.0 {
        return;
    }
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    for a in advantages.iter_mut().flatten() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// Fidelity-proxy calibration with the run's dedicated stream.
pub fn calibrate(world: &World, reward_cfg: &RewardConfig, seed: u64) -> Result<FidelityCalibration> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, tag::CALIBRATION]));
    FidelityCalibration::calibrate(world, reward_cfg.calibration_samples, &mut rng)
}

/// `n_per_class` generations for every class, grouped by class. Trajectory
/// `j` of class `c` uses the stream `(seed, c, j)`.
pub fn generate(
    env: &Env,
    control: Control<'_>,
    n_per_class: usize,
    seed: u64,
    options: &RolloutOptions,
) -> Result<Vec<Vec<Sample>>> {
    (0..env.world.class_count())
        .map(|c| {
            (0..n_per_class)
                .into_par_iter()
                .map(|j| {
                    let mut rng = TrajectoryRng::new(derive_seed(&[seed, c as u64, j as u64]));
                    Ok(rollout(env, control, c, options, &mut rng)?.sample)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{ActionMode, Schedule};
    use crate::worlds::{DiscreteWorldConfig, GmmWorldConfig, WorldConfig};

    fn env(paradigm: Paradigm, horizon: usize) -> Env {
        let world = match paradigm {
            Paradigm::Maskgit | Paradigm::Ar => {
                World::build(&WorldConfig::Discrete(DiscreteWorldConfig::default())).unwrap()
            }
            _ => World::build(&WorldConfig::Gmm(GmmWorldConfig::default())).unwrap(),
        };
        let schedule = Schedule::default_for(paradigm, 3);
        Env {
            activator: Activator::new(paradigm, ActionMode::Activate, horizon, 3, Some(&schedule)).unwrap(),
            world,
            paradigm,
            horizon,
            beta: 0.8,
        }
    }

    #[test]
    fn seeds_differ_by_part() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
    }

    #[test]
    fn single_step_maskgit_commits_everything() {
        let e = env(Paradigm::Maskgit, 1);
        let cfg = AgentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let agent = PolicyAgent::init(e.layout(&cfg), &cfg, &mut rng).unwrap();
        let mut trng = TrajectoryRng::new(4);
        let t = rollout(&e, Control::Single(&agent), 1, &RolloutOptions::default(), &mut trng).unwrap();
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.sample.as_tokens().unwrap().len(), 4);
    }

    #[test]
    fn deterministic_inference_rollouts() {
        let e = env(Paradigm::Diffusion, 4);
        let cfg = AgentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let agent = PolicyAgent::init(e.layout(&cfg), &cfg, &mut rng).unwrap();
        let opts = RolloutOptions {
            inference: true,
            lookahead: None,
        };
        let a = rollout(&e, Control::Single(&agent), 2, &opts, &mut TrajectoryRng::new(9)).unwrap();
        let b = rollout(&e, Control::Single(&agent), 2, &opts, &mut TrajectoryRng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recorded_log_probs_replay() {
        let e = env(Paradigm::Ar, 4);
        let cfg = AgentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let agent = PolicyAgent::init(e.layout(&cfg), &cfg, &mut rng).unwrap();
        let t = rollout(&e, Control::Single(&agent), 0, &RolloutOptions::default(), &mut TrajectoryRng::new(3)).unwrap();
        for s in &t.steps {
            let sq: f64 = s.mean.iter().zip(&s.raw).map(|(m, x)| ((x - m) / 0.6).powi(2)).sum();
            let want = -0.5 * sq - 4.0 * 0.6f64.ln() - 2.0 * (2.0 * std::f64::consts::PI).ln();
            assert!((s.log_prob - want).abs() < 1e-10);
        }
    }

    #[test]
    fn advantage_cases() {
        let e = env(Paradigm::Flow, 2);
        let cfg = AgentConfig::default();
        let agent = PolicyAgent::zeros(e.layout(&cfg), &cfg).unwrap();
        let mut t = rollout(&e, Control::Single(&agent), 0, &RolloutOptions::default(), &mut TrajectoryRng::new(3)).unwrap();
        t.reward = 0.8;
        assert_eq!(advantage(&t), vec![0.8, 0.8]);
        for s in &mut t.steps {
            s.value = 0.8;
        }
        assert_eq!(advantage(&t), vec![0.0, 0.0]);
    }

    #[test]
    fn surrogate_clip_cases() {
        assert_eq!(clipped_surrogate(1.5, 2.0, 0.2), 1.2 * 2.0);
        assert_eq!(clipped_surrogate(1.0, -3.0, 0.2), -3.0);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_surrogate(0.5, 1.0, 0.2), 0.5);
    }

    #[test]
    fn ppo_gradient_matches_finite_differences() {
        let e = env(Paradigm::Diffusion, 3);
        let cfg = AgentConfig {
            hidden: vec![6, 5],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut agent = PolicyAgent::init(e.layout(&cfg), &cfg, &mut rng).unwrap();
        let mut batch: Vec<Trajectory> = (0..4)
            .map(|j| {
                rollout(&e, Control::Single(&agent), j % 4, &RolloutOptions::default(), &mut TrajectoryRng::new(j as u64))
                    .unwrap()
            })
            .collect();
        for (j, t) in batch.iter_mut().enumerate() {
            t.reward = 0.1 + 0.2 * j as f64;
        }
        let adv: Vec<Vec<f64>> = batch.iter().map(advantage).collect();
        // Move the policy so some ratios leave the clip range.
        for p in agent.params_mut().iter_mut().step_by(3) {
            *p += 0.05;
        }
        let out = ppo_loss(&agent, &batch, &adv, 0.2, 0.5).unwrap();
        let mut worst: f64 = 0.0;
        let scale = out.grad.max_abs();
        for i in 0..agent.params().len() {
            let h = 1e-6;
            let mut a = agent.clone();
            a.params_mut()[i] += h;
            let up = ppo_loss(&a, &batch, &adv, 0.2, 0.5).unwrap().loss;
            a.params_mut()[i] -= 2.0 * h;
            let down = ppo_loss(&a, &batch, &adv, 0.2, 0.5).unwrap().loss;
            let num = (up - down) / (2.0 * h);
            let err = (out.grad.0[i] - num).abs() / num.abs().max(1e-3 * scale).max(1e-12);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{worst}");
    }
}
