//! The adaptive policy: state features, a shared trunk with a raw-action
//! mean head and a value head, and the Gaussian exploration wrapper.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, GradVector};
use crate::samplers::{Paradigm, Payload, State};
use crate::transforms::ActionMode;
use crate::worlds::World;

/// Feature magnitudes are clipped to this bound.
pub const FEATURE_BOUND: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Exploration standard deviation.
    pub sigma: f64,
    /// Feed the intermediate sample to the policy.
    pub adaptive: bool,
    /// Condition on the generation step (input one-hot plus per-step gain
    /// and shift on the first hidden layer).
    pub step_cond: bool,
    pub action_mode: ActionMode,
    /// Scale of the random output-layer initialization.
    pub output_gain: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            sigma: 0.6,
            adaptive: true,
            step_cond: true,
            action_mode: ActionMode::Activate,
            output_gain: 0.01,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("agent.hidden", "needs at least one positive width"));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::config("agent.sigma", "must be positive"));
        }
        if !(self.output_gain.is_finite() && self.output_gain >= 0.0) {
            return Err(Error::config("agent.output_gain", "must be non-negative"));
        }
        Ok(())
    }
}

/// Slot layout of the feature vector for one `(paradigm, T, world)` setup.
///
/// `[t/T, step one-hot (T), class one-hot (C), payload]` where the payload is
/// `x (2), kappa / kappa_scale (1)` for ODE paradigms,
/// `mask fraction, committed histogram (V), mean commit log-prob / ln V` for
/// MaskGIT, and the `G x V` prefix one-hot for autoregressive sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub paradigm: Paradigm,
    pub horizon: usize,
    pub classes: usize,
    pub grid: usize,
    pub vocab: usize,
    pub adaptive: bool,
    pub step_cond: bool,
}

impl FeatureLayout {
    pub fn new(paradigm: Paradigm, horizon: usize, world: &World, config: &AgentConfig) -> Self {
        let (grid, vocab) = match world {
            World::Discrete(w) => (w.grid(), w.vocab()),
            World::Gmm(_) => (0, 0),
        };
        FeatureLayout {
            paradigm,
            horizon,
            classes: world.class_count(),
            grid,
            vocab,
            adaptive: config.adaptive,
            step_cond: config.step_cond,
        }
    }

    pub fn class_offset(&self) -> usize {
        1 + self.horizon
    }

    pub fn payload_offset(&self) -> usize {
        self.class_offset() + self.classes
    }

    pub fn payload_len(&self) -> usize {
        match self.paradigm {
            Paradigm::Diffusion | Paradigm::Flow => 3,
            Paradigm::Maskgit => self.vocab + 2,
            Paradigm::Ar => self.grid * self.vocab,
        }
    }

    pub fn len(&self) -> usize {
        self.payload_offset() + self.payload_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Feature vector of `state`. Terminal states (`t == T`) are accepted for
    /// value estimates and get an all-zero step one-hot.
    pub fn featurize(&self, state: &State) -> Vec<f64> {
        let mut f = vec![0.0; self.len()];
        if self.step_cond {
            f[0] = state.t as f64 / self.horizon as f64;
            if state.t < self.horizon {
                f[1 + state.t] = 1.0;
            }
        }
        if state.class < self.classes {
            f[self.class_offset() + state.class] = 1.0;
        }
        if !self.adaptive {
            return f;
        }
        let p = &mut f[self.payload_offset()..];
        match &state.payload {
            Payload::Point { x, kappa } => {
                p[0] = x[0];
                p[1] = x[1];
                p[2] = kappa / self.paradigm.kappa_scale();
            }
            Payload::Tokens { tokens, commit_logp } => match self.paradigm {
                Paradigm::Maskgit => {
                    let g = tokens.len().max(1) as f64;
                    let mut committed = 0usize;
                    let mut logp = 0.0;
                    for (tok, lp) in tokens.iter().zip(commit_logp) {
                        if let Some(v) = tok {
                            committed += 1;
                            logp += lp;
                            if *v < self.vocab {
                                p[1 + v] += 1.0 / g;
                            }
                        }
                    }
                    p[0] = (tokens.len() - committed) as f64 / g;
                    if committed > 0 && self.vocab > 1 {
                        p[1 + self.vocab] = logp / committed as f64 / (self.vocab as f64).ln();
                    }
                }
                _ => {
                    for (i, tok) in tokens.iter().enumerate() {
                        if let Some(v) = tok {
                            if i < self.grid && *v < self.vocab {
                                p[i * self.vocab + v] = 1.0;
                            }
                        }
                    }
                }
            },
        }
        for v in p.iter_mut() {
            *v = if v.is_finite() {
                v.clamp(-FEATURE_BOUND, FEATURE_BOUND)
            } else {
                0.0
            };
        }
        f
    }
}

/// Log-density of `raw` under `N(mean, sigma^2 I)`.
pub fn gaussian_log_prob(mean: &[f64], raw: &[f64], sigma: f64) -> f64 {
    let d = mean.len() as f64;
    let sq: f64 = mean
        .iter()
        .zip(raw)
        .map(|(m, a)| {
            let z = (a - m) / sigma;
            z * z
        })
        .sum();
    -0.5 * sq - d * sigma.ln() - 0.5 * d * (2.0 * PI).ln()
}

/// Policy and value heads on one trunk. The network output is
/// `[raw action mean (dim), value]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyAgent {
    net: DenseNet,
    layout: FeatureLayout,
    sigma: f64,
}

impl PolicyAgent {
    /// All-zero parameters: zero raw action and zero value everywhere.
    pub fn zeros(layout: FeatureLayout, config: &AgentConfig) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![layout.len()];
        sizes.extend(&config.hidden);
        sizes.push(layout.paradigm.action_dim() + 1);
        let modulation = config.step_cond.then_some(layout.horizon);
        let net = DenseNet::zeros(&sizes, config.activation, modulation)?;
        Ok(PolicyAgent {
            net,
            layout,
            sigma: config.sigma,
        })
    }

    /// Xavier-initialized trunk with a small output layer, so the initial
    /// raw means sit near zero.
    pub fn init<R: Rng + ?Sized>(layout: FeatureLayout, config: &AgentConfig, rng: &mut R) -> Result<Self> {
        let mut agent = Self::zeros(layout, config)?;
        agent.net.init_random(rng, config.output_gain);
        Ok(agent)
    }

    pub fn from_net(net: DenseNet, layout: FeatureLayout, sigma: f64) -> Result<Self> {
        if net.input_len() != layout.len() || net.output_len() != layout.paradigm.action_dim() + 1 {
            return Err(Error::Dimension {
                context: "agent network shape",
                expected: layout.len(),
                got: net.input_len(),
            });
        }
        Ok(PolicyAgent { net, layout, sigma })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn action_dim(&self) -> usize {
        self.layout.paradigm.action_dim()
    }

    pub fn featurize(&self, state: &State) -> Vec<f64> {
        self.layout.featurize(state)
    }

    fn step_arg(&self, t: usize) -> Option<usize> {
        self.net
            .modulation_steps()
            .map(|steps| t.min(steps.saturating_sub(1)))
    }

    /// Raw action mean and value estimate.
    pub fn evaluate(&self, features: &[f64], t: usize) -> Result<(Vec<f64>, f64)> {
        let mut out = self.net.forward(features, self.step_arg(t))?;
        let value = out.pop().unwrap_or(0.0);
        Ok((out, value))
    }

    pub fn policy_mean(&self, features: &[f64], t: usize) -> Result<Vec<f64>> {
        Ok(self.evaluate(features, t)?.0)
    }

    pub fn value(&self, features: &[f64], t: usize) -> Result<f64> {
        Ok(self.evaluate(features, t)?.1)
    }

    /// Accumulates the gradient of `<mean, d_mean> + value * d_value` into `grad`.
    pub fn backward_into(
        &self,
        features: &[f64],
        t: usize,
        d_mean: &[f64],
        d_value: f64,
        grad: &mut GradVector,
    ) -> Result<(Vec<f64>, f64)> {
        let mut cot = d_mean.to_vec();
        cot.push(d_value);
        let mut out = self.net.backward_into(features, self.step_arg(t), &cot, grad)?;
        let value = out.pop().unwrap_or(0.0);
        Ok((out, value))
    }

    /// Draws `mean + sigma z`. In inference mode the mean itself is returned
    /// with log-probability 0.
    pub fn sample_action<R: Rng + ?Sized>(&self, mean: &[f64], inference: bool, rng: &mut R) -> (Vec<f64>, f64) {
        if inference {
            return (mean.to_vec(), 0.0);
        }
        let raw: Vec<f64> = mean
            .iter()
            .map(|m| m + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = gaussian_log_prob(mean, &raw, self.sigma);
        (raw, lp)
    }

    pub fn log_prob(&self, mean: &[f64], raw: &[f64]) -> f64 {
        gaussian_log_prob(mean, raw, self.sigma)
    }

    /// SHA-256 over the parameter bit patterns.
    pub fn param_hash(&self) -> String {
        param_hash(self.net.params())
    }
}

pub fn param_hash(params: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
