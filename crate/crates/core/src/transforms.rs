//! From raw policy output to executed action: hand-crafted baseline
//! schedules, EMA smoothing of the raw sequence, and range-mapping
//! activations (smooth or hard clamp).
//!
//! The executed action at step `t` is
//! `activate(smooth(raw)_t + init_offset_t)`, where the offset encodes a
//! baseline schedule so that an all-zero network reproduces it.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samplers::{Action, Paradigm};
use crate::worlds::{DELTA, KAPPA_MAX};

/// One scheduling rule for one policy coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum Rule {
    /// `C`
    Constant { c: f64 },
    /// `C * t / T`
    Linear { c: f64 },
    /// `C * (1 - t / T)`
    LinearDecay { c: f64 },
    /// `cos(0.5 * pi * t / T)`
    Cosine,
    /// `2 * arccos(t / T) / pi`
    Arccos,
    /// `0.5 + 0.8 * (1 - t / T)`
    TemperatureDecay,
    /// `C * (1 - cos(pi * (t / T)^C')) / 2`
    CosinePower { c: f64, c2: f64 },
    /// `C * (1 - cos(pi * (kappa_t / kappa_max)^C')) / 2`
    CosinePowerKappa { c: f64, c2: f64 },
    /// Diffusion: `floor((1 - t/T) * kappa_max)`; flow: `1 - t/T`.
    UniformKappa,
    /// Diffusion: `floor((1 - t/T)^2 * kappa_max)`; flow: `(1 - t/T)^2`.
    QuadraticKappa,
}

impl Rule {
    fn is_kappa(self) -> bool {
        matches!(self, Rule::UniformKappa | Rule::QuadraticKappa)
    }

    /// Value at step `t`; `kappa_frac` is `kappa_t / kappa_max` when the
    /// rule depends on it.
    pub fn eval(self, t: usize, horizon: usize, kappa_frac: f64) -> f64 {
        let r = t as f64 / horizon as f64;
        match self {
            Rule::Constant { c } => c,
            Rule::Linear { c } => c * r,
            Rule::LinearDecay { c } => c * (1.0 - r),
            Rule::Cosine => (0.5 * PI * r).cos(),
            Rule::Arccos => 2.0 * r.clamp(0.0, 1.0).acos() / PI,
            Rule::TemperatureDecay => 0.5 + 0.8 * (1.0 - r),
            Rule::CosinePower { c, c2 } => c * (1.0 - (PI * r.powf(c2)).cos()) / 2.0,
            Rule::CosinePowerKappa { c, c2 } => c * (1.0 - (PI * kappa_frac.powf(c2)).cos()) / 2.0,
            Rule::UniformKappa => 1.0 - r,
            Rule::QuadraticKappa => (1.0 - r).powi(2),
        }
    }

    /// Timestep at step `t` on the paradigm's grid.
    pub fn kappa(self, paradigm: Paradigm, t: usize, horizon: usize) -> f64 {
        let frac = self.eval(t, horizon, 0.0);
        match paradigm {
            Paradigm::Diffusion => (frac * KAPPA_MAX as f64 + 1e-9).floor(),
            _ => frac,
        }
    }
}

/// Static per-step policy: one rule per action coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub paradigm: Paradigm,
    pub rules: Vec<Rule>,
}

impl Schedule {
    /// Common defaults: cosine masking, unit temperature, linear mask
    /// temperature and guidance; neutral AR truncation; uniform timesteps.
    pub fn default_for(paradigm: Paradigm, vocab: usize) -> Self {
        let rules = match paradigm {
            Paradigm::Maskgit => vec![
                Rule::Cosine,
                Rule::Constant { c: 1.0 },
                Rule::LinearDecay { c: 1.0 },
                Rule::Linear { c: 0.5 },
            ],
            Paradigm::Ar => vec![
                Rule::Constant { c: 1.0 },
                Rule::Constant { c: 0.0 },
                Rule::Constant { c: vocab as f64 },
                Rule::Constant { c: 1.0 },
            ],
            Paradigm::Diffusion | Paradigm::Flow => {
                vec![Rule::UniformKappa, Rule::Constant { c: 0.0 }]
            }
        };
        Schedule { paradigm, rules }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.paradigm.action_dim();
        if self.rules.len() != dim {
            return Err(Error::config(
                "schedule.rules",
                format!("{} needs {dim} rules, got {}", self.paradigm, self.rules.len()),
            ));
        }
        let ode = matches!(self.paradigm, Paradigm::Diffusion | Paradigm::Flow);
        for (i, rule) in self.rules.iter().enumerate() {
            let kappa_slot = ode && i == 0;
            let ok = if kappa_slot {
                rule.is_kappa()
            } else {
                !rule.is_kappa()
                    && (!matches!(rule, Rule::CosinePowerKappa { .. }) || self.paradigm == Paradigm::Diffusion)
                    && (!matches!(rule, Rule::Cosine | Rule::Arccos | Rule::TemperatureDecay)
                        || self.paradigm == Paradigm::Maskgit)
            };
            if !ok {
                return Err(Error::config(
                    format!("schedule.rules[{i}]"),
                    format!("rule {rule:?} is not valid for {} coordinate {i}", self.paradigm),
                ));
            }
        }
        Ok(())
    }
}

/// Evaluates a static schedule at step `t` (`0 <= t < T`).
pub fn baseline_action(schedule: &Schedule, t: usize, horizon: usize, vocab: usize) -> Result<Action> {
    schedule.validate()?;
    if t >= horizon {
        return Err(Error::precondition(format!("step {t} outside horizon {horizon}")));
    }
    let r = &schedule.rules;
    Ok(match schedule.paradigm {
        Paradigm::Maskgit => Action::Maskgit {
            mask_ratio: r[0].eval(t, horizon, 0.0).clamp(0.0, 1.0),
            temperature: r[1].eval(t, horizon, 0.0).max(0.0),
            mask_temperature: r[2].eval(t, horizon, 0.0).max(0.0),
            guidance: r[3].eval(t, horizon, 0.0).max(0.0),
        },
        Paradigm::Ar => Action::Ar {
            temperature: r[0].eval(t, horizon, 0.0).max(0.0),
            guidance: r[1].eval(t, horizon, 0.0).max(0.0),
            top_k: (r[2].eval(t, horizon, 0.0).round() as usize).clamp(1, vocab.max(1)),
            top_p: r[3].eval(t, horizon, 0.0).clamp(0.0, 1.0),
        },
        Paradigm::Diffusion | Paradigm::Flow => {
            let p = schedule.paradigm;
            let kappa_t = r[0].kappa(p, t, horizon);
            let kappa_next = if t + 1 == horizon {
                0.0
            } else {
                r[0].kappa(p, t + 1, horizon)
            };
            Action::Ode {
                kappa_next,
                guidance: r[1].eval(t, horizon, kappa_t / p.kappa_scale()).max(0.0),
            }
        }
    })
}

/// Causal EMA filter `a_t = beta a_{t-1} + (1 - beta) raw_t`, with the first
/// raw vector passed through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoother {
    beta: f64,
    prev: Option<Vec<f64>>,
}

impl Smoother {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config("smoothing_beta", format!("{beta} is outside [0, 1]")));
        }
        Ok(Smoother { beta, prev: None })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn smooth(&mut self, raw: &[f64]) -> Vec<f64> {
        let out: Vec<f64> = match &self.prev {
            None => raw.to_vec(),
            Some(prev) => prev
                .iter()
                .zip(raw)
                .map(|(p, r)| self.beta * p + (1.0 - self.beta) * r)
                .collect(),
        };
        self.prev = Some(out.clone());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    /// sigmoid / softplus range maps.
    #[default]
    Activate,
    /// Hard clipping to the valid ranges.
    Clamp,
}

/// Per-step information the range maps need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationContext {
    pub t: usize,
    pub horizon: usize,
    pub vocab: usize,
    /// Current timestep (ODE paradigms only).
    pub kappa: f64,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Maps a timestep fraction in `[0, 1]` to the next timestep, keeping a
/// strictly decreasing sequence that ends at zero on the last step.
fn next_kappa(paradigm: Paradigm, frac: f64, ctx: &ActivationContext) -> f64 {
    if ctx.t + 1 >= ctx.horizon {
        return 0.0;
    }
    let remaining = (ctx.horizon - ctx.t - 1) as f64;
    match paradigm {
        Paradigm::Diffusion => (ctx.kappa * frac).round().clamp(remaining, ctx.kappa - 1.0),
        _ => (ctx.kappa * frac).clamp(DELTA * remaining, ctx.kappa * (1.0 - 1e-9)),
    }
}

fn build_action(paradigm: Paradigm, v: [f64; 4], ctx: &ActivationContext) -> Action {
    match paradigm {
        Paradigm::Maskgit => Action::Maskgit {
            mask_ratio: v[0],
            temperature: v[1],
            mask_temperature: v[2],
            guidance: v[3],
        },
        Paradigm::Ar => Action::Ar {
            temperature: v[0],
            guidance: v[1],
            top_k: (v[2] as usize).clamp(1, ctx.vocab.max(1)),
            top_p: v[3],
        },
        Paradigm::Diffusion | Paradigm::Flow => Action::Ode {
            kappa_next: next_kappa(paradigm, v[0], ctx),
            guidance: v[1],
        },
    }
}

/// Smooth range maps: sigmoid for ratios, softplus for temperatures and
/// guidance, `round(1 + softplus)` for top-k, and a sigmoid fraction of the
/// current timestep for ODE paradigms.
pub fn activate(raw: &[f64], paradigm: Paradigm, ctx: &ActivationContext) -> Action {
    let mut v = [0.0; 4];
    match paradigm {
        Paradigm::Maskgit => {
            v = [sigmoid(raw[0]), softplus(raw[1]), softplus(raw[2]), softplus(raw[3])];
        }
        Paradigm::Ar => {
            v = [
                softplus(raw[0]),
                softplus(raw[1]),
                (1.0 + softplus(raw[2])).round(),
                sigmoid(raw[3]),
            ];
        }
        Paradigm::Diffusion | Paradigm::Flow => {
            v[0] = sigmoid(raw[0]);
            v[1] = softplus(raw[1]);
        }
    }
    build_action(paradigm, v, ctx)
}

/// Hard-clipping alternative to [`activate`].
pub fn clamp_variant(raw: &[f64], paradigm: Paradigm, ctx: &ActivationContext) -> Action {
    let mut v = [0.0; 4];
    match paradigm {
        Paradigm::Maskgit => {
            v = [raw[0].clamp(0.0, 1.0), raw[1].max(0.0), raw[2].max(0.0), raw[3].max(0.0)];
        }
        Paradigm::Ar => {
            v = [
                raw[0].max(0.0),
                raw[1].max(0.0),
                raw[2].round().clamp(1.0, ctx.vocab.max(1) as f64),
                raw[3].clamp(0.0, 1.0),
            ];
        }
        Paradigm::Diffusion | Paradigm::Flow => {
            v[0] = raw[0].clamp(0.0, 1.0);
            v[1] = raw[1].max(0.0);
        }
    }
    build_action(paradigm, v, ctx)
}

/// Turns smoothed raw vectors into actions, adding the per-step offsets that
/// encode the initialization schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Activator {
    paradigm: Paradigm,
    mode: ActionMode,
    vocab: usize,
    horizon: usize,
    offsets: Vec<Vec<f64>>,
}

impl Activator {
    /// `init` is the heuristic schedule to start from; `None` uses zero offsets.
    pub fn new(
        paradigm: Paradigm,
        mode: ActionMode,
        horizon: usize,
        vocab: usize,
        init: Option<&Schedule>,
    ) -> Result<Self> {
        let dim = paradigm.action_dim();
        let offsets = match init {
            None => vec![vec![0.0; dim]; horizon],
            Some(s) => {
                if s.paradigm != paradigm {
                    return Err(Error::config("schedule.paradigm", "must match the run paradigm"));
                }
                (0..horizon)
                    .map(|t| init_offsets(s, mode, t, horizon, vocab))
                    .collect::<Result<_>>()?
            }
        };
        Ok(Activator {
            paradigm,
            mode,
            vocab,
            horizon,
            offsets,
        })
    }

    pub fn paradigm(&self) -> Paradigm {
        self.paradigm
    }

    pub fn offsets(&self, t: usize) -> &[f64] {
        &self.offsets[t]
    }

    /// Action for step `t` from a smoothed raw vector. `kappa` is the current
    /// timestep for ODE paradigms.
    pub fn action(&self, smoothed: &[f64], t: usize, kappa: f64) -> Action {
        let shifted: Vec<f64> = smoothed
            .iter()
            .zip(&self.offsets[t])
            .map(|(a, b)| a + b)
            .collect();
        let ctx = ActivationContext {
            t,
            horizon: self.horizon,
            vocab: self.vocab,
            kappa,
        };
        match self.mode {
            ActionMode::Activate => activate(&shifted, self.paradigm, &ctx),
            ActionMode::Clamp => clamp_variant(&shifted, self.paradigm, &ctx),
        }
    }
}

/// Pre-activation values that reproduce the schedule's value at step `t`.
fn init_offsets(s: &Schedule, mode: ActionMode, t: usize, horizon: usize, vocab: usize) -> Result<Vec<f64>> {
    let base = baseline_action(s, t, horizon, vocab)?;
    let ratio = |v: f64| match mode {
        ActionMode::Activate => logit(v.clamp(0.02, 0.98)),
        ActionMode::Clamp => v,
    };
    let positive = |v: f64| match mode {
        ActionMode::Activate => softplus_inv(v.max(0.05)),
        ActionMode::Clamp => v,
    };
    Ok(match base {
        Action::Maskgit {
            mask_ratio,
            temperature,
            mask_temperature,
            guidance,
        } => vec![
            ratio(mask_ratio),
            positive(temperature),
            positive(mask_temperature),
            positive(guidance),
        ],
        Action::Ar {
            temperature,
            guidance,
            top_k,
            top_p,
        } => vec![
            positive(temperature),
            positive(guidance),
            match mode {
                ActionMode::Activate => softplus_inv((top_k as f64 - 1.0).max(0.05)),
                ActionMode::Clamp => top_k as f64,
            },
            ratio(top_p),
        ],
        Action::Ode {
            kappa_next,
            guidance,
        } => {
            let p = s.paradigm;
            let current = s.rules[0].kappa(p, t, horizon);
            let frac = if current > 0.0 { kappa_next / current } else { 0.0 };
            vec![ratio(frac), positive(guidance)]
        }
    })
}
