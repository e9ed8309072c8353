//! Per-paradigm transition functions of the generation MDP.
//!
//! A [`State`] carries the generation step, the horizon and the
//! paradigm-specific intermediate sample. Transitions consume an activated
//! [`Action`] and an exact predictor from the world, with classifier-free
//! guidance mixing the class-conditional and class-marginal predictions.

use rand::Rng;
use rand_distr::{Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Vec2};
use crate::worlds::{alpha_bar, DiscreteWorld, GmmWorld, Sample, World, DELTA, KAPPA_MAX};

/// Temperatures below this are treated as greedy decoding.
pub const MIN_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Maskgit,
    Ar,
    Diffusion,
    Flow,
}

impl Paradigm {
    /// Number of raw policy outputs per step.
    pub fn action_dim(self) -> usize {
        match self {
            Paradigm::Maskgit | Paradigm::Ar => 4,
            Paradigm::Diffusion | Paradigm::Flow => 2,
        }
    }

    /// Whether transitions draw randomness.
    pub fn is_stochastic(self) -> bool {
        matches!(self, Paradigm::Maskgit | Paradigm::Ar)
    }

    pub fn is_discrete(self) -> bool {
        self.is_stochastic()
    }

    pub fn initial_kappa(self) -> f64 {
        match self {
            Paradigm::Diffusion => KAPPA_MAX as f64,
            Paradigm::Flow => 1.0,
            _ => 0.0,
        }
    }

    pub fn kappa_scale(self) -> f64 {
        self.initial_kappa().max(1.0)
    }
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Paradigm::Maskgit => "maskgit",
            Paradigm::Ar => "ar",
            Paradigm::Diffusion => "diffusion",
            Paradigm::Flow => "flow",
        };
        f.write_str(s)
    }
}

/// Executed per-step sampler parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Maskgit {
        mask_ratio: f64,
        temperature: f64,
        mask_temperature: f64,
        guidance: f64,
    },
    Ar {
        temperature: f64,
        guidance: f64,
        top_k: usize,
        top_p: f64,
    },
    Ode {
        kappa_next: f64,
        guidance: f64,
    },
}

impl Action {
    /// Flat numeric view, in the same coordinate order as raw actions.
    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            Action::Maskgit {
                mask_ratio,
                temperature,
                mask_temperature,
                guidance,
            } => vec![mask_ratio, temperature, mask_temperature, guidance],
            Action::Ar {
                temperature,
                guidance,
                top_k,
                top_p,
            } => vec![temperature, guidance, top_k as f64, top_p],
            Action::Ode {
                kappa_next,
                guidance,
            } => vec![kappa_next, guidance],
        }
    }

    /// Checks range membership; `vocab` bounds `top_k`.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        let ok = match *self {
            Action::Maskgit {
                mask_ratio,
                temperature,
                mask_temperature,
                guidance,
            } => {
                (0.0..=1.0).contains(&mask_ratio)
                    && temperature >= 0.0
                    && mask_temperature >= 0.0
                    && guidance >= 0.0
            }
            Action::Ar {
                temperature,
                guidance,
                top_k,
                top_p,
            } => {
                temperature >= 0.0
                    && guidance >= 0.0
                    && (1..=vocab.max(1)).contains(&top_k)
                    && (0.0..=1.0).contains(&top_p)
            }
            Action::Ode {
                kappa_next,
                guidance,
            } => kappa_next >= 0.0 && guidance >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::precondition(format!("action out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// MaskGIT grid or autoregressive prefix. `commit_logp[i]` is the exact
    /// class-conditional log-probability the committed token had when it was
    /// committed (zero while masked).
    Tokens {
        tokens: Vec<Option<usize>>,
        commit_logp: Vec<f64>,
    },
    Point {
        x: Vec2,
        kappa: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub t: usize,
    pub horizon: usize,
    pub class: usize,
    pub payload: Payload,
}

impl State {
    pub fn is_terminal(&self) -> bool {
        self.t >= self.horizon
    }

    pub fn masked_count(&self) -> usize {
        match &self.payload {
            Payload::Tokens { tokens, .. } => tokens.iter().filter(|t| t.is_none()).count(),
            Payload::Point { .. } => 0,
        }
    }

    pub fn kappa(&self) -> Option<f64> {
        match self.payload {
            Payload::Point { kappa, .. } => Some(kappa),
            Payload::Tokens { .. } => None,
        }
    }

    /// The finished sample, once every token is set (or always, for points).
    pub fn sample(&self) -> Option<Sample> {
        match &self.payload {
            Payload::Tokens { tokens, .. } => tokens
                .iter()
                .copied()
                .collect::<Option<Vec<usize>>>()
                .map(Sample::Tokens),
            Payload::Point { x, .. } => Some(Sample::Point(*x)),
        }
    }
}

/// Classifier-free guidance: `(1 + w) cond - w uncond`, elementwise.
pub fn guide(cond: &[f64], uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::Dimension {
            context: "guidance inputs",
            expected: cond.len(),
            got: uncond.len(),
        });
    }
    if w == 0.0 {
        return Ok(cond.to_vec());
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(c, u)| c + w * (c - u))
        .collect())
}

fn guide2(cond: Vec2, uncond: Vec2, w: f64) -> Vec2 {
    if w == 0.0 {
        return cond;
    }
    [
        cond[0] + w * (cond[0] - uncond[0]),
        cond[1] + w * (cond[1] - uncond[1]),
    ]
}

/// Token distribution after logit-space guidance, temperature, top-k and
/// top-p truncation, renormalized. Ties in ranking go to the lower index and
/// the nucleus always keeps at least the top token.
pub fn token_distribution(
    cond: &[f64],
    uncond: &[f64],
    temperature: f64,
    guidance: f64,
    top_k: usize,
    top_p: f64,
) -> Result<Vec<f64>> {
    if top_k < 1 {
        return Err(Error::precondition("top-k must be at least 1"));
    }
    let ln = |p: &[f64]| p.iter().map(|v| v.ln()).collect::<Vec<f64>>();
    let logits = guide(&ln(cond), &ln(uncond), guidance)?;
    let v = logits.len();
    let mut probs = if temperature < MIN_TEMPERATURE {
        let best = argmax(&logits);
        let mut p = vec![0.0; v];
        p[best] = 1.0;
        p
    } else {
        let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
        linalg::softmax(&scaled)
    };
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = vec![false; v];
    let mut mass = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if rank >= top_k || (rank > 0 && mass >= top_p) {
            break;
        }
        keep[i] = true;
        mass += probs[i];
    }
    let total: f64 = probs
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(p, _)| p)
        .sum();
    if !(total > 0.0) {
        log::debug!("empty support after truncation, falling back to argmax");
        let best = order[0];
        probs.iter_mut().for_each(|p| *p = 0.0);
        probs[best] = 1.0;
        return Ok(probs);
    }
    for (p, k) in probs.iter_mut().zip(&keep) {
        *p = if *k { *p / total } else { 0.0 };
    }
    Ok(probs)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Number of positions left masked after a MaskGIT step.
///
/// When the horizon fits in the grid (`horizon <= grid`), every step commits
/// at least one token and leaves enough masked positions for the remaining
/// steps, so the masked count strictly decreases to zero at the horizon.
/// Longer horizons allow zero-commit steps instead.
pub fn maskgit_next_masked(
    mask_ratio: f64,
    grid: usize,
    current_masked: usize,
    t: usize,
    horizon: usize,
) -> usize {
    if t + 1 >= horizon {
        return 0;
    }
    let target = (mask_ratio * grid as f64).round().max(0.0) as usize;
    if horizon <= grid {
        let remaining = horizon - t - 1;
        target.clamp(remaining, current_masked - 1)
    } else {
        target.min(current_masked)
    }
}

fn check_step(state: &State) -> Result<()> {
    if state.t >= state.horizon {
        return Err(Error::precondition(format!(
            "state is terminal (t = {} = T)",
            state.t
        )));
    }
    Ok(())
}

/// One MaskGIT step: sample every masked token from its guided, tempered
/// exact conditional, rank by Gumbel-perturbed confidence and commit the top
/// positions.
pub fn maskgit_transition<R: Rng + ?Sized>(
    state: &State,
    action: &Action,
    world: &DiscreteWorld,
    rng: &mut R,
) -> Result<State> {
    check_step(state)?;
    let Action::Maskgit {
        mask_ratio,
        temperature,
        mask_temperature,
        guidance,
    } = *action
    else {
        return Err(Error::precondition("maskgit transition needs a maskgit action"));
    };
    action.validate(world.vocab())?;
    let Payload::Tokens { tokens, commit_logp } = &state.payload else {
        return Err(Error::precondition("maskgit transition needs a token state"));
    };
    let masked: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i].is_none()).collect();
    let mut next = state.clone();
    next.t += 1;
    if masked.is_empty() {
        if state.horizon <= world.grid() {
            return Err(Error::precondition("no masked position left"));
        }
        return Ok(next);
    }
    let cond = world.marginals(tokens, Some(state.class));
    let uncond = if guidance != 0.0 {
        world.marginals(tokens, None)
    } else {
        Vec::new()
    };
    let mut draws = Vec::with_capacity(masked.len());
    for &i in &masked {
        let u = if guidance != 0.0 { &uncond[i] } else { &cond[i] };
        let p = token_distribution(&cond[i], u, temperature, guidance, world.vocab(), 1.0)?;
        let tok = sample_categorical(&p, rng);
        draws.push((i, tok, p[tok].ln()));
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
    let mut ranked: Vec<(usize, usize, f64)> = draws
        .into_iter()
        .map(|(i, tok, conf)| {
            let noise = if mask_temperature > 0.0 {
                mask_temperature * rng.sample(gumbel)
            } else {
                0.0
            };
            (i, tok, conf + noise)
        })
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let n_next = maskgit_next_masked(mask_ratio, world.grid(), masked.len(), state.t, state.horizon);
    let commit = masked.len() - n_next;
    let Payload::Tokens {
        tokens: next_tokens,
        commit_logp: next_logp,
    } = &mut next.payload
    else {
        unreachable!()
    };
    for &(i, tok, _) in ranked.iter().take(commit) {
        next_tokens[i] = Some(tok);
        next_logp[i] = cond[i][tok].ln();
    }
    debug_assert!(commit_logp.len() == next_logp.len());
    Ok(next)
}

/// One autoregressive step: fills position `t` of the prefix.
pub fn ar_transition<R: Rng + ?Sized>(
    state: &State,
    action: &Action,
    world: &DiscreteWorld,
    rng: &mut R,
) -> Result<State> {
    check_step(state)?;
    let Action::Ar {
        temperature,
        guidance,
        top_k,
        top_p,
    } = *action
    else {
        return Err(Error::precondition("ar transition needs an ar action"));
    };
    if top_k < 1 {
        return Err(Error::precondition("top-k must be at least 1"));
    }
    action.validate(world.vocab())?;
    let Payload::Tokens { tokens, .. } = &state.payload else {
        return Err(Error::precondition("ar transition needs a token state"));
    };
    let pos = state.t;
    if pos >= world.grid() || tokens[pos].is_some() {
        return Err(Error::precondition("ar prefix is already complete"));
    }
    let cond = world.token_conditional(tokens, Some(state.class), pos)?;
    let uncond = if guidance != 0.0 {
        world.token_conditional(tokens, None, pos)?
    } else {
        cond.clone()
    };
    let p = token_distribution(&cond, &uncond, temperature, guidance, top_k, top_p)?;
    let tok = sample_categorical(&p, rng);
    let mut next = state.clone();
    next.t += 1;
    if let Payload::Tokens {
        tokens, commit_logp, ..
    } = &mut next.payload
    {
        tokens[pos] = Some(tok);
        commit_logp[pos] = cond[tok].ln();
    }
    Ok(next)
}

fn ode_parts(state: &State, action: &Action) -> Result<(Vec2, f64, f64, f64)> {
    check_step(state)?;
    let Action::Ode {
        kappa_next,
        guidance,
    } = *action
    else {
        return Err(Error::precondition("ode transition needs an ode action"));
    };
    let Payload::Point { x, kappa } = state.payload else {
        return Err(Error::precondition("ode transition needs a point state"));
    };
    if !(kappa_next < kappa) || kappa_next < 0.0 || guidance < 0.0 {
        return Err(Error::precondition(format!(
            "timestep must strictly decrease: {kappa} -> {kappa_next}"
        )));
    }
    let target = if state.t + 1 == state.horizon {
        0.0
    } else {
        kappa_next
    };
    Ok((x, kappa, target, guidance))
}

/// Deterministic first-order diffusion step through the predicted clean sample.
pub fn diffusion_transition(state: &State, action: &Action, world: &GmmWorld) -> Result<State> {
    let (x, kappa, target, w) = ode_parts(state, action)?;
    let eps_c = world.eps_score(x, kappa, Some(state.class));
    let eps = if w != 0.0 {
        guide2(eps_c, world.eps_score(x, kappa, None), w)
    } else {
        eps_c
    };
    let ab = alpha_bar(kappa);
    let ab_next = alpha_bar(target);
    let x0 = linalg::scale(linalg::sub(x, linalg::scale(eps, (1.0 - ab).sqrt())), 1.0 / ab.sqrt());
    let x_next = linalg::add(
        linalg::scale(x0, ab_next.sqrt()),
        linalg::scale(eps, (1.0 - ab_next).sqrt()),
    );
    Ok(State {
        t: state.t + 1,
        payload: Payload::Point {
            x: x_next,
            kappa: target,
        },
        ..state.clone()
    })
}

/// Euler step of the rectified-flow ODE. The last step integrates to zero
/// using the velocity at the current (positive) timestep.
pub fn flow_transition(state: &State, action: &Action, world: &GmmWorld) -> Result<State> {
    let (x, kappa, target, w) = ode_parts(state, action)?;
    if target > 0.0 && target < DELTA {
        return Err(Error::precondition(format!(
            "flow timestep {target} below the floor {DELTA}"
        )));
    }
    let v_c = world.velocity(x, kappa, Some(state.class))?;
    let v = if w != 0.0 {
        guide2(v_c, world.velocity(x, kappa, None)?, w)
    } else {
        v_c
    };
    let x_next = linalg::add(x, linalg::scale(v, target - kappa));
    Ok(State {
        t: state.t + 1,
        payload: Payload::Point {
            x: x_next,
            kappa: target,
        },
        ..state.clone()
    })
}

/// Start of a generation: all-masked grid, empty prefix, or standard normal
/// noise at the largest timestep.
pub fn initial_state<R: Rng + ?Sized>(
    paradigm: Paradigm,
    world: &World,
    class: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<State> {
    if horizon == 0 {
        return Err(Error::precondition("horizon must be at least 1"));
    }
    if class >= world.class_count() {
        return Err(Error::precondition(format!("class {class} out of range")));
    }
    let payload = match (paradigm, world) {
        (Paradigm::Maskgit | Paradigm::Ar, World::Discrete(w)) => {
            if paradigm == Paradigm::Ar && horizon != w.grid() {
                return Err(Error::precondition(format!(
                    "autoregressive horizon must equal the grid size {}",
                    w.grid()
                )));
            }
            Payload::Tokens {
                tokens: vec![None; w.grid()],
                commit_logp: vec![0.0; w.grid()],
            }
        }
        (Paradigm::Diffusion | Paradigm::Flow, World::Gmm(_)) => {
            if paradigm == Paradigm::Diffusion && horizon > KAPPA_MAX {
                return Err(Error::precondition("diffusion horizon exceeds the timestep grid"));
            }
            Payload::Point {
                x: [rng.sample(StandardNormal), rng.sample(StandardNormal)],
                kappa: paradigm.initial_kappa(),
            }
        }
        _ => {
            return Err(Error::precondition(format!(
                "paradigm {paradigm} does not match the world kind"
            )))
        }
    };
    Ok(State {
        t: 0,
        horizon,
        class,
        payload,
    })
}

/// Dispatches to the transition of `paradigm`.
pub fn transition<R: Rng + ?Sized>(
    paradigm: Paradigm,
    state: &State,
    action: &Action,
    world: &World,
    rng: &mut R,
) -> Result<State> {
    match (paradigm, world) {
        (Paradigm::Maskgit, World::Discrete(w)) => maskgit_transition(state, action, w, rng),
        (Paradigm::Ar, World::Discrete(w)) => ar_transition(state, action, w, rng),
        (Paradigm::Diffusion, World::Gmm(w)) => diffusion_transition(state, action, w),
        (Paradigm::Flow, World::Gmm(w)) => flow_transition(state, action, w),
        _ => Err(Error::precondition(format!(
            "paradigm {paradigm} does not match the world kind"
        ))),
    }
}
