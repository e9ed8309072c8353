//! Exact final-grid distributions of the discrete samplers under a fixed
//! action sequence, by dynamic enumeration over every sampling branch.

use std::collections::BTreeMap;

use super::DiscreteWorld;
use crate::error::{Error, Result};
use crate::samplers::{maskgit_next_masked, token_distribution, Action, Paradigm};

type Branches = BTreeMap<Vec<Option<usize>>, f64>;

/// Probability of every complete grid (indexed like the world's tables) after
/// running `actions` from the initial state. Supports autoregressive sampling
/// and MaskGIT with zero mask temperature.
pub fn enumerate_final_distribution(
    world: &DiscreteWorld,
    paradigm: Paradigm,
    actions: &[Action],
    class: usize,
) -> Result<Vec<f64>> {
    let horizon = actions.len();
    if horizon == 0 {
        return Err(Error::precondition("empty action sequence"));
    }
    let mut branches: Branches = BTreeMap::new();
    branches.insert(vec![None; world.grid()], 1.0);
    for (t, action) in actions.iter().enumerate() {
        branches = match (paradigm, action) {
            (Paradigm::Ar, Action::Ar { .. }) => ar_step(world, &branches, t, action, class)?,
            (Paradigm::Maskgit, Action::Maskgit { mask_temperature, .. }) => {
                if *mask_temperature != 0.0 {
                    return Err(Error::Unsupported(
                        "enumeration of MaskGIT with positive mask temperature".into(),
                    ));
                }
                maskgit_step(world, &branches, t, horizon, action, class)?
            }
            _ => {
                return Err(Error::Unsupported(format!(
                    "enumeration for paradigm {paradigm} with action {action:?}"
                )))
            }
        };
    }
    let mut out = vec![0.0; world.config_count()];
    for (grid, p) in branches {
        let tokens: Vec<usize> = grid
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::precondition("action sequence leaves masked tokens"))?;
        out[world.encode(&tokens)] += p;
    }
    Ok(out)
}

fn ar_step(
    world: &DiscreteWorld,
    branches: &Branches,
    t: usize,
    action: &Action,
    class: usize,
) -> Result<Branches> {
    let Action::Ar {
        temperature,
        guidance,
        top_k,
        top_p,
    } = *action
    else {
        unreachable!()
    };
    if t >= world.grid() {
        return Err(Error::precondition("autoregressive horizon exceeds the grid"));
    }
    let mut next = Branches::new();
    for (grid, &mass) in branches {
        let cond = world.token_conditional(grid, Some(class), t)?;
        let uncond = world.token_conditional(grid, None, t)?;
        let p = token_distribution(&cond, &uncond, temperature, guidance, top_k, top_p)?;
        for (v, pv) in p.iter().enumerate() {
            if *pv > 0.0 {
                let mut g = grid.clone();
                g[t] = Some(v);
                *next.entry(g).or_insert(0.0) += mass * pv;
            }
        }
    }
    Ok(next)
}

fn maskgit_step(
    world: &DiscreteWorld,
    branches: &Branches,
    t: usize,
    horizon: usize,
    action: &Action,
    class: usize,
) -> Result<Branches> {
    let Action::Maskgit {
        mask_ratio,
        temperature,
        guidance,
        ..
    } = *action
    else {
        unreachable!()
    };
    let vocab = world.vocab();
    let mut next = Branches::new();
    for (grid, &mass) in branches {
        let masked: Vec<usize> = (0..grid.len()).filter(|&i| grid[i].is_none()).collect();
        if masked.is_empty() {
            *next.entry(grid.clone()).or_insert(0.0) += mass;
            continue;
        }
        let cond = world.marginals(grid, Some(class));
        let uncond = world.marginals(grid, None);
        let dists: Vec<Vec<f64>> = masked
            .iter()
            .map(|&i| token_distribution(&cond[i], &uncond[i], temperature, guidance, vocab, 1.0))
            .collect::<Result<_>>()?;
        let keep_masked = maskgit_next_masked(mask_ratio, world.grid(), masked.len(), t, horizon);
        let commit = masked.len() - keep_masked;
        // Joint draw over all masked positions.
        let combos = vocab.pow(masked.len() as u32);
        let mut draw = vec![0usize; masked.len()];
        for n in 0..combos {
            let mut r = n;
            let mut p = mass;
            for (j, d) in draw.iter_mut().enumerate() {
                *d = r % vocab;
                r /= vocab;
                p *= dists[j][*d];
            }
            if p == 0.0 {
                continue;
            }
            let mut order: Vec<usize> = (0..masked.len()).collect();
            order.sort_by(|&a, &b| {
                let ca = dists[a][draw[a]].ln();
                let cb = dists[b][draw[b]].ln();
                cb.total_cmp(&ca).then(masked[a].cmp(&masked[b]))
            });
            let mut g = grid.clone();
            for &j in order.iter().take(commit) {
                g[masked[j]] = Some(draw[j]);
            }
            *next.entry(g).or_insert(0.0) += p;
        }
    }
    Ok(next)
}
