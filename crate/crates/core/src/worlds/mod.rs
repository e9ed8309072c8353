//! Frozen target distributions with exact predictors.
//!
//! The discrete world backs the MaskGIT and autoregressive samplers, the
//! Gaussian-mixture world backs diffusion and rectified flow. Worlds are
//! immutable after construction and rebuilt from `(config, seed)`.

mod discrete;
mod enumerate;
mod gmm;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use discrete::{adjacent_pairs, DiscreteWorld, DiscreteWorldConfig, PartialGrid, MAX_CONFIGS};
pub use enumerate::enumerate_final_distribution;
pub use gmm::{alpha_bar, sample_gaussian, Component, GmmWorld, GmmWorldConfig, DELTA, KAPPA_MAX};

use crate::error::Result;
use crate::linalg::Vec2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldConfig {
    Discrete(DiscreteWorldConfig),
    Gmm(GmmWorldConfig),
}

#[derive(Debug, Clone)]
pub enum World {
    Discrete(DiscreteWorld),
    Gmm(GmmWorld),
}

/// A finished generation.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Tokens(Vec<usize>),
    Point(Vec2),
}

impl Sample {
    pub fn as_point(&self) -> Option<Vec2> {
        match self {
            Sample::Point(p) => Some(*p),
            Sample::Tokens(_) => None,
        }
    }

    pub fn as_tokens(&self) -> Option<&[usize]> {
        match self {
            Sample::Tokens(t) => Some(t),
            Sample::Point(_) => None,
        }
    }
}

impl World {
    pub fn build(config: &WorldConfig) -> Result<Self> {
        Ok(match config {
            WorldConfig::Discrete(c) => World::Discrete(DiscreteWorld::build(c)?),
            WorldConfig::Gmm(c) => World::Gmm(GmmWorld::build(c)?),
        })
    }

    pub fn class_count(&self) -> usize {
        match self {
            World::Discrete(w) => w.classes(),
            World::Gmm(w) => w.class_count(),
        }
    }

    pub fn as_discrete(&self) -> Option<&DiscreteWorld> {
        match self {
            World::Discrete(w) => Some(w),
            World::Gmm(_) => None,
        }
    }

    pub fn as_gmm(&self) -> Option<&GmmWorld> {
        match self {
            World::Gmm(w) => Some(w),
            World::Discrete(_) => None,
        }
    }

    /// Exact `log p(sample | class)`; `None` is the uniform class mixture.
    pub fn log_density(&self, sample: &Sample, class: Option<usize>) -> f64 {
        match (self, sample) {
            (World::Discrete(w), Sample::Tokens(t)) => w.log_density(t, class),
            (World::Gmm(w), Sample::Point(p)) => w.log_density(*p, class),
            _ => f64::NEG_INFINITY,
        }
    }

    /// Draws one sample from the target distribution of `class`.
    pub fn sample_target<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Sample {
        match self {
            World::Discrete(w) => Sample::Tokens(w.sample(class, rng)),
            World::Gmm(w) => Sample::Point(w.sample(Some(class), rng)),
        }
    }

    /// Length of the flattened sample vector fed to reward models.
    pub fn sample_feature_len(&self) -> usize {
        match self {
            World::Discrete(w) => w.grid() * w.vocab(),
            World::Gmm(_) => 2,
        }
    }

    /// Flattened sample: token one-hots for grids, raw coordinates for points.
    pub fn sample_features(&self, sample: &Sample, out: &mut Vec<f64>) {
        match (self, sample) {
            (World::Discrete(w), Sample::Tokens(t)) => {
                for &tok in t {
                    out.extend((0..w.vocab()).map(|v| if v == tok { 1.0 } else { 0.0 }));
                }
            }
            (World::Gmm(_), Sample::Point(p)) => out.extend_from_slice(p),
            (World::Discrete(w), Sample::Point(_)) => out.extend(std::iter::repeat_n(0.0, w.grid() * w.vocab())),
            (World::Gmm(_), Sample::Tokens(_)) => out.extend_from_slice(&[0.0, 0.0]),
        }
    }
}
