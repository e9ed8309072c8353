//! Class-conditional 2-D Gaussian mixtures with closed-form noise and
//! velocity predictors.
//!
//! Diffusion noising follows `x_k = sqrt(abar(k)) x0 + sqrt(1 - abar(k)) eps`,
//! so each component `N(mu, S)` becomes `N(sqrt(abar) mu, abar S + (1 - abar) I)`.
//! Flow interpolation follows `x_k = k x1 + (1 - k) x0` with `x1 ~ N(0, I)`, so
//! `x_k | component ~ N((1 - k) mu, k^2 I + (1 - k)^2 S)` and the velocity
//! `x1 - x0` is jointly Gaussian with it.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat2, Vec2};

pub const KAPPA_MAX: usize = 1000;
pub const DELTA: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmWorldConfig {
    pub classes: usize,
    pub min_components: usize,
    pub max_components: usize,
    pub seed: u64,
    /// Means are drawn uniformly from `[-mean_range, mean_range]^2`.
    pub mean_range: f64,
    /// Per-axis standard deviations are drawn from this interval.
    pub std_range: (f64, f64),
}

impl Default for GmmWorldConfig {
    fn default() -> Self {
        GmmWorldConfig {
            classes: 4,
            min_components: 2,
            max_components: 3,
            seed: 0,
            mean_range: 4.0,
            std_range: (0.25, 0.6),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec2,
    pub cov: Mat2,
}

#[derive(Debug, Clone)]
pub struct GmmWorld {
    classes: Vec<Vec<Component>>,
    /// All components with weights divided by the class count.
    pooled: Vec<Component>,
}

/// Cosine schedule mapped affinely onto `[DELTA, 1 - DELTA]`.
pub fn alpha_bar(kappa: f64) -> f64 {
    let c = (FRAC_PI_2 * kappa / KAPPA_MAX as f64).cos();
    DELTA + (1.0 - 2.0 * DELTA) * c * c
}

impl GmmWorld {
    pub fn build(config: &GmmWorldConfig) -> Result<Self> {
        let c = config;
        if c.classes == 0 || c.min_components == 0 || c.max_components < c.min_components {
            return Err(Error::config(
                "world",
                "need classes >= 1 and 1 <= min_components <= max_components",
            ));
        }
        if !(c.std_range.0 > 0.0 && c.std_range.1 >= c.std_range.0) || c.mean_range < 0.0 {
            return Err(Error::config("world.std_range", "must be a positive interval"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut classes = Vec::with_capacity(c.classes);
        for _ in 0..c.classes {
            let n = rng.random_range(c.min_components..=c.max_components);
            let raw_w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
            let total: f64 = raw_w.iter().sum();
            let comps = raw_w
                .into_iter()
                .map(|w| {
                    let mean = [
                        rng.random_range(-c.mean_range..=c.mean_range),
                        rng.random_range(-c.mean_range..=c.mean_range),
                    ];
                    let s1 = rng.random_range(c.std_range.0..=c.std_range.1);
                    let s2 = rng.random_range(c.std_range.0..=c.std_range.1);
                    let theta = rng.random_range(0.0..std::f64::consts::PI);
                    let (sn, cs) = theta.sin_cos();
                    let r = [[cs, -sn], [sn, cs]];
                    let d = [[s1 * s1, 0.0], [0.0, s2 * s2]];
                    let mut cov = linalg::mat_mul(&linalg::mat_mul(&r, &d), &linalg::transpose(&r));
                    let off = 0.5 * (cov[0][1] + cov[1][0]);
                    cov[0][1] = off;
                    cov[1][0] = off;
                    Component {
                        weight: w / total,
                        mean,
                        cov,
                    }
                })
                .collect();
            classes.push(comps);
        }
        Self::from_classes(classes)
    }

    pub fn from_classes(classes: Vec<Vec<Component>>) -> Result<Self> {
        if classes.is_empty() || classes.iter().any(Vec::is_empty) {
            return Err(Error::config("world", "every class needs a component"));
        }
        for comps in &classes {
            let s: f64 = comps.iter().map(|c| c.weight).sum();
            if (s - 1.0).abs() > 1e-9 || comps.iter().any(|c| c.weight <= 0.0) {
                return Err(Error::config("world", "component weights must be positive and sum to 1"));
            }
            if comps.iter().any(|c| !linalg::is_spd(&c.cov)) {
                return Err(Error::config("world", "component covariance is not SPD"));
            }
        }
        let n = classes.len() as f64;
        let pooled = classes
            .iter()
            .flatten()
            .map(|c| Component {
                weight: c.weight / n,
                ..c.clone()
            })
            .collect();
        Ok(GmmWorld { classes, pooled })
    }

    /// Single class, single component `N(mean, cov)`.
    pub fn single_gaussian(mean: Vec2, cov: Mat2) -> Result<Self> {
        Self::from_classes(vec![vec![Component {
            weight: 1.0,
            mean,
            cov,
        }]])
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// Components of `class`, or of the uniform class mixture for `None`.
    pub fn components(&self, class: Option<usize>) -> &[Component] {
        match class {
            Some(c) => &self.classes[c],
            None => &self.pooled,
        }
    }

    pub fn class_mean(&self, class: Option<usize>) -> Vec2 {
        self.components(class)
            .iter()
            .fold([0.0, 0.0], |acc, c| linalg::add(acc, linalg::scale(c.mean, c.weight)))
    }

    /// Mixture mean and covariance of `class`.
    pub fn class_moments(&self, class: Option<usize>) -> (Vec2, Mat2) {
        let mu = self.class_mean(class);
        let mut cov = [[0.0; 2]; 2];
        for c in self.components(class) {
            let d = linalg::sub(c.mean, mu);
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += c.weight * (c.cov[i][j] + d[i] * d[j]);
                }
            }
        }
        (mu, cov)
    }

    pub fn log_density(&self, x: Vec2, class: Option<usize>) -> f64 {
        let terms: Vec<f64> = self
            .components(class)
            .iter()
            .map(|c| {
                c.weight.ln()
                    + linalg::gaussian_log_pdf(x, c.mean, &linalg::inverse(&c.cov), linalg::det(&c.cov))
            })
            .collect();
        linalg::log_sum_exp(&terms)
    }

    /// Log density of the diffusion-noised mixture at level `kappa`.
    pub fn noised_log_density(&self, x: Vec2, kappa: f64, class: Option<usize>) -> f64 {
        let ab = alpha_bar(kappa);
        let terms: Vec<f64> = self
            .components(class)
            .iter()
            .map(|c| {
                let (m, s) = noised(c, ab);
                c.weight.ln() + linalg::gaussian_log_pdf(x, m, &linalg::inverse(&s), linalg::det(&s))
            })
            .collect();
        linalg::log_sum_exp(&terms)
    }

    /// Exact noise prediction `-sqrt(1 - abar) * grad log p_kappa(x)`.
    pub fn eps_score(&self, x: Vec2, kappa: f64, class: Option<usize>) -> Vec2 {
        let ab = alpha_bar(kappa);
        let comps = self.components(class);
        let mut logw = Vec::with_capacity(comps.len());
        let mut grads = Vec::with_capacity(comps.len());
        for c in comps {
            let (m, s) = noised(c, ab);
            let inv = linalg::inverse(&s);
            logw.push(c.weight.ln() + linalg::gaussian_log_pdf(x, m, &inv, linalg::det(&s)));
            grads.push(linalg::scale(linalg::mat_vec(&inv, linalg::sub(x, m)), -1.0));
        }
        let grad = mix(&logw, &grads);
        linalg::scale(grad, -(1.0 - ab).sqrt())
    }

    /// Exact marginal velocity `E[x1 - x0 | x_kappa = x]`, `kappa` in `(0, 1]`.
    pub fn velocity(&self, x: Vec2, kappa: f64, class: Option<usize>) -> Result<Vec2> {
        if !(kappa > 0.0 && kappa <= 1.0) {
            return Err(Error::precondition(format!(
                "velocity needs kappa in (0, 1], got {kappa}"
            )));
        }
        let comps = self.components(class);
        let mut logw = Vec::with_capacity(comps.len());
        let mut vels = Vec::with_capacity(comps.len());
        let one_minus = 1.0 - kappa;
        for c in comps {
            let m = linalg::scale(c.mean, one_minus);
            let s = linalg::mat_add(
                &linalg::mat_scale(&linalg::IDENTITY, kappa * kappa),
                &linalg::mat_scale(&c.cov, one_minus * one_minus),
            );
            let inv = linalg::inverse(&s);
            logw.push(c.weight.ln() + linalg::gaussian_log_pdf(x, m, &inv, linalg::det(&s)));
            let cross = linalg::mat_add(
                &linalg::mat_scale(&linalg::IDENTITY, kappa),
                &linalg::mat_scale(&c.cov, -one_minus),
            );
            let v = linalg::add(
                linalg::scale(c.mean, -1.0),
                linalg::mat_vec(&cross, linalg::mat_vec(&inv, linalg::sub(x, m))),
            );
            vels.push(v);
        }
        Ok(mix(&logw, &vels))
    }

    pub fn sample<R: Rng + ?Sized>(&self, class: Option<usize>, rng: &mut R) -> Vec2 {
        let comps = self.components(class);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &comps[comps.len() - 1];
        for c in comps {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        sample_gaussian(chosen.mean, &chosen.cov, rng)
    }
}

fn noised(c: &Component, ab: f64) -> (Vec2, Mat2) {
    let m = linalg::scale(c.mean, ab.sqrt());
    let s = linalg::mat_add(
        &linalg::mat_scale(&c.cov, ab),
        &linalg::mat_scale(&linalg::IDENTITY, 1.0 - ab),
    );
    (m, s)
}

/// Posterior-weighted average of per-component vectors.
fn mix(logw: &[f64], values: &[Vec2]) -> Vec2 {
    let r = linalg::softmax(logw);
    r.iter()
        .zip(values)
        .fold([0.0, 0.0], |acc, (w, v)| linalg::add(acc, linalg::scale(*v, *w)))
}

pub fn sample_gaussian<R: Rng + ?Sized>(mean: Vec2, cov: &Mat2, rng: &mut R) -> Vec2 {
    // Cholesky of a 2x2 SPD matrix.
    let l00 = cov[0][0].sqrt();
    let l10 = cov[1][0] / l00;
    let l11 = (cov[1][1] - l10 * l10).max(0.0).sqrt();
    let z0: f64 = rng.sample(StandardNormal);
    let z1: f64 = rng.sample(StandardNormal);
    [mean[0] + l00 * z0, mean[1] + l10 * z0 + l11 * z1]
}
