//! Evaluation metrics: closed-form 2-D Fréchet distance, total variation,
//! mode coverage and average negative log-likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat2, Vec2};
use crate::worlds::{DiscreteWorld, GmmWorld, Sample, World};

/// Minimum sample count per side for a Fréchet estimate.
pub const FRECHET_MIN_SAMPLES: usize = 32;
/// Ridge added to fitted covariances.
pub const COV_RIDGE: f64 = 1e-6;

/// Mean and unbiased covariance of a 2-D sample set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFit {
    pub mean: Vec2,
    pub cov: Mat2,
    pub count: usize,
}

impl GaussianFit {
    pub fn fit(samples: &[Vec2]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::precondition("a Gaussian fit needs at least two samples"));
        }
        let inv_n = 1.0 / n as f64;
        let mean = samples
            .iter()
            .fold([0.0, 0.0], |acc, s| linalg::add(acc, linalg::scale(*s, inv_n)));
        let mut cov = [[0.0; 2]; 2];
        for s in samples {
            let d = linalg::sub(*s, mean);
            cov[0][0] += d[0] * d[0];
            cov[0][1] += d[0] * d[1];
            cov[1][1] += d[1] * d[1];
        }
        let k = 1.0 / (n - 1) as f64;
        cov[0][0] *= k;
        cov[1][1] *= k;
        cov[0][1] *= k;
        cov[1][0] = cov[0][1];
        Ok(GaussianFit {
            mean,
            cov,
            count: n,
        })
    }

    /// True when the fitted covariance is rank-deficient before the ridge.
    pub fn is_degenerate(&self) -> bool {
        linalg::det(&self.cov) <= 1e-12 * (1.0 + linalg::trace(&self.cov).powi(2))
    }

    fn ridged(&self) -> Mat2 {
        linalg::mat_add(&self.cov, &linalg::mat_scale(&linalg::IDENTITY, COV_RIDGE))
    }
}

/// Principal square root of a 2x2 SPD matrix:
/// `S = (M + sqrt(det M) I) / sqrt(tr M + 2 sqrt(det M))`.
pub fn sqrt_spd_2x2(m: &Mat2) -> Result<Mat2> {
    let d = linalg::det(m);
    let t = linalg::trace(m);
    if !(d > 0.0 && t > 0.0) || (m[0][1] - m[1][0]).abs() > 1e-9 * t {
        return Err(Error::precondition(format!("matrix {m:?} is not SPD")));
    }
    let s = d.sqrt();
    let norm = 1.0 / (t + 2.0 * s).sqrt();
    Ok([
        [(m[0][0] + s) * norm, m[0][1] * norm],
        [m[1][0] * norm, (m[1][1] + s) * norm],
    ])
}

/// Fréchet distance between two Gaussians,
/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^(1/2) Sb Sa^(1/2))^(1/2))`.
pub fn frechet_gaussians(mean_a: Vec2, cov_a: &Mat2, mean_b: Vec2, cov_b: &Mat2) -> Result<f64> {
    let dm = linalg::sub(mean_a, mean_b);
    let sa = sqrt_spd_2x2(cov_a)?;
    let mut inner = linalg::mat_mul(&linalg::mat_mul(&sa, cov_b), &sa);
    let off = 0.5 * (inner[0][1] + inner[1][0]);
    inner[0][1] = off;
    inner[1][0] = off;
    let cross = linalg::trace(&sqrt_spd_2x2(&inner)?);
    let d = linalg::dot(dm, dm) + linalg::trace(cov_a) + linalg::trace(cov_b) - 2.0 * cross;
    Ok(d.max(0.0))
}

pub fn frechet_fits(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    frechet_gaussians(a.mean, &a.ridged(), b.mean, &b.ridged())
}

/// Fréchet distance between Gaussians fitted to two sample sets.
pub fn frechet_2d(a: &[Vec2], b: &[Vec2]) -> Result<f64> {
    if a.len() < FRECHET_MIN_SAMPLES || b.len() < FRECHET_MIN_SAMPLES {
        return Err(Error::precondition(format!(
            "Fréchet distance needs at least {FRECHET_MIN_SAMPLES} samples per side (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    frechet_fits(&GaussianFit::fit(a)?, &GaussianFit::fit(b)?)
}

/// Total-variation distance `0.5 * sum |p - q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            context: "probability vectors",
            expected: p.len(),
            got: q.len(),
        });
    }
    for v in [p, q] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 || v.iter().any(|x| *x < 0.0) {
            return Err(Error::precondition(format!(
                "not a probability vector (sum {s})"
            )));
        }
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Normalized histogram of token grids over the world's configuration index.
pub fn empirical_distribution(world: &DiscreteWorld, samples: &[Vec<usize>]) -> Vec<f64> {
    let mut h = vec![0.0; world.config_count()];
    for s in samples {
        h[world.encode(s)] += 1.0;
    }
    let n = samples.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Fraction of the class's components with at least one sample within
/// `radius_multiplier * sqrt(lambda_max(cov))` of the component mean.
pub fn mode_coverage(samples: &[Vec2], world: &GmmWorld, class: usize, radius_multiplier: f64) -> f64 {
    let comps = world.components(Some(class));
    if samples.is_empty() {
        return 0.0;
    }
    let hit = comps
        .iter()
        .filter(|c| {
            let r = radius_multiplier * linalg::max_eigenvalue_sym(&c.cov).sqrt();
            let r2 = r * r;
            samples.iter().any(|s| {
                let d = linalg::sub(*s, c.mean);
                linalg::dot(d, d) <= r2
            })
        })
        .count();
    hit as f64 / comps.len() as f64
}

/// Mean negative log-density of `samples` under the class distribution.
pub fn avg_nll(samples: &[Vec2], world: &GmmWorld, class: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::precondition("average NLL of an empty sample set"));
    }
    Ok(-samples
        .iter()
        .map(|s| world.log_density(*s, Some(class)))
        .sum::<f64>()
        / samples.len() as f64)
}

/// Metrics of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub samples: usize,
    pub frechet: Option<f64>,
    pub tv: Option<f64>,
    pub mode_cov: Option<f64>,
    pub avg_nll: Option<f64>,
}

/// Class-averaged metrics plus the per-class breakdown. Metrics that do not
/// apply to the world, or lack samples, are `None` and explained in `notes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frechet: Option<f64>,
    pub tv: Option<f64>,
    pub mode_cov: Option<f64>,
    pub avg_nll: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub notes: Vec<String>,
}

impl Metrics {
    /// Fréchet distance for point worlds, total variation for token worlds.
    pub fn headline(&self) -> Option<f64> {
        self.frechet.or(self.tv)
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates generated samples grouped by class. Fréchet distances are taken
/// against the exact class moments, total variation against the exact table.
pub fn compute(world: &World, samples: &[Vec<Sample>], coverage_radius: f64) -> Result<Metrics> {
    if samples.len() != world.class_count() {
        return Err(Error::Dimension {
            context: "sample groups",
            expected: world.class_count(),
            got: samples.len(),
        });
    }
    let mut notes = Vec::new();
    let mut per_class = Vec::new();
    for (c, group) in samples.iter().enumerate() {
        let mut m = ClassMetrics {
            class: c,
            samples: group.len(),
            frechet: None,
            tv: None,
            mode_cov: None,
            avg_nll: None,
        };
        match world {
            World::Gmm(g) => {
                let pts: Vec<Vec2> = group.iter().filter_map(Sample::as_point).collect();
                if pts.len() >= FRECHET_MIN_SAMPLES {
                    let fit = GaussianFit::fit(&pts)?;
                    let (mean, cov) = g.class_moments(Some(c));
                    m.frechet = Some(frechet_gaussians(fit.mean, &fit.ridged(), mean, &cov)?);
                }
                if !pts.is_empty() {
                    m.mode_cov = Some(mode_coverage(&pts, g, c, coverage_radius));
                    m.avg_nll = Some(avg_nll(&pts, g, c)?);
                }
            }
            World::Discrete(d) => {
                let grids: Vec<Vec<usize>> = group.iter().filter_map(|s| s.as_tokens().map(<[usize]>::to_vec)).collect();
                if !grids.is_empty() {
                    m.tv = Some(tv_distance(&empirical_distribution(d, &grids), d.table(Some(c)))?);
                    m.avg_nll = Some(-grids.iter().map(|g| d.log_density(g, Some(c))).sum::<f64>() / grids.len() as f64);
                }
            }
        }
        per_class.push(m);
    }
    match world {
        World::Gmm(_) => {
            notes.push("tv omitted: total variation needs an enumerable world".into());
            if per_class.iter().any(|m| m.frechet.is_none()) {
                notes.push(format!(
                    "frechet omitted: fewer than {FRECHET_MIN_SAMPLES} samples in some class"
                ));
            }
        }
        World::Discrete(_) => {
            notes.push("frechet omitted: the Fréchet distance needs a continuous world".into());
            notes.push("mode_cov omitted: mode coverage needs a continuous world".into());
        }
    }
    Ok(Metrics {
        frechet: mean_of(per_class.iter().map(|m| m.frechet)),
        tv: mean_of(per_class.iter().map(|m| m.tv)),
        mode_cov: mean_of(per_class.iter().map(|m| m.mode_cov)),
        avg_nll: mean_of(per_class.iter().map(|m| m.avg_nll)),
        per_class,
        notes,
    })
}
