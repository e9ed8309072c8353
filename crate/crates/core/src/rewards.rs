//! Terminal rewards: the adversarial discriminator, an analytic fidelity
//! proxy built on exact log-densities, and a batch-level Fréchet reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat2, Vec2};
use crate::metrics::{frechet_gaussians, GaussianFit, FRECHET_MIN_SAMPLES};
use crate::nn::{adam_step, Activation, DenseNet, GradVector, OptState, StepOutcome};
use crate::transforms::{sigmoid, softplus};
use crate::worlds::{Sample, World};

/// Discriminator logits are clipped to this magnitude before squashing, which
/// keeps rewards strictly inside (0, 1).
pub const LOGIT_CLIP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    #[default]
    Adversarial,
    FidelityProxy,
    Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub kind: RewardKind,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Real-sample batch size for each discriminator update; fakes match it.
    pub batch: usize,
    pub updates_per_iter: usize,
    /// One-sided label smoothing: real label 0.9 instead of 1.
    pub label_smoothing: bool,
    /// Target samples per class used to calibrate the fidelity proxy.
    pub calibration_samples: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            kind: RewardKind::Adversarial,
            hidden: vec![128, 128],
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch: 256,
            updates_per_iter: 5,
            label_smoothing: false,
            calibration_samples: 10_000,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("reward.hidden", "needs at least one positive width"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("reward.lr", "must be non-negative"));
        }
        for (name, b) in [("reward.beta1", self.beta1), ("reward.beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(name, "must lie in (0, 1)"));
            }
        }
        if self.batch == 0 {
            return Err(Error::config("reward.batch", "must be at least 1"));
        }
        if self.calibration_samples < 2 {
            return Err(Error::config("reward.calibration_samples", "must be at least 2"));
        }
        Ok(())
    }
}

/// Class-conditional discriminator over flattened final samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    net: DenseNet,
    sample_len: usize,
    classes: usize,
}

impl RewardModel {
    pub fn zeros(world: &World, hidden: &[usize]) -> Result<Self> {
        let sample_len = world.sample_feature_len();
        let classes = world.class_count();
        let mut sizes = vec![sample_len + classes];
        sizes.extend(hidden);
        sizes.push(1);
        Ok(RewardModel {
            net: DenseNet::zeros(&sizes, Activation::Tanh, None)?,
            sample_len,
            classes,
        })
    }

    pub fn init<R: Rng + ?Sized>(world: &World, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(world, hidden)?;
        m.net.init_random(rng, 1.0);
        Ok(m)
    }

    pub fn from_net(net: DenseNet, world: &World) -> Result<Self> {
        let sample_len = world.sample_feature_len();
        let classes = world.class_count();
        if net.input_len() != sample_len + classes || net.output_len() != 1 {
            return Err(Error::Dimension {
                context: "reward network shape",
                expected: sample_len + classes,
                got: net.input_len(),
            });
        }
        Ok(RewardModel {
            net,
            sample_len,
            classes,
        })
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

    pub fn input(&self, world: &World, sample: &Sample, class: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.sample_len + self.classes);
        world.sample_features(sample, &mut v);
        v.extend((0..self.classes).map(|c| if c == class { 1.0 } else { 0.0 }));
        v
    }

    pub fn logit(&self, world: &World, sample: &Sample, class: usize) -> Result<f64> {
        Ok(self.net.forward(&self.input(world, sample, class), None)?[0])
    }

    /// Probability that the sample is real, strictly inside (0, 1).
    pub fn reward(&self, world: &World, sample: &Sample, class: usize) -> Result<f64> {
        Ok(sigmoid(self.logit(world, sample, class)?.clamp(-LOGIT_CLIP, LOGIT_CLIP)))
    }

    /// Binary cross-entropy `mean_real BCE(l, y_real) + mean_fake BCE(l, 0)`
    /// and its gradient.
    pub fn bce_loss_grad(
        &self,
        world: &World,
        real: &[(Sample, usize)],
        fake: &[(Sample, usize)],
        label_smoothing: bool,
    ) -> Result<(f64, GradVector)> {
        if real.is_empty() || fake.is_empty() {
            return Err(Error::precondition("discriminator batches must be non-empty"));
        }
        let real_label = if label_smoothing { 0.9 } else { 1.0 };
        let mut grad = GradVector::zeros(self.net.param_count());
        let mut loss = 0.0;
        for (set, label) in [(real, real_label), (fake, 0.0)] {
            let w = 1.0 / set.len() as f64;
            for (s, c) in set {
                let input = self.input(world, s, *c);
                let l = self.net.forward(&input, None)?[0];
                loss += w * (softplus(l) - label * l);
                self.net
                    .backward_into(&input, None, &[w * (sigmoid(l) - label)], &mut grad)?;
            }
        }
        Ok((loss, grad))
    }

    /// Held-out accuracy with threshold 0.5 (real predicted as real, fake as fake).
    pub fn accuracy(&self, world: &World, real: &[(Sample, usize)], fake: &[(Sample, usize)]) -> Result<f64> {
        let mut correct = 0usize;
        for (s, c) in real {
            if self.logit(world, s, *c)? > 0.0 {
                correct += 1;
            }
        }
        for (s, c) in fake {
            if self.logit(world, s, *c)? <= 0.0 {
                correct += 1;
            }
        }
        Ok(correct as f64 / (real.len() + fake.len()).max(1) as f64)
    }
}

/// Discriminator outcome for one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscStep {
    /// Loss before the update.
    pub loss: f64,
    pub outcome: StepOutcome,
}

/// One Adam step on the discriminator's BCE loss. A non-finite loss skips the
/// update.
pub fn disc_update(
    model: &mut RewardModel,
    world: &World,
    real: &[(Sample, usize)],
    fake: &[(Sample, usize)],
    opt: &mut OptState,
    label_smoothing: bool,
) -> Result<DiscStep> {
    let (loss, grad) = model.bce_loss_grad(world, real, fake, label_smoothing)?;
    if !loss.is_finite() {
        log::warn!("discriminator update skipped: non-finite loss");
        return Ok(DiscStep {
            loss,
            outcome: StepOutcome::SkippedNonFinite,
        });
    }
    let outcome = adam_step(model.params_mut(), &grad, opt)?;
    Ok(DiscStep { loss, outcome })
}

/// Per-class centering and scale for the fidelity proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityCalibration {
    pub median: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FidelityCalibration {
    /// Median and scaled median absolute deviation of `log p(x | c)` over
    /// `n` target draws per class. Falls back to the standard deviation, then
    /// to 1, when the spread vanishes.
    pub fn calibrate<R: Rng + ?Sized>(world: &World, n: usize, rng: &mut R) -> Result<Self> {
        if n < 2 {
            return Err(Error::precondition("calibration needs at least two samples"));
        }
        let mut median = Vec::new();
        let mut scale = Vec::new();
        for c in 0..world.class_count() {
            let mut lp: Vec<f64> = (0..n)
                .map(|_| {
                    let s = world.sample_target(c, rng);
                    world.log_density(&s, Some(c))
                })
                .collect();
            let m = median_of(&mut lp);
            let mut dev: Vec<f64> = lp.iter().map(|v| (v - m).abs()).collect();
            let mut s = 1.4826 * median_of(&mut dev);
            if !(s > 1e-9) {
                let mean = lp.iter().sum::<f64>() / n as f64;
                s = (lp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            }
            if !(s > 1e-9) {
                s = 1.0;
            }
            median.push(m);
            scale.push(s);
        }
        Ok(FidelityCalibration { median, scale })
    }

    /// `sigmoid((log p(sample | class) - median) / scale)`.
    pub fn reward(&self, world: &World, sample: &Sample, class: usize) -> f64 {
        let lp = world.log_density(sample, Some(class));
        sigmoid((lp - self.median[class]) / self.scale[class])
    }
}

fn median_of(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Exact per-class first and second moments used as the metric reward's
/// reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStats {
    pub means: Vec<Vec2>,
    pub covs: Vec<Mat2>,
}

impl ReferenceStats {
    pub fn exact(world: &World) -> Result<Self> {
        let gmm = world
            .as_gmm()
            .ok_or_else(|| Error::Unsupported("metric reward on a discrete world".into()))?;
        let (means, covs) = (0..gmm.class_count())
            .map(|c| gmm.class_moments(Some(c)))
            .unzip();
        Ok(ReferenceStats { means, covs })
    }
}

/// Negative Fréchet distance of a sample set to the class reference. A
/// rank-deficient sample covariance is regularized and logged.
pub fn metric_reward(samples: &[Vec2], reference: &ReferenceStats, class: usize) -> Result<f64> {
    if samples.len() < FRECHET_MIN_SAMPLES {
        return Err(Error::precondition(format!(
            "metric reward needs at least {FRECHET_MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let fit = GaussianFit::fit(samples)?;
    if fit.is_degenerate() {
        log::warn!("metric reward: degenerate sample covariance regularized");
    }
    let ridge = crate::linalg::mat_add(
        &fit.cov,
        &crate::linalg::mat_scale(&crate::linalg::IDENTITY, crate::metrics::COV_RIDGE),
    );
    Ok(-frechet_gaussians(fit.mean, &ridge, reference.means[class], &reference.covs[class])?)
}
