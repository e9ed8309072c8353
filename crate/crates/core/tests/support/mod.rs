//! Oracle checks shared by the integration tests and the acceptance runner.
//! Each check takes its sample sizes as arguments and returns the measured
//! statistic, so tests can run them small and the acceptance runner at full
//! size.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stepwise::agent::{AgentConfig, PolicyAgent};
use stepwise::config::RunConfig;
use stepwise::linalg::{self, Mat2, Vec2};
use stepwise::metrics::{self, frechet_gaussians, GaussianFit};
use stepwise::nn::{Activation, GradVector};
use stepwise::rewards::RewardModel;
use stepwise::rl::{advantage, ppo_loss, rollout, Control, Env, RolloutOptions, Trajectory, TrajectoryRng};
use stepwise::samplers::{initial_state, transition, Action, Paradigm};
use stepwise::transforms::{baseline_action, Schedule};
use stepwise::worlds::{
    enumerate_final_distribution, DiscreteWorld, DiscreteWorldConfig, GmmWorld, GmmWorldConfig, Sample, World,
    WorldConfig,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn discrete_world(seed: u64) -> DiscreteWorld {
    DiscreteWorld::build(&DiscreteWorldConfig {
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn gmm_world(seed: u64) -> GmmWorld {
    GmmWorld::build(&GmmWorldConfig {
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Small-world environment for `paradigm` with the default schedule.
pub fn env(paradigm: Paradigm, horizon: usize, seed: u64) -> Env {
    let mut cfg = RunConfig::minimal(paradigm, horizon, seed);
    cfg.world = Some(if paradigm.is_discrete() {
        WorldConfig::Discrete(DiscreteWorldConfig {
            seed,
            ..Default::default()
        })
    } else {
        WorldConfig::Gmm(GmmWorldConfig {
            seed,
            ..Default::default()
        })
    });
    cfg.env().unwrap()
}

/// Relative error with the floor used by the network checks.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(floor))
        .fold(0.0, f64::max)
}

fn central_diff(params: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            let orig = params[i];
            params[i] = orig + h;
            let up = f(params);
            params[i] = orig - h;
            let down = f(params);
            params[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst relative error over `configs` random setups for the three losses:
/// policy (clipped surrogate only), value regression only, and the
/// discriminator's cross-entropy. Returns `(policy, value, discriminator)`.
pub fn gradient_check(configs: usize, seed: u64) -> (f64, f64, f64) {
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    let paradigms = [Paradigm::Maskgit, Paradigm::Ar, Paradigm::Diffusion, Paradigm::Flow];
    for i in 0..configs {
        let mut r = rng(seed ^ (i as u64).wrapping_mul(0x9e37_79b9));
        let paradigm = paradigms[i % 4];
        let horizon = match paradigm {
            Paradigm::Ar => 4,
            _ => r.random_range(1..=5),
        };
        let e = env(paradigm, horizon, r.random_range(0..1000));
        let cfg = AgentConfig {
            hidden: (0..r.random_range(1..=2)).map(|_| r.random_range(2..=6)).collect(),
            activation: if r.random::<bool>() { Activation::Tanh } else { Activation::Relu },
            adaptive: r.random::<bool>(),
            step_cond: r.random::<bool>(),
            output_gain: 0.5,
            ..Default::default()
        };
        let mut agent = PolicyAgent::init(e.layout(&cfg), &cfg, &mut r).unwrap();
        let classes = e.world.class_count();
        let mut batch: Vec<Trajectory> = (0..3)
            .map(|j| {
                let mut tr = TrajectoryRng::new(r.random());
                rollout(&e, Control::Single(&agent), j % classes, &RolloutOptions::default(), &mut tr).unwrap()
            })
            .collect();
        for t in &mut batch {
            t.reward = r.random_range(0.0..1.0);
        }
        // Move the policy away from the behaviour policy so ratios differ from 1.
        for p in agent.params_mut() {
            *p += 0.02 * r.random_range(-1.0..1.0);
        }
        let adv: Vec<Vec<f64>> = batch.iter().map(advantage).collect();
        let zero_adv: Vec<Vec<f64>> = adv.iter().map(|a| vec![0.0; a.len()]).collect();

        for (which, advs, coef) in [(0, &adv, 0.0), (1, &zero_adv, 1.0)] {
            let analytic = ppo_loss(&agent, &batch, advs, 0.2, coef).unwrap().grad;
            let mut probe = agent.clone();
            let mut params = probe.params().to_vec();
            let numeric = central_diff(&mut params, 1e-6, |p| {
                probe.params_mut().copy_from_slice(p);
                ppo_loss(&probe, &batch, advs, 0.2, coef).unwrap().loss
            });
            let err = rel_err(&analytic.0, &numeric);
            if which == 0 {
                worst.0 = worst.0.max(err);
            } else {
                worst.1 = worst.1.max(err);
            }
        }

        let hidden: Vec<usize> = (0..r.random_range(1..=2)).map(|_| r.random_range(2..=6)).collect();
        let model = RewardModel::init(&e.world, &hidden, &mut r).unwrap();
        let real: Vec<(Sample, usize)> = (0..4).map(|j| (e.world.sample_target(j % classes, &mut r), j % classes)).collect();
        let fake: Vec<(Sample, usize)> = batch.iter().map(|t| (t.sample.clone(), t.class)).collect();
        let smoothing = r.random::<bool>();
        let (_, analytic) = model.bce_loss_grad(&e.world, &real, &fake, smoothing).unwrap();
        let mut probe = model.clone();
        let mut params = probe.params().to_vec();
        let numeric = central_diff(&mut params, 1e-6, |p| {
            probe.params_mut().copy_from_slice(p);
            probe.bce_loss_grad(&e.world, &real, &fake, smoothing).unwrap().0
        });
        worst.2 = worst.2.max(rel_err(&analytic.0, &numeric));
    }
    worst
}

/// Worst relative error of the exact noise prediction against a five-point
/// numerical gradient of the noised log-density.
pub fn eps_score_check(probes: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..probes {
        let world = gmm_world(i as u64 % 7);
        let class = if r.random_bool(0.2) {
            None
        } else {
            Some(r.random_range(0..world.class_count()))
        };
        let kappa = r.random_range(1.0..999.0);
        let x = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
        let h = 1e-3;
        let f = |p: Vec2| world.noised_log_density(p, kappa, class);
        let mut grad = [0.0; 2];
        for (d, g) in grad.iter_mut().enumerate() {
            let at = |s: f64| {
                let mut p = x;
                p[d] += s * h;
                f(p)
            };
            *g = (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * h);
        }
        let ab = stepwise::worlds::alpha_bar(kappa);
        let want = linalg::scale(grad, -(1.0 - ab).sqrt());
        let got = world.eps_score(x, kappa, class);
        let err = linalg::sub(got, want);
        let rel = linalg::dot(err, err).sqrt() / linalg::dot(want, want).sqrt().max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Self-normalized importance estimate of `E[noise - x0 | x_kappa = x]`
/// from `draws` target samples, with its delta-method standard error.
pub fn velocity_snis(world: &GmmWorld, x: Vec2, kappa: f64, class: Option<usize>, draws: usize, r: &mut ChaCha8Rng) -> (Vec2, Vec2) {
    let mut sw = 0.0;
    let mut logs = Vec::with_capacity(draws);
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        let x0 = world.sample(class, r);
        let noise = linalg::scale(linalg::sub(x, linalg::scale(x0, 1.0 - kappa)), 1.0 / kappa);
        logs.push(-0.5 * linalg::dot(noise, noise));
        vals.push(linalg::sub(noise, x0));
    }
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let mut est = [0.0; 2];
    for (wi, v) in w.iter().zip(&vals) {
        sw += wi;
        est = linalg::add(est, linalg::scale(*v, *wi));
    }
    est = linalg::scale(est, 1.0 / sw);
    let mut var = [0.0; 2];
    for (wi, v) in w.iter().zip(&vals) {
        for d in 0..2 {
            var[d] += wi * wi * (v[d] - est[d]).powi(2);
        }
    }
    let se = [var[0].sqrt() / sw, var[1].sqrt() / sw];
    (est, se)
}

/// Standardized errors `|exact - estimate| / SE` of the exact velocity at
/// `probes` points, two coordinates per probe. Probe points are drawn from
/// the interpolation marginal itself.
pub fn velocity_z_scores(probes: usize, draws: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let world = gmm_world(seed % 5);
    let mut out = Vec::with_capacity(2 * probes);
    for _ in 0..probes {
        let class = Some(r.random_range(0..world.class_count()));
        let kappa = r.random_range(0.1..1.0);
        let x0 = world.sample(class, &mut r);
        let noise: Vec2 = [r.sample(StandardNormal), r.sample(StandardNormal)];
        let x = linalg::add(linalg::scale(x0, 1.0 - kappa), linalg::scale(noise, kappa));
        let exact = world.velocity(x, kappa, class).unwrap();
        let (est, se) = velocity_snis(&world, x, kappa, class, draws, &mut r);
        for d in 0..2 {
            out.push((exact[d] - est[d]).abs() / se[d].max(1e-300));
        }
    }
    out
}

/// Largest absolute difference between the exact token conditional and a
/// brute-force sum over the joint table, over `cases` random partial grids.
pub fn token_conditional_check(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..cases {
        let world = discrete_world(i as u64 % 5);
        let g = world.grid();
        let class = if r.random_bool(0.2) {
            None
        } else {
            Some(r.random_range(0..world.classes()))
        };
        let mut observed: Vec<Option<usize>> = (0..g)
            .map(|_| r.random_bool(0.5).then(|| r.random_range(0..world.vocab())))
            .collect();
        let free: Vec<usize> = (0..g).filter(|&p| observed[p].is_none()).collect();
        let position = if free.is_empty() {
            let p = r.random_range(0..g);
            observed[p] = None;
            p
        } else {
            free[r.random_range(0..free.len())]
        };
        let got = world.token_conditional(&observed, class, position).unwrap();
        let table = world.table(class);
        let mut want = vec![0.0; world.vocab()];
        for (idx, p) in table.iter().enumerate() {
            let toks = world.decode(idx);
            if observed.iter().zip(&toks).all(|(o, t)| o.is_none_or(|o| o == *t)) {
                want[toks[position]] += p;
            }
        }
        let total: f64 = want.iter().sum();
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b / total).abs());
        }
    }
    worst
}

pub fn neutral_ar(vocab: usize) -> Action {
    Action::Ar {
        temperature: 1.0,
        guidance: 0.0,
        top_k: vocab,
        top_p: 1.0,
    }
}

/// Default MaskGIT schedule actions with zero mask temperature.
pub fn maskgit_actions(horizon: usize, vocab: usize) -> Vec<Action> {
    let s = Schedule::default_for(Paradigm::Maskgit, vocab);
    (0..horizon)
        .map(|t| match baseline_action(&s, t, horizon, vocab).unwrap() {
            Action::Maskgit {
                mask_ratio,
                temperature,
                guidance,
                ..
            } => Action::Maskgit {
                mask_ratio,
                temperature,
                mask_temperature: 0.0,
                guidance,
            },
            a => a,
        })
        .collect()
}

/// Empirical final-grid distribution of `n` runs of a fixed action sequence.
pub fn empirical_final(world: &DiscreteWorld, paradigm: Paradigm, actions: &[Action], class: usize, n: usize, seed: u64) -> Vec<f64> {
    let w = World::Discrete(world.clone());
    let mut r = rng(seed);
    let mut counts = vec![0.0; world.config_count()];
    for _ in 0..n {
        let mut s = initial_state(paradigm, &w, class, actions.len(), &mut r).unwrap();
        for a in actions {
            s = transition(paradigm, &s, a, &w, &mut r).unwrap();
        }
        let toks = s.sample().unwrap();
        counts[world.encode(toks.as_tokens().unwrap())] += 1.0;
    }
    counts.iter().map(|c| c / n as f64).collect()
}

/// `(TV(enumeration, target), TV(Monte Carlo, target))` for the neutral
/// autoregressive sampler.
pub fn ar_reproduces_target(samples: usize, seed: u64) -> (f64, f64) {
    let world = discrete_world(seed);
    let actions = vec![neutral_ar(world.vocab()); world.grid()];
    let class = (seed as usize) % world.classes();
    let exact = enumerate_final_distribution(&world, Paradigm::Ar, &actions, class).unwrap();
    let mc = empirical_final(&world, Paradigm::Ar, &actions, class, samples, seed + 1);
    let target = world.table(Some(class));
    (
        metrics::tv_distance(&exact, target).unwrap(),
        metrics::tv_distance(&mc, target).unwrap(),
    )
}

/// TV between Monte-Carlo MaskGIT runs and the enumeration oracle.
pub fn maskgit_matches_enumeration(horizon: usize, samples: usize, seed: u64) -> f64 {
    let world = discrete_world(seed);
    let actions = maskgit_actions(horizon, world.vocab());
    let class = (seed as usize) % world.classes();
    let exact = enumerate_final_distribution(&world, Paradigm::Maskgit, &actions, class).unwrap();
    let mc = empirical_final(&world, Paradigm::Maskgit, &actions, class, samples, seed + 1);
    metrics::tv_distance(&exact, &mc).unwrap()
}

/// Fréchet distance between the deterministic diffusion sampler's output
/// on a single Gaussian (exact noise prediction, uniform timesteps) and that
/// Gaussian.
pub fn ddim_single_gaussian(horizon: usize, samples: usize, seed: u64) -> f64 {
    let mean = [1.5, -0.7];
    let cov: Mat2 = [[0.8, 0.3], [0.3, 0.5]];
    let w = World::Gmm(GmmWorld::single_gaussian(mean, cov).unwrap());
    let s = Schedule::default_for(Paradigm::Diffusion, 0);
    let actions: Vec<Action> = (0..horizon).map(|t| baseline_action(&s, t, horizon, 0).unwrap()).collect();
    let mut r = rng(seed);
    let pts: Vec<Vec2> = (0..samples)
        .map(|_| {
            let mut st = initial_state(Paradigm::Diffusion, &w, 0, horizon, &mut r).unwrap();
            for a in &actions {
                st = transition(Paradigm::Diffusion, &st, a, &w, &mut r).unwrap();
            }
            st.sample().unwrap().as_point().unwrap()
        })
        .collect();
    let fit = GaussianFit::fit(&pts).unwrap();
    frechet_gaussians(fit.mean, &fit.cov, mean, &cov).unwrap()
}

/// Draws `n` points from `N(mean, cov)`.
pub fn gaussian_points(mean: Vec2, cov: &Mat2, n: usize, r: &mut ChaCha8Rng) -> Vec<Vec2> {
    (0..n).map(|_| stepwise::worlds::sample_gaussian(mean, cov, r)).collect()
}

/// Sample Fréchet distances for the mean-shift case (exact value 1) and
/// the covariance case (exact value 2).
pub fn frechet_analytic_cases(n: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let id = linalg::IDENTITY;
    let a = gaussian_points([0.0, 0.0], &id, n, &mut r);
    let b = gaussian_points([1.0, 0.0], &id, n, &mut r);
    let shift = metrics::frechet_2d(&a, &b).unwrap();
    let s = 1.0 + 2f64.sqrt();
    let c = gaussian_points([0.0, 0.0], &[[s * s, 0.0], [0.0, 1.0]], n, &mut r);
    let d = gaussian_points([0.0, 0.0], &id, n, &mut r);
    let covariance = metrics::frechet_2d(&c, &d).unwrap();
    (shift, covariance)
}

pub fn random_spd(r: &mut ChaCha8Rng) -> Mat2 {
    let a: Mat2 = [
        [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)],
        [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)],
    ];
    let m = linalg::mat_mul(&a, &linalg::transpose(&a));
    linalg::mat_add(&m, &linalg::mat_scale(&linalg::IDENTITY, r.random_range(1e-3..1.0)))
}

/// Worst element of `|sqrt(M)^2 - M|` over random SPD matrices.
pub fn sqrt_multiply_back(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let m = random_spd(&mut r);
        let s = metrics::sqrt_spd_2x2(&m).unwrap();
        let back = linalg::mat_mul(&s, &s);
        for i in 0..2 {
            for j in 0..2 {
                worst = worst.max((back[i][j] - m[i][j]).abs());
            }
        }
    }
    worst
}

fn random_dist(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| r.random::<f64>().powi(3)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Number of random triples violating a metric axiom of total variation.
pub fn tv_axiom_violations(triples: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..triples {
        let n = r.random_range(2..20);
        let p = random_dist(&mut r, n);
        let q = random_dist(&mut r, n);
        let s = random_dist(&mut r, n);
        let tv = |a: &[f64], b: &[f64]| metrics::tv_distance(a, b).unwrap();
        let ok = tv(&p, &p) == 0.0
            && (0.0..=1.0).contains(&tv(&p, &q))
            && tv(&p, &q) == tv(&q, &p)
            && tv(&p, &s) <= tv(&p, &q) + tv(&q, &s) + 1e-12
            && (p != q) == (tv(&p, &q) > 0.0);
        if !ok {
            bad += 1;
        }
    }
    bad
}

/// Trains a fresh discriminator on the given real and fake generators and
/// returns its held-out accuracy.
pub fn discriminator_accuracy(
    world: &World,
    real: impl Fn(&mut ChaCha8Rng, usize) -> Sample,
    fake: impl Fn(&mut ChaCha8Rng, usize) -> Sample,
    updates: usize,
    batch: usize,
    seed: u64,
) -> f64 {
    use stepwise::nn::OptState;
    use stepwise::rewards::disc_update;
    let classes = world.class_count();
    let mut r = rng(seed);
    let mut model = RewardModel::init(world, &[32, 32], &mut r).unwrap();
    let mut opt = OptState::new(model.params().len(), 1e-3, 0.5, 0.999);
    let draw = |r: &mut ChaCha8Rng, g: &dyn Fn(&mut ChaCha8Rng, usize) -> Sample, n: usize| -> Vec<(Sample, usize)> {
        (0..n).map(|j| (g(r, j % classes), j % classes)).collect()
    };
    for _ in 0..updates {
        let re = draw(&mut r, &real, batch);
        let fa = draw(&mut r, &fake, batch);
        disc_update(&mut model, world, &re, &fa, &mut opt, false).unwrap();
    }
    let re = draw(&mut r, &real, 2000);
    let fa = draw(&mut r, &fake, 2000);
    model.accuracy(world, &re, &fa).unwrap()
}

pub fn grad_is_zero(g: &GradVector) -> bool {
    g.0.iter().all(|v| *v == 0.0)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
