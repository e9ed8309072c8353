//! Acceptance runner. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `ACCEPTANCE_ONLY=5,7` restricts the run.

mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use stepwise::agent::{AgentConfig, PolicyAgent};
use stepwise::checkpoint::Checkpoint;
use stepwise::config::RunConfig;
use stepwise::nn::{adam_step, OptState};
use stepwise::refine::{refine_generate, Lookahead, RefineConfig, Selection};
use stepwise::rewards::RewardModel;
use stepwise::rl::{
    advantage, calibrate, clipped_surrogate, derive_seed, ppo_loss, rollout, Control, RolloutOptions, Trainer,
    Trajectory, TrajectoryRng,
};
use stepwise::runner;
use stepwise::samplers::Paradigm;
use stepwise::transforms::{Rule, Schedule, Smoother};
use stepwise::worlds::{sample_gaussian, Sample, World};
use stepwise::{blend::train_fidelity_policy, metrics};
use support::*;

type Outcome = Result<String, String>;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const EVAL_SEED: u64 = 20_24;
const LAMBDAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Toy diffusion training length and evaluation size.
const DIFFUSION_ITERATIONS: usize = 200;
const DIFFUSION_EVAL: usize = 2000;
const STATIC_GUIDANCE: [f64; 5] = [0.0, 0.25, 0.5, 1.0, 2.0];

/// Long-horizon token training.
const TOKEN_HORIZON: usize = 32;
const TOKEN_ITERATIONS: usize = 100;
const TOKEN_BATCH: usize = 64;
const TOKEN_EVAL: usize = 2000;

const REFINE_EVAL: usize = 1000;
const LOOKAHEAD_PAIRS: usize = 1000;
const FIDELITY_ITERATIONS: usize = 200;
const SWEEP_EVAL: usize = 1000;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn nondecreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0])
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn gradients() -> Outcome {
    let (policy, value, disc) = gradient_check(120, 101);
    let worst = policy.max(value).max(disc);
    check(
        worst < 1e-4,
        format!("120 configs, max rel err policy {policy:.2e} value {value:.2e} discriminator {disc:.2e} (< 1e-4)"),
    )
}

/// Smallest `k` with `P(Binomial(n, p) > k) < alpha`.
fn binomial_upper(n: usize, p: f64, alpha: f64) -> usize {
    let mut pmf = (1.0 - p).powi(n as i32);
    let mut cdf = pmf;
    let mut k = 0;
    while 1.0 - cdf >= alpha {
        pmf *= (n - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
        cdf += pmf;
        k += 1;
    }
    k
}

fn predictors() -> Outcome {
    let eps = eps_score_check(1000, 202);
    let z = velocity_z_scores(100, 1_000_000, 203);
    let beyond3 = z.iter().filter(|v| **v > 3.0).count();
    // Two-sided 3-SE exceedance probability per coordinate.
    let allowed = binomial_upper(z.len(), 0.0027, 1e-3);
    let zmax = z.iter().copied().fold(0.0, f64::max);
    let tok = token_conditional_check(2000, 204);
    let ok = eps < 1e-5 && beyond3 <= allowed && zmax < 4.5 && tok < 1e-12;
    check(
        ok,
        format!(
            "eps rel err {eps:.2e} (< 1e-5, 1000 probes); velocity {beyond3}/{} coords beyond 3 SE (<= {allowed}), max |z| {zmax:.2} (< 4.5) at 1e6 draws; token max err {tok:.1e}",
            z.len()
        ),
    )
}

fn samplers() -> Outcome {
    let (exact, mc) = ar_reproduces_target(1_000_000, 301);
    let mut maskgit = Vec::new();
    for horizon in [1, 2, 4] {
        maskgit.push(maskgit_matches_enumeration(horizon, 1_000_000, 302 + horizon as u64));
    }
    let mg = maskgit.iter().copied().fold(0.0, f64::max);
    let ddim = ddim_single_gaussian(50, 10_000, 305);
    check(
        exact < 1e-12 && mc < 0.01 && mg < 0.01 && ddim < 0.01,
        format!(
            "AR enumeration TV {exact:.1e}, Monte Carlo TV {mc:.4} (< 0.01, 1e6); MaskGIT TV vs enumeration {} (< 0.01, 1e6); DDIM Frechet {ddim:.4} (< 0.01, T=50, 1e4)",
            fmt(&maskgit)
        ),
    )
}

fn small_batch(paradigm: Paradigm, horizon: usize, n: usize, seed: u64) -> (PolicyAgent, Vec<Trajectory>) {
    let e = env(paradigm, horizon, seed);
    let cfg = AgentConfig {
        hidden: vec![16, 16],
        output_gain: 0.3,
        ..Default::default()
    };
    let agent = PolicyAgent::init(e.layout(&cfg), &cfg, &mut rng(seed)).unwrap();
    let classes = e.world.class_count();
    let trajs = (0..n)
        .map(|j| {
            let mut r = TrajectoryRng::new(derive_seed(&[seed, j as u64]));
            let mut t = rollout(&e, Control::Single(&agent), j % classes, &RolloutOptions::default(), &mut r).unwrap();
            t.reward = (j as f64 * 0.61).fract();
            t
        })
        .collect();
    (agent, trajs)
}

fn ppo_contracts() -> Outcome {
    let paradigms = [Paradigm::Maskgit, Paradigm::Ar, Paradigm::Diffusion, Paradigm::Flow];
    let mut worst_ratio = 0.0f64;
    let mut clip_violations = 0;
    let mut unchanged = true;
    for (i, p) in paradigms.into_iter().enumerate() {
        let horizon = if p == Paradigm::Ar { 4 } else { 3 };
        let (mut agent, trajs) = small_batch(p, horizon, 32, 400 + i as u64);
        let adv: Vec<Vec<f64>> = trajs.iter().map(advantage).collect();
        let out = ppo_loss(&agent, &trajs, &adv, 0.2, 0.5).unwrap();
        worst_ratio = out.ratios.iter().fold(worst_ratio, |m, r| m.max((r - 1.0).abs()));

        let mut moved = agent.clone();
        for v in moved.params_mut() {
            *v *= 1.3;
        }
        let out = ppo_loss(&moved, &trajs, &adv, 0.2, 0.0).unwrap();
        let flat: Vec<f64> = adv.iter().flatten().copied().collect();
        clip_violations += out
            .ratios
            .iter()
            .zip(&flat)
            .filter(|(r, a)| clipped_surrogate(**r, **a, 0.2) > *r * *a)
            .count();

        let zero: Vec<Vec<f64>> = trajs.iter().map(|t| vec![0.0; t.steps.len()]).collect();
        let out = ppo_loss(&agent, &trajs, &zero, 0.2, 0.0).unwrap();
        let before = agent.param_hash();
        let mut opt = OptState::new(agent.params().len(), 3e-4, 0.9, 0.999);
        adam_step(agent.params_mut(), &out.grad, &mut opt).unwrap();
        unchanged &= agent.param_hash() == before;
    }

    let mut cfg = RunConfig::minimal(Paradigm::Diffusion, 4, 17);
    cfg.agent.hidden = vec![16, 16];
    cfg.reward.hidden = vec![16, 16];
    cfg.ppo.batch = 64;
    cfg.reward.batch = 64;
    cfg.ppo.eval_every = 2;
    cfg.ppo.eval_samples = 64;
    let run = || {
        let mut t = Trainer::new(cfg.env().unwrap(), &cfg.agent, cfg.ppo.clone(), cfg.reward.clone(), cfg.seed).unwrap();
        let logs = t.train_until(4, |_, _| Ok(())).unwrap();
        (Checkpoint::from_trainer(&cfg, &t).to_json(), logs.iter().map(|l| l.csv_row()).collect::<Vec<_>>())
    };
    let reproducible = run() == run();
    check(
        worst_ratio <= 1e-10 && clip_violations == 0 && unchanged && reproducible,
        format!(
            "first-update max |ratio-1| {worst_ratio:.1e}; clipped > unclipped {clip_violations} times; zero advantage unchanged {unchanged}; bit-reproducible {reproducible}"
        ),
    )
}

struct DiffusionRun {
    adaptive: Checkpoint,
    non_adaptive: Checkpoint,
}

fn train_checkpoint(cfg: &RunConfig, iterations: usize) -> Checkpoint {
    let mut t = Trainer::new(cfg.env().unwrap(), &cfg.agent, cfg.ppo.clone(), cfg.reward.clone(), cfg.seed).unwrap();
    t.set_coverage_radius(cfg.eval.coverage_radius);
    t.train_until(iterations, |_, _| Ok(())).unwrap();
    Checkpoint::from_trainer(cfg, &t)
}

fn diffusion_config(seed: u64, adaptive: bool) -> RunConfig {
    let mut cfg = RunConfig::minimal(Paradigm::Diffusion, 4, seed);
    cfg.agent.adaptive = adaptive;
    cfg.ppo.iterations = DIFFUSION_ITERATIONS;
    cfg.ppo.eval_every = 0;
    cfg
}

fn diffusion_runs() -> &'static [DiffusionRun] {
    static RUNS: OnceLock<Vec<DiffusionRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&s| DiffusionRun {
                adaptive: train_checkpoint(&diffusion_config(s, true), DIFFUSION_ITERATIONS),
                non_adaptive: train_checkpoint(&diffusion_config(s, false), DIFFUSION_ITERATIONS),
            })
            .collect()
    })
}

fn frechet_of(ckpt: &Checkpoint) -> f64 {
    runner::eval(ckpt, DIFFUSION_EVAL, EVAL_SEED).unwrap().metrics.frechet.unwrap()
}

fn learnable_beats_static() -> Outcome {
    let mut statics = Vec::new();
    for w in STATIC_GUIDANCE {
        let mut cfg = RunConfig::minimal(Paradigm::Diffusion, 4, 0);
        cfg.schedule = Some(Schedule {
            paradigm: Paradigm::Diffusion,
            rules: vec![Rule::UniformKappa, Rule::Constant { c: w }],
        });
        statics.push(runner::baseline(&cfg, DIFFUSION_EVAL, EVAL_SEED).unwrap().metrics.frechet.unwrap());
    }
    let best_static = statics.iter().copied().fold(f64::INFINITY, f64::min);
    let runs = diffusion_runs();
    let non: Vec<f64> = runs.iter().map(|r| frechet_of(&r.non_adaptive)).collect();
    let ada: Vec<f64> = runs.iter().map(|r| frechet_of(&r.adaptive)).collect();
    let (mn, ma) = (median(non.clone()), median(ada.clone()));
    check(
        mn <= best_static && ma <= mn,
        format!(
            "static grid {} best {best_static:.4}; non-adaptive {} median {mn:.4}; adaptive {} median {ma:.4}",
            fmt(&statics),
            fmt(&non),
            fmt(&ada)
        ),
    )
}

fn token_config(seed: u64, beta: f64) -> RunConfig {
    let mut cfg = RunConfig::minimal(Paradigm::Maskgit, TOKEN_HORIZON, seed);
    cfg.smoothing_beta = beta;
    cfg.ppo.batch = TOKEN_BATCH;
    cfg.ppo.iterations = TOKEN_ITERATIONS;
    cfg.ppo.eval_every = 0;
    cfg
}

struct TokenRun {
    smoothed: Checkpoint,
    raw: Checkpoint,
}

fn token_runs() -> &'static [TokenRun] {
    static RUNS: OnceLock<Vec<TokenRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&s| TokenRun {
                smoothed: train_checkpoint(&token_config(s, 0.8), TOKEN_ITERATIONS),
                raw: train_checkpoint(&token_config(s, 0.0), TOKEN_ITERATIONS),
            })
            .collect()
    })
}

fn smoothing_stabilizes() -> Outcome {
    let mut s = Smoother::new(0.8).unwrap();
    s.smooth(&[0.0]);
    let mut impulse_err = 0.0f64;
    for k in 0..30 {
        let raw = if k == 0 { 1.0 } else { 0.0 };
        let out = s.smooth(&[raw])[0];
        let expected = 0.2 * 0.8f64.powi(k);
        impulse_err = impulse_err.max((out - expected).abs() / expected);
    }
    let tv = |c: &Checkpoint| runner::eval(c, TOKEN_EVAL, EVAL_SEED).unwrap().metrics.tv.unwrap();
    let runs = token_runs();
    let smoothed: Vec<f64> = runs.iter().map(|r| tv(&r.smoothed)).collect();
    let raw: Vec<f64> = runs.iter().map(|r| tv(&r.raw)).collect();
    let (ms, mr) = (median(smoothed.clone()), median(raw.clone()));
    // Equal up to rounding of 0.8 and 1 - 0.8.
    check(
        ms <= mr && impulse_err < 1e-13,
        format!(
            "T={TOKEN_HORIZON} TV beta=0.8 {} median {ms:.4}; beta=0 {} median {mr:.4}; impulse response rel err {impulse_err:.1e}",
            fmt(&smoothed),
            fmt(&raw)
        ),
    )
}

fn refinement() -> Outcome {
    let runs = diffusion_runs();
    // Exact monotonicity of the best-of-M reward.
    let mut monotone = true;
    for run in runs.iter().take(2) {
        let e = run.adaptive.config.env().unwrap();
        let agent = run.adaptive.agent().unwrap();
        let model = run.adaptive.reward_model().unwrap().unwrap();
        for j in 0..100u64 {
            let class = j as usize % e.world.class_count();
            let rewards: Vec<f64> = (0..6)
                .map(|m| {
                    let cfg = RefineConfig {
                        m,
                        k: 2,
                        lookahead: false,
                    };
                    refine_generate(&e, Control::Single(&agent), &model, &cfg, class, derive_seed(&[EVAL_SEED, j]))
                        .unwrap()
                        .reward
                })
                .collect();
            monotone &= nondecreasing(&rewards);
        }
    }

    let nll = |c: &Checkpoint, m: usize| {
        let cfg = RefineConfig {
            m,
            k: 2,
            lookahead: false,
        };
        runner::refine(c, &cfg, REFINE_EVAL, EVAL_SEED).unwrap().metrics.avg_nll.unwrap()
    };
    let plain: Vec<f64> = runs.iter().map(|r| nll(&r.adaptive, 0)).collect();
    let refined: Vec<f64> = runs.iter().map(|r| nll(&r.adaptive, 3)).collect();
    let (mp, mr) = (median(plain.clone()), median(refined.clone()));

    let mut diffs = Vec::new();
    for run in token_runs() {
        let ckpt = &run.smoothed;
        let e = ckpt.config.env().unwrap();
        let agent = ckpt.agent().unwrap();
        let model = ckpt.reward_model().unwrap().unwrap();
        let mean_reward = |selection: Selection| {
            let opts = RolloutOptions {
                inference: true,
                lookahead: Some(Lookahead { k: 2, selection }),
            };
            let total: f64 = (0..LOOKAHEAD_PAIRS)
                .map(|j| {
                    let class = j % e.world.class_count();
                    let mut r = TrajectoryRng::new(derive_seed(&[EVAL_SEED, j as u64]));
                    let t = rollout(&e, Control::Single(&agent), class, &opts, &mut r).unwrap();
                    model.reward(&e.world, &t.sample, class).unwrap()
                })
                .sum();
            total / LOOKAHEAD_PAIRS as f64
        };
        diffs.push(mean_reward(Selection::Value) - mean_reward(Selection::Random));
    }
    let md = median(diffs.clone());
    check(
        monotone && mr <= mp && md >= 0.0,
        format!(
            "best-of-M nondecreasing {monotone}; NLL M=0 {} median {mp:.4}, M=3 {} median {mr:.4}; lookahead value minus random reward {} median {md:.4}",
            fmt(&plain),
            fmt(&refined),
            fmt(&diffs)
        ),
    )
}

fn blending() -> Outcome {
    let mut fidelity = vec![Vec::new(); LAMBDAS.len()];
    let mut coverage = vec![Vec::new(); LAMBDAS.len()];
    let mut hashes_kept = true;
    let mut endpoints_exact = true;
    for run in diffusion_runs() {
        let ckpt = &run.adaptive;
        let mut trainer = ckpt.restore_trainer().unwrap();
        let cal = calibrate(&trainer.env().world, &ckpt.config.reward, ckpt.config.seed).unwrap();
        let fr = train_fidelity_policy(&mut trainer, cal, FIDELITY_ITERATIONS).unwrap();
        hashes_kept &= fr.original_hash_before == fr.original_hash_after
            && fr.reward_hash_before == fr.reward_hash_after
            && fr.original_hash_before == ckpt.agent().unwrap().param_hash();
        let blended = Checkpoint::from_trainer(&ckpt.config, &trainer);
        let report = runner::sweep(&blended, &LAMBDAS, SWEEP_EVAL, EVAL_SEED).unwrap();
        for (i, row) in report.sweep.iter().enumerate() {
            fidelity[i].push(row.fidelity_reward);
            coverage[i].push(row.metrics.mode_cov.unwrap());
        }

        let e = ckpt.config.env().unwrap();
        let base = ckpt.agent().unwrap();
        let learner = &fr.fidelity_agent;
        for j in 0..50u64 {
            let class = j as usize % e.world.class_count();
            for inference in [true, false] {
                let opts = RolloutOptions {
                    inference,
                    lookahead: None,
                };
                let go = |c: Control<'_>| {
                    let t = rollout(&e, c, class, &opts, &mut TrajectoryRng::new(derive_seed(&[EVAL_SEED, j]))).unwrap();
                    t.steps.iter().map(|s| s.action).collect::<Vec<_>>()
                };
                let blend = |lambda| Control::Blend {
                    base: &base,
                    learner,
                    lambda,
                };
                endpoints_exact &= go(blend(1.0)) == go(Control::Single(learner));
                if inference {
                    endpoints_exact &= go(blend(0.0)) == go(Control::Single(&base));
                }
            }
        }
    }
    let fid: Vec<f64> = fidelity.into_iter().map(median).collect();
    let cov: Vec<f64> = coverage.into_iter().map(median).collect();
    let cov_rev: Vec<f64> = cov.iter().rev().copied().collect();
    check(
        nondecreasing(&fid) && nondecreasing(&cov_rev) && hashes_kept && endpoints_exact,
        format!(
            "lambda {LAMBDAS:?}: median fidelity reward {}, median mode coverage {}; endpoints exact {endpoints_exact}; frozen hashes kept {hashes_kept}",
            fmt(&fid),
            fmt(&cov)
        ),
    )
}

fn adversarial_reward() -> Outcome {
    let world = World::Gmm(gmm_world(9));
    let same = discriminator_accuracy(
        &world,
        |r, c| world.sample_target(c, r),
        |r, c| world.sample_target(c, r),
        200,
        128,
        901,
    );
    let cov = [[0.1, 0.0], [0.0, 0.1]];
    let apart = discriminator_accuracy(
        &world,
        |r, _| Sample::Point(sample_gaussian([3.0, 3.0], &cov, r)),
        |r, _| Sample::Point(sample_gaussian([-3.0, -3.0], &cov, r)),
        200,
        64,
        902,
    );
    let mut model = RewardModel::init(&world, &[16, 16], &mut rng(903)).unwrap();
    for p in model.params_mut() {
        *p *= 1e4;
    }
    let mut r = rng(904);
    let mut outside = 0;
    for j in 0..5000 {
        let far = [(j as f64 - 2500.0) * 100.0, if j % 3 == 0 { 1e6 } else { -1e6 }];
        let s = if j % 2 == 0 { Sample::Point(far) } else { world.sample_target(j % 4, &mut r) };
        let v = model.reward(&world, &s, j % 4).unwrap();
        if !(v > 0.0 && v < 1.0) {
            outside += 1;
        }
    }
    check(
        (0.4..=0.6).contains(&same) && apart > 0.95 && outside == 0,
        format!("identical accuracy {same:.3} (in [0.4, 0.6]); separable accuracy {apart:.3} (> 0.95); rewards outside (0,1): {outside}"),
    )
}

fn metric_correctness() -> Outcome {
    let (shift, cov) = frechet_analytic_cases(100_000, 1001);
    let back = sqrt_multiply_back(10_000, 1002);
    let bad = tv_axiom_violations(10_000, 1003);
    let mismatch = metrics::tv_distance(&[0.5, 0.5], &[1.0]).is_err();
    check(
        (shift - 1.0).abs() < 0.05 && (cov - 2.0).abs() < 0.05 && back < 1e-10 && bad == 0 && mismatch,
        format!("mean shift {shift:.4} (1 +- 0.05); covariance {cov:.4} (2 +- 0.05) at 1e5; sqrt multiply-back {back:.1e}; TV axiom violations {bad}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradients),
        ("predictor exactness", predictors),
        ("sampler exactness", samplers),
        ("PPO contracts", ppo_contracts),
        ("learnable beats static", learnable_beats_static),
        ("smoothing stabilizes large T", smoothing_stabilizes),
        ("refinement improves outcomes", refinement),
        ("blending monotonicity", blending),
        ("adversarial reward sanity", adversarial_reward),
        ("metric correctness", metric_correctness),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} {name}: PASS ({d}) [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({d}) [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
