//! Experiment commands: train, eval, baseline, refine and the blend sweep.
//! Each writes self-describing JSON reports and CSV tables.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blend::train_fidelity_policy;
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, Metrics};
use crate::refine::{refine_generate, RefineConfig};
use crate::rl::{calibrate, derive_seed, generate, Control, Env, IterationLog, RolloutOptions, Trainer, TrajectoryRng};
use crate::samplers::{initial_state, transition, Action};
use crate::transforms::{baseline_action, Schedule};
use crate::worlds::Sample;

pub const CKPT_FILE: &str = "ckpt.json";
pub const BLEND_CKPT_FILE: &str = "ckpt_blend.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.json";
pub const EVAL_CSV_FILE: &str = "eval.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRow {
    pub m: usize,
    pub k: usize,
    pub lookahead: bool,
    pub mean_reward: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub fidelity_reward: f64,
    pub metrics: Metrics,
}

/// Output of every evaluation-style command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub samples_per_class: usize,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedule_actions: Vec<Action>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refine: Vec<RefineRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepRow>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

const METRIC_COLUMNS: &str = "frechet,tv,mode_cov,avg_nll";

fn metric_cells(m: &Metrics) -> String {
    format!("{},{},{},{}", opt(m.frechet), opt(m.tv), opt(m.mode_cov), opt(m.avg_nll))
}

/// Per-class metrics table.
pub fn eval_csv(metrics: &Metrics) -> String {
    let mut s = format!("class,samples,{METRIC_COLUMNS}\n");
    for c in &metrics.per_class {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.class,
            c.samples,
            opt(c.frechet),
            opt(c.tv),
            opt(c.mode_cov),
            opt(c.avg_nll)
        ));
    }
    s
}

pub fn refine_csv(rows: &[RefineRow]) -> String {
    let mut s = format!("m,k,lookahead,mean_reward,{METRIC_COLUMNS}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:e},{}\n", r.m, r.k, r.lookahead, r.mean_reward, metric_cells(&r.metrics)));
    }
    s
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("lambda,fidelity_reward,{METRIC_COLUMNS}\n");
    for r in rows {
        s.push_str(&format!("{},{:e},{}\n", r.lambda, r.fidelity_reward, metric_cells(&r.metrics)));
    }
    s
}

/// Writes `report.json` plus the command's CSV table into `out`.
pub fn write_report(out: &Path, report: &Report) -> Result<()> {
    write_atomic(&out.join(REPORT_FILE), report.to_json().as_bytes())?;
    write_atomic(&out.join(EVAL_CSV_FILE), eval_csv(&report.metrics).as_bytes())?;
    if !report.refine.is_empty() {
        write_atomic(&out.join("refine.csv"), refine_csv(&report.refine).as_bytes())?;
    }
    if !report.sweep.is_empty() {
        write_atomic(&out.join("sweep.csv"), sweep_csv(&report.sweep).as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub trainer: Trainer,
    pub logs: Vec<IterationLog>,
}

fn read_log_prefix(path: &Path, keep_before: usize) -> Result<Vec<String>> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|i| i.parse::<usize>().ok())
                .is_some_and(|i| i < keep_before)
        })
        .map(str::to_owned)
        .collect())
}

/// Trains (or resumes) up to `iterations` total iterations, writing the
/// checkpoint every `checkpoint_every` iterations and at the end, and the
/// per-iteration CSV log.
pub fn train(config: &RunConfig, out: &Path, iterations: Option<usize>, resume: Option<&Checkpoint>) -> Result<TrainSummary> {
    let (config, mut trainer) = match resume {
        Some(ckpt) => (ckpt.config.clone(), ckpt.restore_trainer()?),
        None => {
            let mut t = Trainer::new(config.env()?, &config.agent, config.ppo.clone(), config.reward.clone(), config.seed)?;
            t.set_coverage_radius(config.eval.coverage_radius);
            (config.clone(), t)
        }
    };
    let total = iterations.unwrap_or(config.ppo.iterations);
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut rows = if resume.is_some() {
        read_log_prefix(&log_path, trainer.iteration())?
    } else {
        Vec::new()
    };
    let save = |trainer: &Trainer, rows: &[String]| -> Result<()> {
        Checkpoint::from_trainer(&config, trainer).save(&out.join(CKPT_FILE))?;
        let mut csv = String::from(IterationLog::CSV_HEADER);
        csv.push('\n');
        for r in rows {
            csv.push_str(r);
            csv.push('\n');
        }
        write_atomic(&log_path, csv.as_bytes())
    };
    let every = config.checkpoint_every;
    let mut logs = Vec::new();
    while trainer.iteration() < total {
        match trainer.step() {
            Ok(log) => {
                log::info!(
                    "iteration {} mean_reward {:.4} ppo_loss {:.4e} disc_loss {:.4}",
                    log.iteration,
                    log.mean_reward,
                    log.ppo_loss,
                    log.disc_loss
                );
                rows.push(log.csv_row());
                logs.push(log);
                if every > 0 && trainer.iteration() % every == 0 && trainer.iteration() < total {
                    save(&trainer, &rows)?;
                }
            }
            Err(e) => {
                save(&trainer, &rows)?;
                return Err(e);
            }
        }
    }
    save(&trainer, &rows)?;
    Ok(TrainSummary { trainer, logs })
}

/// Inference-mode metrics of a trained agent.
pub fn eval(ckpt: &Checkpoint, samples: usize, seed: u64) -> Result<Report> {
    let env = ckpt.config.env()?;
    let agent = ckpt.agent()?;
    let groups = generate(&env, Control::Single(&agent), samples, seed, &RolloutOptions {
        inference: true,
        lookahead: None,
    })?;
    Ok(Report {
        command: "eval".into(),
        config: ckpt.config.clone(),
        seed,
        samples_per_class: samples,
        metrics: metrics::compute(&env.world, &groups, ckpt.config.eval.coverage_radius)?,
        schedule_actions: Vec::new(),
        refine: Vec::new(),
        sweep: Vec::new(),
    })
}

/// One generation driven by a static schedule.
pub fn rollout_static(env: &Env, schedule: &Schedule, class: usize, rng: &mut TrajectoryRng) -> Result<(Sample, Vec<Action>)> {
    let vocab = env.world.as_discrete().map(|d| d.vocab()).unwrap_or(0);
    let mut state = initial_state(env.paradigm, &env.world, class, env.horizon, &mut rng.env)?;
    let mut actions = Vec::with_capacity(env.horizon);
    for t in 0..env.horizon {
        let action = baseline_action(schedule, t, env.horizon, vocab)?;
        state = transition(env.paradigm, &state, &action, &env.world, &mut rng.env)?;
        actions.push(action);
    }
    let sample = state
        .sample()
        .ok_or_else(|| Error::precondition("generation ended with masked tokens"))?;
    Ok((sample, actions))
}

/// Samples of a static schedule, grouped by class, with the streams used by
/// [`generate`].
pub fn generate_static(env: &Env, schedule: &Schedule, samples: usize, seed: u64) -> Result<Vec<Vec<Sample>>> {
    (0..env.world.class_count())
        .map(|c| {
            (0..samples)
                .into_par_iter()
                .map(|j| {
                    let mut rng = TrajectoryRng::new(derive_seed(&[seed, c as u64, j as u64]));
                    Ok(rollout_static(env, schedule, c, &mut rng)?.0)
                })
                .collect()
        })
        .collect()
}

/// Metrics of the config's hand-crafted schedule.
pub fn baseline(config: &RunConfig, samples: usize, seed: u64) -> Result<Report> {
    let env = config.env()?;
    let schedule = config
        .schedule
        .as_ref()
        .ok_or_else(|| Error::config("schedule", "missing"))?;
    let vocab = env.world.as_discrete().map(|d| d.vocab()).unwrap_or(0);
    let schedule_actions = (0..env.horizon)
        .map(|t| baseline_action(schedule, t, env.horizon, vocab))
        .collect::<Result<_>>()?;
    let groups = generate_static(&env, schedule, samples, seed)?;
    Ok(Report {
        command: "baseline".into(),
        config: config.clone(),
        seed,
        samples_per_class: samples,
        metrics: metrics::compute(&env.world, &groups, config.eval.coverage_radius)?,
        schedule_actions,
        refine: Vec::new(),
        sweep: Vec::new(),
    })
}

/// Best-of-(M+1) generation with optional lookahead; sample `j` of class `c`
/// starts from the same stream as in [`eval`].
pub fn refine(ckpt: &Checkpoint, refine_cfg: &RefineConfig, samples: usize, seed: u64) -> Result<Report> {
    let env = ckpt.config.env()?;
    refine_cfg.validate(env.paradigm)?;
    let agent = ckpt.agent()?;
    let model = ckpt
        .reward_model()?
        .ok_or_else(|| Error::precondition("refinement needs the adversarial reward model in the checkpoint"))?;
    let mut groups = Vec::new();
    let mut reward_sum = 0.0;
    for c in 0..env.world.class_count() {
        let results: Vec<Result<_>> = (0..samples)
            .into_par_iter()
            .map(|j| {
                refine_generate(&env, Control::Single(&agent), &model, refine_cfg, c, derive_seed(&[seed, c as u64, j as u64]))
            })
            .collect();
        let mut group = Vec::with_capacity(samples);
        for r in results {
            let r = r?;
            reward_sum += r.reward;
            group.push(r.sample);
        }
        groups.push(group);
    }
    let metrics = metrics::compute(&env.world, &groups, ckpt.config.eval.coverage_radius)?;
    let mut config = ckpt.config.clone();
    config.refine = *refine_cfg;
    Ok(Report {
        command: "refine".into(),
        config,
        seed,
        samples_per_class: samples,
        refine: vec![RefineRow {
            m: refine_cfg.m,
            k: refine_cfg.k,
            lookahead: refine_cfg.lookahead,
            mean_reward: reward_sum / (samples * env.world.class_count()).max(1) as f64,
            metrics: metrics.clone(),
        }],
        metrics,
        schedule_actions: Vec::new(),
        sweep: Vec::new(),
    })
}

/// Trains the fidelity policy next to a frozen checkpoint and returns the
/// blended checkpoint.
pub fn train_blend(ckpt: &Checkpoint, iterations: Option<usize>) -> Result<Checkpoint> {
    let mut trainer = ckpt.restore_trainer()?;
    let calibration = calibrate(&trainer.env().world, &ckpt.config.reward, ckpt.config.seed)?;
    let run = train_fidelity_policy(&mut trainer, calibration, iterations.unwrap_or(ckpt.config.blend.iterations))?;
    if run.original_hash_before != run.original_hash_after || run.reward_hash_before != run.reward_hash_after {
        return Err(Error::precondition("frozen networks changed during fidelity training"));
    }
    Ok(Checkpoint::from_trainer(&ckpt.config, &trainer))
}

/// Evaluates the blended policy at every `lambda`.
pub fn sweep(ckpt: &Checkpoint, lambdas: &[f64], samples: usize, seed: u64) -> Result<Report> {
    let env = ckpt.config.env()?;
    let base = ckpt.agent()?;
    let learner = ckpt
        .fidelity_agent()?
        .ok_or_else(|| Error::precondition("the checkpoint has no fidelity policy"))?;
    let calibration = calibrate(&env.world, &ckpt.config.reward, ckpt.config.seed)?;
    let options = RolloutOptions {
        inference: true,
        lookahead: None,
    };
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config("lambda", format!("{lambda} is outside [0, 1]")));
        }
        let control = Control::Blend {
            base: &base,
            learner: &learner,
            lambda,
        };
        let groups = generate(&env, control, samples, seed, &options)?;
        let mut total = 0.0;
        let mut n = 0usize;
        for (c, g) in groups.iter().enumerate() {
            for s in g {
                total += calibration.reward(&env.world, s, c);
                n += 1;
            }
        }
        rows.push(SweepRow {
            lambda,
            fidelity_reward: total / n.max(1) as f64,
            metrics: metrics::compute(&env.world, &groups, ckpt.config.blend.coverage_radius)?,
        });
    }
    let first = rows
        .first()
        .map(|r| r.metrics.clone())
        .ok_or_else(|| Error::config("lambda", "needs at least one value"))?;
    Ok(Report {
        command: "sweep".into(),
        config: ckpt.config.clone(),
        seed,
        samples_per_class: samples,
        metrics: first,
        schedule_actions: Vec::new(),
        refine: Vec::new(),
        sweep: rows,
    })
}
