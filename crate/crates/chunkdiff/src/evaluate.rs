//! Closed-loop evaluation on the synthetic task suite.
//!
//! All trials of one evaluation seed advance in lockstep: every trial that is
//! waiting for a new chunk is observed, the whole group goes through one batched
//! inference call, and each trial then executes its chunk until it succeeds,
//! times out, or needs to re-plan.

use std::time::Instant;

use chunkdiff_core::diffusion::Sampler;
use chunkdiff_core::envsuite::{advance, initial_state, observe, random_action, Embodiment, EnvState, TaskId, TaskSpec, VIEWS};
use chunkdiff_core::policy::Policy;
use chunkdiff_core::rng::{seeded_rng, RngStream};
use chunkdiff_core::types::ObservationFrame;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rundir::Logger;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean environment steps per trial (timeouts count the full limit).
    pub mean_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub embodiment: String,
    /// Pooled over every evaluation seed.
    pub tasks: Vec<TaskResult>,
    /// Mean of the per-task success rates.
    pub average: f64,
    pub seeds: Vec<u64>,
    /// Average success per evaluation seed.
    pub seed_averages: Vec<f64>,
    pub mean_over_seeds: f64,
    pub std_over_seeds: f64,
    pub sampler: String,
    pub sampler_steps: usize,
    pub trials_per_task: usize,
    pub step_limit: usize,
    pub exec_steps: usize,
    pub inference_calls: usize,
    /// Wall-clock seconds per batched inference call.
    pub seconds_per_call: f64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn task(&self, task: &str) -> Option<&TaskResult> {
        self.tasks.iter().find(|t| t.task == task)
    }

    pub fn summary(&self) -> String {
        let per: Vec<String> = self.tasks.iter().map(|t| format!("{} {:.2}", t.task, t.success_rate)).collect();
        format!("{} [{}]: average {:.3} ({})", self.label, self.sampler, self.average, per.join(", "))
    }
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub embodiment: Embodiment,
    pub tasks: Vec<TaskId>,
    pub trials_per_task: usize,
    pub step_limit: usize,
    /// Chunk steps executed before re-planning.
    pub exec_steps: usize,
    pub sampler: Sampler,
    pub seeds: Vec<u64>,
}

/// Reset seed of trial `j`; independent of every demonstration seed stream.
pub fn trial_seed(eval_seed: u64, task: TaskId, j: usize) -> u64 {
    seeded_rng(eval_seed, &format!("eval/{}", task.as_str())).next_u64().wrapping_add(j as u64)
}

/// Produces native-unit action sequences for a group of trials.
pub trait Actor {
    /// One action sequence per frame; at least one action each.
    fn act(&mut self, frames: &[ObservationFrame], trials: &[usize]) -> Result<Vec<Vec<Vec<f64>>>>;

    /// Inference calls made and seconds spent in them.
    fn timing(&self) -> (usize, f64) {
        (0, 0.0)
    }
}

pub struct PolicyActor<'a> {
    pub policy: &'a Policy,
    pub sampler: Sampler,
    pub rng: RngStream,
    pub calls: usize,
    pub seconds: f64,
}

impl Actor for PolicyActor<'_> {
    fn act(&mut self, frames: &[ObservationFrame], _trials: &[usize]) -> Result<Vec<Vec<Vec<f64>>>> {
        let t = Instant::now();
        let chunks = self.policy.generate_actions(frames, self.sampler, &mut self.rng)?;
        self.seconds += t.elapsed().as_secs_f64();
        self.calls += 1;
        Ok(chunks.iter().map(|c| (0..c.horizon).map(|i| c.step(i).to_vec()).collect()).collect())
    }

    fn timing(&self) -> (usize, f64) {
        (self.calls, self.seconds)
    }
}

/// Uniform random actions with an independent stream per trial.
pub struct RandomActor {
    pub embodiment: Embodiment,
    pub rngs: Vec<RngStream>,
    pub chunk: usize,
}

impl Actor for RandomActor {
    fn act(&mut self, frames: &[ObservationFrame], trials: &[usize]) -> Result<Vec<Vec<Vec<f64>>>> {
        Ok(frames
            .iter()
            .zip(trials)
            .map(|(_, &j)| (0..self.chunk).map(|_| random_action(&self.embodiment, &mut self.rngs[j])).collect())
            .collect())
    }
}

struct Trial {
    task: usize,
    state: EnvState,
}

/// Runs every trial to completion; returns `(success, steps)` per trial.
fn rollout(trials: &mut [Trial], actor: &mut dyn Actor, exec_steps: usize) -> Result<Vec<(bool, usize)>> {
    loop {
        let active: Vec<usize> = (0..trials.len()).filter(|&i| !trials[i].state.done()).collect();
        if active.is_empty() {
            break;
        }
        let frames: Vec<ObservationFrame> = active.iter().map(|&i| observe(&trials[i].state, &VIEWS)).collect();
        let plans = actor.act(&frames, &active)?;
        for (&i, plan) in active.iter().zip(&plans) {
            let st = &mut trials[i].state;
            for a in plan.iter().take(exec_steps.max(1)) {
                advance(st, a)?;
                if st.done() {
                    break;
                }
            }
        }
    }
    Ok(trials.iter().map(|t| (t.state.success, t.state.elapsed)).collect())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

fn run_eval<'a>(
    label: &str,
    settings: &EvalSettings,
    config_hash: &str,
    sampler: (String, usize),
    mut actor_for: impl FnMut(u64, usize) -> Box<dyn Actor + 'a>,
    log: &Logger,
) -> Result<EvalReport> {
    let nt = settings.tasks.len();
    let mut successes = vec![0usize; nt];
    let mut steps = vec![0usize; nt];
    let mut seed_averages = Vec::with_capacity(settings.seeds.len());
    let (mut calls, mut seconds) = (0, 0.0);
    for &seed in &settings.seeds {
        let mut trials = Vec::with_capacity(nt * settings.trials_per_task);
        for (k, &task) in settings.tasks.iter().enumerate() {
            let spec = TaskSpec::new(task).with_step_limit(settings.step_limit);
            for j in 0..settings.trials_per_task {
                trials.push(Trial { task: k, state: initial_state(&spec, &settings.embodiment, trial_seed(seed, task, j)) });
            }
        }
        let mut actor = actor_for(seed, trials.len());
        let outcomes = rollout(&mut trials, actor.as_mut(), settings.exec_steps)?;
        let (c, s) = actor.timing();
        calls += c;
        seconds += s;
        let mut per_task = vec![0usize; nt];
        for (t, (ok, n)) in trials.iter().zip(&outcomes) {
            per_task[t.task] += *ok as usize;
            steps[t.task] += n;
        }
        for (s, p) in successes.iter_mut().zip(&per_task) {
            *s += p;
        }
        let avg = per_task.iter().map(|&s| s as f64 / settings.trials_per_task as f64).sum::<f64>() / nt as f64;
        log.log(&format!("{label}: seed {seed} average success {avg:.3}"));
        seed_averages.push(avg);
    }
    let total = settings.trials_per_task * settings.seeds.len();
    let tasks: Vec<TaskResult> = settings
        .tasks
        .iter()
        .enumerate()
        .map(|(k, t)| TaskResult {
            task: t.as_str().into(),
            trials: total,
            successes: successes[k],
            success_rate: successes[k] as f64 / total as f64,
            mean_steps: steps[k] as f64 / total as f64,
        })
        .collect();
    let average = tasks.iter().map(|t| t.success_rate).sum::<f64>() / nt as f64;
    let (mean_over_seeds, std_over_seeds) = mean_std(&seed_averages);
    let (sampler, sampler_steps) = sampler;
    Ok(EvalReport {
        label: label.into(),
        embodiment: settings.embodiment.id.clone(),
        tasks,
        average,
        seeds: settings.seeds.clone(),
        seed_averages,
        mean_over_seeds,
        std_over_seeds,
        sampler,
        sampler_steps,
        trials_per_task: settings.trials_per_task,
        step_limit: settings.step_limit,
        exec_steps: settings.exec_steps,
        inference_calls: calls,
        seconds_per_call: if calls > 0 { seconds / calls as f64 } else { 0.0 },
        config_hash: config_hash.into(),
    })
}

/// Closed-loop success of a trained policy. `diffusion_steps` labels DDPM runs.
pub fn evaluate_policy(
    policy: &Policy,
    settings: &EvalSettings,
    label: &str,
    config_hash: &str,
    diffusion_steps: usize,
    log: &Logger,
) -> Result<EvalReport> {
    let sampler = match settings.sampler {
        Sampler::Ddpm => ("ddpm".to_string(), diffusion_steps),
        Sampler::Ddim { steps } => ("ddim".to_string(), steps),
    };
    let report = run_eval(
        label,
        settings,
        config_hash,
        sampler,
        |seed, _| {
            Box::new(PolicyActor {
                policy,
                sampler: settings.sampler,
                rng: seeded_rng(seed, "eval/policy"),
                calls: 0,
                seconds: 0.0,
            })
        },
        log,
    )?;
    log.log(&report.summary());
    Ok(report)
}

/// The same trials driven by uniform random actions.
pub fn evaluate_random(settings: &EvalSettings, config_hash: &str, log: &Logger) -> Result<EvalReport> {
    let report = run_eval(
        "random",
        settings,
        config_hash,
        ("none".to_string(), 0),
        |seed, n| {
            Box::new(RandomActor {
                embodiment: settings.embodiment.clone(),
                rngs: (0..n).map(|j| seeded_rng(seed, &format!("eval/random/{j}"))).collect(),
                chunk: settings.exec_steps.max(1),
            })
        },
        log,
    )?;
    log.log(&report.summary());
    Ok(report)
}
