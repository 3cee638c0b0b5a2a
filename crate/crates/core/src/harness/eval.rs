//! Closed-loop evaluation: lockstep batched rollouts, the policies that can
//! drive them, and success reports.

use std::collections::VecDeque;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{sample_from, ForwardOptions, ObsBatch, SampleOutput};
use crate::rng::Rng;
use crate::sim::{clamp_action, Env, EnvConfig, ExpertPolicy, Observation, Privileged, Task, MAX_APERTURE_STEP, MAX_JOINT_STEP};
use crate::trainer::Checkpoint;

/// One episode waiting for a new plan.
pub struct PlanRequest<'a, S> {
    pub task: Task,
    pub seed: u64,
    /// How many plans this episode has requested before.
    pub replan: usize,
    /// Every observation so far, the current one last.
    pub history: &'a [Observation],
    pub privileged: Privileged,
    pub state: &'a mut S,
}

/// Something that maps observation histories to action chunks.
pub trait Policy: Sync {
    type State: Send;

    fn begin(&self, task: Task, seed: u64) -> Self::State;

    /// One chunk per request. The harness executes at most `stride` actions of
    /// each chunk before asking again.
    fn plan(&self, requests: &mut [PlanRequest<'_, Self::State>]) -> Result<Vec<Vec<[f64; 3]>>>;
}

/// The scripted expert, reading privileged state. Replans every step.
pub struct ExpertWrapper;

impl Policy for ExpertWrapper {
    type State = ExpertPolicy;

    fn begin(&self, _: Task, _: u64) -> ExpertPolicy {
        ExpertPolicy::new()
    }

    fn plan(&self, requests: &mut [PlanRequest<'_, ExpertPolicy>]) -> Result<Vec<Vec<[f64; 3]>>> {
        Ok(requests.iter_mut().map(|r| vec![r.state.act(&r.privileged)]).collect())
    }
}

/// Uniform actions over the clamp box.
pub struct RandomPolicy {
    pub chunk: usize,
}

impl Policy for RandomPolicy {
    type State = ();

    fn begin(&self, _: Task, _: u64) {}

    fn plan(&self, requests: &mut [PlanRequest<'_, ()>]) -> Result<Vec<Vec<[f64; 3]>>> {
        Ok(requests
            .iter()
            .map(|r| {
                let mut rng = Rng::derive(r.seed, "random-policy", r.replan as u64);
                (0..self.chunk)
                    .map(|_| {
                        [
                            rng.uniform_range(-MAX_JOINT_STEP, MAX_JOINT_STEP),
                            rng.uniform_range(-MAX_JOINT_STEP, MAX_JOINT_STEP),
                            rng.uniform_range(-MAX_APERTURE_STEP, MAX_APERTURE_STEP),
                        ]
                    })
                    .collect()
            })
            .collect())
    }
}

/// A trained checkpoint sampled with `k` Euler steps.
pub struct LearnedPolicy {
    pub ckpt: Checkpoint,
    pub k: usize,
    pub opts: ForwardOptions,
}

impl LearnedPolicy {
    pub fn new(ckpt: Checkpoint, k: usize) -> Self {
        Self { ckpt, k, opts: ForwardOptions::default() }
    }

    /// Normalized model inputs for the latest observation of each history.
    pub fn obs_batch(&self, histories: &[&[Observation]], tasks: &[Task]) -> Result<ObsBatch> {
        let c = &self.ckpt.config;
        let st = &self.ckpt.norm_stats;
        let b = histories.len();
        let h = c.horizon;
        let mut visual = Vec::with_capacity(b * c.obs_feat_dim);
        let mut state = Vec::with_capacity(b * c.state_dim);
        let mut past: Vec<Vec<f64>> = c.modalities.iter().map(|m| Vec::with_capacity(b * h * m.dim)).collect();
        for hist in histories {
            let now = hist.last().ok_or_else(|| Error::Invalid("empty observation history".into()))?;
            visual.extend_from_slice(&now.visual_feat);
            state.extend_from_slice(&now.state);
            let t = hist.len() - 1;
            for (m, buf) in c.modalities.iter().zip(&mut past) {
                for j in 0..h {
                    let idx = (t + j + 1).saturating_sub(h);
                    buf.extend_from_slice(hist[idx].modality(&m.name)?);
                }
            }
        }
        st.visual.normalize(&mut visual);
        st.state.normalize(&mut state);
        let past = c
            .modalities
            .iter()
            .zip(past)
            .map(|(m, mut buf)| {
                st.modality(&m.name)?.normalize(&mut buf);
                Tensor::new(vec![b, h, m.dim], buf)
            })
            .collect::<Result<_>>()?;
        Ok(ObsBatch {
            visual: Tensor::new(vec![b, c.obs_feat_dim], visual)?,
            task: tasks.iter().map(|t| t.id()).collect(),
            state: Tensor::new(vec![b, c.state_dim], state)?,
            past,
        })
    }

    /// Samples one chunk per history. Starting noise for entry `i` comes from
    /// `(seeds[i], replans[i])` only, so results do not depend on batching.
    /// Returned actions and futures are denormalized.
    pub fn sample(&self, histories: &[&[Observation]], tasks: &[Task], seeds: &[u64], replans: &[usize], opts: ForwardOptions) -> Result<SampleOutput> {
        let c = &self.ckpt.config;
        let b = histories.len();
        let obs = self.obs_batch(histories, tasks)?;
        let mut actions = Vec::with_capacity(b * c.horizon * c.action_dim);
        let mut futures: Vec<Vec<f64>> = c.modalities.iter().map(|_| Vec::new()).collect();
        for (&seed, &r) in seeds.iter().zip(replans) {
            let mut rng = Rng::derive(seed, "policy-noise", r as u64);
            actions.extend(rng.normal_tensor(&[c.horizon, c.action_dim]).into_data());
            for (m, f) in c.modalities.iter().zip(&mut futures) {
                f.extend(rng.normal_tensor(&[c.horizon, m.dim]).into_data());
            }
        }
        let actions = Tensor::new(vec![b, c.horizon, c.action_dim], actions)?;
        let futures = c.modalities.iter().zip(futures).map(|(m, f)| Tensor::new(vec![b, c.horizon, m.dim], f)).collect::<Result<_>>()?;
        let mut out = sample_from(c, &self.ckpt.params, &obs, actions, futures, self.k, opts)?;
        self.ckpt.norm_stats.actions.denormalize(out.actions.data_mut());
        for (m, f) in c.modalities.iter().zip(&mut out.futures) {
            self.ckpt.norm_stats.modality(&m.name)?.denormalize(f.data_mut());
        }
        Ok(out)
    }
}

impl Policy for LearnedPolicy {
    type State = ();

    fn begin(&self, _: Task, _: u64) {}

    fn plan(&self, requests: &mut [PlanRequest<'_, ()>]) -> Result<Vec<Vec<[f64; 3]>>> {
        let histories: Vec<&[Observation]> = requests.iter().map(|r| r.history).collect();
        let tasks: Vec<Task> = requests.iter().map(|r| r.task).collect();
        let seeds: Vec<u64> = requests.iter().map(|r| r.seed).collect();
        let replans: Vec<usize> = requests.iter().map(|r| r.replan).collect();
        let out = self.sample(&histories, &tasks, &seeds, &replans, self.opts)?;
        let a = self.ckpt.config.action_dim;
        Ok(out
            .actions
            .data()
            .chunks(self.ckpt.config.horizon * a)
            .map(|chunk| chunk.chunks(a).map(|r| [r[0], r[1], r[2]]).collect())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub latent: f64,
    pub success: bool,
    pub steps: usize,
}

struct Running<S> {
    env: Env,
    history: Vec<Observation>,
    queue: VecDeque<[f64; 3]>,
    replans: usize,
    state: S,
}

/// Runs one episode per seed in lockstep, replanning every `stride` steps.
/// Each entry of the result depends on its own seed only.
pub fn rollout_lockstep<P: Policy>(policy: &P, task: Task, seeds: &[u64], env_cfg: &EnvConfig, stride: usize) -> Result<Vec<EpisodeResult>> {
    if stride == 0 {
        return Err(Error::Invalid("replan stride must be at least 1".into()));
    }
    let mut eps = seeds
        .iter()
        .map(|&seed| {
            let (env, obs) = Env::reset(task.id(), seed, env_cfg)?;
            Ok(Running { env, history: vec![obs], queue: VecDeque::new(), replans: 0, state: policy.begin(task, seed) })
        })
        .collect::<Result<Vec<_>>>()?;
    loop {
        let mut requests: Vec<PlanRequest<'_, P::State>> = eps
            .iter_mut()
            .filter(|e| !e.env.is_done() && e.queue.is_empty())
            .map(|e| PlanRequest {
                task,
                seed: e.env.seed(),
                replan: e.replans,
                history: &e.history,
                privileged: e.env.privileged(),
                state: &mut e.state,
            })
            .collect();
        if !requests.is_empty() {
            let plans = policy.plan(&mut requests)?;
            if plans.len() != requests.len() {
                return Err(Error::Invalid(format!("policy returned {} plans for {} requests", plans.len(), requests.len())));
            }
            drop(requests);
            let waiting = eps.iter_mut().filter(|e| !e.env.is_done() && e.queue.is_empty());
            for (e, plan) in waiting.zip(plans) {
                if plan.is_empty() {
                    return Err(Error::Invalid("policy returned an empty plan".into()));
                }
                e.queue.extend(plan.into_iter().take(stride));
                e.replans += 1;
            }
        }
        let mut any = false;
        for e in eps.iter_mut().filter(|e| !e.env.is_done()) {
            let a = e.queue.pop_front().expect("planned above");
            let out = e.env.step(clamp_action(a))?;
            e.history.push(out.obs);
            any = true;
        }
        if !any {
            break;
        }
    }
    Ok(eps
        .iter()
        .map(|e| EpisodeResult { seed: e.env.seed(), latent: e.env.latent(), success: e.env.succeeded(), steps: e.env.t() })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCount {
    pub latent: f64,
    pub n: usize,
    pub successes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessReport {
    pub task: String,
    pub checkpoint: String,
    pub n_episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub per_latent: Vec<LatentCount>,
    /// First and last episode seed, inclusive.
    pub seed_range: (u64, u64),
}

impl SuccessReport {
    pub fn from_results(task: Task, checkpoint: &str, seed0: u64, results: &[EpisodeResult]) -> Self {
        let n = results.len();
        let successes = results.iter().filter(|r| r.success).count();
        let mut per_latent: Vec<LatentCount> = Vec::new();
        for r in results {
            match per_latent.iter_mut().find(|c| c.latent == r.latent) {
                Some(c) => {
                    c.n += 1;
                    c.successes += r.success as usize;
                }
                None => per_latent.push(LatentCount { latent: r.latent, n: 1, successes: r.success as usize }),
            }
        }
        per_latent.sort_by(|a, b| a.latent.total_cmp(&b.latent));
        Self {
            task: task.name().into(),
            checkpoint: checkpoint.into(),
            n_episodes: n,
            successes,
            success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
            per_latent,
            seed_range: (seed0, seed0 + n.saturating_sub(1) as u64),
        }
    }
}

/// `n` episodes with seeds `seed0 .. seed0 + n`, split across `workers`
/// threads. The report does not depend on `workers`.
pub fn evaluate<P: Policy>(
    policy: &P,
    checkpoint: &str,
    task: Task,
    n: usize,
    seed0: u64,
    env_cfg: &EnvConfig,
    stride: usize,
    workers: usize,
) -> Result<SuccessReport> {
    if n == 0 {
        return Err(Error::Invalid("need at least one evaluation episode".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| seed0 + i).collect();
    let workers = workers.clamp(1, n);
    let per = n.div_ceil(workers);
    let results = thread::scope(|s| {
        let handles: Vec<_> = seeds.chunks(per).map(|chunk| s.spawn(move || rollout_lockstep(policy, task, chunk, env_cfg, stride))).collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect::<Result<Vec<_>>>()
    })?;
    let results: Vec<EpisodeResult> = results.into_iter().flatten().collect();
    Ok(SuccessReport::from_results(task, checkpoint, seed0, &results))
}

/// Replanning stride for chunks of length `horizon`: half a chunk.
pub fn default_stride(horizon: usize) -> usize {
    (horizon / 2).max(1)
}
