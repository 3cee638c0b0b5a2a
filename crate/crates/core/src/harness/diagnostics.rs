//! Per-step traces of a learned policy: attention onto the physical streams,
//! predicted future signals, and sampling latency.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::{default_stride, LearnedPolicy};
use crate::error::{Error, Result};
use crate::model::ForwardOptions;
use crate::rng::derive_seed;
use crate::sim::{clamp_action, Env, EnvConfig, Observation, Task};
use crate::trainer::{Checkpoint, Stage};

/// Standard deviations below this standardize to all zeros.
pub const Z_STD_FLOOR: f64 = 1e-8;

/// Z-scores over the whole series (population std).
pub fn standardize(series: &[f64]) -> Vec<f64> {
    if series.is_empty() {
        return Vec::new();
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < Z_STD_FLOOR {
        return vec![0.0; series.len()];
    }
    series.iter().map(|x| (x - mean) / std).collect()
}

/// Whether any physical channel reads non-zero. Sensor noise is only added
/// in contact, so this is exact.
pub fn in_contact(obs: &Observation) -> bool {
    obs.tactile.iter().chain(&obs.torque).any(|&x| x != 0.0)
}

#[derive(Clone, Debug)]
pub struct TraceStep {
    pub t: usize,
    /// `[layer][stream]` attention mass, averaged over integration steps.
    pub attention: Vec<Vec<f64>>,
    /// Predicted future chunk per modality, `H * d`, denormalized.
    pub predicted: Vec<Vec<f64>>,
    /// Whether this step's chunk was executed.
    pub replan: bool,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub task: Task,
    pub seed: u64,
    pub streams: Vec<String>,
    pub steps: Vec<TraceStep>,
    /// Every observation, `steps.len() + 1` of them.
    pub observations: Vec<Observation>,
    pub success: bool,
}

impl Trace {
    pub fn first_contact(&self) -> Option<usize> {
        self.observations.iter().position(in_contact)
    }
}

/// One closed-loop episode that also samples a diagnostic chunk at every
/// step. Executed chunks use the same noise as [`super::evaluate`], so the
/// trajectory matches the evaluation rollout of `seed`.
pub fn trace_rollout(policy: &LearnedPolicy, task: Task, seed: u64, env_cfg: &EnvConfig) -> Result<Trace> {
    let c = &policy.ckpt.config;
    let stride = default_stride(c.horizon);
    let (mut env, obs) = Env::reset(task.id(), seed, env_cfg)?;
    let mut observations = vec![obs];
    let mut queue = VecDeque::new();
    let mut replans = 0;
    let mut steps = Vec::new();
    let opts = ForwardOptions { record_attention: true, ..policy.opts };
    while !env.is_done() {
        let t = env.t();
        let replan = queue.is_empty();
        let (s, r) = if replan { (seed, replans) } else { (derive_seed(seed, "trace-noise", t as u64), 0) };
        let out = policy.sample(&[&observations], &[task], &[s], &[r], opts)?;
        if replan {
            let a = c.action_dim;
            queue.extend(out.actions.data().chunks(a).take(stride).map(|r| [r[0], r[1], r[2]]));
            replans += 1;
        }
        steps.push(TraceStep {
            t,
            attention: out.attention.iter().map(|l| l.iter().map(|s| s[0]).collect()).collect(),
            predicted: out.futures.iter().map(|f| f.data().to_vec()).collect(),
            replan,
        });
        let a = queue.pop_front().expect("planned above");
        observations.push(env.step(clamp_action(a))?.obs);
    }
    Ok(Trace {
        task,
        seed,
        streams: c.modalities.iter().map(|m| m.name.clone()).collect(),
        steps,
        observations,
        success: env.succeeded(),
    })
}

fn require_streams(ckpt: &Checkpoint) -> Result<()> {
    if ckpt.config.modalities.is_empty() {
        return Err(Error::Invalid("checkpoint has no physical streams".into()));
    }
    if ckpt.stage == Stage::Base {
        return Err(Error::Invalid("need a stage-1 or stage-2 checkpoint, got base".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub step: usize,
    pub layer: usize,
    pub stream: String,
    pub raw: f64,
    pub z: f64,
}

#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub task: Task,
    pub seed: u64,
    pub streams: Vec<String>,
    pub layers: usize,
    /// `raw[layer][stream][step]`.
    pub raw: Vec<Vec<Vec<f64>>>,
    pub z: Vec<Vec<Vec<f64>>>,
    pub first_contact: Option<usize>,
    pub horizon: usize,
}

impl AttentionTrace {
    pub fn from_trace(trace: &Trace, horizon: usize) -> Self {
        let layers = trace.steps.first().map_or(0, |s| s.attention.len());
        let n_streams = trace.streams.len();
        let raw: Vec<Vec<Vec<f64>>> = (0..layers)
            .map(|l| (0..n_streams).map(|s| trace.steps.iter().map(|st| st.attention[l][s]).collect()).collect())
            .collect();
        let z = raw.iter().map(|l| l.iter().map(|s| standardize(s)).collect()).collect();
        Self { task: trace.task, seed: trace.seed, streams: trace.streams.clone(), layers, raw, z, first_contact: trace.first_contact(), horizon }
    }

    pub fn rows(&self) -> Vec<AttentionRow> {
        let mut rows = Vec::new();
        let steps = self.raw.first().and_then(|l| l.first()).map_or(0, Vec::len);
        for step in 0..steps {
            for l in 0..self.layers {
                for (s, name) in self.streams.iter().enumerate() {
                    rows.push(AttentionRow { step, layer: l, stream: name.clone(), raw: self.raw[l][s][step], z: self.z[l][s][step] });
                }
            }
        }
        rows
    }

    /// Layer-averaged z of `stream` over the pre-contact steps and over the
    /// `horizon` steps starting at first contact. `None` without a contact
    /// or without a pre-contact step.
    pub fn contact_contrast(&self, stream: &str) -> Option<(f64, f64)> {
        let s = self.streams.iter().position(|n| n == stream)?;
        let tc = self.first_contact?;
        let steps = self.z.first()?.first()?.len();
        if tc == 0 || tc >= steps {
            return None;
        }
        let mean_over = |range: std::ops::Range<usize>| {
            let n = (range.len() * self.layers) as f64;
            self.z.iter().map(|l| l[s][range.clone()].iter().sum::<f64>()).sum::<f64>() / n
        };
        Some((mean_over(0..tc), mean_over(tc..(tc + self.horizon).min(steps))))
    }
}

/// Standardized attention from the action tokens onto each physical stream
/// over one rollout.
pub fn dump_attention(ckpt: &Checkpoint, task: Task, seed: u64, k: usize, env_cfg: &EnvConfig) -> Result<AttentionTrace> {
    require_streams(ckpt)?;
    let policy = LearnedPolicy::new(ckpt.clone(), k);
    let trace = trace_rollout(&policy, task, seed, env_cfg)?;
    Ok(AttentionTrace::from_trace(&trace, ckpt.config.horizon))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub step: usize,
    pub modality: String,
    pub channel: usize,
    /// First element of the predicted future chunk, for step + 1.
    pub predicted: f64,
    pub realized: f64,
    /// Last observed value.
    pub persistence: f64,
    pub transition: bool,
}

/// Squared-error sums over one or more rollouts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionError {
    pub modality: String,
    pub n: usize,
    pub sse_model: f64,
    pub sse_persistence: f64,
    pub n_transition: usize,
    pub sse_model_transition: f64,
    pub sse_persistence_transition: f64,
}

impl PredictionError {
    pub fn rmse_model(&self) -> f64 {
        (self.sse_model / self.n.max(1) as f64).sqrt()
    }

    pub fn rmse_persistence(&self) -> f64 {
        (self.sse_persistence / self.n.max(1) as f64).sqrt()
    }

    pub fn rmse_model_transition(&self) -> f64 {
        (self.sse_model_transition / self.n_transition.max(1) as f64).sqrt()
    }

    pub fn rmse_persistence_transition(&self) -> f64 {
        (self.sse_persistence_transition / self.n_transition.max(1) as f64).sqrt()
    }

    pub fn merge(&mut self, o: &PredictionError) {
        self.n += o.n;
        self.sse_model += o.sse_model;
        self.sse_persistence += o.sse_persistence;
        self.n_transition += o.n_transition;
        self.sse_model_transition += o.sse_model_transition;
        self.sse_persistence_transition += o.sse_persistence_transition;
    }
}

#[derive(Clone, Debug)]
pub struct PredictionDump {
    pub rows: Vec<PredictionRow>,
    pub errors: Vec<PredictionError>,
}

/// Steps within `radius` of a change in the contact state of a signal.
fn transition_mask(active: &[bool], radius: usize) -> Vec<bool> {
    let mut mask = vec![false; active.len().saturating_sub(1)];
    for c in 0..active.len().saturating_sub(1) {
        if active[c] != active[c + 1] {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(mask.len().saturating_sub(1));
            for m in &mut mask[lo..=hi] {
                *m = true;
            }
        }
    }
    mask
}

/// Predicted next-step physical signal against the realized one and against
/// repeating the last value. Transition segments are the steps within half
/// a chunk of a contact onset or release of that signal.
pub fn prediction_errors(trace: &Trace, horizon: usize) -> Result<PredictionDump> {
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (k, name) in trace.streams.iter().enumerate() {
        let signal: Vec<&[f64]> = trace.observations.iter().map(|o| o.modality(name)).collect::<Result<_>>()?;
        let active: Vec<bool> = signal.iter().map(|s| s.iter().any(|&x| x != 0.0)).collect();
        let mask = transition_mask(&active, default_stride(horizon));
        let mut e = PredictionError { modality: name.clone(), ..Default::default() };
        for (i, step) in trace.steps.iter().enumerate() {
            let d = signal[i].len();
            if step.predicted[k].len() != horizon * d {
                return Err(Error::Shape(format!("{name}: predicted {} values, expected {}", step.predicted[k].len(), horizon * d)));
            }
            for ch in 0..d {
                let (pred, real, last) = (step.predicted[k][ch], signal[i + 1][ch], signal[i][ch]);
                let (em, ep) = ((pred - real).powi(2), (last - real).powi(2));
                e.n += 1;
                e.sse_model += em;
                e.sse_persistence += ep;
                if mask[i] {
                    e.n_transition += 1;
                    e.sse_model_transition += em;
                    e.sse_persistence_transition += ep;
                }
                rows.push(PredictionRow { step: step.t, modality: name.clone(), channel: ch, predicted: pred, realized: real, persistence: last, transition: mask[i] });
            }
        }
        errors.push(e);
    }
    Ok(PredictionDump { rows, errors })
}

/// First-step predictions of every physical stream over one rollout.
pub fn dump_predictions(ckpt: &Checkpoint, task: Task, seed: u64, k: usize, env_cfg: &EnvConfig) -> Result<PredictionDump> {
    require_streams(ckpt)?;
    let policy = LearnedPolicy::new(ckpt.clone(), k);
    let trace = trace_rollout(&policy, task, seed, env_cfg)?;
    prediction_errors(&trace, ckpt.config.horizon)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub variant: String,
    pub streams: usize,
    pub median_ms: f64,
    pub ratio: f64,
}

/// Median single-chunk sampling latency (batch 1) of each variant, measured
/// round-robin so drift hits every variant alike. Ratios are against the
/// first variant.
pub fn measure_latency(variants: &[(String, Checkpoint)], k: usize, warmup: usize, calls: usize) -> Result<Vec<LatencyRow>> {
    if variants.is_empty() || calls == 0 {
        return Err(Error::Invalid("need at least one variant and one timed call".into()));
    }
    let (_, obs) = Env::reset(Task::FragileGrasp.id(), 0, &EnvConfig::default())?;
    let history = [obs];
    let policies: Vec<LearnedPolicy> = variants.iter().map(|(_, c)| LearnedPolicy::new(c.clone(), k)).collect();
    let mut times = vec![Vec::with_capacity(calls); variants.len()];
    for round in 0..warmup + calls {
        for (p, ts) in policies.iter().zip(&mut times) {
            let start = Instant::now();
            let out = p.sample(&[&history], &[Task::FragileGrasp], &[round as u64], &[0], ForwardOptions::default())?;
            let dt = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(out);
            if round >= warmup {
                ts.push(dt);
            }
        }
    }
    let medians: Vec<f64> = times.iter_mut().map(|ts| median(ts)).collect();
    Ok(variants
        .iter()
        .zip(&medians)
        .map(|((name, c), &m)| LatencyRow { variant: name.clone(), streams: c.config.modalities.len(), median_ms: m, ratio: m / medians[0] })
        .collect())
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_series_has_zero_mean_unit_std() {
        let z = standardize(&[0.1, 0.4, 0.2, 0.9, 0.3]);
        let mean = z.iter().sum::<f64>() / 5.0;
        let std = (z.iter().map(|x| x * x).sum::<f64>() / 5.0).sqrt();
        assert!(mean.abs() <= 1e-10);
        assert!((std - 1.0).abs() <= 1e-6);
        assert_eq!(standardize(&[0.25; 7]), vec![0.0; 7]);
        assert!(standardize(&[]).is_empty());
    }

    #[test]
    fn transition_mask_covers_both_sides() {
        let active = [false, false, false, true, true, true, true, false];
        let m = transition_mask(&active, 1);
        assert_eq!(m, vec![false, true, true, true, false, true, true]);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
