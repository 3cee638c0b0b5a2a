//! Windowed training samples and normalization statistics.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Modality;
use crate::objectives::CleanBatch;
use crate::sim::{EpisodeRecord, Observation};

pub const STD_FLOOR: f64 = 1e-6;

/// Physical signals the environment exposes, in canonical order.
pub const ENV_MODALITIES: [&str; 2] = ["tactile", "torque"];

/// Past window and future target of one modality, each `H` rows of `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalWindow {
    pub name: String,
    pub dim: usize,
    pub past: Vec<f64>,
    pub future: Vec<f64>,
}

/// One (episode, t) training item.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub visual: Vec<f64>,
    pub task: usize,
    pub state: Vec<f64>,
    /// `H × action_dim`, row-major.
    pub actions: Vec<f64>,
    pub physical: Vec<PhysicalWindow>,
    pub t: usize,
    /// Action rows past the episode end, filled with the last action.
    pub padded_actions: usize,
    /// Past rows before the episode start, filled with the first observation.
    pub padded_past: usize,
    /// Future rows past the final observation, filled with its value.
    pub padded_future: usize,
}

/// One sample per step of every episode. Actions past the end repeat the
/// last action; the past window is left-padded with the first observation
/// and the future target right-padded with the final observation.
pub fn build_windows(episodes: &[EpisodeRecord], horizon: usize) -> Result<Vec<TrainSample>> {
    if horizon == 0 {
        return Err(Error::Invalid("horizon must be at least 1".into()));
    }
    if episodes.iter().all(|e| e.is_empty()) {
        return Err(Error::Invalid("no training data: every episode is empty".into()));
    }
    let mut out = Vec::new();
    for ep in episodes {
        let n = ep.len();
        if ep.observations.len() != n + 1 {
            return Err(Error::Invalid(format!(
                "episode (task {}, seed {}) has {} observations for {} actions",
                ep.task_id,
                ep.seed,
                ep.observations.len(),
                n
            )));
        }
        let last_obs = ep.observations.len() - 1;
        for t in 0..n {
            let obs = &ep.observations[t];
            let mut actions = Vec::with_capacity(horizon * 3);
            for j in 0..horizon {
                actions.extend_from_slice(&ep.actions[(t + j).min(n - 1)]);
            }
            let window = |f: &dyn Fn(&Observation) -> &[f64]| -> (Vec<f64>, Vec<f64>) {
                let mut past = Vec::new();
                let mut future = Vec::new();
                for j in 0..horizon {
                    // rows t-H+1 ..= t
                    let idx = (t + j + 1).saturating_sub(horizon);
                    past.extend_from_slice(f(&ep.observations[idx]));
                    future.extend_from_slice(f(&ep.observations[(t + 1 + j).min(last_obs)]));
                }
                (past, future)
            };
            let physical = ENV_MODALITIES
                .iter()
                .map(|&name| {
                    let dim = obs.modality(name)?.len();
                    let (past, future) = window(&|o: &Observation| o.modality(name).expect("known modality"));
                    Ok(PhysicalWindow { name: name.to_string(), dim, past, future })
                })
                .collect::<Result<_>>()?;
            out.push(TrainSample {
                visual: obs.visual_feat.clone(),
                task: ep.task_id,
                state: obs.state.clone(),
                actions,
                physical,
                t,
                padded_actions: (t + horizon).saturating_sub(n),
                padded_past: (horizon - 1).saturating_sub(t),
                padded_future: (t + 1 + horizon).saturating_sub(last_obs + 1),
            });
        }
    }
    Ok(out)
}

/// Per-dimension mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stat {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Stat {
    /// Statistics over rows of width `dim`. Standard deviations are floored.
    pub fn from_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut rows_kept: Vec<&[f64]> = Vec::new();
        for r in rows {
            if r.len() != dim {
                return Err(Error::Shape(format!("statistics: row of width {} where {dim} expected", r.len())));
            }
            for (s, x) in sum.iter_mut().zip(r) {
                *s += x;
            }
            rows_kept.push(r);
            n += 1;
        }
        if n == 0 {
            return Err(Error::Invalid("statistics over no data".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; dim];
        for r in rows_kept {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes consecutive rows in place.
    pub fn normalize(&self, data: &mut [f64]) {
        let d = self.dim();
        for (i, x) in data.iter_mut().enumerate() {
            *x = (*x - self.mean[i % d]) / self.std[i % d];
        }
    }

    pub fn denormalize(&self, data: &mut [f64]) {
        let d = self.dim();
        for (i, x) in data.iter_mut().enumerate() {
            *x = *x * self.std[i % d] + self.mean[i % d];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityStat {
    pub name: String,
    #[serde(flatten)]
    pub stat: Stat,
}

/// Normalization statistics computed from demonstrations only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub actions: Stat,
    pub state: Stat,
    pub visual: Stat,
    pub modalities: Vec<ModalityStat>,
}

impl NormStats {
    pub fn from_episodes(episodes: &[EpisodeRecord]) -> Result<Self> {
        let first = episodes
            .iter()
            .find(|e| !e.is_empty())
            .ok_or_else(|| Error::Invalid("no training data: every episode is empty".into()))?;
        let o0 = &first.observations[0];
        // Steps at which a sample is taken: every observation with an action.
        let obs = || episodes.iter().flat_map(|e| e.observations[..e.len()].iter());
        let actions = Stat::from_rows(episodes.iter().flat_map(|e| e.actions.iter().map(|a| a.as_slice())), 3)?;
        let state = Stat::from_rows(obs().map(|o| o.state.as_slice()), o0.state.len())?;
        let visual = Stat::from_rows(obs().map(|o| o.visual_feat.as_slice()), o0.visual_feat.len())?;
        let modalities = ENV_MODALITIES
            .iter()
            .map(|&name| {
                let dim = o0.modality(name)?.len();
                let rows = episodes.iter().flat_map(|e| e.observations.iter()).map(|o| o.modality(name).expect("known modality"));
                Ok(ModalityStat { name: name.to_string(), stat: Stat::from_rows(rows, dim)? })
            })
            .collect::<Result<_>>()?;
        Ok(Self { actions, state, visual, modalities })
    }

    /// Zero mean, unit std everywhere: for untrained models.
    pub fn identity(config: &crate::model::ModelConfig) -> Self {
        let unit = |d: usize| Stat { mean: vec![0.0; d], std: vec![1.0; d] };
        Self {
            actions: unit(config.action_dim),
            state: unit(config.state_dim),
            visual: unit(config.obs_feat_dim),
            modalities: config.modalities.iter().map(|m| ModalityStat { name: m.name.clone(), stat: unit(m.dim) }).collect(),
        }
    }

    pub fn modality(&self, name: &str) -> Result<&Stat> {
        self.modalities
            .iter()
            .find(|m| m.name == name)
            .map(|m| &m.stat)
            .ok_or_else(|| Error::Invalid(format!("no normalization statistics for modality `{name}`")))
    }

    pub fn normalize_sample(&self, s: &mut TrainSample) -> Result<()> {
        self.visual.normalize(&mut s.visual);
        self.state.normalize(&mut s.state);
        self.actions.normalize(&mut s.actions);
        for w in &mut s.physical {
            let st = self.modality(&w.name)?;
            st.normalize(&mut w.past);
            st.normalize(&mut w.future);
        }
        Ok(())
    }
}

/// Normalized samples ready for batching.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<TrainSample>,
    pub stats: NormStats,
    pub horizon: usize,
}

impl Dataset {
    /// Windows and normalizes `episodes` with `stats`.
    pub fn new(episodes: &[EpisodeRecord], horizon: usize, stats: NormStats) -> Result<Self> {
        let mut samples = build_windows(episodes, horizon)?;
        for s in &mut samples {
            stats.normalize_sample(s)?;
        }
        Ok(Self { samples, stats, horizon })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the samples at `indices`, keeping the modalities of `modalities`
    /// in that order.
    pub fn batch(&self, indices: &[usize], modalities: &[Modality]) -> Result<CleanBatch> {
        let b = indices.len();
        let h = self.horizon;
        let pick = |f: &dyn Fn(&TrainSample) -> &[f64]| -> Vec<f64> { indices.iter().flat_map(|&i| f(&self.samples[i]).iter().copied()).collect() };
        let first = &self.samples[*indices.first().ok_or_else(|| Error::Invalid("empty batch".into()))?];
        let mut past = Vec::with_capacity(modalities.len());
        let mut future = Vec::with_capacity(modalities.len());
        for m in modalities {
            let k = first
                .physical
                .iter()
                .position(|w| w.name == m.name)
                .ok_or_else(|| Error::Invalid(format!("dataset has no modality `{}`", m.name)))?;
            if first.physical[k].dim != m.dim {
                return Err(Error::Shape(format!("modality `{}` has width {} in the data, {} in the model", m.name, first.physical[k].dim, m.dim)));
            }
            past.push(Tensor::new(vec![b, h, m.dim], pick(&|s| &s.physical[k].past))?);
            future.push(Tensor::new(vec![b, h, m.dim], pick(&|s| &s.physical[k].future))?);
        }
        Ok(CleanBatch {
            visual: Tensor::new(vec![b, first.visual.len()], pick(&|s| &s.visual))?,
            task: indices.iter().map(|&i| self.samples[i].task).collect(),
            state: Tensor::new(vec![b, first.state.len()], pick(&|s| &s.state))?,
            actions: Tensor::new(vec![b, h, 3], pick(&|s| &s.actions))?,
            past,
            future,
        })
    }
}
