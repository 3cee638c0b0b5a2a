//! Base pretraining, stream training with the expert frozen, joint
//! fine-tuning, and the comparison arms.

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Control, Stage};
use super::config::TrainingConfig;
use super::data::{Dataset, NormStats};
use crate::autodiff::{adamw_step, Graph, OptimizerState, ParamStore};
use crate::error::{Error, Result};
use crate::model::{init_base, init_physical_stream, set_trainable, Layout, Modality, ModelConfig, TrainabilityMask};
use crate::objectives::{build_loss, LossBreakdown, NoiseDraw, Objective};
use crate::rng::Rng;
use crate::sim::EpisodeRecord;

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub phase: String,
    pub iter: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Receives every log line; an error aborts training.
pub type LogSink<'a> = &'a mut dyn FnMut(&LogLine) -> Result<()>;

pub fn discard_log(_: &LogLine) -> Result<()> {
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PhaseSpec {
    pub name: String,
    pub iters: usize,
    pub objective: Objective,
    pub lambda_phy: f64,
    pub mask: TrainabilityMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSummary {
    pub first: Option<LossBreakdown>,
    pub last: Option<LossBreakdown>,
    /// Mean optimized loss over the first and last `min(100, iters)` updates.
    pub head_mean: f64,
    pub tail_mean: f64,
}

/// Draws batches without replacement from a fresh permutation each epoch.
struct Batcher {
    seed: u64,
    purpose: String,
    n: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(seed: u64, phase: &str, n: usize) -> Self {
        Self { seed, purpose: format!("shuffle:{phase}"), n, epoch: 0, order: Vec::new(), pos: n }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.order = Rng::derive(self.seed, &self.purpose, self.epoch).permutation(self.n);
                self.epoch += 1;
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.n - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Runs `spec.iters` AdamW updates of `params` on `data`, with a fresh
/// optimizer for this phase.
pub fn run_phase(
    params: &mut ParamStore,
    config: &ModelConfig,
    data: &Dataset,
    tcfg: &TrainingConfig,
    spec: &PhaseSpec,
    log: LogSink,
) -> Result<PhaseSummary> {
    set_trainable(params, &spec.mask)?;
    if spec.iters == 0 {
        return Ok(PhaseSummary { first: None, last: None, head_mean: 0.0, tail_mean: 0.0 });
    }
    let mut opt = OptimizerState::new(tcfg.optimizer(spec.iters)?)?;
    let mut batcher = Batcher::new(tcfg.seed, &spec.name, data.len());
    let window = spec.iters.min(100);
    let (mut head, mut tail) = (0.0, 0.0);
    let mut first = None;
    let mut last = None;
    for iter in 0..spec.iters {
        let idx = batcher.next(tcfg.batch_size);
        let batch = data.batch(&idx, &config.modalities)?;
        let noise = NoiseDraw::sample(config, idx.len(), &mut Rng::derive(tcfg.seed, &format!("noise:{}", spec.name), iter as u64));
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let (loss, breakdown) = build_loss(&mut g, &bound, config, &batch, &noise, spec.lambda_phy, spec.objective)?;
        if !breakdown.optimized.is_finite() || !breakdown.l_total.is_finite() {
            return Err(Error::Diverged { iter, detail: format!("non-finite loss in phase {}: {}", spec.name, breakdown.to_json_line()) });
        }
        g.backward(loss)?;
        params.collect_grads(&g, &bound);
        if let Some(p) = params.iter().find(|p| p.grad.as_ref().is_some_and(|g| !g.is_finite())) {
            return Err(Error::Diverged { iter, detail: format!("non-finite gradient for `{}` in phase {}", p.name, spec.name) });
        }
        let lr = opt.next_lr();
        adamw_step(params, &mut opt)?;
        if iter < window {
            head += breakdown.optimized / window as f64;
        }
        if iter + window >= spec.iters {
            tail += breakdown.optimized / window as f64;
        }
        log(&LogLine { phase: spec.name.clone(), iter, lr, loss: breakdown.clone() })?;
        if first.is_none() {
            first = Some(breakdown.clone());
        }
        last = Some(breakdown);
    }
    if let Some(p) = params.iter().find(|p| !p.value.is_finite()) {
        return Err(Error::Diverged { iter: spec.iters, detail: format!("parameter `{}` is no longer finite", p.name) });
    }
    Ok(PhaseSummary { first, last, head_mean: head, tail_mean: tail })
}

fn check_episodes(episodes: &[EpisodeRecord]) -> Result<()> {
    if episodes.is_empty() {
        return Err(Error::Invalid("no demonstrations".into()));
    }
    Ok(())
}

/// Encoder and action expert trained on `L_act` with no physical streams.
pub fn train_base(tcfg: &TrainingConfig, model: &ModelConfig, episodes: &[EpisodeRecord], log: LogSink) -> Result<(Checkpoint, PhaseSummary)> {
    tcfg.validate()?;
    check_episodes(episodes)?;
    let config = ModelConfig { layout: Layout::Decoupled, ..model.without_modalities() };
    check_horizon(tcfg, &config)?;
    let stats = NormStats::from_episodes(episodes)?;
    let data = Dataset::new(episodes, config.horizon, stats.clone())?;
    let mut params = init_base(&config, tcfg.seed)?;
    let spec = PhaseSpec {
        name: "base".into(),
        iters: tcfg.iters_base,
        objective: Objective::Action,
        lambda_phy: 0.0,
        mask: TrainabilityMask::all(&config, true),
    };
    let summary = run_phase(&mut params, &config, &data, tcfg, &spec, log)?;
    let ckpt = Checkpoint { stage: Stage::Base, control: Control::None, lambda_phy: 0.0, config, norm_stats: stats, params };
    Ok((ckpt, summary))
}

fn check_horizon(tcfg: &TrainingConfig, config: &ModelConfig) -> Result<()> {
    if tcfg.horizon != config.horizon {
        return Err(Error::Invalid(format!("training horizon {} differs from model horizon {}", tcfg.horizon, config.horizon)));
    }
    Ok(())
}

/// Base checkpoint plus freshly initialized streams for `modalities`.
pub fn attach_streams(tcfg: &TrainingConfig, base: &Checkpoint, modalities: &[Modality], control: Control) -> Result<Checkpoint> {
    if base.stage != Stage::Base {
        return Err(Error::Invalid(format!("expected a base checkpoint, got stage {}", base.stage.name())));
    }
    if modalities.is_empty() {
        return Err(Error::Invalid("at least one physical modality is required".into()));
    }
    let layout = if control == Control::Fused { Layout::Fused } else { Layout::Decoupled };
    let config = ModelConfig { modalities: modalities.to_vec(), layout, ..base.config.clone() };
    config.validate()?;
    let mut params = base.params.clone();
    for m in modalities {
        base.norm_stats.modality(&m.name)?;
        init_physical_stream(&mut params, &config, m, tcfg.seed)?;
    }
    let lambda_phy = if control == Control::NoPred { 0.0 } else { tcfg.lambda_phy };
    Ok(Checkpoint { stage: Stage::Stage1, control, lambda_phy, config, norm_stats: base.norm_stats.clone(), params })
}

fn dataset(ckpt: &Checkpoint, episodes: &[EpisodeRecord]) -> Result<Dataset> {
    check_episodes(episodes)?;
    Dataset::new(episodes, ckpt.config.horizon, ckpt.norm_stats.clone())
}

/// Trains only the new streams on `λ·Σ L_phy`; encoder and expert stay
/// frozen.
pub fn train_stage1(
    tcfg: &TrainingConfig,
    base: &Checkpoint,
    modalities: &[Modality],
    control: Control,
    episodes: &[EpisodeRecord],
    log: LogSink,
) -> Result<(Checkpoint, PhaseSummary)> {
    tcfg.validate()?;
    if control == Control::SingleStage {
        return Err(Error::Invalid("the single-stage arm has no separate first stage".into()));
    }
    let mut ckpt = attach_streams(tcfg, base, modalities, control)?;
    check_horizon(tcfg, &ckpt.config)?;
    let data = dataset(&ckpt, episodes)?;
    // Without a prediction loss there is nothing for this phase to fit.
    let iters = if control == Control::NoPred { 0 } else { tcfg.iters_stage1 };
    let spec = PhaseSpec {
        name: "stage1".into(),
        iters,
        objective: Objective::Physical,
        lambda_phy: ckpt.lambda_phy,
        mask: TrainabilityMask::stage1(&ckpt.config),
    };
    let summary = run_phase(&mut ckpt.params, &ckpt.config, &data, tcfg, &spec, log)?;
    Ok((ckpt, summary))
}

/// Joint fine-tuning of everything on `L_act + λ·Σ L_phy`.
pub fn train_stage2(tcfg: &TrainingConfig, stage1: &Checkpoint, episodes: &[EpisodeRecord], log: LogSink) -> Result<(Checkpoint, PhaseSummary)> {
    tcfg.validate()?;
    if stage1.stage != Stage::Stage1 {
        return Err(Error::Invalid(format!("expected a stage1 checkpoint, got stage {}", stage1.stage.name())));
    }
    check_horizon(tcfg, &stage1.config)?;
    let mut ckpt = stage1.clone();
    let data = dataset(&ckpt, episodes)?;
    let spec = PhaseSpec {
        name: "stage2".into(),
        iters: tcfg.iters_stage2,
        objective: Objective::Full,
        lambda_phy: ckpt.lambda_phy,
        mask: TrainabilityMask::stage2(&ckpt.config, tcfg.freeze_encoder),
    };
    let summary = run_phase(&mut ckpt.params, &ckpt.config, &data, tcfg, &spec, log)?;
    ckpt.stage = Stage::Stage2;
    Ok((ckpt, summary))
}

/// Streams and expert trained together from the base checkpoint in one phase
/// as long as both stages combined.
pub fn train_single_stage(
    tcfg: &TrainingConfig,
    base: &Checkpoint,
    modalities: &[Modality],
    episodes: &[EpisodeRecord],
    log: LogSink,
) -> Result<(Checkpoint, PhaseSummary)> {
    tcfg.validate()?;
    let mut ckpt = attach_streams(tcfg, base, modalities, Control::SingleStage)?;
    check_horizon(tcfg, &ckpt.config)?;
    let data = dataset(&ckpt, episodes)?;
    let spec = PhaseSpec {
        name: "single".into(),
        iters: tcfg.iters_stage1 + tcfg.iters_stage2,
        objective: Objective::Full,
        lambda_phy: ckpt.lambda_phy,
        mask: TrainabilityMask::stage2(&ckpt.config, tcfg.freeze_encoder),
    };
    let summary = run_phase(&mut ckpt.params, &ckpt.config, &data, tcfg, &spec, log)?;
    ckpt.stage = Stage::Stage2;
    Ok((ckpt, summary))
}

/// Both stages (or the single-stage arm) from a base checkpoint. Returns the
/// first-stage checkpoint when one exists, and the final one.
pub fn train_moss(
    tcfg: &TrainingConfig,
    base: &Checkpoint,
    modalities: &[Modality],
    control: Control,
    episodes: &[EpisodeRecord],
    log: LogSink,
) -> Result<(Option<Checkpoint>, Checkpoint)> {
    if control == Control::SingleStage {
        let (c, _) = train_single_stage(tcfg, base, modalities, episodes, log)?;
        return Ok((None, c));
    }
    let (s1, _) = train_stage1(tcfg, base, modalities, control, episodes, &mut *log)?;
    let (s2, _) = train_stage2(tcfg, &s1, episodes, log)?;
    Ok((Some(s1), s2))
}
