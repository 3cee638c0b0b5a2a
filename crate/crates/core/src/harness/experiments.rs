//! Run configuration and the experiment grid: modality sets crossed with
//! control arms, over several training seeds, with per-cell caching so an
//! interrupted grid resumes where it stopped.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::{default_stride, evaluate, LearnedPolicy, SuccessReport};
use super::provenance::{config_hash, demo_set_hash, git_blob_hash, DemoHash};
use crate::error::{Error, Result};
use crate::model::{Modality, ModelConfig};
use crate::sim::{episodes_jsonl, generate_demos, EnvConfig, EpisodeRecord, Task};
use crate::trainer::{discard_log, train_base, train_moss, Checkpoint, Control, TrainingConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub per_task: usize,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self { per_task: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed0: u64,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 200, seed0: 1_000_000, workers: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Training seeds per cell: `training.seed + 0 .. seeds`.
    pub seeds: u64,
    pub lambdas: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { seeds: 3, lambdas: vec![0.1, 0.5, 1.0] }
    }
}

/// Everything a command needs. `model.modalities` lists every stream a
/// model may attach.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub env: EnvConfig,
    pub demos: DemoConfig,
    pub eval: EvalConfig,
    pub grid: GridConfig,
}

impl RunConfig {
    /// Small model, larger step size, longer schedules: what a single CPU
    /// core can train in a couple of minutes per cell.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.model.width = 32;
        c.model.depth = 2;
        c.model.heads = 2;
        c.training.peak_lr = 1e-3;
        c.training.iters_base = 12_000;
        c.training.iters_stage1 = 6_000;
        c.training.iters_stage2 = 12_000;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        if self.training.horizon != self.model.horizon {
            return Err(Error::Invalid(format!("training.horizon {} != model.horizon {}", self.training.horizon, self.model.horizon)));
        }
        if self.demos.per_task == 0 || self.eval.episodes == 0 || self.grid.seeds == 0 {
            return Err(Error::Invalid("demos.per_task, eval.episodes and grid.seeds must be positive".into()));
        }
        if self.env.obs_noise < 0.0 || !self.env.obs_noise.is_finite() {
            return Err(Error::Invalid(format!("env.obs_noise must be finite and non-negative, got {}", self.env.obs_noise)));
        }
        if let Some(l) = self.grid.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::Invalid(format!("grid.lambdas: {l} is not a finite non-negative weight")));
        }
        Ok(())
    }

    /// Parses JSON, rejecting unknown keys, then validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn select_modalities(&self, names: &[&str]) -> Result<Vec<Modality>> {
        names.iter().map(|n| self.model.modality(n).cloned()).collect()
    }
}

/// Which physical streams a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamSet {
    Base,
    Tactile,
    Torque,
    Both,
}

impl StreamSet {
    pub const ALL: [StreamSet; 4] = [StreamSet::Base, StreamSet::Tactile, StreamSet::Torque, StreamSet::Both];

    pub fn name(self) -> &'static str {
        match self {
            StreamSet::Base => "base",
            StreamSet::Tactile => "tactile",
            StreamSet::Torque => "torque",
            StreamSet::Both => "both",
        }
    }

    pub fn modality_names(self) -> &'static [&'static str] {
        match self {
            StreamSet::Base => &[],
            StreamSet::Tactile => &["tactile"],
            StreamSet::Torque => &["torque"],
            StreamSet::Both => &["tactile", "torque"],
        }
    }
}

/// Demonstrations for both tasks plus their content hashes.
pub struct DemoSet {
    pub episodes: Vec<EpisodeRecord>,
    pub files: Vec<DemoHash>,
}

impl DemoSet {
    pub fn file_name(task: Task) -> String {
        format!("demos_{}.jsonl", task.name())
    }

    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let mut per_task = Vec::new();
        for task in Task::ALL {
            per_task.push((task, generate_demos(task, cfg.demos.per_task, cfg.demos.seed, &cfg.env)?.0));
        }
        Self::from_tasks(per_task)
    }

    pub fn from_tasks(per_task: Vec<(Task, Vec<EpisodeRecord>)>) -> Result<Self> {
        let mut episodes = Vec::new();
        let mut files = Vec::new();
        for (task, eps) in per_task {
            files.push(DemoHash { file: Self::file_name(task), hash: git_blob_hash(episodes_jsonl(&eps)?.as_bytes()) });
            episodes.extend(eps);
        }
        Ok(Self { episodes, files })
    }

    pub fn hash(&self) -> String {
        demo_set_hash(&self.files)
    }
}

/// One trained-and-evaluated grid entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub streams: StreamSet,
    pub control: Control,
    pub lambda_phy: f64,
    pub seed: u64,
    pub reports: Vec<SuccessReport>,
    /// Wall time to train this cell from scratch, base included.
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

impl CellResult {
    pub fn rate(&self, task: Task) -> f64 {
        self.reports.iter().find(|r| r.task == task.name()).map_or(f64::NAN, |r| r.success_rate)
    }

    /// Success rate over both tasks' episodes together.
    pub fn pooled(&self) -> f64 {
        let n: usize = self.reports.iter().map(|r| r.n_episodes).sum();
        let s: usize = self.reports.iter().map(|r| r.successes).sum();
        s as f64 / n.max(1) as f64
    }
}

pub struct Experiment {
    pub cfg: RunConfig,
    pub demos: DemoSet,
    /// Checkpoints and cell results are kept here when set.
    pub cache: Option<PathBuf>,
    pub verbose: bool,
}

impl Experiment {
    pub fn new(cfg: RunConfig, demos: DemoSet, cache: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, demos, cache, verbose: false })
    }

    /// Cache entries live under a key of the config and demo hashes, so a
    /// changed config never reuses stale results.
    fn cache_dir(&self) -> Result<Option<PathBuf>> {
        let Some(root) = &self.cache else { return Ok(None) };
        let dir = root.join(format!("{}-{}", &self.cfg.hash()?[..16], &self.demos.hash()[..16]));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Some(dir))
    }

    fn note(&self, msg: impl FnOnce() -> String) {
        if self.verbose {
            eprintln!("{}", msg());
        }
    }

    pub fn training(&self, seed: u64, lambda_phy: f64) -> TrainingConfig {
        TrainingConfig { seed: self.cfg.training.seed + seed, lambda_phy, ..self.cfg.training.clone() }
    }

    fn cached_checkpoint(&self, key: &str, train: impl FnOnce() -> Result<Checkpoint>) -> Result<(Checkpoint, f64)> {
        let dir = self.cache_dir()?;
        if let Some(dir) = &dir {
            let path = dir.join(format!("{key}.ckpt"));
            let time = dir.join(format!("{key}.seconds"));
            if path.exists() && time.exists() {
                let secs = fs::read_to_string(&time).map_err(|e| Error::io(&time, e))?.trim().parse().unwrap_or(f64::NAN);
                return Ok((Checkpoint::load(&path)?, secs));
            }
        }
        let start = Instant::now();
        let ckpt = train()?;
        let secs = start.elapsed().as_secs_f64();
        self.note(|| format!("trained {key} in {secs:.1}s"));
        if let Some(dir) = &dir {
            ckpt.save(&dir.join(format!("{key}.ckpt")))?;
            let time = dir.join(format!("{key}.seconds"));
            fs::write(&time, format!("{secs}\n")).map_err(|e| Error::io(&time, e))?;
        }
        Ok((ckpt, secs))
    }

    /// Base policy for training seed offset `seed`, and its training time.
    pub fn base(&self, seed: u64) -> Result<(Checkpoint, f64)> {
        let tcfg = self.training(seed, self.cfg.training.lambda_phy);
        let model = self.cfg.model.without_modalities();
        self.cached_checkpoint(&format!("base-s{seed}"), || Ok(train_base(&tcfg, &model, &self.demos.episodes, &mut discard_log)?.0))
    }

    /// The final checkpoint of one cell and its training time, base included.
    pub fn model(&self, streams: StreamSet, control: Control, lambda_phy: f64, seed: u64) -> Result<(Checkpoint, f64)> {
        let (base, base_secs) = self.base(seed)?;
        if streams == StreamSet::Base {
            return Ok((base, base_secs));
        }
        let mods = self.cfg.select_modalities(streams.modality_names())?;
        let tcfg = self.training(seed, lambda_phy);
        let key = format!("{}-{}-l{lambda_phy}-s{seed}", streams.name(), control.name());
        let (ckpt, secs) = self.cached_checkpoint(&key, || Ok(train_moss(&tcfg, &base, &mods, control, &self.demos.episodes, &mut discard_log)?.1))?;
        Ok((ckpt, base_secs + secs))
    }

    pub fn evaluate(&self, ckpt: &Checkpoint, name: &str) -> Result<Vec<SuccessReport>> {
        let policy = LearnedPolicy::new(ckpt.clone(), self.cfg.training.k_sample);
        let e = &self.cfg.eval;
        Task::ALL
            .iter()
            .map(|&task| evaluate(&policy, name, task, e.episodes, e.seed0, &self.cfg.env, default_stride(ckpt.config.horizon), e.workers))
            .collect()
    }

    /// Trains (or loads) and evaluates one cell. Results are cached as JSON.
    pub fn cell(&self, streams: StreamSet, control: Control, lambda_phy: f64, seed: u64) -> Result<CellResult> {
        let key = format!("cell-{}-{}-l{lambda_phy}-s{seed}.json", streams.name(), control.name());
        let dir = self.cache_dir()?;
        if let Some(path) = dir.as_ref().map(|d| d.join(&key)) {
            if path.exists() {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                return Ok(serde_json::from_slice(&bytes)?);
            }
        }
        let (ckpt, train_seconds) = self.model(streams, control, lambda_phy, seed)?;
        let name = format!("{}/{}/lambda={lambda_phy}/seed={seed}", streams.name(), control.name());
        let start = Instant::now();
        let reports = self.evaluate(&ckpt, &name)?;
        let eval_seconds = start.elapsed().as_secs_f64();
        let cell = CellResult { streams, control, lambda_phy, seed, reports, train_seconds, eval_seconds };
        self.note(|| format!("{name}: {:.3} {:.3}", cell.rate(Task::FragileGrasp), cell.rate(Task::BlindInsert)));
        if let Some(path) = dir.map(|d| d.join(&key)) {
            fs::write(&path, serde_json::to_vec(&cell)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(cell)
    }

    /// `{base, +tactile, +torque, +both} x {full, fused, single-stage,
    /// no-pred}` over every training seed. Base has no streams, so all of
    /// its arms share the base checkpoint.
    pub fn ablation_grid(&self) -> Result<Vec<CellResult>> {
        let mut out = Vec::new();
        for seed in 0..self.cfg.grid.seeds {
            for streams in StreamSet::ALL {
                for control in Control::ALL {
                    let lambda = if control == Control::NoPred { 0.0 } else { self.cfg.training.lambda_phy };
                    let mut cell = match streams {
                        StreamSet::Base => self.cell(streams, Control::None, self.cfg.training.lambda_phy, seed)?,
                        _ => self.cell(streams, control, lambda, seed)?,
                    };
                    cell.control = control;
                    out.push(cell);
                }
            }
        }
        Ok(out)
    }

    pub fn lambda_sweep(&self, streams: StreamSet) -> Result<Vec<CellResult>> {
        let mut out = Vec::new();
        for seed in 0..self.cfg.grid.seeds {
            for &l in &self.cfg.grid.lambdas {
                out.push(self.cell(streams, Control::None, l, seed)?);
            }
        }
        Ok(out)
    }
}

/// Sample mean and standard deviation (n - 1).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Serialize)]
pub struct CellRow {
    pub streams: &'static str,
    pub control: &'static str,
    pub lambda_phy: f64,
    pub seed: u64,
    pub fragile_grasp: f64,
    pub blind_insert: f64,
    pub pooled: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// One row per cell and seed.
pub fn cell_rows(cells: &[CellResult]) -> Vec<CellRow> {
    cells
        .iter()
        .map(|c| CellRow {
            streams: c.streams.name(),
            control: c.control.name(),
            lambda_phy: c.lambda_phy,
            seed: c.seed,
            fragile_grasp: c.rate(Task::FragileGrasp),
            blind_insert: c.rate(Task::BlindInsert),
            pooled: c.pooled(),
            train_seconds: c.train_seconds,
            eval_seconds: c.eval_seconds,
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct SummaryRow {
    pub streams: &'static str,
    pub control: &'static str,
    pub lambda_phy: f64,
    pub seeds: usize,
    pub fragile_grasp_mean: f64,
    pub fragile_grasp_sd: f64,
    pub blind_insert_mean: f64,
    pub blind_insert_sd: f64,
    pub pooled_mean: f64,
    pub pooled_sd: f64,
}

/// Mean and sd over seeds of every `(streams, control, lambda)` group, in
/// first-seen order.
pub fn summary_rows(cells: &[CellResult]) -> Vec<SummaryRow> {
    let mut groups: Vec<(StreamSet, Control, f64, Vec<&CellResult>)> = Vec::new();
    for c in cells {
        match groups.iter_mut().find(|g| g.0 == c.streams && g.1 == c.control && g.2 == c.lambda_phy) {
            Some(g) => g.3.push(c),
            None => groups.push((c.streams, c.control, c.lambda_phy, vec![c])),
        }
    }
    groups
        .into_iter()
        .map(|(streams, control, lambda_phy, cs)| {
            let stat = |f: &dyn Fn(&CellResult) -> f64| mean_sd(&cs.iter().map(|c| f(c)).collect::<Vec<_>>());
            let (fm, fs) = stat(&|c| c.rate(Task::FragileGrasp));
            let (bm, bs) = stat(&|c| c.rate(Task::BlindInsert));
            let (pm, ps) = stat(&|c| c.pooled());
            SummaryRow {
                streams: streams.name(),
                control: control.name(),
                lambda_phy,
                seeds: cs.len(),
                fragile_grasp_mean: fm,
                fragile_grasp_sd: fs,
                blind_insert_mean: bm,
                blind_insert_sd: bs,
                pooled_mean: pm,
                pooled_sd: ps,
            }
        })
        .collect()
}
