use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use modstream::harness::{
    cell_rows, default_stride, dump_attention, dump_predictions, evaluate, measure_latency, summary_rows, write_csv, CellResult, DemoHash,
    DemoSet, Experiment, LearnedPolicy, Manifest, RunConfig, StreamSet, TableProvenance,
};
use modstream::model::{init_params, Modality};
use modstream::sim::{generate_demos, read_episodes, write_episodes, Task};
use modstream::trainer::{train_base, train_stage1, train_stage2, train_moss, Checkpoint, Control, LogLine, NormStats, Stage};

#[derive(Parser)]
#[command(name = "modstream", version, about = "Train and evaluate flow-matching policies with physical-sensory streams")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Demo seed, training seed, or episode seed, depending on the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every artifact and the manifest.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Directory holding the demo files. Defaults to --out.
    #[arg(long, global = true)]
    demos: Option<PathBuf>,
    /// Which training stage to run.
    #[arg(long, global = true, value_enum, default_value = "all")]
    stage: StageArg,
    /// Comma-separated physical modalities. Defaults to every configured one.
    #[arg(long, global = true, value_delimiter = ',')]
    modalities: Option<Vec<String>>,
    #[arg(long, global = true, value_parser = parse_control, default_value = "none")]
    control: Control,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    FragileGrasp,
    BlindInsert,
    All,
}

impl TaskArg {
    fn tasks(self) -> Vec<Task> {
        match self {
            TaskArg::FragileGrasp => vec![Task::FragileGrasp],
            TaskArg::BlindInsert => vec![Task::BlindInsert],
            TaskArg::All => Task::ALL.to_vec(),
        }
    }
}

fn parse_control(s: &str) -> Result<Control, String> {
    Control::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Cmd {
    /// Expert demonstrations for both tasks, one JSONL file each.
    GenDemos,
    /// Train the base policy (no physical streams).
    TrainBase,
    /// Attach physical streams to a base policy and train them.
    TrainMoss {
        /// Base checkpoint. Defaults to <out>/base.ckpt.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Stage-1 checkpoint for --stage 2. Defaults to the one train-moss
        /// writes for the same modalities and control.
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Closed-loop success rate of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        task: TaskArg,
    },
    /// Modality sets crossed with control arms over every training seed.
    Ablate,
    /// Success against the physical loss weight.
    SweepLambda,
    /// Standardized attention onto the physical streams over one rollout.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "fragile-grasp")]
        task: TaskArg,
    },
    /// Predicted against realized physical signals over one rollout.
    DumpPred {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "fragile-grasp")]
        task: TaskArg,
    },
    /// Per-chunk sampling latency with and without streams.
    Latency {
        /// Checkpoints to compare, the first being the reference. Without
        /// any, freshly initialized models of the configured size are used.
        #[arg(long)]
        ckpt: Vec<PathBuf>,
        #[arg(long, default_value_t = 200)]
        calls: usize,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::GenDemos => "gen-demos",
            Cmd::TrainBase => "train-base",
            Cmd::TrainMoss { .. } => "train-moss",
            Cmd::Eval { .. } => "eval",
            Cmd::Ablate => "ablate",
            Cmd::SweepLambda => "sweep-lambda",
            Cmd::DumpAttn { .. } => "dump-attn",
            Cmd::DumpPred { .. } => "dump-pred",
            Cmd::Latency { .. } => "latency",
        }
    }
}

/// Bad input (exit 1) or a failure while running (exit 2).
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn invalid<T>(msg: String) -> Result<T, Failure> {
    Err(Failure::Invalid(anyhow!(msg)))
}

struct Ctx {
    cfg: RunConfig,
    common: Common,
    manifest: Manifest,
}

impl Ctx {
    fn demo_dir(&self) -> &Path {
        self.common.demos.as_deref().unwrap_or(&self.common.out)
    }

    fn demo_path(&self, task: Task) -> PathBuf {
        self.demo_dir().join(DemoSet::file_name(task))
    }

    fn load_demos(&self) -> Result<DemoSet, Failure> {
        let mut per_task = Vec::new();
        for task in Task::ALL {
            let path = self.demo_path(task);
            if !path.exists() {
                return invalid(format!("{} not found; run gen-demos first", path.display()));
            }
            per_task.push((task, read_episodes(&path).runtime()?));
        }
        DemoSet::from_tasks(per_task).runtime()
    }

    /// Demo hashes for provenance; "none" when no demo files are present.
    fn demo_hashes(&self) -> Vec<DemoHash> {
        Task::ALL
            .iter()
            .filter_map(|&t| {
                let bytes = fs::read(self.demo_path(t)).ok()?;
                Some(DemoHash { file: DemoSet::file_name(t), hash: modstream::harness::git_blob_hash(&bytes) })
            })
            .collect()
    }

    fn provenance(&self) -> TableProvenance {
        let demos = self.demo_hashes();
        let demo_hash = if demos.is_empty() { "none".into() } else { modstream::harness::demo_set_hash(&demos) };
        TableProvenance { config_hash: self.manifest.config_hash.clone(), demo_hash }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.common.out.join(name)
    }

    fn record(&mut self, path: &Path) -> Result<(), Failure> {
        self.manifest.record(&self.common.out, path).runtime()
    }

    fn modalities(&self) -> Result<Vec<Modality>, Failure> {
        match &self.common.modalities {
            None => Ok(self.cfg.model.modalities.clone()),
            Some(names) => {
                let names: Vec<&str> = names.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
                if names.is_empty() {
                    return invalid("--modalities names no modality".into());
                }
                self.cfg.select_modalities(&names).invalid()
            }
        }
    }

    fn stream_set(&self) -> Result<StreamSet, Failure> {
        let mut names: Vec<String> = self.modalities()?.into_iter().map(|m| m.name).collect();
        names.sort();
        match names.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
            ["tactile"] => Ok(StreamSet::Tactile),
            ["torque"] => Ok(StreamSet::Torque),
            ["tactile", "torque"] => Ok(StreamSet::Both),
            other => invalid(format!("no stream set for modalities {other:?}")),
        }
    }

    fn load_ckpt(&self, path: &Path) -> Result<Checkpoint, Failure> {
        if !path.exists() {
            return invalid(format!("checkpoint {} not found", path.display()));
        }
        Checkpoint::load(path).invalid()
    }

    fn save_ckpt(&mut self, ckpt: &Checkpoint, name: &str) -> Result<PathBuf, Failure> {
        let path = self.out(name);
        ckpt.save(&path).runtime()?;
        self.record(&path)?;
        Ok(path)
    }
}

/// Training log writer: one JSON object per line.
struct JsonLog {
    w: BufWriter<File>,
    path: PathBuf,
}

impl JsonLog {
    fn create(path: PathBuf) -> Result<Self, Failure> {
        let f = File::create(&path).with_context(|| format!("creating {}", path.display())).runtime()?;
        Ok(Self { w: BufWriter::new(f), path })
    }

    fn sink(&mut self) -> impl FnMut(&LogLine) -> modstream::Result<()> + '_ {
        |line| {
            serde_json::to_writer(&mut self.w, line)?;
            self.w.write_all(b"\n").map_err(|e| modstream::Error::io(&self.path, e))
        }
    }

    fn finish(mut self) -> Result<PathBuf, Failure> {
        self.w.flush().with_context(|| format!("writing {}", self.path.display())).runtime()?;
        Ok(self.path)
    }
}

fn moss_tag(mods: &[Modality], control: Control) -> String {
    let names: Vec<&str> = mods.iter().map(|m| m.name.as_str()).collect();
    format!("moss-{}-{}", names.join("+"), control.name())
}

fn write_json<T: serde::Serialize>(ctx: &mut Ctx, name: &str, value: &T) -> Result<(), Failure> {
    let path = ctx.out(name);
    fs::write(&path, serde_json::to_vec_pretty(value).runtime()?).with_context(|| format!("writing {}", path.display())).runtime()?;
    ctx.record(&path)
}

fn table<T: serde::Serialize>(ctx: &mut Ctx, name: &str, rows: &[T]) -> Result<(), Failure> {
    let path = ctx.out(name);
    write_csv(&path, rows, &ctx.provenance()).runtime()?;
    ctx.record(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gen_demos(ctx: &mut Ctx) -> Result<(), Failure> {
    let seed = ctx.common.seed.unwrap_or(ctx.cfg.demos.seed);
    for task in Task::ALL {
        let (eps, rejected) = generate_demos(task, ctx.cfg.demos.per_task, seed, &ctx.cfg.env).runtime()?;
        let path = ctx.out(&DemoSet::file_name(task));
        write_episodes(&path, &eps).runtime()?;
        ctx.record(&path)?;
        println!("{}: {} episodes ({rejected} failed candidates replaced) -> {}", task.name(), eps.len(), path.display());
    }
    Ok(())
}

fn training_config(ctx: &Ctx) -> modstream::trainer::TrainingConfig {
    let mut t = ctx.cfg.training.clone();
    if let Some(s) = ctx.common.seed {
        t.seed = s;
    }
    t
}

fn train_base_cmd(ctx: &mut Ctx) -> Result<(), Failure> {
    let demos = ctx.load_demos()?;
    let tcfg = training_config(ctx);
    let mut log = JsonLog::create(ctx.out("base.log.jsonl"))?;
    let (ckpt, summary) = train_base(&tcfg, &ctx.cfg.model.without_modalities(), &demos.episodes, &mut log.sink()).runtime()?;
    let log = log.finish()?;
    ctx.record(&log)?;
    let path = ctx.save_ckpt(&ckpt, "base.ckpt")?;
    println!("base: loss {:.4} -> {:.4}, saved {}", summary.head_mean, summary.tail_mean, path.display());
    Ok(())
}

fn train_moss_cmd(ctx: &mut Ctx, base: Option<PathBuf>, stage1: Option<PathBuf>) -> Result<(), Failure> {
    let mods = ctx.modalities()?;
    let control = ctx.common.control;
    let stage = ctx.common.stage;
    if control == Control::SingleStage && stage != StageArg::All {
        return invalid("--control single-stage trains in one phase; use --stage all".into());
    }
    let tag = moss_tag(&mods, control);
    let tcfg = training_config(ctx);
    let demos = ctx.load_demos()?;
    let mut log = JsonLog::create(ctx.out(&format!("{tag}.log.jsonl")))?;
    let load_base = |ctx: &Ctx| ctx.load_ckpt(&base.clone().unwrap_or_else(|| ctx.out("base.ckpt")));
    match stage {
        StageArg::All => {
            let base = load_base(ctx)?;
            let (s1, s2) = train_moss(&tcfg, &base, &mods, control, &demos.episodes, &mut log.sink()).runtime()?;
            if let Some(s1) = s1 {
                ctx.save_ckpt(&s1, &format!("{tag}.stage1.ckpt"))?;
            }
            let p = ctx.save_ckpt(&s2, &format!("{tag}.stage2.ckpt"))?;
            println!("saved {}", p.display());
        }
        StageArg::One => {
            let base = load_base(ctx)?;
            let (s1, _) = train_stage1(&tcfg, &base, &mods, control, &demos.episodes, &mut log.sink()).runtime()?;
            let p = ctx.save_ckpt(&s1, &format!("{tag}.stage1.ckpt"))?;
            println!("saved {}", p.display());
        }
        StageArg::Two => {
            let path = stage1.unwrap_or_else(|| ctx.out(&format!("{tag}.stage1.ckpt")));
            let s1 = ctx.load_ckpt(&path)?;
            if s1.stage != Stage::Stage1 {
                return invalid(format!("{} is a {} checkpoint, not stage1", path.display(), s1.stage.name()));
            }
            let (s2, _) = train_stage2(&tcfg, &s1, &demos.episodes, &mut log.sink()).runtime()?;
            let p = ctx.save_ckpt(&s2, &format!("{tag}.stage2.ckpt"))?;
            println!("saved {}", p.display());
        }
    }
    let log = log.finish()?;
    ctx.record(&log)
}

fn ckpt_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn eval_cmd(ctx: &mut Ctx, ckpt_path: &Path, task: TaskArg) -> Result<(), Failure> {
    let ckpt = ctx.load_ckpt(ckpt_path)?;
    if ckpt.config.num_tasks < Task::ALL.len() {
        return invalid(format!("checkpoint knows {} tasks", ckpt.config.num_tasks));
    }
    let e = ctx.cfg.eval.clone();
    let seed0 = ctx.common.seed.unwrap_or(e.seed0);
    let policy = LearnedPolicy::new(ckpt.clone(), ctx.cfg.training.k_sample);
    let name = ckpt_name(ckpt_path);
    let mut reports = Vec::new();
    for t in task.tasks() {
        let r = evaluate(&policy, &name, t, e.episodes, seed0, &ctx.cfg.env, default_stride(ckpt.config.horizon), e.workers).runtime()?;
        println!("{} {}: {}/{} = {:.3}", name, r.task, r.successes, r.n_episodes, r.success_rate);
        reports.push(r);
    }
    let prov = ctx.provenance();
    write_json(ctx, "eval.json", &serde_json::json!({ "provenance": prov, "reports": reports }))?;
    #[derive(serde::Serialize)]
    struct Row<'a> {
        checkpoint: &'a str,
        task: &'a str,
        n_episodes: usize,
        successes: usize,
        success_rate: f64,
        seed_first: u64,
        seed_last: u64,
    }
    let rows: Vec<Row> = reports
        .iter()
        .map(|r| Row {
            checkpoint: &r.checkpoint,
            task: &r.task,
            n_episodes: r.n_episodes,
            successes: r.successes,
            success_rate: r.success_rate,
            seed_first: r.seed_range.0,
            seed_last: r.seed_range.1,
        })
        .collect();
    table(ctx, "eval.csv", &rows)
}

fn experiment(ctx: &Ctx) -> Result<Experiment, Failure> {
    let demos = ctx.load_demos()?;
    let mut cfg = ctx.cfg.clone();
    if let Some(s) = ctx.common.seed {
        cfg.training.seed = s;
    }
    let mut exp = Experiment::new(cfg, demos, Some(ctx.out("cache"))).invalid()?;
    exp.verbose = true;
    Ok(exp)
}

fn grid_tables(ctx: &mut Ctx, prefix: &str, cells: &[CellResult]) -> Result<(), Failure> {
    table(ctx, &format!("{prefix}_cells.csv"), &cell_rows(cells))?;
    let summary = summary_rows(cells);
    for r in &summary {
        println!(
            "{:>8} {:>13} lambda={:<4} fragile {:.3}±{:.3} insert {:.3}±{:.3} pooled {:.3}±{:.3}",
            r.streams, r.control, r.lambda_phy, r.fragile_grasp_mean, r.fragile_grasp_sd, r.blind_insert_mean, r.blind_insert_sd, r.pooled_mean, r.pooled_sd
        );
    }
    table(ctx, &format!("{prefix}_summary.csv"), &summary)
}

fn ablate_cmd(ctx: &mut Ctx) -> Result<(), Failure> {
    let exp = experiment(ctx)?;
    let cells = exp.ablation_grid().runtime()?;
    grid_tables(ctx, "ablation", &cells)
}

fn sweep_cmd(ctx: &mut Ctx) -> Result<(), Failure> {
    let set = ctx.stream_set()?;
    let exp = experiment(ctx)?;
    let cells = exp.lambda_sweep(set).runtime()?;
    grid_tables(ctx, "lambda", &cells)
}

fn single_task(task: TaskArg) -> Result<Task, Failure> {
    match task.tasks().as_slice() {
        [t] => Ok(*t),
        _ => invalid("dumps take one task".into()),
    }
}

fn dump_attn_cmd(ctx: &mut Ctx, ckpt_path: &Path, task: TaskArg) -> Result<(), Failure> {
    let ckpt = ctx.load_ckpt(ckpt_path)?;
    let task = single_task(task)?;
    let seed = ctx.common.seed.unwrap_or(ctx.cfg.eval.seed0);
    let trace = dump_attention(&ckpt, task, seed, ctx.cfg.training.k_sample, &ctx.cfg.env).invalid()?;
    for s in &trace.streams {
        if let Some((pre, contact)) = trace.contact_contrast(s) {
            println!("{s}: mean z pre-contact {pre:.3}, first-contact window {contact:.3}");
        }
    }
    table(ctx, "attention.csv", &trace.rows())
}

fn dump_pred_cmd(ctx: &mut Ctx, ckpt_path: &Path, task: TaskArg) -> Result<(), Failure> {
    let ckpt = ctx.load_ckpt(ckpt_path)?;
    let task = single_task(task)?;
    let seed = ctx.common.seed.unwrap_or(ctx.cfg.eval.seed0);
    let dump = dump_predictions(&ckpt, task, seed, ctx.cfg.training.k_sample, &ctx.cfg.env).invalid()?;
    #[derive(serde::Serialize)]
    struct Row<'a> {
        modality: &'a str,
        n: usize,
        rmse_model: f64,
        rmse_persistence: f64,
        n_transition: usize,
        rmse_model_transition: f64,
        rmse_persistence_transition: f64,
    }
    let rows: Vec<Row> = dump
        .errors
        .iter()
        .map(|e| Row {
            modality: &e.modality,
            n: e.n,
            rmse_model: e.rmse_model(),
            rmse_persistence: e.rmse_persistence(),
            n_transition: e.n_transition,
            rmse_model_transition: e.rmse_model_transition(),
            rmse_persistence_transition: e.rmse_persistence_transition(),
        })
        .collect();
    for r in &rows {
        println!("{}: transition RMSE {:.4} (persistence {:.4}) over {} values", r.modality, r.rmse_model_transition, r.rmse_persistence_transition, r.n_transition);
    }
    table(ctx, "predictions.csv", &dump.rows)?;
    table(ctx, "prediction_rmse.csv", &rows)
}

fn latency_cmd(ctx: &mut Ctx, ckpts: &[PathBuf], calls: usize, warmup: usize) -> Result<(), Failure> {
    let variants: Vec<(String, Checkpoint)> = if ckpts.is_empty() {
        let base = ctx.cfg.model.without_modalities();
        let stats = NormStats::identity(&ctx.cfg.model);
        [StreamSet::Base, StreamSet::Tactile, StreamSet::Torque, StreamSet::Both]
            .into_iter()
            .map(|set| {
                let config = modstream::model::ModelConfig { modalities: ctx.cfg.select_modalities(set.modality_names())?, ..base.clone() };
                let params = init_params(&config, 0)?;
                let stage = if set == StreamSet::Base { Stage::Base } else { Stage::Stage2 };
                Ok((set.name().to_string(), Checkpoint { stage, control: Control::None, lambda_phy: 0.1, config, norm_stats: stats.clone(), params }))
            })
            .collect::<modstream::Result<_>>()
            .invalid()?
    } else {
        ckpts.iter().map(|p| Ok((ckpt_name(p), ctx.load_ckpt(p)?))).collect::<Result<_, Failure>>()?
    };
    let rows = measure_latency(&variants, ctx.cfg.training.k_sample, warmup, calls).invalid()?;
    for r in &rows {
        println!("{:>10} streams={} {:.3} ms  {:.2}x", r.variant, r.streams, r.median_ms, r.ratio);
    }
    table(ctx, "latency.csv", &rows)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display())).invalid()?,
        None => RunConfig::default(),
    };
    fs::create_dir_all(&cli.common.out).with_context(|| format!("creating {}", cli.common.out.display())).runtime()?;
    let name = cli.cmd.name();
    let manifest = Manifest::new(name, cli.common.seed.unwrap_or(cfg.training.seed), cfg.hash().runtime()?);
    let mut ctx = Ctx { cfg, common: cli.common, manifest };
    match &cli.cmd {
        Cmd::GenDemos => gen_demos(&mut ctx)?,
        Cmd::TrainBase => train_base_cmd(&mut ctx)?,
        Cmd::TrainMoss { base, stage1 } => train_moss_cmd(&mut ctx, base.clone(), stage1.clone())?,
        Cmd::Eval { ckpt, task } => eval_cmd(&mut ctx, ckpt, *task)?,
        Cmd::Ablate => ablate_cmd(&mut ctx)?,
        Cmd::SweepLambda => sweep_cmd(&mut ctx)?,
        Cmd::DumpAttn { ckpt, task } => dump_attn_cmd(&mut ctx, ckpt, *task)?,
        Cmd::DumpPred { ckpt, task } => dump_pred_cmd(&mut ctx, ckpt, *task)?,
        Cmd::Latency { ckpt, calls, warmup } => latency_cmd(&mut ctx, ckpt, *calls, *warmup)?,
    }
    ctx.manifest.demos = ctx.demo_hashes();
    ctx.manifest.write(&ctx.common.out).runtime()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
