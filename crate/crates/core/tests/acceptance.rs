//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! C5 to C11 train the desk preset over three seeds; checkpoints and
//! evaluation results are cached (by config and demo hash) under
//! `MOSS_ACCEPTANCE_CACHE`, default `target/tmp/acceptance-cache`, so only the
//! first run pays for training.

use std::path::PathBuf;
use std::time::Instant;

use modstream::autodiff::check::{check_ops, rel_err, FD_STEP};
use modstream::autodiff::{Graph, ParamStore, Tensor};
use modstream::harness::{
    dump_attention, dump_predictions, mean_sd, measure_latency, CellResult, DemoSet, Experiment, PredictionError, RunConfig, StreamSet,
};
use modstream::model::{
    encode_observation, euler_integrate, forward, init_params, noisy_interpolant, plain_forward, set_trainable, ForwardOptions, Modality,
    ModelConfig, ModelInput, PhysicalInput, TrainabilityMask, VelocityField, ACTION_GROUP, ENCODER_GROUP,
};
use modstream::objectives::{build_loss, NoiseDraw, Objective};
use modstream::rng::Rng;
use modstream::sim::{generate_demos, grip_succeeds, EnvConfig, Task, HARD_STIFFNESS, SOFT_STIFFNESS};
use modstream::trainer::{attach_streams, discard_log, train_base, train_stage1, Checkpoint, Control, Dataset, NormStats, Stage, TrainingConfig};
use modstream::Result;

type Outcome = Result<(bool, String)>;

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

// C1
fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst_op: (f64, &str) = (0.0, "");
    for trial in 0..20 {
        for (op, e) in check_ops(trial)? {
            if e > worst_op.0 {
                worst_op = (e, op);
            }
        }
    }
    let worst_model = full_model_gradcheck(50)?;
    let secs = start.elapsed().as_secs_f64();
    let ok = worst_op.0 <= 1e-4 && worst_model <= 1e-4 && secs <= 60.0;
    Ok((ok, format!("worst op rel err {:.2e} ({}), full-model {:.2e} over 50 params, {secs:.1}s", worst_op.0, worst_op.1, worst_model)))
}

fn small_model(modalities: Vec<Modality>) -> ModelConfig {
    ModelConfig { horizon: 4, modalities, width: 8, depth: 2, heads: 2, mlp_ratio: 2, ..ModelConfig::default() }
}

fn jittered(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut store = init_params(config, seed)?;
    let mut rng = Rng::derive(seed, "jitter", 0);
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += 0.3 * rng.normal());
    }
    Ok(store)
}

fn random_input(config: &ModelConfig, batch: usize, rng: &mut Rng) -> ModelInput {
    let h = config.horizon;
    ModelInput {
        visual: rng.normal_tensor(&[batch, config.obs_feat_dim]),
        task: (0..batch).map(|_| rng.below(config.num_tasks)).collect(),
        state: rng.normal_tensor(&[batch, config.state_dim]),
        actions: rng.normal_tensor(&[batch, h, config.action_dim]),
        tau: (0..batch).map(|_| rng.uniform()).collect(),
        physical: config
            .modalities
            .iter()
            .map(|m| PhysicalInput { past: rng.normal_tensor(&[batch, h, m.dim]), future: rng.normal_tensor(&[batch, h, m.dim]) })
            .collect(),
    }
}

fn full_model_gradcheck(n: usize) -> Result<f64> {
    let config = small_model(vec![Modality::new("tactile", 4), Modality::new("torque", 2)]);
    let mut params = jittered(&config, 21)?;
    let mut rng = Rng::from_seed(21);
    let input = random_input(&config, 2, &mut rng);
    let target_a = rng.normal_tensor(&[2, 4, 3]);
    let target_p: Vec<Tensor> = config.modalities.iter().map(|m| rng.normal_tensor(&[2, 4, m.dim])).collect();
    let loss = |params: &ParamStore, grads: bool| -> Result<(f64, Option<ParamStore>)> {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let h = encode_observation(&mut g, &b, &config, &input.visual, &input.task)?;
        let out = forward(&mut g, &b, &config, h, &input, ForwardOptions::default())?;
        let t = g.input(target_a.clone());
        let mut l = g.mse(out.action, t)?;
        for (&v, target) in out.physical.iter().zip(&target_p) {
            let t = g.input(target.clone());
            let lp = g.mse(v, t)?;
            let lp = g.scale(lp, 0.1);
            l = g.add(l, lp)?;
        }
        let value = g.value(l).item()?;
        if !grads {
            return Ok((value, None));
        }
        g.backward(l)?;
        let mut with = params.clone();
        with.collect_grads(&g, &b);
        Ok((value, Some(with)))
    };
    let analytic = loss(&params, true)?.1.expect("gradients requested");
    let names: Vec<(String, usize)> = params.iter().map(|p| (p.name.clone(), p.value.numel())).collect();
    let total: usize = names.iter().map(|(_, n)| n).sum();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let mut k = rng.below(total);
        let (name, idx) = names
            .iter()
            .find_map(|(nm, len)| {
                if k < *len {
                    Some((nm.clone(), k))
                } else {
                    k -= len;
                    None
                }
            })
            .expect("index within total");
        let orig = params.get(&name)?.value.data()[idx];
        params.get_mut(&name)?.value.data_mut()[idx] = orig + FD_STEP;
        let lp = loss(&params, false)?.0;
        params.get_mut(&name)?.value.data_mut()[idx] = orig - FD_STEP;
        let lm = loss(&params, false)?.0;
        params.get_mut(&name)?.value.data_mut()[idx] = orig;
        let fd = (lp - lm) / (2.0 * FD_STEP);
        let an = analytic.get(&name)?.grad.as_ref().map_or(0.0, |g| g.data()[idx]);
        worst = worst.max(rel_err(an, fd));
    }
    Ok(worst)
}

// C2
fn degenerate_equivalence() -> Outcome {
    let config = ModelConfig { modalities: vec![], ..ModelConfig::default() };
    let params = jittered(&config, 5)?;
    let mut rng = Rng::from_seed(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let input = random_input(&config, 2, &mut rng);
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let h = encode_observation(&mut g, &b, &config, &input.visual, &input.task)?;
        let moss = forward(&mut g, &b, &config, h, &input, ForwardOptions::default())?.action;
        let plain = plain_forward(&mut g, &b, &config, h, &input)?;
        worst = worst.max(g.value(moss).max_abs_diff(g.value(plain)));
    }
    Ok((worst <= 1e-10, format!("max |difference| {worst:.1e} over 50 inputs")))
}

// C3
fn freeze_contract() -> Outcome {
    let env = EnvConfig::default();
    let mut eps = generate_demos(Task::FragileGrasp, 4, 0, &env)?.0;
    eps.extend(generate_demos(Task::BlindInsert, 4, 0, &env)?.0);
    let t = TrainingConfig { iters_base: 20, iters_stage1: 40, warmup: 5, peak_lr: 1e-3, batch_size: 8, ..TrainingConfig::default() };
    let m = ModelConfig { width: 16, depth: 1, heads: 2, ..ModelConfig::default() };
    let mods = ModelConfig::default().modalities;
    let (base, _) = train_base(&t, &m, &eps, &mut discard_log)?;
    let (s1, _) = train_stage1(&t, &base, &mods, Control::None, &eps, &mut discard_log)?;
    let bits = |c: &Checkpoint, group: &str| -> Vec<u64> {
        c.params.iter().filter(|p| p.group == group).flat_map(|p| p.value.data().iter().map(|x| x.to_bits())).collect()
    };
    let unchanged = [ENCODER_GROUP, ACTION_GROUP].iter().all(|g| bits(&base, g) == bits(&s1, g));
    let moved = s1.params.iter().filter(|p| p.group.starts_with("physical:")).any(|p| base.params.get(&p.name).is_err() || p.value.data().iter().any(|&x| x != 0.0));

    // λ = 0: the physical heads receive exactly zero gradient.
    let fresh = attach_streams(&t, &base, &mods, Control::None)?;
    let mut params = fresh.params.clone();
    set_trainable(&mut params, &TrainabilityMask::all(&fresh.config, true))?;
    let data = Dataset::new(&eps, fresh.config.horizon, fresh.norm_stats.clone())?;
    let batch = data.batch(&[0, 3, 7, 11], &fresh.config.modalities)?;
    let noise = NoiseDraw::sample(&fresh.config, 4, &mut Rng::from_seed(3));
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let (loss, _) = build_loss(&mut g, &b, &fresh.config, &batch, &noise, 0.0, Objective::Full)?;
    g.backward(loss)?;
    params.collect_grads(&g, &b);
    let heads: Vec<_> = params.iter().filter(|p| p.group.starts_with("physical:") && p.name.contains(".head.")).collect();
    let zero = !heads.is_empty() && heads.iter().all(|p| p.grad.as_ref().is_some_and(|gr| gr.data().iter().all(|&x| x == 0.0)));
    Ok((
        unchanged && moved && zero,
        format!("encoder+expert bitwise unchanged: {unchanged}; {} physical head arrays with exactly zero grad at lambda 0: {zero}", heads.len()),
    ))
}

// C4
struct ConstantField(Tensor);

impl VelocityField for ConstantField {
    fn velocity(&mut self, _: &Tensor, futures: &[Tensor], _: f64) -> Result<(Tensor, Vec<Tensor>)> {
        Ok((self.0.clone(), futures.iter().map(|f| Tensor::zeros(f.shape())).collect()))
    }
}

fn sampler_identities() -> Outcome {
    let mut rng = Rng::from_seed(4);
    let x = rng.normal_tensor(&[3, 8, 3]);
    let e = rng.normal_tensor(&[3, 8, 3]);
    let endpoints = noisy_interpolant(&x, &e, 1.0)? == x && noisy_interpolant(&x, &e, 0.0)? == e;
    let v = rng.normal_tensor(&[3, 8, 3]);
    let mut worst: f64 = 0.0;
    for k in [1, 5, 10] {
        let eps = rng.normal_tensor(&[3, 8, 3]);
        let (a, _) = euler_integrate(&mut ConstantField(v.clone()), eps.clone(), vec![], k)?;
        let expected = Tensor::from_fn(eps.shape(), |i| eps.data()[i] + v.data()[i]);
        worst = worst.max(a.max_abs_diff(&expected));
    }
    Ok((endpoints && worst < 1e-12, format!("endpoints exact: {endpoints}; constant-field error {worst:.1e} for K in 1, 5, 10")))
}

/// Trained models, shared by C5 to C11.
struct Desk {
    exp: Experiment,
    lambda: f64,
}

impl Desk {
    fn seeds(&self) -> Vec<u64> {
        (0..self.exp.cfg.grid.seeds).collect()
    }

    fn cells(&self, streams: StreamSet, control: Control, lambda: f64) -> Result<Vec<CellResult>> {
        self.seeds().into_iter().map(|s| self.exp.cell(streams, control, lambda, s)).collect()
    }

    fn full(&self, streams: StreamSet) -> Result<Vec<CellResult>> {
        self.cells(streams, Control::None, self.lambda)
    }
}

fn mean_of(cells: &[CellResult], f: impl Fn(&CellResult) -> f64) -> f64 {
    mean_sd(&cells.iter().map(f).collect::<Vec<_>>()).0
}

fn rates(cells: &[CellResult], task: Task) -> String {
    cells.iter().map(|c| pct(c.rate(task))).collect::<Vec<_>>().join("/")
}

// C5
fn vision_insufficiency(desk: &Desk) -> Outcome {
    let both = (0..100).map(|i| 2.0 * HARD_STIFFNESS * i as f64 / 99.0).filter(|&f| grip_succeeds(SOFT_STIFFNESS, f) && grip_succeeds(HARD_STIFFNESS, f)).count();
    let base = desk.full(StreamSet::Base)?;
    let m = mean_of(&base, |c| c.rate(Task::FragileGrasp));
    let ok = both == 0 && (0.35..=0.55).contains(&m);
    Ok((ok, format!("{both} of 100 constant forces fit both classes; base FragileGrasp mean {} (seeds {})", pct(m), rates(&base, Task::FragileGrasp))))
}

// C6
fn modality_efficacy(desk: &Desk) -> Outcome {
    let base = desk.full(StreamSet::Base)?;
    let tactile = desk.full(StreamSet::Tactile)?;
    let torque = desk.full(StreamSet::Torque)?;
    let both = desk.full(StreamSet::Both)?;
    let fg = |c: &[CellResult]| mean_of(c, |x| x.rate(Task::FragileGrasp));
    let bi = |c: &[CellResult]| mean_of(c, |x| x.rate(Task::BlindInsert));
    let pooled = |c: &[CellResult]| mean_of(c, |x| x.pooled());
    let tactile_ok = fg(&tactile) >= 0.85 && fg(&tactile) >= fg(&base) + 0.25;
    let torque_ok = bi(&torque) >= 0.85 && bi(&torque) >= bi(&base) + 0.25;
    let both_ok = pooled(&both) >= pooled(&tactile) - 0.02 && pooled(&both) >= pooled(&torque) - 0.02;
    let order_ok = pooled(&base) < pooled(&tactile).min(pooled(&torque));
    let slowest = [&tactile, &torque, &both].iter().flat_map(|cs| cs.iter()).map(|c| c.train_seconds + c.eval_seconds).fold(0.0, f64::max);
    let time_ok = slowest <= 900.0;
    Ok((
        tactile_ok && torque_ok && both_ok && order_ok && time_ok,
        format!(
            "+tactile FragileGrasp {} vs base {}; +torque BlindInsert {} vs base {}; pooled base {} < tactile {} / torque {} < both {}; slowest cell {:.0}s",
            pct(fg(&tactile)),
            pct(fg(&base)),
            pct(bi(&torque)),
            pct(bi(&base)),
            pct(pooled(&base)),
            pct(pooled(&tactile)),
            pct(pooled(&torque)),
            pct(pooled(&both)),
            slowest
        ),
    ))
}

// C7
fn ablation_directions(desk: &Desk) -> Outcome {
    let fg = |c: &[CellResult]| mean_of(c, |x| x.rate(Task::FragileGrasp));
    let full = fg(&desk.full(StreamSet::Both)?);
    let mut diffs = Vec::new();
    for (control, lambda) in [(Control::Fused, desk.lambda), (Control::SingleStage, desk.lambda), (Control::NoPred, 0.0)] {
        diffs.push((control.name(), full - fg(&desk.cells(StreamSet::Both, control, lambda)?)));
    }
    let inversions: Vec<f64> = diffs.iter().map(|d| d.1).filter(|&d| d < 0.0).collect();
    let ok = inversions.is_empty() || (inversions.len() == 1 && inversions[0] >= -0.03);
    let detail = diffs.iter().map(|(n, d)| format!("full - {n} = {:+.1} pts", 100.0 * d)).collect::<Vec<_>>().join(", ");
    Ok((ok, format!("FragileGrasp, full model {}: {detail}", pct(full))))
}

// C8
fn lambda_sensitivity(desk: &Desk) -> Outcome {
    let fg = |c: &[CellResult]| mean_of(c, |x| x.rate(Task::FragileGrasp));
    let at_default = desk.full(StreamSet::Both)?;
    let at_one = desk.cells(StreamSet::Both, Control::None, 1.0)?;
    let ok = fg(&at_one) < fg(&at_default);
    Ok((ok, format!("FragileGrasp lambda=1.0 {} (seeds {}) vs lambda={} {} (seeds {})", pct(fg(&at_one)), rates(&at_one, Task::FragileGrasp), desk.lambda, pct(fg(&at_default)), rates(&at_default, Task::FragileGrasp))))
}

// C9
fn latency() -> Outcome {
    let full = ModelConfig::default();
    let variants: Vec<(String, Checkpoint)> = StreamSet::ALL
        .iter()
        .map(|set| {
            let modalities = full.modalities.iter().filter(|m| set.modality_names().contains(&m.name.as_str())).cloned().collect();
            let config = ModelConfig { modalities, ..full.clone() };
            let params = init_params(&config, 0)?;
            let stage = if *set == StreamSet::Base { Stage::Base } else { Stage::Stage2 };
            Ok((set.name().to_string(), Checkpoint { stage, control: Control::None, lambda_phy: 0.1, norm_stats: NormStats::identity(&config), config, params }))
        })
        .collect::<Result<_>>()?;
    let rows = measure_latency(&variants, 10, 20, 200)?;
    let r = |name: &str| rows.iter().find(|r| r.variant == name).map_or(f64::NAN, |r| r.ratio);
    let ok = r("both") <= 1.5 && r("tactile").max(r("torque")) <= r("both") && r("tactile").min(r("torque")) >= 1.0;
    let detail = rows.iter().map(|r| format!("{} {:.2} ms ({:.2}x)", r.variant, r.median_ms, r.ratio)).collect::<Vec<_>>().join(", ");
    Ok((ok, detail))
}

// C10
fn attention_salience(desk: &Desk) -> Outcome {
    let mut wins = 0;
    let mut detail = Vec::new();
    for s in desk.seeds() {
        let (ckpt, _) = desk.exp.model(StreamSet::Both, Control::None, desk.lambda, s)?;
        let trace = dump_attention(&ckpt, Task::FragileGrasp, desk.exp.cfg.eval.seed0 + s, desk.exp.cfg.training.k_sample, &desk.exp.cfg.env)?;
        match trace.contact_contrast("tactile") {
            Some((pre, contact)) => {
                wins += (contact > pre) as usize;
                detail.push(format!("seed {s}: contact {contact:+.2} vs pre {pre:+.2}"));
            }
            None => detail.push(format!("seed {s}: no contact")),
        }
    }
    Ok((wins >= 2, format!("{wins}/3 seeds; {}", detail.join(", "))))
}

// C11
fn prediction_utility(desk: &Desk) -> Outcome {
    let errors = |control: Control, lambda: f64| -> Result<Vec<PredictionError>> {
        let mut acc: Vec<PredictionError> = Vec::new();
        for s in desk.seeds() {
            let (ckpt, _) = desk.exp.model(StreamSet::Both, control, lambda, s)?;
            for task in Task::ALL {
                let dump = dump_predictions(&ckpt, task, desk.exp.cfg.eval.seed0 + s, desk.exp.cfg.training.k_sample, &desk.exp.cfg.env)?;
                for e in dump.errors {
                    match acc.iter_mut().find(|a| a.modality == e.modality) {
                        Some(a) => a.merge(&e),
                        None => acc.push(e),
                    }
                }
            }
        }
        Ok(acc)
    };
    let full = errors(Control::None, desk.lambda)?;
    let nopred = errors(Control::NoPred, 0.0)?;
    let beats = |e: &PredictionError| e.n_transition > 0 && e.rmse_model_transition() < e.rmse_persistence_transition();
    let ok = full.iter().all(beats) && !nopred.iter().any(beats);
    let describe = |es: &[PredictionError]| {
        es.iter()
            .map(|e| format!("{} {:.4} vs persistence {:.4}", e.modality, e.rmse_model_transition(), e.rmse_persistence_transition()))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Ok((ok, format!("stage-2: {}; lambda=0: {}", describe(&full), describe(&nopred))))
}

fn cache_dir() -> PathBuf {
    std::env::var_os("MOSS_ACCEPTANCE_CACHE").map(PathBuf::from).unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache"))
}

fn desk() -> Result<Desk> {
    let cfg = RunConfig::desk();
    let demos = DemoSet::generate(&cfg)?;
    let lambda = cfg.training.lambda_phy;
    let mut exp = Experiment::new(cfg, demos, Some(cache_dir()))?;
    exp.verbose = std::env::var_os("MOSS_ACCEPTANCE_VERBOSE").is_some();
    Ok(Desk { exp, lambda })
}

fn report(id: &str, name: &str, outcome: Outcome) -> bool {
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("{id} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() {
    let mut passed = 0;
    passed += report("C1", "gradient oracle", gradient_oracle()) as usize;
    passed += report("C2", "degenerate equivalence", degenerate_equivalence()) as usize;
    passed += report("C3", "freeze contract", freeze_contract()) as usize;
    passed += report("C4", "interpolant and sampler identities", sampler_identities()) as usize;
    match desk() {
        Ok(d) => {
            passed += report("C5", "vision insufficiency", vision_insufficiency(&d)) as usize;
            passed += report("C6", "modality efficacy", modality_efficacy(&d)) as usize;
            passed += report("C7", "ablation directions", ablation_directions(&d)) as usize;
            passed += report("C8", "lambda sensitivity", lambda_sensitivity(&d)) as usize;
            passed += report("C9", "latency", latency()) as usize;
            passed += report("C10", "attention salience", attention_salience(&d)) as usize;
            passed += report("C11", "prediction utility", prediction_utility(&d)) as usize;
        }
        Err(e) => {
            for id in ["C5", "C6", "C7", "C8", "C10", "C11"] {
                println!("{id} FAIL: desk setup failed: {e}");
            }
            passed += report("C9", "latency", latency()) as usize;
        }
    }
    println!("acceptance: {passed}/11 criteria pass");
}
