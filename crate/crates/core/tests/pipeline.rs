use modstream::harness::{dump_attention, evaluate, CellResult, ExpertWrapper, LearnedPolicy, RandomPolicy, RunConfig, StreamSet, SuccessReport};
use modstream::model::ModelConfig;
use modstream::sim::{generate_demos, EnvConfig, EpisodeRecord, Task};
use modstream::trainer::{discard_log, train_base, train_moss, train_stage1, Control, LogLine, TrainingConfig};

fn demos() -> Vec<EpisodeRecord> {
    let env = EnvConfig::default();
    let mut eps = generate_demos(Task::FragileGrasp, 6, 0, &env).unwrap().0;
    eps.extend(generate_demos(Task::BlindInsert, 6, 0, &env).unwrap().0);
    eps
}

fn small() -> (TrainingConfig, ModelConfig) {
    let t = TrainingConfig { iters_base: 40, iters_stage1: 300, iters_stage2: 20, warmup: 10, peak_lr: 3e-3, batch_size: 16, ..TrainingConfig::default() };
    let m = ModelConfig { width: 16, depth: 1, heads: 2, ..ModelConfig::default() };
    (t, m)
}

fn phy(line: &LogLine) -> f64 {
    line.loss.l_phy_per_modality.iter().map(|(_, v)| v).sum()
}

#[test]
fn stage1_prediction_loss_halves() {
    let eps = generate_demos(Task::FragileGrasp, 12, 0, &EnvConfig::default()).unwrap().0;
    let (mut t, m) = small();
    t.iters_stage1 = 800;
    let (base, _) = train_base(&t, &m, &eps, &mut discard_log).unwrap();
    let mut lines = Vec::new();
    let mut sink = |l: &LogLine| {
        lines.push(l.clone());
        Ok(())
    };
    train_stage1(&t, &base, &ModelConfig::default().modalities, Control::None, &eps, &mut sink).unwrap();
    assert_eq!(lines.len(), t.iters_stage1);
    let window = 20;
    let head: f64 = lines[..window].iter().map(phy).sum::<f64>() / window as f64;
    let tail: f64 = lines[lines.len() - window..].iter().map(phy).sum::<f64>() / window as f64;
    assert!(tail <= 0.5 * head, "L_phy {head:.4} -> {tail:.4}");
    assert!(lines.iter().all(|l| l.phase == "stage1" && l.loss.l_act.is_finite()));
}

#[test]
fn expert_succeeds_and_random_fails() {
    let env = EnvConfig::default();
    for task in Task::ALL {
        let expert = evaluate(&ExpertWrapper, "expert", task, 40, 500, &env, 1, 1).unwrap();
        assert_eq!(expert.success_rate, 1.0, "{task:?}");
        let random = evaluate(&RandomPolicy { chunk: 8 }, "random", task, 40, 500, &env, 4, 1).unwrap();
        assert!(random.success_rate <= 0.1, "{task:?} random {}", random.success_rate);
    }
}

#[test]
fn worker_count_does_not_change_reports() {
    let eps = demos();
    let (t, m) = small();
    let (base, _) = train_base(&t, &m, &eps, &mut discard_log).unwrap();
    let policy = LearnedPolicy::new(base, 2);
    let env = EnvConfig::default();
    let one = evaluate(&policy, "base", Task::BlindInsert, 9, 77, &env, 4, 1).unwrap();
    let three = evaluate(&policy, "base", Task::BlindInsert, 9, 77, &env, 4, 3).unwrap();
    assert_eq!(one, three);
    assert_eq!(one.seed_range, (77, 85));
}

#[test]
fn success_report_schema() {
    let env = EnvConfig::default();
    let r = evaluate(&ExpertWrapper, "expert", Task::FragileGrasp, 6, 0, &env, 1, 2).unwrap();
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["task", "checkpoint", "n_episodes", "successes", "success_rate", "per_latent", "seed_range"] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert_eq!(json["task"], "fragile_grasp");
    assert_eq!(r.per_latent.iter().map(|c| c.n).sum::<usize>(), 6);
    let back: SuccessReport = serde_json::from_value(json).unwrap();
    assert_eq!(back, r);

    let cell = CellResult { streams: StreamSet::Both, control: Control::None, lambda_phy: 0.1, seed: 0, reports: vec![r], train_seconds: 1.0, eval_seconds: 0.5 };
    assert_eq!(cell.rate(Task::FragileGrasp), 1.0);
}

#[test]
fn attention_trace_stays_in_unit_interval() {
    let eps = demos();
    let (mut t, m) = small();
    t.iters_stage1 = 10;
    let mods = ModelConfig::default().modalities;
    let (base, _) = train_base(&t, &m, &eps, &mut discard_log).unwrap();
    let (_, ckpt) = train_moss(&t, &base, &mods, Control::None, &eps, &mut discard_log).unwrap();
    let trace = dump_attention(&ckpt, Task::FragileGrasp, 3, 2, &EnvConfig::default()).unwrap();
    let rows = trace.rows();
    assert_eq!(rows.len(), trace.raw[0][0].len() * m.depth * mods.len());
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.raw) && r.z.is_finite()));
}

#[test]
fn shipped_desk_config_is_the_preset() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let loaded = RunConfig::load(&path).unwrap();
    assert_eq!(loaded.hash().unwrap(), RunConfig::desk().hash().unwrap());
}
