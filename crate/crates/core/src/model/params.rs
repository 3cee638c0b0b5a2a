//! Parameter naming, initialization and trainability groups.

use std::collections::BTreeMap;

use super::config::{Modality, ModelConfig};
use crate::autodiff::{init_linear_weight, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const ENCODER_GROUP: &str = "encoder";
pub const ACTION_GROUP: &str = "action";
pub const ACTION_PREFIX: &str = "act";

pub fn physical_group(modality: &str) -> String {
    format!("physical:{modality}")
}

pub fn physical_prefix(modality: &str) -> String {
    format!("phy.{modality}")
}

/// Every parameter draws from its own stream keyed by name, so adding or
/// removing a stream never changes the initial values of the others.
struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    group: String,
}

impl Init<'_> {
    fn rng(&self, name: &str) -> Rng {
        Rng::derive(self.seed, name, 0)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = init_linear_weight(&mut self.rng(&format!("{name}.w")), fan_in, fan_out);
        self.store.insert(format!("{name}.w"), &self.group, w)?;
        self.store.insert(format!("{name}.b"), &self.group, Tensor::zeros(&[fan_out]))
    }

    fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.store.insert(format!("{name}.w"), &self.group, Tensor::zeros(&[fan_in, fan_out]))?;
        self.store.insert(format!("{name}.b"), &self.group, Tensor::zeros(&[fan_out]))
    }

    fn normal(&mut self, name: &str, shape: &[usize], sd: f64) -> Result<()> {
        let mut rng = self.rng(name);
        let t = Tensor::from_fn(shape, |_| sd * rng.normal());
        self.store.insert(name, &self.group, t)
    }

    /// Blocks, time MLP and final modulation shared in shape by all streams.
    fn trunk(&mut self, prefix: &str, config: &ModelConfig, tokens: usize) -> Result<()> {
        let w = config.width;
        self.normal(&format!("{prefix}.pos"), &[tokens, w], 0.02)?;
        self.linear(&format!("{prefix}.time.fc1"), w, w)?;
        self.linear(&format!("{prefix}.time.fc2"), w, w)?;
        for l in 0..config.depth {
            let b = format!("{prefix}.blocks.{l}");
            self.zero_linear(&format!("{b}.mod"), w, 4 * w)?;
            for p in ["q", "k", "v", "o"] {
                self.linear(&format!("{b}.attn.{p}"), w, w)?;
            }
            self.linear(&format!("{b}.mlp.fc1"), w, config.mlp_ratio * w)?;
            self.linear(&format!("{b}.mlp.fc2"), config.mlp_ratio * w, w)?;
        }
        self.zero_linear(&format!("{prefix}.final.mod"), w, 2 * w)
    }
}

/// Encoder and action expert, with no physical streams.
pub fn init_base(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    let w = config.width;
    let mut init = Init { store: &mut store, seed, group: ENCODER_GROUP.into() };
    init.linear("enc.fc1", config.obs_feat_dim, w)?;
    init.linear("enc.fc2", w, w)?;
    init.normal("enc.task", &[config.num_tasks, w], 1.0)?;

    init.group = ACTION_GROUP.into();
    init.linear("act.state_embed", config.state_dim, w)?;
    init.linear("act.action_embed", config.action_dim, w)?;
    init.trunk(ACTION_PREFIX, config, config.action_tokens())?;
    init.linear("act.head", w, config.action_dim)?;
    Ok(store)
}

/// Adds a freshly initialized stream mirroring the action expert.
pub fn init_physical_stream(store: &mut ParamStore, config: &ModelConfig, modality: &Modality, seed: u64) -> Result<()> {
    let prefix = physical_prefix(&modality.name);
    let w = config.width;
    let chunk = config.steps_per_token() * modality.dim;
    let mut init = Init { store, seed, group: physical_group(&modality.name) };
    init.linear(&format!("{prefix}.past_embed"), chunk, w)?;
    init.linear(&format!("{prefix}.future_embed"), chunk, w)?;
    init.trunk(&prefix, config, config.physical_tokens())?;
    init.linear(&format!("{prefix}.head"), w, chunk)
}

/// Complete parameter set for `config`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut store = init_base(config, seed)?;
    for m in &config.modalities {
        init_physical_stream(&mut store, config, m, seed)?;
    }
    Ok(store)
}

/// Trainable flag per parameter group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainabilityMask {
    pub groups: BTreeMap<String, bool>,
}

impl TrainabilityMask {
    pub fn all(config: &ModelConfig, trainable: bool) -> Self {
        let mut groups = BTreeMap::new();
        groups.insert(ENCODER_GROUP.to_string(), trainable);
        groups.insert(ACTION_GROUP.to_string(), trainable);
        for m in &config.modalities {
            groups.insert(physical_group(&m.name), trainable);
        }
        Self { groups }
    }

    /// Only the physical streams learn.
    pub fn stage1(config: &ModelConfig) -> Self {
        let mut mask = Self::all(config, true);
        mask.groups.insert(ENCODER_GROUP.into(), false);
        mask.groups.insert(ACTION_GROUP.into(), false);
        mask
    }

    pub fn stage2(config: &ModelConfig, freeze_encoder: bool) -> Self {
        let mut mask = Self::all(config, true);
        if freeze_encoder {
            mask.groups.insert(ENCODER_GROUP.into(), false);
        }
        mask
    }
}

/// Applies `mask` to every parameter. The mask must name exactly the groups
/// present in `params`.
pub fn set_trainable(params: &mut ParamStore, mask: &TrainabilityMask) -> Result<()> {
    let present = params.groups();
    if let Some(g) = mask.groups.keys().find(|g| !present.contains(g)) {
        return Err(Error::UnknownGroup(g.clone()));
    }
    if let Some(g) = present.iter().find(|g| !mask.groups.contains_key(*g)) {
        return Err(Error::Invalid(format!("mask does not cover group `{g}`")));
    }
    for p in params.iter_mut() {
        p.requires_grad = mask.groups[&p.group];
        if !p.requires_grad {
            p.grad = None;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every block of every stream has the shapes of the action expert's block.
    #[test]
    fn streams_mirror_the_action_expert() {
        let config = ModelConfig::default();
        let store = init_params(&config, 0).unwrap();
        let mut checked = 0;
        for p in store.iter().filter(|p| p.name.starts_with("act.blocks.") || p.name.starts_with("act.time.") || p.name.starts_with("act.final.")) {
            let suffix = &p.name["act".len()..];
            for m in &config.modalities {
                let other = store.get(&format!("{}{suffix}", physical_prefix(&m.name))).unwrap();
                assert_eq!(other.value.shape(), p.value.shape(), "{}", p.name);
                checked += 1;
            }
        }
        assert_eq!(checked, 2 * (config.depth * 14 + 6));
    }

    #[test]
    fn every_parameter_has_one_group() {
        let config = ModelConfig::default();
        let store = init_params(&config, 0).unwrap();
        assert_eq!(store.groups(), vec!["encoder", "action", "physical:tactile", "physical:torque"]);
        for p in store.iter() {
            let expected = if p.name.starts_with("enc.") {
                ENCODER_GROUP.to_string()
            } else if p.name.starts_with("act.") {
                ACTION_GROUP.to_string()
            } else {
                physical_group(p.name.split('.').nth(1).unwrap())
            };
            assert_eq!(p.group, expected, "{}", p.name);
        }
    }

    #[test]
    fn init_is_independent_of_stream_set() {
        let full = init_params(&ModelConfig::default(), 4).unwrap();
        let base = init_base(&ModelConfig::default(), 4).unwrap();
        for p in base.iter() {
            assert_eq!(p.value, full.get(&p.name).unwrap().value);
        }
    }

    #[test]
    fn masks() {
        let config = ModelConfig::default();
        let mut store = init_params(&config, 0).unwrap();
        set_trainable(&mut store, &TrainabilityMask::stage1(&config)).unwrap();
        for p in store.iter() {
            assert_eq!(p.requires_grad, p.group.starts_with("physical:"), "{}", p.name);
        }
        set_trainable(&mut store, &TrainabilityMask::stage2(&config, false)).unwrap();
        assert!(store.iter().all(|p| p.requires_grad));

        let mut bad = TrainabilityMask::stage1(&config);
        bad.groups.insert("physical:sound".into(), true);
        assert!(matches!(set_trainable(&mut store, &bad), Err(Error::UnknownGroup(g)) if g == "physical:sound"));
        let mut partial = TrainabilityMask::stage1(&config);
        partial.groups.remove("encoder");
        assert!(set_trainable(&mut store, &partial).is_err());
    }
}
