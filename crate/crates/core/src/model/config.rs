use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of context tokens produced by the observation encoder.
pub const CONTEXT_TOKENS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Modality {
    pub name: String,
    pub dim: usize,
}

impl Modality {
    pub fn new(name: &str, dim: usize) -> Self {
        Self { name: name.to_string(), dim }
    }
}

/// How physical tokens are combined with the action expert.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One stream per modality, coupled through joint attention.
    #[default]
    Decoupled,
    /// Every token in a single sequence processed by shared blocks.
    Fused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub action_dim: usize,
    pub state_dim: usize,
    pub horizon: usize,
    pub modalities: Vec<Modality>,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub obs_feat_dim: usize,
    pub num_tasks: usize,
    /// Tokens per physical window; each covers `horizon / window_tokens`
    /// consecutive steps.
    pub window_tokens: usize,
    pub mlp_ratio: usize,
    pub layout: Layout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            action_dim: 3,
            state_dim: 5,
            horizon: 8,
            modalities: vec![Modality::new("tactile", 4), Modality::new("torque", 2)],
            width: 64,
            depth: 4,
            heads: 4,
            obs_feat_dim: 8,
            num_tasks: 2,
            window_tokens: 1,
            mlp_ratio: 4,
            layout: Layout::Decoupled,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(format!("model config: {msg}")));
        for (name, v) in [
            ("action_dim", self.action_dim),
            ("state_dim", self.state_dim),
            ("horizon", self.horizon),
            ("width", self.width),
            ("depth", self.depth),
            ("heads", self.heads),
            ("obs_feat_dim", self.obs_feat_dim),
            ("num_tasks", self.num_tasks),
            ("window_tokens", self.window_tokens),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if !self.width.is_multiple_of(2) {
            return bad(format!("width {} must be even", self.width));
        }
        if !self.horizon.is_multiple_of(self.window_tokens) {
            return bad(format!("horizon {} not divisible by window_tokens {}", self.horizon, self.window_tokens));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.dim == 0 {
                return bad(format!("modality `{}` has zero width", m.name));
            }
            if m.name.is_empty() || m.name.contains('.') {
                return bad(format!("bad modality name `{}`", m.name));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return bad(format!("duplicate modality `{}`", m.name));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Steps covered by one physical token.
    pub fn steps_per_token(&self) -> usize {
        self.horizon / self.window_tokens
    }

    pub fn action_tokens(&self) -> usize {
        CONTEXT_TOKENS + 1 + self.horizon
    }

    pub fn physical_tokens(&self) -> usize {
        2 * self.window_tokens
    }

    pub fn modality(&self, name: &str) -> Result<&Modality> {
        self.modalities
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::Invalid(format!("modality `{name}` not in model")))
    }

    /// Same network without any physical streams.
    pub fn without_modalities(&self) -> Self {
        Self { modalities: Vec::new(), ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.action_tokens(), 11);
        assert_eq!(c.head_dim(), 16);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig { heads: 5, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c.heads = 4;
        c.modalities.push(Modality::new("tactile", 3));
        assert!(c.validate().unwrap_err().to_string().contains("duplicate"));
        c.modalities.pop();
        c.modalities[0].dim = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"width": 32, "colour": 1}"#).unwrap_err();
        assert!(err.to_string().contains("colour"));
        let c: ModelConfig = serde_json::from_str(r#"{"width": 32}"#).unwrap();
        assert_eq!(c.width, 32);
        assert_eq!(c.depth, 4);
    }
}
