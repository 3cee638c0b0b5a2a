//! Fixtures shared by the benchmarks.

use modstream::harness::StreamSet;
use modstream::model::{init_params, ModelConfig, ObsBatch};
use modstream::rng::Rng;
use modstream::autodiff::Tensor;

/// Default-size model carrying the streams of `set`, freshly initialized.
pub fn model(set: StreamSet) -> (ModelConfig, modstream::autodiff::ParamStore) {
    let full = ModelConfig::default();
    let config = ModelConfig {
        modalities: full.modalities.iter().filter(|m| set.modality_names().contains(&m.name.as_str())).cloned().collect(),
        ..full
    };
    let params = init_params(&config, 0).expect("default config is valid");
    (config, params)
}

/// A random observation batch of size `b`.
pub fn observations(config: &ModelConfig, b: usize, seed: u64) -> ObsBatch {
    let mut rng = Rng::from_seed(seed);
    ObsBatch {
        visual: rng.normal_tensor(&[b, config.obs_feat_dim]),
        task: (0..b).map(|i| i % config.num_tasks).collect(),
        state: rng.normal_tensor(&[b, config.state_dim]),
        past: config.modalities.iter().map(|m| rng.normal_tensor(&[b, config.horizon, m.dim])).collect::<Vec<Tensor>>(),
    }
}
