//! Flow interpolant and Euler integration of the learned velocity field.

use super::config::ModelConfig;
use super::net::{encode_observation, forward, ForwardOptions, ModelInput, PhysicalInput};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `τ·x + (1 − τ)·ε`; the endpoints return `x` or `ε` exactly.
pub fn noisy_interpolant(x: &Tensor, eps: &Tensor, tau: f64) -> Result<Tensor> {
    if x.shape() != eps.shape() {
        return Err(Error::Shape(format!("interpolant: {:?} vs {:?}", x.shape(), eps.shape())));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Invalid(format!("tau {tau} outside [0, 1]")));
    }
    if tau == 1.0 {
        return Ok(x.clone());
    }
    if tau == 0.0 {
        return Ok(eps.clone());
    }
    Ok(Tensor::from_fn(x.shape(), |i| tau * x.data()[i] + (1.0 - tau) * eps.data()[i]))
}

/// Batched interpolant with one τ per leading index.
pub fn noisy_interpolant_batch(x: &Tensor, eps: &Tensor, tau: &[f64]) -> Result<Tensor> {
    if x.shape() != eps.shape() || x.shape()[0] != tau.len() {
        return Err(Error::Shape(format!("interpolant: {:?} vs {:?} with {} taus", x.shape(), eps.shape(), tau.len())));
    }
    let per = x.numel() / tau.len();
    let mut out = Vec::with_capacity(x.numel());
    for (b, &t) in tau.iter().enumerate() {
        let r = b * per..(b + 1) * per;
        let xb = Tensor::new(vec![per], x.data()[r.clone()].to_vec())?;
        let eb = Tensor::new(vec![per], eps.data()[r].to_vec())?;
        out.extend(noisy_interpolant(&xb, &eb, t)?.into_data());
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Something that predicts velocities for the joint (actions, futures) state.
pub trait VelocityField {
    fn velocity(&mut self, actions: &Tensor, futures: &[Tensor], tau: f64) -> Result<(Tensor, Vec<Tensor>)>;
}

fn axpy(x: &mut Tensor, a: f64, y: &Tensor) {
    for (xi, yi) in x.data_mut().iter_mut().zip(y.data()) {
        *xi += a * yi;
    }
}

/// Integrates from τ = 0 to 1 in `k` Euler steps at τ_j = j/k.
pub fn euler_integrate(field: &mut dyn VelocityField, mut actions: Tensor, mut futures: Vec<Tensor>, k: usize) -> Result<(Tensor, Vec<Tensor>)> {
    if k == 0 {
        return Err(Error::Invalid("need at least one integration step".into()));
    }
    let dt = 1.0 / k as f64;
    for j in 0..k {
        let (va, vf) = field.velocity(&actions, &futures, j as f64 / k as f64)?;
        if va.shape() != actions.shape() || vf.len() != futures.len() {
            return Err(Error::Shape("velocity field returned mismatched shapes".into()));
        }
        axpy(&mut actions, dt, &va);
        for (f, v) in futures.iter_mut().zip(&vf) {
            axpy(f, dt, v);
        }
    }
    Ok((actions, futures))
}

/// Normalized observation context for a batch of sampling calls.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsBatch {
    pub visual: Tensor,
    pub task: Vec<usize>,
    pub state: Tensor,
    /// Past windows `[B, H, d]` per configured modality.
    pub past: Vec<Tensor>,
}

/// The network as a velocity field over a fixed observation. Parameters and
/// context tokens are placed on the tape once and reused for every step.
pub struct NetworkField<'a> {
    config: &'a ModelConfig,
    obs: &'a ObsBatch,
    graph: Graph<'a>,
    bound: crate::autodiff::Bound,
    h: Var,
    mark: usize,
    opts: ForwardOptions,
    /// Sum over calls of the recorded attention, `[layer][stream][b]`.
    pub attention_sum: Vec<Vec<Vec<f64>>>,
    pub calls: usize,
}

impl<'a> NetworkField<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a ParamStore, obs: &'a ObsBatch, opts: ForwardOptions) -> Result<Self> {
        let mut graph = Graph::new();
        let bound = params.bind_ref(&mut graph);
        let h = encode_observation(&mut graph, &bound, config, &obs.visual, &obs.task)?;
        let mark = graph.len();
        Ok(Self { config, obs, graph, bound, h, mark, opts, attention_sum: Vec::new(), calls: 0 })
    }

    /// Attention averaged over all calls so far.
    pub fn mean_attention(&self) -> Vec<Vec<Vec<f64>>> {
        let n = self.calls.max(1) as f64;
        self.attention_sum
            .iter()
            .map(|l| l.iter().map(|s| s.iter().map(|v| v / n).collect()).collect())
            .collect()
    }
}

impl VelocityField for NetworkField<'_> {
    fn velocity(&mut self, actions: &Tensor, futures: &[Tensor], tau: f64) -> Result<(Tensor, Vec<Tensor>)> {
        self.graph.truncate(self.mark);
        let b = self.obs.task.len();
        let input = ModelInput {
            visual: self.obs.visual.clone(),
            task: self.obs.task.clone(),
            state: self.obs.state.clone(),
            actions: actions.clone(),
            tau: vec![tau; b],
            physical: self
                .obs
                .past
                .iter()
                .zip(futures)
                .map(|(past, future)| PhysicalInput { past: past.clone(), future: future.clone() })
                .collect(),
        };
        let out = forward(&mut self.graph, &self.bound, self.config, self.h, &input, self.opts)?;
        if self.opts.record_attention {
            if self.attention_sum.is_empty() {
                self.attention_sum = out.attention.clone();
            } else {
                for (acc, l) in self.attention_sum.iter_mut().zip(&out.attention) {
                    for (a, s) in acc.iter_mut().zip(l) {
                        a.iter_mut().zip(s).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        self.calls += 1;
        let va = self.graph.value(out.action).clone();
        let vf = out.physical.iter().map(|&v| self.graph.value(v).clone()).collect();
        Ok((va, vf))
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Normalized action chunk `[B, H, action_dim]`.
    pub actions: Tensor,
    /// Normalized predicted future chunks per modality.
    pub futures: Vec<Tensor>,
    /// Attention averaged over integration steps, if requested.
    pub attention: Vec<Vec<Vec<f64>>>,
}

/// Starts actions and future chunks from N(0, I) and integrates the learned
/// field in `k` Euler steps.
pub fn sample_action_chunk(
    config: &ModelConfig,
    params: &ParamStore,
    obs: &ObsBatch,
    k: usize,
    rng: &mut Rng,
    opts: ForwardOptions,
) -> Result<SampleOutput> {
    let b = obs.task.len();
    let actions = rng.normal_tensor(&[b, config.horizon, config.action_dim]);
    let futures = config.modalities.iter().map(|m| rng.normal_tensor(&[b, config.horizon, m.dim])).collect();
    sample_from(config, params, obs, actions, futures, k, opts)
}

/// Integrates from the given starting noise.
pub fn sample_from(
    config: &ModelConfig,
    params: &ParamStore,
    obs: &ObsBatch,
    actions: Tensor,
    futures: Vec<Tensor>,
    k: usize,
    opts: ForwardOptions,
) -> Result<SampleOutput> {
    let mut field = NetworkField::new(config, params, obs, opts)?;
    let (actions, futures) = euler_integrate(&mut field, actions, futures, k)?;
    Ok(SampleOutput { actions, futures, attention: field.mean_attention() })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(Tensor);

    impl VelocityField for Constant {
        fn velocity(&mut self, _: &Tensor, futures: &[Tensor], _: f64) -> Result<(Tensor, Vec<Tensor>)> {
            Ok((self.0.clone(), futures.iter().map(|f| Tensor::zeros(f.shape())).collect()))
        }
    }

    #[test]
    fn interpolant_endpoints_are_exact() {
        let mut rng = Rng::from_seed(1);
        let x = rng.normal_tensor(&[8, 3]);
        let e = rng.normal_tensor(&[8, 3]);
        assert_eq!(noisy_interpolant(&x, &e, 1.0).unwrap(), x);
        assert_eq!(noisy_interpolant(&x, &e, 0.0).unwrap(), e);
        let half = noisy_interpolant(&Tensor::scalar(2.0), &Tensor::scalar(0.0), 0.5).unwrap();
        assert_eq!(half.data(), &[1.0]);
        assert!(noisy_interpolant(&x, &e, 1.5).is_err());
        assert!(noisy_interpolant(&x, &Tensor::zeros(&[3, 8]), 0.5).is_err());
    }

    #[test]
    fn batched_interpolant_uses_one_tau_per_sample() {
        let x = Tensor::from_fn(&[2, 2], |i| i as f64 + 1.0);
        let e = Tensor::zeros(&[2, 2]);
        let y = noisy_interpolant_batch(&x, &e, &[1.0, 0.5]).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.5, 2.0]);
    }

    /// Euler integration is exact on a constant field.
    #[test]
    fn constant_field_integrates_exactly() {
        let mut rng = Rng::from_seed(2);
        let v = rng.normal_tensor(&[8, 3]);
        for k in [1, 5, 10] {
            let eps = rng.normal_tensor(&[8, 3]);
            let (a, _) = euler_integrate(&mut Constant(v.clone()), eps.clone(), vec![], k).unwrap();
            let expected = Tensor::from_fn(&[8, 3], |i| eps.data()[i] + v.data()[i]);
            assert!(a.max_abs_diff(&expected) < 1e-12, "k={k}");
        }
        assert!(euler_integrate(&mut Constant(v.clone()), v.clone(), vec![], 0).is_err());
    }
}
