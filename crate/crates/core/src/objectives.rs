//! Flow-matching losses for the action chunk and the future physical chunks,
//! and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{encode_observation, forward, noisy_interpolant_batch, ForwardOptions, ModelConfig, ModelInput, PhysicalInput};
use crate::rng::Rng;

fn squared_error_mean(x: &Tensor, eps: &Tensor, pred: &Tensor, what: &str) -> Result<f64> {
    if x.shape() != eps.shape() || x.shape() != pred.shape() {
        return Err(Error::Shape(format!(
            "{what}: target {:?}, noise {:?}, prediction {:?}",
            x.shape(),
            eps.shape(),
            pred.shape()
        )));
    }
    let n = x.numel() as f64;
    let s: f64 = x
        .data()
        .iter()
        .zip(eps.data())
        .zip(pred.data())
        .map(|((x, e), p)| {
            let d = (x - e) - p;
            d * d
        })
        .sum();
    Ok(s / n)
}

/// Mean of `((A − ε) − Â)²` over all elements.
pub fn action_fm_loss(actions: &Tensor, eps: &Tensor, pred: &Tensor) -> Result<f64> {
    squared_error_mean(actions, eps, pred, "action loss")
}

/// Future chunk, noise and predicted velocity of one modality.
#[derive(Clone, Debug)]
pub struct PhysicalTerm<'a> {
    pub name: &'a str,
    pub future: &'a Tensor,
    pub eps: &'a Tensor,
    pub pred: Option<&'a Tensor>,
}

/// Per-modality mean of `((m − ε_i) − m̂)²`, in input order.
pub fn physical_fm_loss(terms: &[PhysicalTerm]) -> Result<Vec<(String, f64)>> {
    terms
        .iter()
        .map(|t| {
            let pred = t.pred.ok_or_else(|| Error::Invalid(format!("no prediction for modality `{}`", t.name)))?;
            Ok((t.name.to_string(), squared_error_mean(t.future, t.eps, pred, t.name)?))
        })
        .collect()
}

pub fn total_loss(l_act: f64, l_phy_sum: f64, lambda_phy: f64) -> f64 {
    l_act + lambda_phy * l_phy_sum
}

/// Sum in modality order.
pub fn phy_sum(per_modality: &[(String, f64)]) -> f64 {
    per_modality.iter().fold(0.0, |s, (_, l)| s + l)
}

/// What a training phase optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `L_act` alone.
    Action,
    /// `λ·Σ L_phy`; the action expert only serves as context.
    Physical,
    /// `L_act + λ·Σ L_phy`.
    Full,
}

/// Losses of one batch. `l_total` always follows the full combination,
/// whatever `objective` was optimized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub objective: Objective,
    pub l_act: f64,
    #[serde(with = "ordered_map")]
    pub l_phy_per_modality: Vec<(String, f64)>,
    pub l_total: f64,
    pub lambda_phy: f64,
    /// Value of the loss that was differentiated.
    pub optimized: f64,
}

impl LossBreakdown {
    pub fn new(objective: Objective, l_act: f64, l_phy_per_modality: Vec<(String, f64)>, lambda_phy: f64) -> Self {
        let s = phy_sum(&l_phy_per_modality);
        let optimized = match objective {
            Objective::Action => l_act,
            Objective::Physical => lambda_phy * s,
            Objective::Full => total_loss(l_act, s, lambda_phy),
        };
        Self { objective, l_act, l_total: total_loss(l_act, s, lambda_phy), l_phy_per_modality, lambda_phy, optimized }
    }

    pub fn l_phy_sum(&self) -> f64 {
        phy_sum(&self.l_phy_per_modality)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("loss breakdown serializes")
    }
}

/// Serializes `[(name, value)]` as a JSON object while keeping the order.
mod ordered_map {
    use std::fmt;

    use serde::de::{MapAccess, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[(String, f64)], s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(v.iter().map(|(k, x)| (k, x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(String, f64)>, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Vec<(String, f64)>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of modality losses")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut m: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some(e) = m.next_entry()? {
                    out.push(e);
                }
                Ok(out)
            }
        }
        d.deserialize_map(V)
    }
}

/// Clean (normalized) training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanBatch {
    pub visual: Tensor,
    pub task: Vec<usize>,
    pub state: Tensor,
    /// `[B, H, action_dim]`
    pub actions: Tensor,
    /// Past windows per modality, `[B, H, d]`.
    pub past: Vec<Tensor>,
    /// Future targets per modality, `[B, H, d]`.
    pub future: Vec<Tensor>,
}

impl CleanBatch {
    pub fn batch(&self) -> usize {
        self.task.len()
    }
}

/// τ per sample and independent noise for the action chunk and each modality.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub tau: Vec<f64>,
    pub eps_action: Tensor,
    pub eps_physical: Vec<Tensor>,
}

impl NoiseDraw {
    pub fn sample(config: &ModelConfig, batch: usize, rng: &mut Rng) -> Self {
        let tau = (0..batch).map(|_| rng.uniform()).collect();
        let eps_action = rng.normal_tensor(&[batch, config.horizon, config.action_dim]);
        let eps_physical = config.modalities.iter().map(|m| rng.normal_tensor(&[batch, config.horizon, m.dim])).collect();
        Self { tau, eps_action, eps_physical }
    }
}

fn velocity_target(x: &Tensor, eps: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| x.data()[i] - eps.data()[i])
}

/// Places the losses of `batch` on the tape. Returns the scalar to
/// differentiate and the breakdown.
pub fn build_loss(
    g: &mut Graph,
    p: &Bound,
    config: &ModelConfig,
    batch: &CleanBatch,
    noise: &NoiseDraw,
    lambda_phy: f64,
    objective: Objective,
) -> Result<(Var, LossBreakdown)> {
    if lambda_phy < 0.0 || !lambda_phy.is_finite() {
        return Err(Error::Invalid(format!("lambda_phy {lambda_phy} must be finite and non-negative")));
    }
    if batch.past.len() != config.modalities.len() || batch.future.len() != config.modalities.len() {
        return Err(Error::Shape("batch modalities do not match the model".into()));
    }
    let input = ModelInput {
        visual: batch.visual.clone(),
        task: batch.task.clone(),
        state: batch.state.clone(),
        actions: noisy_interpolant_batch(&batch.actions, &noise.eps_action, &noise.tau)?,
        tau: noise.tau.clone(),
        physical: batch
            .past
            .iter()
            .zip(&batch.future)
            .zip(&noise.eps_physical)
            .map(|((past, fut), eps)| {
                Ok(PhysicalInput { past: past.clone(), future: noisy_interpolant_batch(fut, eps, &noise.tau)? })
            })
            .collect::<Result<_>>()?,
    };
    let h = encode_observation(g, p, config, &batch.visual, &batch.task)?;
    let out = forward(g, p, config, h, &input, ForwardOptions::default())?;

    let target = g.input(velocity_target(&batch.actions, &noise.eps_action));
    let l_act = g.mse(out.action, target)?;
    let mut phy = Vec::with_capacity(config.modalities.len());
    let mut sum: Option<Var> = None;
    for ((m, &pred), (fut, eps)) in config.modalities.iter().zip(&out.physical).zip(batch.future.iter().zip(&noise.eps_physical)) {
        let t = g.input(velocity_target(fut, eps));
        let l = g.mse(pred, t)?;
        phy.push((m.name.clone(), g.value(l).data()[0]));
        sum = Some(match sum {
            None => l,
            Some(s) => g.add(s, l)?,
        });
    }
    let breakdown = LossBreakdown::new(objective, g.value(l_act).data()[0], phy, lambda_phy);
    let loss = match (objective, sum) {
        (Objective::Action, _) => l_act,
        (Objective::Physical, Some(s)) => g.scale(s, lambda_phy),
        (Objective::Full, Some(s)) => {
            let s = g.scale(s, lambda_phy);
            g.add(l_act, s)?
        }
        (_, None) => return Err(Error::Invalid(format!("{objective:?} objective needs at least one physical stream"))),
    };
    debug_assert_eq!(g.value(loss).data()[0].to_bits(), breakdown.optimized.to_bits());
    Ok((loss, breakdown))
}
