//! Forward pass: observation encoder, action stream, physical streams and the
//! joint attention that couples them.

use super::config::{Layout, ModelConfig, CONTEXT_TOKENS};
use super::params::{physical_prefix, ACTION_PREFIX};
use crate::autodiff::{Bound, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Past window and noised future chunk of one modality, both `[B, H, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalInput {
    pub past: Tensor,
    pub future: Tensor,
}

/// A batch of network inputs, already normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `[B, obs_feat_dim]`
    pub visual: Tensor,
    pub task: Vec<usize>,
    /// `[B, state_dim]`
    pub state: Tensor,
    /// Noised action chunk `[B, H, action_dim]`.
    pub actions: Tensor,
    pub tau: Vec<f64>,
    /// One entry per configured modality, in configuration order.
    pub physical: Vec<PhysicalInput>,
}

impl ModelInput {
    pub fn batch(&self) -> usize {
        self.task.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Record the attention mass action tokens put on each physical stream.
    pub record_attention: bool,
    /// Action-stream queries see only action-stream keys.
    pub block_action_to_physical: bool,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Action velocity `[B, H, action_dim]`.
    pub action: Var,
    /// Future-chunk velocity per modality, `[B, H, d]`.
    pub physical: Vec<Var>,
    /// `attention[layer][stream][b]`: attention weight from the action tokens
    /// onto physical stream `stream`, summed over its keys and averaged over
    /// heads and action queries. Fused models report one entry per block.
    /// Empty unless requested.
    pub attention: Vec<Vec<Vec<f64>>>,
}

fn check_shape(what: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::Shape(format!("{what}: expected {expected:?}, got {:?}", t.shape())));
    }
    Ok(())
}

/// Checks every input against `config`.
pub fn validate_input(config: &ModelConfig, input: &ModelInput) -> Result<()> {
    let b = input.batch();
    let h = config.horizon;
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    check_shape("visual", &input.visual, &[b, config.obs_feat_dim])?;
    check_shape("state", &input.state, &[b, config.state_dim])?;
    check_shape("actions", &input.actions, &[b, h, config.action_dim])?;
    if input.tau.len() != b {
        return Err(Error::Shape(format!("tau: expected {b} values, got {}", input.tau.len())));
    }
    if let Some(t) = input.tau.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Invalid(format!("tau {t} outside [0, 1]")));
    }
    if input.physical.len() != config.modalities.len() {
        return Err(Error::Shape(format!(
            "expected {} physical inputs, got {}",
            config.modalities.len(),
            input.physical.len()
        )));
    }
    for (m, p) in config.modalities.iter().zip(&input.physical) {
        check_shape(&format!("{} past window", m.name), &p.past, &[b, h, m.dim])?;
        check_shape(&format!("{} future chunk", m.name), &p.future, &[b, h, m.dim])?;
    }
    if let Some(&t) = input.task.iter().find(|&&t| t >= config.num_tasks) {
        return Err(Error::Invalid(format!("task id {t} >= {}", config.num_tasks)));
    }
    Ok(())
}

/// Context tokens `[B, 2, width]`: encoded visual features, then a task
/// embedding.
pub fn encode_observation(g: &mut Graph, p: &Bound, config: &ModelConfig, visual: &Tensor, task: &[usize]) -> Result<Var> {
    let b = task.len();
    check_shape("visual", visual, &[b, config.obs_feat_dim])?;
    if let Some(&t) = task.iter().find(|&&t| t >= config.num_tasks) {
        return Err(Error::Invalid(format!("task id {t} >= {}", config.num_tasks)));
    }
    let w = config.width;
    let x = g.input(visual.clone());
    let x = g.linear(x, p.get("enc.fc1.w")?, Some(p.get("enc.fc1.b")?))?;
    let x = g.silu(x);
    let x = g.linear(x, p.get("enc.fc2.w")?, Some(p.get("enc.fc2.b")?))?;
    let feat = g.reshape(x, &[b, 1, w])?;
    let onehot = Tensor::from_fn(&[b, config.num_tasks], |i| (task[i / config.num_tasks] == i % config.num_tasks) as u8 as f64);
    let onehot = g.input(onehot);
    let emb = g.linear(onehot, p.get("enc.task")?, None)?;
    let emb = g.reshape(emb, &[b, 1, w])?;
    g.concat(&[feat, emb], 1)
}

/// Sinusoidal embedding of τ, `[B, width]`: sines then cosines over
/// geometrically spaced frequencies.
pub fn time_embedding(tau: &[f64], width: usize) -> Tensor {
    let half = width / 2;
    Tensor::from_fn(&[tau.len(), width], |i| {
        let (b, j) = (i / width, i % width);
        let k = j % half;
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = 1000.0 * tau[b] * freq;
        if j < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

fn lin(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    g.linear(x, p.get(&format!("{name}.w"))?, Some(p.get(&format!("{name}.b"))?))
}

/// `silu(c)` for a stream, where `c` is the stream's time MLP output.
fn time_conditioning(g: &mut Graph, p: &Bound, prefix: &str, temb: Var) -> Result<Var> {
    let c = lin(g, p, &format!("{prefix}.time.fc1"), temb)?;
    let c = g.silu(c);
    let c = lin(g, p, &format!("{prefix}.time.fc2"), c)?;
    Ok(g.silu(c))
}

/// `n` modulation vectors `[B, width]` from a stream's conditioning.
fn modulation(g: &mut Graph, p: &Bound, name: &str, cond: Var, n: usize) -> Result<Vec<Var>> {
    let w = g.shape(cond)[1];
    let m = lin(g, p, name, cond)?;
    g.split_last(m, &vec![w; n])
}

fn mlp(g: &mut Graph, p: &Bound, block: &str, x: Var) -> Result<Var> {
    let y = lin(g, p, &format!("{block}.mlp.fc1"), x)?;
    let y = g.silu(y);
    lin(g, p, &format!("{block}.mlp.fc2"), y)
}

/// Tokens of one stream while passing through the blocks.
#[derive(Clone, Debug)]
pub struct StreamTokens {
    pub prefix: String,
    /// `[B, T, width]`
    pub x: Var,
    /// Conditioning `[B, width]` for this stream's modulations.
    pub cond: Var,
}

/// One layer of joint attention. Every stream projects its own tokens to
/// queries, keys and values; keys and values of all streams are concatenated
/// and every stream's queries attend over the joint set. Projections, MLPs and
/// modulations stay private to each stream. `streams[0]` is the action
/// stream. Returns the attention mass recorded for the action stream, one
/// entry per physical stream, if `opts.record_attention` is set.
pub fn joint_attention_layer(
    g: &mut Graph,
    p: &Bound,
    config: &ModelConfig,
    streams: &mut [StreamTokens],
    layer: usize,
    opts: ForwardOptions,
) -> Result<Vec<Vec<f64>>> {
    let w = config.width;
    for s in streams.iter() {
        let shape = g.shape(s.x);
        if shape.len() != 3 || shape[2] != w {
            return Err(Error::Shape(format!("joint attention: stream `{}` has shape {shape:?}, width {w}", s.prefix)));
        }
    }
    let n = streams.len();
    let mut mods = Vec::with_capacity(n);
    let mut qkv = Vec::with_capacity(n);
    for s in streams.iter() {
        let block = format!("{}.blocks.{layer}", s.prefix);
        let m = modulation(g, p, &format!("{block}.mod"), s.cond, 4)?;
        let xm = g.modulated_layer_norm(s.x, m[0], m[1])?;
        let q = lin(g, p, &format!("{block}.attn.q"), xm)?;
        let k = lin(g, p, &format!("{block}.attn.k"), xm)?;
        let v = lin(g, p, &format!("{block}.attn.v"), xm)?;
        mods.push(m);
        qkv.push((q, k, v));
    }
    let lens: Vec<usize> = streams.iter().map(|s| g.shape(s.x)[1]).collect();
    let batch = g.shape(streams[0].x)[0];
    let ks: Vec<Var> = qkv.iter().map(|t| t.1).collect();
    let vs: Vec<Var> = qkv.iter().map(|t| t.2).collect();
    let (k_all, v_all) = if n == 1 { (ks[0], vs[0]) } else { (g.concat(&ks, 1)?, g.concat(&vs, 1)?) };
    let mut recorded = vec![vec![0.0; batch]; n.saturating_sub(1)];
    let mut attended = Vec::with_capacity(n);
    for (s, &(q, k, v)) in qkv.iter().enumerate() {
        let a = if s == 0 && opts.block_action_to_physical {
            g.attention(q, k, v, config.heads)?
        } else {
            g.attention(q, k_all, v_all, config.heads)?
        };
        if s == 0 && opts.record_attention && !opts.block_action_to_physical {
            let probs = g.attention_probs(a).expect("attention node");
            accumulate_mass(probs, config, &lens, &mut recorded);
        }
        attended.push(a);
    }
    for (s, stream) in streams.iter_mut().enumerate() {
        let block = format!("{}.blocks.{layer}", stream.prefix);
        let a = lin(g, p, &format!("{block}.attn.o"), attended[s])?;
        let x = g.add(stream.x, a)?;
        let xm = g.modulated_layer_norm(x, mods[s][2], mods[s][3])?;
        let y = mlp(g, p, &block, xm)?;
        stream.x = g.add(x, y)?;
    }
    if opts.record_attention {
        let norm = (config.heads * config.horizon) as f64;
        for r in &mut recorded {
            r.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(recorded)
    } else {
        Ok(Vec::new())
    }
}

/// Adds, per batch element, the attention of the action-token queries on each
/// physical stream's key range. `probs` is `[B, heads, Tq, Tk]`.
fn accumulate_mass(probs: &[f64], config: &ModelConfig, lens: &[usize], out: &mut [Vec<f64>]) {
    let tq = lens[0];
    let tk: usize = lens.iter().sum();
    let first = CONTEXT_TOKENS + 1;
    for (bh, chunk) in probs.chunks(tq * tk).enumerate() {
        let b = bh / config.heads;
        for row in first..first + config.horizon {
            let r = &chunk[row * tk..(row + 1) * tk];
            let mut offset = lens[0];
            for (i, &len) in lens[1..].iter().enumerate() {
                out[i][b] += r[offset..offset + len].iter().sum::<f64>();
                offset += len;
            }
        }
    }
}

/// A standard single-sequence self-attention block using the parameters of
/// `prefix`'s block `layer`.
pub fn self_attention_block(g: &mut Graph, p: &Bound, config: &ModelConfig, prefix: &str, layer: usize, x: Var, cond: Var) -> Result<Var> {
    Ok(self_attention_block_with_probs(g, p, config, prefix, layer, x, cond)?.0)
}

/// Also returns the attention node, for reading its probabilities.
fn self_attention_block_with_probs(g: &mut Graph, p: &Bound, config: &ModelConfig, prefix: &str, layer: usize, x: Var, cond: Var) -> Result<(Var, Var)> {
    let block = format!("{prefix}.blocks.{layer}");
    let m = modulation(g, p, &format!("{block}.mod"), cond, 4)?;
    let xm = g.modulated_layer_norm(x, m[0], m[1])?;
    let q = lin(g, p, &format!("{block}.attn.q"), xm)?;
    let k = lin(g, p, &format!("{block}.attn.k"), xm)?;
    let v = lin(g, p, &format!("{block}.attn.v"), xm)?;
    let attn = g.attention(q, k, v, config.heads)?;
    let a = lin(g, p, &format!("{block}.attn.o"), attn)?;
    let x = g.add(x, a)?;
    let xm = g.modulated_layer_norm(x, m[2], m[3])?;
    let y = mlp(g, p, &block, xm)?;
    Ok((g.add(x, y)?, attn))
}

/// Embedded action-stream tokens `[B, 3 + H, width]` with positions added.
fn action_tokens(g: &mut Graph, p: &Bound, config: &ModelConfig, h: Var, input: &ModelInput) -> Result<Var> {
    let b = input.batch();
    let s = g.input(input.state.clone().reshape(&[b, 1, config.state_dim])?);
    let s = lin(g, p, "act.state_embed", s)?;
    let a = g.input(input.actions.clone());
    let a = lin(g, p, "act.action_embed", a)?;
    let x = g.concat(&[h, s, a], 1)?;
    g.add(x, p.get("act.pos")?)
}

/// Embedded tokens `[B, 2P, width]` of one physical stream: P past-window
/// tokens then P noised-future tokens.
fn physical_tokens(g: &mut Graph, p: &Bound, config: &ModelConfig, prefix: &str, dim: usize, input: &PhysicalInput) -> Result<Var> {
    let b = input.past.shape()[0];
    let shape = [b, config.window_tokens, config.steps_per_token() * dim];
    let past = g.input(input.past.clone().reshape(&shape)?);
    let past = lin(g, p, &format!("{prefix}.past_embed"), past)?;
    let fut = g.input(input.future.clone().reshape(&shape)?);
    let fut = lin(g, p, &format!("{prefix}.future_embed"), fut)?;
    let x = g.concat(&[past, fut], 1)?;
    g.add(x, p.get(&format!("{prefix}.pos"))?)
}

fn final_head(g: &mut Graph, p: &Bound, prefix: &str, x: Var, cond: Var) -> Result<Var> {
    let m = modulation(g, p, &format!("{prefix}.final.mod"), cond, 2)?;
    let y = g.modulated_layer_norm(x, m[0], m[1])?;
    lin(g, p, &format!("{prefix}.head"), y)
}

fn action_head(g: &mut Graph, p: &Bound, config: &ModelConfig, x: Var, cond: Var) -> Result<Var> {
    let a = g.slice(x, 1, CONTEXT_TOKENS + 1, config.horizon)?;
    final_head(g, p, ACTION_PREFIX, a, cond)
}

fn physical_head(g: &mut Graph, p: &Bound, config: &ModelConfig, prefix: &str, dim: usize, x: Var, cond: Var) -> Result<Var> {
    let b = g.shape(x)[0];
    let f = g.slice(x, 1, config.window_tokens, config.window_tokens)?;
    let y = final_head(g, p, prefix, f, cond)?;
    g.reshape(y, &[b, config.horizon, dim])
}

/// Velocity predictions for the noised action chunk and every noised future
/// physical chunk, given context tokens `h` from [`encode_observation`].
pub fn forward(g: &mut Graph, p: &Bound, config: &ModelConfig, h: Var, input: &ModelInput, opts: ForwardOptions) -> Result<ForwardOutput> {
    validate_input(config, input)?;
    let temb = g.input(time_embedding(&input.tau, config.width));
    let prefixes: Vec<String> = config.modalities.iter().map(|m| physical_prefix(&m.name)).collect();
    let act_cond = time_conditioning(g, p, ACTION_PREFIX, temb)?;
    let mut streams = vec![StreamTokens { prefix: ACTION_PREFIX.into(), x: action_tokens(g, p, config, h, input)?, cond: act_cond }];
    for ((m, prefix), phys) in config.modalities.iter().zip(&prefixes).zip(&input.physical) {
        let x = physical_tokens(g, p, config, prefix, m.dim, phys)?;
        let cond = time_conditioning(g, p, prefix, temb)?;
        streams.push(StreamTokens { prefix: prefix.clone(), x, cond });
    }
    match config.layout {
        Layout::Decoupled => {
            let mut attention = Vec::new();
            for l in 0..config.depth {
                let rec = joint_attention_layer(g, p, config, &mut streams, l, opts)?;
                if opts.record_attention {
                    attention.push(rec);
                }
            }
            let action = action_head(g, p, config, streams[0].x, streams[0].cond)?;
            let mut physical = Vec::with_capacity(config.modalities.len());
            for (m, s) in config.modalities.iter().zip(&streams[1..]) {
                physical.push(physical_head(g, p, config, &s.prefix, m.dim, s.x, s.cond)?);
            }
            Ok(ForwardOutput { action, physical, attention })
        }
        Layout::Fused => {
            let lens: Vec<usize> = streams.iter().map(|s| g.shape(s.x)[1]).collect();
            let xs: Vec<Var> = streams.iter().map(|s| s.x).collect();
            let mut x = g.concat(&xs, 1)?;
            let mut attention = Vec::new();
            let batch = input.batch();
            // Action tokens lead the fused sequence, so the mass is read off
            // the same rows and key ranges as in the decoupled layout.
            for s in &streams {
                for l in 0..config.depth {
                    let (y, attn) = self_attention_block_with_probs(g, p, config, &s.prefix, l, x, s.cond)?;
                    x = y;
                    if opts.record_attention {
                        let mut rec = vec![vec![0.0; batch]; lens.len() - 1];
                        accumulate_mass(g.attention_probs(attn).expect("attention node"), config, &lens, &mut rec);
                        let norm = (config.heads * config.horizon) as f64;
                        rec.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v /= norm));
                        attention.push(rec);
                    }
                }
            }
            let parts = g.split(x, 1, &lens)?;
            let action = action_head(g, p, config, parts[0], streams[0].cond)?;
            let mut physical = Vec::with_capacity(config.modalities.len());
            for ((m, s), &part) in config.modalities.iter().zip(&streams[1..]).zip(&parts[1..]) {
                physical.push(physical_head(g, p, config, &s.prefix, m.dim, part, s.cond)?);
            }
            Ok(ForwardOutput { action, physical, attention })
        }
    }
}

/// Action velocity from the action expert alone: a plain transformer over
/// the action-stream tokens, ignoring any physical inputs.
pub fn plain_forward(g: &mut Graph, p: &Bound, config: &ModelConfig, h: Var, input: &ModelInput) -> Result<Var> {
    let temb = g.input(time_embedding(&input.tau, config.width));
    let cond = time_conditioning(g, p, ACTION_PREFIX, temb)?;
    let mut x = action_tokens(g, p, config, h, input)?;
    for l in 0..config.depth {
        x = self_attention_block(g, p, config, ACTION_PREFIX, l, x, cond)?;
    }
    action_head(g, p, config, x, cond)
}
