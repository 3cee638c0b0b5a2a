//! Central-difference gradient checks.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-5)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Worst relative error between reverse-mode gradients of the scalar `build`
/// and central differences, over every element of every input.
pub fn gradcheck(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for (i, &an) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(an, numeric));
        }
    }
    Ok(worst)
}

/// Reduces a tensor-valued op to a scalar with fixed random weights so every
/// output element contributes a distinct sensitivity.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut r = Rng::derive(seed, "gradcheck-weights", 0);
    let w = g.input(r.normal_tensor(&shape));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Worst gradient-check error of every differentiable op on random instance
/// `trial`, by op name.
pub fn check_ops(trial: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = Rng::derive(trial, "gradcheck", 0);
    let s = trial;
    let mut rand = |shape: &[usize]| r.normal_tensor(shape);
    let mut out = Vec::new();
    out.push(("matmul", gradcheck(&[rand(&[2, 3, 4]), rand(&[4, 2])], |g, v| {
        let o = g.matmul(v[0], v[1])?;
        weighted_sum(g, o, s)
    })?));
    out.push(("matmul_batched", gradcheck(&[rand(&[2, 3, 4]), rand(&[2, 4, 3])], |g, v| {
        let o = g.matmul(v[0], v[1])?;
        weighted_sum(g, o, s)
    })?));
    out.push(("linear", gradcheck(&[rand(&[3, 4]), rand(&[4, 2]), rand(&[2])], |g, v| {
        let o = g.linear(v[0], v[1], Some(v[2]))?;
        weighted_sum(g, o, s)
    })?));
    out.push(("add_broadcast", gradcheck(&[rand(&[2, 3, 4]), rand(&[2, 1, 4])], |g, v| {
        let o = g.add(v[0], v[1])?;
        weighted_sum(g, o, s)
    })?));
    out.push(("mul_broadcast", gradcheck(&[rand(&[2, 3, 4]), rand(&[3, 4])], |g, v| {
        let o = g.mul(v[0], v[1])?;
        weighted_sum(g, o, s)
    })?));
    out.push(("mul", gradcheck(&[rand(&[3, 4]), rand(&[3, 4])], |g, v| {
        let o = g.mul(v[0], v[1])?;
        weighted_sum(g, o, s)
    })?));
    out.push(("softmax", gradcheck(&[rand(&[2, 5])], |g, v| {
        let o = g.softmax(v[0]);
        weighted_sum(g, o, s)
    })?));
    out.push(("layer_norm", gradcheck(&[rand(&[3, 5]), rand(&[5]), rand(&[5])], |g, v| {
        let o = g.layer_norm(v[0], Some(v[1]), Some(v[2]))?;
        weighted_sum(g, o, s)
    })?));
    out.push(("silu", gradcheck(&[rand(&[4, 3])], |g, v| {
        let o = g.silu(v[0]);
        weighted_sum(g, o, s)
    })?));
    out.push(("concat_last", gradcheck(&[rand(&[2, 3, 2]), rand(&[2, 3, 1])], |g, v| {
        let o = g.concat_last(&[v[0], v[1]])?;
        weighted_sum(g, o, s)
    })?));
    out.push(("concat_axis1", gradcheck(&[rand(&[2, 2, 3]), rand(&[2, 1, 3])], |g, v| {
        let o = g.concat(&[v[0], v[1]], 1)?;
        weighted_sum(g, o, s)
    })?));
    out.push(("slice", gradcheck(&[rand(&[2, 3, 5])], |g, v| {
        let parts = g.split_last(v[0], &[2, 3])?;
        let a = weighted_sum(g, parts[0], s)?;
        let b = weighted_sum(g, parts[1], s + 1)?;
        let b2 = g.scale(b, 0.5);
        g.add(a, b2)
    })?));
    out.push(("transpose_reshape", gradcheck(&[rand(&[2, 3, 4])], |g, v| {
        let o = g.transpose(v[0])?;
        let o = g.reshape(o, &[2, 12])?;
        weighted_sum(g, o, s)
    })?));
    out.push(("mse", gradcheck(&[rand(&[3, 2]), rand(&[3, 2])], |g, v| g.mse(v[0], v[1]))?));
    out.push(("modulated_layer_norm", gradcheck(&[rand(&[2, 3, 4]), rand(&[2, 4]), rand(&[2, 4])], |g, v| {
        let o = g.modulated_layer_norm(v[0], v[1], v[2])?;
        weighted_sum(g, o, s)
    })?));
    out.push(("attention", gradcheck(&[rand(&[2, 3, 4]), rand(&[2, 5, 4]), rand(&[2, 5, 4])], |g, v| {
        let o = g.attention(v[0], v[1], v[2], 2)?;
        weighted_sum(g, o, s)
    })?));
    out.push(("add_scalar_scale_sum", gradcheck(&[rand(&[3, 2])], |g, v| {
        let o = g.add_scalar(v[0], 1.5);
        let o = g.scale(o, -0.7);
        weighted_sum(g, o, s)
    })?));
    Ok(out)
}
