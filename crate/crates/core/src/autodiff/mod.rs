//! Dense-tensor engine with reverse-mode differentiation and AdamW.

pub mod check;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, OpKind, Var, LAYER_NORM_EPS};
pub use optim::{adamw_step, AdamWConfig, OptimizerState, ADAM_EPS};
pub use params::{Bound, Param, ParamStore};
pub use tensor::Tensor;

use crate::rng::Rng;

/// Linear weight `[fan_in, fan_out]` drawn from N(0, 1/fan_in).
pub fn init_linear_weight(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let sd = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| sd * rng.normal())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(r: &mut Rng, shape: &[usize]) -> Tensor {
        r.normal_tensor(shape)
    }

    #[test]
    fn gradcheck_every_op_on_random_instances() {
        for trial in 0..20u64 {
            for (op, err) in check::check_ops(trial).unwrap() {
                assert!(err <= 1e-4, "{op} trial {trial}: rel err {err}");
            }
        }
    }

    /// The fused ops agree with their compositions from primitive ops.
    #[test]
    fn fused_ops_match_compositions() {
        let mut r = Rng::derive(5, "fused", 0);
        let mut g = Graph::new();
        let x = g.input(rand(&mut r, &[2, 3, 4]));
        let shift = g.input(rand(&mut r, &[2, 4]));
        let scale = g.input(rand(&mut r, &[2, 4]));
        let fused = g.modulated_layer_norm(x, shift, scale).unwrap();
        let n = g.layer_norm(x, None, None).unwrap();
        let sc = g.reshape(scale, &[2, 1, 4]).unwrap();
        let sc = g.add_scalar(sc, 1.0);
        let sh = g.reshape(shift, &[2, 1, 4]).unwrap();
        let y = g.mul(n, sc).unwrap();
        let y = g.add(y, sh).unwrap();
        assert!(g.value(fused).max_abs_diff(g.value(y)) < 1e-14);

        let q = g.input(rand(&mut r, &[2, 3, 4]));
        let k = g.input(rand(&mut r, &[2, 5, 4]));
        let v = g.input(rand(&mut r, &[2, 5, 4]));
        let fused = g.attention(q, k, v, 2).unwrap();
        let mut heads = Vec::new();
        for h in 0..2 {
            let qh = g.slice(q, 2, 2 * h, 2).unwrap();
            let kh = g.slice(k, 2, 2 * h, 2).unwrap();
            let vh = g.slice(v, 2, 2 * h, 2).unwrap();
            let kt = g.transpose(kh).unwrap();
            let s = g.matmul(qh, kt).unwrap();
            let s = g.scale(s, 1.0 / 2f64.sqrt());
            let p = g.softmax(s);
            heads.push(g.matmul(p, vh).unwrap());
        }
        let y = g.concat_last(&heads).unwrap();
        assert!(g.value(fused).max_abs_diff(g.value(y)) < 1e-14);
        let probs = g.attention_probs(fused).unwrap();
        for row in probs.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcheck_two_layer_mlp() {
        let mut r = Rng::derive(99, "mlp", 0);
        let inputs = vec![
            rand(&mut r, &[5, 3]),
            init_linear_weight(&mut r, 3, 8),
            rand(&mut r, &[8]),
            init_linear_weight(&mut r, 8, 2),
            rand(&mut r, &[2]),
            rand(&mut r, &[5, 2]),
        ];
        let err = check::gradcheck(&inputs, |g, v| {
            let h = g.linear(v[0], v[1], Some(v[2]))?;
            let h = g.silu(h);
            let o = g.linear(h, v[3], Some(v[4]))?;
            g.mse(o, v[5])
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn mse_of_identical_inputs_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let l = g.mse(x, x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.input(Tensor::eye(2));
        let m = g.input(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn layer_norm_of_pair() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let gamma = g.input(Tensor::new(vec![2], vec![2.0, 2.0]).unwrap());
        let beta = g.input(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        let y = g.layer_norm(x, Some(gamma), Some(beta)).unwrap();
        // mean 2, population variance 1
        let s = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        let want = [2.0 * -s + 0.5, 2.0 * s + 0.5];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let e = g.matmul(a, b).unwrap_err().to_string();
        assert!(e.contains("matmul") && e.contains("[2, 3]"), "{e}");
        let c = g.input(Tensor::zeros(&[4]));
        let e = g.add(a, c).unwrap_err().to_string();
        assert!(e.contains("add"), "{e}");
        let e = g.mse(a, c).unwrap_err().to_string();
        assert!(e.contains("mse"), "{e}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-10.0f64..10.0, 12)) {
                let mut g = Graph::new();
                let x = g.input(Tensor::new(vec![3, 4], vals).unwrap());
                let y = g.softmax(x);
                for row in g.value(y).data().chunks(4) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
                }
            }

            #[test]
            fn layer_norm_rows_are_standardized(vals in proptest::collection::vec(-10.0f64..10.0, 16)) {
                let mut g = Graph::new();
                let x = g.input(Tensor::new(vec![4, 4], vals.clone()).unwrap());
                let y = g.layer_norm(x, None, None).unwrap();
                for (row, src) in g.value(y).data().chunks(4).zip(vals.chunks(4)) {
                    let m = src.iter().sum::<f64>() / 4.0;
                    let var_in = src.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0;
                    let mean = row.iter().sum::<f64>() / 4.0;
                    prop_assert!(mean.abs() <= 1e-10);
                    if var_in >= 1e-8 {
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
                        // the eps term shrinks variance by var/(var+eps)
                        let expect = var_in / (var_in + LAYER_NORM_EPS);
                        prop_assert!((var - expect).abs() <= 1e-9);
                        if var_in >= 10.0 {
                            prop_assert!((var - 1.0).abs() <= 1e-6);
                        }
                    }
                }
            }
        }
    }
}
