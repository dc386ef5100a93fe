mod common;

use common::{random_tensor, rel_err};
use iamnn_core::graph::{BnStats, Graph, Var};
use iamnn_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Checks every leaf of `build` against central differences of
/// `sum(out ⊙ r)` for a fixed random `r`.
fn check<F>(inputs: Vec<Tensor<f64>>, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |inputs: &[Tensor<f64>], r: Option<&Tensor<f64>>, backward: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let r = r.cloned().unwrap_or_else(|| Tensor::ones(g.shape(out)));
        let rv = g.constant(r);
        let prod = g.mul(out, rv).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).item().unwrap();
        let grads: Vec<Vec<f64>> = if backward {
            g.backward(loss).unwrap();
            vars.iter()
                .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
                .collect()
        } else {
            Vec::new()
        };
        (value, grads, g.shape(out).to_vec())
    };
    let (_, _, out_shape) = eval(&inputs, None, false);
    let r = random_tensor(&out_shape, 1.0, &mut rng);
    let (_, grads, _) = eval(&inputs, Some(&r), true);
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut up = inputs.clone();
            up[k].data_mut()[i] += H;
            let mut down = inputs.clone();
            down[k].data_mut()[i] -= H;
            let numeric = (eval(&up, Some(&r), false).0 - eval(&down, Some(&r), false).0) / (2.0 * H);
            let e = rel_err(grads[k][i], numeric, 1e-7);
            assert!(e < TOL, "input {k}[{i}]: analytic {} numeric {numeric} (rel {e})", grads[k][i]);
        }
    }
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn conv2d_strided_padded() {
    check(vec![rnd(&[2, 3, 5, 5], 1), rnd(&[4, 3, 3, 3], 2)], |g, v| g.conv2d(v[0], v[1], 2, 1).unwrap());
}

#[test]
fn conv2d_pointwise() {
    check(vec![rnd(&[2, 4, 3, 3], 3), rnd(&[2, 4, 1, 1], 4)], |g, v| g.conv2d(v[0], v[1], 1, 0).unwrap());
}

#[test]
fn batch_norm_train() {
    check(vec![rnd(&[3, 2, 2, 2], 5), rnd(&[2], 6), rnd(&[2], 7)], |g, v| {
        let (mut m, mut var) = (vec![0.0; 2], vec![1.0; 2]);
        let stats = BnStats::Train {
            running_mean: &mut m,
            running_var: &mut var,
            active: None,
        };
        g.batch_norm(v[0], v[1], v[2], stats).unwrap()
    });
}

#[test]
fn batch_norm_masked() {
    check(vec![rnd(&[4, 2, 2, 2], 8), rnd(&[2], 9), rnd(&[2], 10)], |g, v| {
        let (mut m, mut var) = (vec![0.0; 2], vec![1.0; 2]);
        let active = [true, false, true, true];
        let stats = BnStats::Train {
            running_mean: &mut m,
            running_var: &mut var,
            active: Some(&active),
        };
        g.batch_norm(v[0], v[1], v[2], stats).unwrap()
    });
}

#[test]
fn batch_norm_eval() {
    check(vec![rnd(&[2, 3, 2, 2], 11), rnd(&[3], 12), rnd(&[3], 13)], |g, v| {
        let stats = BnStats::Eval {
            running_mean: &[0.1, -0.2, 0.3],
            running_var: &[1.5, 0.7, 1.0],
        };
        g.batch_norm(v[0], v[1], v[2], stats).unwrap()
    });
}

#[test]
fn pooling() {
    check(vec![rnd(&[2, 2, 5, 5], 14)], |g, v| g.maxpool2x2(v[0]).unwrap());
    check(vec![rnd(&[1, 2, 5, 5], 15)], |g, v| g.max_pool(v[0], 3, 2, 1).unwrap());
    check(vec![rnd(&[2, 3, 3, 2], 16)], |g, v| g.global_avg_pool(v[0]).unwrap());
}

#[test]
fn linear_and_activations() {
    check(vec![rnd(&[3, 4], 17), rnd(&[5, 4], 18), rnd(&[5], 19)], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
        let a = g.sigmoid(y);
        let b = g.tanh(y);
        let c = g.relu(y);
        let ab = g.add(a, b).unwrap();
        let abc = g.sub(ab, c).unwrap();
        g.affine(abc, 1.5, -0.25)
    });
}

#[test]
fn concat_mul_and_scale_batch() {
    check(vec![rnd(&[2, 1, 2, 2], 20), rnd(&[2, 2, 2, 2], 21), rnd(&[2], 22)], |g, v| {
        let c = g.concat_channels(&[v[0], v[1]]).unwrap();
        let c2 = g.concat_channels(&[v[1], v[0]]).unwrap();
        let m = g.mul(c, c2).unwrap();
        g.scale_batch(m, v[2]).unwrap()
    });
}

#[test]
fn softmax_cross_entropy() {
    check(vec![rnd(&[3, 5], 23)], |g, v| {
        let l = g.softmax_cross_entropy(v[0], &[4, 0, 2]).unwrap();
        let m = g.mean(v[0]);
        let s = g.add(l, m).unwrap();
        g.reshape(s, &[1]).unwrap()
    });
}

#[test]
fn shared_conv_gradient_is_sum_of_iteration_contributions() {
    use iamnn_core::block::{block_forward, init_block, names};
    use iamnn_core::params::Access;
    use iamnn_core::{BlockConfig, ParamStore};

    let cfg = BlockConfig::new(4, 2);
    let mut store = ParamStore::<f64>::new();
    init_block(&mut store, 1, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let x = rnd(&[2, 3, 5, 5], 2);
    let conv2 = names::f_conv(1, 2);

    let run = |untied: bool| {
        let mut s = store.clone();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut access = Access::train(&mut s);
        if untied {
            access = access.untied();
        }
        let out = block_forward(&mut g, &mut access, 1, &cfg, xv).unwrap();
        assert!(out.traces.iter().all(|t| t.n_iters == 2));
        let loss = g.sum(out.y);
        g.backward(loss).unwrap();
        let per_iter: Vec<Vec<f64>> = (1..=2)
            .filter_map(|i| g.param_var(&format!("{conv2}@{i}")).map(|v| g.grad(v).unwrap().to_vec()))
            .collect();
        (g.param_grads()[&conv2].clone(), per_iter)
    };
    let (tied, _) = run(false);
    let (summed, parts) = run(true);
    assert_eq!(parts.len(), 2);
    assert!(parts.iter().all(|p| p.iter().any(|v| v.abs() > 0.0)));
    let norm: f64 = tied.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 0.0);
    for i in 0..tied.len() {
        assert!((tied[i] - (parts[0][i] + parts[1][i])).abs() < 1e-12);
        assert!((tied[i] - summed[i]).abs() < 1e-12);
    }
}
