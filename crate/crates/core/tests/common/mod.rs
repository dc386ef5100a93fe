//! Independent reference implementations used by the integration tests.
//! Everything here works on plain `Vec<f64>` with direct loops and shares no
//! code with the library kernels.

#![allow(dead_code)]

use iamnn_core::block::names;
use iamnn_core::{BlockConfig, ParamStore, Tensor};
use rand::Rng;

pub const BN_EPS: f64 = 1e-5;

/// Plain NCHW array.
#[derive(Clone, Debug)]
pub struct Nd {
    pub dims: [usize; 4],
    pub v: Vec<f64>,
}

impl Nd {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            v: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Self {
            dims: [s[0], s[1], s[2], s[3]],
            v: t.data().to_vec(),
        }
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.dims;
        self.v[((b * cc + c) * h + y) * w + x]
    }

    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let [_, cc, h, w] = self.dims;
        &mut self.v[((b * cc + c) * h + y) * w + x]
    }
}

/// Six nested loops over (b, co, oy, ox, ci, ky·kx) with explicit bounds
/// checks for padding.
pub fn conv_naive(x: &Nd, w: &[f64], co: usize, k: usize, stride: usize, pad: usize) -> Nd {
    let [b, ci, h, wd] = x.dims;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Nd::zeros([b, co, oh, ow]);
    for n in 0..b {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(n, c, iy as usize, ix as usize) * w[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    *out.at_mut(n, o, oy, ox) = acc;
                }
            }
        }
    }
    out
}

/// Eval-mode batch norm from running statistics.
pub fn bn_eval(x: &Nd, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Nd {
    let [b, c, h, w] = x.dims;
    let mut out = x.clone();
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.at(n, ch, y, xx);
                    *out.at_mut(n, ch, y, xx) = gamma[ch] * (v - mean[ch]) / (var[ch] + BN_EPS).sqrt() + beta[ch];
                }
            }
        }
    }
    out
}

pub fn relu(mut x: Nd) -> Nd {
    x.v.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

pub fn concat(parts: &[&Nd]) -> Nd {
    let [b, _, h, w] = parts[0].dims;
    let c: usize = parts.iter().map(|p| p.dims[1]).sum();
    let mut out = Nd::zeros([b, c, h, w]);
    for n in 0..b {
        let mut off = 0;
        for p in parts {
            for ch in 0..p.dims[1] {
                for y in 0..h {
                    for x in 0..w {
                        *out.at_mut(n, off + ch, y, x) = p.at(n, ch, y, x);
                    }
                }
            }
            off += p.dims[1];
        }
    }
    out
}

pub fn gap(x: &Nd, n: usize) -> Vec<f64> {
    let [_, c, h, w] = x.dims;
    (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x.at(n, ch, y, xx);
                }
            }
            s / (h * w) as f64
        })
        .collect()
}

pub fn linear(v: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + v.iter().enumerate().map(|(i, x)| x * w[o * v.len() + i]).sum::<f64>())
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn p<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store.param(name).unwrap().data()
}

fn buf<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store.buffer(name).unwrap().data()
}

fn bn_named(store: &ParamStore<f64>, x: &Nd, prefix: &str) -> Nd {
    bn_eval(
        x,
        p(store, &format!("{prefix}.gamma")),
        p(store, &format!("{prefix}.beta")),
        buf(store, &format!("{prefix}.running_mean")),
        buf(store, &format!("{prefix}.running_var")),
    )
}

/// One sample of an `Nd`.
fn sample(x: &Nd, n: usize) -> Nd {
    let [_, c, h, w] = x.dims;
    let len = c * h * w;
    Nd {
        dims: [1, c, h, w],
        v: x.v[n * len..(n + 1) * len].to_vec(),
    }
}

pub struct OracleOut {
    pub y: Nd,
    pub n_iters: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
}

/// Eval-mode block, transcribed literally per sample:
///
/// x_0 = relu(bn(conv_entry(x_in)));  s_0 = 0
/// x_i = concat(x_0, s_{i-1});  s_i = s_{i-1} + F(x_i)
/// h_i = sigmoid(fc3(relu(fc2(relu(fc1(gap(concat(s_{i-1}, x_0, f_i))))))))
/// stop at the first n with Σ h ≥ 1 - ε, or at M;  w_i = h_i (i < N), w_N = 1 - Σ_{i<N} h_i
/// y = x_0 + Σ w_i s_i
pub fn block_oracle(store: &ParamStore<f64>, cfg: &BlockConfig, index: usize, x_in: &Nd) -> OracleOut {
    let c = cfg.channels;
    let r = cfg.bottleneck_channels;
    let [batch, _, h, w] = x_in.dims;
    let mut y_all = Nd::zeros([batch, c, h, w]);
    let mut n_iters = Vec::new();
    let mut weights_all = Vec::new();
    for n in 0..batch {
        let xin = sample(x_in, n);
        let x0 = relu(bn_named(
            store,
            &conv_naive(&xin, p(store, &names::entry_conv(index)), c, 1, 1, 0),
            &names::entry_bn(index),
        ));
        let mut s_prev = Nd::zeros([1, c, h, w]);
        let mut states = Vec::new();
        let mut scores = Vec::new();
        let mut cum = 0.0;
        for i in 1..=cfg.max_iterations {
            let xi = concat(&[&x0, &s_prev]);
            let a = relu(bn_named(
                store,
                &conv_naive(&xi, p(store, &names::f_conv(index, 1)), r, 1, 1, 0),
                &names::iter_bn(index, i, 1),
            ));
            let b = relu(bn_named(
                store,
                &conv_naive(&a, p(store, &names::f_conv(index, 2)), r, 3, 1, 1),
                &names::iter_bn(index, i, 2),
            ));
            let f = bn_named(
                store,
                &conv_naive(&b, p(store, &names::f_conv(index, 3)), c, 1, 1, 0),
                &names::iter_bn(index, i, 3),
            );
            let v = gap(&concat(&[&s_prev, &x0, &f]), 0);
            let l1: Vec<f64> = linear(&v, p(store, &names::act_weight(index, 1)), p(store, &names::act_bias(index, 1)))
                .into_iter()
                .map(|z| z.max(0.0))
                .collect();
            let l2: Vec<f64> = linear(&l1, p(store, &names::act_weight(index, 2)), p(store, &names::act_bias(index, 2)))
                .into_iter()
                .map(|z| z.max(0.0))
                .collect();
            let hi = sigmoid(linear(&l2, p(store, &names::act_weight(index, 3)), p(store, &names::act_bias(index, 3)))[0]);
            let mut s = s_prev.clone();
            s.v.iter_mut().zip(&f.v).for_each(|(a, b)| *a += b);
            states.push(s.clone());
            scores.push(hi);
            s_prev = s;
            cum += hi;
            if cum >= 1.0 - cfg.act_epsilon {
                break;
            }
        }
        let big_n = states.len();
        let mut weights: Vec<f64> = scores[..big_n - 1].to_vec();
        weights.push(1.0 - scores[..big_n - 1].iter().sum::<f64>());
        let mut y = x0.clone();
        for (wi, si) in weights.iter().zip(&states) {
            y.v.iter_mut().zip(&si.v).for_each(|(a, b)| *a += wi * b);
        }
        let len = c * h * w;
        y_all.v[n * len..(n + 1) * len].copy_from_slice(&y.v);
        n_iters.push(big_n);
        weights_all.push(weights);
    }
    OracleOut {
        y: y_all,
        n_iters,
        weights: weights_all,
    }
}

pub fn random_tensor<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Replaces every BN buffer and affine parameter with random values so eval
/// mode is not an identity.
pub fn randomize_bn<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R) {
    let names: Vec<String> = store.buffers().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let t = store.buffer_mut(&n).unwrap();
        let var = n.ends_with("running_var");
        t.data_mut().iter_mut().for_each(|v| {
            *v = if var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.3..0.3) }
        });
    }
    let names: Vec<String> = store
        .params()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.ends_with(".gamma") || n.ends_with(".beta"))
        .collect();
    for n in names {
        let gamma = n.ends_with(".gamma");
        store.param_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| {
            *v = if gamma { rng.random_range(0.5..1.5) } else { rng.random_range(-0.2..0.2) }
        });
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// One random tiny block checked against [`block_oracle`]. Returns the
/// largest relative deviation of `y` and whether the iteration counts and
/// weights agree.
pub fn block_oracle_case(seed: u64) -> (f64, bool) {
    use iamnn_core::block::{block_forward, init_block};
    use iamnn_core::params::Access;
    use iamnn_core::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(2..=6);
    let c_in = rng.random_range(1..=5);
    let mut cfg = BlockConfig::new(c, rng.random_range(1..=4));
    cfg.bottleneck_channels = rng.random_range(1..=3);
    cfg.act_hidden = rng.random_range(2..=8);
    cfg.act_init_bias = rng.random_range(-2.0..1.0);
    let hw = rng.random_range(3..=7);
    let batch = rng.random_range(1..=3);

    let mut store = ParamStore::<f64>::new();
    init_block(&mut store, 1, c_in, &cfg, &mut rng).unwrap();
    randomize_bn(&mut store, &mut rng);
    let x = random_tensor(&[batch, c_in, hw, hw], 1.0, &mut rng);

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut access = Access::eval(&store);
    let out = block_forward(&mut g, &mut access, 1, &cfg, xv).unwrap();
    let got = g.value(out.y).data().to_vec();

    let want = block_oracle(&store, &cfg, 1, &Nd::from_tensor(&x));
    let err = got
        .iter()
        .zip(&want.y.v)
        .map(|(a, b)| rel_err(*a, *b, 1.0))
        .fold(0.0, f64::max);
    let traces_ok = out.traces.iter().zip(&want.n_iters).zip(&want.weights).all(|((t, &n), w)| {
        t.n_iters == n && t.weights.len() == w.len() && t.weights.iter().zip(w).all(|(a, b)| (a - b).abs() < 1e-9)
    });
    (err, traces_ok)
}

pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
    /// Entries whose stencil at the nominal step crossed a ReLU or max-pool
    /// switch and were re-checked with a smaller step.
    pub shrunk: usize,
    /// Entries above `1e-4`.
    pub failures: Vec<String>,
}

/// Relative error floor: below this magnitude both gradients count as zero.
pub const GRAD_FLOOR: f64 = 1e-7;

/// Central differences over every scalar of every parameter of a tiny
/// network in 64-bit, training mode, ponder penalty active.
///
/// The loss is piecewise smooth. A stencil `θ ± h` whose branch signature
/// differs from the one at `θ` straddles a switch point where the finite
/// difference measures a jump rather than the derivative; for those the step
/// is divided by 10 until all three points share one smooth piece.
pub fn network_gradcheck(step: f64) -> GradCheck {
    use iamnn_core::training::total_loss;
    use iamnn_core::{Graph, NetConfig, Network, StemConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let cfg = NetConfig {
        input_shape: [3, 12, 12],
        num_classes: 3,
        stem: StemConfig {
            kernel: 3,
            stride: 1,
            out_channels: 8,
            use_maxpool: false,
        },
        blocks: vec![BlockConfig::new(8, 2), BlockConfig::new(8, 2)],
    };
    let mut net = Network::<f64>::new(cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(&[2, 3, 12, 12], 1.0, &mut rng);
    let labels = [0usize, 2];
    let tau = 0.1;

    let loss_of = |net: &mut Network<f64>, backward: bool| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = net.forward_train(&mut g, xv).unwrap();
        assert!(out.traces.iter().flatten().all(|t| t.n_iters == 2), "halting must stay fixed");
        let loss = total_loss(&mut g, out.logits, &labels, &out.remainders, &out.traces, tau).unwrap();
        let v = g.value(loss.total).item().unwrap();
        let sig = g.branch_signature();
        if backward {
            g.backward(loss.total).unwrap();
            (v, sig, g.param_grads())
        } else {
            (v, sig, Default::default())
        }
    };

    let (_, base_sig, grads) = loss_of(&mut net, true);
    let names: Vec<String> = net.store().params().map(|(n, _)| n.to_string()).collect();
    let mut report = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
        shrunk: 0,
        failures: Vec::new(),
    };
    for name in names {
        let n = net.store().param(&name).unwrap().numel();
        for i in 0..n {
            let orig = net.store().param(&name).unwrap().data()[i];
            let mut h = step;
            let numeric = loop {
                net.store_mut().param_mut(&name).unwrap().data_mut()[i] = orig + h;
                let (up, sig_up, _) = loss_of(&mut net, false);
                net.store_mut().param_mut(&name).unwrap().data_mut()[i] = orig - h;
                let (down, sig_down, _) = loss_of(&mut net, false);
                net.store_mut().param_mut(&name).unwrap().data_mut()[i] = orig;
                if (sig_up == base_sig && sig_down == base_sig) || h < step * 1e-4 {
                    break (up - down) / (2.0 * h);
                }
                h /= 10.0;
            };
            if h < step {
                report.shrunk += 1;
            }
            let analytic = grads.get(&name).map_or(0.0, |g| g[i]);
            let e = rel_err(analytic, numeric, GRAD_FLOOR);
            let line = format!("{name}[{i}]: analytic {analytic:e}, numeric {numeric:e}, step {h:e}");
            if e > 1e-4 {
                report.failures.push(line.clone());
            }
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = line;
            }
            report.checked += 1;
        }
    }
    report
}

pub mod runs;
