//! The weight-shared iterative block with adaptive computation time.
//!
//! One block replaces a stack of residual units. Per iteration `i`:
//!
//! ```text
//! x_i = concat(x_0, s_{i-1})          s_0 = 0
//! f_i = F(x_i)                         conv weights shared, BN per iteration
//! s_i = s_{i-1} + f_i
//! h_i = ACT(s_{i-1}, x_0, f_i)         halting score in (0, 1)
//! ```
//!
//! Iteration stops once the cumulative score reaches `1 - ε` or the cap `M`
//! is hit; the output is `y = x_0 + Σ w_i s_i` with `w_i = h_i` before the
//! last iteration and the remainder `1 - Σ_{i<N} h_i` at it, so the weights
//! always sum to one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{add_batch_norm, Access, Init, ParamStore};
use crate::tensor::{Float, Tensor};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Width of `x_0`, `s_i` and `y`.
    pub channels: usize,
    pub bottleneck_channels: usize,
    /// Iteration cap `M`.
    pub max_iterations: usize,
    pub act_hidden: usize,
    pub act_epsilon: f64,
    pub act_activation: Activation,
    /// Initial bias of the halting head's output unit.
    pub act_init_bias: f64,
}

impl BlockConfig {
    pub fn new(channels: usize, max_iterations: usize) -> Self {
        Self {
            channels,
            bottleneck_channels: (channels / 4).max(1),
            max_iterations,
            act_hidden: 64,
            act_epsilon: 0.01,
            act_activation: Activation::Relu,
            act_init_bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("block channels must be positive".into()));
        }
        if self.bottleneck_channels == 0 {
            return Err(Error::Config("bottleneck channels must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if self.act_hidden == 0 {
            return Err(Error::Config("act hidden width must be positive".into()));
        }
        if !(self.act_epsilon > 0.0 && self.act_epsilon < 1.0) {
            return Err(Error::Config(format!(
                "act epsilon must lie in (0, 1), got {}",
                self.act_epsilon
            )));
        }
        Ok(())
    }
}

/// Halting record of one sample in one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaltingTrace {
    /// Halting scores `h_1..h_N`.
    pub scores: Vec<f64>,
    /// Output weights `w_1..w_N`; they sum to one.
    pub weights: Vec<f64>,
    pub n_iters: usize,
    /// `1 - Σ_{i<N} h_i`, equal to `w_N`.
    pub remainder: f64,
    /// `N + R`.
    pub ponder: f64,
}

/// Incremental form of the halting rule, fed one score per iteration.
#[derive(Clone, Debug)]
pub struct Halting {
    max_iterations: usize,
    threshold: f64,
    cumulative: f64,
    scores: Vec<f64>,
    halted: bool,
}

impl Halting {
    pub fn new(max_iterations: usize, epsilon: f64) -> Self {
        Self {
            max_iterations,
            threshold: 1.0 - epsilon,
            cumulative: 0.0,
            scores: Vec::new(),
            halted: false,
        }
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    /// Records `h` and reports whether this iteration is the last one.
    pub fn push(&mut self, h: f64) -> bool {
        debug_assert!(!self.halted);
        self.scores.push(h);
        self.cumulative += h;
        self.halted = self.cumulative >= self.threshold || self.scores.len() >= self.max_iterations;
        self.halted
    }

    pub fn finish(self) -> Result<HaltingTrace> {
        if !self.halted {
            return Err(Error::Contract(format!(
                "halting stream ended after {} scores without halting",
                self.scores.len()
            )));
        }
        let n = self.scores.len();
        let before: f64 = self.scores[..n - 1].iter().sum();
        let remainder = 1.0 - before;
        let mut weights = self.scores[..n - 1].to_vec();
        weights.push(remainder);
        Ok(HaltingTrace {
            scores: self.scores,
            weights,
            n_iters: n,
            remainder,
            ponder: n as f64 + remainder,
        })
    }
}

/// Applies the halting rule to a stream of scores, consuming only as many
/// as it needs.
pub fn halting_rule(scores: &[f64], max_iterations: usize, epsilon: f64) -> Result<HaltingTrace> {
    if scores.is_empty() {
        return Err(Error::Contract("empty halting-score stream".into()));
    }
    if max_iterations == 0 {
        return Err(Error::Contract("max_iterations must be at least 1".into()));
    }
    let mut h = Halting::new(max_iterations, epsilon);
    for &s in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Contract(format!("halting score {s} outside [0, 1]")));
        }
        if h.push(s) {
            break;
        }
    }
    h.finish()
}

/// Parameter names of block `index`.
pub mod names {
    pub fn entry_conv(b: usize) -> String {
        format!("block{b}.entry.conv.weight")
    }
    pub fn entry_bn(b: usize) -> String {
        format!("block{b}.entry.bn")
    }
    /// Shared conv `j ∈ {1,2,3}` of the processing block.
    pub fn f_conv(b: usize, j: usize) -> String {
        format!("block{b}.F.conv{j}.weight")
    }
    /// BN prefix of conv `j` at iteration `i` (1-based).
    pub fn iter_bn(b: usize, i: usize, j: usize) -> String {
        format!("block{b}.bn.iter{i}.conv{j}")
    }
    pub fn act_weight(b: usize, layer: usize) -> String {
        format!("block{b}.act.fc{layer}.weight")
    }
    pub fn act_bias(b: usize, layer: usize) -> String {
        format!("block{b}.act.fc{layer}.bias")
    }
}

/// Allocates and initializes block `index` taking `c_in` input channels.
pub fn init_block<T: Float, R: Rng>(
    store: &mut ParamStore<T>,
    index: usize,
    c_in: usize,
    cfg: &BlockConfig,
    rng: &mut R,
) -> Result<()> {
    let c = cfg.channels;
    let b = cfg.bottleneck_channels;
    let conv = |rng: &mut R, co: usize, ci: usize, k: usize| Init::HeNormal(ci * k * k).sample::<T, _>(&[co, ci, k, k], rng);
    store.insert_param(&names::entry_conv(index), conv(rng, c, c_in, 1))?;
    add_batch_norm(store, &names::entry_bn(index), c)?;
    store.insert_param(&names::f_conv(index, 1), conv(rng, b, 2 * c, 1))?;
    store.insert_param(&names::f_conv(index, 2), conv(rng, b, b, 3))?;
    store.insert_param(&names::f_conv(index, 3), conv(rng, c, b, 1))?;
    for i in 1..=cfg.max_iterations {
        add_batch_norm(store, &names::iter_bn(index, i, 1), b)?;
        add_batch_norm(store, &names::iter_bn(index, i, 2), b)?;
        add_batch_norm(store, &names::iter_bn(index, i, 3), c)?;
    }
    let h = cfg.act_hidden;
    for (layer, (fin, fout)) in [(3 * c, h), (h, h), (h, 1)].into_iter().enumerate() {
        let layer = layer + 1;
        store.insert_param(
            &names::act_weight(index, layer),
            Init::FanInUniform(fin).sample(&[fout, fin], rng),
        )?;
        let bias = if layer == 3 {
            Init::Constant(cfg.act_init_bias).sample(&[fout], rng)
        } else {
            Init::Constant(0.0).sample(&[fout], rng)
        };
        store.insert_param(&names::act_bias(index, layer), bias)?;
    }
    Ok(())
}

/// Halting score per sample: two hidden layers over the pooled concatenation
/// of the state entering the iteration, the block input and the
/// processing-block output. Returns a `[B]` tensor in `(0, 1)`.
pub fn act_score<T: Float>(
    g: &mut Graph<T>,
    access: &Access<'_, T>,
    block: usize,
    cfg: &BlockConfig,
    x0: Var,
    s_prev: Var,
    f: Var,
) -> Result<Var> {
    let cat = g.concat_channels(&[s_prev, x0, f])?;
    let mut v = g.global_avg_pool(cat)?;
    for layer in 1..=3 {
        let w = access.param(g, &names::act_weight(block, layer))?;
        let bias = access.param(g, &names::act_bias(block, layer))?;
        v = g.linear(v, w, Some(bias))?;
        if layer < 3 {
            v = match cfg.act_activation {
                Activation::Relu => g.relu(v),
                Activation::Tanh => g.tanh(v),
            };
        }
    }
    let h = g.sigmoid(v);
    let batch = g.shape(h)[0];
    g.reshape(h, &[batch])
}

/// The weight-shared bottleneck `F` evaluated with iteration `iter`'s BN.
fn processing_block<T: Float>(
    g: &mut Graph<T>,
    access: &mut Access<'_, T>,
    block: usize,
    iter: usize,
    x: Var,
    active: Option<&[bool]>,
) -> Result<Var> {
    let w1 = access.shared_param(g, &names::f_conv(block, 1), iter)?;
    let w2 = access.shared_param(g, &names::f_conv(block, 2), iter)?;
    let w3 = access.shared_param(g, &names::f_conv(block, 3), iter)?;
    let h = g.conv2d(x, w1, 1, 0)?;
    let h = access.batch_norm(g, h, &names::iter_bn(block, iter, 1), active)?;
    let h = g.relu(h);
    let h = g.conv2d(h, w2, 1, 1)?;
    let h = access.batch_norm(g, h, &names::iter_bn(block, iter, 2), active)?;
    let h = g.relu(h);
    let h = g.conv2d(h, w3, 1, 0)?;
    access.batch_norm(g, h, &names::iter_bn(block, iter, 3), active)
}

pub struct BlockOutput {
    pub y: Var,
    /// `[B]` remainders, differentiable through the halting scores.
    pub remainder: Var,
    pub traces: Vec<HaltingTrace>,
    /// Iterations executed for the batch (the largest `N`).
    pub iterations_run: usize,
}

fn ensure_finite<T: Float>(g: &Graph<T>, v: Var, block: usize, iteration: usize) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NumericOverflow { block, iteration })
    }
}

/// Runs block `index` on `x_in[B, Cin, H, W]`.
///
/// The batch iterates until every sample has halted. Samples that halted
/// earlier keep flowing through the remaining iterations but get zero output
/// weight and are excluded from training-mode BN statistics.
pub fn block_forward<T: Float>(
    g: &mut Graph<T>,
    access: &mut Access<'_, T>,
    index: usize,
    cfg: &BlockConfig,
    x_in: Var,
) -> Result<BlockOutput> {
    let (batch, _, h, w) = g.value(x_in).dims4()?;
    let c = cfg.channels;
    let train = access.is_train();

    let we = access.param(g, &names::entry_conv(index))?;
    let x0 = g.conv2d(x_in, we, 1, 0)?;
    let x0 = access.batch_norm(g, x0, &names::entry_bn(index), None)?;
    let x0 = g.relu(x0);
    ensure_finite(g, x0, index, 0)?;

    let mut s = g.constant(Tensor::zeros(&[batch, c, h, w]));
    let mut halting: Vec<Halting> = (0..batch)
        .map(|_| Halting::new(cfg.max_iterations, cfg.act_epsilon))
        .collect();
    let mut states = Vec::new();
    let mut scores = Vec::new();
    for iter in 1..=cfg.max_iterations {
        let active: Vec<bool> = halting.iter().map(|hs| !hs.halted()).collect();
        if !active.iter().any(|&a| a) {
            break;
        }
        let mask = (train && active.iter().any(|&a| !a)).then_some(active.as_slice());
        let xi = g.concat_channels(&[x0, s])?;
        let f = processing_block(g, access, index, iter, xi, mask)?;
        let hv = act_score(g, access, index, cfg, x0, s, f)?;
        s = g.add(s, f)?;
        ensure_finite(g, s, index, iter)?;
        ensure_finite(g, hv, index, iter)?;
        for (b, hs) in halting.iter_mut().enumerate() {
            if active[b] {
                hs.push(g.value(hv).data()[b].as_f64());
            }
        }
        states.push(s);
        scores.push(hv);
    }

    let traces = halting.into_iter().map(Halting::finish).collect::<Result<Vec<_>>>()?;
    let n: Vec<usize> = traces.iter().map(|t| t.n_iters).collect();
    let iterations_run = states.len();

    // w_i = [i < N]·h_i + [i = N]·(1 - Σ_{j<i} h_j)
    let mask_where = |g: &mut Graph<T>, pred: &dyn Fn(usize) -> bool| {
        let data = n.iter().map(|&nb| if pred(nb) { T::one() } else { T::zero() }).collect();
        g.constant(Tensor::new(&[batch], data).expect("batch-sized"))
    };
    let mut cum = g.constant(Tensor::zeros(&[batch]));
    let mut y = x0;
    let mut remainder = g.constant(Tensor::zeros(&[batch]));
    for (i, (&s_i, &h_i)) in states.iter().zip(&scores).enumerate() {
        let it = i + 1;
        let lt = mask_where(g, &|nb| it < nb);
        let eq = mask_where(g, &|nb| it == nb);
        let rest = g.affine(cum, -1.0, 1.0);
        let r_i = g.mul(eq, rest)?;
        let p_i = g.mul(lt, h_i)?;
        let w_i = g.add(p_i, r_i)?;
        let contrib = g.scale_batch(s_i, w_i)?;
        y = g.add(y, contrib)?;
        remainder = g.add(remainder, r_i)?;
        cum = g.add(cum, h_i)?;
    }
    Ok(BlockOutput {
        y,
        remainder,
        traces,
        iterations_run,
    })
}
