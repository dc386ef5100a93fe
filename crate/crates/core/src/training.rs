//! Loss with the ponder penalty, optimizers, the training loop and
//! evaluation.

use std::io::Write;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::HaltingTrace;
use crate::cost::{attach_costs, CostReport, FlopConvention};
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::Network;
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd_momentum" | "sgd" => Some(OptimizerKind::SgdMomentum),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` every `every` steps.
    Step { every: usize, factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Ponder penalty coefficient.
    pub act_tau: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Random flip and 4-pixel pad-crop on training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::SgdMomentum,
            learning_rate: 0.05,
            schedule: LrSchedule::Constant,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.0,
            batch_size: 32,
            max_steps: 1000,
            act_tau: 0.01,
            seed: 0,
            checkpoint_every: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        check_tau(self.act_tau)?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("momentum and betas must lie in [0, 1)".into()));
        }
        if let LrSchedule::Step { every, factor } = self.schedule {
            if every == 0 || !(factor > 0.0) {
                return Err(Error::Config("step schedule needs every >= 1 and factor > 0".into()));
            }
        }
        Ok(())
    }

    /// Learning rate used at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Step { every, factor } => self.learning_rate * factor.powi((step / every) as i32),
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::Config(format!("act_tau must be >= 0, got {tau}")));
    }
    Ok(())
}

/// Mean over samples of `Σ_blocks (N + R)`, from traces alone.
pub fn ponder_cost(traces: &[Vec<HaltingTrace>]) -> f64 {
    let samples = traces.first().map_or(0, Vec::len);
    if samples == 0 {
        return 0.0;
    }
    traces.iter().flatten().map(|t| t.ponder).sum::<f64>() / samples as f64
}

/// Loss value from its parts: `ce + tau · ponder_cost(traces)`.
pub fn loss_value(cross_entropy: f64, traces: &[Vec<HaltingTrace>], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(cross_entropy + tau * ponder_cost(traces))
}

pub struct Loss {
    pub total: Var,
    pub cross_entropy: f64,
    pub ponder: f64,
}

/// `cross_entropy + tau · mean_s Σ_b (N_b + R_b)`. `remainders[b]` is the
/// `[B]` remainder node of block `b`; only it carries gradient, the
/// iteration counts enter as a constant.
pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    remainders: &[Var],
    traces: &[Vec<HaltingTrace>],
    tau: f64,
) -> Result<Loss> {
    check_tau(tau)?;
    if remainders.len() != traces.len() {
        return Err(Error::Contract("one remainder node per block expected".into()));
    }
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let ce_value = g.value(ce).item()?.as_f64();
    let ponder = ponder_cost(traces);
    if tau == 0.0 || remainders.is_empty() {
        return Ok(Loss {
            total: ce,
            cross_entropy: ce_value,
            ponder,
        });
    }
    let samples = labels.len().max(1) as f64;
    let n_mean = traces.iter().flatten().map(|t| t.n_iters as f64).sum::<f64>() / samples;
    let mut r_sum = g.mean(remainders[0]);
    for &r in &remainders[1..] {
        let m = g.mean(r);
        r_sum = g.add(r_sum, m)?;
    }
    let penalty = g.affine(r_sum, tau, tau * n_mean);
    let total = g.add(ce, penalty)?;
    Ok(Loss {
        total,
        cross_entropy: ce_value,
        ponder,
    })
}

/// Per-parameter optimizer slots (momentum, or Adam's two moments).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    /// Updates applied so far.
    pub updates: u64,
    pub slots: IndexMap<String, Vec<Tensor<T>>>,
}

impl<T: Float> Default for OptimizerState<T> {
    fn default() -> Self {
        Self {
            updates: 0,
            slots: IndexMap::new(),
        }
    }
}

impl<T: Float> OptimizerState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update from the gradients held by `store`.
    pub fn apply(&mut self, store: &mut ParamStore<T>, cfg: &TrainConfig, lr: f64) -> Result<()> {
        self.updates += 1;
        let t = self.updates as i32;
        let n_slots = match cfg.optimizer {
            OptimizerKind::SgdMomentum => 1,
            OptimizerKind::Adam => 2,
        };
        let lr_t = T::cast(lr);
        let wd = T::cast(cfg.weight_decay);
        for (name, p) in store.params_mut() {
            let slots = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| (0..n_slots).map(|_| Tensor::zeros(p.shape())).collect());
            if slots.len() != n_slots || slots[0].shape() != p.shape() {
                return Err(Error::Contract(format!("optimizer state does not match `{name}`")));
            }
            let grad: Vec<T> = match p.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.numel()],
            };
            match cfg.optimizer {
                OptimizerKind::SgdMomentum => {
                    let mu = T::cast(cfg.momentum);
                    let v = slots[0].data_mut();
                    for ((w, &g), v) in p.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                        let g = g + wd * *w;
                        *v = mu * *v + g;
                        *w -= lr_t * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (cfg.beta1, cfg.beta2);
                    let c1 = T::cast(1.0 - b1.powi(t));
                    let c2 = T::cast(1.0 - b2.powi(t));
                    let (b1, b2, eps) = (T::cast(b1), T::cast(b2), T::cast(cfg.adam_epsilon));
                    let one = T::one();
                    let (m_slot, v_slot) = slots.split_at_mut(1);
                    let m = m_slot[0].data_mut();
                    let v = v_slot[0].data_mut();
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        let g = grad[i] + wd * *w;
                        m[i] = b1 * m[i] + (one - b1) * g;
                        v[i] = b2 * v[i] + (one - b2) * g * g;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// 1-based.
    pub step: usize,
    pub loss: f64,
    pub cross_entropy: f64,
    pub ponder: f64,
    pub accuracy: f64,
    pub learning_rate: f64,
    /// Mean `N + R` per block over the batch.
    pub ponder_per_block: Vec<f64>,
}

fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward, loss, backward and one optimizer update. `step` is 1-based and
/// only used for reporting.
pub fn train_step<T: Float>(
    net: &mut Network<T>,
    opt: &mut OptimizerState<T>,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let out = net.forward_train(&mut g, x)?;
    let loss = total_loss(&mut g, out.logits, labels, &out.remainders, &out.traces, cfg.act_tau)?;
    let loss_val = g.value(loss.total).item()?.as_f64();
    if !loss_val.is_finite() {
        return Err(Error::Divergence { step });
    }
    g.backward(loss.total)?;
    let store = net.store_mut();
    store.accumulate(&g.param_grads())?;
    let lr = cfg.lr_at(step.saturating_sub(1));
    opt.apply(store, cfg, lr)?;
    store.zero_grad();

    let logits = g.value(out.logits);
    let k = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let b = labels.len() as f64;
    Ok(StepStats {
        step,
        loss: loss_val,
        cross_entropy: loss.cross_entropy,
        ponder: loss.ponder,
        accuracy: correct as f64 / b,
        learning_rate: lr,
        ponder_per_block: out
            .traces
            .iter()
            .map(|t| t.iter().map(|h| h.ponder).sum::<f64>() / b)
            .collect(),
    })
}

/// Network, optimizer state and the position in the data stream.
pub struct Trainer<T> {
    pub net: Network<T>,
    pub opt: OptimizerState<T>,
    pub cfg: TrainConfig,
    /// Steps completed.
    pub step: usize,
    /// Drives augmentation only; batch order is a pure function of seed and
    /// step.
    pub rng: ChaCha8Rng,
}

impl<T: Float> Trainer<T> {
    pub fn new(net: Network<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            net,
            opt: OptimizerState::new(),
            cfg,
            step: 0,
            rng,
        })
    }

    /// Runs one step on the next batch of `data`.
    pub fn step(&mut self, data: &Dataset) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let bpe = data.batches_per_epoch(self.cfg.batch_size);
        let (epoch, index) = ((self.step / bpe) as u64, self.step % bpe);
        let batch = data.batch_at(self.cfg.batch_size, Some(self.cfg.seed), epoch, index)?;
        let mut images = batch.images;
        if self.cfg.augment {
            augment(&mut images, 4, &mut self.rng)?;
        }
        let images = images.cast::<T>();
        let stats = train_step(&mut self.net, &mut self.opt, &images, &batch.labels, &self.cfg, self.step + 1)?;
        self.step += 1;
        Ok(stats)
    }

    /// Steps until `cfg.max_steps`, calling `on_step` after each.
    pub fn run<F>(&mut self, data: &Dataset, mut on_step: F) -> Result<Vec<StepStats>>
    where
        F: FnMut(&Self, &StepStats) -> Result<()>,
    {
        let mut all = Vec::new();
        while self.step < self.cfg.max_steps {
            let s = self.step(data)?;
            on_step(self, &s)?;
            all.push(s);
        }
        Ok(all)
    }
}

/// Line-per-step metrics as plain text and CSV.
pub struct MetricsLog<A, B> {
    text: A,
    csv: B,
    header_written: bool,
}

impl<A: Write, B: Write> MetricsLog<A, B> {
    pub fn new(text: A, csv: B) -> Self {
        Self {
            text,
            csv,
            header_written: false,
        }
    }

    pub fn record(&mut self, s: &StepStats) -> Result<()> {
        if !self.header_written {
            let blocks: Vec<String> = (1..=s.ponder_per_block.len()).map(|b| format!("ponder_block{b}")).collect();
            writeln!(
                self.csv,
                "step,loss,cross_entropy,ponder,accuracy,learning_rate,{}",
                blocks.join(",")
            )?;
            self.header_written = true;
        }
        let per_block: Vec<String> = s.ponder_per_block.iter().map(|p| format!("{p:.6}")).collect();
        writeln!(
            self.csv,
            "{},{:.8},{:.8},{:.6},{:.6},{},{}",
            s.step,
            s.loss,
            s.cross_entropy,
            s.ponder,
            s.accuracy,
            s.learning_rate,
            per_block.join(",")
        )?;
        writeln!(
            self.text,
            "step {:>6}  loss {:.5}  ce {:.5}  ponder {:.3}  acc {:.3}  per-block [{}]",
            s.step,
            s.loss,
            s.cross_entropy,
            s.ponder,
            s.accuracy,
            per_block.join(" ")
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.text.flush()?;
        self.csv.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    /// Predicted class per sample, in dataset order.
    pub predictions: Vec<usize>,
    /// Per-sample costs in dataset order.
    pub costs: CostReport,
}

/// Worker threads for evaluation from `IAMNN_THREADS`; defaults to 1.
pub fn threads_from_env() -> usize {
    std::env::var("IAMNN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

struct Shard {
    predictions: Vec<usize>,
    top1: usize,
    topk: usize,
    costs: CostReport,
}

fn eval_shard<T: Float>(
    net: &Network<T>,
    data: &Dataset,
    range: std::ops::Range<usize>,
    batch_size: usize,
    k: usize,
    convention: FlopConvention,
) -> Result<Shard> {
    let cfg = net.config();
    let mut shard = Shard {
        predictions: Vec::with_capacity(range.len()),
        top1: 0,
        topk: 0,
        costs: CostReport::empty(cfg, convention),
    };
    let mut start = range.start;
    while start < range.end {
        let len = batch_size.min(range.end - start);
        let images = data.images().slice_outer(start, len)?.cast::<T>();
        let labels = &data.labels()[start..start + len];
        let ids = &data.ids()[start..start + len];
        let pred = net.predict(&images)?;
        let classes = pred.logits.shape()[1];
        for (row, &label) in pred.logits.data().chunks(classes).zip(labels) {
            let target = row[label];
            let rank = row.iter().filter(|&&v| v > target).count();
            let top = argmax(row);
            shard.predictions.push(top);
            shard.top1 += usize::from(top == label);
            shard.topk += usize::from(rank < k);
        }
        let report = attach_costs(&pred.traces, ids, cfg, convention)?;
        shard.costs = std::mem::replace(&mut shard.costs, CostReport::empty(cfg, convention)).merge(report)?;
        start += len;
    }
    Ok(shard)
}

/// Eval-mode accuracy and per-sample cost over `data`, sharded over
/// `threads` workers with results merged in dataset order.
pub fn evaluate<T: Float>(
    net: &Network<T>,
    data: &Dataset,
    batch_size: usize,
    k: usize,
    convention: FlopConvention,
    threads: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation on an empty dataset".into()));
    }
    if data.sample_shape() != net.config().input_shape {
        return Err(Error::shape("evaluate", &data.sample_shape(), &net.config().input_shape));
    }
    let n = data.len();
    let threads = threads.clamp(1, n);
    let per = n.div_ceil(threads);
    let bs = batch_size.max(1);
    let ranges: Vec<_> = (0..threads).map(|t| (t * per).min(n)..((t + 1) * per).min(n)).collect();
    let shards: Vec<Result<Shard>> = if threads == 1 {
        vec![eval_shard(net, data, 0..n, bs, k, convention)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = ranges
                .iter()
                .cloned()
                .map(|r| s.spawn(move || eval_shard(net, data, r, bs, k, convention)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut costs = CostReport::empty(net.config(), convention);
    let (mut top1, mut topk) = (0, 0);
    let mut predictions = Vec::with_capacity(n);
    for shard in shards {
        let shard = shard?;
        top1 += shard.top1;
        topk += shard.topk;
        predictions.extend(shard.predictions);
        costs = costs.merge(shard.costs)?;
    }
    Ok(EvalReport {
        top1: top1 as f64 / n as f64,
        topk: topk as f64 / n as f64,
        k,
        predictions,
        costs,
    })
}
