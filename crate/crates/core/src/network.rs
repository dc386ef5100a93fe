//! Stem, four iterative blocks with max-pool downsampling, classifier head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{block_forward, init_block, BlockConfig, HaltingTrace};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{add_batch_norm, Access, Init, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
    /// 3×3 stride-2 max-pool after the stem conv.
    pub use_maxpool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub stem: StemConfig,
    pub blocks: Vec<BlockConfig>,
}

/// Spatial extents along the network, per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialPlan {
    pub stem_conv: (usize, usize),
    /// Input extent of each block.
    pub blocks: Vec<(usize, usize)>,
}

impl NetConfig {
    fn with_blocks(input_shape: [usize; 3], num_classes: usize, stem: StemConfig, widths: &[usize], caps: &[usize]) -> Self {
        Self {
            input_shape,
            num_classes,
            stem,
            blocks: widths
                .iter()
                .zip(caps)
                .map(|(&c, &m)| BlockConfig::new(c, m))
                .collect(),
        }
    }

    /// Small CPU-trainable network for 32×32 inputs.
    pub fn desk() -> Self {
        Self::with_blocks(
            [3, 32, 32],
            10,
            StemConfig {
                kernel: 3,
                stride: 1,
                out_channels: 16,
                use_maxpool: false,
            },
            &[16, 32, 32, 64],
            &[2, 2, 2, 2],
        )
    }

    /// 224×224 network with ResNet152's iteration caps.
    pub fn imagenet() -> Self {
        Self::with_blocks(
            [3, 224, 224],
            1000,
            StemConfig {
                kernel: 7,
                stride: 2,
                out_channels: 64,
                use_maxpool: true,
            },
            &[256, 512, 768, 1024],
            &[3, 8, 36, 3],
        )
    }

    /// 32×32 network with ResNet101's iteration caps.
    pub fn cifar(num_classes: usize) -> Self {
        Self::with_blocks(
            [3, 32, 32],
            num_classes,
            StemConfig {
                kernel: 3,
                stride: 1,
                out_channels: 64,
                use_maxpool: false,
            },
            &[256, 512, 768, 1024],
            &[3, 4, 23, 3],
        )
    }

    pub fn max_iterations(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.max_iterations).collect()
    }

    pub fn spatial_plan(&self) -> Result<SpatialPlan> {
        let [_, h, w] = self.input_shape;
        let k = self.stem.kernel;
        let pad = k / 2;
        if k == 0 || self.stem.stride == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::Config(format!(
                "stem kernel {k} does not fit a {h}x{w} input"
            )));
        }
        let conv = |x: usize| (x + 2 * pad - k) / self.stem.stride + 1;
        let stem_conv = (conv(h), conv(w));
        let mut cur = stem_conv;
        if self.stem.use_maxpool {
            if cur.0 < 2 || cur.1 < 2 {
                return Err(Error::Config("spatial underflow at stem max-pool".into()));
            }
            cur = ((cur.0 - 1) / 2 + 1, (cur.1 - 1) / 2 + 1);
        }
        let mut blocks = vec![cur];
        for i in 1..self.blocks.len() {
            if cur.0 < 2 || cur.1 < 2 {
                return Err(Error::Config(format!(
                    "spatial underflow: {}x{} input to the pool before block {}",
                    cur.0,
                    cur.1,
                    i + 1
                )));
            }
            cur = (cur.0 / 2, cur.1 / 2);
            blocks.push(cur);
        }
        Ok(SpatialPlan { stem_conv, blocks })
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("at least one block is required".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.input_shape.contains(&0) || self.stem.out_channels == 0 {
            return Err(Error::Config("zero-sized input or stem".into()));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        self.spatial_plan().map(|_| ())
    }
}

/// Trainable-parameter counts by component.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    /// Processing-block convs, one copy per block regardless of `M`.
    pub shared_conv: u64,
    /// Entry projection conv + BN of each block.
    pub entry: u64,
    /// Per-iteration BN affine parameters, `M` sets per block.
    pub per_iter_bn: u64,
    pub act_heads: u64,
    pub stem: u64,
    pub head: u64,
    pub total: u64,
}

/// Closed-form parameter count; allocates nothing.
pub fn count_params(cfg: &NetConfig) -> ParamBreakdown {
    let mut p = ParamBreakdown::default();
    let k = cfg.stem.kernel as u64;
    let c0 = cfg.stem.out_channels as u64;
    p.stem = k * k * cfg.input_shape[0] as u64 * c0 + 2 * c0;
    let mut c_in = c0;
    for b in &cfg.blocks {
        let c = b.channels as u64;
        let r = b.bottleneck_channels as u64;
        let h = b.act_hidden as u64;
        p.entry += c_in * c + 2 * c;
        p.shared_conv += 2 * c * r + 9 * r * r + r * c;
        p.per_iter_bn += b.max_iterations as u64 * 2 * (r + r + c);
        p.act_heads += (3 * c * h + h) + (h * h + h) + (h + 1);
        c_in = c;
    }
    p.head = c_in * cfg.num_classes as u64 + cfg.num_classes as u64;
    p.total = p.shared_conv + p.entry + p.per_iter_bn + p.act_heads + p.stem + p.head;
    p
}

/// Per-iteration BN parameters of one block: what one more unit of `M` adds.
pub fn per_iteration_bn_params(block: &BlockConfig) -> u64 {
    2 * (2 * block.bottleneck_channels + block.channels) as u64
}

pub mod names {
    pub const STEM_CONV: &str = "stem.conv.weight";
    pub const STEM_BN: &str = "stem.bn";
    pub const HEAD_WEIGHT: &str = "head.weight";
    pub const HEAD_BIAS: &str = "head.bias";
}

/// Allocates every parameter of `cfg` with seeded initialization.
pub fn init_params<T: Float>(cfg: &NetConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let k = cfg.stem.kernel;
    let cin = cfg.input_shape[0];
    let c0 = cfg.stem.out_channels;
    store.insert_param(
        names::STEM_CONV,
        Init::HeNormal(cin * k * k).sample(&[c0, cin, k, k], &mut rng),
    )?;
    add_batch_norm(&mut store, names::STEM_BN, c0)?;
    let mut c_in = c0;
    for (i, b) in cfg.blocks.iter().enumerate() {
        init_block(&mut store, i + 1, c_in, b, &mut rng)?;
        c_in = b.channels;
    }
    store.insert_param(
        names::HEAD_WEIGHT,
        Init::FanInUniform(c_in).sample(&[cfg.num_classes, c_in], &mut rng),
    )?;
    store.insert_param(names::HEAD_BIAS, Tensor::zeros(&[cfg.num_classes]))?;
    Ok(store)
}

pub struct NetOutput {
    pub logits: Var,
    /// `traces[b][s]`: sample `s` in block `b`.
    pub traces: Vec<Vec<HaltingTrace>>,
    /// `[B]` remainder per block.
    pub remainders: Vec<Var>,
}

/// Full forward pass over `input[B, C, H, W]`.
pub fn net_forward<T: Float>(
    g: &mut Graph<T>,
    access: &mut Access<'_, T>,
    cfg: &NetConfig,
    input: Var,
) -> Result<NetOutput> {
    let (_, c, h, w) = g.value(input).dims4()?;
    if [c, h, w] != cfg.input_shape {
        return Err(Error::shape("net_forward", g.shape(input), &cfg.input_shape));
    }
    let ws = access.param(g, names::STEM_CONV)?;
    let mut x = g.conv2d(input, ws, cfg.stem.stride, cfg.stem.kernel / 2)?;
    x = access.batch_norm(g, x, names::STEM_BN, None)?;
    x = g.relu(x);
    if cfg.stem.use_maxpool {
        x = g.max_pool(x, 3, 2, 1)?;
    }
    let mut traces = Vec::with_capacity(cfg.blocks.len());
    let mut remainders = Vec::with_capacity(cfg.blocks.len());
    for (i, b) in cfg.blocks.iter().enumerate() {
        if i > 0 {
            x = g.maxpool2x2(x)?;
        }
        let out = block_forward(g, access, i + 1, b, x)?;
        x = out.y;
        traces.push(out.traces);
        remainders.push(out.remainder);
    }
    let pooled = g.global_avg_pool(x)?;
    let hw = access.param(g, names::HEAD_WEIGHT)?;
    let hb = access.param(g, names::HEAD_BIAS)?;
    let logits = g.linear(pooled, hw, Some(hb))?;
    Ok(NetOutput {
        logits,
        traces,
        remainders,
    })
}

/// Eval-mode output of [`Network::predict`].
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub logits: Tensor<T>,
    pub traces: Vec<Vec<HaltingTrace>>,
}

impl<T: Float> Prediction<T> {
    pub fn argmax(&self) -> Vec<usize> {
        let k = self.logits.shape()[1];
        self.logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }

    /// `N` per block for sample `s`.
    pub fn iterations(&self, s: usize) -> Vec<usize> {
        self.traces.iter().map(|t| t[s].n_iters).collect()
    }
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    cfg: NetConfig,
    store: ParamStore<T>,
}

impl<T: Float> Network<T> {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        let store = init_params(&cfg, seed)?;
        Ok(Self { cfg, store })
    }

    /// Checks that `store` holds exactly the tensors `cfg` calls for.
    pub fn from_parts(cfg: NetConfig, store: ParamStore<T>) -> Result<Self> {
        let reference = init_params::<T>(&cfg, 0)?;
        check_layout(&reference, &store)?;
        Ok(Self { cfg, store })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn into_parts(self) -> (NetConfig, ParamStore<T>) {
        (self.cfg, self.store)
    }

    /// Training-mode forward on `g` (batch statistics, running-stat update).
    pub fn forward_train(&mut self, g: &mut Graph<T>, input: Var) -> Result<NetOutput> {
        let mut access = Access::train(&mut self.store);
        net_forward(g, &mut access, &self.cfg, input)
    }

    /// Eval-mode forward on `g` (running statistics, early exit).
    pub fn forward_eval(&self, g: &mut Graph<T>, input: Var) -> Result<NetOutput> {
        let mut access = Access::eval(&self.store);
        net_forward(g, &mut access, &self.cfg, input)
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward_eval(&mut g, x)?;
        Ok(Prediction {
            logits: g.value(out.logits).clone(),
            traces: out.traces,
        })
    }
}

pub(crate) fn check_layout<T: Float>(expected: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    let pairs = [
        (expected.params().collect::<Vec<_>>(), got.params().collect::<Vec<_>>()),
        (expected.buffers().collect::<Vec<_>>(), got.buffers().collect::<Vec<_>>()),
    ];
    for (exp, have) in pairs {
        if exp.len() != have.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                exp.len(),
                have.len()
            )));
        }
        for ((en, et), (gn, gt)) in exp.iter().zip(&have) {
            if en != gn {
                return Err(Error::Checkpoint(format!("expected tensor `{en}`, found `{gn}`")));
            }
            if et.shape() != gt.shape() {
                return Err(Error::CheckpointShape {
                    name: en.to_string(),
                    expected: et.shape().to_vec(),
                    got: gt.shape().to_vec(),
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_logits_shape() {
        let net = Network::<f32>::new(NetConfig::desk(), 0).unwrap();
        let x = Tensor::zeros(&[2, 3, 32, 32]);
        let p = net.predict(&x).unwrap();
        assert_eq!(p.logits.shape(), &[2, 10]);
        assert_eq!(p.traces.len(), 4);
        assert!(p.traces.iter().all(|t| t.len() == 2));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = Network::<f32>::new(NetConfig::desk(), 0).unwrap();
        assert!(net.predict(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
    }

    #[test]
    fn spatial_underflow_is_a_config_error() {
        let mut cfg = NetConfig::desk();
        cfg.input_shape = [3, 4, 4];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(Network::<f32>::new(cfg, 0).is_err());
        let mut ok = NetConfig::desk();
        ok.input_shape = [3, 8, 8];
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn single_conv_parameter_count() {
        // 3×3 conv, 2 → 4 channels, no bias
        assert_eq!(crate::cost::CostOp::Conv { c_in: 2, c_out: 4, k: 3, out_h: 1, out_w: 1 }.macs(), 72);
        let mut store = ParamStore::<f32>::new();
        store.insert_param("w", Tensor::zeros(&[4, 2, 3, 3])).unwrap();
        assert_eq!(store.num_scalars(), 72);
    }

    #[test]
    fn closed_form_matches_store() {
        for cfg in [NetConfig::desk(), NetConfig::cifar(10)] {
            let store = init_params::<f32>(&cfg, 1).unwrap();
            assert_eq!(count_params(&cfg).total, store.num_scalars() as u64);
        }
    }

    #[test]
    fn one_more_iteration_adds_one_bn_set() {
        let mut cfg = NetConfig::desk();
        let before = count_params(&cfg);
        cfg.blocks[2].max_iterations += 1;
        let after = count_params(&cfg);
        assert_eq!(after.total - before.total, per_iteration_bn_params(&cfg.blocks[2]));
        assert_eq!(after.shared_conv, before.shared_conv);
    }

    #[test]
    fn layout_check_names_the_tensor() {
        let cfg = NetConfig::desk();
        let mut other = cfg.clone();
        other.blocks[0].channels = 8;
        other.blocks[0].bottleneck_channels = 2;
        let store = init_params::<f32>(&other, 0).unwrap();
        match Network::from_parts(cfg, store) {
            Err(Error::CheckpointShape { name, .. }) => assert_eq!(name, "block1.entry.conv.weight"),
            other => panic!("unexpected {:?}", other.err()),
        }
    }
}
