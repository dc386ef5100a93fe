//! Analytic FLOP accounting.
//!
//! Counting rules, applied identically to the iterative network and the
//! reference ResNets:
//!
//! | op                     | cost                                 |
//! |------------------------|--------------------------------------|
//! | conv                   | `f · Cout·Cin·K²·H'·W'`              |
//! | linear                 | `f · in·out`                         |
//! | batch norm             | `2 · elements`                       |
//! | ReLU, add, scale, sigm | `elements`                           |
//! | pooling                | `window · output elements`           |
//!
//! where `f` is 2 under [`FlopConvention::MacAsTwo`] (the default) and 1
//! under [`FlopConvention::MultiplyAdd`], the convention in which published
//! ResNet figures are quoted.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::block::HaltingTrace;
use crate::error::{Error, Result};
use crate::network::NetConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One multiply-accumulate counts as two FLOPs.
    #[default]
    MacAsTwo,
    /// One multiply-accumulate counts as one operation.
    MultiplyAdd,
}

impl FlopConvention {
    pub fn mac_factor(self) -> u64 {
        match self {
            FlopConvention::MacAsTwo => 2,
            FlopConvention::MultiplyAdd => 1,
        }
    }
}

/// A costed primitive. Spatial sizes are per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostOp {
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        out_h: usize,
        out_w: usize,
    },
    Linear {
        fan_in: usize,
        fan_out: usize,
    },
    BatchNorm {
        elements: usize,
    },
    /// ReLU, elementwise add, per-sample scaling, sigmoid.
    Elementwise {
        elements: usize,
    },
    Pool {
        window: usize,
        out_elements: usize,
    },
}

impl CostOp {
    pub fn macs(&self) -> u64 {
        match *self {
            CostOp::Conv {
                c_in,
                c_out,
                k,
                out_h,
                out_w,
            } => (c_out * c_in * k * k * out_h * out_w) as u64,
            CostOp::Linear { fan_in, fan_out } => (fan_in * fan_out) as u64,
            _ => 0,
        }
    }

    pub fn flops(&self, conv: FlopConvention) -> u64 {
        match *self {
            CostOp::Conv { .. } | CostOp::Linear { .. } => conv.mac_factor() * self.macs(),
            CostOp::BatchNorm { elements } => 2 * elements as u64,
            CostOp::Elementwise { elements } => elements as u64,
            CostOp::Pool {
                window,
                out_elements,
            } => (window * out_elements) as u64,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, CostOp::Conv { .. })
    }
}

pub(crate) fn sum_flops(ops: &[CostOp], conv: FlopConvention) -> u64 {
    ops.iter().map(|op| op.flops(conv)).sum()
}

fn conv_macs(ops: &[CostOp]) -> u64 {
    ops.iter().filter(|op| op.is_conv()).map(CostOp::macs).sum()
}

/// Iteration counts to cost a network at.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Iterations {
    /// One iteration per block.
    Min,
    /// `M_b` iterations per block.
    Max,
    PerBlock(Vec<usize>),
}

/// Per-sample FLOPs of one forward pass, by where they are spent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub convention: FlopConvention,
    pub iterations: Vec<usize>,
    pub stem: u64,
    /// Entry projection of each block (once per block).
    pub entry: Vec<u64>,
    /// Cost of one iteration of each block's processing path.
    pub block_iteration: Vec<u64>,
    /// Cost of one evaluation of each block's halting head.
    pub act_iteration: Vec<u64>,
    /// `N_b · block_iteration[b]`.
    pub blocks: Vec<u64>,
    /// `N_b · act_iteration[b]`.
    pub act_head: Vec<u64>,
    /// Max-pooling between blocks.
    pub transitions: u64,
    pub classifier: u64,
    /// Convolution multiply-accumulates at these iteration counts.
    pub conv_macs: u64,
    pub total: u64,
}

/// Cost ops of each network stage, per sample.
pub(crate) struct NetCostOps {
    pub stem: Vec<CostOp>,
    pub entry: Vec<Vec<CostOp>>,
    pub iteration: Vec<Vec<CostOp>>,
    pub act: Vec<Vec<CostOp>>,
    pub transitions: Vec<CostOp>,
    pub classifier: Vec<CostOp>,
}

pub(crate) fn net_cost_ops(cfg: &NetConfig) -> Result<NetCostOps> {
    let plan = cfg.spatial_plan()?;
    let stem_k = cfg.stem.kernel;
    let (sh, sw) = plan.stem_conv;
    let c0 = cfg.stem.out_channels;
    let mut stem = vec![
        CostOp::Conv {
            c_in: cfg.input_shape[0],
            c_out: c0,
            k: stem_k,
            out_h: sh,
            out_w: sw,
        },
        CostOp::BatchNorm { elements: c0 * sh * sw },
        CostOp::Elementwise { elements: c0 * sh * sw },
    ];
    if cfg.stem.use_maxpool {
        let (ph, pw) = plan.blocks[0];
        stem.push(CostOp::Pool {
            window: 9,
            out_elements: c0 * ph * pw,
        });
    }
    let mut entry = Vec::new();
    let mut iteration = Vec::new();
    let mut act = Vec::new();
    let mut transitions = Vec::new();
    let mut c_in = c0;
    for (bi, block) in cfg.blocks.iter().enumerate() {
        let (h, w) = plan.blocks[bi];
        let hw = h * w;
        let c = block.channels;
        let b = block.bottleneck_channels;
        let conv = |ci, co, k| CostOp::Conv {
            c_in: ci,
            c_out: co,
            k,
            out_h: h,
            out_w: w,
        };
        entry.push(vec![
            conv(c_in, c, 1),
            CostOp::BatchNorm { elements: c * hw },
            CostOp::Elementwise { elements: c * hw },
        ]);
        iteration.push(vec![
            conv(2 * c, b, 1),
            CostOp::BatchNorm { elements: b * hw },
            CostOp::Elementwise { elements: b * hw },
            conv(b, b, 3),
            CostOp::BatchNorm { elements: b * hw },
            CostOp::Elementwise { elements: b * hw },
            conv(b, c, 1),
            CostOp::BatchNorm { elements: c * hw },
            // s_i = s_{i-1} + f_i
            CostOp::Elementwise { elements: c * hw },
            // y += w_i · s_i
            CostOp::Elementwise { elements: c * hw },
            CostOp::Elementwise { elements: c * hw },
        ]);
        let hid = block.act_hidden;
        act.push(vec![
            CostOp::Pool {
                window: hw,
                out_elements: 3 * c,
            },
            CostOp::Linear {
                fan_in: 3 * c,
                fan_out: hid,
            },
            CostOp::Elementwise { elements: hid },
            CostOp::Linear {
                fan_in: hid,
                fan_out: hid,
            },
            CostOp::Elementwise { elements: hid },
            CostOp::Linear { fan_in: hid, fan_out: 1 },
            CostOp::Elementwise { elements: 1 },
        ]);
        if bi + 1 < cfg.blocks.len() {
            let (nh, nw) = plan.blocks[bi + 1];
            transitions.push(CostOp::Pool {
                window: 4,
                out_elements: c * nh * nw,
            });
        }
        c_in = c;
    }
    let (lh, lw) = *plan.blocks.last().expect("non-empty");
    let classifier = vec![
        CostOp::Pool {
            window: lh * lw,
            out_elements: c_in,
        },
        CostOp::Linear {
            fan_in: c_in,
            fan_out: cfg.num_classes,
        },
    ];
    Ok(NetCostOps {
        stem,
        entry,
        iteration,
        act,
        transitions,
        classifier,
    })
}

/// Per-sample FLOPs of `cfg` at the given iteration counts.
pub fn count_flops(cfg: &NetConfig, iterations: &Iterations, convention: FlopConvention) -> Result<FlopsBreakdown> {
    let ops = net_cost_ops(cfg)?;
    let caps: Vec<usize> = cfg.blocks.iter().map(|b| b.max_iterations).collect();
    let n = match iterations {
        Iterations::Min => vec![1; caps.len()],
        Iterations::Max => caps.clone(),
        Iterations::PerBlock(n) => {
            if n.len() != caps.len() {
                return Err(Error::Contract(format!(
                    "{} iteration counts for {} blocks",
                    n.len(),
                    caps.len()
                )));
            }
            if let Some((b, (&nb, &m))) = n.iter().zip(&caps).enumerate().find(|(_, (&nb, &m))| nb == 0 || nb > m) {
                return Err(Error::Contract(format!(
                    "block {} iteration count {nb} outside [1, {m}]",
                    b + 1
                )));
            }
            n.clone()
        }
    };
    let stem = sum_flops(&ops.stem, convention);
    let entry: Vec<u64> = ops.entry.iter().map(|o| sum_flops(o, convention)).collect();
    let block_iteration: Vec<u64> = ops.iteration.iter().map(|o| sum_flops(o, convention)).collect();
    let act_iteration: Vec<u64> = ops.act.iter().map(|o| sum_flops(o, convention)).collect();
    let blocks: Vec<u64> = block_iteration.iter().zip(&n).map(|(&c, &nb)| c * nb as u64).collect();
    let act_head: Vec<u64> = act_iteration.iter().zip(&n).map(|(&c, &nb)| c * nb as u64).collect();
    let transitions = sum_flops(&ops.transitions, convention);
    let classifier = sum_flops(&ops.classifier, convention);
    let conv_macs = conv_macs(&ops.stem)
        + ops.entry.iter().map(|o| conv_macs(o)).sum::<u64>()
        + ops
            .iteration
            .iter()
            .zip(&n)
            .map(|(o, &nb)| conv_macs(o) * nb as u64)
            .sum::<u64>();
    let total = stem
        + entry.iter().sum::<u64>()
        + blocks.iter().sum::<u64>()
        + act_head.iter().sum::<u64>()
        + transitions
        + classifier;
    Ok(FlopsBreakdown {
        convention,
        iterations: n,
        stem,
        entry,
        block_iteration,
        act_iteration,
        blocks,
        act_head,
        transitions,
        classifier,
        conv_macs,
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleCost {
    pub id: u64,
    pub iterations: Vec<usize>,
    pub flops: u64,
}

/// Per-sample costs with aggregates and per-block iteration histograms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: FlopConvention,
    pub samples: Vec<SampleCost>,
    /// `histograms[b][n - 1]` = samples that used `n` iterations in block `b`.
    pub histograms: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub convention: FlopConvention,
    pub samples: usize,
    pub min_flops: u64,
    pub mean_flops: f64,
    pub max_flops: u64,
    pub mean_iterations: Vec<f64>,
    pub histograms: Vec<Vec<usize>>,
}

impl CostReport {
    pub fn empty(cfg: &NetConfig, convention: FlopConvention) -> Self {
        Self {
            convention,
            samples: Vec::new(),
            histograms: cfg.blocks.iter().map(|b| vec![0; b.max_iterations]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn min(&self) -> u64 {
        self.samples.iter().map(|s| s.flops).min().unwrap_or(0)
    }

    pub fn max(&self) -> u64 {
        self.samples.iter().map(|s| s.flops).max().unwrap_or(0)
    }

    pub fn mean(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.flops as f64).sum::<f64>() / self.samples.len() as f64
    }

    pub fn mean_iterations(&self) -> Vec<f64> {
        let nb = self.histograms.len();
        let mut acc = vec![0.0; nb];
        for s in &self.samples {
            for (a, &n) in acc.iter_mut().zip(&s.iterations) {
                *a += n as f64;
            }
        }
        acc.iter().map(|a| a / self.samples.len().max(1) as f64).collect()
    }

    /// Concatenates `other` after `self`. Associative.
    pub fn merge(mut self, other: CostReport) -> Result<Self> {
        if self.convention != other.convention || self.histograms.len() != other.histograms.len() {
            return Err(Error::Contract("merging incompatible cost reports".into()));
        }
        for (a, b) in self.histograms.iter_mut().zip(&other.histograms) {
            if a.len() != b.len() {
                return Err(Error::Contract("merging incompatible cost reports".into()));
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.samples.extend(other.samples);
        Ok(self)
    }

    pub fn summary(&self) -> CostSummary {
        CostSummary {
            convention: self.convention,
            samples: self.samples.len(),
            min_flops: self.min(),
            mean_flops: self.mean(),
            max_flops: self.max(),
            mean_iterations: self.mean_iterations(),
            histograms: self.histograms.clone(),
        }
    }

    /// One row per sample: `id, n_block1.., flops`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let nb = self.histograms.len();
        let mut header = vec!["id".to_string()];
        header.extend((1..=nb).map(|b| format!("n_block{b}")));
        header.push("flops".into());
        writeln!(out, "{}", header.join(","))?;
        for s in &self.samples {
            let mut row = vec![s.id.to_string()];
            row.extend(s.iterations.iter().map(|n| n.to_string()));
            row.push(s.flops.to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("plain data serializes")
    }
}

/// Costs each sample from its halting traces. `traces[b][s]` is the trace
/// of sample `s` in block `b`.
pub fn attach_costs(
    traces: &[Vec<HaltingTrace>],
    ids: &[u64],
    cfg: &NetConfig,
    convention: FlopConvention,
) -> Result<CostReport> {
    if traces.len() != cfg.blocks.len() {
        return Err(Error::Contract(format!(
            "traces for {} blocks, config has {}",
            traces.len(),
            cfg.blocks.len()
        )));
    }
    if traces.iter().any(|t| t.len() != ids.len()) {
        return Err(Error::Contract("trace/sample count mismatch".into()));
    }
    // Total is affine in N, so cost each sample from the per-iteration terms.
    let base = count_flops(cfg, &Iterations::Min, convention)?;
    let fixed = base.total - base.blocks.iter().sum::<u64>() - base.act_head.iter().sum::<u64>();
    let per_iter: Vec<u64> = base
        .block_iteration
        .iter()
        .zip(&base.act_iteration)
        .map(|(a, b)| a + b)
        .collect();
    let mut report = CostReport::empty(cfg, convention);
    for (s, &id) in ids.iter().enumerate() {
        let n: Vec<usize> = traces.iter().map(|t| t[s].n_iters).collect();
        let mut flops = fixed;
        for (b, &nb) in n.iter().enumerate() {
            let cap = cfg.blocks[b].max_iterations;
            if nb == 0 || nb > cap {
                return Err(Error::Contract(format!("block {} used {nb} of {cap} iterations", b + 1)));
            }
            flops += per_iter[b] * nb as u64;
            report.histograms[b][nb - 1] += 1;
        }
        report.samples.push(SampleCost {
            id,
            iterations: n,
            flops,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_flops_count_both_conventions() {
        let op = CostOp::Conv {
            c_in: 1,
            c_out: 1,
            k: 3,
            out_h: 4,
            out_w: 4,
        };
        assert_eq!(op.flops(FlopConvention::MacAsTwo), 288);
        assert_eq!(op.flops(FlopConvention::MultiplyAdd), 144);
    }

    #[test]
    fn elementwise_rules() {
        let c = FlopConvention::MacAsTwo;
        assert_eq!(CostOp::BatchNorm { elements: 10 }.flops(c), 20);
        assert_eq!(CostOp::Elementwise { elements: 10 }.flops(c), 10);
        assert_eq!(CostOp::Pool { window: 4, out_elements: 10 }.flops(c), 40);
        assert_eq!(CostOp::Linear { fan_in: 3, fan_out: 5 }.flops(c), 30);
    }

    #[test]
    fn doubling_iterations_doubles_block_component() {
        let mut cfg = NetConfig::desk();
        for b in &mut cfg.blocks {
            b.max_iterations = 4;
        }
        let c = FlopConvention::MacAsTwo;
        let one = count_flops(&cfg, &Iterations::PerBlock(vec![1, 2, 1, 2]), c).unwrap();
        let two = count_flops(&cfg, &Iterations::PerBlock(vec![2, 4, 2, 4]), c).unwrap();
        for (a, b) in one.blocks.iter().zip(&two.blocks) {
            assert_eq!(2 * a, *b);
        }
        assert_eq!(one.stem, two.stem);
        assert_eq!(one.classifier, two.classifier);
    }

    #[test]
    fn rejects_out_of_range_iterations() {
        let cfg = NetConfig::desk();
        let c = FlopConvention::MacAsTwo;
        assert!(count_flops(&cfg, &Iterations::PerBlock(vec![0, 1, 1, 1]), c).is_err());
        assert!(count_flops(&cfg, &Iterations::PerBlock(vec![3, 1, 1, 1]), c).is_err());
        assert!(count_flops(&cfg, &Iterations::PerBlock(vec![1, 1, 1]), c).is_err());
    }

    #[test]
    fn degenerate_distribution() {
        let cfg = NetConfig::desk();
        let trace = crate::block::halting_rule(&[0.999], 2, 0.01).unwrap();
        let traces = vec![vec![trace; 3]; 4];
        let r = attach_costs(&traces, &[0, 1, 2], &cfg, FlopConvention::MacAsTwo).unwrap();
        assert_eq!(r.min(), r.max());
        assert_eq!(r.mean(), r.min() as f64);
        let min = count_flops(&cfg, &Iterations::Min, FlopConvention::MacAsTwo).unwrap();
        assert_eq!(r.min(), min.total);
        assert!(r.histograms.iter().all(|h| h.iter().sum::<usize>() == 3));
    }

    #[test]
    fn mismatched_traces_rejected() {
        let cfg = NetConfig::desk();
        let trace = crate::block::halting_rule(&[0.999], 2, 0.01).unwrap();
        let traces = vec![vec![trace; 3]; 3];
        assert!(attach_costs(&traces, &[0, 1, 2], &cfg, FlopConvention::MacAsTwo).is_err());
    }

    #[test]
    fn csv_has_one_row_per_sample() {
        let cfg = NetConfig::desk();
        let trace = crate::block::halting_rule(&[0.999], 2, 0.01).unwrap();
        let traces = vec![vec![trace; 2]; 4];
        let r = attach_costs(&traces, &[7, 9], &cfg, FlopConvention::MacAsTwo).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "id,n_block1,n_block2,n_block3,n_block4,flops");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("7,1,1,1,1,"));
    }
}
