//! Analytic size and cost of the reference ResNets. Nothing here is ever
//! instantiated; the layer list only feeds the counters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{sum_flops, CostOp, FlopConvention};
use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    ResNet18,
    ResNet101,
    ResNet152,
}

impl Reference {
    pub const ALL: [Reference; 3] = [Reference::ResNet18, Reference::ResNet101, Reference::ResNet152];

    /// Residual units per stage.
    pub fn units(self) -> [usize; 4] {
        match self {
            Reference::ResNet18 => [2, 2, 2, 2],
            Reference::ResNet101 => [3, 4, 23, 3],
            Reference::ResNet152 => [3, 8, 36, 3],
        }
    }

    pub fn bottleneck(self) -> bool {
        !matches!(self, Reference::ResNet18)
    }

    pub fn name(self) -> &'static str {
        match self {
            Reference::ResNet18 => "resnet18",
            Reference::ResNet101 => "resnet101",
            Reference::ResNet152 => "resnet152",
        }
    }
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Reference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Reference::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown reference `{s}` (resnet18|resnet101|resnet152)")))
    }
}

/// Inputs up to this size get the small-image stem (3×3 stride 1, no
/// max-pool) instead of 7×7 stride 2 + max-pool.
pub const SMALL_INPUT_MAX: usize = 64;

struct Layer {
    op: CostOp,
    params: u64,
}

fn conv(c_in: usize, c_out: usize, k: usize, out: usize) -> Layer {
    Layer {
        op: CostOp::Conv {
            c_in,
            c_out,
            k,
            out_h: out,
            out_w: out,
        },
        params: (c_in * c_out * k * k) as u64,
    }
}

fn bn(c: usize, hw: usize) -> Layer {
    Layer {
        op: CostOp::BatchNorm { elements: c * hw * hw },
        params: 2 * c as u64,
    }
}

fn elementwise(elements: usize) -> Layer {
    Layer {
        op: CostOp::Elementwise { elements },
        params: 0,
    }
}

fn layers(reference: Reference, input_size: usize, num_classes: usize) -> Vec<Layer> {
    let mut out = Vec::new();
    let small = input_size <= SMALL_INPUT_MAX;
    let mut hw = if small {
        out.push(conv(3, 64, 3, input_size));
        out.push(bn(64, input_size));
        out.push(elementwise(64 * input_size * input_size));
        input_size
    } else {
        let s = (input_size + 2 * 3 - 7) / 2 + 1;
        out.push(conv(3, 64, 7, s));
        out.push(bn(64, s));
        out.push(elementwise(64 * s * s));
        let p = (s + 2 - 3) / 2 + 1;
        out.push(Layer {
            op: CostOp::Pool {
                window: 9,
                out_elements: 64 * p * p,
            },
            params: 0,
        });
        p
    };
    let expansion = if reference.bottleneck() { 4 } else { 1 };
    let mut c_in = 64;
    for (stage, &units) in reference.units().iter().enumerate() {
        let width = 64 << stage;
        let c_out = width * expansion;
        for unit in 0..units {
            let stride = if stage > 0 && unit == 0 { 2 } else { 1 };
            let out_hw = (hw - 1) / stride + 1;
            if reference.bottleneck() {
                // stride sits on the 3×3 conv
                out.push(conv(c_in, width, 1, hw));
                out.push(bn(width, hw));
                out.push(elementwise(width * hw * hw));
                out.push(conv(width, width, 3, out_hw));
                out.push(bn(width, out_hw));
                out.push(elementwise(width * out_hw * out_hw));
                out.push(conv(width, c_out, 1, out_hw));
                out.push(bn(c_out, out_hw));
            } else {
                out.push(conv(c_in, width, 3, out_hw));
                out.push(bn(width, out_hw));
                out.push(elementwise(width * out_hw * out_hw));
                out.push(conv(width, c_out, 3, out_hw));
                out.push(bn(c_out, out_hw));
            }
            if stride != 1 || c_in != c_out {
                out.push(conv(c_in, c_out, 1, out_hw));
                out.push(bn(c_out, out_hw));
            }
            // residual add + ReLU
            out.push(elementwise(c_out * out_hw * out_hw));
            out.push(elementwise(c_out * out_hw * out_hw));
            c_in = c_out;
            hw = out_hw;
        }
    }
    out.push(Layer {
        op: CostOp::Pool {
            window: hw * hw,
            out_elements: c_in,
        },
        params: 0,
    });
    out.push(Layer {
        op: CostOp::Linear {
            fan_in: c_in,
            fan_out: num_classes,
        },
        params: (c_in * num_classes + num_classes) as u64,
    });
    out
}

/// Trainable parameters of the reference network (BN affine included,
/// running statistics excluded).
pub fn count_params_resnet(reference: Reference, num_classes: usize, input_size: usize) -> u64 {
    layers(reference, input_size, num_classes).iter().map(|l| l.params).sum()
}

/// Per-sample FLOPs of the reference network at a square input.
pub fn count_flops_resnet(
    reference: Reference,
    input_size: usize,
    num_classes: usize,
    convention: FlopConvention,
) -> u64 {
    let ops: Vec<CostOp> = layers(reference, input_size, num_classes).iter().map(|l| l.op).collect();
    sum_flops(&ops, convention)
}
