//! Weight-shared iterative residual networks with adaptive computation time.
//!
//! The crate carries its own small tensor and reverse-mode autodiff engine,
//! the iterative block and its halting rule, a four-block classifier, analytic
//! parameter and FLOP counters, a CIFAR/synthetic data pipeline, and training
//! with binary checkpoints.

pub mod block;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod network;
pub mod params;
pub mod resnet;
pub mod tensor;
pub mod training;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};
pub use config::RunConfig;
pub use data::{gen_synthetic, load_cifar_binary, CifarVariant, Dataset, NoiseSpec, SyntheticSpec};
pub use block::{halting_rule, Activation, BlockConfig, Halting, HaltingTrace};
pub use cost::{attach_costs, count_flops, CostReport, FlopConvention, FlopsBreakdown, Iterations};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use network::{count_params, NetConfig, Network, ParamBreakdown, StemConfig};
pub use params::ParamStore;
pub use resnet::{count_flops_resnet, count_params_resnet, Reference};
pub use tensor::{DType, Float, Tensor};
pub use training::{evaluate, total_loss, train_step, EvalReport, OptimizerKind, OptimizerState, StepStats, TrainConfig, Trainer};
