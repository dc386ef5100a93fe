//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! preset = desk                 # desk | imagenet | cifar10 | cifar100, applied first
//! input.size = 16               # or input.height / input.width
//! num_classes = 5
//! blocks.channels = 16,32,32,64
//! blocks.max_iterations = 2,2,2,2
//! train.optimizer = adam
//! data.noise = alternating 0.6
//! ```
//!
//! Every key is listed in [`KEYS`]. Unknown keys are rejected with their line
//! number. [`RunConfig::to_text`] writes every key explicitly and parses back
//! to an equal config.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::block::{Activation, BlockConfig};
use crate::data::{CifarVariant, NoiseSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::training::{LrSchedule, OptimizerKind, TrainConfig};

/// Recognized keys with a one-line description each.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "desk | imagenet | cifar10 | cifar100; base values, applied before other keys"),
    ("input.channels", "input channels"),
    ("input.height", "input height"),
    ("input.width", "input width"),
    ("input.size", "sets input.height and input.width"),
    ("num_classes", "classifier outputs"),
    ("stem.kernel", "stem conv kernel size"),
    ("stem.stride", "stem conv stride"),
    ("stem.channels", "stem conv output channels"),
    ("stem.maxpool", "true | false; 3x3 stride-2 max-pool after the stem"),
    ("blocks.channels", "comma list, block widths C"),
    ("blocks.max_iterations", "comma list, iteration caps M"),
    ("blocks.bottleneck", "comma list, bottleneck widths (default C/4)"),
    ("act.hidden", "halting head hidden width; one value or one per block"),
    ("act.epsilon", "halting threshold slack, in (0, 1); one value or one per block"),
    ("act.activation", "relu | tanh; halting head nonlinearity; one value or one per block"),
    ("act.init_bias", "initial halting output bias; one value or one per block"),
    ("train.optimizer", "sgd_momentum | adam"),
    ("train.learning_rate", "base learning rate"),
    ("train.schedule", "constant | step"),
    ("train.lr_step_every", "steps between decays (step schedule)"),
    ("train.lr_step_factor", "decay factor (step schedule)"),
    ("train.momentum", "SGD momentum"),
    ("train.beta1", "Adam beta1"),
    ("train.beta2", "Adam beta2"),
    ("train.adam_epsilon", "Adam epsilon"),
    ("train.weight_decay", "L2 coefficient"),
    ("train.batch_size", "samples per step"),
    ("train.max_steps", "training steps"),
    ("train.act_tau", "ponder penalty coefficient, >= 0"),
    ("train.seed", "initialization, batch order and augmentation seed"),
    ("train.checkpoint_every", "steps between checkpoints, 0 = final only"),
    ("train.augment", "true | false; random flip and pad-4 crop"),
    ("data.source", "synthetic | cifar10 | cifar100"),
    ("data.classes", "synthetic classes"),
    ("data.image_size", "synthetic image side"),
    ("data.channels", "synthetic image channels"),
    ("data.samples_per_class", "synthetic training samples per class"),
    ("data.val_samples_per_class", "synthetic validation samples per class"),
    ("data.noise", "constant L | alternating L | per_class L1,L2,..."),
    ("data.contrast", "synthetic pattern amplitude scale, in (0, 1]"),
    ("data.seed", "synthetic generation seed"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Cifar(CifarVariant),
}

impl DataSource {
    pub fn name(self) -> &'static str {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Cifar(v) => v.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Training set spec when `source` is synthetic.
    pub synthetic: SyntheticSpec,
    /// Validation set size; generated from `synthetic.seed + 1`.
    pub val_samples_per_class: usize,
}

impl DataConfig {
    /// Synthetic data shaped for `net`.
    pub fn synthetic_for(net: &NetConfig) -> Self {
        let mut spec = SyntheticSpec::new(net.num_classes, net.input_shape[1], 64);
        spec.channels = net.input_shape[0];
        Self {
            source: DataSource::Synthetic,
            synthetic: spec,
            val_samples_per_class: 16,
        }
    }

    pub fn validation_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            samples_per_class: self.val_samples_per_class,
            seed: self.synthetic.seed.wrapping_add(1),
            ..self.synthetic.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("desk").expect("known preset")
    }
}

fn preset_net(name: &str) -> Option<(NetConfig, DataSource)> {
    match name {
        "desk" => Some((NetConfig::desk(), DataSource::Synthetic)),
        "imagenet" => Some((NetConfig::imagenet(), DataSource::Synthetic)),
        "cifar10" => Some((NetConfig::cifar(10), DataSource::Cifar(CifarVariant::Cifar10))),
        "cifar100" => Some((NetConfig::cifar(100), DataSource::Cifar(CifarVariant::Cifar100))),
        _ => None,
    }
}

struct Entry<'a> {
    key: &'a str,
    value: &'a str,
    line: usize,
}

fn bad(e: &Entry<'_>, what: &str) -> Error {
    Error::Config(format!("line {}: `{}`: {what}, got `{}`", e.line, e.key, e.value))
}

fn num<T: FromStr>(e: &Entry<'_>) -> Result<T> {
    e.value.parse().map_err(|_| bad(e, "expected a number"))
}

fn list<T: FromStr>(e: &Entry<'_>) -> Result<Vec<T>> {
    e.value
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| bad(e, "expected a comma-separated list of numbers")))
        .collect()
}

/// One value for every block, or a comma list with one value per block.
fn per_block<T: Clone>(e: &Entry<'_>, count: usize, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    let v: Vec<T> = e
        .value
        .split(',')
        .map(|s| parse(s.trim()).ok_or_else(|| bad(e, &format!("cannot parse `{}`", s.trim()))))
        .collect::<Result<_>>()?;
    match v.len() {
        1 => Ok(vec![v[0].clone(); count]),
        n if n == count => Ok(v),
        n => Err(bad(e, &format!("expected 1 or {count} entries, got {n}"))),
    }
}

/// Writes a single value when every block agrees.
fn join_uniform<T: PartialEq + ToString>(v: impl Iterator<Item = T>) -> String {
    let v: Vec<T> = v.collect();
    if v.windows(2).all(|w| w[0] == w[1]) {
        v[0].to_string()
    } else {
        v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

fn boolean(e: &Entry<'_>) -> Result<bool> {
    match e.value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(e, "expected true or false")),
    }
}

fn noise(e: &Entry<'_>) -> Result<NoiseSpec> {
    let mut parts = e.value.split_whitespace();
    let (mode, arg) = match (parts.next(), parts.next(), parts.next()) {
        (Some(v), None, None) => ("constant", v),
        (Some(m), Some(a), None) => (m, a),
        _ => return Err(bad(e, "expected `constant L`, `alternating L` or `per_class L1,L2,..`")),
    };
    let level = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(e, "expected a noise level"));
    match mode {
        "constant" => Ok(NoiseSpec::Constant(level(arg)?)),
        "alternating" => Ok(NoiseSpec::Alternating(level(arg)?)),
        "per_class" => Ok(NoiseSpec::PerClass(arg.split(',').map(level).collect::<Result<_>>()?)),
        _ => Err(bad(e, "unknown noise mode")),
    }
}

fn noise_text(n: &NoiseSpec) -> String {
    match n {
        NoiseSpec::Constant(l) => format!("constant {l}"),
        NoiseSpec::Alternating(l) => format!("alternating {l}"),
        NoiseSpec::PerClass(v) => format!(
            "per_class {}",
            v.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
        ),
    }
}

fn join<T: ToString>(v: impl Iterator<Item = T>) -> String {
    v.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (net, source) = preset_net(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
        let mut data = DataConfig::synthetic_for(&net);
        data.source = source;
        Ok(Self {
            net,
            train: TrainConfig::default(),
            data,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(Error::UnknownKey {
                    key: key.to_string(),
                    line: i + 1,
                });
            }
            if entries.iter().any(|e: &Entry<'_>| e.key == key) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", i + 1)));
            }
            entries.push(Entry {
                key,
                value: value.trim(),
                line: i + 1,
            });
        }
        let mut cfg = match entries.iter().find(|e| e.key == "preset") {
            Some(e) => Self::preset(e.value).map_err(|_| bad(e, "unknown preset"))?,
            None => Self::default(),
        };
        let mut data_shape_set = false;
        for e in entries.iter().filter(|e| e.key != "preset") {
            cfg.apply(e, &mut data_shape_set)?;
        }
        cfg.apply_block_lists(&entries)?;
        if !data_shape_set {
            // synthetic data follows the network unless given explicitly
            cfg.data.synthetic.num_classes = cfg.net.num_classes;
            cfg.data.synthetic.image_size = cfg.net.input_shape[1];
            cfg.data.synthetic.channels = cfg.net.input_shape[0];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, e: &Entry<'_>, data_shape_set: &mut bool) -> Result<()> {
        let net = &mut self.net;
        let t = &mut self.train;
        let d = &mut self.data;
        match e.key {
            "input.channels" => net.input_shape[0] = num(e)?,
            "input.height" => net.input_shape[1] = num(e)?,
            "input.width" => net.input_shape[2] = num(e)?,
            "input.size" => {
                let s = num(e)?;
                net.input_shape[1] = s;
                net.input_shape[2] = s;
            }
            "num_classes" => net.num_classes = num(e)?,
            "stem.kernel" => net.stem.kernel = num(e)?,
            "stem.stride" => net.stem.stride = num(e)?,
            "stem.channels" => net.stem.out_channels = num(e)?,
            "stem.maxpool" => net.stem.use_maxpool = boolean(e)?,
            "blocks.channels" | "blocks.max_iterations" | "blocks.bottleneck" => {}
            "act.hidden" | "act.epsilon" | "act.activation" | "act.init_bias" => {}
            "train.optimizer" => {
                t.optimizer = OptimizerKind::parse(e.value).ok_or_else(|| bad(e, "expected sgd_momentum or adam"))?
            }
            "train.learning_rate" => t.learning_rate = num(e)?,
            "train.schedule" => {
                t.schedule = match e.value {
                    "constant" => LrSchedule::Constant,
                    "step" => match t.schedule {
                        s @ LrSchedule::Step { .. } => s,
                        LrSchedule::Constant => LrSchedule::Step { every: 1000, factor: 0.1 },
                    },
                    _ => return Err(bad(e, "expected constant or step")),
                }
            }
            "train.lr_step_every" | "train.lr_step_factor" => {}
            "train.momentum" => t.momentum = num(e)?,
            "train.beta1" => t.beta1 = num(e)?,
            "train.beta2" => t.beta2 = num(e)?,
            "train.adam_epsilon" => t.adam_epsilon = num(e)?,
            "train.weight_decay" => t.weight_decay = num(e)?,
            "train.batch_size" => t.batch_size = num(e)?,
            "train.max_steps" => t.max_steps = num(e)?,
            "train.act_tau" => t.act_tau = num(e)?,
            "train.seed" => t.seed = num(e)?,
            "train.checkpoint_every" => t.checkpoint_every = num(e)?,
            "train.augment" => t.augment = boolean(e)?,
            "data.source" => {
                d.source = match e.value {
                    "synthetic" => DataSource::Synthetic,
                    "cifar10" => DataSource::Cifar(CifarVariant::Cifar10),
                    "cifar100" => DataSource::Cifar(CifarVariant::Cifar100),
                    _ => return Err(bad(e, "expected synthetic, cifar10 or cifar100")),
                }
            }
            "data.classes" => {
                d.synthetic.num_classes = num(e)?;
                *data_shape_set = true;
            }
            "data.image_size" => {
                d.synthetic.image_size = num(e)?;
                *data_shape_set = true;
            }
            "data.channels" => {
                d.synthetic.channels = num(e)?;
                *data_shape_set = true;
            }
            "data.samples_per_class" => d.synthetic.samples_per_class = num(e)?,
            "data.val_samples_per_class" => d.val_samples_per_class = num(e)?,
            "data.noise" => d.synthetic.noise = noise(e)?,
            "data.contrast" => d.synthetic.contrast = num(e)?,
            "data.seed" => d.synthetic.seed = num(e)?,
            other => unreachable!("key table and match disagree on `{other}`"),
        }
        Ok(())
    }

    /// Block lists and the step-schedule pair depend on each other, so they
    /// are applied after the scalar keys.
    fn apply_block_lists(&mut self, entries: &[Entry<'_>]) -> Result<()> {
        let find = |k: &str| entries.iter().find(|e| e.key == k);
        if let LrSchedule::Step { every, factor } = &mut self.train.schedule {
            if let Some(e) = find("train.lr_step_every") {
                *every = num(e)?;
            }
            if let Some(e) = find("train.lr_step_factor") {
                *factor = num(e)?;
            }
        }
        let channels: Option<Vec<usize>> = find("blocks.channels").map(list).transpose()?;
        let caps: Option<Vec<usize>> = find("blocks.max_iterations").map(list).transpose()?;
        let bottleneck: Option<Vec<usize>> = find("blocks.bottleneck").map(list).transpose()?;
        let count = channels
            .as_ref()
            .or(caps.as_ref())
            .map_or(self.net.blocks.len(), Vec::len);
        for (key, v) in [
            ("blocks.channels", &channels),
            ("blocks.max_iterations", &caps),
            ("blocks.bottleneck", &bottleneck),
        ] {
            if let Some(v) = v {
                if v.len() != count {
                    let e = find(key).expect("present");
                    return Err(bad(e, &format!("expected {count} entries")));
                }
            }
        }
        if count != self.net.blocks.len() {
            let template = self.net.blocks.last().cloned().unwrap_or_else(|| BlockConfig::new(16, 1));
            self.net.blocks.resize(count, template);
        }
        for (i, b) in self.net.blocks.iter_mut().enumerate() {
            if let Some(c) = &channels {
                b.channels = c[i];
                b.bottleneck_channels = (c[i] / 4).max(1);
            }
            if let Some(m) = &caps {
                b.max_iterations = m[i];
            }
            if let Some(r) = &bottleneck {
                b.bottleneck_channels = r[i];
            }
        }
        let blocks = &mut self.net.blocks;
        if let Some(e) = find("act.hidden") {
            let v = per_block(e, count, |s| s.parse().ok())?;
            blocks.iter_mut().zip(v).for_each(|(b, v)| b.act_hidden = v);
        }
        if let Some(e) = find("act.epsilon") {
            let v = per_block(e, count, |s| s.parse().ok())?;
            blocks.iter_mut().zip(v).for_each(|(b, v)| b.act_epsilon = v);
        }
        if let Some(e) = find("act.activation") {
            let v = per_block(e, count, Activation::parse)?;
            blocks.iter_mut().zip(v).for_each(|(b, v)| b.act_activation = v);
        }
        if let Some(e) = find("act.init_bias") {
            let v = per_block(e, count, |s| s.parse().ok())?;
            blocks.iter_mut().zip(v).for_each(|(b, v)| b.act_init_bias = v);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        match self.data.source {
            DataSource::Synthetic => {
                self.data.synthetic.validate()?;
                let s = &self.data.synthetic;
                if [s.channels, s.image_size, s.image_size] != self.net.input_shape || s.num_classes != self.net.num_classes {
                    return Err(Error::Config(format!(
                        "synthetic data ({}x{}x{}, {} classes) does not match the network input {:?} with {} classes",
                        s.channels, s.image_size, s.image_size, s.num_classes, self.net.input_shape, self.net.num_classes
                    )));
                }
            }
            DataSource::Cifar(v) => {
                if self.net.input_shape != [3, 32, 32] || self.net.num_classes != v.num_classes() {
                    return Err(Error::Config(format!(
                        "{} needs a 3x32x32 input and {} classes",
                        v.name(),
                        v.num_classes()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every key, explicitly; parses back to `self`.
    pub fn to_text(&self) -> String {
        let n = &self.net;
        let t = &self.train;
        let d = &self.data;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("input.channels", n.input_shape[0].to_string());
        kv("input.height", n.input_shape[1].to_string());
        kv("input.width", n.input_shape[2].to_string());
        kv("num_classes", n.num_classes.to_string());
        kv("stem.kernel", n.stem.kernel.to_string());
        kv("stem.stride", n.stem.stride.to_string());
        kv("stem.channels", n.stem.out_channels.to_string());
        kv("stem.maxpool", n.stem.use_maxpool.to_string());
        kv("blocks.channels", join(n.blocks.iter().map(|b| b.channels)));
        kv("blocks.max_iterations", join(n.blocks.iter().map(|b| b.max_iterations)));
        kv("blocks.bottleneck", join(n.blocks.iter().map(|b| b.bottleneck_channels)));
        kv("act.hidden", join_uniform(n.blocks.iter().map(|b| b.act_hidden)));
        kv("act.epsilon", join_uniform(n.blocks.iter().map(|b| b.act_epsilon)));
        kv("act.activation", join_uniform(n.blocks.iter().map(|b| b.act_activation.name())));
        kv("act.init_bias", join_uniform(n.blocks.iter().map(|b| b.act_init_bias)));
        kv("train.optimizer", t.optimizer.name().to_string());
        kv("train.learning_rate", t.learning_rate.to_string());
        match t.schedule {
            LrSchedule::Constant => kv("train.schedule", "constant".into()),
            LrSchedule::Step { every, factor } => {
                kv("train.schedule", "step".into());
                kv("train.lr_step_every", every.to_string());
                kv("train.lr_step_factor", factor.to_string());
            }
        }
        kv("train.momentum", t.momentum.to_string());
        kv("train.beta1", t.beta1.to_string());
        kv("train.beta2", t.beta2.to_string());
        kv("train.adam_epsilon", t.adam_epsilon.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.max_steps", t.max_steps.to_string());
        kv("train.act_tau", t.act_tau.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("train.augment", t.augment.to_string());
        kv("data.source", d.source.name().to_string());
        kv("data.classes", d.synthetic.num_classes.to_string());
        kv("data.image_size", d.synthetic.image_size.to_string());
        kv("data.channels", d.synthetic.channels.to_string());
        kv("data.samples_per_class", d.synthetic.samples_per_class.to_string());
        kv("data.val_samples_per_class", d.val_samples_per_class.to_string());
        kv("data.noise", noise_text(&d.synthetic.noise));
        kv("data.contrast", d.synthetic.contrast.to_string());
        kv("data.seed", d.synthetic.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        match RunConfig::parse("num_classes = 10\n\nblocks.widths = 1,2\n") {
            Err(Error::UnknownKey { key, line }) => {
                assert_eq!(key, "blocks.widths");
                assert_eq!(line, 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let cfg = RunConfig::parse(
            "# small task\npreset = desk\ninput.size = 16\nnum_classes = 5\nblocks.max_iterations = 1,1,1,1\ndata.noise = alternating 0.6\n",
        )
        .unwrap();
        assert_eq!(cfg.net.input_shape, [3, 16, 16]);
        assert_eq!(cfg.net.max_iterations(), vec![1, 1, 1, 1]);
        assert_eq!(cfg.data.synthetic.num_classes, 5);
        assert_eq!(cfg.data.synthetic.image_size, 16);
        assert_eq!(cfg.data.synthetic.noise, NoiseSpec::Alternating(0.6));
    }

    #[test]
    fn changing_widths_resets_bottleneck() {
        let cfg = RunConfig::parse("blocks.channels = 8,8\nblocks.max_iterations = 3,1\n").unwrap();
        assert_eq!(cfg.net.blocks.len(), 2);
        assert_eq!(cfg.net.blocks[0].bottleneck_channels, 2);
        assert_eq!(cfg.net.blocks[1].max_iterations, 1);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::parse("train.act_tau = -1").is_err());
        assert!(RunConfig::parse("blocks.channels = 8,8\nblocks.max_iterations = 1,1,1").is_err());
        assert!(RunConfig::parse("stem.maxpool = maybe").is_err());
        assert!(RunConfig::parse("num_classes = 3\nnum_classes = 4").is_err());
        assert!(RunConfig::parse("just text").is_err());
    }

    #[test]
    fn act_keys_take_one_value_or_one_per_block() {
        let cfg = RunConfig::parse("act.hidden = 8\nact.init_bias = 1,-1,0,2\n").unwrap();
        assert!(cfg.net.blocks.iter().all(|b| b.act_hidden == 8));
        let biases: Vec<f64> = cfg.net.blocks.iter().map(|b| b.act_init_bias).collect();
        assert_eq!(biases, [1.0, -1.0, 0.0, 2.0]);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(RunConfig::parse("act.hidden = 8,8").is_err());
    }

    #[test]
    fn step_schedule_round_trips() {
        let cfg = RunConfig::parse("train.schedule = step\ntrain.lr_step_every = 50\ntrain.lr_step_factor = 0.5").unwrap();
        assert_eq!(cfg.train.schedule, LrSchedule::Step { every: 50, factor: 0.5 });
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn presets_parse() {
        for p in ["desk", "imagenet", "cifar10", "cifar100"] {
            let cfg = RunConfig::parse(&format!("preset = {p}")).unwrap();
            assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn every_key_is_documented_once() {
        let mut keys: Vec<_> = KEYS.iter().map(|(k, _)| *k).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), KEYS.len());
    }
}
