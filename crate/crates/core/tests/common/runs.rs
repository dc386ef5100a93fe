//! Short training scenarios shared by the acceptance and property suites.

use iamnn_core::{evaluate, gen_synthetic, FlopConvention, Network, RunConfig, StepStats, Trainer};

/// 16×16 synthetic task on the desk network, 5 classes of 100 samples
/// unless `extra` says otherwise. Keys in `extra` replace the defaults.
pub fn desk_task(extra: &str) -> RunConfig {
    let defaults = "preset = desk\ninput.size = 16\nnum_classes = 5\ndata.samples_per_class = 100\n\
                    train.optimizer = adam\ntrain.learning_rate = 0.003\ntrain.batch_size = 32";
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = defaults
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(extra);
    RunConfig::parse(&text).expect("scenario config")
}

pub fn train(cfg: &RunConfig) -> (Trainer<f32>, Vec<StepStats>) {
    let data = gen_synthetic(&cfg.data.synthetic).unwrap();
    let net = Network::<f32>::new(cfg.net.clone(), cfg.train.seed).unwrap();
    let mut trainer = Trainer::new(net, cfg.train.clone()).unwrap();
    let stats = trainer.run(&data, |_, _| Ok(())).unwrap();
    (trainer, stats)
}

/// Half the training samples noisy, low-contrast patterns, ponder penalty on.
pub fn adaptivity_config(seed: u64, m: usize) -> RunConfig {
    desk_task(&format!(
        "blocks.max_iterations = {m},{m},{m},{m}\ntrain.max_steps = 400\ntrain.act_tau = 0.05\n\
         train.seed = {seed}\ndata.noise = alternating 0.6\ndata.contrast = 0.2\ndata.seed = {seed}\n\
         data.val_samples_per_class = 16"
    ))
}

#[derive(Clone, Debug)]
pub struct AdaptivityRun {
    pub clean_flops: f64,
    pub noisy_flops: f64,
    pub min_flops: u64,
    pub max_flops: u64,
    pub val_top1: f64,
}

/// 10 classes, every sample noisy; used for the iteration-count ablation.
pub fn ablation_config(seed: u64, m: usize) -> RunConfig {
    desk_task(&format!(
        "num_classes = 10\nblocks.max_iterations = {m},{m},{m},{m}\ntrain.max_steps = 600\ntrain.act_tau = 0.01\n\
         train.seed = {seed}\ndata.samples_per_class = 200\ndata.noise = constant 0.5\ndata.contrast = 0.3\n\
         data.seed = {seed}\ndata.val_samples_per_class = 100"
    ))
}

pub fn adaptivity_run(seed: u64, m: usize) -> AdaptivityRun {
    measured_run(&adaptivity_config(seed, m))
}

/// Trains `cfg`, then measures per-sample costs on the training set and
/// accuracy on the validation set.
pub fn measured_run(cfg: &RunConfig) -> AdaptivityRun {
    let cfg = cfg.clone();
    let (trainer, _) = train(&cfg);
    let data = gen_synthetic(&cfg.data.synthetic).unwrap();
    let ev = evaluate(&trainer.net, &data, 100, 1, FlopConvention::MacAsTwo, 1).unwrap();
    let (mut clean, mut noisy) = ((0.0, 0usize), (0.0, 0usize));
    for (s, &level) in ev.costs.samples.iter().zip(data.noise_levels()) {
        let bucket = if level > 0.0 { &mut noisy } else { &mut clean };
        bucket.0 += s.flops as f64;
        bucket.1 += 1;
    }
    let val = gen_synthetic(&cfg.data.validation_spec())
        .and_then(|v| v.with_normalization(data.normalization().clone()))
        .unwrap();
    let vev = evaluate(&trainer.net, &val, 100, 1, FlopConvention::MacAsTwo, 1).unwrap();
    AdaptivityRun {
        clean_flops: clean.0 / clean.1 as f64,
        noisy_flops: noisy.0 / noisy.1 as f64,
        min_flops: ev.costs.min(),
        max_flops: ev.costs.max(),
        val_top1: vev.top1,
    }
}
