mod common;

use common::runs::{desk_task, train};
use iamnn_core::block::names;
use iamnn_core::cost::{count_flops, Iterations};
use iamnn_core::{evaluate, gen_synthetic, FlopConvention, Network};

#[test]
fn memorization_loss_falls_over_most_windows() {
    let cfg = desk_task(
        "num_classes = 8\ndata.samples_per_class = 8\ntrain.optimizer = sgd_momentum\ntrain.learning_rate = 0.05\n\
         train.batch_size = 64\ntrain.max_steps = 50\ntrain.seed = 2\ndata.seed = 2",
    );
    let (_, stats) = train(&cfg);
    let loss: Vec<f64> = stats.iter().map(|s| s.loss).collect();
    let windows = loss.len() - 10;
    let falling = (0..windows).filter(|&i| loss[i + 10] < loss[i]).count();
    assert!(falling * 5 >= windows * 4, "{falling}/{windows} windows fell: {loss:?}");
}

#[test]
fn saturated_halting_trains_as_a_plain_network() {
    let cfg = desk_task(
        "act.init_bias = 20\ntrain.act_tau = 0\ntrain.max_steps = 60\ntrain.seed = 3\ndata.seed = 3\ndata.noise = constant 0.3",
    );
    let (trainer, stats) = train(&cfg);
    assert!(stats.iter().all(|s| s.ponder_per_block.iter().all(|&p| p == 2.0)));
    let early: f64 = stats[..10].iter().map(|s| s.loss).sum();
    let late: f64 = stats[50..].iter().map(|s| s.loss).sum();
    assert!(late < early, "loss did not fall: {early} -> {late}");

    let data = gen_synthetic(&cfg.data.synthetic).unwrap();
    let ev = evaluate(&trainer.net, &data, 64, 1, FlopConvention::MacAsTwo, 1).unwrap();
    let one = count_flops(&cfg.net, &Iterations::Min, FlopConvention::MacAsTwo).unwrap().total;
    assert_eq!(ev.costs.min(), one);
    assert_eq!(ev.costs.max(), one);
    assert_eq!(ev.costs.mean(), one as f64);
    for h in &ev.costs.histograms {
        assert_eq!(h[0], data.len());
    }
}

#[test]
fn forced_single_iteration_matches_analytic_cost() {
    let cfg = desk_task("input.size = 32");
    let mut net = Network::<f32>::new(cfg.net.clone(), 9).unwrap();
    for b in 1..=cfg.net.blocks.len() {
        net.store_mut().param_mut(&names::act_bias(b, 3)).unwrap().data_mut()[0] = 20.0;
    }
    let data = gen_synthetic(&cfg.data.synthetic).unwrap();
    let ev = evaluate(&net, &data, 50, 3, FlopConvention::MacAsTwo, 2).unwrap();
    let one = count_flops(&cfg.net, &Iterations::Min, FlopConvention::MacAsTwo).unwrap().total;
    assert!(ev.costs.samples.iter().all(|s| s.flops == one && s.iterations.iter().all(|&n| n == 1)));
    assert!(ev.topk >= ev.top1);
}

#[test]
fn heavier_ponder_penalty_uses_fewer_iterations() {
    for seed in 1..=3 {
        let mean_n = |tau: f64| {
            let cfg = desk_task(&format!(
                "train.act_tau = {tau}\ntrain.max_steps = 120\ntrain.seed = {seed}\ndata.seed = {seed}\n\
                 data.noise = alternating 0.6\ndata.contrast = 0.2"
            ));
            let (trainer, _) = train(&cfg);
            let data = gen_synthetic(&cfg.data.synthetic).unwrap();
            let ev = evaluate(&trainer.net, &data, 100, 1, FlopConvention::MacAsTwo, 1).unwrap();
            let per_block = ev.costs.mean_iterations();
            per_block.iter().sum::<f64>() / per_block.len() as f64
        };
        let (free, heavy) = (mean_n(0.0), mean_n(1.0));
        assert!(heavy < free, "seed {seed}: tau=1 mean N {heavy}, tau=0 mean N {free}");
    }
}

#[test]
fn evaluation_is_independent_of_thread_count() {
    let cfg = desk_task("train.max_steps = 5\ntrain.seed = 4\ndata.seed = 4");
    let (trainer, _) = train(&cfg);
    let data = gen_synthetic(&cfg.data.synthetic).unwrap();
    let one = evaluate(&trainer.net, &data, 32, 2, FlopConvention::MacAsTwo, 1).unwrap();
    let four = evaluate(&trainer.net, &data, 32, 2, FlopConvention::MacAsTwo, 4).unwrap();
    assert_eq!(one, four);
}
