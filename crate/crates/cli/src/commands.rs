use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use iamnn_core::config::DataSource;
use iamnn_core::data::{load_cifar_dir, Split};
use iamnn_core::training::{threads_from_env, MetricsLog};
use iamnn_core::{
    count_flops, count_flops_resnet, count_params, count_params_resnet, evaluate, gen_synthetic, load_checkpoint,
    load_checkpoint_for, save_checkpoint, Checkpoint, Dataset, EvalReport, FlopConvention, Iterations, Network,
    Reference, RunConfig, Trainer,
};
use serde_json::{json, Value};

use crate::error::CliError;
use crate::{Common, CountArgs, EvalArgs, SplitArg, TrainArgs};

const EVAL_BATCH: usize = 100;
const CONVENTIONS: [FlopConvention; 2] = [FlopConvention::MacAsTwo, FlopConvention::MultiplyAdd];

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    match &common.config {
        Some(p) if !p.is_file() => Err(CliError::Usage(format!("config file {} not found", p.display()))),
        Some(p) => Ok(RunConfig::from_file(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Training and test splits; the test split shares the training
/// normalization.
fn datasets(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<(Dataset, Dataset), CliError> {
    let (train, test) = match cfg.data.source {
        DataSource::Synthetic => {
            let train = gen_synthetic(&cfg.data.synthetic)?;
            let test = gen_synthetic(&cfg.data.validation_spec())?.with_normalization(train.normalization().clone())?;
            (train, test)
        }
        DataSource::Cifar(variant) => {
            let dir = data_dir.ok_or_else(|| {
                CliError::Usage(format!("data.source = {} needs --data-dir", variant.name()))
            })?;
            if !dir.is_dir() {
                return Err(CliError::Usage(format!("data directory {} does not exist", dir.display())));
            }
            for split in [Split::Train, Split::Test] {
                for f in variant.files(split) {
                    let path = dir.join(f);
                    if !path.is_file() {
                        return Err(CliError::Usage(format!("dataset file {} not found", path.display())));
                    }
                }
            }
            let train = load_cifar_dir(dir, variant, Split::Train, None)?;
            let test = load_cifar_dir(dir, variant, Split::Test, Some(train.normalization().clone()))?;
            (train, test)
        }
    };
    if train.sample_shape() != cfg.net.input_shape {
        return Err(CliError::Usage(format!(
            "dataset samples are {:?} but the network expects {:?}",
            train.sample_shape(),
            cfg.net.input_shape
        )));
    }
    Ok((train, test))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(CliError::io(path))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    fs::write(path, text + "\n").map_err(CliError::io(path))
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|()| out.flush());
}

fn eval_json(report: &EvalReport, split: &str) -> Value {
    json!({
        "split": split,
        "samples": report.predictions.len(),
        "top1": report.top1,
        "topk": report.topk,
        "k": report.k,
        "cost": report.costs.summary(),
    })
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let resume = a.checkpoint.as_deref().map(load_checkpoint::<f32>).transpose()?;
    let mut cfg = match (&resume, &a.common.config) {
        (Some(ck), None) => ck.config.clone(),
        _ => load_config(&a.common)?,
    };
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
        cfg.data.synthetic.seed = seed;
    }
    if let Some(steps) = a.max_steps {
        cfg.train.max_steps = steps;
    }
    if let Some(tau) = a.tau {
        cfg.train.act_tau = tau;
    }
    cfg.validate()?;

    let (train_ds, test_ds) = datasets(&cfg, a.common.data_dir.as_deref())?;
    let mut trainer = match resume {
        Some(ck) => {
            let path = a.checkpoint.as_deref().expect("resume implies a path");
            if a.common.config.is_some() {
                load_checkpoint_for::<f32>(path, &cfg.net)?;
            }
            let mut t = ck.into_trainer()?;
            t.cfg = cfg.train.clone();
            t
        }
        None => Trainer::new(Network::<f32>::new(cfg.net.clone(), cfg.train.seed)?, cfg.train.clone())?,
    };

    create_dir(&a.out_dir)?;
    let mut log = MetricsLog::new(
        create(&a.out_dir.join("metrics.log"))?,
        create(&a.out_dir.join("metrics.csv"))?,
    );
    let every = cfg.train.checkpoint_every;
    let report_every = (cfg.train.max_steps / 20).max(1);
    let started = Instant::now();
    let stats = trainer.run(&train_ds, |t, s| {
        log.record(s)?;
        if every > 0 && t.step % every == 0 {
            save_checkpoint(
                &a.out_dir.join(format!("step-{:06}.ckpt", t.step)),
                &Checkpoint::from_trainer(t, &cfg),
            )?;
        }
        if s.step % report_every == 0 {
            eprintln!("step {:>6}  loss {:.4}  acc {:.3}", s.step, s.loss, s.accuracy);
        }
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&a.out_dir.join("final.ckpt"), &Checkpoint::from_trainer(&trainer, &cfg))?;

    let threads = threads_from_env();
    let train_eval = evaluate(&trainer.net, &train_ds, EVAL_BATCH, 1, FlopConvention::MacAsTwo, threads)?;
    let test_eval = evaluate(&trainer.net, &test_ds, EVAL_BATCH, 1, FlopConvention::MacAsTwo, threads)?;
    let summary = json!({
        "steps": trainer.step,
        "steps_this_run": stats.len(),
        "final_loss": stats.last().map(|s| s.loss),
        "train_top1": train_eval.top1,
        "test_top1": test_eval.top1,
        "test_cost": test_eval.costs.summary(),
        "parameters": count_params(&cfg.net),
        "elapsed_seconds": started.elapsed().as_secs_f64(),
    });
    write_json(&a.out_dir.join("summary.json"), &summary)?;
    emit(&(serde_json::to_string_pretty(&summary).expect("json values serialize") + "\n"));
    Ok(())
}

/// Checkpointed network, its configuration (checked against --config when
/// given) and the requested split.
fn load_for_eval(a: &EvalArgs) -> Result<(Network<f32>, RunConfig, Dataset), CliError> {
    let (ck, mut cfg) = match &a.common.config {
        Some(_) => {
            let cfg = load_config(&a.common)?;
            (load_checkpoint_for::<f32>(&a.checkpoint, &cfg.net)?, cfg)
        }
        None => {
            let ck = load_checkpoint::<f32>(&a.checkpoint)?;
            let cfg = ck.config.clone();
            (ck, cfg)
        }
    };
    if let Some(seed) = a.seed {
        cfg.data.synthetic.seed = seed;
    }
    let (train, test) = datasets(&cfg, a.common.data_dir.as_deref())?;
    let data = match a.split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    };
    Ok((ck.network, cfg, data))
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Test => "test",
    }
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let (net, _, data) = load_for_eval(a)?;
    let report = evaluate(&net, &data, EVAL_BATCH, a.top_k, FlopConvention::MacAsTwo, threads_from_env())?;
    let summary = eval_json(&report, split_name(a.split));
    if let Some(dir) = &a.out_dir {
        create_dir(dir)?;
        write_json(&dir.join("eval.json"), &summary)?;
        let mut w = create(&dir.join("costs.csv"))?;
        report.costs.write_csv(&mut w)?;
        w.flush().map_err(CliError::io(dir.join("costs.csv")))?;
    }
    emit(&(serde_json::to_string_pretty(&summary).expect("json values serialize") + "\n"));
    Ok(())
}

fn csv_error(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

pub fn analyze(a: &EvalArgs) -> Result<(), CliError> {
    let dir = a
        .out_dir
        .as_ref()
        .ok_or_else(|| CliError::Usage("analyze needs --out-dir".into()))?;
    let (net, cfg, data) = load_for_eval(a)?;
    let report = evaluate(&net, &data, EVAL_BATCH, a.top_k, FlopConvention::MacAsTwo, threads_from_env())?;
    create_dir(dir)?;

    for (b, hist) in report.costs.histograms.iter().enumerate() {
        let path = dir.join(format!("histogram_block{}.csv", b + 1));
        let mut w = csv::Writer::from_path(&path).map_err(csv_error(&path))?;
        w.write_record(["iterations", "samples"]).map_err(csv_error(&path))?;
        for (n, count) in hist.iter().enumerate() {
            w.write_record([(n + 1).to_string(), count.to_string()])
                .map_err(csv_error(&path))?;
        }
        w.flush().map_err(CliError::io(&path))?;
    }

    let blocks = cfg.net.blocks.len();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| report.costs.samples[i].flops);
    let path = dir.join("ranking.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_error(&path))?;
    let mut header = vec!["rank".to_string(), "id".into(), "label".into(), "predicted".into(), "noise_level".into()];
    header.extend((1..=blocks).map(|b| format!("n_block{b}")));
    header.push("flops".into());
    w.write_record(&header).map_err(csv_error(&path))?;
    for (rank, &i) in order.iter().enumerate() {
        let s = &report.costs.samples[i];
        let mut row = vec![
            rank.to_string(),
            s.id.to_string(),
            data.labels()[i].to_string(),
            report.predictions[i].to_string(),
            data.noise_levels()[i].to_string(),
        ];
        row.extend(s.iterations.iter().map(|n| n.to_string()));
        row.push(s.flops.to_string());
        w.write_record(&row).map_err(csv_error(&path))?;
    }
    w.flush().map_err(CliError::io(&path))?;

    let summary = eval_json(&report, split_name(a.split));
    write_json(&dir.join("summary.json"), &summary)?;
    emit(&(serde_json::to_string_pretty(&summary).expect("json values serialize") + "\n"));
    Ok(())
}

fn percent(part: u64, whole: u64) -> f64 {
    100.0 * (1.0 - part as f64 / whole as f64)
}

pub fn count(a: &CountArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = a.input_size {
        cfg.net.input_shape[1] = s;
        cfg.net.input_shape[2] = s;
    }
    cfg.net.validate()?;
    let reference = a.reference.as_deref().map(str::parse::<Reference>).transpose()?;
    let side = cfg.net.input_shape[1];
    let classes = cfg.net.num_classes;

    let params = count_params(&cfg.net);
    let mut flops = serde_json::Map::new();
    for conv in CONVENTIONS {
        let min = count_flops(&cfg.net, &Iterations::Min, conv)?;
        let max = count_flops(&cfg.net, &Iterations::Max, conv)?;
        flops.insert(
            conv_name(conv).into(),
            json!({ "min": min.total, "max": max.total, "min_act_head": min.act_head.iter().sum::<u64>(),
                    "max_act_head": max.act_head.iter().sum::<u64>() }),
        );
    }
    let mut out = json!({
        "input_shape": cfg.net.input_shape,
        "max_iterations": cfg.net.max_iterations(),
        "parameters": params,
        "flops": flops,
    });
    if let Some(r) = reference {
        let ref_params = count_params_resnet(r, classes, side);
        let mut ref_flops = serde_json::Map::new();
        for conv in CONVENTIONS {
            let total = count_flops_resnet(r, side, classes, conv);
            let ours = &out["flops"][conv_name(conv)];
            ref_flops.insert(
                conv_name(conv).into(),
                json!({
                    "total": total,
                    "reduction_at_min_percent": percent(ours["min"].as_u64().unwrap_or(0), total),
                    "reduction_at_max_percent": percent(ours["max"].as_u64().unwrap_or(0), total),
                }),
            );
        }
        out["reference"] = json!({
            "name": r.name(),
            "parameters": ref_params,
            "parameter_reduction_percent": percent(params.total, ref_params),
            "flops": ref_flops,
        });
    }

    emit(&(table(&out) + &serde_json::to_string_pretty(&out).expect("json values serialize") + "\n"));
    if let Some(dir) = &a.out_dir {
        create_dir(dir)?;
        write_json(&dir.join("count.json"), &out)?;
    }
    Ok(())
}

fn conv_name(c: FlopConvention) -> &'static str {
    match c {
        FlopConvention::MacAsTwo => "mac_as_two",
        FlopConvention::MultiplyAdd => "multiply_add",
    }
}

/// Human-readable rendering of the `count` JSON.
fn table(v: &Value) -> String {
    let mut s = String::new();
    let p = &v["parameters"];
    s += &format!("input {}  max iterations {}\n\n", v["input_shape"], v["max_iterations"]);
    s += "parameters\n";
    for key in ["stem", "entry", "shared_conv", "per_iter_bn", "act_heads", "head", "total"] {
        s += &format!("  {key:<14}{:>16}\n", p[key]);
    }
    s += &format!("\nflops per sample  {:>16}{:>16}\n", "mac_as_two", "multiply_add");
    for (label, key) in [("min (N = 1)", "min"), ("max (N = M)", "max")] {
        let f = &v["flops"];
        s += &format!(
            "  {label:<15}{:>16}{:>16}\n",
            f["mac_as_two"][key].to_string(),
            f["multiply_add"][key].to_string()
        );
    }
    if let Some(r) = v.get("reference") {
        s += &format!("\nreference {}\n", r["name"].as_str().unwrap_or(""));
        s += &format!(
            "  parameters     {:>16}   reduction {:.1}%\n",
            r["parameters"],
            r["parameter_reduction_percent"].as_f64().unwrap_or(0.0)
        );
        for conv in ["mac_as_two", "multiply_add"] {
            let f = &r["flops"][conv];
            s += &format!(
                "  flops {conv:<13}{:>12}   reduction {:.1}% (min) {:.1}% (max)\n",
                f["total"],
                f["reduction_at_min_percent"].as_f64().unwrap_or(0.0),
                f["reduction_at_max_percent"].as_f64().unwrap_or(0.0)
            );
        }
    }
    s.push('\n');
    s
}
