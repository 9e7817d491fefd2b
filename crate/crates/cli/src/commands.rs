use std::fmt::Write as _;

use anyhow::{bail, Result};
use serde::Serialize;
use serde_json::json;

use stablekd::data::stratified_subset;
use stablekd::instrument::experiments::{
    experiment_block_counts, experiment_fluctuation, experiment_head_distance, Backbones,
};
use stablekd::network::{checkpoint, insert_projectors};
use stablekd::oracle;
use stablekd::partition::Partition;
use stablekd::train::{accuracy, plan_stages, run_stablekd, run_supervised, run_vanilla_kd, Splits, StagePlan};
use stablekd::{ArchDescription, Dataset, Decomposition, Error, Network, RunOutput, StageSchedule, TrainConfig};

use crate::config::{load_network, ExperimentConfig};
use crate::output::{git_describe, RunDir};

/// Rates used when the config leaves `max_lr` out.
const DISTILL_LR: f64 = 0.5;
const BASELINE_LR: f64 = 0.1;

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    git_describe: String,
    config: &'a ExperimentConfig,
    train: &'a TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    decomposition: Option<&'a Decomposition>,
    stages: &'a [StagePlan],
    #[serde(skip_serializing_if = "Option::is_none")]
    extra: Option<serde_json::Value>,
}

fn provenance(
    dir: &RunDir,
    command: &str,
    cfg: &ExperimentConfig,
    train: &TrainConfig,
    decomposition: Option<&Decomposition>,
    stages: &[StagePlan],
    extra: Option<serde_json::Value>,
) -> Result<()> {
    let p = Provenance { command, git_describe: git_describe(), config: cfg, train, decomposition, stages, extra };
    dir.write_json("provenance.json", &p)
}

fn train_config(cfg: &ExperimentConfig, schedule: StageSchedule, default_lr: f64) -> TrainConfig {
    TrainConfig {
        temperature: cfg.temperature,
        workers: cfg.workers,
        log_wall_time: cfg.log_wall_time,
        ..TrainConfig::new(schedule, cfg.optim(default_lr), cfg.seed)
    }
}

/// The network named by `arch_file`, loaded from `checkpoint` when one is
/// given and freshly initialized from the run seed otherwise.
fn starting_network(cfg: &ExperimentConfig) -> Result<Network<f32>> {
    let arch = cfg.arch()?;
    match &cfg.checkpoint {
        Some(p) => load_network(&arch, p),
        None => {
            let mut net: Network<f32> = arch.build()?;
            net.init_params(cfg.seed);
            Ok(net)
        }
    }
}

fn timing_csv(seconds: &[f64]) -> String {
    let mut s = String::from("epoch,seconds\n");
    for (e, t) in seconds.iter().enumerate() {
        let _ = writeln!(s, "{e},{t}");
    }
    s
}

fn write_run(dir: &RunDir, out: &RunOutput, weights: &str) -> Result<()> {
    dir.write("metrics.jsonl", out.metrics_jsonl())?;
    dir.write("timing.csv", timing_csv(&out.epoch_seconds))?;
    dir.write("head_trace.csv", out.head_trace.to_csv())?;
    dir.write(weights, checkpoint::encode(&out.student))?;
    dir.write(&weights.replace(".skdw", "_arch.json"), ArchDescription::of(&out.student).to_json())?;
    println!("final val_acc {:.4}", out.final_val_acc());
    println!("checkpoint {} sha256 {}", weights, checkpoint::hash(&out.student));
    Ok(())
}

pub fn train_teacher(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let net = starting_network(cfg)?;
    let (train, val) = cfg.data()?;
    let tc = train_config(cfg, StageSchedule::new(vec![cfg.epochs])?, BASELINE_LR);
    provenance(dir, "train-teacher", cfg, &tc, None, &[], None)?;
    let out = run_supervised(net, &tc, Splits { train: &train, val: &val })?;
    write_run(dir, &out, "model.skdw")
}

/// Student and aligned decomposition, widened by projectors where the
/// block boundaries disagree in width.
fn student_and_decomposition(cfg: &ExperimentConfig, teacher: &Network<f32>) -> Result<(Network<f32>, Decomposition)> {
    let student = starting_network(cfg)?;
    let d = match &cfg.boundaries {
        Some(b) => {
            let d = Decomposition::from_partitions(
                Partition::from_ends(b.teacher.clone())?,
                Partition::from_ends(b.student.clone())?,
            )?;
            if d.k() != cfg.k {
                return Err(Error::Config(format!("`boundaries` describe {} blocks but k = {}", d.k(), cfg.k)).into());
            }
            d
        }
        None => Decomposition::new(teacher, &student, cfg.k)?,
    };
    let (student, d) = insert_projectors(&student, teacher, &d, cfg.seed)?;
    d.validate(teacher, &student)?;
    Ok((student, d))
}

pub fn distill(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let teacher = cfg.teacher()?;
    let (student, d) = student_and_decomposition(cfg, &teacher)?;
    let (train, val) = cfg.data()?;
    let tc = train_config(cfg, StageSchedule::split(cfg.epochs, cfg.n)?, DISTILL_LR);
    let stages = plan_stages(&d, &tc.schedule);
    provenance(dir, "distill", cfg, &tc, Some(&d), &stages, None)?;
    let out = run_stablekd(&teacher, student, d, cfg.lambda, &tc, Splits { train: &train, val: &val })?;
    write_run(dir, &out, "student.skdw")
}

pub fn distill_vanilla(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let teacher = cfg.teacher()?;
    let student = starting_network(cfg)?;
    let (train, val) = cfg.data()?;
    let tc = train_config(cfg, StageSchedule::new(vec![cfg.epochs])?, BASELINE_LR);
    provenance(dir, "distill-vanilla", cfg, &tc, None, &[], None)?;
    let out = run_vanilla_kd(&teacher, student, cfg.alpha, &tc, Splits { train: &train, val: &val })?;
    write_run(dir, &out, "student.skdw")
}

pub fn eval(cfg: &ExperimentConfig, dir: Option<&RunDir>) -> Result<()> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| Error::Config("`checkpoint` is required for eval".into()))?;
    let net = load_network(&cfg.arch()?, path)?;
    let (train, val) = cfg.full_data()?;
    let report = json!({
        "checkpoint": path,
        "sha256": checkpoint::hash(&net),
        "train_acc": accuracy(&net, &train)?,
        "val_acc": accuracy(&net, &val)?,
    });
    println!("train_acc {:.4}", report["train_acc"].as_f64().unwrap_or(0.0));
    println!("val_acc {:.4}", report["val_acc"].as_f64().unwrap_or(0.0));
    if let Some(dir) = dir {
        dir.write_json("eval.json", &report)?;
    }
    Ok(())
}

pub fn gradcheck(seeds: &[u64], dir: Option<&RunDir>) -> Result<()> {
    let mut csv = String::from("op,seed,max_rel_error,coordinates,pass\n");
    let mut failed = Vec::new();
    for &seed in seeds {
        for c in oracle::check_suite(seed)? {
            let pass = c.passes();
            let _ = writeln!(csv, "{},{},{:e},{},{}", c.name, seed, c.report.max_rel_error, c.report.coordinates, pass);
            println!(
                "{:<22} seed {:<4} max_rel_error {:.3e} {}",
                c.name,
                seed,
                c.report.max_rel_error,
                if pass { "ok" } else { "FAIL" }
            );
            if !pass {
                failed.push(format!("{} (seed {seed}): {:.3e}", c.name, c.report.max_rel_error));
            }
        }
    }
    if let Some(dir) = dir {
        dir.write("gradcheck.csv", &csv)?;
    }
    if !failed.is_empty() {
        return Err(Error::Oracle(format!(
            "{} checks above {:e}: {}",
            failed.len(),
            oracle::TOLERANCE,
            failed.join(", ")
        ))
        .into());
    }
    Ok(())
}

pub fn stability(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let teacher = cfg.teacher()?;
    let arch = cfg.arch()?;
    let small_path = cfg
        .pretrained_small_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("`pretrained_small_checkpoint` is required for stability".into()))?;
    let pretrained_small = load_network(&arch, small_path)?;
    let mut pretrained_large = match &cfg.pretrained_large_checkpoint {
        Some(p) => load_network(&cfg.teacher_arch()?, p)?,
        None => teacher.clone(),
    };
    pretrained_large.unfreeze();
    let mut student: Network<f32> = arch.build()?;
    student.init_params(cfg.seed);

    let (train, val) = cfg.data()?;
    let data = Splits { train: &train, val: &val };
    let vanilla = train_config(cfg, StageSchedule::new(vec![cfg.epochs])?, BASELINE_LR);
    let blockwise = train_config(cfg, StageSchedule::new(vec![cfg.epochs])?, DISTILL_LR);
    let stages: Vec<StagePlan> = cfg
        .block_counts
        .iter()
        .map(|&k| Ok(plan_stages(&Decomposition::new(&teacher, &student, k)?, &blockwise.schedule).remove(0)))
        .collect::<Result<_, Error>>()?;
    let extra = json!({ "blockwise_train": blockwise });
    provenance(dir, "stability", cfg, &vanilla, None, &stages, Some(extra))?;

    let fluct = experiment_fluctuation(&teacher, &student, &cfg.fluctuation_lrs, cfg.alpha, &vanilla, data)?;
    dir.write("fluctuation.csv", fluct.plot().to_csv())?;

    let backbones = Backbones { random_small: student.clone(), pretrained_small, pretrained_large };
    let heads = experiment_head_distance(&teacher, backbones, cfg.head_seed, cfg.alpha, &vanilla, data)?;
    dir.write("head_distance.csv", heads.plot().to_csv())?;
    for (name, trace) in heads.conditions.iter().zip(&heads.traces) {
        dir.write(&format!("head_trace_{name}.csv"), trace.to_csv())?;
    }

    let blocks = experiment_block_counts(&teacher, &student, &cfg.block_counts, cfg.lambda, &blockwise, data)?;
    dir.write("block_counts.csv", blocks.plot().to_csv())?;

    let early = heads.early_cumulative(0.2);
    let scores = json!({
        "fluctuation": fluct.lrs.iter().zip(&fluct.scores).map(|(lr, s)| json!({"max_lr": lr, "score": s})).collect::<Vec<_>>(),
        "block_counts": blocks.ks.iter().zip(&blocks.scores).map(|(k, s)| json!({"k": k, "score": s})).collect::<Vec<_>>(),
        "head_distance": {
            "heads_identical": heads.heads_identical,
            "early_fraction": 0.2,
            "early_cumulative": heads.conditions.iter().zip(&early).map(|(c, v)| json!({"condition": c, "cumulative": v})).collect::<Vec<_>>(),
        },
    });
    dir.write_json("scores.json", &scores)?;
    for (lr, s) in fluct.lrs.iter().zip(&fluct.scores) {
        println!("vanilla KD max_lr {lr}: fluctuation {s:.4}");
    }
    for (k, s) in blocks.ks.iter().zip(&blocks.scores) {
        println!("StableKD-{k}/0: fluctuation {s:.4}");
    }
    for (c, v) in heads.conditions.iter().zip(&early) {
        println!("{c}: early cumulative head distance {v:.4}");
    }
    Ok(())
}

pub fn subset_sweep(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    if cfg.fractions.is_empty() {
        bail!(Error::Config("`fractions` is empty".into()));
    }
    let teacher = cfg.teacher()?;
    let (full, val) = cfg.full_data()?;
    let (student, d) = student_and_decomposition(cfg, &teacher)?;
    let plain = starting_network(cfg)?;
    let tc = train_config(cfg, StageSchedule::split(cfg.epochs, cfg.n)?, DISTILL_LR);
    let vanilla_tc = train_config(cfg, StageSchedule::new(vec![cfg.epochs])?, BASELINE_LR);
    let stages = plan_stages(&d, &tc.schedule);

    let mut fractions = cfg.fractions.clone();
    fractions.sort_by(f64::total_cmp);
    let subsets: Vec<Dataset> = fractions
        .iter()
        .map(|&f| if f >= 1.0 { Ok(full.clone()) } else { stratified_subset(&full, f, cfg.subset_seed) })
        .collect::<Result<_, Error>>()?;
    let nested = subsets.windows(2).all(|w| is_contained(&w[0], &w[1]));
    let extra = json!({
        "vanilla_train": vanilla_tc,
        "nested": nested,
        "subsets": fractions.iter().zip(&subsets).map(|(f, s)| json!({
            "fraction": f,
            "samples": s.len(),
            "class_counts": s.class_counts(),
        })).collect::<Vec<_>>(),
    });
    provenance(dir, "subset-sweep", cfg, &tc, Some(&d), &stages, Some(extra))?;
    if !nested {
        return Err(Error::Contract("subsets are not nested".into()).into());
    }

    let mut summary = String::from("fraction,scheme,val_acc\n");
    for (f, train) in fractions.iter().zip(&subsets) {
        let data = Splits { train, val: &val };
        let out = run_stablekd(&teacher, student.clone(), d.clone(), cfg.lambda, &tc, data)?;
        let _ = writeln!(summary, "{f},stablekd,{}", out.final_val_acc());
        dir.write(&format!("metrics_stablekd_{f}.jsonl"), out.metrics_jsonl())?;
        println!("fraction {f}: StableKD val_acc {:.4}", out.final_val_acc());
        if cfg.sweep_vanilla {
            let out = run_vanilla_kd(&teacher, plain.clone(), cfg.alpha, &vanilla_tc, data)?;
            let _ = writeln!(summary, "{f},vanilla_kd,{}", out.final_val_acc());
            dir.write(&format!("metrics_vanilla_kd_{f}.jsonl"), out.metrics_jsonl())?;
            println!("fraction {f}: vanilla KD val_acc {:.4}", out.final_val_acc());
        }
    }
    dir.write("summary.csv", summary)
}

/// Whether every sample of `small` also occurs in `large`, compared by
/// content and label as a multiset.
fn is_contained(small: &Dataset, large: &Dataset) -> bool {
    let key = |ds: &Dataset, i: usize| (ds.labels()[i], ds.sample(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let mut pool: std::collections::BTreeMap<_, usize> = Default::default();
    for i in 0..large.len() {
        *pool.entry(key(large, i)).or_default() += 1;
    }
    (0..small.len()).all(|i| match pool.get_mut(&key(small, i)) {
        Some(n) if *n > 0 => {
            *n -= 1;
            true
        }
        _ => false,
    })
}
