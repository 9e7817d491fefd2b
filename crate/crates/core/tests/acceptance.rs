//! The acceptance criteria. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Positional arguments select criteria by
//! number.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stablekd::data::{skd1, stratified_subset, Dataset, Split};
use stablekd::instrument::experiments::{experiment_block_counts, experiment_head_distance, Backbones};
use stablekd::losses::{record_stablekd, stablekd_loss, vanilla_kd_loss};
use stablekd::network::{checkpoint, insert_projectors};
use stablekd::oracle::{check_suite, CASES};
use stablekd::partition::Partition;
use stablekd::presets;
use stablekd::tensor::{backward, Tensor};
use stablekd::train::{lr_at, run_stablekd, run_vanilla_kd, Splits, Trainer};
use stablekd::{build_network, Decomposition, Error, HeadObjective, LayerSpec, Network, StageSchedule};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Toy {
    train: Dataset,
    val: Dataset,
    teacher: Network<f32>,
}

impl Toy {
    fn splits(&self) -> Splits<'_> {
        Splits { train: &self.train, val: &self.val }
    }
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let (train, val) = presets::tiles().expect("tile data");
        let teacher = presets::train_teacher(Splits { train: &train, val: &val }).expect("teacher trains");
        Toy { train, val, teacher }
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

fn gradient_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (0.0f64, "", 0u64);
    let mut failures = Vec::new();
    let mut checks = 0;
    for seed in 0..10 {
        for c in check_suite(seed).expect("oracle cases evaluate") {
            checks += 1;
            if c.report.max_rel_error > worst.0 {
                worst = (c.report.max_rel_error, c.name, seed);
            }
            if !c.passes() {
                failures.push(format!("{}@{}", c.name, seed));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 60.0 && checks == 10 * CASES.len(),
        format!(
            "{} cases x 10 seeds, worst {:.2e} ({} seed {}), {:.1}s{}",
            CASES.len(),
            worst.0,
            worst.1,
            worst.2,
            secs,
            if failures.is_empty() { String::new() } else { format!(", failing: {}", failures.join(" ")) }
        ),
    )
}

fn block_isolation() -> Outcome {
    let teacher_arch = presets::teacher_arch();
    let student_arch = presets::student_arch();
    let mut teacher: Network<f64> = teacher_arch.build().unwrap();
    teacher.init_params(1);
    teacher.freeze();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform(&mut rng, &[4, 1, presets::SIDE, presets::SIDE], 1.0);
    let labels = [0, 3, 5, 7];
    let mut compared = 0usize;
    let mut bad = Vec::new();
    for k in [2, 3, 5] {
        let mut student: Network<f64> = student_arch.build().unwrap();
        student.init_params(10 + k as u64);
        let d = Decomposition::new(&teacher, &student, k).unwrap();
        let rec = record_stablekd(&x, &labels, &teacher, &student, &d, 1.0, 1.0).unwrap();
        let full = backward(&rec.tape, rec.total).unwrap();
        let per_term: Vec<_> = rec.terms.iter().map(|t| backward(&rec.tape, t.loss).unwrap()).collect();
        for (j, range) in d.student.blocks().enumerate() {
            for layer in &student.layers()[range] {
                for p in &layer.params {
                    let want = full.get(&p.id).expect("every block parameter has a gradient");
                    let own = per_term[j].get(&p.id).expect("own term reaches the block");
                    let same = want.data().iter().zip(own.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                    if !same {
                        bad.push(format!("k{k} block {j} {} differs from own term", p.id));
                    }
                    for (i, g) in per_term.iter().enumerate() {
                        if i == j {
                            continue;
                        }
                        if let Some(t) = g.get(&p.id) {
                            if t.data().iter().any(|v| v.to_bits() != 0) {
                                bad.push(format!("k{k} term {i} leaks into {}", p.id));
                            }
                        }
                    }
                    compared += 1;
                }
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "{compared} parameter tensors over k = 2, 3, 5{}",
            bad.first().map_or(String::new(), |b| format!(", {b}"))
        ),
    )
}

fn recomposition() -> Outcome {
    let mut bad = Vec::new();
    for k in 1..=16usize {
        let p = Partition::from_ends((1..=k).collect()).unwrap();
        if p.recompose().k() != k.div_ceil(2) {
            bad.push(format!("k={k} -> {}", p.recompose().k()));
        }
    }
    let toy = toy();
    let train = stratified_subset(&toy.train, 0.1, 5).unwrap();
    let data = Splits { train: &train, val: &toy.val };
    let student = presets::student(0).unwrap();
    let d = Decomposition::new(&toy.teacher, &student, 5).unwrap();
    let (student, d) = insert_projectors(&student, &toy.teacher, &d, 0).unwrap();
    let cfg = presets::stablekd_config(2, 1, presets::STABLEKD_LR, 0).unwrap();
    let objective = HeadObjective::Blockwise { lambda: presets::LAMBDA, temperature: cfg.temperature };
    let mut trainer = Trainer::new(Some(&toy.teacher), student, d, objective, cfg, data).unwrap();
    trainer.run_epoch().unwrap();
    let (x, _) = toy.val.tensor().unwrap();
    let before = (trainer.student().forward(&x).unwrap(), checkpoint::encode(trainer.student()));
    let k_before = trainer.decomposition().k();
    trainer.advance_stage().unwrap();
    let after = (trainer.student().forward(&x).unwrap(), checkpoint::encode(trainer.student()));
    let k_after = trainer.decomposition().k();
    if before.0 != after.0 {
        bad.push("forward output changed".into());
    }
    if before.1 != after.1 {
        bad.push("checkpoint bytes changed".into());
    }
    if (k_before, k_after) != (5, 3) {
        bad.push(format!("stage blocks {k_before} -> {k_after}"));
    }
    outcome(
        bad.is_empty(),
        format!(
            "k = 1..16 halve; 5 -> 3 keeps {} checkpoint bytes{}",
            before.1.len(),
            bad.first().map_or(String::new(), |b| format!(", {b}"))
        ),
    )
}

fn degenerate_equivalence() -> Outcome {
    let specs = [LayerSpec::Affine { out_features: 6 }, LayerSpec::Relu, LayerSpec::Affine { out_features: 4 }];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for batch in 0..100u64 {
        let mut teacher: Network<f64> = build_network(&specs, &[3], 4).unwrap();
        teacher.init_params(1000 + batch);
        teacher.freeze();
        let mut student: Network<f64> = build_network(&specs, &[3], 4).unwrap();
        student.init_params(batch);
        let rows = rng.random_range(1..9);
        let x = uniform(&mut rng, &[rows, 3], 2.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..4)).collect();
        let alpha: f64 = rng.random_range(0.05..0.95);
        let lambda = alpha / (1.0 - alpha);
        let d =
            Decomposition::from_partitions(Partition::whole(teacher.len()), Partition::whole(student.len())).unwrap();
        let blockwise = stablekd_loss(&x, &labels, &teacher, &student, &d, lambda).unwrap().total;
        let t_logits = teacher.forward(&x).unwrap();
        let s_logits = student.forward(&x).unwrap();
        let vanilla = vanilla_kd_loss(&s_logits, &t_logits, &labels, alpha, 1.0).unwrap();
        let rel = ((1.0 - alpha) * blockwise - vanilla).abs() / vanilla.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    outcome(worst <= 1e-12, format!("100 batches, worst relative gap {worst:.2e}"))
}

fn scheduler() -> Outcome {
    let s = StageSchedule::split(20, 2).unwrap();
    let mut bad = Vec::new();
    if s.epochs() != [6, 6, 8] {
        bad.push(format!("split {:?}", s.epochs()));
    }
    let mut points = 0;
    for spe in [1usize, 7, 10, 391] {
        for max_lr in [0.5, 0.1, 0.3] {
            let base = max_lr / 25.0;
            let mut start = 0;
            for (c, e) in [6usize, 6, 8].into_iter().enumerate() {
                let len = e * spe;
                let peak = max_lr / f64::from(1u32 << c);
                let mut expect = vec![(start, base), (start + len, base)];
                if len % 2 == 0 {
                    expect.push((start + len / 2, peak));
                }
                for (step, want) in expect {
                    let got = lr_at(step, &s, spe, max_lr).unwrap();
                    points += 1;
                    if got != want {
                        bad.push(format!("spe {spe} max {max_lr} step {step}: {got} != {want}"));
                    }
                }
                start += len;
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!("{points} start/mid/end points exact{}", bad.first().map_or(String::new(), |b| format!(", {b}"))),
    )
}

fn determinism() -> Outcome {
    let toy = toy();
    let train = stratified_subset(&toy.train, 0.15, 6).unwrap();
    let data = Splits { train: &train, val: &toy.val };
    let run = |workers: usize, epochs: usize, recompositions: usize| {
        let student = presets::student(3).unwrap();
        let d = Decomposition::new(&toy.teacher, &student, 5).unwrap();
        let (student, d) = insert_projectors(&student, &toy.teacher, &d, 3).unwrap();
        let mut cfg = presets::stablekd_config(epochs, recompositions, presets::STABLEKD_LR, 3).unwrap();
        cfg.workers = workers;
        let out = run_stablekd(&toy.teacher, student, d, presets::LAMBDA, &cfg, data).unwrap();
        (out.metrics_jsonl(), checkpoint::encode(&out.student))
    };
    let a = run(1, 4, 1);
    let b = run(1, 4, 1);
    let one = run(1, 1, 0);
    let five = run(5, 1, 0);
    let mut bad = Vec::new();
    if a.0 != b.0 {
        bad.push("metrics differ between reruns");
    }
    if a.1 != b.1 {
        bad.push("checkpoints differ between reruns");
    }
    if one.1 != five.1 {
        bad.push("workers 1 and 5 disagree after one epoch");
    }
    outcome(
        bad.is_empty(),
        format!(
            "rerun metrics and checkpoints identical, workers 1 vs 5 identical{}",
            bad.first().map_or(String::new(), |b| format!(", {b}"))
        ),
    )
}

const SEEDS: u64 = 5;

fn head_distance() -> Outcome {
    let t0 = Instant::now();
    let toy = toy();
    let small = presets::pretrain_student(toy.splits()).unwrap();
    let mut large = toy.teacher.clone();
    large.unfreeze();
    let mut wins = 0;
    let mut lines = Vec::new();
    let mut identical = true;
    for seed in 0..SEEDS {
        let backbones = Backbones {
            random_small: presets::student(seed).unwrap(),
            pretrained_small: small.clone(),
            pretrained_large: large.clone(),
        };
        let cfg = presets::vanilla_config(10, seed).unwrap();
        let runs =
            experiment_head_distance(&toy.teacher, backbones, 1000 + seed, presets::ALPHA, &cfg, toy.splits()).unwrap();
        identical &= runs.heads_identical;
        let e = runs.early_cumulative(0.2);
        if e[0] > e[1] && e[0] > e[2] {
            wins += 1;
        }
        lines.push(format!("{:.2}/{:.2}/{:.2}", e[0], e[1], e[2]));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        wins >= 4 && identical && secs < 300.0,
        format!(
            "random wins {wins}/{SEEDS} (early random/pre-small/pre-large: {}), heads identical {identical}, {secs:.0}s",
            lines.join(" ")
        ),
    )
}

fn fluctuation() -> Outcome {
    let toy = toy();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..SEEDS {
        let cfg = presets::stablekd_config(40, 0, presets::BLOCK_COUNT_LR, seed).unwrap();
        let student = presets::student(seed).unwrap();
        let runs =
            experiment_block_counts(&toy.teacher, &student, &[1, 3, 5], presets::LAMBDA, &cfg, toy.splits()).unwrap();
        let s = &runs.scores;
        if s[1] <= s[0] && s[2] <= s[0] {
            wins += 1;
        }
        lines.push(format!("{:.3}/{:.3}/{:.3}", s[0], s[1], s[2]));
    }
    outcome(wins >= 4, format!("k3,k5 <= k1 in {wins}/{SEEDS} (scores k1/k3/k5: {})", lines.join(" ")))
}

fn compare_at(train: &Dataset, val: &Dataset) -> (usize, Vec<String>) {
    let toy = toy();
    let data = Splits { train, val };
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..SEEDS {
        let vanilla = run_vanilla_kd(
            &toy.teacher,
            presets::student(seed).unwrap(),
            presets::ALPHA,
            &presets::vanilla_config(15, seed).unwrap(),
            data,
        )
        .unwrap();
        let student = presets::student(seed).unwrap();
        let d = Decomposition::new(&toy.teacher, &student, 3).unwrap();
        let (student, d) = insert_projectors(&student, &toy.teacher, &d, seed).unwrap();
        let cfg = presets::stablekd_config(15, 1, presets::STABLEKD_LR, seed).unwrap();
        let blockwise = run_stablekd(&toy.teacher, student, d, presets::LAMBDA, &cfg, data).unwrap();
        let (v, b) = (vanilla.final_val_acc(), blockwise.final_val_acc());
        if b >= v {
            wins += 1;
        }
        lines.push(format!("{b:.3}/{v:.3}"));
    }
    (wins, lines)
}

fn convergence() -> Outcome {
    let toy = toy();
    let (wins, lines) = compare_at(&toy.train, &toy.val);
    outcome(wins >= 4, format!("StableKD-3/1 >= vanilla in {wins}/{SEEDS} (final val {})", lines.join(" ")))
}

fn data_efficiency() -> Outcome {
    let toy = toy();
    let subset = stratified_subset(&toy.train, 0.4, presets::SUBSET_SEED).unwrap();
    let (wins, lines) = compare_at(&subset, &toy.val);
    outcome(
        wins >= 4,
        format!(
            "at fraction 0.4 ({} samples) StableKD >= vanilla in {wins}/{SEEDS} ({})",
            subset.len(),
            lines.join(" ")
        ),
    )
}

fn skd1_format() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 23;
    let inputs: Vec<f32> = (0..n * 3 * 4 * 5).map(|_| rng.random_range(0.0..=1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
    let ds = Dataset::new(vec![3, 4, 5], inputs, labels, 7, Split::Train).unwrap();
    let bytes = skd1::encode(&ds).unwrap();
    let back = skd1::decode(&bytes, Split::Train).unwrap();
    let mut bad = Vec::new();
    if back != ds || skd1::encode(&back).unwrap() != bytes {
        bad.push("in-memory round trip".to_string());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.skd1");
    skd1::save(&ds, &path).unwrap();
    if std::fs::read(&path).unwrap() != bytes || skd1::load(&path, Split::Train).unwrap() != ds {
        bad.push("file round trip".to_string());
    }
    for cut in 0..bytes.len() {
        match skd1::decode(&bytes[..cut], Split::Train) {
            Err(Error::Format { offset, .. }) if offset <= cut as u64 => {}
            other => bad.push(format!("truncation at {cut}: {:?}", other.map(|d| d.len()))),
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "{} bytes stable, all {} truncations rejected with offsets{}",
            bytes.len(),
            bytes.len(),
            bad.first().map_or(String::new(), |b| format!(", {b}"))
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient oracle", gradient_oracle),
        ("block gradient isolation", block_isolation),
        ("recomposition algebra", recomposition),
        ("degenerate equivalence", degenerate_equivalence),
        ("scheduler closed form", scheduler),
        ("determinism and parallel equivalence", determinism),
        ("head-distance stability", head_distance),
        ("fluctuation by block count", fluctuation),
        ("accuracy at a small budget", convergence),
        ("data efficiency at 0.4", data_efficiency),
        ("SKD1 format", skd1_format),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {number:>2} {} {name}: {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
