//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use autodiff::{gradient, Tensor, Var};
use common::*;
use perser::baselines::PrototypeSet;
use perser::checkpoint::Checkpoint;
use perser::config::ExperimentConfig;
use perser::corpus::{samples_batch, Sample};
use perser::experiment::{ablate, class_weights, load_tasks, rotations, run, split_for, train_rotation, Method, Preloaded};
use perser::meta::*;
use perser::metrics::{score, SummaryRow};
use perser::model::{self, ClassBalanceWeights, HeadDims, LabelSet, ModelParams, Objective, WeightedBatch, TENSOR_LAYER};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = HeadDims {
        layers: 2,
        dim: 8,
        hidden: 8,
        classes: 9,
    };
    let params = random_head(dims, &mut rng);
    let samples = random_samples(6, 2, 4, 8, 9, &mut rng);
    let weights = ClassBalanceWeights::from_counts(0.999, &[12, 3, 7, 1, 9, 2, 20, 1, 5]).map_err(|e| e.to_string())?;
    let batch = samples_batch(&samples).map_err(|e| e.to_string())?;
    let objective = batch.with_weights(&weights).map_err(|e| e.to_string())?;
    let leaves = params.leaves();
    let grads = gradient(&objective.loss(&leaves).map_err(|e| e.to_string())?, &leaves).map_err(|e| e.to_string())?;
    let fd = fd_gradient(
        |ts| reference_loss(&ModelParams::from_tensors(ts.to_vec()).unwrap(), &samples, weights.weights()),
        params.tensors(),
        1e-5,
    );
    let worst = grads
        .iter()
        .zip(&fd)
        .map(|(g, n)| rel_err(g.value().data(), n))
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-5, format!("max relative error {worst:.2e}"))?;
    check(secs < 5.0, format!("took {secs:.1} s"))?;
    Ok(format!("max relative error {worst:.2e} in {secs:.2} s"))
}

struct HalfSquare;

impl Objective for HalfSquare {
    fn loss(&self, p: &[Var]) -> perser::Result<Var> {
        Ok(p[0].mul(&p[0])?.sum().scale(0.5))
    }
}

fn closed_form_meta_gradient() -> Outcome {
    let grad = |fraction: f64| -> Result<f64, String> {
        let g = meta_gradient(
            &[Tensor::vector(&[1.0])],
            &[0],
            &LslrTable::uniform_layers(1, 0.1, 1),
            false,
            &[MetaTask::combined(HalfSquare)],
            &AnnealSchedule::new(fraction, 1),
            1,
        )
        .map_err(|e| e.to_string())?;
        Ok(g.theta[0].data()[0])
    };
    let (second, first) = (grad(0.0)?, grad(1.0)?);
    // ½((1−α)θ)²: second order (1−α)²θ, first order (1−α)θ.
    check((second - 0.81).abs() <= 1e-12, format!("second order {second}"))?;
    check((first - 0.9).abs() <= 1e-12, format!("first order {first}"))?;
    Ok(format!("second order {second:.15}, first order {first:.15}"))
}

fn unrolled_meta_gradient() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = HeadDims {
        layers: 2,
        dim: 6,
        hidden: 6,
        classes: 9,
    };
    let params = random_head(dims, &mut rng);
    let n = params.num_params();
    check(n <= 200, format!("{n} parameters"))?;
    let weights = ClassBalanceWeights::from_counts(0.99, &[4, 8, 1, 6, 3, 9, 2, 5, 7]).unwrap();
    let sets: Vec<Vec<Sample>> = (0..2).map(|_| random_samples(5, 2, 3, 6, 9, &mut rng)).collect();
    let tasks: Vec<WeightedBatch> = sets
        .iter()
        .map(|s| samples_batch(s).unwrap().with_weights(&weights).unwrap())
        .collect();
    let rate_values = vec![0.3, 0.2, 0.25, 0.15, 0.35, 0.22];
    let table = |v: &[f64]| LslrTable::from_tensor(&Tensor::new(&[3, 2], v.to_vec()).unwrap()).unwrap();
    let lslr = table(&rate_values);
    let g = meta_gradient_csmt(&params, &lslr, true, &tasks, &AnnealSchedule::second_order(2), 2).map_err(|e| e.to_string())?;

    let unrolled = |theta: &[Tensor], rates: &LslrTable| -> f64 {
        tasks
            .iter()
            .zip(&sets)
            .map(|(t, s)| {
                let adapted = adapt_tensors(theta, &TENSOR_LAYER, &[true; 5], t, |l, k| rates.rate(l, k), 2).unwrap();
                reference_loss(&ModelParams::from_tensors(adapted).unwrap(), s, weights.weights())
            })
            .sum::<f64>()
            / tasks.len() as f64
    };
    let fd_theta = fd_gradient(|ts| unrolled(ts, &lslr), params.tensors(), 1e-5);
    let theta_err = g
        .theta
        .iter()
        .zip(&fd_theta)
        .map(|(a, b)| rel_err(a.data(), b))
        .fold(0.0, f64::max);
    let fd_rates = fd_gradient(|ts| unrolled(params.tensors(), &table(ts[0].data())), &[Tensor::vector(&rate_values)], 1e-5);
    let rate_err = rel_err(&g.rates, &fd_rates[0]);
    let secs = start.elapsed().as_secs_f64();
    check(theta_err <= 1e-4, format!("θ relative error {theta_err:.2e}"))?;
    check(rate_err <= 1e-4, format!("rate relative error {rate_err:.2e}"))?;
    check(secs < 30.0, format!("took {secs:.1} s"))?;
    Ok(format!("{n} params, θ error {theta_err:.2e}, rate error {rate_err:.2e}, {secs:.2} s"))
}

fn plain_grads(theta: &[Tensor], task: &WeightedBatch) -> Vec<Tensor> {
    let vars: Vec<Var> = theta.iter().cloned().map(Var::param).collect();
    gradient(&task.loss(&vars).unwrap(), &vars)
        .unwrap()
        .iter()
        .map(|g| g.value().clone())
        .collect()
}

fn max_abs_diff(a: &[Tensor], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn degeneracies() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dims = HeadDims {
        layers: 2,
        dim: 6,
        hidden: 8,
        classes: 9,
    };
    let params = random_head(dims, &mut rng);
    let w = ClassBalanceWeights::from_counts(0.999, &[5, 3, 8, 1, 4, 2, 9, 6, 7]).unwrap();
    let tasks: Vec<WeightedBatch> = (0..3)
        .map(|_| samples_batch(&random_samples(6, 2, 3, 6, 9, &mut rng)).unwrap().with_weights(&w).unwrap())
        .collect();

    // (a) Uniform, frozen rates against hand-written θ ← θ − α∇L.
    let (alpha, steps) = (0.05, 4);
    let adapted = inner_adapt(
        &params.leaves(),
        &TENSOR_LAYER,
        &tasks[0],
        &LslrTable::uniform(alpha, steps).vars(false),
        &AnnealSchedule::second_order(steps),
        steps,
    )
    .map_err(|e| e.to_string())?;
    let mut theta = params.tensors().to_vec();
    for _ in 0..steps {
        let g = plain_grads(&theta, &tasks[0]);
        theta = theta.iter().zip(&g).map(|(t, g)| t.sub(&g.scale(alpha)).unwrap()).collect();
    }
    check(adapted.iter().zip(&theta).all(|(a, b)| a.value().bitwise_eq(b)), "(a) not bitwise equal")?;

    // (b) Fully annealed: mean outer gradient at the adapted parameters.
    let g = meta_gradient_csmt(&params, &LslrTable::uniform(0.2, 3), false, &tasks, &AnnealSchedule::new(1.0, 3), 3)
        .map_err(|e| e.to_string())?;
    let mut expected: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for t in &tasks {
        let adapted = adapt_tensors(params.tensors(), &TENSOR_LAYER, &[true; 5], t, |_, _| 0.2, 3).unwrap();
        for (e, g) in expected.iter_mut().zip(plain_grads(&adapted, t)) {
            e.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b / tasks.len() as f64);
        }
    }
    let err_b = max_abs_diff(&g.theta, &expected);
    check(err_b <= 1e-10, format!("(b) max difference {err_b:.2e}"))?;

    // (c) Zero rates: mean plain gradient at θ.
    let g = meta_gradient_csmt(&params, &LslrTable::uniform(0.0, 3), false, &tasks, &AnnealSchedule::second_order(3), 3)
        .map_err(|e| e.to_string())?;
    let mut expected: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for t in &tasks {
        for (e, g) in expected.iter_mut().zip(plain_grads(params.tensors(), t)) {
            e.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b / tasks.len() as f64);
        }
    }
    let err_c = max_abs_diff(&g.theta, &expected);
    check(err_c <= 1e-12, format!("(c) max difference {err_c:.2e}"))?;
    Ok(format!("(a) bitwise, (b) {err_b:.1e}, (c) {err_c:.1e}"))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<bool>> {
        (0..n)
            .map(|_| {
                let mut r: Vec<bool> = (0..9).map(|_| rng.random::<f64>() < 0.25).collect();
                if !r.contains(&true) {
                    r[rng.random_range(0..9)] = true;
                }
                r
            })
            .collect()
    };
    let sets = |r: &[Vec<bool>]| r.iter().map(|f| LabelSet::new(f.clone()).unwrap()).collect::<Vec<_>>();
    for case in 0..1000 {
        let n = rng.random_range(1..=200);
        let (p, g) = (rows(n, &mut rng), rows(n, &mut rng));
        let s = score(&sets(&p), &sets(&g)).map_err(|e| e.to_string())?;
        let (ma, mi, ua) = brute_force_scores(&p, &g);
        check(s.ma_f1 == ma && s.mi_f1 == mi && s.ua == ua, format!("case {case} disagrees"))?;
    }
    let t = |a: bool, b: bool| vec![a, b];
    let gold = vec![t(true, false), t(true, false), t(false, true), t(true, true)];
    let pred = vec![t(true, false), t(false, true), t(false, true), t(true, false)];
    let (ma, mi, ua) = brute_force_scores(&pred, &gold);
    let s = score(&sets(&pred), &sets(&gold)).map_err(|e| e.to_string())?;
    check((ma - 0.65).abs() < 1e-12 && (mi - 0.6667).abs() < 1e-4 && (ua - 0.625).abs() < 1e-12, "hand count")?;
    check(s.ma_f1 == ma && s.mi_f1 == mi && s.ua == ua, "worked example disagrees")?;
    Ok(format!("1000 random sets exact; worked example {:.4}/{:.4}/{:.4}", s.ma_f1, s.mi_f1, s.ua))
}

fn prototype_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_sum = 0.0f64;
    let mut worst_scale = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(1..=9);
        let centers: BTreeMap<usize, Vec<f64>> = (0..k).map(|c| (c, (0..5).map(|_| rng.random_range(-2.0..2.0)).collect())).collect();
        let p = PrototypeSet::from_centers(9, centers).map_err(|e| e.to_string())?;
        let f: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lambda = 10f64.powf(rng.random_range(-3.0..3.0));
        let d = p.distribution(&f).ok_or("zero norm")?;
        let ds = p.distribution(&f.iter().map(|v| v * lambda).collect::<Vec<_>>()).ok_or("zero norm")?;
        worst_sum = worst_sum.max((d.iter().sum::<f64>() - 1.0).abs());
        worst_scale = worst_scale.max(d.iter().zip(&ds).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let two: BTreeMap<usize, Vec<f64>> = [(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])].into_iter().collect();
    let d = PrototypeSet::from_centers(9, two).unwrap().distribution(&[3.0, 0.0]).unwrap();
    check(worst_sum <= 1e-12, format!("sum off by {worst_sum:.1e}"))?;
    check(worst_scale <= 1e-12, format!("scale changes output by {worst_scale:.1e}"))?;
    check((d[0] - 0.7311).abs() <= 1e-4 && (d[1] - 0.2689).abs() <= 1e-4, format!("two-prototype case {d:?}"))?;
    Ok(format!("sum {worst_sum:.1e}, scale {worst_scale:.1e}, two-prototype ({:.4}, {:.4})", d[0], d[1]))
}

fn threshold_rule() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..100_000 {
        let scale = 10f64.powf(rng.random_range(-2.0..2.5));
        let logits: Vec<f64> = (0..9).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let p = Tensor::vector(&logits).softmax().unwrap();
        check(model::threshold_predictions(p.data()).count() >= 1, format!("vector {i} has no positive class"))?;
    }
    Ok("100000 vectors, all non-empty".into())
}

fn study_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for o in [
        "preset=iemocap-ext",
        "annotators=10",
        "samples_per_annotator=600",
        "shots_train=32",
        "queries=128",
        "test_steps=50",
        "seeds=10",
    ] {
        cfg.apply_override(o).unwrap();
    }
    cfg
}

fn mi(rows: &[SummaryRow], method: Method, shots: usize) -> Result<f64, String> {
    rows.iter()
        .find(|r| r.method == method.to_string() && r.shots == shots)
        .map(|r| 100.0 * r.mean.mi_f1)
        .ok_or_else(|| format!("no row for {method} at K={shots}"))
}

/// Criteria 8 and 9 share one run over every rotation.
fn study() -> Result<(Vec<SummaryRow>, f64), String> {
    let start = Instant::now();
    let mut cfg = study_config();
    cfg.apply_override("methods=random,entire-zero,entire-few,meta-perser").unwrap();
    cfg.apply_override("shots=2,4,8,16,32").unwrap();
    let out = run(&cfg).map_err(|e| e.to_string())?;
    Ok((out.summary, start.elapsed().as_secs_f64()))
}

fn ordering(rows: &[SummaryRow], secs: f64) -> Outcome {
    let meta = mi(rows, Method::MetaPerser, 32)?;
    let few = mi(rows, Method::EntireFew, 32)?;
    let zero = mi(rows, Method::EntireZero, 32)?;
    let random = mi(rows, Method::Random, 32)?;
    let line = format!("miF1 meta {meta:.2} > few {few:.2} > zero {zero:.2} > random {random:.2}, {secs:.0} s");
    check(meta > few && few > zero && zero > random, format!("ordering violated: {line}"))?;
    check(meta - few >= 2.0, format!("margin {:.2} < 2: {line}", meta - few))?;
    check(secs <= 900.0, format!("runtime over budget: {line}"))?;
    Ok(line)
}

fn shot_trend(rows: &[SummaryRow]) -> Outcome {
    let ks = [2, 4, 8, 16, 32];
    let values: Vec<f64> = ks.iter().map(|&k| mi(rows, Method::MetaPerser, k)).collect::<Result<_, _>>()?;
    let line = ks
        .iter()
        .zip(&values)
        .map(|(k, v)| format!("K={k} {v:.2}"))
        .collect::<Vec<_>>()
        .join(", ");
    for w in values.windows(2) {
        check(w[1] >= w[0] - 0.5, format!("drop: {line}"))?;
    }
    Ok(line)
}

fn ablation() -> Outcome {
    let start = Instant::now();
    let mut cfg = study_config();
    cfg.apply_override("test_annotators=C-E1-seen,C-E2-seen,C-E4-seen,C-E5-seen,C-E6-seen").unwrap();
    let rows = ablate(&cfg).map_err(|e| e.to_string())?;
    let value = |label: &str| -> Result<f64, String> {
        rows.iter()
            .find(|r| r.toggles.label() == label)
            .map(|r| 100.0 * r.summary.mean.mi_f1)
            .ok_or_else(|| format!("no row {label}"))
    };
    let line = rows
        .iter()
        .map(|r| format!("{} {:.2}", r.toggles.label(), 100.0 * r.summary.mean.mi_f1))
        .collect::<Vec<_>>()
        .join(", ");
    let (none, all) = (value("none")?, value("INI+CSMT+DA+LSLR")?);
    check(all >= none + 1.0, format!("full stack {all:.2} vs none {none:.2}: {line}"))?;
    Ok(format!("{line}; {:.0} s", start.elapsed().as_secs_f64()))
}

fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    for o in [
        "annotators=5",
        "samples_per_annotator=120",
        "hidden=16",
        "outer_steps=6",
        "val_interval=3",
        "meta_batch=2",
        "pretrain_epochs=2",
        "shots_train=8",
        "queries=32",
        "test_steps=10",
        "methods=random,entire-few,meta-perser",
        "shots=4,8",
        "seeds=3",
        "test_annotators=C-E1-seen,C-E2-seen",
    ] {
        cfg.apply_override(o).unwrap();
    }
    let checkpoint = || -> Result<Vec<u8>, String> {
        let tasks = load_tasks(&cfg).map_err(|e| e.to_string())?;
        let (test, val) = rotations(&tasks, &cfg).map_err(|e| e.to_string())?.remove(0);
        let split = split_for(&cfg, &tasks, &test, &val).map_err(|e| e.to_string())?;
        let models = train_rotation(&cfg, &split, Preloaded::default()).map_err(|e| e.to_string())?;
        let (params, lslr) = models.meta.ok_or("no meta model")?;
        let mut ckpt = Checkpoint::new(cfg.digest(), cfg.seed, 0, params);
        ckpt.lslr = Some(lslr);
        ckpt.class_weights = Some(class_weights(&cfg, &split).map_err(|e| e.to_string())?);
        Ok(ckpt.encode())
    };
    let (a, b) = (checkpoint()?, checkpoint()?);
    check(a == b, "checkpoints differ between identical runs")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("meta.mpck");
    let original = Checkpoint::decode(&a).map_err(|e| e.to_string())?;
    original.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    check(loaded.bitwise_eq(&original) && loaded.encode() == a, "save/load is not bitwise")?;

    let (r1, r2) = (run(&cfg).map_err(|e| e.to_string())?, run(&cfg).map_err(|e| e.to_string())?);
    check(r1.reports == r2.reports, "reports differ between identical runs")?;
    Ok(format!("{} checkpoint bytes identical, {} reports identical, round-trip bitwise", a.len(), r1.reports.len()))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    let names = [
        "gradient correctness",
        "closed-form meta-gradient",
        "unrolled meta-gradient vs finite differences",
        "degeneracy equivalences",
        "metrics oracle",
        "prototype similarity properties",
        "threshold rule",
        "method ordering on synthetic study",
        "shot-size trend",
        "ablation harness",
        "determinism and persistence",
    ];
    let mut results: Vec<Outcome> = vec![
        guarded(gradient_correctness),
        guarded(closed_form_meta_gradient),
        guarded(unrolled_meta_gradient),
        guarded(degeneracies),
        guarded(metrics_oracle),
        guarded(prototype_properties),
        guarded(threshold_rule),
    ];
    let study_out = catch_unwind(study).unwrap_or_else(|_| Err("panicked".into()));
    match study_out {
        Ok((rows, secs)) => {
            results.push(guarded(|| ordering(&rows, secs)));
            results.push(guarded(|| shot_trend(&rows)));
        }
        Err(e) => {
            results.push(Err(e.clone()));
            results.push(Err(e));
        }
    }
    results.push(guarded(ablation));
    results.push(guarded(determinism));

    let mut failed = 0;
    for (i, (name, r)) in names.iter().zip(&results).enumerate() {
        match r {
            Ok(detail) => println!("criterion {:2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
