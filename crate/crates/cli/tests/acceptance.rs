//! Acceptance gate: every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line. The process exits non-zero if any criterion fails.
//!
//! Run with `cargo test -p gsfda-cli --test acceptance`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use gsfda::config::{Domains, ExperimentConfig};
use gsfda::gradcheck;
use gsfda::lsc::{knn, Banks};
use gsfda::metrics::{harmonic_mean, EvalMode};
use gsfda::nn::{predict, NetworkParams};
use gsfda::numerics::{cosine_similarity, Matrix, Rng};
use gsfda::pipeline::{
    adapt_continual, adapt_target, evaluate, pretrain_source, sample_exemplars,
    train_domain_classifier, BnSnapshot, RunConfig, TargetAdapter,
};
use gsfda::sda::{merge_masks, MaskSet};

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("presets")
        .join(name)
}

fn load(name: &str, seed: u64) -> (ExperimentConfig, RunConfig, Domains) {
    let mut exp = ExperimentConfig::load(&preset(name)).expect("preset parses");
    exp.seed = seed;
    let cfg = exp.run_config();
    let domains = exp
        .build_domains(Path::new("."))
        .expect("preset data builds");
    (exp, cfg, domains)
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let reports = gradcheck::run_all(gradcheck::DEFAULT_TRIALS, 0).expect("suites run");
    let secs = t0.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name)
        .collect();
    let detail =
        format!(
        "{} suites x {} trials, worst relative error {worst:.2e} (< {:.0e}), {secs:.1}s (< 30s){}",
        reports.len(),
        gradcheck::DEFAULT_TRIALS,
        gradcheck::TOLERANCE,
        if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) }
    );
    outcome(failed.is_empty() && secs < 30.0, detail)
}

// ---------------------------------------------------------------------------
// 2. Forgetting invariant
// ---------------------------------------------------------------------------

/// Largest absolute change over `W_fl` rows and `W_g` columns of channels
/// with `protect[j] >= 0.5`.
fn protected_drift(before: &NetworkParams, after: &NetworkParams, protect: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (j, &a) in protect.iter().enumerate() {
        if a < 0.5 {
            continue;
        }
        for (x, y) in before.w_fl.row(j).iter().zip(after.w_fl.row(j)) {
            worst = worst.max((x - y).abs());
        }
        worst = worst.max((before.b_fl.data()[j] - after.b_fl.data()[j]).abs());
        for c in 0..before.w_g.rows() {
            worst = worst.max((before.w_g.row(c)[j] - after.w_g.row(c)[j]).abs());
        }
    }
    worst
}

fn protected_bit_identical(before: &NetworkParams, after: &NetworkParams, protect: &[f64]) -> bool {
    protect
        .iter()
        .enumerate()
        .filter(|(_, &a)| a == 1.0)
        .all(|(j, _)| {
            before.w_fl.row(j) == after.w_fl.row(j)
                && before.b_fl.data()[j].to_bits() == after.b_fl.data()[j].to_bits()
                && (0..before.w_g.rows())
                    .all(|c| before.w_g.row(c)[j].to_bits() == after.w_g.row(c)[j].to_bits())
        })
}

/// Runs `steps` adaptation steps (whole epochs of `steps_per_epoch`) and
/// returns the largest per-step drift on protected channels, measured
/// epoch by epoch, together with the final parameters.
fn run_steps(
    cfg: &RunConfig,
    params: &NetworkParams,
    masks: &MaskSet,
    x: &Matrix,
    protect: &[f64],
    steps: usize,
    steps_per_epoch: usize,
) -> (f64, NetworkParams) {
    let mut adapter =
        TargetAdapter::new(cfg, params.clone(), masks, 1, x, protect).expect("adapter");
    adapter.init_banks().expect("banks");
    let mut worst: f64 = 0.0;
    for _ in 0..steps / steps_per_epoch {
        let before = adapter.params.clone();
        adapter.run_epoch().expect("epoch");
        worst =
            worst.max(protected_drift(&before, &adapter.params, protect) / steps_per_epoch as f64);
    }
    (worst, adapter.into_params())
}

fn forgetting_invariant(
    models: &[(NetworkParams, MaskSet)],
    domains: &Domains,
    cfg: &RunConfig,
) -> Outcome {
    let (params, masks) = &models[0];
    // 640 target rows in batches of 64: ten steps per epoch.
    let rows: Vec<usize> = (0..640).collect();
    let x = domains.targets[0].features.select_rows(&rows);
    let mut cfg = cfg.clone();
    cfg.lr_target = 1e-2;

    let binary: Vec<f64> = (0..cfg.dims.feature_dim)
        .map(|j| (j % 2 == 0) as u8 as f64)
        .collect();
    let (_, after) = run_steps(&cfg, params, masks, &x, &binary, 100, 10);
    let bit_identical = protected_bit_identical(params, &after, &binary);
    let free_moved = (0..cfg.dims.feature_dim)
        .filter(|j| j % 2 == 1)
        .any(|j| params.w_fl.row(j) != after.w_fl.row(j));

    let soft = merge_masks(masks, 1).expect("merge");
    let n_protected = soft.iter().filter(|&&a| a >= 0.5).count();
    let (drift, _) = run_steps(&cfg, params, masks, &x, &soft, 100, 10);

    let detail = format!(
        "binary fixture: protected rows/columns bit-identical after 100 steps = {bit_identical} \
         (unprotected moved = {free_moved}); trained soft mask: max drift {drift:.2e}/step \
         on {n_protected} protected channels (< 1e-6)"
    );
    outcome(bit_identical && free_moved && drift < 1e-6, detail)
}

// ---------------------------------------------------------------------------
// 3. H-metric arithmetic
// ---------------------------------------------------------------------------

fn h_metric() -> Outcome {
    let round1 = |v: f64| (v * 10.0).round() / 10.0;
    let a = round1(harmonic_mean(90.4, 85.0));
    let b = round1(harmonic_mean(99.6, 48.1));
    outcome(
        a == 87.6 && b == 64.9,
        format!("H(90.4, 85.0) = {a:.1} (87.6), H(99.6, 48.1) = {b:.1} (64.9)"),
    )
}

// ---------------------------------------------------------------------------
// 4. k-NN oracle equivalence
// ---------------------------------------------------------------------------

/// Full sort of every other bank row by (similarity desc, id asc).
fn oracle_knn(
    features: &Matrix,
    queries: &Matrix,
    exclude: Option<&[usize]>,
    k: usize,
) -> Vec<Vec<usize>> {
    (0..queries.rows())
        .map(|qi| {
            let mut scored: Vec<(f64, usize)> = (0..features.rows())
                .filter(|&j| exclude.is_none_or(|ex| ex[qi] != j))
                .map(|j| {
                    (
                        cosine_similarity(queries.row(qi), features.row(j)).unwrap(),
                        j,
                    )
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

fn knn_oracle() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut mismatches = 0;
    let mut ties = 0usize;
    for bank in 0..200 {
        let n = 2 + rng.below(499);
        let d = 1 + rng.below(64);
        let k = 1 + rng.below((n - 1).min(30));
        // Half the banks use small integer entries and duplicated rows so
        // that exact similarity ties are common.
        let coarse = bank % 2 == 1;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            if coarse && i > 0 && rng.below(4) == 0 {
                let src = rng.below(i);
                rows.push(rows[src].clone());
                continue;
            }
            let mut r: Vec<f64> = (0..d)
                .map(|_| {
                    if coarse {
                        rng.below(3) as f64 - 1.0
                    } else {
                        rng.normal()
                    }
                })
                .collect();
            if r.iter().all(|&v| v == 0.0) {
                r[0] = 1.0;
            }
            rows.push(r);
        }
        let features = Matrix::from_rows(&rows).unwrap();
        let banks = Banks::new(features.clone(), Matrix::filled(n, 2, 0.5)).unwrap();
        let ids: Vec<usize> = (0..n).collect();
        let got = knn(&banks, &features, Some(&ids), k).unwrap();
        let want = oracle_knn(&features, &features, Some(&ids), k);
        if got != want {
            mismatches += 1;
        }
        let queries = Matrix::from_rows(
            &(0..8)
                .map(|_| (0..d).map(|_| rng.normal()).collect())
                .collect::<Vec<Vec<f64>>>(),
        )
        .unwrap();
        if knn(&banks, &queries, None, k).unwrap() != oracle_knn(&features, &queries, None, k) {
            mismatches += 1;
        }
        ties += rows
            .iter()
            .enumerate()
            .filter(|(i, r)| rows[..*i].contains(r))
            .count();
    }
    outcome(
        mismatches == 0,
        format!("200 banks (n <= 500, d <= 64, {ties} duplicated rows), {mismatches} mismatching retrievals"),
    )
}

// ---------------------------------------------------------------------------
// 5. Adaptation efficacy and 8. domain-agnostic evaluation
// ---------------------------------------------------------------------------

struct SeedRun {
    before_s: f64,
    before_t: f64,
    after_s: f64,
    after_t: f64,
    unprotected_s: f64,
}

fn adaptation_efficacy(
    models: &mut Vec<(NetworkParams, MaskSet)>,
    adapted: &mut Vec<NetworkParams>,
) -> Outcome {
    let t0 = Instant::now();
    let mut runs = Vec::new();
    for seed in 0..5 {
        let (_, cfg, domains) = load("two_moons_single.cfg", seed);
        let sets = domains.eval_sets();
        let (params, masks) = pretrain_source(&cfg, &domains.source_train).expect("pretrain");
        let before = evaluate(&params, &masks, &sets, EvalMode::Aware, None).unwrap();
        let x = &domains.targets[0].features;
        let protect = merge_masks(&masks, 1).unwrap();
        let after_params =
            adapt_target(&cfg, params.clone(), &masks, 1, x, &protect).expect("adapt");
        let after = evaluate(&after_params, &masks, &sets, EvalMode::Aware, None).unwrap();
        let zeros = vec![0.0; cfg.dims.feature_dim];
        let open = adapt_target(&cfg, params.clone(), &masks, 1, x, &zeros).expect("adapt");
        let unprotected = evaluate(&open, &masks, &sets, EvalMode::Aware, None).unwrap();
        println!(
            "    seed {seed}: source {:.1} -> {:.1} (unprotected {:.1}), target {:.1} -> {:.1}",
            before.acc_s, after.acc_s, unprotected.acc_s, before.acc_t, after.acc_t
        );
        runs.push(SeedRun {
            before_s: before.acc_s,
            before_t: before.acc_t,
            after_s: after.acc_s,
            after_t: after.acc_t,
            unprotected_s: unprotected.acc_s,
        });
        models.push((params, masks));
        adapted.push(after_params);
    }
    let secs = t0.elapsed().as_secs_f64();
    let n = runs.len() as f64;
    let mean = |f: &dyn Fn(&SeedRun) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let gain = mean(&|r| r.after_t - r.before_t);
    let drop = mean(&|r| r.before_s - r.after_s);
    let open_drop = mean(&|r| r.before_s - r.unprotected_s);
    let detail = format!(
        "target gain {gain:.2} (>= 15), source drop {drop:.2} (< 3), \
         drop without protection {open_drop:.2} (+{:.2}, >= +5), {secs:.1}s (< 120s)",
        open_drop - drop
    );
    outcome(
        gain >= 15.0 && drop < 3.0 && open_drop - drop >= 5.0 && secs < 120.0,
        detail,
    )
}

fn agnostic_evaluation(models: &[(NetworkParams, MaskSet)], adapted: &[NetworkParams]) -> Outcome {
    let (_, cfg, domains) = load("two_moons_single.cfg", 0);
    let (source_params, masks) = &models[0];
    let params = &adapted[0];
    let sets = domains.eval_sets();
    let mut pools = vec![&domains.source_train];
    pools.extend(domains.targets.iter());
    let exemplars = sample_exemplars(&cfg, &pools);
    let snapshot = BnSnapshot::of(source_params);
    let dc = train_domain_classifier(&cfg, params, Some(&snapshot), &exemplars).expect("dc");
    let aware = evaluate(params, masks, &sets, EvalMode::Aware, None).unwrap();
    let agnostic = evaluate(params, masks, &sets, EvalMode::Agnostic, Some(&dc)).unwrap();
    let gap = (aware.h - agnostic.h).abs();
    outcome(
        cfg.exemplars_per_domain == 64 && gap <= 2.0,
        format!(
            "aware H {:.2}, agnostic H {:.2} (domain-ID accuracy {:.1}), gap {gap:.2} (<= 2)",
            aware.h,
            agnostic.h,
            agnostic.domain_id_accuracy.unwrap_or(f64::NAN)
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Degenerate-solution guard
// ---------------------------------------------------------------------------

fn max_class_share(params: &NetworkParams, masks: &MaskSet, x: &Matrix, classes: usize) -> f64 {
    let mask = masks.mask(1).unwrap();
    let pred = predict(params, x, Some(&mask)).unwrap().predictions();
    let mut counts = vec![0usize; classes];
    for p in pred {
        counts[p] += 1;
    }
    *counts.iter().max().unwrap() as f64 / x.rows() as f64
}

fn collapse_guard() -> Outcome {
    let mut lines = Vec::new();
    let mut all = true;
    for seed in 0..3 {
        let (_, cfg, domains) = load("blobs_imbalanced.cfg", seed);
        let (params, masks) = pretrain_source(&cfg, &domains.source_train).expect("pretrain");
        let x = &domains.targets[0].features;
        let protect = merge_masks(&masks, 1).unwrap();
        let share = |bw: f64| {
            let mut c = cfg.clone();
            c.balance_weight = bw;
            let p = adapt_target(&c, params.clone(), &masks, 1, x, &protect).expect("adapt");
            max_class_share(&p, &masks, x, cfg.dims.classes)
        };
        let (without, with) = (share(0.0), share(1.0));
        all &= without > with;
        lines.push(format!("seed {seed}: {without:.3} vs {with:.3}"));
    }
    outcome(
        all,
        format!(
            "max predicted-class share, balance 0 vs 1 (must be larger): {}",
            lines.join("; ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Continual reduction
// ---------------------------------------------------------------------------

fn continual_reduction(models: &[(NetworkParams, MaskSet)]) -> Outcome {
    let (_, cfg, domains) = load("two_moons_single.cfg", 0);
    let (params, masks) = &models[0];
    let protect = merge_masks(masks, 1).unwrap();
    let single = adapt_target(
        &cfg,
        params.clone(),
        masks,
        1,
        &domains.targets[0].features,
        &protect,
    )
    .unwrap();
    let continual = adapt_continual(
        &cfg,
        params.clone(),
        masks,
        &domains.source_test,
        &domains.targets,
    )
    .unwrap();
    let identical = single == continual.params;

    let (_, cfg2, domains2) = load("two_moons_continual.cfg", 0);
    let (p2, m2) = pretrain_source(&cfg2, &domains2.source_train).expect("pretrain");
    let out = adapt_continual(&cfg2, p2, &m2, &domains2.source_test, &domains2.targets)
        .expect("continual");
    let m = &out.accuracy_matrix;
    let first = m[0][0];
    let last = m[m.len() - 1][0];
    for (i, row) in m.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:5.1}")).collect();
        println!("    matrix row {i}: [{}]", cells.join(", "));
    }
    outcome(
        identical && (first - last).abs() <= 5.0,
        format!(
            "single-target continual == adapt_target: {identical}; two targets (30, 60 deg): \
             source {first:.1} -> {last:.1} (within 5)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Determinism
// ---------------------------------------------------------------------------

fn cli_run(out: &Path) -> Vec<u8> {
    let cfg = preset("two_moons_single.cfg");
    for cmd in ["pretrain", "adapt"] {
        let status = Command::new(env!("CARGO_BIN_EXE_gsfda"))
            .arg(cmd)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .arg("--seed")
            .arg("3")
            .output()
            .expect("binary runs");
        assert!(
            status.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&status.stderr)
        );
    }
    std::fs::read(out.join("metrics.json")).expect("metrics.json written")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let a = cli_run(&dir.path().join("a"));
    let b = cli_run(&dir.path().join("b"));
    outcome(
        a == b,
        format!(
            "two pretrain+adapt CLI runs with seed 3: metrics.json byte-identical = {} ({} bytes)",
            a == b,
            a.len()
        ),
    )
}

fn main() {
    let t0 = Instant::now();
    let mut models = Vec::new();
    let mut adapted = Vec::new();
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient suite", gradient_suite()),
        (3, "H metric", h_metric()),
        (4, "k-NN oracle", knn_oracle()),
    ];
    results.push((
        5,
        "adaptation efficacy",
        adaptation_efficacy(&mut models, &mut adapted),
    ));
    let (_, cfg, domains) = load("two_moons_single.cfg", 0);
    results.push((
        2,
        "forgetting invariant",
        forgetting_invariant(&models, &domains, &cfg),
    ));
    results.push((6, "collapse guard", collapse_guard()));
    results.push((7, "continual reduction", continual_reduction(&models)));
    results.push((
        8,
        "agnostic evaluation",
        agnostic_evaluation(&models, &adapted),
    ));
    results.push((9, "determinism", determinism()));
    results.sort_by_key(|r| r.0);

    println!();
    for (id, name, o) in &results {
        println!(
            "{} {id}. {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    let failed = results.iter().filter(|r| !r.2.passed).count();
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        results.len() - failed,
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
