//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! Failures are reported, not hidden; set `ACCORDION_STRICT_ACCEPTANCE=1` to
//! also turn any failure into a non-zero exit.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use accordion_cli::config::Generator;
use accordion_cli::{verify, RunSpec, Which};
use accordion_core::compressor::{self, decompress, LayerState, Payload};
use accordion_core::model::{finite_diff_grad, loss_and_grad};
use accordion_core::presets;
use accordion_core::simulator::{run, Policy};
use accordion_core::verify::{
    expected_lasso_grad, lasso_mean_grad, lemma_montecarlo, nnz, stochastic_lasso_grads, topk_overlap, LemmaParams,
};
use accordion_core::{linalg, AccordionConfig, Dataset, Level, Model, ModelKind, Tensor};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, format!("took {t:.1?}, limit {limit:?}"))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, normal_vec(rng, rows * cols)).unwrap()
}

fn error_feedback_conservation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut counts = [0usize; 3];
    for t in 0..10_000u64 {
        let (rows, cols) = match rng.random_range(0..4) {
            0 => (1, rng.random_range(1..40)),
            1 => (rng.random_range(1..40), 1),
            _ => (rng.random_range(2..24), rng.random_range(2..24)),
        };
        let which = rng.random_range(0..3);
        let level = match which {
            0 => Level::Dense,
            1 => Level::PowerSgd {
                rank: rng.random_range(1..=rows.min(cols)),
            },
            _ => Level::TopK {
                fraction: rng.random_range(0.01..=1.0),
            },
        };
        counts[which] += 1;
        let g = random_tensor(&mut rng, rows, cols);
        let mut state = LayerState::new((rows, cols), t);
        state.residual = random_tensor(&mut rng, rows, cols).scale(rng.random_range(0.0..3.0));
        let before = state.residual.clone();
        let msg = compressor::compress(&g, &level, &mut state, 0).map_err(|e| e.to_string())?;
        let rebuilt = decompress(&msg, (rows, cols))
            .map_err(|e| e.to_string())?
            .add(&state.residual)
            .unwrap();
        let target = g.add(&before).unwrap();
        let scale = target.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = rebuilt
            .data()
            .iter()
            .zip(target.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / scale.max(f64::MIN_POSITIVE);
        worst = worst.max(err);
    }
    ensure(worst <= 1e-12, format!("max relative error {worst:e}"))?;
    within(Duration::from_secs(10), start)?;
    Ok(format!(
        "max relative error {worst:.1e} over 10^4 calls (dense {}, powersgd {}, topk {})",
        counts[0], counts[1], counts[2]
    ))
}

/// Top-`k` of `v` as selected by the compressor. `v` becomes the first row of
/// zero-padded 2×c layer (1-D layers are sent dense); padding zeros sit at
/// higher indices, so they always lose ties to entries of `v`.
fn sparse_indices(v: &[f64], k: usize) -> Result<Vec<usize>, String> {
    let cols = v.len().max(2);
    let mut padded = v.to_vec();
    padded.resize(2 * cols, 0.0);
    let g = Tensor::from_vec(2, cols, padded).unwrap();
    let fraction = k as f64 / (2 * cols) as f64;
    ensure(
        compressor::topk_count(fraction, 2 * cols) == k,
        format!("⌈{fraction}·{}⌉ ≠ {k}", 2 * cols),
    )?;
    let mut state = LayerState::new(g.shape(), 0);
    let msg = compressor::compress(&g, &Level::TopK { fraction }, &mut state, 0).map_err(|e| e.to_string())?;
    match msg.payload {
        Payload::Sparse { indices, .. } => Ok(indices.into_iter().map(|i| i as usize).collect()),
        other => Err(format!("expected a sparse payload, got {other:?}")),
    }
}

fn topk_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut small = 0;
    for trial in 0..300 {
        let d = rng.random_range(1..=12);
        // half the trials use a few integer values to force ties
        let v: Vec<f64> = if trial % 2 == 0 {
            normal_vec(&mut rng, d)
        } else {
            (0..d).map(|_| rng.random_range(-2i32..=2) as f64).collect()
        };
        for k in 1..=d {
            let got = sparse_indices(&v, k)?;
            let (best, optimal) = common::best_k_sparse(&v, k);
            let residual: f64 = (0..d).filter(|i| !got.contains(i)).map(|i| v[i] * v[i]).sum();
            ensure(
                got.len() == k && (residual - best).abs() <= 1e-12,
                format!("d={d} k={k}: residual {residual} vs optimum {best}"),
            )?;
            ensure(
                optimal.contains(&got),
                format!("d={d} k={k}: support {got:?} not among optimal supports"),
            )?;
            ensure(
                got == common::full_sort_topk(&v, k),
                format!("d={d} k={k}: tie-breaking differs from full sort"),
            )?;
            small += 1;
        }
    }
    let mut large = 0;
    for trial in 0..200 {
        let d = if trial == 0 {
            10_000
        } else {
            rng.random_range(1..=10_000)
        };
        let v: Vec<f64> = if trial % 3 == 0 {
            (0..d).map(|_| rng.random_range(-3i32..=3) as f64).collect()
        } else {
            normal_vec(&mut rng, d)
        };
        let k = rng.random_range(1..=d);
        let expected = common::full_sort_topk(&v, k);
        let got = sparse_indices(&v, k)?;
        ensure(
            got == expected,
            format!("d={d} k={k}: selection differs from full sort"),
        )?;
        large += 1;
    }
    within(Duration::from_secs(30), start)?;
    Ok(format!(
        "{small} exhaustive (d ≤ 12) and {large} full-sort (d ≤ 10^4) cases agree"
    ))
}

fn powersgd_exact_recovery() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for t in 0..100u64 {
        let (m, n) = if t == 0 {
            (64, 48)
        } else {
            (rng.random_range(4..=64), rng.random_range(4..=48))
        };
        let r = rng.random_range(1..=4);
        let s = rng.random_range(1..=r);
        let u = random_tensor(&mut rng, m, s);
        let v = random_tensor(&mut rng, n, s);
        let g = u.matmul(&v.transpose()).unwrap();
        let mut state = LayerState::new((m, n), 100 + t);
        let msg = compressor::compress(&g, &Level::PowerSgd { rank: r }, &mut state, 0).map_err(|e| e.to_string())?;
        let err = linalg::norm2(decompress(&msg, (m, n)).unwrap().sub(&g).unwrap().data());
        worst = worst.max(err);
        ensure(
            err <= 1e-8,
            format!("{m}x{n}, rank {s} ≤ r={r}: Frobenius error {err:e}"),
        )?;
    }
    within(Duration::from_secs(10), start)?;
    Ok(format!("100 matrices, worst Frobenius error {worst:.1e}"))
}

fn decision_table() -> Outcome {
    let low = Level::PowerSgd { rank: 2 };
    let high = Level::PowerSgd { rank: 1 };
    let decide = |p: f64, c: f64, g0: f64, g1: f64| accordion_core::accordion::decide(p, c, g0, g1, 0.5, &low, &high);
    let table = [
        ((10.0, 4.0, 0.1, 0.1), low),
        ((10.0, 6.0, 0.1, 0.1), high),
        ((10.0, 16.0, 0.1, 0.1), low),
        ((10.0, 9.0, 0.1, 0.01), low),
        ((10.0, 5.0, 0.1, 0.1), low),
    ];
    for ((p, c, g0, g1), want) in table {
        let got = decide(p, c, g0, g1);
        ensure(
            got == want,
            format!("decide({p}, {c}, {g0}, {g1}) = {got}, want {want}"),
        )?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let p: f64 = rng.random_range(0.01..100.0);
        let c: f64 = rng.random_range(0.0..200.0);
        let base = decide(p, c, 0.1, 0.1);
        for scale in [1e-6, 1.0, 1e6] {
            let got = decide(scale * p, scale * c, 0.1, 0.1);
            ensure(got == base, format!("scale {scale} flips ({p}, {c})"))?;
        }
    }
    Ok("5 table rows exact; 1000 norm pairs scale-invariant at c ∈ {1e-6, 1, 1e6}".into())
}

fn canonical(policy: Policy, seed: u64) -> accordion_core::simulator::RunResult {
    let (_, model, data) = presets::canonical_desk_run(seed);
    let cfg = presets::canonical_train_config(policy, seed);
    run(&cfg, model, &data).expect("canonical run")
}

fn lr_decay_forcing() -> Outcome {
    let acc = presets::canonical_accordion();
    let result = canonical(Policy::Accordion(acc.clone()), 0);
    let cfg = presets::canonical_train_config(Policy::Accordion(acc.clone()), 0);
    for &d in &cfg.decay_epochs {
        let levels = &result.metrics[d].levels;
        ensure(
            levels.iter().all(|l| *l == acc.level_low),
            format!("epoch {d} levels {}", result.metrics[d].level_summary()),
        )?;
    }
    Ok(format!(
        "all units at {} in decay epochs {:?}",
        acc.level_low, cfg.decay_epochs
    ))
}

fn accounting_sandwich() -> Outcome {
    let start = Instant::now();
    let acc = presets::canonical_accordion();
    let high = canonical(Policy::Static(acc.level_high), 0).total_floats();
    let low = canonical(Policy::Static(acc.level_low), 0).total_floats();
    let adaptive = canonical(Policy::Accordion(acc.clone()), 0);
    let floats = adaptive.total_floats();
    let seen = |l: Level| adaptive.metrics.iter().any(|m| m.levels.contains(&l));
    ensure(
        high < floats && floats < low,
        format!("high {high}, accordion {floats}, low {low}"),
    )?;
    ensure(
        seen(acc.level_low) && seen(acc.level_high),
        "trace lacks one of the levels",
    )?;
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "high {high} < accordion {floats} < low {low}; both levels used"
    ))
}

fn convergence_parity() -> Outcome {
    let start = Instant::now();
    let r2 = Level::PowerSgd { rank: 2 };
    let r1 = Level::PowerSgd { rank: 1 };
    let policies = [
        Policy::Static(Level::Dense),
        Policy::Static(r2),
        Policy::Accordion(AccordionConfig {
            period_epochs: 3,
            ..AccordionConfig::compression(r2, r1)
        }),
    ];
    let mut loss = [0.0; 3];
    let mut floats = [0u64; 3];
    for seed in 0..3 {
        for (i, p) in policies.iter().enumerate() {
            let (cfg, model, data) = presets::least_squares_run(p.clone(), seed);
            let r = run(&cfg, model, &data).map_err(|e| e.to_string())?;
            loss[i] += r.final_metric() / 3.0;
            floats[i] += r.total_floats();
        }
    }
    let [dense, low, adaptive] = loss;
    let rel = |a: f64, b: f64| (a - b).abs() / b;
    ensure(rel(low, dense) <= 0.05, format!("powersgd:2 {low} vs dense {dense}"))?;
    ensure(
        rel(adaptive, low) <= 0.05,
        format!("accordion {adaptive} vs powersgd:2 {low}"),
    )?;
    ensure(
        floats[2] < floats[1],
        format!("accordion floats {} vs {}", floats[2], floats[1]),
    )?;
    within(Duration::from_secs(120), start)?;
    Ok(format!(
        "mean final MSE dense {dense:.6}, powersgd:2 {low:.6} ({:+.2}%), accordion {adaptive:.6} ({:+.2}%); floats {} < {}",
        100.0 * (low - dense) / dense,
        100.0 * (adaptive - low) / low,
        floats[2],
        floats[1]
    ))
}

const BATCH_SIZE_RUN: [&str; 14] = [
    "model.kind=least_squares",
    "data.generator=least_squares",
    "data.dim=20",
    "data.samples=32768",
    "train.workers=4",
    "train.epochs=12",
    "train.lr=0.01",
    "train.lr_reference_batch=auto",
    "train.warmup=0",
    "train.decay_epochs=",
    "compressor.scheme=batchsize",
    "compressor.low.batch=512",
    "compressor.high.batch=4096",
    "accordion.period=2",
];

fn batch_size_arithmetic() -> Outcome {
    let mut spec = RunSpec::default();
    for kv in BATCH_SIZE_RUN {
        spec.apply_assignment(kv).map_err(|e| e.to_string())?;
    }
    assert_eq!(spec.generator, Generator::LeastSquares);
    let out = accordion_cli::train(&spec, 0, false).map_err(|e| e.to_string())?;
    let csv = out.csv();
    let rows: Vec<Vec<String>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    let lr = |r: &Vec<String>| r[3].parse::<f64>().unwrap();
    let iters = |i: usize| {
        let cum = |j: usize| rows[j][6].parse::<u64>().unwrap();
        cum(i) - if i == 0 { 0 } else { cum(i - 1) }
    };
    let switch = rows
        .iter()
        .position(|r| r[4] == "batch:4096*1")
        .ok_or("batch never grew to 4096")?;
    ensure(
        switch > 0 && rows[switch - 1][4] == "batch:512*1",
        "trace did not start at 512",
    )?;
    let (lr0, lr1) = (lr(&rows[switch - 1]), lr(&rows[switch]));
    let (it0, it1) = (iters(switch - 1), iters(switch));
    ensure((lr1 / lr0 - 8.0).abs() <= 1e-12, format!("lr {lr0} → {lr1}"))?;
    ensure(it0 == 8 * it1, format!("rounds per epoch {it0} → {it1}"))?;
    Ok(format!(
        "switch at epoch {switch}: lr {lr0} → {lr1} (×{}), rounds/epoch {it0} → {it1} (÷{})",
        lr1 / lr0,
        it0 / it1
    ))
}

fn lemma_verification() -> Outcome {
    let start = Instant::now();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(5..60);
        let k1 = rng.random_range(0..=d.min(8));
        let k2 = rng.random_range(0..=d.min(8));
        let mut p = LemmaParams::random(d, k1, k2, rng.random_range(0.01..2.0), seed);
        p.lambda = rng.random_range(0.0..1.0);
        for (name, g) in [
            ("closed form", expected_lasso_grad(&p)),
            ("exact mean", lasso_mean_grad(&p)),
        ] {
            ensure(
                nnz(&g) <= k1 + k2,
                format!("seed {seed}: {name} has {} non-zeros > {}", nnz(&g), k1 + k2),
            )?;
        }
    }

    let base = LemmaParams {
        trials: 1000,
        ..LemmaParams::random(20, 3, 3, 1.0, 9)
    };
    let mut swept = Vec::new();
    for sigma in [1e-5, 3e-5, 1e-4, 3e-4, 1e-3] {
        let r = lemma_montecarlo(&LemmaParams { sigma, ..base.clone() }).map_err(|e| e.to_string())?;
        if r.chebyshev_bound < 1.0 {
            ensure(
                r.empirical_tail <= r.chebyshev_bound,
                format!("σ={sigma}: tail {} > bound {}", r.empirical_tail, r.chebyshev_bound),
            )?;
            swept.push(format!("σ={sigma:e}: {} ≤ {:.2e}", r.empirical_tail, r.chebyshev_bound));
        }
    }
    ensure(
        swept.len() >= 3,
        format!("only {} σ values had a bound below 1", swept.len()),
    )?;
    let tiny = lemma_montecarlo(&LemmaParams { sigma: 1e-6, ..base }).map_err(|e| e.to_string())?;
    ensure(
        tiny.empirical_tail < 1e-3,
        format!("σ=1e-6 tail {}", tiny.empirical_tail),
    )?;
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "100 supports ≤ k1+k2; tail vs bound {}; σ=1e-6 tail {}",
        swept.join(", "),
        tiny.empirical_tail
    ))
}

fn topk_overlap_lemma_regime() -> Outcome {
    // Top-10% of d = 100 coordinates is exactly the k1 + k2 = 10 support bound.
    let base = LemmaParams {
        lambda: 1.0,
        ..LemmaParams::random(100, 5, 5, 1.0, 0)
    };
    let mu_norm = linalg::norm2(&base.mu);
    let mut report = Vec::new();
    let mut ok = true;
    for ratio in [0.01, 0.02, 0.05] {
        let p = LemmaParams {
            sigma: ratio * mu_norm,
            ..base.clone()
        };
        let grads = stochastic_lasso_grads(&p, 200).map_err(|e| e.to_string())?;
        let overlap = topk_overlap(&grads, 0.1, 0).map_err(|e| e.to_string())?;
        ok &= overlap >= 0.9;
        report.push(format!("σ={ratio}‖μ‖: {overlap:.3}"));
    }
    let detail = format!("mean pairwise Top10% overlap over 200 gradients: {}", report.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn hessian_and_gradient_traces() -> Outcome {
    let spec = RunSpec::default();
    let report = verify::run(Which::Trace, &spec, 0).map_err(|e| e.to_string())?;
    let summary: Vec<String> = report
        .checks
        .iter()
        .map(|c| format!("{} {}", c.name, if c.passed { "ok" } else { &c.detail }))
        .collect();
    let detail = summary.join("; ");
    if report.passed {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = 6;
    let reg = {
        let (data, _) = accordion_core::model::gen_least_squares(d, 16, 0.3, 5);
        data
    };
    let cls = accordion_core::model::gen_two_gaussian(&[1.0, -0.5, 0.0, 0.3, 0.0, 0.8], 1.0, 16, 5).unwrap();
    let cases: [(ModelKind, &Dataset); 4] = [
        (ModelKind::LeastSquares, &reg),
        (ModelKind::Lasso, &reg),
        (ModelKind::Logistic, &cls),
        (ModelKind::Mlp, &cls),
    ];
    let mut worst = 0.0f64;
    for (kind, data) in cases {
        let batch = data.all_indices();
        for point in 0..50 {
            let mut model = Model::build(kind, d, 4, 0.1, point);
            let params = normal_vec(&mut rng, model.num_params());
            model.set_params(&params).unwrap();
            let g = loss_and_grad(&model, data, &batch).unwrap().1.flatten();
            let fd = finite_diff_grad(&model, data, &batch, 1e-6).unwrap().flatten();
            let diff = linalg::norm2(&g.iter().zip(&fd).map(|(a, b)| a - b).collect::<Vec<_>>());
            let rel = diff / linalg::norm2(&g).max(1e-8);
            worst = worst.max(rel);
            ensure(
                rel <= 1e-4,
                format!("{} point {point}: relative error {rel:e}", kind.name()),
            )?;
        }
    }
    Ok(format!("4 models × 50 points, worst relative error {worst:.1e}"))
}

fn determinism() -> Outcome {
    let variants: [&[&str]; 3] = [
        &[],
        &[
            "compressor.scheme=topk",
            "train.epochs=8",
            "train.decay_epochs=4,6",
            "train.workers=3",
        ],
        &BATCH_SIZE_RUN,
    ];
    for extra in variants {
        let mut spec = RunSpec::default();
        for kv in extra {
            spec.apply_assignment(kv).map_err(|e| e.to_string())?;
        }
        let reference = accordion_cli::train(&spec, 1, false).map_err(|e| e.to_string())?.csv();
        for threads in [1, 2, 4, 0] {
            let again = accordion_cli::train(&spec, threads, false)
                .map_err(|e| e.to_string())?
                .csv();
            ensure(
                again == reference,
                format!("{extra:?}: CSV differs with {threads} threads"),
            )?;
        }
    }
    Ok("canonical, topk and batch-size specs × threads {1, 2, 4, auto}: byte-identical CSV".into())
}

fn main() {
    let criteria: [Criterion; 13] = [
        ("error-feedback conservation", error_feedback_conservation),
        ("top-k oracle equivalence", topk_oracle_equivalence),
        ("powersgd exact low-rank recovery", powersgd_exact_recovery),
        ("accordion decision table", decision_table),
        ("lr-decay forcing", lr_decay_forcing),
        ("accounting sandwich", accounting_sandwich),
        ("convergence parity", convergence_parity),
        ("batch-size arithmetic", batch_size_arithmetic),
        ("lasso sparsity and tail bound", lemma_verification),
        ("top-k overlap in the small-noise regime", topk_overlap_lemma_regime),
        (
            "hessian and gradient-norm critical windows",
            hessian_and_gradient_traces,
        ),
        ("gradient correctness", gradient_correctness),
        ("determinism across thread counts", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    let strict = std::env::var("ACCORDION_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        std::process::exit(1);
    }
}
