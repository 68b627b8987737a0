//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantity (run with `--nocapture` to see them).
//!
//! The shared d=4 benchmark model is trained once; its wall time is charged
//! to the edit-fidelity criterion, whose budget includes training.

mod common;

use std::time::Instant;

use ccnf::eval::{fit_probe, severity_sweep_report, SweepLevel};
use ccnf::field::{trace_exact, trace_hutchinson, Field, FieldKind, LinearField, MlpField};
use ccnf::flow::{AttributeVector, EmbeddingVector, FlowModel};
use ccnf::linalg;
use ccnf::solver::{integrate, AugmentedState, SolverConfig, TraceMode};
use ccnf::synth::AttrSampler;
use ccnf::train::{nll_batch, train, TraceChoice, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{bench_fixture, matexp, model_1d, pairs_from, random_contractive, simpson};

#[test]
fn c01_linear_field_closed_form() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_z: f64 = 0.0;
    let mut worst_delta: f64 = 0.0;
    for d in [2usize, 3, 4] {
        let a = random_contractive(&mut rng, d);
        let expm = matexp(&a);
        let tr = a.trace();
        let field = LinearField::new(a, 0).unwrap();
        let z0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected = linalg::matvec(&expm, &z0).unwrap();

        let out = integrate(
            &field,
            &AugmentedState::new(z0.clone()),
            0.0,
            1.0,
            &[],
            &SolverConfig::rk4(100),
            &TraceMode::Exact,
        )
        .unwrap();
        for (zi, ei) in out.z.iter().zip(&expected) {
            worst_z = worst_z.max((zi - ei).abs());
        }
        worst_delta = worst_delta.max((out.delta_logp + tr).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(worst_z < 1e-6, "state error {worst_z}");
    assert!(worst_delta < 1e-6, "delta_logp error {worst_delta}");
    assert!(secs < 1.0, "runtime {secs}s exceeds 1s");
    println!(
        "[acceptance] C1 linear-field closed form: PASS (max|z err|={worst_z:.2e}, max|delta err|={worst_delta:.2e}, {secs:.2}s)"
    );
}

#[test]
fn c02_nll_gradient_matches_finite_differences() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let model = FlowModel::new(
        FieldKind::Mlp(MlpField::new(2, 1, 8, &mut rng)),
        SolverConfig::default(),
        ccnf::flow::AttrStats::from_ranges(vec![(0.0, 1.0)]).unwrap(),
    )
    .unwrap();
    let batch: Vec<(EmbeddingVector, AttributeVector)> = (0..32)
        .map(|_| {
            (
                EmbeddingVector::new(vec![rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)])
                    .unwrap(),
                AttributeVector::new(vec![rng.gen_range(0.0..1.0)]).unwrap(),
            )
        })
        .collect();
    let (_, grad) = nll_batch(&model, &batch, TraceChoice::Exact, 0).unwrap();

    let flat = model.field().params().flatten();
    let h = 1e-5;
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    let mut idx_rng = ChaCha8Rng::seed_from_u64(203);
    while checked < 6 {
        let idx = idx_rng.gen_range(0..flat.len());
        let mut m = model.clone();
        let mut fv = flat.clone();
        fv[idx] += h;
        m.field_mut().params_mut().assign_flat(&fv).unwrap();
        let lp = nll_batch(&m, &batch, TraceChoice::Exact, 0).unwrap().0;
        fv[idx] -= 2.0 * h;
        m.field_mut().params_mut().assign_flat(&fv).unwrap();
        let lm = nll_batch(&m, &batch, TraceChoice::Exact, 0).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        let an = grad[idx];
        if fd.abs().max(an.abs()) < 1e-7 {
            continue; // parameter with negligible influence: no information
        }
        let rel = (fd - an).abs() / fd.abs().max(an.abs());
        worst = worst.max(rel);
        checked += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(worst < 1e-4, "worst relative error {worst}");
    assert!(secs < 30.0, "runtime {secs}s exceeds 30s");
    println!(
        "[acceptance] C2 gradient correctness: PASS ({checked} params, worst rel err {worst:.2e}, {secs:.1}s)"
    );
}

#[test]
fn c03_trained_density_integrates_to_one() {
    let fix = model_1d();
    let t0 = Instant::now();
    let points = 2001usize;
    let (lo, hi) = (-10.0, 10.0);
    let h = (hi - lo) / (points - 1) as f64;
    let mut worst: f64 = 0.0;
    for attr in [0.1, 0.5, 0.9] {
        let a = AttributeVector::new(vec![attr]).unwrap();
        let vals: Vec<f64> = (0..points)
            .map(|i| {
                let x = lo + h * i as f64;
                let s = EmbeddingVector::new(vec![x]).unwrap();
                fix.model.log_likelihood(&s, &a).unwrap().exp()
            })
            .collect();
        let integral = simpson(&vals, h);
        worst = worst.max((integral - 1.0).abs());
    }
    let secs = fix.train_secs + t0.elapsed().as_secs_f64();
    assert!(worst < 0.01, "normalization deviation {worst}");
    assert!(secs < 300.0, "runtime {secs}s exceeds 5min");
    println!(
        "[acceptance] C3 density normalization: PASS (max |∫p−1|={worst:.4}, {secs:.0}s incl {:.0}s training, final NLL {:.3})",
        fix.train_secs, fix.final_nll
    );
}

#[test]
fn c04_hutchinson_unbiasedness() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let field = MlpField::new(8, 2, 16, &mut rng);
    let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a = [0.3, 0.7];
    let t = 0.45;
    let exact = trace_exact(&field, &z, t, &a).unwrap().value;

    let n = 100_000usize;
    let mut probe_rng = ChaCha8Rng::seed_from_u64(405);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n {
        let v = trace_hutchinson(&field, &z, t, &a, 1, &mut probe_rng)
            .unwrap()
            .value;
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / n as f64;
    let var = (sumsq - sum * sum / n as f64) / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let secs = t0.elapsed().as_secs_f64();
    assert!(
        (mean - exact).abs() < 3.0 * se,
        "mean {mean} vs exact {exact} (se {se})"
    );
    assert!(secs < 60.0, "runtime {secs}s exceeds 1min");
    println!(
        "[acceptance] C4 hutchinson unbiasedness: PASS (mean {mean:.6} vs exact {exact:.6}, 3se={:.2e}, {secs:.1}s)",
        3.0 * se
    );
}

#[test]
fn c05_identity_edit_round_trip() {
    let fix = bench_fixture();
    let t0 = Instant::now();
    let test = fix
        .generator
        .clone()
        .with_seed(501)
        .generate_dataset(1000)
        .unwrap();
    let pairs = pairs_from(&test, fix.model.attr_stats());
    let cfg = fix.model.solver();
    let mut ratios: Vec<f64> = Vec::with_capacity(pairs.len());
    for (s, a) in &pairs {
        let edited = fix.model.edit(s, a, a).unwrap();
        let err: f64 = edited
            .values()
            .iter()
            .zip(s.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let tol = 10.0 * (cfg.atol + cfg.rtol * linalg::norm2(s.values()));
        ratios.push(err / tol);
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = ratios[ratios.len() / 2];
    let secs = t0.elapsed().as_secs_f64();
    assert!(median < 1.0, "median error ratio {median}");
    assert!(secs < 60.0, "runtime {secs}s exceeds 1min");
    println!(
        "[acceptance] C5 identity-edit round trip: PASS (median err / 10(atol+rtol|s|) = {median:.3}, {secs:.1}s)"
    );
}

#[test]
fn c06_edit_fidelity_vs_transport_oracle() {
    let fix = bench_fixture();
    let t0 = Instant::now();
    let test = fix
        .generator
        .clone()
        .with_seed(601)
        .generate_dataset(200)
        .unwrap();
    let stats = fix.model.attr_stats();
    let pairs = pairs_from(&test, stats);
    let mut err_sum = 0.0;
    let mut disp_sum = 0.0;
    for ((s, a), _raw) in pairs.iter().zip(&test.attributes) {
        // Target: +0.3 (normalized) along axis 0, clamped into [0,1].
        let mut tvals = a.values().to_vec();
        tvals[0] = (tvals[0] + 0.3).min(1.0);
        let a_t = AttributeVector::new(tvals.clone()).unwrap();
        let edited = fix.model.edit(s, a, &a_t).unwrap();
        let oracle = fix
            .generator
            .oracle_edit(s.values(), a.values(), &tvals)
            .unwrap();
        err_sum += edited
            .values()
            .iter()
            .zip(&oracle)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        disp_sum += oracle
            .iter()
            .zip(s.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
    }
    let ratio = err_sum / disp_sum;
    let secs = fix.train_secs + t0.elapsed().as_secs_f64();
    let nll_gap = fix.final_nll - fix.generator.conditional_entropy();
    assert!(
        nll_gap.abs() < 0.1,
        "benchmark NLL {} vs entropy {} (gap {nll_gap})",
        fix.final_nll,
        fix.generator.conditional_entropy()
    );
    assert!(ratio < 0.1, "edit error ratio {ratio}");
    assert!(secs < 600.0, "runtime {secs}s exceeds 10min");
    println!(
        "[acceptance] C6 edit fidelity: PASS (mean err / mean disp = {ratio:.3}, {secs:.0}s incl {:.0}s training, final NLL {:.3})",
        fix.train_secs, fix.final_nll
    );
}

#[test]
fn c07_severity_sweep_trends() {
    let fix = bench_fixture();
    let t0 = Instant::now();
    // Probe fitted on the (uniform) training distribution.
    let probe_ds = fix.generator.generate_dataset(10_000).unwrap();
    let probe = fit_probe(&probe_ds, 1e-6).unwrap();
    // Test set with severity skewed low, as typical datasets are.
    let test = fix
        .generator
        .clone()
        .with_sampler(AttrSampler::SkewLow)
        .with_seed(701)
        .generate_dataset(200)
        .unwrap();
    let levels = [
        SweepLevel::Identity,
        SweepLevel::Raw(30.0),
        SweepLevel::Raw(60.0),
        SweepLevel::Raw(90.0),
    ];
    let report = severity_sweep_report(&fix.model, &probe, &test, 0, &levels, 10, 702).unwrap();

    let ident = &report.rows[0];
    assert!(
        ident.eer < 0.02,
        "identity-level EER {} not below 2%",
        ident.eer
    );
    let raw_rows = &report.rows[1..];
    for w in raw_rows.windows(2) {
        assert!(
            w[1].mean_pred > w[0].mean_pred,
            "predicted attribute not strictly increasing: {} -> {}",
            w[0].mean_pred,
            w[1].mean_pred
        );
        assert!(
            w[1].eer >= w[0].eer,
            "EER decreased across severity: {} -> {}",
            w[0].eer,
            w[1].eer
        );
    }
    let secs = t0.elapsed().as_secs_f64();
    println!(
        "[acceptance] C7 severity-sweep trends: PASS (identity EER {:.4}; mean_pred {:.1}/{:.1}/{:.1}; EER {:.3}/{:.3}/{:.3}; {secs:.0}s)",
        ident.eer,
        raw_rows[0].mean_pred,
        raw_rows[1].mean_pred,
        raw_rows[2].mean_pred,
        raw_rows[0].eer,
        raw_rows[1].eer,
        raw_rows[2].eer
    );
}

#[test]
fn c08_learning_rate_schedule_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let model = FlowModel::new(
        FieldKind::Mlp(MlpField::new(1, 1, 2, &mut rng)),
        SolverConfig::default(),
        ccnf::flow::AttrStats::from_ranges(vec![(0.0, 1.0)]).unwrap(),
    )
    .unwrap();
    let data: Vec<(EmbeddingVector, AttributeVector)> = (0..4)
        .map(|i| {
            (
                EmbeddingVector::new(vec![i as f64 * 0.2 - 0.3]).unwrap(),
                AttributeVector::new(vec![i as f64 * 0.25]).unwrap(),
            )
        })
        .collect();
    let cfg = TrainConfig {
        batch_size: 4,
        lr0: 1e-4,
        decay: 0.98,
        decay_every: 100,
        epochs: 201,
        trace: TraceChoice::Exact,
        seed: 3,
    };
    let report = train(model, data, cfg.clone()).unwrap();
    assert_eq!(report.learning_rates.len(), 201);
    for (e, lr) in report.learning_rates.iter().enumerate() {
        let expected = cfg.lr0 * cfg.decay.powi((e / cfg.decay_every) as i32);
        assert_eq!(*lr, expected, "epoch {e}");
    }
    // Spot values at the decay boundaries.
    assert_eq!(report.learning_rates[0], 1e-4);
    assert_eq!(report.learning_rates[99], 1e-4);
    assert_eq!(report.learning_rates[100], 1e-4 * 0.98);
    assert_eq!(report.learning_rates[200], 1e-4 * 0.98 * 0.98);
    println!(
        "[acceptance] C8 schedule fidelity: PASS (lr trace exact over 201 epochs, decays at 100/200)"
    );
}

#[test]
fn c09_byte_identical_runs() {
    let bin = env!("CARGO_BIN_EXE_ccnf");
    let run_pipeline = |dir: &std::path::Path| {
        let data = dir.join("data.csv");
        let ckpt = dir.join("model.ckpt");
        let report = dir.join("report.csv");
        let run = |args: &[&str]| {
            let out = std::process::Command::new(bin)
                .args(args)
                .output()
                .expect("spawn ccnf");
            assert!(
                out.status.success(),
                "command {:?} failed: {}",
                args,
                String::from_utf8_lossy(&out.stderr)
            );
        };
        run(&[
            "gen",
            "--d",
            "3",
            "--k",
            "1",
            "--n",
            "400",
            "--seed",
            "11",
            "--out",
            data.to_str().unwrap(),
        ]);
        run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--epochs",
            "3",
            "--hidden",
            "8",
            "--lr0",
            "1e-3",
            "--batch-size",
            "100",
            "--seed",
            "11",
        ]);
        run(&[
            "eval",
            "--model",
            ckpt.to_str().unwrap(),
            "--probe-data",
            data.to_str().unwrap(),
            "--test-data",
            data.to_str().unwrap(),
            "--axis",
            "0",
            "--levels",
            "identity,0.5",
            "--imposters",
            "4",
            "--seed",
            "3",
            "--out",
            report.to_str().unwrap(),
        ]);
        [
            std::fs::read(&data).unwrap(),
            std::fs::read(&ckpt).unwrap(),
            std::fs::read(dir.join("model.nll.csv")).unwrap(),
            std::fs::read(&report).unwrap(),
            std::fs::read(dir.join("report.txt")).unwrap(),
        ]
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = run_pipeline(d1.path());
    let b = run_pipeline(d2.path());
    let names = [
        "dataset",
        "checkpoint",
        "nll curve",
        "eval report",
        "eval table",
    ];
    for ((x, y), name) in a.iter().zip(&b).zip(names) {
        assert_eq!(x, y, "{name} differs between identical runs");
    }
    println!(
        "[acceptance] C9 reproducibility: PASS (dataset, checkpoint, NLL curve, and reports byte-identical across two runs)"
    );
}

#[test]
fn c10_rk4_convergence_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let a = random_contractive(&mut rng, 3);
    let expm = matexp(&a);
    let field = LinearField::new(a, 0).unwrap();
    let z0 = vec![0.7, -0.3, 0.5];
    let exact = linalg::matvec(&expm, &z0).unwrap();

    let step_counts = [4usize, 8, 16, 32];
    let mut errs = Vec::new();
    for steps in step_counts {
        let out = integrate(
            &field,
            &AugmentedState::new(z0.clone()),
            0.0,
            1.0,
            &[],
            &SolverConfig::rk4(steps),
            &TraceMode::Off,
        )
        .unwrap();
        let err: f64 = out
            .z
            .iter()
            .zip(&exact)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        errs.push(err);
    }
    let slope = (errs[0].ln() - errs[3].ln())
        / ((1.0 / step_counts[0] as f64).ln() - (1.0 / step_counts[3] as f64).ln());
    assert!(
        (3.7..=4.3).contains(&slope),
        "slope {slope} outside [3.7, 4.3] (errors {errs:?})"
    );
    println!("[acceptance] C10 RK4 order check: PASS (empirical slope {slope:.3})");
}
