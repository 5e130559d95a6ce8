//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches stdout. Failing criteria
//! are reported but only fail the process when `LKF_ACCEPTANCE_STRICT=1`.
//! `LKF_ACCEPTANCE_ONLY=2,3` restricts the run to the listed criteria.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use learned_kalman::autodiff::{Tape, Var};
use learned_kalman::bench::report::rows_to_csv;
use learned_kalman::bench::{self, nclt, ExperimentConfig, MethodSpec, ReportRow};
use learned_kalman::filters::{FilterKind, GaussianFilter, StateFilter};
use learned_kalman::gainnet::{FeatureScaling, Gru, Linear, ParamSet};
use learned_kalman::metrics::to_db;
use learned_kalman::ssm::{
    canonical_f_with_root, exchange_h, generate_dataset, linear_model, lorenz_f, InitialState, Map,
    NoiseSpec, Split,
};
use learned_kalman::trainer::{evaluate_filter, LearnedConfig};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 13] = [
        (1, "KF matches analytic posterior trace", c1_kf_consistency),
        (2, "learned filter reaches KF MSE on linear model", c2_linear_mmse),
        (3, "baseline ordering at transfer length", c3_transfer_ordering),
        (4, "evolution rotation mismatch gain", c4_rotation_gain),
        (5, "EKF coincides with KF on linear models", c5_ekf_equals_kf),
        (6, "loss gradient wrt gain identity", c6_gain_gradient),
        (7, "autodiff finite-difference soundness", c7_autodiff),
        (8, "Lorenz discretization oracle", c8_lorenz_oracle),
        (9, "Lorenz full-information ordering", c9_lorenz_full),
        (10, "Lorenz mismatch robustness", c10_lorenz_mismatch),
        (11, "PF approaches KF as particles grow", c11_pf_sanity),
        (12, "NCLT-style pipeline beats dead reckoning", c12_nclt),
        (13, "reruns give byte-identical reports", c13_determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("LKF_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let strict = std::env::var("LKF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let out = run();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("[{verdict}] {id:>2} {name}: {} ({:.1}s)", out.detail, t0.elapsed().as_secs_f64());
        if !out.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        if strict {
            std::process::exit(1);
        }
    }
}

// ---------------------------------------------------------------- helpers

/// Generates, trains and evaluates a scenario in a scratch directory.
fn run_scenario(cfg: &ExperimentConfig) -> (Vec<ReportRow>, f64) {
    let dir = tempfile::tempdir().expect("scratch dir");
    bench::generate(cfg, dir.path(), false).expect("generate");
    let t0 = Instant::now();
    bench::train_all(cfg, dir.path(), None, false).expect("train");
    let train_s = t0.elapsed().as_secs_f64();
    let rows = bench::evaluate_all(cfg, dir.path(), None).expect("evaluate").into_iter().map(|(r, _)| r).collect();
    (rows, train_s)
}

fn lookup(rows: &[ReportRow]) -> HashMap<(String, String, i64), f64> {
    rows.iter()
        .map(|r| ((r.scenario.clone(), r.method.clone(), (r.inv_r2_db * 100.0).round() as i64), r.mse_db))
        .collect()
}

fn get(table: &HashMap<(String, String, i64), f64>, scenario: &str, method: &str, inv_db: f64) -> f64 {
    *table
        .get(&(scenario.to_string(), method.to_string(), (inv_db * 100.0).round() as i64))
        .unwrap_or_else(|| panic!("no row for {scenario} {method} {inv_db}"))
}

fn linear_2x2(root: f64) -> learned_kalman::ssm::SSModel {
    linear_model(canonical_f_with_root(2, root), exchange_h(2, 2)).expect("2x2 model")
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    // kept away from zero so relu kinks are never straddled by the difference step
    DMatrix::from_fn(r, c, |_, _| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) { v } else { -v }
    })
}

/// Largest relative error between the tape gradient and central differences over
/// every entry of every leaf.
fn fd_error(leaves: &[DMatrix<f64>], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[DMatrix<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let root = build(&mut tape, &vars);
        tape.scalar(root)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|v| tape.leaf(v.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root).expect("backward");
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for idx in 0..leaf.len() {
            let h = 1e-6 * leaf[idx].abs().max(1.0);
            let mut plus = leaves.to_vec();
            plus[k][idx] += h;
            let mut minus = leaves.to_vec();
            minus[k][idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max((analytic[idx] - fd).abs() / analytic[idx].abs().max(fd.abs()).max(1e-2));
        }
    }
    worst
}

// ---------------------------------------------------------------- criteria

fn c1_kf_consistency() -> Outcome {
    let t0 = Instant::now();
    let model = linear_2x2(0.5);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for inv_db in [-10.0, 0.0, 10.0, 20.0] {
        let noise = NoiseSpec::from_db(inv_db, 0.0);
        let cov = noise.covariances(2, 2);
        let test = generate_dataset(&model, &cov, &InitialState::default(), 200, 100, 41, Split::Test).expect("data");
        let mut kf = GaussianFilter::kalman(&model, &cov).expect("kf");
        let empirical = evaluate_filter(&mut kf, &test).expect("filter").mse_db;
        // the posterior covariance does not depend on the observations
        let traj = &test.trajectories[0];
        kf.reset(&traj.x0);
        let mut trace = 0.0;
        for t in 0..traj.len() {
            kf.step(&traj.observations.column(t).into_owned()).expect("step");
            trace += kf.posterior_cov().expect("gaussian").trace();
        }
        // the reported MSE averages over state components as well as time
        let analytic = to_db(trace / (traj.len() * model.m()) as f64);
        worst = worst.max((empirical - analytic).abs());
        parts.push(format!("{inv_db}dB {empirical:.2}/{analytic:.2}"));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 0.5 && elapsed < 60.0,
        format!("max gap {worst:.3} dB <= 0.5 over 200x T=100 [{}]", parts.join(", ")),
    )
}

/// linear-transfer rows, shared by criteria 2 and 3.
fn transfer_rows() -> &'static (Vec<ReportRow>, f64) {
    static ROWS: std::sync::OnceLock<(Vec<ReportRow>, f64)> = std::sync::OnceLock::new();
    ROWS.get_or_init(|| {
        let cfg = bench::builtin("linear-transfer").expect("builtin");
        let dir = tempfile::tempdir().expect("scratch dir");
        bench::generate(&cfg, dir.path(), false).expect("generate");
        let learned = vec!["learned-c1".to_string()];
        let t0 = Instant::now();
        bench::train_all(&cfg, dir.path(), Some(&learned), false).expect("train learned");
        let learned_s = t0.elapsed().as_secs_f64();
        let baselines: Vec<String> =
            cfg.methods.iter().map(MethodSpec::label).filter(|l| l.contains("rnn")).collect();
        bench::train_all(&cfg, dir.path(), Some(&baselines), false).expect("train baselines");
        let rows = bench::evaluate_all(&cfg, dir.path(), None).expect("evaluate");
        (rows.into_iter().map(|(r, _)| r).collect(), learned_s)
    })
}

fn c2_linear_mmse() -> Outcome {
    let (rows, train_s) = transfer_rows();
    let t = lookup(rows);
    let gap = |s: &str| get(&t, s, "learned-c1", 20.0) - get(&t, s, "kf", 20.0);
    let (g20, g200) = (gap("linear-transfer@T20"), gap("linear-transfer@T200"));
    outcome(
        g20.abs() <= 0.5 && g200.abs() <= 0.5 && *train_s <= 900.0,
        format!("learned-kf gap T=20 {g20:+.3} dB, T=200 {g200:+.3} dB (tol 0.5); training {train_s:.0}s <= 900s"),
    )
}

fn c3_transfer_ordering() -> Outcome {
    let (rows, _) = transfer_rows();
    let t = lookup(rows);
    let drift = |m: &str| get(&t, "linear-transfer@T200", m, 20.0) - get(&t, "linear-transfer@T20", m, 20.0);
    let (v, mb, mbd, l) = (drift("vanilla-rnn"), drift("mb-rnn"), drift("mb-rnn-diff"), drift("learned-c1"));
    outcome(
        v > 20.0 && mb > 20.0 && mbd.abs() <= 1.0 && l.abs() <= 1.0,
        format!(
            "T200-T20: vanilla {v:+.2}, mb-rnn {mb:+.2} (need >20); mb-rnn-diff {mbd:+.2}, learned {l:+.2} (need |.|<=1)"
        ),
    )
}

fn c4_rotation_gain() -> Outcome {
    let t0 = Instant::now();
    let (rows, _) = run_scenario(&bench::builtin("linear-rotation").expect("builtin"));
    let t = lookup(&rows);
    let s = "linear-rotation";
    let (kf, oracle, learned) = (get(&t, s, "kf", 20.0), get(&t, s, "kf-oracle", 20.0), get(&t, s, "learned-c2", 20.0));
    let elapsed = t0.elapsed().as_secs_f64();
    outcome(
        kf - learned >= 2.0 && learned - oracle <= 1.0 && elapsed <= 1200.0,
        format!(
            "gain over mismatched KF {:.2} dB (>=2), gap to matched KF {:.2} dB (<=1); {elapsed:.0}s <= 1200s",
            kf - learned,
            learned - oracle
        ),
    )
}

fn c5_ekf_equals_kf() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let f = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-0.6..0.6));
        let h = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let model = linear_model(f, h).expect("model");
        let cov = NoiseSpec::from_db(rng.gen_range(-10.0..20.0), -10.0).covariances(m, n);
        let data = generate_dataset(&model, &cov, &InitialState::default(), 5, 50, case, Split::Test).expect("data");
        let mut kf = GaussianFilter::kalman(&model, &cov).expect("kf");
        let mut ekf = GaussianFilter::extended(&model, &cov).expect("ekf");
        for traj in &data.trajectories {
            let a = kf.run(traj).expect("kf run");
            let b = ekf.run(traj).expect("ekf run");
            worst = worst.max((a - b).amax());
        }
    }
    outcome(worst <= 1e-12, format!("max per-step difference {worst:.2e} <= 1e-12 on 20 random models"))
}

fn c6_gain_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (m, n) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let k = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let dy = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let dx = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let kv = tape.leaf(learned_kalman::gainnet::flatten_gain(&k, 1));
        let dyv = tape.leaf(DMatrix::from_column_slice(n, 1, dy.as_slice()));
        let dxv = tape.leaf(DMatrix::from_column_slice(m, 1, dx.as_slice()));
        let kdy = tape.gain_apply(kv, dyv).expect("gain");
        let r = tape.sub(kdy, dxv).expect("sub");
        let loss = tape.l2_norm_sq(r).expect("norm");
        let grad = tape.backward(loss).expect("backward").wrt(kv);
        let expected = (&k * &dy - &dx) * dy.transpose() * 2.0;
        let expected = learned_kalman::gainnet::flatten_gain(&expected, 1);
        worst = worst.max((grad - &expected).norm() / expected.norm().max(1e-300));
    }
    outcome(worst < 1e-10, format!("max relative error {worst:.2e} < 1e-10 over 100 instances"))
}

fn c7_autodiff() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut errors: Vec<(&str, f64)> = Vec::new();
    let (r, c) = (3, 2);
    let a = random(&mut rng, r, c);
    let b = random(&mut rng, r, c);
    let w = random(&mut rng, c, 4);
    let bias = random(&mut rng, r, 1);
    let k = random(&mut rng, 3 * r, c);
    let weights = random(&mut rng, r, c);
    // each primitive feeds a weighted sum so that every output entry matters
    let weighted = |t: &mut Tape, out: Var| {
        let (rows, cols) = t.value(out).shape();
        let wv = t.leaf(DMatrix::from_fn(rows, cols, |i, j| 0.3 + 0.1 * (i + 2 * j) as f64));
        let p = t.hadamard(out, wv).expect("hadamard");
        t.sum(p).expect("sum")
    };
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
    let weighted = std::rc::Rc::new(weighted);
    let unary = |f: fn(&mut Tape, Var) -> Var| -> Build {
        let wsum = weighted.clone();
        Box::new(move |t, v| {
            let out = f(t, v[0]);
            wsum(t, out)
        })
    };
    let binary = |f: fn(&mut Tape, Var, Var) -> Var| -> Build {
        let wsum = weighted.clone();
        Box::new(move |t, v| {
            let out = f(t, v[0], v[1]);
            wsum(t, out)
        })
    };
    let cases: Vec<(&str, Vec<DMatrix<f64>>, Build)> = vec![
        ("add", vec![a.clone(), b.clone()], binary(|t, x, y| t.add(x, y).unwrap())),
        ("add_bias", vec![a.clone(), bias.clone()], binary(|t, x, y| t.add_bias(x, y).unwrap())),
        ("sub", vec![a.clone(), b.clone()], binary(|t, x, y| t.sub(x, y).unwrap())),
        ("matmul", vec![a.clone(), w.clone()], binary(|t, x, y| t.matmul(x, y).unwrap())),
        ("hadamard", vec![a.clone(), b.clone()], binary(|t, x, y| t.hadamard(x, y).unwrap())),
        ("scale", vec![a.clone()], unary(|t, x| t.scale(x, -1.7).unwrap())),
        ("concat", vec![a.clone(), b.clone()], binary(|t, x, y| t.concat(&[x, y, x]).unwrap())),
        ("slice", vec![a.clone()], unary(|t, x| t.slice(x, 1, 2).unwrap())),
        ("tanh", vec![a.clone()], unary(|t, x| t.tanh(x).unwrap())),
        ("sigmoid", vec![a.clone()], unary(|t, x| t.sigmoid(x).unwrap())),
        ("relu", vec![a.clone()], unary(|t, x| t.relu(x).unwrap())),
        ("square", vec![a.clone()], unary(|t, x| t.square(x).unwrap())),
        ("sum", vec![weights.clone()], Box::new(|t, v| t.sum(v[0]).unwrap())),
        ("mean", vec![weights.clone()], Box::new(|t, v| { let s = t.square(v[0]).unwrap(); t.mean(s).unwrap() })),
        ("l2_norm_sq", vec![a.clone()], Box::new(|t, v| t.l2_norm_sq(v[0]).unwrap())),
        ("normalize_columns", vec![a.clone()], unary(|t, x| t.normalize_columns(x).unwrap())),
        ("gain_apply", vec![k.clone(), a.clone()], binary(|t, x, y| t.gain_apply(x, y).unwrap())),
        (
            "map_columns/lorenz",
            vec![a.clone()],
            unary(|t, x| t.map_columns(x, &Map::LorenzTaylor { dtau: 0.02, order: 5 }).unwrap()),
        ),
        (
            "map_columns/sinusoid",
            vec![a.clone()],
            unary(|t, x| t.map_columns(x, &Map::Sinusoid { alpha: 0.9, beta: 1.1, phi: 0.1, delta: 0.01 }).unwrap()),
        ),
    ];
    for (name, leaves, build) in &cases {
        errors.push((name, fd_error(leaves, build.as_ref())));
    }

    // five-step unrolled GRU with a linear readout, differentiated wrt every weight
    let mut params = ParamSet::new();
    let gru = Gru::new(&mut params, "gru", 4, 6, &mut rng);
    let head = Linear::new(&mut params, "head", 6, 2, &mut rng);
    let xs: Vec<DMatrix<f64>> = (0..5).map(|_| random(&mut rng, 4, 2)).collect();
    let unrolled = |set: &ParamSet| -> (f64, Vec<DMatrix<f64>>) {
        let mut t = Tape::new();
        let bound = set.bind(&mut t);
        let mut h = t.leaf(DMatrix::zeros(6, 2));
        let mut total = t.scalar_leaf(0.0);
        for x in &xs {
            let xv = t.leaf(x.clone());
            h = gru.step(&mut t, &bound, xv, h).unwrap();
            let out = head.forward(&mut t, &bound, h).unwrap();
            let sq = t.l2_norm_sq(out).unwrap();
            total = t.add(total, sq).unwrap();
        }
        let grads = t.backward(total).unwrap();
        (t.scalar(total), bound.gradients(&grads))
    };
    let (_, analytic) = unrolled(&params);
    let mut gru_err: f64 = 0.0;
    for k in 0..params.len() {
        for idx in 0..params.values()[k].len() {
            let h = 1e-6;
            let mut plus = params.clone();
            plus.values_mut()[k][idx] += h;
            let mut minus = params.clone();
            minus.values_mut()[k][idx] -= h;
            let fd = (unrolled(&plus).0 - unrolled(&minus).0) / (2.0 * h);
            let a = analytic[k][idx];
            gru_err = gru_err.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-2));
        }
    }
    errors.push(("gru x5", gru_err));

    let (worst_name, worst) = errors.iter().copied().fold(("", 0.0), |acc, e| if e.1 > acc.1 { e } else { acc });
    outcome(
        worst < 1e-5,
        format!("{} checks, worst {worst_name} rel err {worst:.2e} < 1e-5", errors.len()),
    )
}

fn c8_lorenz_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let expm = |x: &DVector<f64>| {
        let a = learned_kalman::ssm::lorenz::flow_matrix(&Vector3::new(x[0], x[1], x[2])) * 0.02;
        DMatrix::from_iterator(3, 3, a.iter().copied()).exp()
    };
    let (mut e30, mut e5, mut ratio): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..200 {
        let x = DVector::from_fn(3, |_, _| rng.gen_range(-50.0..50.0));
        let oracle = expm(&x);
        e30 = e30.max((lorenz_f(&x, 0.02, 30) - &oracle).amax());
        let err5 = (lorenz_f(&x, 0.02, 5) - &oracle).amax();
        e5 = e5.max(err5);
        // Lagrange remainder of the order-5 series, for reference
        let a = (learned_kalman::ssm::lorenz::flow_matrix(&Vector3::new(x[0], x[1], x[2])) * 0.02).norm();
        ratio = ratio.max(err5 / (a.powi(6) / 720.0 * a.exp()));
    }
    outcome(
        e30 <= 1e-10 && e5 <= 1e-6,
        format!(
            "max entry error J=30 {e30:.2e} (<=1e-10), J=5 {e5:.2e} (<=1e-6) over 200 points |x_i|<=50; \
             J=5 error / remainder bound <= {ratio:.2}"
        ),
    )
}

fn c9_lorenz_full() -> Outcome {
    let t0 = Instant::now();
    let (rows, _) = run_scenario(&bench::builtin("lorenz-full").expect("builtin"));
    let t = lookup(&rows);
    let s = "lorenz-full";
    let mut pass = true;
    let mut parts = Vec::new();
    for inv in [0.0, 10.0, 20.0] {
        let l = get(&t, s, "learned-c3", inv);
        let (ekf, ukf, pf) = (get(&t, s, "ekf-tuned", inv), get(&t, s, "ukf-tuned", inv), get(&t, s, "pf100-tuned", inv));
        pass &= l - ekf <= 1.5 && l < ukf && l < pf;
        parts.push(format!("{inv}dB learned {l:.2} ekf {ekf:.2} ukf {ukf:.2} pf {pf:.2}"));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    outcome(
        pass && elapsed <= 1800.0,
        format!("need learned-ekf<=1.5 and learned<ukf,pf: [{}]; {elapsed:.0}s <= 1800s", parts.join("; ")),
    )
}

fn c10_lorenz_mismatch() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (scenario, learned) in [("lorenz-evolution-mismatch", "learned-c3"), ("lorenz-rotation", "learned-c2")] {
        let (rows, _) = run_scenario(&bench::builtin(scenario).expect("builtin"));
        let t = lookup(&rows);
        let l = get(&t, scenario, learned, 20.0);
        // the filters run with the nominal noise statistics; the tuned ones are shown for reference
        let margin = |suffix: &str| {
            ["ekf", "ukf", "pf100"].iter().map(|m| get(&t, scenario, &format!("{m}{suffix}"), 20.0) - l).fold(f64::INFINITY, f64::min)
        };
        let (nominal, tuned) = (margin(""), margin("-tuned"));
        pass &= nominal >= 2.0;
        parts.push(format!("{scenario}: margin {nominal:.2} dB (tuned filters {tuned:.2} dB)"));
    }
    outcome(pass, format!("need margin >=2 dB at 20 dB: [{}]", parts.join("; ")))
}

fn c11_pf_sanity() -> Outcome {
    let model = linear_2x2(0.5);
    let cov = NoiseSpec::from_db(0.0, 0.0).covariances(2, 2);
    let test = generate_dataset(&model, &cov, &InitialState::default(), 50, 50, 11, Split::Test).expect("data");
    let mut kf = GaussianFilter::kalman(&model, &cov).expect("kf");
    let kf_eval = evaluate_filter(&mut kf, &test).expect("kf");
    let mut per: Vec<Vec<f64>> = Vec::new();
    let mut parts = Vec::new();
    for n in [100, 1000, 10_000] {
        let mut pf = FilterKind::Pf { particles: n }.build(&model, &cov, 3).expect("pf");
        let e = evaluate_filter(pf.as_mut(), &test).expect("pf run");
        parts.push(format!("N={n} {:.3}", e.mse_db));
        per.push(e.per_trajectory);
    }
    // a step counts as monotone unless the paired increase exceeds two standard errors
    let mut pass = true;
    for pair in per.windows(2) {
        let d: Vec<f64> = pair[1].iter().zip(&pair[0]).map(|(b, a)| b - a).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let se = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() * (d.len() - 1)) as f64).sqrt();
        pass &= mean <= 2.0 * se;
    }
    let last = to_db(per[2].iter().sum::<f64>() / per[2].len() as f64);
    let gap = last - kf_eval.mse_db;
    pass &= gap <= 0.1;
    outcome(pass, format!("[{}] dB vs KF {:.3} dB; final gap {gap:.3} dB (<=0.1)", parts.join(", "), kf_eval.mse_db))
}

fn c12_nclt() -> Outcome {
    let cfg = nclt::NcltConfig::desk();
    let dir = tempfile::tempdir().expect("scratch dir");
    let (gt, odo) = nclt::synthesize(cfg.synthetic.as_ref().expect("desk source")).expect("synthesize");
    let (gp, op) = (dir.path().join("ground_truth.csv"), dir.path().join("odometry.csv"));
    std::fs::write(&gp, gt).expect("write");
    std::fs::write(&op, odo).expect("write");
    nclt::import_files(&gp, &op, &cfg.import, dir.path()).expect("import");
    let (train, val, test) = nclt::load_imported(dir.path()).expect("load");
    let rows = nclt::run_experiment(&cfg, (&train, &val, &test), Some(dir.path())).expect("run");
    let mse = |m: &str| rows.iter().find(|r| r.method == m).map(|r| r.mse_db).expect("row");
    let (dr, kf, rnn, learned) = (mse("dead-reckoning"), mse("kf-tuned"), mse("vanilla-rnn"), mse("learned-c1"));
    outcome(
        dr - learned >= 2.0,
        format!("position MSE dB: dead-reckoning {dr:.2}, kf {kf:.2}, vanilla-rnn {rnn:.2}, learned {learned:.2}; gain {:.2} dB >= 2", dr - learned),
    )
}

fn c13_determinism() -> Outcome {
    let mut cfg = bench::builtin("empty").expect("builtin");
    cfg.scenario = "determinism".into();
    cfg.methods = vec![
        MethodSpec::Kf { model: bench::config::DesignModel::Filter, tuned: false },
        MethodSpec::Pf { particles: 50, model: bench::config::DesignModel::Filter, tuned: false },
        MethodSpec::Learned { config: LearnedConfig::C1, scaling: FeatureScaling::Raw, steps: Some(30) },
    ];
    cfg.filter_model = bench::ModelSpec::Linear {
        m: 2,
        n: 2,
        root: 0.5,
        evolution_rotation_deg: 0.0,
        observation: bench::config::LinearObservation::Exchange,
        observation_rotation_deg: 0.0,
    };
    cfg.data_model = cfg.filter_model.clone();
    let run = |root: &Path| -> Vec<u8> {
        bench::generate(&cfg, root, false).expect("generate");
        bench::train_all(&cfg, root, None, false).expect("train");
        let rows: Vec<ReportRow> =
            bench::evaluate_all(&cfg, root, None).expect("evaluate").into_iter().map(|(r, _)| r).collect();
        let path = root.join("report.csv");
        bench::write_report(&path, &rows, false).expect("write");
        std::fs::read(path).expect("read")
    };
    let (a, b) = (tempfile::tempdir().expect("dir"), tempfile::tempdir().expect("dir"));
    let (ra, rb) = (run(a.path()), run(b.path()));
    let rows = ra.iter().filter(|&&c| c == b'\n').count().saturating_sub(1);
    let reference = rows_to_csv(&bench::read_report(&a.path().join("report.csv")).expect("read"), false).expect("csv");
    outcome(
        ra == rb && reference == ra,
        format!("{rows} rows, {} bytes, identical across reruns: {}", ra.len(), ra == rb),
    )
}
