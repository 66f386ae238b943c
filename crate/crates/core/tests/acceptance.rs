//! One line per acceptance criterion; exits nonzero if any fails.

mod common;

use std::time::Instant;

use common::*;
use curvfed::curvature::{excessive_loss, group_fim_bounds, top_eig_hessian, top_eig_power, FimOperator, PowerConfig};
use curvfed::data::{generate, partition, PartitionMode, PartitionSpec, SyntheticSpec};
use curvfed::metrics::{eo_gap, fate, PredictionRecord};
use curvfed::nn::{self, Activation, MlpSpec, OutputKind, ParamVector};
use curvfed::protocol::{aggregation_weights, run_experiment, swa_update, Method, MethodConfig, Optimizer, Weighting};
use curvfed::runner;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn eigenvalue_oracle() -> Outcome {
    let t = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..100 {
        let p = r.random_range(2..=64);
        let n = r.random_range(1..=256);
        let scales: Vec<f64> = (0..p).map(|_| 0.2 + r.random::<f64>() * 2.0).collect();
        let grads: Vec<Vec<f64>> = (0..n)
            .map(|_| gauss(&mut r, p).iter().zip(&scales).map(|(g, s)| g * s).collect())
            .collect();
        let (dense, _) = top_eig(&oracle_fim(&grads));
        let op = FimOperator::new(grads.into_iter().map(ParamVector::new).collect()).unwrap();
        match top_eig_power(&op, &PowerConfig { tol: 1e-9, max_iter: 20000, seed: i }) {
            Ok(est) => worst = worst.max(rel_err(est.lambda, dense)),
            Err(_) => failures += 1,
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        failures == 0 && worst <= 1e-6 && secs < 5.0,
        format!("max rel err {worst:.2e} over 100 operators, {failures} non-converged, {secs:.2}s"),
    )
}

fn gradient_correctness() -> Outcome {
    let mut r = rng(202);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let spec = random_spec(&mut r, 6, 8);
        let params = random_params(&mut r, &spec, 0.7);
        let batch = random_batch(&mut r, 10, spec.input_dim());
        let g = nn::grad(&spec, &params, &batch).unwrap();
        let fd = fd_grad(&spec, &params, &batch, 1e-6);
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let err = g.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
        worst = worst.max(err);
    }
    outcome(worst <= 1e-4, format!("max relative error {worst:.2e} over 50 MLPs"))
}

fn excessive_loss_bound() -> Outcome {
    let mut r = rng(303);
    let (mut max_over, mut max_taylor, mut max_tight) = (f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let d = r.random_range(1..=6);
        let n = r.random_range(2 * (d + 1)..=60);
        let spec = MlpSpec::new(vec![d, 1], Activation::Tanh, OutputKind::Linear).unwrap();
        let batch = random_batch(&mut r, n, d);
        // closed-form least squares optimum and Hessian
        let xa = DMatrix::from_fn(n, d + 1, |i, j| if j < d { batch.features()[i][j] } else { 1.0 });
        let y = DVector::from_iterator(n, batch.labels().iter().map(|&v| v as f64));
        let hess = xa.transpose() * &xa / n as f64;
        let rhs = xa.transpose() * y / n as f64;
        let local: Vec<f64> = hess.clone().cholesky().unwrap().solve(&rhs).iter().cloned().collect();
        let g_local = nn::grad(&spec, &local, &batch).unwrap();
        let top = top_eig_hessian(&spec, &local, &batch, &PowerConfig::default()).unwrap();
        for along_top in [false, true] {
            let step = r.random_range(0.1..2.0);
            let delta: Vec<f64> = if along_top {
                top.eigvec.iter().map(|v| v * step).collect()
            } else {
                gauss(&mut r, d + 1).iter().map(|v| v * step).collect()
            };
            let global: Vec<f64> = local.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let measured = excessive_loss(&spec, &global, &local, &batch).unwrap();
            let bound = curvfed::curvature::excessive_loss_bound(&global, &local, &g_local, top.lambda).unwrap();
            let dv = DVector::from_column_slice(&delta);
            let taylor = g_local.dot(&delta) + 0.5 * (dv.transpose() * &hess * &dv)[0];
            max_over = max_over.max(measured - bound);
            max_taylor = max_taylor.max((measured - taylor).abs());
            if along_top {
                max_tight = max_tight.max((measured - bound).abs());
            }
        }
    }
    outcome(
        max_over <= 1e-10 && max_taylor <= 1e-8 && max_tight <= 1e-8,
        format!(
            "max R - bound {max_over:.2e}, max |R - second-order| {max_taylor:.2e}, max |R - bound| along top eigvec {max_tight:.2e}"
        ),
    )
}

fn group_upper_bound() -> Outcome {
    let mut r = rng(404);
    let mut worst = f64::NEG_INFINITY;
    let mut errors = 0;
    for i in 0..200 {
        let p = r.random_range(2..=16);
        let k = r.random_range(1..=4);
        let groups: Vec<FimOperator> = (0..k)
            .map(|_| {
                let n = r.random_range(1..=40);
                let shift = gauss(&mut r, p);
                FimOperator::new(
                    (0..n)
                        .map(|_| ParamVector::new(gauss(&mut r, p).iter().zip(&shift).map(|(g, s)| g + s).collect()))
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        match group_fim_bounds(&groups, &PowerConfig { tol: 1e-10, max_iter: 20000, seed: i }) {
            Ok(rep) => worst = worst.max(rep.lambda_full - rep.jensen_upper),
            Err(_) => errors += 1,
        }
    }
    outcome(
        errors == 0 && worst <= 1e-8,
        format!("max lambda_full - sum alpha_i lambda_i = {worst:.2e} over 200 decompositions, {errors} errors"),
    )
}

fn aggregation_weight_properties() -> Outcome {
    let mut r = rng(505);
    let mut max_sum_err = 0.0f64;
    let mut violations = 0;
    for _ in 0..100 {
        let n = r.random_range(1..=10);
        let losses: Vec<f64> = (0..n).map(|_| r.random_range(0.05..2.0)).collect();
        let lambdas: Vec<f64> = (0..n).map(|_| r.random_range(0.05..5.0)).collect();
        let w = aggregation_weights(&losses, &lambdas, 0.005).unwrap();
        max_sum_err = max_sum_err.max((w.as_slice().iter().sum::<f64>() - 1.0).abs());
        if n == 1 {
            continue;
        }
        let i = r.random_range(0..n);
        let base = w.as_slice()[i];
        for (delta, on_loss) in [(1e-3, true), (-1e-3, true), (1e-3, false), (-1e-3, false)] {
            let (mut l, mut t) = (losses.clone(), lambdas.clone());
            if on_loss {
                l[i] += delta;
            } else {
                t[i] += delta;
            }
            let w2 = aggregation_weights(&l, &t, 0.005).unwrap();
            max_sum_err = max_sum_err.max((w2.as_slice().iter().sum::<f64>() - 1.0).abs());
            // a higher loss or eigenvalue must strictly lower the weight
            let moved = w2.as_slice()[i] - base;
            if moved * delta >= 0.0 || moved.is_nan() {
                violations += 1;
            }
        }
    }
    outcome(
        max_sum_err <= 1e-12 && violations == 0,
        format!("max |sum - 1| {max_sum_err:.2e}, {violations} monotonicity violations over 100 instances"),
    )
}

fn swa_running_mean() -> Outcome {
    let mut r = rng(606);
    let mut worst = 0.0f64;
    for k in 1..=10 {
        let globals: Vec<Vec<f64>> = (0..k).map(|_| gauss(&mut r, 50)).collect();
        let mut swa = ParamVector::new(globals[0].clone());
        for (n, g) in globals.iter().enumerate().skip(1) {
            swa = swa_update(&swa, g, n).unwrap();
        }
        for j in 0..50 {
            let mean = globals.iter().map(|g| g[j]).sum::<f64>() / k as f64;
            worst = worst.max((swa[j] - mean).abs());
        }
    }
    outcome(worst <= 1e-12, format!("max deviation from arithmetic mean {worst:.2e}, k = 1..10"))
}

fn metric_formulas() -> Outcome {
    let mut recs = Vec::new();
    for i in 0..4 {
        recs.push(PredictionRecord::new(1, u8::from(i < 3), 1));
    }
    for i in 0..5 {
        recs.push(PredictionRecord::new(1, u8::from(i < 2), 0));
    }
    let gap = eo_gap(&recs).unwrap();
    let same = fate(0.7, 0.7, 0.2, 0.2).unwrap();
    let widar = fate(0.8100, 0.8507, 0.3533, 0.4263).unwrap();
    let stress = fate(0.7814, 0.7253, 0.2522, 0.3069).unwrap();
    let pass = (gap - 0.35).abs() < 1e-15
        && same == 0.0
        && (widar - 0.1233).abs() <= 1e-3
        && (stress - 0.2559).abs() <= 1e-3;
    outcome(
        pass,
        format!("eo_gap {gap:.6} (0.35), fate self {same}, rows {widar:.4} (0.1233) and {stress:.4} (0.2559)"),
    )
}

fn directional_experiment() -> Outcome {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let text = "seeds = [0, 1, 2, 3, 4]\nbaseline = \"fedavg\"\n[method]\nname = \"cafe\"\nrounds = 30\n\
                [partition]\ncompositions = [[4, 1], [4, 1], [4, 1], [4, 1], [4, 1]]\n";
    let cfg = runner::parse_config_str(text).unwrap();
    let s = match runner::run(&cfg, tmp.path()) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let (eo_c, eo_f) = (s.eo_gap.unwrap().mean, s.baseline_eo_gap.unwrap().mean);
    let (dl_c, dl_f) = (s.delta_lambda_f.unwrap().mean, s.baseline_delta_lambda_f.unwrap().mean);
    let wins = s.seeds.iter().filter(|r| r.fate.is_some_and(|f| f > 0.0)).count();
    outcome(
        s.failed_seeds().is_empty() && eo_c < eo_f && dl_c < dl_f && wins >= 4 && secs < 120.0,
        format!(
            "mean EO gap {eo_c:.4} vs {eo_f:.4}, mean group dlambda(F) {dl_c:.4} vs {dl_f:.4}, FATE > 0 in {wins}/5 seeds, {secs:.1}s"
        ),
    )
}

fn fedavg_reduction() -> Outcome {
    let data = generate(&SyntheticSpec::disparity_fixture(), 0).unwrap();
    let clients = partition(&data, &PartitionSpec::new(PartitionMode::MultiPerson, vec![(4, 1); 5]), 0).unwrap();
    let spec = MlpSpec::classifier(data.dim(), &[16], Activation::Tanh).unwrap();
    let reduced = MethodConfig {
        alpha: 1.0,
        rounds: 10,
        weighting_override: Some(Weighting::Uniform),
        swa_override: Some(false),
        optimizer_override: Some(Optimizer::Sgd),
        ..MethodConfig::new(Method::Cafe)
    };
    let fedavg = MethodConfig { rounds: 10, ..MethodConfig::new(Method::Fedavg) };
    let a = run_experiment(&clients, &spec, &reduced, 7).unwrap();
    let b = run_experiment(&clients, &spec, &fedavg, 7).unwrap();
    let same_rounds = a.reports.iter().zip(&b.reports).filter(|(x, y)| x.params_digest == y.params_digest).count();
    let bitwise = a.final_params.iter().zip(b.final_params.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    outcome(
        same_rounds == 10 && a.reports == b.reports && bitwise,
        format!("{same_rounds}/10 rounds with identical parameter digests, final models bitwise equal: {bitwise}"),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let text = "seeds = [3]\n[method]\nname = \"cafe\"\nrounds = 8\n[data]\nn_total = 800\nexamples_per_person = 40\n\
                [partition]\ncompositions = [[2, 1], [2, 1], [2, 1]]\n";
    let cfg = runner::parse_config_str(text).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    runner::run(&cfg, &a).unwrap();
    runner::run(&cfg, &b).unwrap();
    let files = ["metrics_seed_3.jsonl", "baseline_metrics_seed_3.jsonl", "summary.json", "manifest.json"];
    let same = files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap())
        .count();
    outcome(same == files.len(), format!("{same}/{} output files byte-identical", files.len()))
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 10] = [
        ("eigenvalue oracle", eigenvalue_oracle),
        ("gradient correctness", gradient_correctness),
        ("excessive loss bound", excessive_loss_bound),
        ("group Fisher upper bound", group_upper_bound),
        ("aggregation weights", aggregation_weight_properties),
        ("SWA running mean", swa_running_mean),
        ("metric formulas", metric_formulas),
        ("directional end-to-end", directional_experiment),
        ("FedAvg reduction", fedavg_reduction),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        println!("[{}] {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

