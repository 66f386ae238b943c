mod common;

use common::*;
use curvfed::curvature::{top_eig_power, FimOperator, PowerConfig};
use curvfed::data::{generate, partition, PartitionMode, PartitionSpec, SyntheticSpec};
use curvfed::nn::{self, Activation, Batch, MlpSpec, ParamVector};
use curvfed::optim::{sam_step_with, sgd_step, SamConfig};
use curvfed::protocol::{
    aggregation_weights, penalty_lambda_and_grad, run_experiment, sample_clients, swa_update, train_client,
    ClientState, Method, MethodConfig, TrainContext,
};
use proptest::prelude::*;
use rand::Rng;

fn fixture_clients(n_total: usize, comps: Vec<(usize, usize)>) -> Vec<ClientState> {
    let spec = SyntheticSpec {
        n_total,
        examples_per_person: 20,
        ..SyntheticSpec::disparity_fixture()
    };
    let d = generate(&spec, 0).unwrap();
    partition(&d, &PartitionSpec::new(PartitionMode::SingleAndMulti, comps), 0).unwrap()
}

fn quick(method: Method, rounds: usize) -> MethodConfig {
    MethodConfig {
        rounds,
        epochs: 1,
        batch_size: 16,
        ..MethodConfig::new(method)
    }
}

#[test]
fn penalty_gradient_matches_scalar_finite_differences() {
    let mut r = rng(21);
    let spec = MlpSpec::classifier(3, &[4], Activation::Tanh).unwrap();
    // teacher labels make every example correct with a margin
    let params = random_params(&mut r, &spec, 0.8);
    let feats: Vec<Vec<f64>> = (0..24).map(|_| gauss(&mut r, 3)).collect();
    let probs = nn::predict(&spec, &params, &feats).unwrap();
    let keep: Vec<usize> = (0..feats.len()).filter(|&i| (probs[i] - 0.5).abs() > 0.05).collect();
    let feats: Vec<Vec<f64>> = keep.iter().map(|&i| feats[i].clone()).collect();
    let labels: Vec<u8> = keep.iter().map(|&i| u8::from(probs[i] >= 0.5)).collect();
    let batch = Batch::new(feats, labels, None).unwrap();

    let cfg = PowerConfig { tol: 1e-12, max_iter: 20000, seed: 3 };
    let term = penalty_lambda_and_grad(&spec, &params, &batch, &cfg).unwrap();
    assert_eq!(term.n_correct, batch.len());
    let lambda = |p: &[f64]| top_eig_power(&FimOperator::from_model(&spec, p, &batch).unwrap(), &cfg).unwrap().lambda;
    for _ in 0..5 {
        let d = gauss(&mut r, params.len());
        let h = 1e-5;
        let plus: Vec<f64> = params.iter().zip(&d).map(|(p, d)| p + h * d).collect();
        let minus: Vec<f64> = params.iter().zip(&d).map(|(p, d)| p - h * d).collect();
        let fd = (lambda(&plus) - lambda(&minus)) / (2.0 * h);
        let an = term.grad.dot(&d);
        assert!((fd - an).abs() <= 5e-2 * fd.abs().max(1e-3), "fd {fd} analytic {an}");
    }
}

#[test]
fn sgd_and_sam_descend_a_quadratic() {
    let a = [3.0, 1.0, 0.5];
    let f = |x: &[f64]| 0.5 * x.iter().zip(&a).map(|(x, a)| a * x * x).sum::<f64>();
    let g = |x: &[f64]| -> curvfed::Result<ParamVector> { Ok(ParamVector::new(x.iter().zip(&a).map(|(x, a)| a * x).collect())) };
    let mut x = vec![1.0, -2.0, 4.0];
    let mut y = x.clone();
    let cfg = SamConfig::new(0.05, 0.1).unwrap();
    for _ in 0..50 {
        let nx = sgd_step(&x, &g(&x).unwrap(), 0.1);
        assert!(f(&nx) < f(&x));
        x = nx.into_inner();
        let ny = sam_step_with(&y, &cfg, g).unwrap();
        assert!(f(&ny) < f(&y));
        y = ny.into_inner();
    }
}

#[test]
fn sampling_frequency_matches_conditioned_bernoulli() {
    let mut r = rng(31);
    let mut counts = [0usize; 10];
    for _ in 0..10000 {
        for i in sample_clients(&[0.5; 10], &mut r).unwrap() {
            counts[i] += 1;
        }
    }
    for c in counts {
        let freq = c as f64 / 10000.0;
        assert!((freq - 0.51).abs() <= 0.02, "{freq}");
    }
}

#[test]
fn zero_rounds_returns_initial_model() {
    let clients = fixture_clients(400, vec![(4, 1), (4, 1)]);
    let spec = MlpSpec::classifier(8, &[4], Activation::Tanh).unwrap();
    let a = run_experiment(&clients, &spec, &quick(Method::Cafe, 0), 5).unwrap();
    let b = run_experiment(&clients, &spec, &quick(Method::Fedavg, 0), 5).unwrap();
    assert!(a.reports.is_empty());
    assert_eq!(a.final_params, b.final_params);
    assert_eq!(a.final_params.len(), spec.param_count());
}

#[test]
fn single_client_fedavg_is_the_local_model() {
    let clients = fixture_clients(200, vec![(4, 1)]);
    let spec = MlpSpec::classifier(8, &[4], Activation::Tanh).unwrap();
    let cfg = quick(Method::Fedavg, 3);
    let out = run_experiment(&clients, &spec, &cfg, 2).unwrap();
    // replay: each round's global is the lone client's return
    let two = run_experiment(&clients, &spec, &quick(Method::Fedavg, 2), 2).unwrap();
    let ctx = TrainContext { lr: cfg.lr, run_seed: 2, round: 2, teacher: None };
    let local = train_client(&spec, &clients[0].without_tags(), &two.final_params, &cfg, &ctx).unwrap();
    assert_eq!(local.params, out.final_params);
    for r in &out.reports {
        assert_eq!(r.clients.len(), 1);
        assert_eq!(r.clients[0].weight, 1.0);
    }
}

#[test]
fn train_client_is_deterministic_and_zero_epochs_is_identity() {
    let clients = fixture_clients(200, vec![(4, 1)]);
    let spec = MlpSpec::classifier(8, &[4], Activation::Tanh).unwrap();
    let global = nn::init_params(&spec, &mut rng(1));
    let cfg = quick(Method::Cafe, 5);
    let ctx = TrainContext { lr: 0.05, run_seed: 9, round: 1, teacher: None };
    let a = train_client(&spec, &clients[0], &global, &cfg, &ctx).unwrap();
    let b = train_client(&spec, &clients[0], &global, &cfg, &ctx).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params, global);
    let zero = MethodConfig { epochs: 0, ..cfg };
    let z = train_client(&spec, &clients[0], &global, &zero, &ctx).unwrap();
    assert_eq!(z.params, global);
    assert_eq!(z.eval_loss, nn::loss(&spec, &global, &clients[0].eval_data).unwrap());
}

#[test]
fn experiments_are_deterministic_and_cover_every_method() {
    let clients = fixture_clients(400, vec![(4, 1), (4, 1)]);
    let spec = MlpSpec::classifier(8, &[4], Activation::Tanh).unwrap();
    for m in [Method::Cafe, Method::Fedavg, Method::Fedsam, Method::Fedswa, Method::KdFedavg] {
        let cfg = quick(m, 5);
        let a = run_experiment(&clients, &spec, &cfg, 3).unwrap();
        let b = run_experiment(&clients, &spec, &cfg, 3).unwrap();
        assert_eq!(a.reports, b.reports, "{m:?}");
        assert_eq!(a.reports.len(), 5);
        assert_eq!(a.reports.iter().any(|r| r.swa_active), cfg.swa_enabled());
        for r in &a.reports {
            let sum: f64 = r.clients.iter().map(|c| c.weight).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn partial_participation_reports_only_sampled_clients() {
    let clients = fixture_clients(400, vec![(2, 1), (2, 1), (2, 1), (2, 1)]);
    let spec = MlpSpec::classifier(8, &[4], Activation::Tanh).unwrap();
    let cfg = MethodConfig { participation: Some(vec![0.1, 0.9, 0.5, 0.5]), ..quick(Method::Cafe, 6) };
    let out = run_experiment(&clients, &spec, &cfg, 1).unwrap();
    assert!(out.reports.iter().any(|r| r.clients.len() < 4));
    let bad = MethodConfig { participation: Some(vec![0.5]), ..cfg };
    assert!(run_experiment(&clients, &spec, &bad, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_respond_to_own_loss_and_lambda(seed in any::<u64>(), n in 2usize..8) {
        let mut r = rng(seed);
        let losses: Vec<f64> = (0..n).map(|_| r.random_range(0.05..2.0)).collect();
        let lambdas: Vec<f64> = (0..n).map(|_| r.random_range(0.05..5.0)).collect();
        let i = r.random_range(0..n);
        let w = aggregation_weights(&losses, &lambdas, 0.005).unwrap();
        prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let mut l2 = losses.clone();
        l2[i] -= 1e-3;
        prop_assert!(aggregation_weights(&l2, &lambdas, 0.005).unwrap().as_slice()[i] > w.as_slice()[i]);
        let mut t2 = lambdas.clone();
        t2[i] -= 1e-3;
        prop_assert!(aggregation_weights(&losses, &t2, 0.005).unwrap().as_slice()[i] > w.as_slice()[i]);
    }

    #[test]
    fn swa_is_the_running_mean(seed in any::<u64>(), k in 1usize..10) {
        let mut r = rng(seed);
        let models: Vec<Vec<f64>> = (0..k).map(|_| gauss(&mut r, 5)).collect();
        let mut s = ParamVector::new(models[0].clone());
        for (n, m) in models.iter().enumerate().skip(1) {
            s = swa_update(&s, m, n).unwrap();
        }
        for j in 0..5 {
            let mean = models.iter().map(|m| m[j]).sum::<f64>() / k as f64;
            prop_assert!((s[j] - mean).abs() <= 1e-12);
        }
    }
}
