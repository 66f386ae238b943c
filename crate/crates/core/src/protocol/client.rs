use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curvature::{top_eig_power_best_effort, FimOperator, PowerConfig, HVP_REL_STEP};
use crate::error::{Error, Result};
use crate::nn::{self, axpy, dot, norm, sigmoid, Batch, MlpSpec, ParamVector, PROB_CLAMP};
use crate::optim::{sam_step_with, sgd_step, SamConfig};
use crate::seed::derive_seed;

use super::{ClientState, Method, MethodConfig, Optimizer, TrainReturn};

/// Top Fisher eigenvalue over the correctly classified examples of a batch,
/// with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyTerm {
    pub lambda_correct: f64,
    /// Gradient of `lambda_correct` with the top eigenvector held fixed.
    pub grad: ParamVector,
    pub n_correct: usize,
}

fn correct_subset(spec: &MlpSpec, params: &[f64], batch: &Batch) -> Result<Option<Batch>> {
    let (_, mask) = nn::classify(spec, params, batch, 0.5)?;
    let idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| c.then_some(i))
        .collect();
    if idx.is_empty() {
        Ok(None)
    } else {
        batch.select(&idx).map(Some)
    }
}

/// Top eigenvalue of the Fisher built from correctly classified examples
/// only; zero when nothing is classified correctly.
pub fn correct_sample_lambda(spec: &MlpSpec, params: &[f64], batch: &Batch, cfg: &PowerConfig) -> Result<f64> {
    match correct_subset(spec, params, batch)? {
        None => Ok(0.0),
        Some(sub) => Ok(top_eig_power_best_effort(&FimOperator::from_model(spec, params, &sub)?, cfg)?.lambda),
    }
}

/// Fisher penalty and its gradient.
///
/// With `v` the top eigenvector of `F = (1/N_c) sum g_i g_i^T`,
/// `d lambda / d theta = (2/N_c) sum (g_i . v) H_i v`, where each `H_i v` is a
/// central difference of the per-sample gradient along `v`.
pub fn penalty_lambda_and_grad(
    spec: &MlpSpec,
    params: &[f64],
    batch: &Batch,
    cfg: &PowerConfig,
) -> Result<PenaltyTerm> {
    let Some(sub) = correct_subset(spec, params, batch)? else {
        return Ok(PenaltyTerm {
            lambda_correct: 0.0,
            grad: ParamVector::zeros(params.len()),
            n_correct: 0,
        });
    };
    let n_correct = sub.len();
    let op = FimOperator::from_model(spec, params, &sub)?;
    let est = top_eig_power_best_effort(&op, cfg)?;
    let v = &est.eigvec;

    let h = HVP_REL_STEP * norm(params).max(1.0);
    let mut plus = params.to_vec();
    let mut minus = params.to_vec();
    axpy(h, v, &mut plus);
    axpy(-h, v, &mut minus);
    let gp = nn::per_sample_grads(spec, &plus, &sub)?;
    let gm = nn::per_sample_grads(spec, &minus, &sub)?;

    let mut grad = vec![0.0; params.len()];
    for ((g, p), m) in op.grads().iter().zip(&gp).zip(&gm) {
        let coeff = 2.0 * dot(g, v) / (n_correct as f64 * 2.0 * h);
        for ((o, a), b) in grad.iter_mut().zip(p.iter()).zip(m.iter()) {
            *o += coeff * (a - b);
        }
    }
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("Fisher penalty gradient is not finite".into()));
    }
    Ok(PenaltyTerm {
        lambda_correct: est.lambda,
        grad: ParamVector::new(grad),
        n_correct,
    })
}

/// `alpha * ce + (1 - alpha) * lambda / n_correct`; the second term is
/// dropped when nothing is classified correctly.
pub fn client_local_loss(ce_loss: f64, lambda_correct: f64, n_correct: usize, alpha: f64) -> f64 {
    let penalty = if n_correct == 0 {
        0.0
    } else {
        lambda_correct / n_correct as f64
    };
    alpha * ce_loss + (1.0 - alpha) * penalty
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (p / (1.0 - p)).ln()
}

fn soften(p: f64, temperature: f64) -> f64 {
    sigmoid(logit(p) / temperature)
}

fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let term = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

/// Mean distillation loss: `mix * CE(hard labels, student) +
/// (1 - mix) * KL(teacher_T || student_T)` with both distributions softened by
/// the temperature.
pub fn kd_distill_loss(
    student_probs: &[f64],
    teacher_probs: &[f64],
    hard_labels: &[u8],
    temperature: f64,
    mix: f64,
) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::invalid("mix must lie in [0, 1]"));
    }
    let n = student_probs.len();
    if teacher_probs.len() != n || hard_labels.len() != n || n == 0 {
        return Err(Error::invalid("distillation inputs must be nonempty and equally long"));
    }
    let total: f64 = (0..n)
        .map(|i| {
            let q = student_probs[i].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let y = hard_labels[i] as f64;
            let ce = -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
            let kl = bernoulli_kl(soften(teacher_probs[i], temperature), soften(student_probs[i], temperature));
            mix * ce + (1.0 - mix) * kl
        })
        .sum();
    Ok(total / n as f64)
}

/// Round-level inputs to local training.
#[derive(Debug, Clone, Copy)]
pub struct TrainContext<'a> {
    pub lr: f64,
    /// Base seed of the experiment; combined with round and client id.
    pub run_seed: u64,
    pub round: usize,
    /// Teacher parameters when the client distills.
    pub teacher: Option<&'a [f64]>,
}

fn objective_grad(
    spec: &MlpSpec,
    params: &[f64],
    batch: &Batch,
    cfg: &MethodConfig,
    teacher_logits: Option<&[f64]>,
) -> Result<ParamVector> {
    let labels = batch.labels();
    match teacher_logits {
        Some(t_logits) => {
            let (tau, mix) = (cfg.kd_temperature, cfg.kd_mix);
            nn::grad_with(spec, params, batch.features(), |i, z| {
                let hard = sigmoid(z) - labels[i] as f64;
                let soft = (sigmoid(z / tau) - sigmoid(t_logits[i] / tau)) / tau;
                mix * hard + (1.0 - mix) * soft
            })
        }
        None => {
            let g = nn::grad(spec, params, batch)?;
            Ok(if cfg.method == Method::Cafe && cfg.alpha != 1.0 {
                g.scaled(cfg.alpha)
            } else {
                g
            })
        }
    }
}

fn local_step(
    spec: &MlpSpec,
    params: &ParamVector,
    batch: &Batch,
    cfg: &MethodConfig,
    lr: f64,
    teacher_logits: Option<&[f64]>,
    power: &PowerConfig,
) -> Result<ParamVector> {
    let penalty = if cfg.penalty_active() {
        let term = penalty_lambda_and_grad(spec, params, batch, power)?;
        (term.n_correct > 0).then(|| term.grad.scaled((1.0 - cfg.alpha) / term.n_correct as f64))
    } else {
        None
    };
    let mut next = match cfg.optimizer() {
        Optimizer::Sgd => {
            let mut g = objective_grad(spec, params, batch, cfg, teacher_logits)?;
            if let Some(p) = &penalty {
                g.add_scaled(1.0, p);
            }
            return finite(sgd_step(params, &g, lr));
        }
        Optimizer::Sam => {
            let sam = SamConfig::new(cfg.sam_rho, lr)?;
            sam_step_with(params, &sam, |p| objective_grad(spec, p, batch, cfg, teacher_logits))?
        }
    };
    if let Some(p) = &penalty {
        next.add_scaled(-lr, p);
    }
    finite(next)
}

fn finite(p: ParamVector) -> Result<ParamVector> {
    if p.is_finite() {
        Ok(p)
    } else {
        Err(Error::Numeric("local update produced non-finite parameters".into()))
    }
}

/// Local training: `epochs` passes of shuffled mini-batches starting from
/// the global model, evaluating on the client's eval split after each epoch
/// and returning the epoch with the lowest eval loss. With zero epochs the
/// untouched global model is evaluated and returned.
pub fn train_client(
    spec: &MlpSpec,
    client: &ClientState,
    global: &ParamVector,
    cfg: &MethodConfig,
    ctx: &TrainContext<'_>,
) -> Result<TrainReturn> {
    train_inner(spec, client, global, cfg, ctx).map_err(|e| e.for_client(client.id))
}

fn train_inner(
    spec: &MlpSpec,
    client: &ClientState,
    global: &ParamVector,
    cfg: &MethodConfig,
    ctx: &TrainContext<'_>,
) -> Result<TrainReturn> {
    let seed = derive_seed(ctx.run_seed, &[ctx.round as u64, client.id as u64, client.rng_seed]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let power = cfg.power.with_seed(rng.random());
    let train = &client.train_data;
    let eval = &client.eval_data;

    let teacher_logits = match ctx.teacher {
        Some(t) => Some(nn::logits(spec, t, train.features())?),
        None => None,
    };

    let mut best: Option<(ParamVector, f64)> = None;
    let mut params = global.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk)?;
            let t_chunk: Option<Vec<f64>> = teacher_logits
                .as_ref()
                .map(|t| chunk.iter().map(|&i| t[i]).collect());
            params = local_step(spec, &params, &batch, cfg, ctx.lr, t_chunk.as_deref(), &power)?;
        }
        let eval_loss = nn::loss(spec, &params, eval)?;
        if best.as_ref().is_none_or(|(_, l)| eval_loss < *l) {
            best = Some((params.clone(), eval_loss));
        }
    }
    let (params, eval_loss) = match best {
        Some(b) => b,
        None => (global.clone(), nn::loss(spec, global, eval)?),
    };
    let eval_lambda = correct_sample_lambda(spec, &params, eval, &power)?;
    Ok(TrainReturn {
        params,
        eval_loss,
        eval_lambda,
    })
}
