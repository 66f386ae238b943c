use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{axpy, ParamVector};

/// Eval losses and eigenvalues are floored here before taking reciprocals.
pub const LOSS_FLOOR: f64 = 1e-8;

const MAX_EMPTY_DRAWS: usize = 100;

/// Convex combination weights over the participating clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("no aggregation weights"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("aggregation weights must be finite and >= 0"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("aggregation weights sum to {sum}, expected 1")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    /// Proportional to `sizes`.
    pub fn proportional(sizes: &[usize]) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        if total == 0 {
            return Err(Error::invalid("client sizes sum to zero"));
        }
        Self::new(sizes.iter().map(|&s| s as f64 / total as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Sharpness-aware weights `S(S(L) * S(T))` with `L_n = eps + 1/loss_n` and
/// `T_n = eps + 1/lambda_n`; `*` is elementwise and `S` the softmax.
pub fn aggregation_weights(eval_losses: &[f64], eval_lambdas: &[f64], epsilon: f64) -> Result<AggregationWeights> {
    if eval_losses.len() != eval_lambdas.len() {
        return Err(Error::DimensionMismatch {
            context: "aggregation inputs",
            expected: eval_losses.len(),
            got: eval_lambdas.len(),
        });
    }
    if eval_losses.is_empty() {
        return Err(Error::invalid("no clients to weight"));
    }
    if eval_losses.iter().chain(eval_lambdas).chain([&epsilon]).any(|x| !x.is_finite()) {
        return Err(Error::invalid("aggregation inputs must be finite"));
    }
    let inv = |x: f64| epsilon + 1.0 / x.max(LOSS_FLOOR);
    let l: Vec<f64> = eval_losses.iter().map(|&x| inv(x)).collect();
    let t: Vec<f64> = eval_lambdas.iter().map(|&x| inv(x)).collect();
    let combined: Vec<f64> = softmax(&l).iter().zip(softmax(&t)).map(|(a, b)| a * b).collect();
    AggregationWeights::new(softmax(&combined))
}

/// `sum_n w_n * model_n`, accumulated in client order.
pub fn aggregate(models: &[ParamVector], weights: &AggregationWeights) -> Result<ParamVector> {
    if models.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            context: "aggregation model count",
            expected: weights.len(),
            got: models.len(),
        });
    }
    let p = models[0].len();
    let mut out = vec![0.0; p];
    for (m, &w) in models.iter().zip(weights.as_slice()) {
        if m.len() != p {
            return Err(Error::DimensionMismatch {
                context: "aggregated model length",
                expected: p,
                got: m.len(),
            });
        }
        axpy(w, m, &mut out);
    }
    Ok(ParamVector::new(out))
}

/// Running mean: `(n * swa + round) / (n + 1)`.
pub fn swa_update(g_swa: &[f64], g_round: &[f64], n_models: usize) -> Result<ParamVector> {
    if g_swa.len() != g_round.len() {
        return Err(Error::DimensionMismatch {
            context: "SWA update",
            expected: g_swa.len(),
            got: g_round.len(),
        });
    }
    if n_models == 0 {
        return Ok(ParamVector::new(g_round.to_vec()));
    }
    let n = n_models as f64;
    Ok(ParamVector::new(
        g_swa
            .iter()
            .zip(g_round)
            .map(|(s, r)| (n * s + r) / (n + 1.0))
            .collect(),
    ))
}

/// Independent Bernoulli participation. Empty draws are redrawn; after 100
/// consecutive empty draws the probabilities are rejected.
pub fn sample_clients<R: Rng>(participation_probs: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    if participation_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config("participation probabilities must lie in [0, 1]".into()));
    }
    for _ in 0..MAX_EMPTY_DRAWS {
        let picked: Vec<usize> = participation_probs
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| (rng.random::<f64>() < p).then_some(i))
            .collect();
        if !picked.is_empty() {
            return Ok(picked);
        }
    }
    Err(Error::Config(format!(
        "client sampling produced {MAX_EMPTY_DRAWS} consecutive empty rounds"
    )))
}
