use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curvature::{group_disparity, top_eig_power_best_effort, FimOperator, PowerConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, GroupMetrics};
use crate::nn::{self, Batch, MlpSpec, ParamVector};
use crate::seed::derive_seed;

use super::{
    aggregate, aggregation_weights, sample_clients, swa_update, train_client, AggregationWeights, ClientState,
    Method, MethodConfig, TrainContext, Weighting,
};

const INIT_STREAM: u64 = 0x1417;
const SAMPLING_STREAM: u64 = 0x5A3F;
const EVAL_STREAM: u64 = 0xE7A1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundEntry {
    pub id: usize,
    pub eval_loss: f64,
    pub eval_lambda: f64,
    pub weight: f64,
}

/// Group-aware evaluation of a global model on the pooled client eval sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEval {
    pub f1: f64,
    pub accuracy: f64,
    /// `None` when a group has no positive examples.
    pub eo_gap: Option<f64>,
    pub eo_gap_signed: Option<f64>,
    pub per_group: BTreeMap<u32, GroupMetrics>,
    /// Top Fisher eigenvalue per group, over all of the group's examples.
    pub group_lambdas: BTreeMap<u32, f64>,
    /// `max - min` of `group_lambdas`; `None` with fewer than two groups.
    pub delta_lambda_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientRoundEntry>,
    pub global: GlobalEval,
    pub lr: f64,
    pub swa_active: bool,
    /// SHA-256 of the aggregated global parameters (little-endian f64 bytes).
    pub params_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    /// The SWA model for averaging methods once averaging started, the last
    /// aggregated model otherwise.
    pub final_params: ParamVector,
    pub final_eval: GlobalEval,
}

pub(crate) fn params_digest(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in params {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Metrics of `params` on a tagged evaluation batch.
pub fn evaluate_global(spec: &MlpSpec, params: &[f64], eval: &Batch, power: &PowerConfig) -> Result<GlobalEval> {
    let tags = eval
        .group_tags()
        .ok_or_else(|| Error::invalid("global evaluation requires group tags"))?;
    let (preds, _) = nn::classify(spec, params, eval, 0.5)?;
    let records = metrics::records(eval.labels(), &preds, tags)?;
    let (f1, accuracy) = metrics::f1_accuracy(&records)?;
    let gap = metrics::eo_gap_signed(&records).ok();
    let per_group = metrics::per_group_metrics(&records)?;

    let mut group_lambdas = BTreeMap::new();
    for &g in per_group.keys() {
        let idx: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == g).collect();
        let sub = eval.select(&idx)?;
        let op = FimOperator::from_model(spec, params, &sub)?;
        group_lambdas.insert(g, top_eig_power_best_effort(&op, power)?.lambda);
    }
    let lambdas: Vec<f64> = group_lambdas.values().cloned().collect();
    Ok(GlobalEval {
        f1,
        accuracy,
        eo_gap: gap.map(|g| g.abs),
        eo_gap_signed: gap.map(|g| g.signed),
        per_group,
        group_lambdas,
        delta_lambda_f: group_disparity(&lambdas).ok(),
    })
}

/// Run `cfg.rounds` federated rounds from a seeded random model.
///
/// Each round: optional Bernoulli client sampling, local training for every
/// participant, server weighting and aggregation, then (for averaging
/// methods) the SWA update on cycle rounds past the start threshold. Group
/// tags are stripped before clients see their data and used only for the
/// per-round global evaluation on the pooled eval sets.
pub fn run_experiment(clients: &[ClientState], spec: &MlpSpec, cfg: &MethodConfig, seed: u64) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::Config("at least one client is required".into()));
    }
    if let Some(p) = &cfg.participation {
        if p.len() != clients.len() {
            return Err(Error::Config(format!(
                "{} participation probabilities for {} clients",
                p.len(),
                clients.len()
            )));
        }
    }
    let schedule = cfg.schedule()?;
    let pooled_eval = Batch::concat(&clients.iter().map(|c| &c.eval_data).collect::<Vec<_>>())?;
    let blind: Vec<ClientState> = clients.iter().map(ClientState::without_tags).collect();
    let eval_power = cfg.power.with_seed(derive_seed(seed, &[EVAL_STREAM]));

    let mut global = nn::init_params(spec, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[INIT_STREAM])));
    let swa_start = cfg.swa_start_round();
    let mut swa: Option<(ParamVector, usize)> = None;
    let mut reports = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        if cfg.swa_enabled() && round == swa_start {
            swa = Some((swa_update(&global, &global, 0)?, 1));
        }
        let lr = schedule.lr_at_round(round)?;
        let participants: Vec<usize> = match &cfg.participation {
            None => (0..blind.len()).collect(),
            Some(p) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SAMPLING_STREAM, round as u64]));
                sample_clients(p, &mut rng)?
            }
        };
        let distill = cfg.method == Method::KdFedavg && round >= cfg.kd_warmup();
        let ctx = TrainContext {
            lr,
            run_seed: seed,
            round,
            teacher: distill.then_some(&global[..]),
        };
        let returns = participants
            .iter()
            .map(|&i| train_client(spec, &blind[i], &global, cfg, &ctx))
            .collect::<Result<Vec<_>>>()?;

        let weights = match cfg.weighting() {
            Weighting::Sharpness => {
                let losses: Vec<f64> = returns.iter().map(|r| r.eval_loss).collect();
                let lambdas: Vec<f64> = returns.iter().map(|r| r.eval_lambda).collect();
                aggregation_weights(&losses, &lambdas, cfg.epsilon)?
            }
            Weighting::DataSize => AggregationWeights::proportional(
                &participants.iter().map(|&i| blind[i].train_data.len()).collect::<Vec<_>>(),
            )?,
            Weighting::Uniform => AggregationWeights::uniform(participants.len())?,
        };
        let models: Vec<ParamVector> = returns.iter().map(|r| r.params.clone()).collect();
        global = aggregate(&models, &weights)?;
        if !global.is_finite() {
            return Err(Error::Numeric(format!("aggregated model is not finite in round {round}")));
        }

        if let Some((avg, n)) = swa.as_mut() {
            if round % cfg.cycle == 0 {
                *avg = swa_update(avg, &global, *n)?;
                *n += 1;
            }
        }
        let current = swa.as_ref().map_or(&global, |(avg, _)| avg);
        reports.push(RoundReport {
            round,
            clients: participants
                .iter()
                .zip(&returns)
                .zip(weights.as_slice())
                .map(|((&id, r), &weight)| ClientRoundEntry {
                    id: blind[id].id,
                    eval_loss: r.eval_loss,
                    eval_lambda: r.eval_lambda,
                    weight,
                })
                .collect(),
            global: evaluate_global(spec, current, &pooled_eval, &eval_power)?,
            lr,
            swa_active: swa.is_some(),
            params_digest: params_digest(&global),
        });
    }

    let final_params = match swa {
        Some((avg, _)) => avg,
        None => global,
    };
    let final_eval = match reports.last() {
        Some(r) => r.global.clone(),
        None => evaluate_global(spec, &final_params, &pooled_eval, &eval_power)?,
    };
    Ok(ExperimentOutcome {
        reports,
        final_params,
        final_eval,
    })
}
