//! Federated round machinery: local client training with the Fisher
//! penalty, sharpness-aware aggregation, weight averaging, and the baseline
//! methods.

mod client;
mod experiment;
mod server;

pub use client::{
    client_local_loss, correct_sample_lambda, kd_distill_loss, penalty_lambda_and_grad, train_client,
    PenaltyTerm, TrainContext,
};
pub use experiment::{
    evaluate_global, run_experiment, ClientRoundEntry, ExperimentOutcome, GlobalEval, RoundReport,
};
pub use server::{aggregate, aggregation_weights, sample_clients, swa_update, AggregationWeights, LOSS_FLOOR};

use serde::{Deserialize, Serialize};

use crate::curvature::PowerConfig;
use crate::error::{Error, Result};
use crate::nn::{Batch, ParamVector};
use crate::optim::LrSchedule;

/// One participant: disjoint local train and eval sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub train_data: Batch,
    pub eval_data: Batch,
    pub rng_seed: u64,
}

impl ClientState {
    /// Copy with group tags removed from both splits.
    pub fn without_tags(&self) -> Self {
        Self {
            id: self.id,
            train_data: self.train_data.without_tags(),
            eval_data: self.eval_data.without_tags(),
            rng_seed: self.rng_seed,
        }
    }
}

/// What a client sends back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReturn {
    pub params: ParamVector,
    pub eval_loss: f64,
    pub eval_lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cafe,
    Fedavg,
    Fedsam,
    Fedswa,
    KdFedavg,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cafe => "cafe",
            Method::Fedavg => "fedavg",
            Method::Fedsam => "fedsam",
            Method::Fedswa => "fedswa",
            Method::KdFedavg => "kd_fedavg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Method::Cafe, Method::Fedavg, Method::Fedsam, Method::Fedswa, Method::KdFedavg]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Sam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Chained softmax over inverse eval loss and inverse Fisher eigenvalue.
    Sharpness,
    /// Proportional to client training-set size.
    DataSize,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub alpha: f64,
    pub epsilon: f64,
    pub cycle: usize,
    pub swa_start_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub lr: f64,
    pub swa_lr: f64,
    pub sam_rho: f64,
    /// Defaults to 20% of `rounds`.
    pub kd_warmup_rounds: Option<usize>,
    pub kd_temperature: f64,
    pub kd_mix: f64,
    /// Power-iteration settings for the penalty and eval eigenvalues.
    pub power: PowerConfig,
    /// Per-client Bernoulli participation probabilities; `None` means all.
    pub participation: Option<Vec<f64>>,
    pub optimizer_override: Option<Optimizer>,
    pub weighting_override: Option<Weighting>,
    pub swa_override: Option<bool>,
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            alpha: 0.92,
            epsilon: 0.005,
            cycle: 5,
            swa_start_fraction: 0.2,
            epochs: 3,
            batch_size: 32,
            rounds: 80,
            lr: 0.01,
            swa_lr: 0.001,
            sam_rho: 0.05,
            kd_warmup_rounds: None,
            kd_temperature: 2.0,
            kd_mix: 0.5,
            power: PowerConfig {
                tol: 1e-6,
                max_iter: 500,
                seed: 0,
            },
            participation: None,
            optimizer_override: None,
            weighting_override: None,
            swa_override: None,
        }
    }

    pub fn optimizer(&self) -> Optimizer {
        self.optimizer_override.unwrap_or(match self.method {
            Method::Cafe | Method::Fedsam | Method::Fedswa => Optimizer::Sam,
            Method::Fedavg | Method::KdFedavg => Optimizer::Sgd,
        })
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting_override.unwrap_or(match self.method {
            Method::Cafe => Weighting::Sharpness,
            _ => Weighting::DataSize,
        })
    }

    pub fn swa_enabled(&self) -> bool {
        self.swa_override
            .unwrap_or(matches!(self.method, Method::Cafe | Method::Fedswa))
    }

    /// The Fisher penalty only enters the cafe objective, and vanishes at alpha = 1.
    pub fn penalty_active(&self) -> bool {
        self.method == Method::Cafe && self.alpha < 1.0
    }

    pub fn swa_start_round(&self) -> usize {
        ((self.swa_start_fraction * self.rounds as f64 + 1e-9).floor() as usize).min(self.rounds)
    }

    pub fn kd_warmup(&self) -> usize {
        self.kd_warmup_rounds
            .unwrap_or(((0.2 * self.rounds as f64 + 1e-9).floor()) as usize)
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        if self.swa_enabled() {
            LrSchedule::new(self.lr, self.swa_lr, self.swa_start_round(), self.rounds)
        } else {
            LrSchedule::new(self.lr, self.lr, self.rounds, self.rounds)
        }
    }

    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                v.push(msg.to_string());
            }
        };
        need((0.0..=1.0).contains(&self.alpha), "alpha must lie in [0, 1]");
        need(self.epsilon > 0.0 && self.epsilon.is_finite(), "epsilon must be > 0");
        need(self.cycle >= 1, "cycle must be >= 1");
        need(
            (0.0..=1.0).contains(&self.swa_start_fraction),
            "swa_start_fraction must lie in [0, 1]",
        );
        need(self.batch_size >= 1, "batch_size must be >= 1");
        need(self.lr > 0.0 && self.lr.is_finite(), "lr must be > 0");
        need(self.swa_lr > 0.0 && self.swa_lr.is_finite(), "swa_lr must be > 0");
        need(self.sam_rho >= 0.0 && self.sam_rho.is_finite(), "sam_rho must be >= 0");
        need(self.kd_temperature > 0.0, "kd_temperature must be > 0");
        need((0.0..=1.0).contains(&self.kd_mix), "kd_mix must lie in [0, 1]");
        need(self.power.tol > 0.0, "power tol must be > 0");
        need(self.power.max_iter >= 1, "power max_iter must be >= 1");
        if let Some(p) = &self.participation {
            need(
                p.iter().all(|x| (0.0..=1.0).contains(x)),
                "participation probabilities must lie in [0, 1]",
            );
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}
