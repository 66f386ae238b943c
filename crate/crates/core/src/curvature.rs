//! Curvature tooling: the empirical Fisher as a matrix-free operator,
//! power iteration, finite-difference Hessian-vector products, dense
//! oracles, and the excessive-loss and group-Fisher bounds.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, axpy, dot, norm, Batch, MlpSpec, ParamVector};

/// Largest parameter count for which a dense Fisher may be materialized.
pub const DENSE_LIMIT: usize = 256;

/// Relative step for finite-difference Hessian-vector products.
pub const HVP_REL_STEP: f64 = 1e-4;

/// Empirical Fisher `F = (1/n) sum_i g_i g_i^T`, stored as its per-sample
/// gradients.
#[derive(Debug, Clone)]
pub struct FimOperator {
    grads: Vec<ParamVector>,
    dim: usize,
}

impl FimOperator {
    pub fn new(grads: Vec<ParamVector>) -> Result<Self> {
        let dim = grads
            .first()
            .map(|g| g.len())
            .ok_or_else(|| Error::invalid("Fisher operator needs at least one gradient"))?;
        if let Some(g) = grads.iter().find(|g| g.len() != dim) {
            return Err(Error::DimensionMismatch {
                context: "per-sample gradient",
                expected: dim,
                got: g.len(),
            });
        }
        Ok(Self { grads, dim })
    }

    /// Fisher of a model's per-sample loss gradients on `batch`.
    pub fn from_model(spec: &MlpSpec, params: &[f64], batch: &Batch) -> Result<Self> {
        Self::new(nn::per_sample_grads(spec, params, batch)?)
    }

    pub fn n(&self) -> usize {
        self.grads.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grads(&self) -> &[ParamVector] {
        &self.grads
    }

    pub fn matvec(&self, v: &[f64]) -> Result<ParamVector> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "Fisher matvec",
                expected: self.dim,
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.dim];
        for g in &self.grads {
            axpy(dot(g, v), g, &mut out);
        }
        let inv = 1.0 / self.grads.len() as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        Ok(ParamVector::new(out))
    }

    /// Operator over the union of several gradient sets.
    pub fn union(parts: &[FimOperator]) -> Result<Self> {
        Self::new(parts.iter().flat_map(|p| p.grads.iter().cloned()).collect())
    }
}

/// `F v` without materializing `F`.
pub fn fim_matvec(op: &FimOperator, v: &[f64]) -> Result<ParamVector> {
    op.matvec(v)
}

/// Materialize the Fisher. Test oracle only; limited to `P <= 256`.
pub fn dense_fim(op: &FimOperator) -> Result<DMatrix<f64>> {
    if op.dim > DENSE_LIMIT {
        return Err(Error::Capability(format!(
            "dense Fisher limited to {DENSE_LIMIT} parameters, operator has {}",
            op.dim
        )));
    }
    let mut m = DMatrix::<f64>::zeros(op.dim, op.dim);
    let inv = 1.0 / op.n() as f64;
    for g in &op.grads {
        for i in 0..op.dim {
            let gi = g[i] * inv;
            for j in 0..op.dim {
                m[(i, j)] += gi * g[j];
            }
        }
    }
    Ok(m)
}

/// Largest eigenvalue of a symmetric matrix via a full dense decomposition.
pub fn dense_top_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
            seed: 0,
        }
    }
}

impl PowerConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::invalid(format!("power iteration tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("power iteration max_iter must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumEstimate {
    pub lambda: f64,
    pub eigvec: ParamVector,
    pub iterations: usize,
    /// `||A v - lambda v||` at the returned vector.
    pub residual: f64,
}

/// Outcome of a power-iteration run, converged or not.
#[derive(Debug, Clone)]
pub struct PowerRun {
    pub estimate: SpectrumEstimate,
    pub converged: bool,
    /// Rayleigh quotient at every iteration.
    pub rayleigh: Vec<f64>,
}

fn seeded_unit_vector(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// Power iteration on a symmetric linear operator.
///
/// Stops once `||A v - lambda v|| <= tol * max(1, |lambda|)`. The start vector
/// is a standard Gaussian drawn from `cfg.seed`. For indefinite operators the
/// dominant eigenvalue is the one of largest magnitude; it is reported with
/// its sign.
pub fn power_iteration<F>(dim: usize, mut apply: F, cfg: &PowerConfig) -> Result<PowerRun>
where
    F: FnMut(&[f64]) -> Result<ParamVector>,
{
    cfg.validate()?;
    if dim == 0 {
        return Err(Error::invalid("power iteration on an empty operator"));
    }
    let mut v = seeded_unit_vector(dim, cfg.seed);
    let mut rayleigh = Vec::new();
    let mut last = None;
    for k in 1..=cfg.max_iter {
        let w = apply(&v)?;
        if !w.is_finite() {
            return Err(Error::Numeric(format!("operator produced non-finite values at iteration {k}")));
        }
        let lambda = dot(&v, &w);
        let mut r = w.clone();
        axpy(-lambda, &v, &mut r);
        let residual = norm(&r);
        rayleigh.push(lambda);
        if residual <= cfg.tol * lambda.abs().max(1.0) {
            return Ok(PowerRun {
                estimate: SpectrumEstimate {
                    lambda,
                    eigvec: ParamVector::new(v),
                    iterations: k,
                    residual,
                },
                converged: true,
                rayleigh,
            });
        }
        let wn = w.norm();
        let next: Vec<f64> = w.iter().map(|x| x / wn).collect();
        last = Some(SpectrumEstimate {
            lambda,
            eigvec: ParamVector::new(std::mem::replace(&mut v, next)),
            iterations: k,
            residual,
        });
    }
    Ok(PowerRun {
        estimate: last.expect("max_iter >= 1"),
        converged: false,
        rayleigh,
    })
}

fn strict(run: PowerRun) -> Result<SpectrumEstimate> {
    if run.converged {
        Ok(run.estimate)
    } else {
        Err(Error::Convergence {
            lambda: run.estimate.lambda,
            residual: run.estimate.residual,
            iterations: run.estimate.iterations,
        })
    }
}

/// Top Fisher eigenpair. Fails with [`Error::Convergence`] if the residual
/// tolerance is not met within `max_iter` iterations.
pub fn top_eig_power(op: &FimOperator, cfg: &PowerConfig) -> Result<SpectrumEstimate> {
    strict(fim_power_run(op, cfg)?)
}

/// Like [`top_eig_power`] but returns the last iterate when the budget runs
/// out. The Rayleigh quotient of a PSD operator never overshoots, so the
/// estimate is a valid lower bound.
pub fn top_eig_power_best_effort(op: &FimOperator, cfg: &PowerConfig) -> Result<SpectrumEstimate> {
    Ok(fim_power_run(op, cfg)?.estimate)
}

pub fn fim_power_run(op: &FimOperator, cfg: &PowerConfig) -> Result<PowerRun> {
    power_iteration(op.dim, |v| op.matvec(v), cfg)
}

/// Hessian-vector product by central differences of the analytic gradient.
///
/// `v` is normalized internally and the result rescaled by `||v||`. The
/// default step is `1e-4 * max(1, ||params||)` along the unit direction.
pub fn hvp(
    spec: &MlpSpec,
    params: &[f64],
    batch: &Batch,
    v: &[f64],
    step: Option<f64>,
) -> Result<ParamVector> {
    if v.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "Hessian-vector direction",
            expected: params.len(),
            got: v.len(),
        });
    }
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(ParamVector::zeros(v.len()));
    }
    let h = match step {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}"))),
        None => HVP_REL_STEP * norm(params).max(1.0),
    };
    let mut plus = params.to_vec();
    let mut minus = params.to_vec();
    axpy(h / vn, v, &mut plus);
    axpy(-h / vn, v, &mut minus);
    let gp = nn::grad(spec, &plus, batch)?;
    let gm = nn::grad(spec, &minus, batch)?;
    let scale = vn / (2.0 * h);
    let out: Vec<f64> = gp.iter().zip(gm.iter()).map(|(a, b)| (a - b) * scale).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("Hessian-vector product is not finite".into()));
    }
    Ok(ParamVector::new(out))
}

/// Dominant Hessian eigenpair by power iteration over [`hvp`].
pub fn top_eig_hessian(
    spec: &MlpSpec,
    params: &[f64],
    batch: &Batch,
    cfg: &PowerConfig,
) -> Result<SpectrumEstimate> {
    strict(power_iteration(
        params.len(),
        |v| hvp(spec, params, batch, v, None),
        cfg,
    )?)
}

/// Second-order upper bound on the excessive loss of `global` relative to a
/// client's local model: `||g|| ||d|| + lambda ||d||^2 / 2`, `d = global - local`.
pub fn excessive_loss_bound(global: &[f64], local: &[f64], g_local: &[f64], lambda_h: f64) -> Result<f64> {
    if !(lambda_h >= 0.0) {
        return Err(Error::invalid(format!("Hessian eigenvalue must be >= 0, got {lambda_h}")));
    }
    if global.len() != local.len() || g_local.len() != local.len() {
        return Err(Error::DimensionMismatch {
            context: "excessive loss bound",
            expected: local.len(),
            got: if global.len() != local.len() { global.len() } else { g_local.len() },
        });
    }
    let delta: f64 = global
        .iter()
        .zip(local)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(norm(g_local) * delta + 0.5 * lambda_h * delta * delta)
}

/// Measured excessive loss `loss(global) - loss(local)` on a client's data.
pub fn excessive_loss(spec: &MlpSpec, global: &[f64], local: &[f64], batch: &Batch) -> Result<f64> {
    Ok(nn::loss(spec, global, batch)? - nn::loss(spec, local, batch)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBoundReport {
    pub lambda_full: f64,
    /// `sum_i alpha_i lambda(F_i)`
    pub jensen_upper: f64,
    pub max_group_lambda: f64,
    pub group_lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// `max_group_lambda - lambda_full`; negative when group eigenvectors align.
    pub slack_delta: f64,
}

/// Compare the pooled Fisher's top eigenvalue with its per-group pieces.
/// Group weights are proportional to group sizes.
pub fn group_fim_bounds(groups: &[FimOperator], cfg: &PowerConfig) -> Result<GroupBoundReport> {
    if groups.is_empty() {
        return Err(Error::invalid("at least one group is required"));
    }
    let total: usize = groups.iter().map(|g| g.n()).sum();
    let alphas: Vec<f64> = groups.iter().map(|g| g.n() as f64 / total as f64).collect();
    let group_lambdas = groups
        .iter()
        .map(|g| top_eig_power(g, cfg).map(|s| s.lambda))
        .collect::<Result<Vec<_>>>()?;
    let full = FimOperator::union(groups)?;
    let lambda_full = top_eig_power(&full, cfg)?.lambda;
    let jensen_upper = alphas.iter().zip(&group_lambdas).map(|(a, l)| a * l).sum();
    let max_group_lambda = group_lambdas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(GroupBoundReport {
        lambda_full,
        jensen_upper,
        max_group_lambda,
        group_lambdas,
        alphas,
        slack_delta: max_group_lambda - lambda_full,
    })
}

/// Spread of per-group top eigenvalues, `max - min`.
pub fn group_disparity(group_lambdas: &[f64]) -> Result<f64> {
    if group_lambdas.len() < 2 {
        return Err(Error::invalid("disparity needs at least two groups"));
    }
    let max = group_lambdas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = group_lambdas.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}
