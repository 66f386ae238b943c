#![allow(dead_code)]

use curvfed::nn::{self, Activation, Batch, MlpSpec, OutputKind};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn random_spec<R: Rng>(rng: &mut R, max_dim: usize, max_hidden: usize) -> MlpSpec {
    let act = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
    random_spec_with(rng, max_dim, max_hidden, act)
}

pub fn random_spec_with<R: Rng>(rng: &mut R, max_dim: usize, max_hidden: usize, act: Activation) -> MlpSpec {
    let input = rng.random_range(1..=max_dim);
    let layers = rng.random_range(0..=2);
    let hidden: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=max_hidden)).collect();
    MlpSpec::classifier(input, &hidden, act).unwrap()
}

pub fn random_batch<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Batch {
    let features = (0..n).map(|_| gauss(rng, dim)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..2u8)).collect();
    Batch::new(features, labels, None).unwrap()
}

pub fn random_params<R: Rng>(rng: &mut R, spec: &MlpSpec, scale: f64) -> Vec<f64> {
    gauss(rng, spec.param_count()).into_iter().map(|x| x * scale).collect()
}

/// Independent forward pass over the flat layout (W row-major then b, per layer).
pub fn oracle_forward(spec: &MlpSpec, params: &[f64], x: &[f64]) -> f64 {
    let widths = spec.layer_widths();
    let mut h = DVector::from_column_slice(x);
    let mut off = 0;
    for l in 0..widths.len() - 1 {
        let (i, o) = (widths[l], widths[l + 1]);
        let w = DMatrix::from_row_slice(o, i, &params[off..off + o * i]);
        off += o * i;
        let b = DVector::from_column_slice(&params[off..off + o]);
        off += o;
        let z = w * h + b;
        h = if l + 2 == widths.len() {
            match spec.output() {
                OutputKind::SigmoidBinary => z.map(|v| 1.0 / (1.0 + (-v).exp())),
                OutputKind::Linear => z,
            }
        } else {
            match spec.hidden_activation() {
                Activation::Tanh => z.map(f64::tanh),
                Activation::Relu => z.map(|v| v.max(0.0)),
            }
        };
    }
    h[0]
}

/// Mean loss from the oracle forward pass.
pub fn oracle_loss(spec: &MlpSpec, params: &[f64], batch: &Batch) -> f64 {
    let n = batch.len() as f64;
    batch
        .features()
        .iter()
        .zip(batch.labels())
        .map(|(x, &y)| {
            let out = oracle_forward(spec, params, x);
            let y = y as f64;
            match spec.output() {
                OutputKind::SigmoidBinary => -(y * out.ln() + (1.0 - y) * (1.0 - out).ln()),
                OutputKind::Linear => 0.5 * (out - y).powi(2),
            }
        })
        .sum::<f64>()
        / n
}

pub fn fd_grad(spec: &MlpSpec, params: &[f64], batch: &Batch, h: f64) -> Vec<f64> {
    (0..params.len())
        .map(|k| {
            let mut p = params.to_vec();
            p[k] += h;
            let lp = nn::loss(spec, &p, batch).unwrap();
            p[k] -= 2.0 * h;
            let lm = nn::loss(spec, &p, batch).unwrap();
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

/// Dense `(1/n) sum g g^T` built by explicit outer products.
pub fn oracle_fim(grads: &[Vec<f64>]) -> DMatrix<f64> {
    let p = grads[0].len();
    let mut m = DMatrix::zeros(p, p);
    for g in grads {
        let v = DVector::from_column_slice(g);
        m += &v * v.transpose();
    }
    m / grads.len() as f64
}

pub fn top_eig(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let e = m.clone().symmetric_eigen();
    let (i, _) = e
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    (e.eigenvalues[i], e.eigenvectors.column(i).into_owned())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}
