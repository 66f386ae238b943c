//! Synthetic datasets with latent groups and person structure, client
//! partitioning, train/eval splits, and the columnar text format.
//!
//! Columnar format: a header row `f0,...,f{d-1},label,group,person` followed
//! by one row per example. Features are written in shortest round-trip
//! decimal form, so export followed by import is lossless.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::protocol::ClientState;
use crate::seed::derive_seed;

/// Examples with labels, group tags and person ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub groups: Vec<u32>,
    pub persons: Vec<u32>,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<u8>, groups: Vec<u32>, persons: Vec<u32>) -> Result<Self> {
        let n = features.len();
        if labels.len() != n || groups.len() != n || persons.len() != n {
            return Err(Error::invalid("dataset columns have different lengths"));
        }
        if n == 0 {
            return Err(Error::invalid("dataset is empty"));
        }
        let d = features[0].len();
        if features.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("dataset rows have different feature counts"));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::invalid("dataset labels must be 0 or 1"));
        }
        Ok(Self { features, labels, groups, persons })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    /// Tagged batch over the examples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            indices.iter().map(|&i| self.features[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            Some(indices.iter().map(|&i| self.groups[i]).collect()),
        )
    }

    pub fn to_batch(&self) -> Result<Batch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        header.extend(["label", "group", "person"].map(String::from));
        out.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.features[i].iter().map(|v| format!("{v:?}")).collect();
            row.push(self.labels[i].to_string());
            row.push(self.groups[i].to_string());
            row.push(self.persons[i].to_string());
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::invalid(format!("dataset write failed: {e}")))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(csv_err)?.clone();
        let cols: Vec<&str> = header.iter().collect();
        let d = cols.len().checked_sub(3).filter(|&d| d > 0).ok_or_else(|| {
            Error::invalid("dataset header needs feature columns plus label, group, person")
        })?;
        for (j, c) in cols[..d].iter().enumerate() {
            if *c != format!("f{j}") {
                return Err(Error::invalid(format!("expected column f{j}, found {c}")));
            }
        }
        if cols[d..] != ["label", "group", "person"] {
            return Err(Error::invalid("last columns must be label, group, person"));
        }
        let (mut features, mut labels, mut groups, mut persons) = (vec![], vec![], vec![], vec![]);
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let parse_err = |what: &str| Error::invalid(format!("row {}: bad {what}", line + 1));
            let row = (0..d)
                .map(|j| rec[j].parse::<f64>().map_err(|_| parse_err("feature")))
                .collect::<Result<Vec<_>>>()?;
            features.push(row);
            labels.push(rec[d].parse::<u8>().map_err(|_| parse_err("label"))?);
            groups.push(rec[d + 1].parse::<u32>().map_err(|_| parse_err("group"))?);
            persons.push(rec[d + 2].parse::<u32>().map_err(|_| parse_err("person"))?);
        }
        Self::new(features, labels, groups, persons)
    }

    /// SHA-256 of the columnar export, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(hex::encode(Sha256::digest(&buf)))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("dataset format: {e}"))
}

/// Gaussian two-group, two-class generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    /// `group_means[group][class]`
    pub group_means: [[Vec<f64>; 2]; 2],
    /// Per-group label flip probability.
    pub label_noise: [f64; 2],
    /// Fraction of examples in group 0.
    pub group_ratio: f64,
    pub n_total: usize,
    /// Examples per person; each person is a contiguous block.
    pub examples_per_person: usize,
    /// Standard deviation of each person's mean offset.
    pub person_spread: f64,
    /// Standard deviation of per-example feature noise.
    pub feature_std: f64,
}

impl SyntheticSpec {
    /// Two groups in 8 dimensions; group 1 is an 20% minority with noisy
    /// labels and a shifted class geometry.
    pub fn disparity_fixture() -> Self {
        let dim = 8;
        let axis = |pairs: &[(usize, f64)]| {
            let mut v = vec![0.0; dim];
            for &(i, x) in pairs {
                v[i] = x;
            }
            v
        };
        Self {
            dim,
            group_means: [
                [axis(&[(0, -1.0)]), axis(&[(0, 1.0)])],
                [axis(&[(0, -0.6), (1, 1.0)]), axis(&[(0, 0.2), (1, 1.6)])],
            ],
            label_noise: [0.0, 0.2],
            group_ratio: 0.8,
            n_total: 2000,
            examples_per_person: 80,
            person_spread: 0.2,
            feature_std: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim must be >= 1"));
        }
        for g in &self.group_means {
            for m in g {
                if m.len() != self.dim {
                    return Err(Error::invalid(format!(
                        "mean vector has {} entries, expected {}",
                        m.len(),
                        self.dim
                    )));
                }
            }
        }
        if self.label_noise.iter().any(|&p| !(0.0..0.5).contains(&p)) {
            return Err(Error::invalid("label_noise entries must lie in [0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.group_ratio) {
            return Err(Error::invalid("group_ratio must lie in [0, 1]"));
        }
        if self.n_total == 0 || self.examples_per_person == 0 {
            return Err(Error::invalid("n_total and examples_per_person must be >= 1"));
        }
        if !(self.person_spread >= 0.0) || !(self.feature_std > 0.0) {
            return Err(Error::invalid("person_spread must be >= 0 and feature_std > 0"));
        }
        Ok(())
    }

    pub fn group0_count(&self) -> usize {
        ((self.group_ratio * self.n_total as f64).round() as usize).min(self.n_total)
    }
}

/// Draw a dataset. Group 0 examples come first, then group 1; within a group,
/// persons are contiguous blocks with their own mean offset. Classes are
/// balanced in expectation.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = [spec.group0_count(), spec.n_total - spec.group0_count()];
    let noise = Normal::new(0.0, spec.feature_std).map_err(|e| Error::invalid(e.to_string()))?;
    let (mut features, mut labels, mut groups, mut persons) = (vec![], vec![], vec![], vec![]);
    let mut person_id = 0u32;
    for (g, &count) in counts.iter().enumerate() {
        let mut remaining = count;
        while remaining > 0 {
            let block = remaining.min(spec.examples_per_person);
            let offset: Vec<f64> = (0..spec.dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.person_spread * z
                })
                .collect();
            for _ in 0..block {
                let y: usize = usize::from(rng.random_bool(0.5));
                let x = spec.group_means[g][y]
                    .iter()
                    .zip(&offset)
                    .map(|(m, o)| m + o + noise.sample(&mut rng))
                    .collect();
                let flip = rng.random::<f64>() < spec.label_noise[g];
                features.push(x);
                labels.push((y as u8) ^ u8::from(flip));
                groups.push(g as u32);
                persons.push(person_id);
            }
            remaining -= block;
            person_id += 1;
        }
    }
    LabeledDataset::new(features, labels, groups, persons)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Every client holds at least two persons.
    MultiPerson,
    /// Clients may hold one or several persons.
    SingleAndMulti,
    /// Every client holds exactly one person.
    SingleOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    /// `(persons from group 0, persons from group 1)` per client.
    pub client_compositions: Vec<(usize, usize)>,
    /// Fraction of each client's data used for training.
    pub train_fraction: f64,
    /// Keep example order in the train/eval split instead of shuffling.
    pub ordered_split: bool,
}

impl PartitionSpec {
    pub fn new(mode: PartitionMode, client_compositions: Vec<(usize, usize)>) -> Self {
        Self {
            mode,
            client_compositions,
            train_fraction: 0.8,
            ordered_split: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.client_compositions.is_empty() {
            return Err(Error::Config("partition needs at least one client".into()));
        }
        for (i, &(a, b)) in self.client_compositions.iter().enumerate() {
            let persons = a + b;
            let ok = match self.mode {
                PartitionMode::MultiPerson => persons >= 2,
                PartitionMode::SingleAndMulti => persons >= 1,
                PartitionMode::SingleOnly => persons == 1,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "client {i} composition ({a}, {b}) is not allowed in {:?} mode",
                    self.mode
                )));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Assign whole persons to clients, then split each client's data into train
/// and eval portions. Persons are drawn from a seeded shuffle of each group.
pub fn partition(dataset: &LabeledDataset, pspec: &PartitionSpec, seed: u64) -> Result<Vec<ClientState>> {
    pspec.validate()?;
    let mut by_person: BTreeMap<u32, (u32, Vec<usize>)> = BTreeMap::new();
    for i in 0..dataset.len() {
        let entry = by_person
            .entry(dataset.persons[i])
            .or_insert_with(|| (dataset.groups[i], Vec::new()));
        if entry.0 != dataset.groups[i] {
            return Err(Error::invalid(format!(
                "person {} appears in more than one group",
                dataset.persons[i]
            )));
        }
        entry.1.push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: [Vec<u32>; 2] = [Vec::new(), Vec::new()];
    for (&p, (g, _)) in &by_person {
        match *g {
            0 | 1 => pools[*g as usize].push(p),
            other => return Err(Error::invalid(format!("partition supports groups 0 and 1, found {other}"))),
        }
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let need: [usize; 2] = pspec
        .client_compositions
        .iter()
        .fold([0, 0], |acc, &(a, b)| [acc[0] + a, acc[1] + b]);
    for g in 0..2 {
        if need[g] > pools[g].len() {
            return Err(Error::Config(format!(
                "compositions need {} persons from group {g}, dataset has {}",
                need[g],
                pools[g].len()
            )));
        }
    }
    let mut cursor = [0usize; 2];
    let mut clients = Vec::with_capacity(pspec.client_compositions.len());
    for (id, &(a, b)) in pspec.client_compositions.iter().enumerate() {
        let mut chosen: Vec<u32> = pools[0][cursor[0]..cursor[0] + a].to_vec();
        chosen.extend_from_slice(&pools[1][cursor[1]..cursor[1] + b]);
        cursor[0] += a;
        cursor[1] += b;
        chosen.sort_unstable();
        let indices: Vec<usize> = chosen
            .iter()
            .flat_map(|p| by_person[p].1.iter().copied())
            .collect();
        let data = dataset.batch(&indices)?;
        let client_seed = derive_seed(seed, &[id as u64]);
        let (train, eval) = split_ordered(&data, pspec.train_fraction, !pspec.ordered_split, client_seed)?;
        clients.push(ClientState {
            id,
            train_data: train,
            eval_data: eval,
            rng_seed: client_seed,
        });
    }
    Ok(clients)
}

/// Split into `(train, eval)` with `floor(ratio * n)` training examples
/// (clamped so both parts are nonempty). Without shuffling, example order is
/// preserved.
pub fn split_ordered(data: &Batch, ratio: f64, shuffle: bool, seed: u64) -> Result<(Batch, Batch)> {
    let n = data.len();
    if n < 2 {
        return Err(Error::invalid("splitting needs at least two examples"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n_train = ((ratio * n as f64 + 1e-9).floor() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok((data.select(&order[..n_train])?, data.select(&order[n_train..])?))
}
