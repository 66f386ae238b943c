//! Experiment configuration files.
//!
//! TOML with four tables plus top-level keys:
//!
//! ```toml
//! seeds = [0, 1, 2]          # required
//! output_dir = "runs/cafe"   # optional, overridden by --out
//! baseline = "fedavg"        # method FATE is measured against
//! fate_metric = "f1"         # or "accuracy"
//!
//! [method]                   # name plus MethodConfig fields
//! name = "cafe"
//! participation = "all"      # or one probability per client
//!
//! [model]
//! hidden = [16]
//! activation = "tanh"
//!
//! [data]                     # synthetic generator, or `path = "data.csv"`
//! seed = 0
//!
//! [partition]
//! mode = "multi_person"
//! compositions = [[4, 1], [4, 1]]
//! ```
//!
//! Unknown keys, wrong types and out-of-range values are all collected and
//! reported together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::curvature::PowerConfig;
use crate::data::{PartitionMode, PartitionSpec, SyntheticSpec};
use crate::metrics::FatePerf;
use crate::nn::Activation;
use crate::protocol::{Method, MethodConfig, Optimizer, Weighting};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { spec: SyntheticSpec, seed: u64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: MethodConfig,
    pub baseline: Method,
    pub fate_metric: FatePerf,
    pub model: ModelConfig,
    pub data: DataSource,
    pub partition: PartitionSpec,
    pub partition_seed: u64,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

/// Every problem found in a configuration file.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid configuration:\n  - {}", .problems.join("\n  - "))]
pub struct ConfigError {
    pub problems: Vec<String>,
}

struct Section<'a> {
    name: &'a str,
    table: Option<&'a Table>,
    seen: Vec<&'static str>,
}

struct Collector {
    problems: Vec<String>,
}

impl Collector {
    fn push(&mut self, msg: impl Into<String>) {
        self.problems.push(msg.into());
    }
}

impl<'a> Section<'a> {
    fn new(name: &'a str, table: Option<&'a Table>) -> Self {
        Self { name, table, seen: Vec::new() }
    }

    fn key(&self, key: &str) -> String {
        if self.name.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.name)
        }
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a Value> {
        self.seen.push(key);
        self.table.and_then(|t| t.get(key))
    }

    fn f64(&mut self, c: &mut Collector, key: &'static str, default: f64) -> f64 {
        match self.raw(key) {
            None => default,
            Some(Value::Float(f)) => *f,
            Some(Value::Integer(i)) => *i as f64,
            Some(_) => {
                c.push(format!("{}: expected a number", self.key(key)));
                default
            }
        }
    }

    fn usize(&mut self, c: &mut Collector, key: &'static str, default: usize) -> usize {
        match self.raw(key) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as usize,
            Some(_) => {
                c.push(format!("{}: expected a non-negative integer", self.key(key)));
                default
            }
        }
    }

    fn opt_usize(&mut self, c: &mut Collector, key: &'static str) -> Option<usize> {
        match self.raw(key) {
            None => None,
            Some(Value::Integer(i)) if *i >= 0 => Some(*i as usize),
            Some(_) => {
                c.push(format!("{}: expected a non-negative integer", self.key(key)));
                None
            }
        }
    }

    fn u64(&mut self, c: &mut Collector, key: &'static str, default: u64) -> u64 {
        self.usize(c, key, default as usize) as u64
    }

    fn bool(&mut self, c: &mut Collector, key: &'static str) -> Option<bool> {
        match self.raw(key) {
            None => None,
            Some(Value::Boolean(b)) => Some(*b),
            Some(_) => {
                c.push(format!("{}: expected true or false", self.key(key)));
                None
            }
        }
    }

    fn str(&mut self, c: &mut Collector, key: &'static str) -> Option<&'a str> {
        match self.raw(key) {
            None => None,
            Some(Value::String(s)) => Some(s.as_str()),
            Some(_) => {
                c.push(format!("{}: expected a string", self.key(key)));
                None
            }
        }
    }

    fn choice<T: Copy>(&mut self, c: &mut Collector, key: &'static str, options: &[(&str, T)]) -> Option<T> {
        let s = self.str(c, key)?;
        match options.iter().find(|(name, _)| *name == s) {
            Some((_, v)) => Some(*v),
            None => {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                c.push(format!("{}: unknown value {s:?}, expected one of {names:?}", self.key(key)));
                None
            }
        }
    }

    fn f64_list(&mut self, c: &mut Collector, key: &'static str) -> Option<Vec<f64>> {
        let v = self.raw(key)?;
        let out = as_f64_list(v);
        if out.is_none() {
            c.push(format!("{}: expected an array of numbers", self.key(key)));
        }
        out
    }

    fn finish(self, c: &mut Collector) {
        if let Some(t) = self.table {
            for k in t.keys() {
                if !self.seen.contains(&k.as_str()) {
                    c.push(format!("unknown key {}", self.key(k)));
                }
            }
        }
    }
}

fn as_f64_list(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?
        .iter()
        .map(|x| match x {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => None,
        })
        .collect()
}

fn sub_table<'a>(root: &'a Table, name: &str, c: &mut Collector) -> Option<&'a Table> {
    match root.get(name) {
        None => None,
        Some(Value::Table(t)) => Some(t),
        Some(_) => {
            c.push(format!("{name}: expected a table"));
            None
        }
    }
}

const METHODS: [(&str, Method); 5] = [
    ("cafe", Method::Cafe),
    ("fedavg", Method::Fedavg),
    ("fedsam", Method::Fedsam),
    ("fedswa", Method::Fedswa),
    ("kd_fedavg", Method::KdFedavg),
];

fn parse_method(root: &Table, c: &mut Collector) -> MethodConfig {
    let mut s = Section::new("method", sub_table(root, "method", c));
    let method = match s.choice(c, "name", &METHODS) {
        Some(m) => m,
        None => {
            if s.table.is_none_or(|t| !t.contains_key("name")) {
                c.push("method.name: required");
            }
            Method::Cafe
        }
    };
    let d = MethodConfig::new(method);
    let mut cfg = MethodConfig {
        alpha: s.f64(c, "alpha", d.alpha),
        epsilon: s.f64(c, "epsilon", d.epsilon),
        cycle: s.usize(c, "cycle", d.cycle),
        swa_start_fraction: s.f64(c, "swa_start_fraction", d.swa_start_fraction),
        epochs: s.usize(c, "epochs", d.epochs),
        batch_size: s.usize(c, "batch_size", d.batch_size),
        rounds: s.usize(c, "rounds", d.rounds),
        lr: s.f64(c, "lr", d.lr),
        swa_lr: s.f64(c, "swa_lr", d.swa_lr),
        sam_rho: s.f64(c, "sam_rho", d.sam_rho),
        kd_warmup_rounds: s.opt_usize(c, "kd_warmup_rounds"),
        kd_temperature: s.f64(c, "kd_temperature", d.kd_temperature),
        kd_mix: s.f64(c, "kd_mix", d.kd_mix),
        power: PowerConfig {
            tol: s.f64(c, "power_tol", d.power.tol),
            max_iter: s.usize(c, "power_max_iter", d.power.max_iter),
            seed: 0,
        },
        optimizer_override: s.choice(c, "optimizer", &[("sgd", Optimizer::Sgd), ("sam", Optimizer::Sam)]),
        weighting_override: s.choice(
            c,
            "weighting",
            &[
                ("sharpness", Weighting::Sharpness),
                ("data_size", Weighting::DataSize),
                ("uniform", Weighting::Uniform),
            ],
        ),
        swa_override: s.bool(c, "swa"),
        ..d
    };
    match s.raw("participation") {
        None => {}
        Some(Value::String(x)) if x == "all" => {}
        Some(v) => match as_f64_list(v) {
            Some(p) => cfg.participation = Some(p),
            None => c.push("method.participation: expected \"all\" or an array of probabilities"),
        },
    }
    for v in cfg.violations() {
        c.push(format!("method: {v}"));
    }
    s.finish(c);
    cfg
}

fn parse_model(root: &Table, c: &mut Collector) -> ModelConfig {
    let mut s = Section::new("model", sub_table(root, "model", c));
    let hidden = match s.raw("hidden") {
        None => vec![16],
        Some(v) => match v.as_array().map(|a| a.iter().map(|x| x.as_integer()).collect::<Option<Vec<_>>>()) {
            Some(Some(list)) if list.iter().all(|&w| w >= 1) => list.into_iter().map(|w| w as usize).collect(),
            _ => {
                c.push("model.hidden: expected an array of positive integers");
                vec![16]
            }
        },
    };
    let activation = s
        .choice(c, "activation", &[("tanh", Activation::Tanh), ("relu", Activation::Relu)])
        .unwrap_or(Activation::Tanh);
    s.finish(c);
    ModelConfig { hidden, activation }
}

fn parse_data(root: &Table, c: &mut Collector) -> DataSource {
    let mut s = Section::new("data", sub_table(root, "data", c));
    if let Some(path) = s.str(c, "path") {
        s.finish(c);
        return DataSource::File { path: PathBuf::from(path) };
    }
    let d = SyntheticSpec::disparity_fixture();
    let seed = s.u64(c, "seed", 0);
    let dim = s.usize(c, "dim", d.dim);
    let mut spec = SyntheticSpec {
        dim,
        n_total: s.usize(c, "n_total", d.n_total),
        group_ratio: s.f64(c, "group_ratio", d.group_ratio),
        examples_per_person: s.usize(c, "examples_per_person", d.examples_per_person),
        person_spread: s.f64(c, "person_spread", d.person_spread),
        feature_std: s.f64(c, "feature_std", d.feature_std),
        ..d
    };
    if let Some(noise) = s.f64_list(c, "label_noise") {
        match noise.as_slice() {
            [a, b] => spec.label_noise = [*a, *b],
            _ => c.push("data.label_noise: expected two entries (group 0, group 1)"),
        }
    }
    match s.raw("means") {
        Some(v) => match parse_means(v) {
            Some(m) => spec.group_means = m,
            None => c.push("data.means: expected [[class0, class1], [class0, class1]] of number arrays"),
        },
        None if dim != d.dim => c.push(format!(
            "data.means: required when dim differs from the default fixture's {}",
            d.dim
        )),
        None => {}
    }
    if let Err(e) = spec.validate() {
        c.push(format!("data: {e}"));
    }
    s.finish(c);
    DataSource::Synthetic { spec, seed }
}

fn parse_means(v: &Value) -> Option<[[Vec<f64>; 2]; 2]> {
    let groups = v.as_array()?;
    if groups.len() != 2 {
        return None;
    }
    let mut out: [[Vec<f64>; 2]; 2] = Default::default();
    for (g, classes) in groups.iter().enumerate() {
        let classes = classes.as_array()?;
        if classes.len() != 2 {
            return None;
        }
        for (k, m) in classes.iter().enumerate() {
            out[g][k] = as_f64_list(m)?;
        }
    }
    Some(out)
}

fn parse_partition(root: &Table, c: &mut Collector) -> (PartitionSpec, u64) {
    let mut s = Section::new("partition", sub_table(root, "partition", c));
    let mode = s
        .choice(
            c,
            "mode",
            &[
                ("multi_person", PartitionMode::MultiPerson),
                ("single_and_multi", PartitionMode::SingleAndMulti),
                ("single_only", PartitionMode::SingleOnly),
            ],
        )
        .unwrap_or(PartitionMode::MultiPerson);
    let compositions = match s.raw("compositions") {
        None => vec![(4, 1); 5],
        Some(v) => {
            let parsed = v.as_array().and_then(|rows| {
                rows.iter()
                    .map(|r| match r.as_array().map(|a| a.as_slice()) {
                        Some([Value::Integer(a), Value::Integer(b)]) if *a >= 0 && *b >= 0 => {
                            Some((*a as usize, *b as usize))
                        }
                        _ => None,
                    })
                    .collect::<Option<Vec<_>>>()
            });
            parsed.unwrap_or_else(|| {
                c.push("partition.compositions: expected an array of [group0, group1] person counts");
                vec![(4, 1); 5]
            })
        }
    };
    let mut spec = PartitionSpec::new(mode, compositions);
    spec.train_fraction = s.f64(c, "train_fraction", spec.train_fraction);
    spec.ordered_split = s.bool(c, "ordered_split").unwrap_or(false);
    let seed = s.u64(c, "seed", 0);
    if let Err(e) = spec.validate() {
        c.push(format!("partition: {e}"));
    }
    s.finish(c);
    (spec, seed)
}

/// Parse and fully validate configuration text.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| ConfigError {
        problems: vec![format!("not valid TOML: {}", e.message())],
    })?;
    let mut c = Collector { problems: Vec::new() };
    let mut top = Section::new("", Some(&root));
    for name in ["method", "model", "data", "partition"] {
        top.raw(name);
    }
    let seeds = match top.raw("seeds") {
        None => {
            c.push("seeds: required");
            vec![]
        }
        Some(v) => match v.as_array().map(|a| a.iter().map(|x| x.as_integer()).collect::<Option<Vec<_>>>()) {
            Some(Some(list)) if !list.is_empty() && list.iter().all(|&s| s >= 0) => {
                list.into_iter().map(|s| s as u64).collect()
            }
            _ => {
                c.push("seeds: expected a nonempty array of non-negative integers");
                vec![]
            }
        },
    };
    let output_dir = top.str(&mut c, "output_dir").map(PathBuf::from);
    let baseline = top.choice(&mut c, "baseline", &METHODS).unwrap_or(Method::Fedavg);
    let fate_metric = top
        .choice(&mut c, "fate_metric", &[("f1", FatePerf::F1), ("accuracy", FatePerf::Accuracy)])
        .unwrap_or_default();
    top.finish(&mut c);

    let method = parse_method(&root, &mut c);
    let model = parse_model(&root, &mut c);
    let data = parse_data(&root, &mut c);
    let (partition, partition_seed) = parse_partition(&root, &mut c);
    if let (Some(p), n) = (&method.participation, partition.client_compositions.len()) {
        if p.len() != n {
            c.push(format!("method.participation: {} probabilities for {n} clients", p.len()));
        }
    }
    if c.problems.is_empty() {
        Ok(ExperimentConfig {
            method,
            baseline,
            fate_metric,
            model,
            data,
            partition,
            partition_seed,
            seeds,
            output_dir,
        })
    } else {
        Err(ConfigError { problems: c.problems })
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        problems: vec![format!("cannot read {}: {e}", path.display())],
    })?;
    let mut cfg = parse_config_str(&text)?;
    // relative dataset paths resolve against the config file's directory
    if let DataSource::File { path: data_path } = &mut cfg.data {
        if data_path.is_relative() {
            if let Some(dir) = path.parent() {
                *data_path = dir.join(&*data_path);
            }
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seeds = [1]\n[method]\nname = \"cafe\"\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.method.alpha, 0.92);
        assert_eq!(cfg.method.epsilon, 0.005);
        assert_eq!(cfg.method.cycle, 5);
        assert_eq!(cfg.method.rounds, 80);
        assert_eq!(cfg.method.swa_start_round(), 16);
        assert_eq!(cfg.method.epochs, 3);
        assert_eq!(cfg.baseline, Method::Fedavg);
        assert_eq!(cfg.partition.client_compositions, vec![(4, 1); 5]);
    }

    #[test]
    fn out_of_range_alpha_is_named() {
        let err = parse_config_str("seeds = [1]\n[method]\nname = \"cafe\"\nalpha = 1.3\n").unwrap_err();
        assert_eq!(err.problems.len(), 1);
        assert!(err.problems[0].contains("alpha") && err.problems[0].contains("[0, 1]"));
    }

    #[test]
    fn unknown_keys_listed() {
        let err = parse_config_str("seeds = [1]\ncolour = 3\n[method]\nname = \"cafe\"\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.problems.iter().any(|p| p.contains("unknown key colour")));
        assert!(err.problems.iter().any(|p| p.contains("unknown key method.learning_rate")));
    }

    #[test]
    fn all_problems_reported_together() {
        let text = "[method]\nname = \"nope\"\nepsilon = -1\n[model]\nactivation = \"gelu\"\n[partition]\nmode = \"single_only\"\ncompositions = [[2, 0]]\n";
        let err = parse_config_str(text).unwrap_err();
        let joined = err.problems.join("\n");
        for needle in ["seeds", "method.name", "epsilon", "model.activation", "partition"] {
            assert!(joined.contains(needle), "missing {needle} in {joined}");
        }
    }

    #[test]
    fn file_source_and_participation() {
        let text = "seeds = [0]\n[method]\nname = \"fedavg\"\nparticipation = [0.5, 0.5]\n[data]\npath = \"d.csv\"\n[partition]\ncompositions = [[2, 0], [1, 1]]\n";
        let cfg = parse_config_str(text).unwrap();
        assert_eq!(cfg.data, DataSource::File { path: "d.csv".into() });
        assert_eq!(cfg.method.participation, Some(vec![0.5, 0.5]));
        let bad = text.replace("[0.5, 0.5]", "[0.5]");
        assert!(parse_config_str(&bad).is_err());
    }
}
