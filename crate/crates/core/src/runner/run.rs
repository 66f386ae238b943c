use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate, partition, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::{fate, FatePerf};
use crate::nn::MlpSpec;
use crate::protocol::{run_experiment, ClientState, ExperimentOutcome, GlobalEval, Method, MethodConfig};

use super::config::{DataSource, ExperimentConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SUMMARY_TABLE_FILE: &str = "summary.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
}

/// Final metrics of one seed. Failed seeds carry `error` and no numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub error: Option<String>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub eo_gap: Option<f64>,
    pub delta_lambda_f: Option<f64>,
    pub baseline_f1: Option<f64>,
    pub baseline_accuracy: Option<f64>,
    pub baseline_eo_gap: Option<f64>,
    pub baseline_delta_lambda_f: Option<f64>,
    pub fate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub baseline: Method,
    pub fate_metric: FatePerf,
    pub config_hash: String,
    pub dataset_hash: String,
    pub seeds: Vec<SeedResult>,
    pub f1: Option<Stat>,
    pub accuracy: Option<Stat>,
    pub eo_gap: Option<Stat>,
    pub delta_lambda_f: Option<Stat>,
    pub fate: Option<Stat>,
    pub baseline_f1: Option<Stat>,
    pub baseline_accuracy: Option<Stat>,
    pub baseline_eo_gap: Option<Stat>,
    pub baseline_delta_lambda_f: Option<Stat>,
}

impl RunSummary {
    pub fn failed_seeds(&self) -> Vec<u64> {
        self.seeds.iter().filter(|s| s.error.is_some()).map(|s| s.seed).collect()
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Io(format!("serialization: {e}")))
}

/// Hash of every config field except the output location.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.output_dir = None;
    let text = serde_json::to_string(&c).map_err(|e| Error::Io(format!("serialization: {e}")))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

pub fn load_dataset(source: &DataSource) -> Result<LabeledDataset> {
    match source {
        DataSource::Synthetic { spec, seed } => generate(spec, *seed),
        DataSource::File { path } => LabeledDataset::read_csv(File::open(path).map_err(|e| io_err(path, e))?),
    }
}

/// The baseline trains with its own method defaults, sharing the schedule,
/// local budget and power settings of the compared method.
fn baseline_config(cfg: &MethodConfig, baseline: Method) -> MethodConfig {
    MethodConfig {
        method: baseline,
        optimizer_override: None,
        weighting_override: None,
        swa_override: None,
        ..cfg.clone()
    }
}

fn write_metrics(path: &Path, outcome: &ExperimentOutcome) -> Result<()> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    for r in &outcome.reports {
        let line = serde_json::to_string(r).map_err(|e| Error::Io(format!("serialization: {e}")))?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn perf(eval: &GlobalEval, metric: FatePerf) -> f64 {
    match metric {
        FatePerf::F1 => eval.f1,
        FatePerf::Accuracy => eval.accuracy,
    }
}

fn run_seed(
    cfg: &ExperimentConfig,
    spec: &MlpSpec,
    clients: &[ClientState],
    seed: u64,
    out: &Path,
) -> Result<SeedResult> {
    let main = run_experiment(clients, spec, &cfg.method, seed)?;
    write_metrics(&out.join(format!("metrics_seed_{seed}.jsonl")), &main)?;
    let base = if cfg.baseline == cfg.method.method {
        None
    } else {
        let b = run_experiment(clients, spec, &baseline_config(&cfg.method, cfg.baseline), seed)?;
        write_metrics(&out.join(format!("baseline_metrics_seed_{seed}.jsonl")), &b)?;
        Some(b.final_eval)
    };
    let m = &main.final_eval;
    let b = base.as_ref().unwrap_or(m);
    let fate_value = if base.is_none() {
        Some(0.0)
    } else {
        match (m.eo_gap, b.eo_gap) {
            (Some(eo_m), Some(eo_b)) => fate(perf(m, cfg.fate_metric), perf(b, cfg.fate_metric), eo_m, eo_b).ok(),
            _ => None,
        }
    };
    Ok(SeedResult {
        seed,
        error: None,
        f1: Some(m.f1),
        accuracy: Some(m.accuracy),
        eo_gap: m.eo_gap,
        delta_lambda_f: m.delta_lambda_f,
        baseline_f1: Some(b.f1),
        baseline_accuracy: Some(b.accuracy),
        baseline_eo_gap: b.eo_gap,
        baseline_delta_lambda_f: b.delta_lambda_f,
        fate: fate_value,
    })
}

fn stat_of(seeds: &[SeedResult], f: impl Fn(&SeedResult) -> Option<f64>) -> Option<Stat> {
    Stat::of(&seeds.iter().filter_map(f).collect::<Vec<_>>())
}

fn fmt_stat(s: &Option<Stat>) -> String {
    match s {
        Some(s) => format!("{:.6}\t{:.6}", s.mean, s.std),
        None => "NA\tNA".into(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{x:.6}"))
}

fn summary_table(s: &RunSummary) -> String {
    let mut t = String::from("seed\tstatus\tf1\taccuracy\teo_gap\tdelta_lambda_f\tfate\n");
    for r in &s.seeds {
        let status = if r.error.is_some() { "failed" } else { "ok" };
        let _ = writeln!(
            t,
            "{}\t{status}\t{}\t{}\t{}\t{}\t{}",
            r.seed,
            fmt_opt(r.f1),
            fmt_opt(r.accuracy),
            fmt_opt(r.eo_gap),
            fmt_opt(r.delta_lambda_f),
            fmt_opt(r.fate)
        );
    }
    t.push_str("\nmetric\tmean\tstd\n");
    for (name, stat) in [
        ("f1", &s.f1),
        ("accuracy", &s.accuracy),
        ("eo_gap", &s.eo_gap),
        ("delta_lambda_f", &s.delta_lambda_f),
        ("fate", &s.fate),
        ("baseline_f1", &s.baseline_f1),
        ("baseline_eo_gap", &s.baseline_eo_gap),
        ("baseline_delta_lambda_f", &s.baseline_delta_lambda_f),
    ] {
        let _ = writeln!(t, "{name}\t{}", fmt_stat(stat));
    }
    t
}

/// Run every seed of `cfg`, writing artifacts under `out`.
///
/// A seed that fails numerically is recorded in the summary and the other
/// seeds continue. IO failures abort.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let dataset = load_dataset(&cfg.data)?;
    let dataset_hash = dataset.content_hash()?;
    let config_hash = config_hash(cfg)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash.clone(),
        dataset_hash: dataset_hash.clone(),
        seeds: cfg.seeds.clone(),
        config: cfg.clone(),
    };
    write_file(&out.join(MANIFEST_FILE), to_json(&manifest)?.as_bytes())?;

    let clients = partition(&dataset, &cfg.partition, cfg.partition_seed)?;
    let spec = MlpSpec::classifier(dataset.dim(), &cfg.model.hidden, cfg.model.activation)?;

    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        match run_seed(cfg, &spec, &clients, seed, out) {
            Ok(r) => seeds.push(r),
            Err(e @ Error::Io(_)) => return Err(e),
            Err(e) => seeds.push(SeedResult {
                seed,
                error: Some(e.to_string()),
                f1: None,
                accuracy: None,
                eo_gap: None,
                delta_lambda_f: None,
                baseline_f1: None,
                baseline_accuracy: None,
                baseline_eo_gap: None,
                baseline_delta_lambda_f: None,
                fate: None,
            }),
        }
    }
    let summary = RunSummary {
        method: cfg.method.method,
        baseline: cfg.baseline,
        fate_metric: cfg.fate_metric,
        config_hash,
        dataset_hash,
        f1: stat_of(&seeds, |s| s.f1),
        accuracy: stat_of(&seeds, |s| s.accuracy),
        eo_gap: stat_of(&seeds, |s| s.eo_gap),
        delta_lambda_f: stat_of(&seeds, |s| s.delta_lambda_f),
        fate: stat_of(&seeds, |s| s.fate),
        baseline_f1: stat_of(&seeds, |s| s.baseline_f1),
        baseline_accuracy: stat_of(&seeds, |s| s.baseline_accuracy),
        baseline_eo_gap: stat_of(&seeds, |s| s.baseline_eo_gap),
        baseline_delta_lambda_f: stat_of(&seeds, |s| s.baseline_delta_lambda_f),
        seeds,
    };
    write_file(&out.join(SUMMARY_FILE), to_json(&summary)?.as_bytes())?;
    write_file(&out.join(SUMMARY_TABLE_FILE), summary_table(&summary).as_bytes())?;
    Ok(summary)
}

/// One line of a cross-run comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub method: Method,
    pub seeds: usize,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub eo_gap: Option<f64>,
    pub delta_lambda_f: Option<f64>,
    /// Against the baseline run's cross-seed means; 0 for the baseline itself.
    pub fate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub baseline_run: String,
    pub fate_metric: FatePerf,
    pub dataset_hash: String,
    pub rows: Vec<ReportRow>,
}

fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(&path, e))
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn mean(s: &Option<Stat>) -> Option<f64> {
    s.map(|s| s.mean)
}

fn report_table(r: &Report) -> String {
    let mut t = String::from("run\tmethod\tseeds\tf1\taccuracy\teo_gap\tdelta_lambda_f\tfate\n");
    for row in &r.rows {
        let _ = writeln!(
            t,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            row.run,
            row.method.name(),
            row.seeds,
            fmt_opt(row.f1),
            fmt_opt(row.accuracy),
            fmt_opt(row.eo_gap),
            fmt_opt(row.delta_lambda_f),
            fmt_opt(row.fate)
        );
    }
    t
}

/// Compare finished runs; FATE is taken against `baseline` (default: the
/// first run). Writes `report.tsv` and `report.json` into `out`.
pub fn report(run_dirs: &[PathBuf], baseline: Option<&Path>, out: &Path) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let summaries = run_dirs.iter().map(|d| read_summary(d)).collect::<Result<Vec<_>>>()?;
    let base_dir = baseline.unwrap_or(&run_dirs[0]);
    let base = match run_dirs.iter().position(|d| d == base_dir) {
        Some(i) => summaries[i].clone(),
        None => read_summary(base_dir)?,
    };
    for (dir, s) in run_dirs.iter().zip(&summaries) {
        if s.dataset_hash != base.dataset_hash {
            return Err(Error::Config(format!(
                "dataset hash mismatch: {} has {}, baseline {} has {}",
                dir.display(),
                s.dataset_hash,
                base_dir.display(),
                base.dataset_hash
            )));
        }
    }
    let metric = base.fate_metric;
    let perf_of = |s: &RunSummary| match metric {
        FatePerf::F1 => mean(&s.f1),
        FatePerf::Accuracy => mean(&s.accuracy),
    };
    let rows = run_dirs
        .iter()
        .zip(&summaries)
        .map(|(dir, s)| {
            let fate_value = if dir == base_dir {
                Some(0.0)
            } else {
                match (perf_of(s), perf_of(&base), mean(&s.eo_gap), mean(&base.eo_gap)) {
                    (Some(pm), Some(pb), Some(em), Some(eb)) => fate(pm, pb, em, eb).ok(),
                    _ => None,
                }
            };
            ReportRow {
                run: run_label(dir),
                method: s.method,
                seeds: s.seeds.iter().filter(|r| r.error.is_none()).count(),
                f1: mean(&s.f1),
                accuracy: mean(&s.accuracy),
                eo_gap: mean(&s.eo_gap),
                delta_lambda_f: mean(&s.delta_lambda_f),
                fate: fate_value,
            }
        })
        .collect();
    let rep = Report {
        baseline_run: run_label(base_dir),
        fate_metric: metric,
        dataset_hash: base.dataset_hash.clone(),
        rows,
    };
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_file(&out.join("report.tsv"), report_table(&rep).as_bytes())?;
    write_file(&out.join("report.json"), to_json(&rep)?.as_bytes())?;
    Ok(rep)
}
