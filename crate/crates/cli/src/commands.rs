//! The five subcommands. Each returns a summary and writes its artifacts under
//! the configured output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use usbd_core::adapt::{adapt, covering_discrepancy, predict, SpectralFingerprint};
use usbd_core::datagen::gen_shift_pair;
use usbd_core::distill::{
    covering_residual, distill, trace_csv, worst_probe_gap, CoveringReport, SyntheticBasis,
    TraceRow,
};
use usbd_core::gradcheck::{registry, run_oracles, OracleResult};
use usbd_core::tape::Primitive;
use usbd_core::tudataset::{export_tudataset, load_tudataset};
use usbd_core::{Domain, UnlabeledDomain};

use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::error::CliError;

pub const SOURCE_NAME: &str = "SOURCE";
pub const TARGET_NAME: &str = "TARGET";
pub const PROBES: usize = 100;

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_graphs<'a>(
    hasher: &mut Sha256,
    graphs: impl Iterator<Item = (&'a usbd_core::Tensor, &'a usbd_core::Tensor, Option<usize>)>,
) {
    for (a, x, label) in graphs {
        hasher.update((a.rows() as u64).to_le_bytes());
        hasher.update((x.cols() as u64).to_le_bytes());
        hasher.update(label.map_or(u64::MAX, |y| y as u64).to_le_bytes());
        for v in a.data().iter().chain(x.data()) {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
}

/// Content hash of a labeled domain.
pub fn domain_hash(d: &Domain) -> String {
    let mut h = Sha256::new();
    hash_graphs(&mut h, d.graphs.iter().map(|g| (&g.adjacency, &g.features, g.label)));
    hex::encode(h.finalize())
}

pub fn unlabeled_hash(d: &UnlabeledDomain) -> String {
    let mut h = Sha256::new();
    hash_graphs(&mut h, d.graphs.iter().map(|g| (&g.adjacency, &g.features, None)));
    hex::encode(h.finalize())
}

/// The resolved config without the output directory, so reports do not depend on where they land.
fn report_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        out: PathBuf::new(),
        ..cfg.resolved()
    }
}

fn combined_hash(parts: &[&str]) -> String {
    sha256_hex(parts.join("\n").as_bytes())
}

fn source_domain(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Domain, CliError> {
    let source = match (dir, &cfg.data.dataset, &cfg.data.generated) {
        (Some(dir), _, _) => load_tudataset(dir, SOURCE_NAME)?,
        (None, Some(ds), _) => load_tudataset(&ds.source_dir, &ds.source_name)?,
        (None, None, Some(g)) => gen_shift_pair(&g.source, &g.target)?.source,
        (None, None, None) => return Err(CliError::Config("no data source configured".into())),
    };
    if !source.is_labeled() {
        return Err(CliError::Data("source domain has no graph labels".into()));
    }
    Ok(source)
}

/// The target as an unlabeled view. Label files, if present, are never opened.
fn target_domain(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<UnlabeledDomain, CliError> {
    let load = |dir: &Path, name: &str| -> Result<UnlabeledDomain, CliError> {
        let scratch = unlabeled_copy(dir, name)?;
        let d = load_tudataset(scratch.path(), name)?;
        Ok(d.into_unlabeled())
    };
    match (dir, &cfg.data.dataset, &cfg.data.generated) {
        (Some(dir), _, _) => load(dir, TARGET_NAME),
        (None, Some(ds), _) => load(&ds.target_dir, &ds.target_name),
        (None, None, Some(g)) => Ok(gen_shift_pair(&g.source, &g.target)?.target),
        (None, None, None) => Err(CliError::Config("no data source configured".into())),
    }
}

/// Copies every dataset file except `graph_labels` into a scratch directory.
fn unlabeled_copy(dir: &Path, name: &str) -> Result<ScratchDir, CliError> {
    let scratch = ScratchDir::new()?;
    for suffix in ["A", "graph_indicator", "node_attributes", "node_labels"] {
        let file = dir.join(format!("{name}_{suffix}.txt"));
        if file.exists() {
            std::fs::copy(&file, scratch.path().join(format!("{name}_{suffix}.txt")))
                .map_err(|e| CliError::Data(format!("{}: {e}", file.display())))?;
        }
    }
    Ok(scratch)
}

struct ScratchDir(PathBuf);

impl ScratchDir {
    fn new() -> Result<Self, CliError> {
        use std::sync::atomic::{AtomicUsize, Ordering};
        static NEXT: AtomicUsize = AtomicUsize::new(0);
        let dir = std::env::temp_dir().join(format!(
            "usbd-{}-{}",
            std::process::id(),
            NEXT.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        Ok(ScratchDir(dir))
    }

    fn path(&self) -> &Path {
        &self.0
    }
}

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'static str,
    config: &'a ExperimentConfig,
    files: Vec<(String, String)>,
}

/// Writes `source/`, `target/` (no label file), `target_labels.txt` and `manifest.json`.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let g = cfg
        .data
        .generated
        .as_ref()
        .ok_or_else(|| CliError::Config("gen-data needs data.generated".into()))?;
    let pair = gen_shift_pair(&g.source, &g.target)?;
    let out = &cfg.out;
    export_tudataset(&pair.source, &out.join("source"), SOURCE_NAME)?;
    export_tudataset(&pair.target.to_domain(), &out.join("target"), TARGET_NAME)?;
    let labels: String = pair.target_labels.iter().map(|y| format!("{y}\n")).collect();
    write(&out.join("target_labels.txt"), &labels)?;

    let mut files = Vec::new();
    for rel in [
        "source/SOURCE_A.txt",
        "source/SOURCE_graph_indicator.txt",
        "source/SOURCE_graph_labels.txt",
        "source/SOURCE_node_attributes.txt",
        "target/TARGET_A.txt",
        "target/TARGET_graph_indicator.txt",
        "target/TARGET_node_attributes.txt",
        "target_labels.txt",
    ] {
        let bytes = std::fs::read(out.join(rel))?;
        files.push((rel.to_string(), sha256_hex(&bytes)));
    }
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            schema_version: SCHEMA_VERSION,
            command: "gen-data",
            config: &report_config(cfg),
            files,
        },
    )?;
    Ok(out.join("manifest.json"))
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeCheck {
    pub count: usize,
    pub worst_gap: f64,
    pub radius: f64,
    pub certified: bool,
}

#[derive(Serialize)]
struct DistillReport<'a> {
    schema_version: u32,
    command: &'static str,
    variant: String,
    config: &'a ExperimentConfig,
    input_hash: String,
    covering: &'a CoveringReport,
    anchors: &'a [f64],
    residual_exceeds_half_delta: bool,
    probes: &'a ProbeCheck,
    final_iteration: Option<&'a TraceRow>,
}

#[derive(Serialize)]
struct Timing {
    schema_version: u32,
    command: &'static str,
    phases_ms: Vec<(&'static str, f64)>,
}

pub struct DistillSummary {
    pub basis: SyntheticBasis,
    pub trace: Vec<TraceRow>,
    pub covering: CoveringReport,
    pub probes: ProbeCheck,
    pub basis_path: PathBuf,
    pub seconds: f64,
}

/// `PROBES` evenly spaced energies over `[0, e_max]`.
pub fn probe_energies(e_max: f64) -> Vec<f64> {
    (0..PROBES).map(|i| e_max * i as f64 / (PROBES - 1) as f64).collect()
}

/// Distills a basis and writes `basis.json`, `trace.csv`, `distill_report.json`
/// and `distill_timing.json`.
pub fn cmd_distill(cfg: &ExperimentConfig, source_dir: Option<&Path>) -> Result<DistillSummary, CliError> {
    let started = Instant::now();
    let source = source_domain(cfg, source_dir).map_err(CliError::in_stage("distill: source"))?;
    let d = cfg.resolved_distill();
    let init = SyntheticBasis::init_from_source(&d.basis, &source, cfg.seed)?;
    let (basis, trace) = distill(&source, &d, init).map_err(|e| CliError::in_stage("distill")(e.into()))?;
    let seconds = started.elapsed().as_secs_f64();

    let covering = covering_residual(&basis)?;
    let worst_gap = worst_probe_gap(&covering.energies, &probe_energies(basis.e_max));
    let probes = ProbeCheck {
        count: PROBES,
        worst_gap,
        radius: covering.radius,
        certified: worst_gap <= covering.radius + 1e-12,
    };
    let out = &cfg.out;
    let basis_path = out.join("basis.json");
    let basis_json = basis.to_json()?;
    write(&basis_path, &basis_json)?;
    write(&out.join("trace.csv"), &trace_csv(&trace))?;
    let resolved = report_config(cfg);
    let config_json = serde_json::to_string(&resolved)?;
    write_json(
        &out.join("distill_report.json"),
        &DistillReport {
            schema_version: SCHEMA_VERSION,
            command: "distill",
            variant: cfg.ablation.variant(),
            config: &resolved,
            input_hash: combined_hash(&[&config_json, &domain_hash(&source)]),
            covering: &covering,
            anchors: &basis.anchors,
            residual_exceeds_half_delta: covering.epsilon_resid > covering.delta / 2.0,
            probes: &probes,
            final_iteration: trace.last(),
        },
    )?;
    write_json(
        &out.join("distill_timing.json"),
        &Timing {
            schema_version: SCHEMA_VERSION,
            command: "distill",
            phases_ms: vec![("distill", seconds * 1e3)],
        },
    )?;
    Ok(DistillSummary {
        basis,
        trace,
        covering,
        probes,
        basis_path,
        seconds,
    })
}

#[derive(Serialize)]
struct AdaptReport<'a> {
    schema_version: u32,
    command: &'static str,
    variant: String,
    config: &'a ExperimentConfig,
    input_hash: String,
    n_graphs: usize,
    fingerprint: &'a SpectralFingerprint,
    weights: &'a [f64],
    covering_discrepancy: f64,
    epsilon_resid: f64,
    prediction_counts: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AdaptTiming {
    pub fingerprint_ms: f64,
    pub proxy_train_ms: f64,
    pub predict_ms: f64,
}

pub struct AdaptSummary {
    pub predictions: Vec<usize>,
    pub weights: Vec<f64>,
    pub fingerprint: SpectralFingerprint,
    pub covering_discrepancy: f64,
    pub timing: AdaptTiming,
}

/// Adapts to the target and writes `predictions.txt`, `adapt_report.json` and
/// `adapt_timing.json`. Timings live apart so reports stay byte-reproducible.
pub fn cmd_adapt(
    cfg: &ExperimentConfig,
    basis_path: &Path,
    target_dir: Option<&Path>,
) -> Result<AdaptSummary, CliError> {
    let basis_text = read(basis_path)?;
    let basis = SyntheticBasis::from_json(&basis_text).map_err(|e| CliError::in_stage("adapt: basis")(e.into()))?;
    let target = target_domain(cfg, target_dir).map_err(CliError::in_stage("adapt: target"))?;
    let a = cfg.resolved_adapt();
    let outcome = adapt(&basis, &target, &a, None).map_err(|e| CliError::in_stage("adapt")(e.into()))?;
    let started = Instant::now();
    let predictions = predict(&outcome.phi, &target.graphs)?;
    let predict_ms = started.elapsed().as_secs_f64() * 1e3;

    let discrepancy = covering_discrepancy(&basis, &target.graphs)?;
    let covering = covering_residual(&basis)?;
    let mut counts = vec![0; basis.num_classes];
    for &p in &predictions {
        counts[p] += 1;
    }
    let out = &cfg.out;
    let lines: String = predictions.iter().map(|p| format!("{p}\n")).collect();
    write(&out.join("predictions.txt"), &lines)?;
    let resolved = report_config(cfg);
    let config_json = serde_json::to_string(&resolved)?;
    write_json(
        &out.join("adapt_report.json"),
        &AdaptReport {
            schema_version: SCHEMA_VERSION,
            command: "adapt",
            variant: cfg.ablation.variant(),
            config: &resolved,
            input_hash: combined_hash(&[
                &config_json,
                &sha256_hex(basis_text.as_bytes()),
                &unlabeled_hash(&target),
            ]),
            n_graphs: target.len(),
            fingerprint: &outcome.fingerprint,
            weights: &outcome.weights,
            covering_discrepancy: discrepancy,
            epsilon_resid: covering.epsilon_resid,
            prediction_counts: counts,
        },
    )?;
    let timing = AdaptTiming {
        fingerprint_ms: outcome.timings.fingerprint_ms,
        proxy_train_ms: outcome.timings.proxy_train_ms,
        predict_ms,
    };
    write_json(&out.join("adapt_timing.json"), &timing)?;
    Ok(AdaptSummary {
        predictions,
        weights: outcome.weights,
        fingerprint: outcome.fingerprint,
        covering_discrepancy: discrepancy,
        timing,
    })
}

fn read_classes(path: &Path) -> Result<Vec<usize>, CliError> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(predictions: &[usize], labels: &[usize]) -> Result<EvalSummary, CliError> {
    if predictions.len() != labels.len() {
        return Err(CliError::Data(format!(
            "length mismatch: {} predictions, {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(CliError::Data("no labels to score".into()));
    }
    let classes = predictions.iter().chain(labels).max().map_or(0, |m| m + 1);
    let mut confusion = vec![vec![0; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(EvalSummary {
        accuracy: correct as f64 / labels.len() as f64,
        correct,
        total: labels.len(),
        confusion,
    })
}

pub fn confusion_csv(confusion: &[Vec<usize>]) -> String {
    let mut out = String::from("true\\predicted");
    for c in 0..confusion.len() {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (y, row) in confusion.iter().enumerate() {
        let _ = write!(out, "{y}");
        for n in row {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
    }
    out
}

/// Scores predictions and writes `confusion.csv` and `eval_report.json` into `out`.
pub fn cmd_eval(predictions: &Path, labels: &Path, out: &Path) -> Result<EvalSummary, CliError> {
    let summary = evaluate(&read_classes(predictions)?, &read_classes(labels)?)?;
    write(&out.join("confusion.csv"), &confusion_csv(&summary.confusion))?;
    #[derive(Serialize)]
    struct Report<'a> {
        schema_version: u32,
        command: &'static str,
        accuracy: String,
        summary: &'a EvalSummary,
    }
    write_json(
        &out.join("eval_report.json"),
        &Report {
            schema_version: SCHEMA_VERSION,
            command: "eval",
            accuracy: format!("{:.6}", summary.accuracy),
            summary: &summary,
        },
    )?;
    Ok(summary)
}

/// Runs every registered oracle, optionally with one backward rule sign-flipped.
pub fn cmd_grad_check(fault: Option<&str>) -> Result<Vec<OracleResult>, CliError> {
    let fault = match fault {
        None => None,
        Some(name) => Some(
            Primitive::from_name(name)
                .ok_or_else(|| CliError::Config(format!("unknown primitive `{name}`")))?,
        ),
    };
    Ok(run_oracles(&registry(), fault)?)
}

pub fn oracle_table(results: &[OracleResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  {:>12}  {:>9}  result\n", "loss", "max_rel_err", "tolerance");
    for r in results {
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.3e}  {:>9.1e}  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_examples() {
        assert_eq!(evaluate(&[0, 1, 1], &[0, 1, 1]).unwrap().accuracy, 1.0);
        assert_eq!(evaluate(&[1, 0], &[0, 1]).unwrap().accuracy, 0.0);
        let s = evaluate(&[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap();
        assert_eq!(format!("{:.6}", s.accuracy), "0.750000");
        assert_eq!(s.confusion, vec![vec![1, 0], vec![1, 2]]);
        assert_eq!(evaluate(&[0], &[0, 1]).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn confusion_layout() {
        assert_eq!(
            confusion_csv(&[vec![1, 0], vec![1, 2]]),
            "true\\predicted,0,1\n0,1,0\n1,1,2\n"
        );
    }

    #[test]
    fn unknown_fault_is_a_config_error() {
        assert_eq!(cmd_grad_check(Some("nope")).unwrap_err().exit_code(), 2);
    }
}
