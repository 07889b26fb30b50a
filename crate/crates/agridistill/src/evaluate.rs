//! Per-domain evaluation, the benchmark grid runner with on-disk resume, and
//! mean/std aggregation into tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use agridistill_core::augment::{preprocess_eval, AugmentConfig, PreparedSample};
use agridistill_core::distill::foreground_probabilities;
use agridistill_core::metrics::{iou, IoUConfig};
use agridistill_core::stats::{mean, sample_std};
use agridistill_core::LogitsMap;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::datamodel::{fixed_source_tasks, leave_one_out_tasks, DGTask, DatasetManifest, DomainDataset};
use crate::error::{Error, Result};
use crate::network::{Mode, Model};
use crate::train::MethodConfig;

const EVAL_BATCH: usize = 16;

/// `(B, 3, H, W)` tensor of standardized images.
pub fn stack_images(batch: &[PreparedSample], device: &Device) -> Result<Tensor> {
    let first = batch.first().ok_or_else(|| Error::Argument("empty batch".into()))?;
    let (w, h) = (first.image.width(), first.image.height());
    let mut data = Vec::with_capacity(batch.len() * 3 * w * h);
    for s in batch {
        if (s.image.width(), s.image.height(), s.image.channels()) != (w, h, 3) {
            return Err(Error::Argument("batch images differ in shape".into()));
        }
        data.extend(s.image.to_planar());
    }
    Ok(Tensor::from_vec(data, (batch.len(), 3, h, w), device)?)
}

/// Splits `(B, C, H, W)` logits into per-sample double-precision maps.
pub fn logits_maps(logits: &Tensor) -> Result<Vec<LogitsMap>> {
    let (b, c, h, w) = logits.dims4()?;
    let flat = logits.flatten_all()?.to_vec1::<f32>()?;
    let per = c * h * w;
    (0..b).map(|i| Ok(LogitsMap::from_f32(c, h, w, &flat[i * per..(i + 1) * per])?)).collect()
}

/// Deterministic evaluation preprocessing of every sample.
pub fn prepare_eval(dataset: &DomainDataset, cfg: &AugmentConfig) -> Result<Vec<PreparedSample>> {
    (0..dataset.len()).map(|i| Ok(preprocess_eval(&dataset.get(i)?, cfg)?)).collect()
}

/// Foreground probabilities per sample (row-major `H x W`), from an eval-mode forward pass.
pub fn predict_probabilities(model: &Model, samples: &[PreparedSample]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let logits = model.forward(&stack_images(chunk, model.device())?, &mut Mode::Eval)?;
        for map in logits_maps(&logits)? {
            out.push(foreground_probabilities(&map)?);
        }
    }
    Ok(out)
}

/// Per-sample IoUs of already prepared samples.
pub fn sample_ious(model: &Model, samples: &[PreparedSample], cfg: &IoUConfig) -> Result<Vec<f64>> {
    let probs = predict_probabilities(model, samples)?;
    probs.iter().zip(samples).map(|(p, s)| Ok(iou(p, &s.mask, cfg)?)).collect()
}

/// Mean per-sample IoU of already prepared samples.
pub fn evaluate_prepared(model: &Model, samples: &[PreparedSample], cfg: &IoUConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty dataset".into()));
    }
    Ok(mean(&sample_ious(model, samples, cfg)?))
}

/// Mean per-sample IoU over `dataset` with deterministic preprocessing.
pub fn evaluate_domain(model: &Model, dataset: &DomainDataset, prep: &AugmentConfig, cfg: &IoUConfig) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Argument(format!("cannot evaluate on empty dataset '{}'", dataset.name())));
    }
    let prep = AugmentConfig { output_size: model.config().input_size, ..prep.clone() };
    evaluate_prepared(model, &prepare_eval(dataset, &prep)?, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub method: String,
    pub target_domain: String,
    pub seed: u64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Ok { iou: f64 },
    Failed { error: String },
}

/// Persisted record of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: String,
    pub target_domain: String,
    pub seed: u64,
    pub sources: Vec<String>,
    #[serde(flatten)]
    pub outcome: CellOutcome,
}

impl CellRecord {
    pub fn result(&self) -> Option<BenchmarkResult> {
        match self.outcome {
            CellOutcome::Ok { iou } => Some(BenchmarkResult {
                method: self.method.clone(),
                target_domain: self.target_domain.clone(),
                seed: self.seed,
                iou,
            }),
            CellOutcome::Failed { .. } => None,
        }
    }
}

/// One-file-per-cell store at `root/<method>/<target>/<seed>.json`.
#[derive(Debug, Clone)]
pub struct ResultStore {
    root: PathBuf,
}

impl ResultStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn cell_path(&self, method: &str, target: &str, seed: u64) -> PathBuf {
        self.root.join(method).join(target).join(format!("{seed}.json"))
    }

    pub fn get(&self, method: &str, target: &str, seed: u64) -> Result<Option<CellRecord>> {
        let path = self.cell_path(method, target, seed);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(serde_json::from_str(&text).map_err(|e| {
                Error::Integrity(format!("{}: unreadable result record: {e}", path.display()))
            })?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, record: &CellRecord) -> Result<()> {
        let path = self.cell_path(&record.method, &record.target_domain, record.seed);
        write_atomic(&path, serde_json::to_string_pretty(record)?.as_bytes())
    }

    /// Every record below the root, in path order.
    pub fn all(&self) -> Result<Vec<CellRecord>> {
        let mut files = Vec::new();
        collect_json(&self.root, &mut files)?;
        files.sort();
        files
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Integrity(format!("{}: unreadable result record: {e}", p.display())))
            })
            .collect()
    }
}

fn collect_json(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_json(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkMode {
    #[default]
    LeaveOneOut,
    FixedSources,
}

/// A method under a directory-safe label.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedMethod {
    pub label: String,
    pub config: MethodConfig,
}

impl NamedMethod {
    pub fn new(config: MethodConfig) -> Self {
        Self { label: config.default_label(), config }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkPlan {
    pub mode: BenchmarkMode,
    pub methods: Vec<NamedMethod>,
    /// All domains for leave-one-out; the training domains for fixed sources.
    pub domains: Vec<String>,
    pub extra_targets: Vec<String>,
    pub seeds: Vec<u64>,
    pub val_fraction: f64,
}

impl BenchmarkPlan {
    pub fn tasks(&self, manifest: &DatasetManifest) -> Result<Vec<DGTask>> {
        match self.mode {
            BenchmarkMode::LeaveOneOut => leave_one_out_tasks(manifest, &self.domains, self.val_fraction),
            BenchmarkMode::FixedSources => {
                fixed_source_tasks(manifest, &self.domains, &self.extra_targets, self.val_fraction)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("a benchmark needs at least one method and one seed".into()));
        }
        let labels: BTreeSet<&str> = self.methods.iter().map(|m| m.label.as_str()).collect();
        if labels.len() != self.methods.len() {
            return Err(Error::Config("method labels must be unique".into()));
        }
        if let Some(bad) = self.methods.iter().find(|m| !is_safe_label(&m.label)) {
            return Err(Error::Config(format!("method label '{}' is not a plain directory name", bad.label)));
        }
        let seeds: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be unique".into()));
        }
        Ok(())
    }
}

fn is_safe_label(label: &str) -> bool {
    !label.is_empty() && !label.starts_with('.') && !label.contains(['/', '\\'])
}

/// Trains and evaluates one grid cell, returning the held-out IoU.
pub trait CellRunner {
    fn run(&mut self, method: &NamedMethod, task: &DGTask, seed: u64) -> Result<f64>;
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkOutcome {
    pub results: Vec<BenchmarkResult>,
    pub failures: Vec<CellRecord>,
    /// Cells executed by this invocation (resumed cells excluded).
    pub executed: usize,
    pub expected_cells: usize,
}

impl BenchmarkOutcome {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty() && self.results.len() == self.expected_cells
    }
}

/// Runs every `(method, task, seed)` cell not already stored as successful.
/// Failed cells are recorded and retried on the next invocation.
pub fn run_benchmark(
    manifest: &DatasetManifest,
    plan: &BenchmarkPlan,
    store: &ResultStore,
    runner: &mut dyn CellRunner,
) -> Result<BenchmarkOutcome> {
    plan.validate()?;
    let tasks = plan.tasks(manifest)?;
    let mut outcome = BenchmarkOutcome { expected_cells: plan.methods.len() * tasks.len() * plan.seeds.len(), ..Default::default() };
    for method in &plan.methods {
        for task in &tasks {
            let target = task.target().name();
            if task.source_names().contains(&target) {
                return Err(Error::Integrity(format!("target '{target}' leaked into the sources")));
            }
            for &seed in &plan.seeds {
                if let Some(rec) = store.get(&method.label, target, seed)? {
                    if let Some(r) = rec.result() {
                        outcome.results.push(r);
                        continue;
                    }
                }
                log::info!("cell {} / {target} / seed {seed}", method.label);
                outcome.executed += 1;
                let result = runner.run(method, task, seed);
                let record = CellRecord {
                    method: method.label.clone(),
                    target_domain: target.to_string(),
                    seed,
                    sources: task.source_names().iter().map(|s| s.to_string()).collect(),
                    outcome: match &result {
                        Ok(iou) => CellOutcome::Ok { iou: *iou },
                        Err(e) => CellOutcome::Failed { error: e.to_string() },
                    },
                };
                store.put(&record)?;
                match record.result() {
                    Some(r) => outcome.results.push(r),
                    None => {
                        log::warn!("cell {} / {target} / seed {seed} failed: {}", method.label, result.unwrap_err());
                        outcome.failures.push(record);
                    }
                }
            }
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    /// Fractions in `[0, 1]`.
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl CellStats {
    /// A single seed gives no spread estimate.
    pub fn single_seed(&self) -> bool {
        self.n < 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateTable {
    pub methods: Vec<String>,
    pub targets: Vec<String>,
    pub cells: BTreeMap<(String, String), CellStats>,
    /// Per method, the mean of its per-target means.
    pub average: BTreeMap<String, f64>,
}

/// Mean and sample standard deviation over seeds per (method, target).
/// Rows and columns are sorted by name, so the result does not depend on
/// the order of `results`.
pub fn aggregate(results: &[BenchmarkResult]) -> Result<AggregateTable> {
    if results.is_empty() {
        return Err(Error::Argument("nothing to aggregate".into()));
    }
    let mut grouped: BTreeMap<(String, String), Vec<(u64, f64)>> = BTreeMap::new();
    for r in results {
        grouped.entry((r.method.clone(), r.target_domain.clone())).or_default().push((r.seed, r.iou));
    }
    let mut cells = BTreeMap::new();
    for (key, mut values) in grouped {
        // a fixed summation order keeps the statistics permutation-invariant
        values.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let v: Vec<f64> = values.iter().map(|x| x.1).collect();
        cells.insert(key, CellStats { mean: mean(&v), std: sample_std(&v), n: v.len() });
    }
    let methods: Vec<String> = cells.keys().map(|k| k.0.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let targets: Vec<String> = cells.keys().map(|k| k.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let average = methods
        .iter()
        .map(|m| {
            let means: Vec<f64> = cells.iter().filter(|(k, _)| &k.0 == m).map(|(_, c)| c.mean).collect();
            (m.clone(), mean(&means))
        })
        .collect();
    Ok(AggregateTable { methods, targets, cells, average })
}

/// Percentage with two decimals.
pub fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

impl AggregateTable {
    pub fn cell(&self, method: &str, target: &str) -> Option<&CellStats> {
        self.cells.get(&(method.to_string(), target.to_string()))
    }

    /// Cells backed by a single seed.
    pub fn warnings(&self) -> Vec<String> {
        self.cells
            .iter()
            .filter(|(_, c)| c.single_seed())
            .map(|((m, t), _)| format!("{m} / {t}: single seed, std reported as 0"))
            .collect()
    }

    /// Comma-separated table: one row per (method, target) plus an `Average` row per method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,target,mean_pct,std_pct,seeds\n");
        for ((m, t), c) in &self.cells {
            let _ = writeln!(out, "{m},{t},{},{},{}", pct(c.mean), pct(c.std), c.n);
        }
        for (m, a) in &self.average {
            let _ = writeln!(out, "{m},Average,{},,", pct(*a));
        }
        out
    }

    /// Rank (0 best, 1 second) of `method` in a column, by mean.
    fn rank(&self, column: &[(String, f64)], method: &str) -> Option<usize> {
        let mut distinct: Vec<f64> = column.iter().map(|c| c.1).collect();
        distinct.sort_by(|a, b| b.total_cmp(a));
        distinct.dedup();
        let v = column.iter().find(|c| c.0 == method)?.1;
        distinct.iter().position(|&d| d == v)
    }

    /// Markdown table with methods as rows and targets plus `Average` as
    /// columns. Best per column in bold, second best underlined.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Method |");
        for t in &self.targets {
            let _ = write!(out, " {t} |");
        }
        out.push_str(" Average |\n|---|");
        out.push_str(&"---|".repeat(self.targets.len() + 1));
        out.push('\n');
        let columns: Vec<Vec<(String, f64)>> = self
            .targets
            .iter()
            .map(|t| self.methods.iter().filter_map(|m| Some((m.clone(), self.cell(m, t)?.mean))).collect())
            .collect();
        let avg_column: Vec<(String, f64)> = self.average.iter().map(|(m, a)| (m.clone(), *a)).collect();
        let mark = |text: String, rank: Option<usize>| match rank {
            Some(0) => format!("**{text}**"),
            Some(1) => format!("<u>{text}</u>"),
            _ => text,
        };
        for m in &self.methods {
            let _ = write!(out, "| {m} |");
            for (t, column) in self.targets.iter().zip(&columns) {
                match self.cell(m, t) {
                    Some(c) => {
                        let text = format!("{} ± {}", pct(c.mean), pct(c.std));
                        let _ = write!(out, " {} |", mark(text, self.rank(column, m)));
                    }
                    None => out.push_str(" n/a |"),
                }
            }
            let _ = writeln!(out, " {} |", mark(pct(self.average[m]), self.rank(&avg_column, m)));
        }
        out
    }
}
