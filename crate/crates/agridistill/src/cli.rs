//! Command implementations behind the `agridistill` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::{ExperimentConfig, SWEEP_BENCHMARK};
use crate::datamodel::{self, load_manifest, DGTask};
use crate::error::{Error, Result};
use crate::evaluate::{aggregate, evaluate_domain, run_benchmark, BenchmarkPlan, ResultStore};
use crate::pipeline::TrainingRunner;
use crate::report::generate_report;
use crate::toydata::{self, generate_toy_manifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "agridistill", version, about = "Domain-generalized crop segmentation with ensemble distillation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command. Flags override the config file, and the
/// dataset-root environment variable overrides both.
#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory holding checkpoints/, logs/, results/ and figures/.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Dataset root.
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural toy dataset into the dataset root.
    MakeToy,
    /// Train one method on one task.
    Train {
        /// Method name or label from the config.
        #[arg(long)]
        method: String,
        /// Held-out domain; the sources are the other configured domains.
        #[arg(long)]
        target: String,
    },
    /// Run the configured benchmark grid and aggregate it.
    Benchmark {
        /// Run the distillation weight/temperature sweep instead.
        #[arg(long)]
        sweep: bool,
    },
    /// Write qualitative panels and sweep plots.
    Report,
    /// Score a checkpoint on one domain.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        domain: String,
    },
}

/// Loads and validates the effective configuration.
pub fn effective_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(d) = &common.run_dir {
        cfg.run_dir = d.clone();
    }
    if let Some(d) = &common.data_root {
        cfg.dataset_root = d.clone();
    }
    if let Some(s) = &common.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    cfg.apply_env();
    Ok(cfg)
}

/// Runs a parsed command and returns the process exit status.
pub fn run(cli: &Cli) -> Result<i32> {
    let cfg = effective_config(&cli.common)?;
    match &cli.command {
        Command::MakeToy => cmd_make_toy(&cfg),
        Command::Train { method, target } => cmd_train(&cfg, method, target),
        Command::Benchmark { sweep } => cmd_benchmark(&cfg, *sweep),
        Command::Report => cmd_report(&cfg),
        Command::Evaluate { checkpoint, domain } => cmd_evaluate(&cfg, checkpoint, domain),
    }
}

fn write_effective_config(cfg: &ExperimentConfig) -> Result<()> {
    let layout = cfg.layout();
    layout.create()?;
    checkpoint::write_atomic(&layout.root.join("config.toml"), cfg.to_toml()?.as_bytes())
}

/// SHA-256 over every file below `root` (relative path and contents, sorted).
pub fn tree_digest(root: &Path) -> Result<String> {
    fn walk(dir: &Path, base: &Path, out: &mut BTreeMap<String, PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, base, out)?;
            } else {
                let rel = path.strip_prefix(base).expect("below base").to_string_lossy().replace('\\', "/");
                out.insert(rel, path);
            }
        }
        Ok(())
    }
    let mut files = BTreeMap::new();
    walk(root, root, &mut files)?;
    let mut hasher = Sha256::new();
    for (rel, path) in files {
        hasher.update(rel.as_bytes());
        hasher.update([0]);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToyOutcome {
    Created,
    Replaced,
    Unchanged,
}

/// Generates the toy dataset next to `root` and moves it into place, so a
/// failure never leaves a partial dataset at `root`.
pub fn make_toy(cfg: &ExperimentConfig) -> Result<(ToyOutcome, datamodel::DatasetManifest)> {
    let root = &cfg.dataset_root;
    let specs = cfg.toy.specs();
    let name = root.file_name().ok_or_else(|| Error::Config(format!("bad dataset root {}", root.display())))?;
    let parent = root.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = parent.join(format!(".{}.staging{}", name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let generated = generate_toy_manifest(&specs, &staging, cfg.toy.seed);
    if let Err(e) = generated {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    let outcome = if root.exists() {
        if toydata::generation_records(root)?.is_empty() {
            let _ = fs::remove_dir_all(&staging);
            return Err(Error::Config(format!(
                "{} exists and is not a generated toy dataset; refusing to replace it",
                root.display()
            )));
        }
        if tree_digest(root)? == tree_digest(&staging)? {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
            ToyOutcome::Unchanged
        } else {
            fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
            fs::rename(&staging, root).map_err(|e| Error::io(root, e))?;
            ToyOutcome::Replaced
        }
    } else {
        fs::rename(&staging, root).map_err(|e| Error::io(root, e))?;
        ToyOutcome::Created
    };
    Ok((outcome, load_manifest(root)?))
}

fn cmd_make_toy(cfg: &ExperimentConfig) -> Result<i32> {
    for spec in &cfg.toy.domains {
        spec.validate()?;
    }
    let (outcome, manifest) = make_toy(cfg)?;
    let verb = match outcome {
        ToyOutcome::Created => "created",
        ToyOutcome::Replaced => "regenerated",
        ToyOutcome::Unchanged => "unchanged",
    };
    println!("{}: {verb}, {} domains", manifest.root.display(), manifest.domains.len());
    for d in &manifest.domains {
        println!("  {:<16} {:>5} samples  {:<9} {}", d.name, d.sample_count, d.source_type, d.category);
    }
    Ok(EXIT_OK)
}

fn task_for(cfg: &ExperimentConfig, manifest: &datamodel::DatasetManifest, target: &str) -> Result<DGTask> {
    manifest.descriptor(target)?;
    let sources: Vec<_> = cfg
        .domains
        .iter()
        .filter(|d| d.as_str() != target)
        .map(|d| manifest.dataset(d))
        .collect::<Result<_>>()?;
    DGTask::new(sources, manifest.dataset(target)?, cfg.train.val_fraction)
}

fn cmd_train(cfg: &ExperimentConfig, method: &str, target: &str) -> Result<i32> {
    cfg.validate()?;
    let methods = cfg.methods()?;
    let named = match methods.into_iter().find(|m| m.label == method) {
        Some(m) => m,
        None => crate::evaluate::NamedMethod::new(crate::train::MethodConfig::by_name(method)?),
    };
    named.config.validate(&cfg.train.model)?;
    let manifest = load_manifest(&cfg.dataset_root)?;
    let task = task_for(cfg, &manifest, target)?;
    write_effective_config(cfg)?;
    let layout = cfg.layout();
    let mut runner = TrainingRunner::new(cfg.train.clone(), "train").with_layout(layout.clone());
    for &seed in &cfg.seeds {
        let iou = crate::evaluate::CellRunner::run(&mut runner, &named, &task, seed)?;
        println!(
            "{} on {target} (seed {seed}): held-out IoU {:.2}%  checkpoint {}",
            named.label,
            100.0 * iou,
            layout.cell_checkpoint("train", &named.label, target, seed).display()
        );
    }
    Ok(EXIT_OK)
}

fn run_plan(cfg: &ExperimentConfig, plan: &BenchmarkPlan, name: &str) -> Result<i32> {
    let manifest = load_manifest(&cfg.dataset_root)?;
    write_effective_config(cfg)?;
    let layout = cfg.layout();
    let store = ResultStore::new(layout.results().join(name));
    let mut runner = TrainingRunner::new(cfg.train.clone(), name).with_layout(layout.clone());
    let outcome = run_benchmark(&manifest, plan, &store, &mut runner)?;
    println!(
        "{name}: {} of {} cells finished ({} run now, {} failed)",
        outcome.results.len(),
        outcome.expected_cells,
        outcome.executed,
        outcome.failures.len()
    );
    if !outcome.results.is_empty() {
        let table = aggregate(&outcome.results)?;
        let md = table.to_markdown();
        println!("{md}");
        for w in table.warnings() {
            println!("warning: {w}");
        }
        checkpoint::write_atomic(&layout.results().join(format!("{name}.csv")), table.to_csv().as_bytes())?;
        checkpoint::write_atomic(&layout.results().join(format!("{name}.md")), md.as_bytes())?;
        let all = serde_json::to_string_pretty(&outcome.results)?;
        checkpoint::write_atomic(&layout.results().join(format!("{name}.json")), all.as_bytes())?;
    }
    for f in &outcome.failures {
        if let crate::evaluate::CellOutcome::Failed { error } = &f.outcome {
            println!("failed: {} / {} / seed {}: {error}", f.method, f.target_domain, f.seed);
        }
    }
    Ok(if outcome.is_complete() { EXIT_OK } else { EXIT_PARTIAL })
}

fn cmd_benchmark(cfg: &ExperimentConfig, sweep: bool) -> Result<i32> {
    cfg.validate()?;
    if sweep {
        run_plan(cfg, &cfg.sweep_plan()?, SWEEP_BENCHMARK)
    } else {
        run_plan(cfg, &cfg.plan()?, &cfg.benchmark.name)
    }
}

fn cmd_report(cfg: &ExperimentConfig) -> Result<i32> {
    let manifest = load_manifest(&cfg.dataset_root)?;
    let summary = generate_report(cfg, &manifest)?;
    for p in &summary.missing_checkpoints {
        println!("skipped (missing): {}", p.display());
    }
    for p in summary.panels.iter().chain(&summary.plots) {
        println!("wrote {}", p.display());
    }
    Ok(EXIT_OK)
}

fn cmd_evaluate(cfg: &ExperimentConfig, path: &Path, domain: &str) -> Result<i32> {
    let manifest = load_manifest(&cfg.dataset_root)?;
    let dataset = manifest.dataset(domain)?;
    let (model, meta) = checkpoint::load(path, &Device::Cpu)?;
    let iou = evaluate_domain(&model, &dataset, &cfg.train.augment, &cfg.train.iou)?;
    println!("{} (seed {}, epoch {}) on {domain}: IoU {:.2}%", meta.method, meta.seed, meta.epoch, 100.0 * iou);
    Ok(EXIT_OK)
}
