//! Experiment configuration file (TOML) and the run-directory layout.

use std::path::{Path, PathBuf};

use agridistill_core::distill::LossConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{BenchmarkMode, BenchmarkPlan, NamedMethod};
use crate::toydata::{self, ToyDomainSpec};
use crate::train::{MethodConfig, TrainConfig};

/// Overrides `dataset_root` when set.
pub const DATA_ROOT_ENV: &str = "AGRIDISTILL_DATA_ROOT";

/// Benchmark name of the distillation hyperparameter sweep.
pub const SWEEP_BENCHMARK: &str = "sweep";

/// A method in the config: either a bare name or a table with `method`,
/// an optional `label` and the method's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MethodEntry {
    Name(String),
    Table(toml::Table),
}

impl MethodEntry {
    pub fn resolve(&self) -> Result<NamedMethod> {
        match self {
            MethodEntry::Name(name) => Ok(NamedMethod::new(MethodConfig::by_name(name)?)),
            MethodEntry::Table(table) => {
                let mut table = table.clone();
                let label = match table.remove("label") {
                    Some(toml::Value::String(s)) => Some(s),
                    Some(other) => return Err(Error::Config(format!("method label must be a string, got {other}"))),
                    None => None,
                };
                let config: MethodConfig = toml::Value::Table(table)
                    .try_into()
                    .map_err(|e| Error::Config(format!("invalid method entry: {e}")))?;
                let label = label.unwrap_or_else(|| config.default_label());
                Ok(NamedMethod { label, config })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    pub name: String,
    pub mode: BenchmarkMode,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self { name: "leave_one_out".into(), mode: BenchmarkMode::LeaveOneOut }
    }
}

/// Grid of distillation weights and temperatures for the sensitivity study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub kd_weights: Vec<f64>,
    pub temperatures: Vec<f64>,
}

impl SweepSection {
    pub fn is_empty(&self) -> bool {
        self.kd_weights.is_empty() || self.temperatures.is_empty()
    }

    pub fn label(kd_weight: f64, temperature: f64) -> String {
        format!("kd_lambda{kd_weight}_tau{temperature}")
    }

    /// One distillation method per (weight, temperature) pair.
    pub fn methods(&self, base: &LossConfig) -> Vec<NamedMethod> {
        let mut out = Vec::with_capacity(self.kd_weights.len() * self.temperatures.len());
        for &l in &self.kd_weights {
            for &t in &self.temperatures {
                let loss = LossConfig { temperature: t, kd_weight: l, ..base.clone() };
                out.push(NamedMethod {
                    label: Self::label(l, t),
                    config: MethodConfig::EnsembleKd { teachers: Default::default(), unistyle_blocks: None, loss: Some(loss) },
                });
            }
        }
        out
    }
}

/// Generation settings for `make-toy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub seed: u64,
    pub samples: usize,
    pub image_size: usize,
    /// Also generate the held-out styles used by fixed-source benchmarks.
    pub extra_targets: bool,
    /// Replaces the built-in suite when non-empty.
    pub domains: Vec<ToyDomainSpec>,
}

impl Default for ToySection {
    fn default() -> Self {
        Self { seed: 0, samples: 50, image_size: 64, extra_targets: true, domains: Vec::new() }
    }
}

impl ToySection {
    pub fn specs(&self) -> Vec<ToyDomainSpec> {
        if !self.domains.is_empty() {
            return self.domains.clone();
        }
        let mut specs = toydata::default_suite(self.samples, self.image_size);
        if self.extra_targets {
            specs.extend(toydata::extra_targets(self.samples, self.image_size));
        }
        specs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Benchmark whose checkpoints feed the qualitative panels.
    pub benchmark: Option<String>,
    pub samples_per_target: usize,
    /// Seed whose checkpoints are shown; the first configured seed when unset.
    pub seed: Option<u64>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { benchmark: None, samples_per_target: 2, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset_root: PathBuf,
    pub run_dir: PathBuf,
    /// Leave-one-out domains, or the training domains of a fixed-source benchmark.
    pub domains: Vec<String>,
    pub extra_targets: Vec<String>,
    pub methods: Vec<MethodEntry>,
    pub seeds: Vec<u64>,
    pub benchmark: BenchmarkSection,
    pub train: TrainConfig,
    pub sweep: SweepSection,
    pub toy: ToySection,
    pub report: ReportSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data/agriseg"),
            run_dir: PathBuf::from("runs/default"),
            domains: ["GenericTree2", "Chard", "Lettuce", "Vineyard"].map(String::from).to_vec(),
            extra_targets: Vec::new(),
            methods: ["erm", "ensemble_kd"].map(|m| MethodEntry::Name(m.into())).to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            benchmark: BenchmarkSection::default(),
            train: TrainConfig::default(),
            sweep: SweepSection::default(),
            toy: ToySection::default(),
            report: ReportSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the dataset-root environment override.
    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.dataset_root = PathBuf::from(root);
        }
    }

    pub fn methods(&self) -> Result<Vec<NamedMethod>> {
        self.methods.iter().map(MethodEntry::resolve).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for m in self.methods()? {
            m.config.validate(&self.train.model)?;
        }
        self.plan()?;
        if !self.sweep.is_empty() {
            for v in self.sweep.kd_weights.iter().chain(&self.sweep.temperatures) {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::Config(format!("sweep values must be finite and >= 0, got {v}")));
                }
            }
            if self.sweep.temperatures.contains(&0.0) {
                return Err(Error::Config("sweep temperatures must be positive".into()));
            }
        }
        for spec in &self.toy.domains {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<BenchmarkPlan> {
        let methods = self.methods()?;
        if methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("configure at least one method and one seed".into()));
        }
        match self.benchmark.mode {
            BenchmarkMode::LeaveOneOut if self.domains.len() < 2 => {
                return Err(Error::Config("leave-one-out needs at least 2 domains".into()))
            }
            BenchmarkMode::FixedSources if self.extra_targets.is_empty() || self.domains.is_empty() => {
                return Err(Error::Config("fixed-source benchmarks need domains and extra_targets".into()))
            }
            _ => {}
        }
        Ok(BenchmarkPlan {
            mode: self.benchmark.mode,
            methods,
            domains: self.domains.clone(),
            extra_targets: self.extra_targets.clone(),
            seeds: self.seeds.clone(),
            val_fraction: self.train.val_fraction,
        })
    }

    pub fn sweep_plan(&self) -> Result<BenchmarkPlan> {
        if self.sweep.is_empty() {
            return Err(Error::Config("the sweep needs kd_weights and temperatures".into()));
        }
        Ok(BenchmarkPlan { methods: self.sweep.methods(&self.train.loss), ..self.plan()? })
    }

    pub fn layout(&self) -> RunLayout {
        RunLayout::new(&self.run_dir)
    }
}

/// Fixed layout of a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn teachers(&self) -> PathBuf {
        self.checkpoints().join("teachers")
    }

    pub fn cell_checkpoint(&self, benchmark: &str, method: &str, target: &str, seed: u64) -> PathBuf {
        self.checkpoints().join(benchmark).join(method).join(target).join(format!("{seed}.safetensors"))
    }

    pub fn cell_log(&self, benchmark: &str, method: &str, target: &str, seed: u64) -> PathBuf {
        self.logs().join(benchmark).join(method).join(target).join(format!("{seed}.jsonl"))
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.checkpoints(), self.logs(), self.results(), self.figures()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("seedz = [1]").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nbatchsize = 3").is_err());
    }

    #[test]
    fn method_entries() {
        let cfg = ExperimentConfig::from_toml(
            r#"
methods = ["erm", { method = "unistyle", blocks = [0, 1] }, { method = "ensemble_kd", label = "kd", teachers = "erm" }]
"#,
        )
        .unwrap();
        let labels: Vec<String> = cfg.methods().unwrap().into_iter().map(|m| m.label).collect();
        assert_eq!(labels, ["erm", "unistyle_0-1", "kd"]);
        let bad = ExperimentConfig::from_toml(r#"methods = [{ method = "isw" }]"#).unwrap();
        assert!(bad.methods().is_err());
    }

    #[test]
    fn default_needs_pretrained_weights() {
        assert!(matches!(ExperimentConfig::default().validate(), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_labels_cover_grid() {
        let s = SweepSection { kd_weights: vec![0.01, 3.0], temperatures: vec![1.0, 2.0] };
        let labels: Vec<String> = s.methods(&LossConfig::default()).into_iter().map(|m| m.label).collect();
        assert_eq!(labels, ["kd_lambda0.01_tau1", "kd_lambda0.01_tau2", "kd_lambda3_tau1", "kd_lambda3_tau2"]);
    }
}
