//! Benchmark cells backed by real training runs.

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::RunLayout;
use crate::datamodel::DGTask;
use crate::error::Result;
use crate::evaluate::{evaluate_domain, CellRunner, NamedMethod};
use crate::train::{TrainConfig, Trainer};

/// Trains each cell's method on the task sources, writes its checkpoint and
/// epoch log, and scores the held-out target. Teachers are shared between
/// cells through the trainer's cache.
pub struct TrainingRunner {
    trainer: Trainer,
    layout: Option<RunLayout>,
    benchmark: String,
}

impl TrainingRunner {
    pub fn new(cfg: TrainConfig, benchmark: impl Into<String>) -> Self {
        Self { trainer: Trainer::new(cfg), layout: None, benchmark: benchmark.into() }
    }

    /// Persists checkpoints, logs and teachers under `layout`.
    pub fn with_layout(mut self, layout: RunLayout) -> Self {
        self.trainer = Trainer::new(self.trainer.cfg.clone()).with_teacher_dir(layout.teachers());
        self.layout = Some(layout);
        self
    }

    pub fn trainer(&self) -> &Trainer {
        &self.trainer
    }
}

impl CellRunner for TrainingRunner {
    fn run(&mut self, method: &NamedMethod, task: &DGTask, seed: u64) -> Result<f64> {
        let target = task.target().name().to_string();
        self.trainer.cfg.seed = seed;
        self.trainer.set_log(
            self.layout.as_ref().map(|l| l.cell_log(&self.benchmark, &method.label, &target, seed)),
        );
        let trained = self.trainer.baseline(&method.config, task.sources())?;
        let cfg = &self.trainer.cfg;
        let iou = evaluate_domain(&trained.model, task.target(), &cfg.augment, &cfg.iou)?;
        if let Some(layout) = &self.layout {
            let meta = CheckpointMeta {
                model: trained.model.config().clone(),
                seed,
                epoch: trained.history.best_epoch,
                val_iou: trained.history.best().map_or(f64::NAN, |b| b.val_iou),
                method: method.label.clone(),
                sources: task.source_names().iter().map(|s| s.to_string()).collect(),
            };
            let path = layout.cell_checkpoint(&self.benchmark, &method.label, &target, seed);
            checkpoint::save(&path, &trained.model, &meta)?;
        }
        log::info!("{} / {target} / seed {seed}: held-out IoU {iou:.4}", method.label);
        Ok(iou)
    }
}
