//! ERM, per-domain teacher and distilled-student training loops.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use agridistill_core::augment::{augment_pipeline, AugmentConfig, PreparedSample};
use agridistill_core::distill::{ensemble_teachers, total_loss, LossConfig, SoftmaxAxis};
use agridistill_core::metrics::IoUConfig;
use agridistill_core::schedule::PolyDecay;
use agridistill_core::split::derive_seed;
use agridistill_core::LogitsMap;
use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::datamodel::{split_sources, DomainDataset, DEFAULT_VAL_FRACTION};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_prepared, logits_maps, prepare_eval, stack_images};
use crate::network::{Mode, Model, ModelConfig, NormVariant};

const SALT_SPLIT: u64 = 1;
const SALT_INIT: u64 = 2;
const SALT_AUGMENT: u64 = 3;
const SALT_ORDER: u64 = 4;
const SALT_STYLE: u64 = 5;
const SALT_TEACHER: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub schedule_power: f64,
    pub seed: u64,
    /// Fraction of every source domain held out for model selection.
    pub val_fraction: f64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub iou: IoUConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 50,
            lr_start: 1e-3,
            lr_end: 1e-5,
            weight_decay: 1e-5,
            schedule_power: 1.0,
            seed: 0,
            val_fraction: DEFAULT_VAL_FRACTION,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            iou: IoUConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> PolyDecay {
        PolyDecay { lr_start: self.lr_start, lr_end: self.lr_end, power: self.schedule_power }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        self.schedule().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.augment.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.iou.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate()?;
        if self.augment.output_size != self.model.input_size {
            return Err(Error::Config(format!(
                "augment output size {:?} differs from model input size {:?}",
                self.augment.output_size, self.model.input_size
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total_steps` under the configured polynomial decay.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    Ok(cfg.schedule().lr_at(step, total_steps)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub ce: f64,
    pub kd: f64,
    pub val_iou: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// 1-based epoch with the highest validation IoU (earliest on ties).
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

/// Earliest epoch with maximal validation IoU.
pub fn select_best(records: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<&EpochRecord> = None;
    for r in records {
        if best.is_none_or(|b| r.val_iou > b.val_iou) {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch)
}

#[derive(Debug)]
pub struct Trained {
    pub model: Model,
    pub history: TrainHistory,
}

/// Where the teachers of an ensemble come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// One teacher per source domain, trained on that domain alone.
    #[default]
    PerDomain,
    /// As many teachers as sources, each trained on all sources with its own seed.
    Erm,
}

/// A training method together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodConfig {
    Erm,
    Ibn { blocks: Vec<usize> },
    Padain { prob: f64 },
    Unistyle { blocks: Vec<usize> },
    EnsembleKd {
        #[serde(default)]
        teachers: TeacherKind,
        #[serde(default)]
        unistyle_blocks: Option<Vec<usize>>,
        /// Overrides the configured distillation loss.
        #[serde(default)]
        loss: Option<LossConfig>,
    },
}

pub const METHOD_NAMES: [&str; 5] = ["erm", "ibn", "padain", "unistyle", "ensemble_kd"];

impl MethodConfig {
    /// Method with the default parameters used in the experiments.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "erm" => Self::Erm,
            "ibn" => Self::Ibn { blocks: vec![0, 1, 2] },
            "padain" => Self::Padain { prob: 1e-3 },
            "unistyle" => Self::Unistyle { blocks: vec![0, 1, 2] },
            "ensemble_kd" => Self::EnsembleKd { teachers: TeacherKind::PerDomain, unistyle_blocks: None, loss: None },
            "ensemble_kd+unistyle" => Self::EnsembleKd {
                teachers: TeacherKind::PerDomain,
                unistyle_blocks: Some(vec![0, 1, 2]),
                loss: None,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown method '{other}'; valid methods: {}, ensemble_kd+unistyle",
                    METHOD_NAMES.join(", ")
                )))
            }
        })
    }

    /// Directory-safe default label.
    pub fn default_label(&self) -> String {
        let blocks = |b: &[usize]| b.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
        match self {
            Self::Erm => "erm".into(),
            Self::Ibn { .. } => "ibn".into(),
            Self::Padain { .. } => "padain".into(),
            Self::Unistyle { blocks: b } => format!("unistyle_{}", blocks(b)),
            Self::EnsembleKd { teachers, unistyle_blocks, .. } => {
                let mut s = String::from("ensemble_kd");
                if *teachers == TeacherKind::Erm {
                    s.push_str("_ermteachers");
                }
                if let Some(b) = unistyle_blocks {
                    s.push_str(&format!("+unistyle_{}", blocks(b)));
                }
                s
            }
        }
    }

    /// The student architecture for this method on top of `base`.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let plain = plain_model(base);
        match self {
            Self::Erm => plain,
            Self::Ibn { blocks } => ModelConfig { norm_variant: NormVariant::Ibn, norm_blocks: blocks.clone(), ..plain },
            Self::Padain { prob } => ModelConfig { padain_prob: *prob, ..plain },
            Self::Unistyle { blocks } | Self::EnsembleKd { unistyle_blocks: Some(blocks), .. } => {
                ModelConfig { norm_variant: NormVariant::Unistyle, norm_blocks: blocks.clone(), ..plain }
            }
            Self::EnsembleKd { unistyle_blocks: None, .. } => plain,
        }
    }

    pub fn validate(&self, base: &ModelConfig) -> Result<()> {
        if let Self::EnsembleKd { loss: Some(l), .. } = self {
            l.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.model_config(base).validate()
    }
}

fn plain_model(base: &ModelConfig) -> ModelConfig {
    ModelConfig { norm_variant: NormVariant::None, norm_blocks: Vec::new(), padain_prob: 0.0, ..base.clone() }
}

/// Training driver. Holds the device, optional epoch log and the teacher cache.
pub struct Trainer {
    pub cfg: TrainConfig,
    device: Device,
    log_path: Option<PathBuf>,
    teacher_dir: Option<PathBuf>,
    teachers: RefCell<HashMap<String, Model>>,
    fits: Cell<usize>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Self {
        Self {
            cfg,
            device: Device::Cpu,
            log_path: None,
            teacher_dir: None,
            teachers: RefCell::new(HashMap::new()),
            fits: Cell::new(0),
        }
    }

    /// Appends one JSON record per epoch to `path`.
    pub fn with_log(mut self, path: impl Into<PathBuf>) -> Self {
        self.log_path = Some(path.into());
        self
    }

    pub fn set_log(&mut self, path: Option<PathBuf>) {
        self.log_path = path;
    }

    /// Persists teachers under `dir` and reuses them across runs.
    pub fn with_teacher_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.teacher_dir = Some(dir.into());
        self
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Number of optimization runs performed so far (teachers included).
    pub fn fits(&self) -> usize {
        self.fits.get()
    }

    /// Pooled-source empirical risk minimization with the configured model.
    pub fn erm(&self, sources: &[DomainDataset]) -> Result<Trained> {
        self.fit(sources, &self.cfg.model, &self.cfg.loss, &[], self.cfg.seed)
    }

    /// One teacher per source, each trained on its domain alone.
    pub fn teachers(&self, sources: &[DomainDataset]) -> Result<Vec<Model>> {
        if sources.is_empty() {
            return Err(Error::Argument("teacher training needs at least one source".into()));
        }
        sources
            .iter()
            .map(|s| self.cached_teacher(std::slice::from_ref(s), self.cfg.seed, s.name()))
            .collect()
    }

    /// `num` teachers trained on all sources with distinct seeds.
    pub fn erm_teachers(&self, sources: &[DomainDataset], num: usize) -> Result<Vec<Model>> {
        let tag = sources.iter().map(DomainDataset::name).collect::<Vec<_>>().join("+");
        (0..num as u64)
            .map(|d| self.cached_teacher(sources, derive_seed(self.cfg.seed, SALT_TEACHER + d), &tag))
            .collect()
    }

    /// Student trained on the pooled sources with the ensemble of `teachers` as soft target.
    pub fn student(&self, sources: &[DomainDataset], teachers: &[Model]) -> Result<Trained> {
        if teachers.is_empty() {
            return Err(Error::Config("distillation needs at least one teacher".into()));
        }
        self.fit(sources, &self.cfg.model, &self.cfg.loss, teachers, self.cfg.seed)
    }

    /// Trains `method` on `sources`.
    pub fn baseline(&self, method: &MethodConfig, sources: &[DomainDataset]) -> Result<Trained> {
        method.validate(&self.cfg.model)?;
        let model = method.model_config(&self.cfg.model);
        match method {
            MethodConfig::EnsembleKd { teachers: kind, loss, .. } => {
                let teachers = match kind {
                    TeacherKind::PerDomain => self.teachers(sources)?,
                    TeacherKind::Erm => self.erm_teachers(sources, sources.len())?,
                };
                let loss = loss.clone().unwrap_or_else(|| self.cfg.loss.clone());
                self.fit(sources, &model, &loss, &teachers, self.cfg.seed)
            }
            _ => self.fit(sources, &model, &self.cfg.loss, &[], self.cfg.seed),
        }
    }

    fn teacher_key(&self, tag: &str, seed: u64) -> Result<String> {
        let cfg = TrainConfig { model: plain_model(&self.cfg.model), loss: LossConfig::default(), seed, ..self.cfg.clone() };
        let digest = crate::fnv1a(serde_json::to_string(&cfg)?.as_bytes());
        Ok(format!("{tag}/seed{seed}-{digest:016x}"))
    }

    fn cached_teacher(&self, sources: &[DomainDataset], seed: u64, tag: &str) -> Result<Model> {
        let key = self.teacher_key(tag, seed)?;
        if let Some(m) = self.teachers.borrow().get(&key) {
            return Ok(m.clone());
        }
        let path = self.teacher_dir.as_ref().map(|d| d.join(format!("{key}.safetensors")));
        if let Some(path) = path.as_ref().filter(|p| p.is_file()) {
            let (model, _) = checkpoint::load(path, &self.device)?;
            log::info!("teacher {tag} (seed {seed}) loaded from {}", path.display());
            self.teachers.borrow_mut().insert(key, model.clone());
            return Ok(model);
        }
        log::info!("training teacher {tag} (seed {seed})");
        let plain = plain_model(&self.cfg.model);
        let trained = self.fit(sources, &plain, &self.cfg.loss, &[], seed)?;
        if let Some(path) = path {
            let best = trained.history.best().copied();
            let meta = CheckpointMeta {
                model: plain,
                seed,
                epoch: trained.history.best_epoch,
                val_iou: best.map_or(f64::NAN, |b| b.val_iou),
                method: "teacher".into(),
                sources: sources.iter().map(|s| s.name().to_string()).collect(),
            };
            checkpoint::save(&path, &trained.model, &meta)?;
        }
        self.teachers.borrow_mut().insert(key, trained.model.clone());
        Ok(trained.model)
    }

    fn fit(
        &self,
        sources: &[DomainDataset],
        model_cfg: &ModelConfig,
        loss_cfg: &LossConfig,
        teachers: &[Model],
        seed: u64,
    ) -> Result<Trained> {
        let cfg = TrainConfig { model: model_cfg.clone(), loss: loss_cfg.clone(), seed, ..self.cfg.clone() };
        cfg.validate()?;
        if sources.is_empty() {
            return Err(Error::Argument("training needs at least one source domain".into()));
        }
        for (d, t) in teachers.iter().enumerate() {
            let tc = t.config();
            if tc.num_classes != model_cfg.num_classes || tc.input_size != model_cfg.input_size {
                return Err(Error::Config(format!(
                    "teacher {d} outputs {} classes at {:?}, student expects {} at {:?}",
                    tc.num_classes, tc.input_size, model_cfg.num_classes, model_cfg.input_size
                )));
            }
        }
        if !teachers.is_empty() && loss_cfg.softmax_axis == SoftmaxAxis::Channel && model_cfg.num_classes < 2 {
            return Err(Error::Config("channel softmax distillation needs num_classes >= 2".into()));
        }
        self.fits.set(self.fits.get() + 1);

        let (train, val) = source_split(sources, &cfg)?;
        let train = train.materialize()?;
        let val = prepare_eval(&val.materialize()?, &cfg.augment)?;
        let model = Model::new(model_cfg, derive_seed(seed, SALT_INIT), &self.device)?;
        let mut opt = AdamW::new(
            model.trainable_vars(),
            ParamsAdamW { lr: cfg.lr_start, weight_decay: cfg.weight_decay, ..ParamsAdamW::default() },
        )?;
        let mut augment_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_AUGMENT));
        let mut style_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_STYLE));
        let mut log = self.log_path.as_deref().map(open_log).transpose()?;

        let n = train.len();
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        let total_steps = cfg.epochs * steps_per_epoch;
        let mut history = TrainHistory::default();
        let mut best: Option<(f64, Vec<(String, Tensor)>)> = None;
        let mut step = 0;
        for epoch in 1..=cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_ORDER + ((epoch as u64) << 8))));
            let (mut sum, mut sum_ce, mut sum_kd, mut lr) = (0.0, 0.0, 0.0, cfg.lr_start);
            for batch in order.chunks(cfg.batch_size) {
                lr = lr_schedule(step, total_steps, &cfg)?;
                let mut prepared = Vec::with_capacity(batch.len());
                for &i in batch {
                    prepared.push(augment_pipeline(&train.get(i)?, &cfg.augment, &mut augment_rng)?.0);
                }
                let record = self.step(&model, &mut opt, &prepared, teachers, &cfg, lr, &mut style_rng)?;
                if !record.0.is_finite() {
                    return Err(Error::Divergence { epoch, step, loss: record.0 });
                }
                let rec = StepRecord { epoch, step, lr, loss: record.0, ce: record.1, kd: record.2 };
                history.steps.push(rec);
                sum += rec.loss;
                sum_ce += rec.ce;
                sum_kd += rec.kd;
                step += 1;
            }
            let val_iou = evaluate_prepared(&model, &val, &cfg.iou)?;
            let k = steps_per_epoch as f64;
            let rec = EpochRecord { epoch, train_loss: sum / k, ce: sum_ce / k, kd: sum_kd / k, val_iou, lr };
            log::debug!("epoch {epoch}: loss {:.5} val IoU {:.4}", rec.train_loss, val_iou);
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(self.log_path.clone().unwrap(), e))?;
            }
            history.epochs.push(rec);
            if best.as_ref().is_none_or(|(b, _)| val_iou > *b) {
                best = Some((val_iou, model.snapshot()?));
            }
        }
        history.best_epoch = select_best(&history.epochs).expect("at least one epoch");
        if let Some((_, snapshot)) = best {
            model.restore(&snapshot)?;
        }
        Ok(Trained { model, history })
    }

    /// One optimizer update; returns the batch-mean (total, ce, kd) losses.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        model: &Model,
        opt: &mut AdamW,
        batch: &[PreparedSample],
        teachers: &[Model],
        cfg: &TrainConfig,
        lr: f64,
        style_rng: &mut ChaCha8Rng,
    ) -> Result<(f64, f64, f64)> {
        let images = stack_images(batch, &self.device)?;
        let logits = model.forward(&images, &mut Mode::Train(style_rng))?;
        let student = logits_maps(&logits)?;
        let teacher_maps: Vec<Vec<LogitsMap>> =
            teachers.iter().map(|t| logits_maps(&t.forward(&images, &mut Mode::Eval)?)).collect::<Result<_>>()?;
        let b = batch.len() as f64;
        let (mut total, mut ce, mut kd) = (0.0, 0.0, 0.0);
        let mut grad = Vec::with_capacity(logits.elem_count());
        for (i, (sample, s)) in batch.iter().zip(&student).enumerate() {
            let ensemble = if teachers.is_empty() {
                None
            } else {
                let per_sample: Vec<LogitsMap> = teacher_maps.iter().map(|t| t[i].clone()).collect();
                Some(ensemble_teachers(&per_sample)?)
            };
            let terms = total_loss(&sample.mask, ensemble.as_ref(), s, &cfg.loss)?;
            total += terms.total;
            ce += terms.ce;
            kd += terms.kd;
            grad.extend(terms.grad.values().iter().map(|g| (g / b) as f32));
        }
        let (total, ce, kd) = (total / b, ce / b, kd / b);
        if total.is_finite() {
            let grad = Tensor::from_vec(grad, logits.shape(), &self.device)?;
            let grads = (&logits * &grad)?.sum_all()?.backward()?;
            opt.set_learning_rate(lr);
            opt.step(&grads)?;
        }
        Ok((total, ce, kd))
    }
}

/// The pooled train and validation splits a run with `cfg` uses.
pub fn source_split(sources: &[DomainDataset], cfg: &TrainConfig) -> Result<(DomainDataset, DomainDataset)> {
    split_sources(sources, cfg.val_fraction, derive_seed(cfg.seed, SALT_SPLIT))
}

fn open_log(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))
}

pub fn train_erm(sources: &[DomainDataset], cfg: &TrainConfig) -> Result<Trained> {
    Trainer::new(cfg.clone()).erm(sources)
}

pub fn train_teachers(sources: &[DomainDataset], cfg: &TrainConfig) -> Result<Vec<Model>> {
    Trainer::new(cfg.clone()).teachers(sources)
}

pub fn train_student(sources: &[DomainDataset], teachers: &[Model], cfg: &TrainConfig) -> Result<Trained> {
    Trainer::new(cfg.clone()).student(sources, teachers)
}

pub fn train_baseline(method: &MethodConfig, sources: &[DomainDataset], cfg: &TrainConfig) -> Result<Trained> {
    Trainer::new(cfg.clone()).baseline(method, sources)
}
