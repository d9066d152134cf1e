//! Training loop: seeded random crops, per-pair gradient accumulation
//! averaged over the batch, AdamW, loss history and checkpoints.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::loss::{total_loss, LossTerms, LossWeights};
use crate::model::{FuseOptions, FusionModel, ImagePair, ModelConfig, ModelError, Semantics, Variant};
use crate::sig::MaskSemantics;
use crate::tensor::{rng, AdamW, Checkpoint, Graph, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}; last good checkpoint kept")]
    NonFinite { step: u64, what: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss: {0}")]
    Loss(#[source] TensorError),
    #[error("optimizer: {0}")]
    Optim(#[source] TensorError),
    #[error("loss history {path}: {source}")]
    History { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub lr: f64,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine: bool,
    pub optimizer: AdamW,
    pub seed: u64,
    pub weights: LossWeights,
    /// When set, overrides `epochs × steps per epoch`.
    pub steps: Option<u64>,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            variant: Variant::Full,
            epochs: 140,
            batch_size: 8,
            crop: 96,
            lr: 1e-4,
            cosine: false,
            optimizer: AdamW::default(),
            seed: 0,
            weights: LossWeights::default(),
            steps: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.crop == 0 || self.crop % self.model.patch != 0 {
            return bad(format!("crop {} not divisible by patch {}", self.crop, self.model.patch));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        self.weights.validate().map_err(TrainError::Config)?;
        self.model.validate()?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, pairs: usize) -> u64 {
        pairs.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, pairs: usize) -> u64 {
        self.steps.unwrap_or(self.epochs as u64 * self.steps_per_epoch(pairs))
    }

    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if !self.cosine || total == 0 {
            return self.lr;
        }
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
    }
}

/// A pair with its full-resolution semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub pair: ImagePair,
    pub semantics: Semantics,
}

/// Take the same `crop×crop` window from both images and the mask.
/// Undersized inputs are reflect-padded to `crop` first.
pub fn sample_crop<R: Rng>(pair: &ImagePair, mask: &MaskSemantics, crop: usize, rng: &mut R) -> (ImagePair, MaskSemantics) {
    let (h, w) = pair.dims();
    let (hp, wp) = (h.max(crop), w.max(crop));
    let (vis, ir, m) = if (hp, wp) != (h, w) {
        (pair.vis.pad_reflect_to(hp, wp), pair.ir.pad_reflect_to(hp, wp), MaskSemantics::from_mask(mask.mask.pad_reflect_to(hp, wp), mask.provenance))
    } else {
        (pair.vis.clone(), pair.ir.clone(), mask.clone())
    };
    let top = rng.random_range(0..=hp - crop);
    let left = rng.random_range(0..=wp - crop);
    let cropped = ImagePair { id: pair.id.clone(), vis: vis.crop(top, left, crop, crop), ir: ir.crop(top, left, crop, crop) };
    (cropped, m.crop(top, left, crop, crop))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub terms: LossTerms,
}

pub const HISTORY_HEADER: &str = "step,l_ssim,l_grad,l_int,l_color,total";

impl LossRecord {
    pub fn csv_line(&self) -> String {
        let t = &self.terms;
        format!("{},{:e},{:e},{:e},{:e},{:e}", self.step, t.ssim, t.grad, t.int, t.color, t.total)
    }
}

/// Mutable training state: model, optimizer step and history.
pub struct Trainer {
    pub model: FusionModel,
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub history: Vec<LossRecord>,
    history_file: Option<(PathBuf, File)>,
    checkpoint_path: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = FusionModel::new(config.model.clone(), config.variant)?;
        Ok(Self { model, config, step: 0, history: Vec::new(), history_file: None, checkpoint_path: None })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let model = FusionModel::from_checkpoint(ckpt)?;
        if model.config() != &config.model || model.variant() != config.variant {
            return Err(TrainError::Config("checkpoint model does not match the configured model".into()));
        }
        let step = ckpt
            .meta
            .get("train.step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TrainError::Config("checkpoint has no train.step".into()))?;
        Ok(Self { model, config, step, history: Vec::new(), history_file: None, checkpoint_path: None })
    }

    /// Append one CSV line per step to `path` (header written when the file is new).
    pub fn log_history_to(&mut self, path: &Path) -> Result<()> {
        let err = |source| TrainError::History { path: path.display().to_string(), source };
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
        if fresh {
            writeln!(f, "{HISTORY_HEADER}").map_err(err)?;
        }
        self.history_file = Some((path.to_path_buf(), f));
        Ok(())
    }

    pub fn checkpoint_to(&mut self, path: &Path) {
        self.checkpoint_path = Some(path.to_path_buf());
    }

    pub fn checkpoint_meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("train.step".to_string(), self.step.to_string()),
            ("train.seed".to_string(), self.config.seed.to_string()),
        ])
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(self.checkpoint_meta())
    }

    fn save_checkpoint(&self) -> Result<()> {
        if let Some(path) = &self.checkpoint_path {
            self.model.save(path, self.checkpoint_meta())?;
        }
        Ok(())
    }

    /// Pair indices used by `step`: a per-epoch seeded shuffle cut into batches.
    pub fn batch_indices(&self, step: u64, pairs: usize) -> (u64, Vec<usize>) {
        let per_epoch = self.config.steps_per_epoch(pairs);
        let epoch = step / per_epoch;
        let k = (step % per_epoch) as usize;
        let mut order: Vec<usize> = (0..pairs).collect();
        order.shuffle(&mut rng::stream(self.config.seed, &[rng::label("train.shuffle"), epoch]));
        let b = self.config.batch_size;
        (epoch, order[k * b..((k + 1) * b).min(pairs)].to_vec())
    }

    /// One optimizer step; returns the batch-mean losses.
    pub fn train_step(&mut self, data: &[TrainSample]) -> Result<LossRecord> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let total = self.config.total_steps(data.len());
        let (epoch, batch) = self.batch_indices(self.step, data.len());
        let inv = 1.0 / batch.len() as f64;
        self.model.store_mut().zero_grad();
        let mut terms = LossTerms::default();
        for &i in &batch {
            let sample = &data[i];
            let mut r = rng::stream(self.config.seed, &[rng::label("train.crop"), epoch, i as u64]);
            let (pair, mask) = sample_crop(&sample.pair, &sample.semantics.mask, self.config.crop, &mut r);
            let sem = Semantics { mask, text: sample.semantics.text.clone() };
            let mut g = Graph::new();
            let vars = self.model.forward(&mut g, &pair.vis, &pair.ir, &sem, &FuseOptions::default()).map_err(|e| self.non_finite(e))?;
            let lv = total_loss(&mut g, vars.image, &pair.vis, &pair.ir, &self.config.weights).map_err(|e| self.loss_err(e))?;
            let t = lv.values(&g);
            if !t.total.is_finite() {
                return Err(TrainError::NonFinite { step: self.step, what: "loss".into() });
            }
            for (acc, v) in [(&mut terms.ssim, t.ssim), (&mut terms.grad, t.grad), (&mut terms.int, t.int), (&mut terms.color, t.color), (&mut terms.total, t.total)] {
                *acc += inv * v;
            }
            let scaled = g.scale(lv.total, inv).map_err(|e| self.loss_err(e))?;
            g.backward_into(scaled, self.model.store_mut()).map_err(TrainError::Loss)?;
        }
        if let Some(p) = self.model.store().iter().find(|p| p.grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
            return Err(TrainError::NonFinite { step: self.step, what: format!("gradient of {}", p.name) });
        }
        let opt = AdamW { lr: self.config.lr_at(self.step, total), ..self.config.optimizer };
        opt.step(self.model.store_mut()).map_err(TrainError::Optim)?;
        self.model.store_mut().clear_grad();
        if let Some(p) = self.model.store().iter().find(|p| !p.value.is_finite()) {
            return Err(TrainError::NonFinite { step: self.step, what: format!("parameter {}", p.name) });
        }
        self.step += 1;
        let record = LossRecord { step: self.step, terms };
        self.history.push(record);
        if let Some((path, f)) = &mut self.history_file {
            let err = |source| TrainError::History { path: path.display().to_string(), source };
            writeln!(f, "{}", record.csv_line()).map_err(err)?;
            f.flush().map_err(err)?;
        }
        Ok(record)
    }

    fn loss_err(&self, e: TensorError) -> TrainError {
        match e {
            TensorError::NonFinite { op } => TrainError::NonFinite { step: self.step, what: format!("value in {op}") },
            e => TrainError::Loss(e),
        }
    }

    fn non_finite(&self, e: ModelError) -> TrainError {
        match e {
            ModelError::Stage { source: TensorError::NonFinite { op }, stage } => {
                TrainError::NonFinite { step: self.step, what: format!("value in {stage}/{op}") }
            }
            e => TrainError::Model(e),
        }
    }

    /// Train until the configured total, checkpointing per cadence and at the end.
    /// `observe` sees every record after its step.
    pub fn run(&mut self, data: &[TrainSample], mut observe: impl FnMut(&LossRecord, &FusionModel)) -> Result<()> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let total = self.config.total_steps(data.len());
        while self.step < total {
            let record = self.train_step(data)?;
            observe(&record, &self.model);
            let every = self.config.checkpoint_every;
            if every > 0 && self.step % every == 0 && self.step < total {
                self.save_checkpoint()?;
            }
        }
        self.save_checkpoint()
    }
}
