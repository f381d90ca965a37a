use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::loss::batch_loss_graph;
use crate::decoding::{recognize, DecodeMode};
use crate::error::{contract_err, HtrError, Result};
use crate::eval::cer;
use crate::session::{Mode, Session};
use crate::tensor::{clip_global_norm, Adam, AdamConfig, Scalar};
use crate::transducer::{Model, TargetBatch};
use crate::vision::{apply_bn_updates, augment, pad_batch, AugmentConfig, ImageBatch, LineImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub grad_clip_norm: f64,
    pub gamma: f64,
    pub seed: u64,
    pub augment: bool,
    pub augment_config: AugmentConfig,
    /// Validate every this many epochs (the last epoch is always validated).
    pub val_every: usize,
    /// Stop as soon as validation CER is at or below this value.
    pub target_cer: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-3,
            max_epochs: 30,
            grad_clip_norm: 5.0,
            gamma: 2.0,
            seed: 0,
            augment: true,
            augment_config: AugmentConfig::default(),
            val_every: 1,
            target_cer: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(HtrError::Config("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(HtrError::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(self.grad_clip_norm > 0.0) || !(self.gamma >= 0.0) || self.val_every == 0 {
            return Err(HtrError::Config("clip norm must be > 0, gamma >= 0 and val_every >= 1".into()));
        }
        self.augment_config.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Loss before the update.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_cer: Option<f64>,
    pub seconds: f64,
}

/// A model together with its optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub step: u64,
    pub config: TrainConfig,
}

fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
        Ok(Self { model, adam, step: 0, config })
    }

    /// Resumes from a checkpoint, keeping its optimizer moments if present.
    pub fn resume(ckpt: Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        let mut t = Self::new(ckpt.model, config)?;
        if let Some(mut adam) = ckpt.optimizer {
            adam.config.lr = t.config.lr;
            t.adam = adam;
        }
        t.step = ckpt.step;
        Ok(t)
    }

    /// Teacher-forced forward, loss, backward, clipping and one Adam update.
    /// A non-finite loss or gradient aborts before anything is modified.
    pub fn train_step(&mut self, batch: &ImageBatch, targets: &TargetBatch) -> Result<StepStats> {
        let seed = stream_seed(self.config.seed, 0x5EED, self.step);
        let (loss, grads, graph, bn) = {
            let mut s = Session::new(&self.model.params, Mode::Train, seed);
            let logits = self.model.forward_teacher_forced(&mut s, batch, targets)?;
            let loss = batch_loss_graph(&mut s, logits, targets, self.config.gamma)?;
            let value = s.graph.data(loss)[0].to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(HtrError::NonFinite(format!("training loss at step {} ({value})", self.step)));
            }
            let grads = s.graph.backward(loss)?;
            (value, grads, s.graph, s.bn_updates)
        };
        let mut candidate = self.model.params.clone();
        candidate.zero_grads();
        candidate.accumulate(&graph, &grads);
        let norm = candidate.grad_norm().to_f64().unwrap_or(f64::NAN);
        if !norm.is_finite() {
            return Err(HtrError::NonFinite(format!("gradient norm at step {}", self.step)));
        }
        clip_global_norm(&mut candidate, self.config.grad_clip_norm);
        self.adam.config.lr = self.config.lr;
        self.adam.step(&mut candidate)?;
        apply_bn_updates(&mut candidate, &bn, self.model.config.cnn.bn_momentum);
        for id in candidate.ids().collect::<Vec<_>>() {
            candidate.get_mut(id).grad = None;
        }
        self.model.params = candidate;
        self.step += 1;
        Ok(StepStats { loss, grad_norm: norm })
    }

    pub fn checkpoint(&self, val_cer: Option<f64>) -> Checkpoint<T> {
        Checkpoint { model: self.model.clone(), optimizer: Some(self.adam.clone()), step: self.step, trained: self.step > 0, val_cer }
    }
}

/// Width-bucketed batches: indices sorted by width, cut into runs of
/// `size`, and the runs shuffled.
pub fn bucket_batches<R: rand::Rng + ?Sized>(widths: &[usize], size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..widths.len()).collect();
    order.sort_by_key(|&i| (widths[i], i));
    let mut batches: Vec<Vec<usize>> = order.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

fn transcript(img: &LineImage) -> Result<&str> {
    img.transcript.as_deref().ok_or_else(|| HtrError::Data("training line without transcript".into()))
}

/// Mean greedy CER over `lines`.
pub fn greedy_cer<T: Scalar>(model: &Model<T>, lines: &[LineImage]) -> Result<f64> {
    let mut total = 0.0;
    for img in lines {
        let hyp = recognize(model, img, DecodeMode::Greedy)?;
        total += cer(transcript(img)?, &hyp.text)?;
    }
    Ok(total / lines.len() as f64)
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome<T: Scalar> {
    /// Checkpoint with the lowest validation CER seen.
    pub best: Checkpoint<T>,
    pub history: Vec<EpochStats>,
}

pub fn fit<T: Scalar>(model: Model<T>, train: &[LineImage], val: &[LineImage], cfg: &TrainConfig) -> Result<FitOutcome<T>> {
    fit_with(model, train, val, cfg, |_| {})
}

/// Trains for up to `cfg.max_epochs`, keeping the best model by validation CER
/// (the later one on ties).
pub fn fit_with<T: Scalar>(
    model: Model<T>,
    train: &[LineImage],
    val: &[LineImage],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<FitOutcome<T>> {
    if train.is_empty() || val.is_empty() {
        return Err(contract_err!("fit needs non-empty training and validation sets"));
    }
    cfg.validate()?;
    for img in train.iter().chain(val) {
        model.vocab.encode(transcript(img)?)?;
    }
    let mut best = Checkpoint::untrained(model.clone());
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let widths: Vec<usize> = train.iter().map(LineImage::width).collect();
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0xE90C, epoch as u64));
        let batches = bucket_batches(&widths, cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for (j, idx) in batches.iter().enumerate() {
            let mut aug_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch as u64, j as u64));
            let imgs: Vec<LineImage> = idx
                .iter()
                .map(|&i| if cfg.augment { augment(&train[i], &cfg.augment_config, &mut aug_rng) } else { Ok(train[i].clone()) })
                .collect::<Result<_>>()?;
            let texts: Vec<&str> = idx.iter().map(|&i| transcript(&train[i])).collect::<Result<_>>()?;
            let batch = pad_batch(&imgs, &trainer.model.config.cnn)?;
            let targets = TargetBatch::from_texts(&trainer.model.vocab, &texts)?;
            loss_sum += trainer.train_step(&batch, &targets)?.loss;
        }
        let last = epoch + 1 == cfg.max_epochs;
        let val_cer = if (epoch + 1) % cfg.val_every == 0 || last { Some(greedy_cer(&trainer.model, val)?) } else { None };
        if let Some(c) = val_cer {
            if best.val_cer.map_or(true, |b| c <= b) {
                best = trainer.checkpoint(Some(c));
            }
        }
        let stats = EpochStats { epoch: epoch + 1, mean_loss: loss_sum / batches.len() as f64, val_cer, seconds: started.elapsed().as_secs_f64() };
        on_epoch(&stats);
        history.push(stats);
        if let (Some(c), Some(target)) = (val_cer, cfg.target_cer) {
            if c <= target {
                break;
            }
        }
    }
    Ok(FitOutcome { best, history })
}
