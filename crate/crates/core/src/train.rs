//! The pretraining loop: mask, position, batch, step.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Split};
use crate::entity_pool::EntityPool;
use crate::error::{Error, Result};
use crate::masking::{mask_document, MaskConfig};
use crate::model::{batch_gradients, AdamW, AdamWConfig, LoraConfig, ModelParams, Scalar, Trainable};
use crate::positions::{assign_positions, PositionedExample};
use crate::seed;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Every base tensor and any attached adapter is updated.
    Full,
    /// Base projections, norms and token embeddings are frozen.
    #[default]
    LoraOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub mode: TrainMode,
    /// In LoRA-only mode, whether the position tables keep training.
    pub train_position_tables: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-5,
            warmup_steps: 100,
            weight_decay: 0.01,
            batch_size: 32,
            max_len: 1024,
            epochs: 8,
            max_steps: 0,
            mode: TrainMode::LoraOnly,
            train_position_tables: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adamw().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("train.max_len must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn trainable(&self) -> Trainable {
        match self.mode {
            TrainMode::Full => Trainable::full(),
            TrainMode::LoraOnly => Trainable {
                position_tables: self.train_position_tables,
                ..Trainable::lora_only()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub enabled: bool,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraSection {
    fn default() -> Self {
        Self {
            enabled: true,
            rank: 8,
            alpha: 16.0,
        }
    }
}

impl LoraSection {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.rank == 0 {
            return Err(Error::Config("lora.rank must be at least 1".into()));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Config("lora.alpha must be positive".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> Option<LoraConfig> {
        self.enabled.then_some(LoraConfig {
            rank: self.rank,
            alpha: self.alpha,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub targets: usize,
}

impl StepRecord {
    pub const HEADER: &'static str = "step\tepoch\tloss\tlr\ttargets";

    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{:.9}\t{:.6e}\t{}", self.step, self.epoch, self.loss, self.lr, self.targets)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    /// Mean loss over the final tenth of the steps.
    pub tail_loss: f64,
    pub skipped_too_long: usize,
    pub skipped_empty: usize,
}

/// Masks and positions one training document. Each (epoch, document) pair
/// owns its random stream, so the result does not depend on visiting order.
pub fn prepare_example(
    doc: &Document,
    pool: &EntityPool,
    mask: &MaskConfig,
    terminators: &[TokenId],
    max_len: usize,
    seed: u64,
    epoch: usize,
) -> Result<PositionedExample> {
    let mut rng = seed::stream(seed, "train.mask", &format!("{epoch}/{}", doc.doc_id));
    let ex = mask_document(doc, pool, mask, terminators, &mut rng)?;
    assign_positions(&ex, pool, max_len)
}

/// Runs AdamW over the training split. `on_step` sees every step in order.
#[allow(clippy::too_many_arguments)]
pub fn pretrain<T: Scalar>(
    params: &mut ModelParams<T>,
    docs: &[Document],
    pool: &EntityPool,
    mask: &MaskConfig,
    terminators: &[TokenId],
    config: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainSummary> {
    config.validate()?;
    mask.validate()?;
    let train: Vec<&Document> = docs.iter().filter(|d| d.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let trainable = config.trainable();
    let mut opt = AdamW::new(params, &trainable, config.adamw());
    let mut summary = TrainSummary::default();
    let mut losses = Vec::new();
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::stream(seed, "train.shuffle", &epoch.to_string()));
        let mut batch = Vec::with_capacity(config.batch_size);
        let mut cursor = order.iter();
        loop {
            batch.clear();
            for &i in cursor.by_ref() {
                match prepare_example(train[i], pool, mask, terminators, config.max_len, seed, epoch) {
                    Ok(ex) if ex.target_count() > 0 => batch.push(ex),
                    Ok(_) => summary.skipped_empty += 1,
                    Err(Error::SequenceTooLong { .. }) => summary.skipped_too_long += 1,
                    Err(e) => return Err(e),
                }
                if batch.len() == config.batch_size {
                    break;
                }
            }
            if batch.is_empty() {
                break;
            }
            let step = opt.steps() + 1;
            let mut dropout = (params.config.dropout > 0.0).then(|| seed::stream(seed, "train.dropout", &step.to_string()));
            let (loss, grads) = batch_gradients(params, &batch, &trainable, dropout.as_mut())?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            let lr = opt.step(params, &grads)?;
            let rec = StepRecord {
                step,
                epoch,
                loss,
                lr,
                targets: batch.iter().map(PositionedExample::target_count).sum(),
            };
            on_step(&rec)?;
            losses.push(loss);
            if config.max_steps > 0 && step >= config.max_steps {
                break 'epochs;
            }
        }
    }
    if losses.is_empty() {
        return Err(Error::EmptySpansBatch);
    }
    summary.steps = losses.len();
    summary.first_loss = losses.first().copied().unwrap_or(f64::NAN);
    summary.last_loss = losses.last().copied().unwrap_or(f64::NAN);
    let tail = (losses.len() / 10).max(1);
    summary.tail_loss = losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64;
    Ok(summary)
}

/// Writes the loss trace as TSV with a header row.
pub struct TraceWriter<W: Write> {
    inner: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut inner: W) -> Result<Self> {
        writeln!(inner, "{}", StepRecord::HEADER)?;
        Ok(Self { inner })
    }

    pub fn record(&mut self, rec: &StepRecord) -> Result<()> {
        writeln!(self.inner, "{}", rec.to_tsv())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}
