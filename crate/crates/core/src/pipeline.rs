//! In-memory glue between the stages, shared by the CLI and the tests.

use crate::config::RunConfig;
use crate::corpus::{
    build_corpus, builtin_templates, ingest, register_items, vocabulary_lines, CorpusStats, Document, PromptTemplate,
    UserHistory,
};
use crate::entity_pool::EntityPool;
use crate::error::{Error, Result};
use crate::model::{init_model, ModelParams, Scalar};
use crate::train::{pretrain, StepRecord, TrainSummary};
use crate::vocab::Vocabulary;

/// Everything derived from an interaction log before training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub histories: Vec<UserHistory>,
    pub vocab: Vocabulary,
    pub pool: EntityPool,
    pub docs: Vec<Document>,
    pub stats: CorpusStats,
}

/// Vocabulary over every renderable word, then the item entity pool.
pub fn vocab_and_pool(histories: &[UserHistory], templates: &[PromptTemplate]) -> Result<(Vocabulary, EntityPool)> {
    let vocab = Vocabulary::build(vocabulary_lines(histories, templates), 1)?;
    let mut pool = EntityPool::new();
    register_items(histories, &vocab, &mut pool)?;
    Ok((vocab, pool))
}

pub fn prepare(log: &[u8], templates: Option<Vec<PromptTemplate>>, cfg: &RunConfig) -> Result<Prepared> {
    let histories = ingest(log)?;
    if histories.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let templates = templates.unwrap_or_else(builtin_templates);
    let (vocab, pool) = vocab_and_pool(&histories, &templates)?;
    let (docs, stats) = build_corpus(&histories, &templates, &cfg.corpus, &cfg.sample, &vocab, &pool, cfg.seed)?;
    Ok(Prepared {
        histories,
        vocab,
        pool,
        docs,
        stats,
    })
}

/// A freshly initialized model sized for `vocab`, with adapters attached when enabled.
pub fn new_model<T: Scalar>(cfg: &RunConfig, vocab: &Vocabulary) -> Result<ModelParams<T>> {
    let mut model_cfg = cfg.model.clone();
    if model_cfg.vocab_size == 0 {
        model_cfg.vocab_size = vocab.len();
    } else if model_cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model.vocab_size = {} but the vocabulary has {} entries",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    model_cfg.seed = crate::seed::derive_seed(cfg.seed, "model.init", &cfg.model.seed.to_string());
    let mut params = init_model::<T>(&model_cfg)?;
    if let Some(lora) = cfg.lora.config() {
        params.attach_lora(lora)?;
    }
    Ok(params)
}

pub fn train_model<T: Scalar>(
    params: &mut ModelParams<T>,
    prepared: &Prepared,
    cfg: &RunConfig,
    on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainSummary> {
    let terminators = cfg.mask.terminator_ids(&prepared.vocab);
    pretrain(params, &prepared.docs, &prepared.pool, &cfg.mask, &terminators, &cfg.train, cfg.seed, on_step)
}
