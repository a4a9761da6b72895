//! Runs a trained model over held-out documents and scores the outputs.

use std::collections::{BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Split, TaskFamily};
use crate::decode::{candidate_rank, infill, next_item_predict, CandidateScoring, Constraint, DecodeConfig};
use crate::entity_pool::{EntityId, EntityKind, EntityPool};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, hr_at_k, CaseMeta, MetricReport, Prediction, RankingCase, Truth};
use crate::model::{ModelParams, Scalar};
use crate::seed;
use crate::vocab::{TokenId, Vocabulary, MASK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Beam width for next-item ranking; also the length of each ranked list.
    pub beam: usize,
    pub max_steps: usize,
    /// Evaluate at most this many test documents per family; 0 means all.
    pub max_cases: usize,
    /// Negatives drawn per case for candidate ranking.
    pub negatives: usize,
    pub scoring: CandidateScoring,
    /// Also evaluate documents rendered with held-out templates.
    pub include_unseen: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam: 10,
            max_steps: crate::decode::DEFAULT_MAX_STEPS,
            max_cases: 0,
            negatives: 99,
            scoring: CandidateScoring::Likelihood,
            include_unseen: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("eval.beam must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("eval.max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// The document with its answer span replaced by a single `[M]`, and the answer.
pub fn answer_prompt(doc: &Document) -> Result<(Vec<TokenId>, &[TokenId])> {
    if doc.target.is_empty() {
        return Err(Error::NoMaskToken);
    }
    let mut prompt = doc.tokens[..doc.target.start].to_vec();
    prompt.push(MASK);
    prompt.extend_from_slice(&doc.tokens[doc.target.end..]);
    Ok((prompt, &doc.tokens[doc.target.clone()]))
}

fn words(vocab: &Vocabulary, ids: &[TokenId]) -> Result<Vec<String>> {
    Ok(vocab.decode(ids)?.split_whitespace().map(str::to_owned).collect())
}

/// Whether a test document was rendered with a template used in training.
pub fn is_seen(doc: &Document) -> bool {
    !doc.doc_id.ends_with(":unseen")
}

/// Test documents, at most `config.max_cases` per family, in corpus order.
pub fn test_documents<'a>(docs: &'a [Document], config: &EvalConfig) -> Vec<&'a Document> {
    let max_cases = config.max_cases;
    let mut taken: HashMap<TaskFamily, usize> = HashMap::new();
    docs.iter()
        .filter(|d| d.split == Split::Test && !d.target.is_empty())
        .filter(|d| config.include_unseen || is_seen(d))
        .filter(|d| {
            let n = taken.entry(d.task_family).or_default();
            *n += 1;
            max_cases == 0 || *n <= max_cases
        })
        .collect()
}

/// Generates an answer for every selected test document and scores it with
/// the family's metrics.
pub fn evaluate_model<T: Scalar>(
    params: &ModelParams<T>,
    docs: &[Document],
    vocab: &Vocabulary,
    pool: &EntityPool,
    config: &EvalConfig,
) -> Result<Vec<MetricReport>> {
    config.validate()?;
    let selected = test_documents(docs, config);
    if selected.is_empty() {
        return Err(Error::EmptyCases);
    }
    let mut cases = Vec::with_capacity(selected.len());
    let mut outputs = HashMap::new();
    let mut truths = HashMap::new();
    let text_cfg = DecodeConfig {
        max_steps: config.max_steps,
        constraint: Constraint::None,
        top_k: None,
    };
    for doc in selected {
        let (prompt, answer) = answer_prompt(doc)?;
        let (pred, truth) = match doc.task_family {
            TaskFamily::Sequential | TaskFamily::Direct => {
                let truth = pool
                    .lookup(answer)
                    .ok_or_else(|| Error::UnknownEntity(vocab.decode(answer).unwrap_or_default()))?;
                let ranked = next_item_predict(params, &prompt, pool, config.beam, config.max_steps)?;
                (Prediction::Ranking(ranked.into_iter().map(|(id, _)| id).collect()), Truth::Item(truth))
            }
            TaskFamily::Rating => {
                let out = infill(params, &prompt, pool, &text_cfg, None)?;
                let text = vocab.decode(out.slots[0].text_tokens())?;
                let gold = vocab
                    .decode(answer)?
                    .parse::<f64>()
                    .map_err(|_| Error::Shape(format!("{}: rating answer is not a number", doc.doc_id)))?;
                (Prediction::Rating(text), Truth::Rating(gold))
            }
            TaskFamily::Explanation | TaskFamily::Review => {
                let out = infill(params, &prompt, pool, &text_cfg, None)?;
                (
                    Prediction::Text(words(vocab, out.slots[0].text_tokens())?),
                    Truth::Text(words(vocab, answer)?),
                )
            }
        };
        cases.push(CaseMeta {
            doc_id: doc.doc_id.clone(),
            family: doc.task_family,
            template_id: doc.template_id.clone(),
            seen: is_seen(doc),
        });
        outputs.insert(doc.doc_id.clone(), pred);
        truths.insert(doc.doc_id.clone(), truth);
    }
    evaluate(&cases, &outputs, &truths)
}

/// HR@1 of candidate ranking with one positive and `negatives` items drawn
/// uniformly from the rest of the catalog, over next-item test documents.
pub fn candidate_hr1<T: Scalar>(
    params: &ModelParams<T>,
    docs: &[Document],
    pool: &EntityPool,
    config: &EvalConfig,
    seed: u64,
) -> Result<f64> {
    let items: Vec<EntityId> = pool
        .iter()
        .filter(|(_, e)| e.kind == EntityKind::Item)
        .map(|(id, _)| id)
        .collect();
    let mut cases = Vec::new();
    for doc in test_documents(docs, config) {
        if !matches!(doc.task_family, TaskFamily::Sequential | TaskFamily::Direct) {
            continue;
        }
        let (prompt, answer) = answer_prompt(doc)?;
        let truth = pool.lookup(answer).ok_or_else(|| Error::UnknownEntity(doc.doc_id.clone()))?;
        let others: Vec<EntityId> = items.iter().copied().filter(|&i| i != truth).collect();
        let mut rng = seed::stream(seed, "eval.negatives", &doc.doc_id);
        let mut candidates: Vec<EntityId> = others.choose_multiple(&mut rng, config.negatives).copied().collect();
        // the positive sits at a random slot so input-order tie breaking carries no signal
        let slot = rand::Rng::random_range(&mut rng, 0..=candidates.len());
        candidates.insert(slot, truth);
        let ranked = candidate_rank(params, &prompt, &candidates, pool, config.scoring)?;
        cases.push(RankingCase {
            ranked: ranked.into_iter().map(|(id, _)| id).collect(),
            truth,
        });
    }
    if cases.is_empty() {
        return Err(Error::EmptyCases);
    }
    hr_at_k(&cases, 1)
}

/// Families present among the test documents.
pub fn test_families(docs: &[Document]) -> BTreeSet<TaskFamily> {
    docs.iter().filter(|d| d.split == Split::Test).map(|d| d.task_family).collect()
}
