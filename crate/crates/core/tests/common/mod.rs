//! Shared generators for the integration suites.
#![allow(dead_code)]

use entity_infill::entity_pool::{EntityKind, EntityPool};
use entity_infill::model::{init_model, ModelConfig, ModelParams};
use entity_infill::vocab::TokenId;
use rand::Rng;

/// Entity tokens come from a small alphabet so that prefixes are shared.
pub const ENTITY_TOKENS: std::ops::Range<TokenId> = 10..18;
/// Filler tokens never start or continue an entity.
pub const FILLER_TOKENS: std::ops::Range<TokenId> = 20..28;
pub const VOCAB_SIZE: usize = 28;

pub fn random_pool<R: Rng>(rng: &mut R, entities: usize, max_len: usize) -> EntityPool {
    let mut pool = EntityPool::new();
    let mut attempts = 0;
    while pool.len() < entities && attempts < entities * 20 {
        attempts += 1;
        let len = rng.random_range(1..=max_len);
        let toks: Vec<TokenId> = (0..len).map(|_| rng.random_range(ENTITY_TOKENS)).collect();
        if pool.lookup(&toks).is_none() {
            pool.register(&toks, format!("e{}", pool.len()), EntityKind::Item).unwrap();
        }
    }
    pool
}

/// A document of whole entities and filler. With `separated`, every entity is
/// followed by at least one filler token.
pub fn random_doc<R: Rng>(rng: &mut R, pool: &EntityPool, units: usize, separated: bool) -> Vec<TokenId> {
    let entities: Vec<Vec<TokenId>> = pool.iter().map(|(_, e)| e.tokens.clone()).collect();
    let mut doc = Vec::new();
    for _ in 0..units {
        if !entities.is_empty() && rng.random_bool(0.5) {
            doc.extend_from_slice(&entities[rng.random_range(0..entities.len())]);
            if separated {
                doc.push(rng.random_range(FILLER_TOKENS));
            }
        } else {
            doc.push(rng.random_range(FILLER_TOKENS));
        }
    }
    if doc.is_empty() {
        doc.push(FILLER_TOKENS.start);
    }
    doc
}

/// Arbitrary tokens from both alphabets, including broken entity prefixes.
pub fn random_tokens<R: Rng>(rng: &mut R, len: usize) -> Vec<TokenId> {
    (0..len.max(1))
        .map(|_| if rng.random_bool(0.6) { rng.random_range(ENTITY_TOKENS) } else { rng.random_range(FILLER_TOKENS) })
        .collect()
}

pub fn tiny_model(seed: u64) -> ModelParams<f64> {
    init_model(&ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_mult: 2,
        max_len: 128,
        dropout: 0.0,
        seed,
    })
    .unwrap()
}
