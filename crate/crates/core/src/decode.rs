//! Blank infilling at inference time.
//!
//! Mask slots are filled left to right. Each slot opens with `[S]` (intra 1)
//! and every generated token receives its intra id from the Trie walk as it is
//! produced: the first token after `[S]` always gets 2, later tokens continue
//! (+1) while they extend the current entity and drop back to 1 otherwise.

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::entity_pool::{EntityId, EntityPool, MatchState, Verdict};
use crate::error::{Error, Result};
use crate::model::{project, ModelParams, Scalar, Session};
use crate::seed::Rng;
use crate::vocab::{is_mask, TokenId, END, NUM_SPECIAL, START, UNK};

pub const DEFAULT_MAX_STEPS: usize = 72;

/// Position tracker for the span being generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeState {
    walk: MatchState,
    intra: u32,
    emitted: usize,
}

impl Default for DecodeState {
    fn default() -> Self {
        Self::new()
    }
}

impl DecodeState {
    /// State right after `[S]`, which holds intra id 1.
    pub fn new() -> Self {
        Self {
            walk: MatchState::root(),
            intra: 1,
            emitted: 0,
        }
    }

    /// Last assigned intra id.
    pub fn intra(&self) -> u32 {
        self.intra
    }

    pub fn walk(&self) -> MatchState {
        self.walk
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }
}

/// Assigns the intra id of `token` and advances the walk.
pub fn next_intra(state: &mut DecodeState, token: TokenId, pool: &EntityPool) -> u32 {
    if state.emitted == 0 {
        state.walk = pool.fresh(token);
        state.intra += 1;
    } else {
        let (walk, verdict) = pool.step(state.walk, token);
        state.walk = walk;
        state.intra = match verdict {
            Verdict::Continue => state.intra + 1,
            Verdict::Restart => 1,
        };
    }
    state.emitted += 1;
    state.intra
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Any regular token or `[E]`.
    #[default]
    None,
    /// A sequence of whole catalog entities.
    Catalog,
    /// Exactly one catalog entity.
    SingleEntity,
}

/// Tokens permitted next under `constraint`, ascending.
pub fn feasible_tokens(state: &DecodeState, pool: &EntityPool, constraint: Constraint, vocab_size: usize) -> Vec<TokenId> {
    match constraint {
        Constraint::None => {
            let mut v: Vec<TokenId> = std::iter::once(UNK).chain(NUM_SPECIAL as TokenId..vocab_size as TokenId).collect();
            if state.emitted > 0 {
                v.push(END);
            }
            v.sort_unstable();
            v
        }
        Constraint::Catalog | Constraint::SingleEntity => {
            let mut set = BTreeSet::new();
            if state.emitted == 0 {
                set.extend(pool.entity_starts());
            } else {
                set.extend(pool.continuations(state.walk));
                if pool.completed(state.walk).is_some() {
                    set.insert(END);
                    if constraint == Constraint::Catalog {
                        set.extend(pool.entity_starts());
                    }
                }
            }
            set.into_iter().collect()
        }
    }
}

/// Picks a token under the constraint from a logit row: argmax, or a top-k
/// sample when `top_k` and `rng` are given. Ties go to the smaller id.
pub fn constrained_step<T: Scalar>(
    state: &DecodeState,
    logits: &[T],
    pool: &EntityPool,
    constraint: Constraint,
    top_k: Option<(usize, &mut Rng)>,
) -> Result<TokenId> {
    let feasible = feasible_tokens(state, pool, constraint, logits.len());
    if feasible.is_empty() {
        return Err(Error::NoFeasibleToken);
    }
    let mut ranked: Vec<(TokenId, f64)> = feasible.iter().map(|&t| (t, logits[t as usize].f64())).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    match top_k {
        Some((k, rng)) if k > 1 => {
            let top = &ranked[..k.min(ranked.len())];
            let max = top[0].1;
            let weights: Vec<f64> = top.iter().map(|(_, l)| (l - max).exp()).collect();
            let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
            for ((t, _), w) in top.iter().zip(&weights) {
                if u < *w {
                    return Ok(*t);
                }
                u -= w;
            }
            Ok(top[top.len() - 1].0)
        }
        _ => Ok(ranked[0].0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub max_steps: usize,
    pub constraint: Constraint,
    /// Sample among the `top_k` best tokens instead of taking the argmax.
    pub top_k: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            constraint: Constraint::None,
            top_k: None,
        }
    }
}

/// One filled mask slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotResult {
    /// Index of the mask token in the prompt.
    pub mask_pos: usize,
    /// Generated tokens, ending in `[E]` unless truncated.
    pub tokens: Vec<TokenId>,
    /// Log-probability of each generated token.
    pub log_probs: Vec<f64>,
    /// Inter and intra ids of the rows fed back to the model: `[S]` then every
    /// generated token except `[E]`.
    pub inter: Vec<u32>,
    pub intra: Vec<u32>,
    pub truncated: bool,
}

impl SlotResult {
    pub fn log_likelihood(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    /// Generated tokens without the closing `[E]`.
    pub fn text_tokens(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&END) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub slots: Vec<SlotResult>,
}

fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x.f64() - lse).collect()
}

/// Encodes Part A of a prompt into a fresh session.
fn prefill<T: Scalar>(params: &ModelParams<T>, prompt: &[TokenId], pool: &EntityPool) -> Result<Session<T>> {
    let inter: Vec<u32> = (1..=prompt.len() as u32).collect();
    let intra = crate::positions::part_a_intra(prompt, pool);
    let mut session = Session::new(params);
    session.extend(params, prompt, &inter, &intra, true)?;
    Ok(session)
}

fn mask_slots(prompt: &[TokenId]) -> Result<Vec<usize>> {
    let slots: Vec<usize> = prompt.iter().enumerate().filter(|(_, &t)| is_mask(t)).map(|(i, _)| i).collect();
    if slots.is_empty() {
        return Err(Error::NoMaskToken);
    }
    Ok(slots)
}

/// Shared slot loop. `choose(slot, step, state, log_probs, logits)` returns
/// the next token, or `None` to stop the slot as truncated.
fn run_slots<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &[TokenId],
    pool: &EntityPool,
    max_steps: usize,
    mut choose: impl FnMut(usize, usize, &DecodeState, &[T]) -> Result<Option<TokenId>>,
) -> Result<DecodeResult> {
    let slots = mask_slots(prompt)?;
    let mut session = prefill(params, prompt, pool)?;
    let mut out = Vec::with_capacity(slots.len());
    for (si, &mask_pos) in slots.iter().enumerate() {
        let slot_inter = mask_pos as u32 + 1;
        let mut state = DecodeState::new();
        let mut res = SlotResult {
            mask_pos,
            tokens: Vec::new(),
            log_probs: Vec::new(),
            inter: vec![slot_inter],
            intra: vec![1],
            truncated: true,
        };
        let mut logits = session.push(params, START, slot_inter, 1)?;
        for step in 0..max_steps {
            let Some(tok) = choose(si, step, &state, &logits)? else { break };
            let lp = log_softmax(&logits)[tok as usize];
            res.tokens.push(tok);
            res.log_probs.push(lp);
            if tok == END {
                res.truncated = false;
                break;
            }
            let intra = next_intra(&mut state, tok, pool);
            res.inter.push(slot_inter);
            res.intra.push(intra);
            logits = session.push(params, tok, slot_inter, intra)?;
        }
        out.push(res);
    }
    Ok(DecodeResult { slots: out })
}

/// Fills every mask slot of `prompt`, left to right. Running out of steps
/// marks the slot truncated rather than failing.
pub fn infill<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &[TokenId],
    pool: &EntityPool,
    config: &DecodeConfig,
    mut rng: Option<&mut Rng>,
) -> Result<DecodeResult> {
    run_slots(params, prompt, pool, config.max_steps, |_, _, state, logits| {
        let top_k = match (config.top_k, rng.as_deref_mut()) {
            (Some(k), Some(r)) => Some((k, r)),
            _ => None,
        };
        constrained_step(state, logits, pool, config.constraint, top_k).map(Some)
    })
}

/// Feeds the given span contents through the decoding loop instead of model
/// choices. Each span is followed by `[E]`.
pub fn teacher_force<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &[TokenId],
    spans: &[Vec<TokenId>],
    pool: &EntityPool,
) -> Result<DecodeResult> {
    let n_slots = mask_slots(prompt)?.len();
    if spans.len() != n_slots {
        return Err(Error::LengthMismatch(spans.len(), n_slots));
    }
    let budget = spans.iter().map(Vec::len).max().unwrap_or(0) + 1;
    run_slots(params, prompt, pool, budget, |slot, step, _, _| {
        Ok(Some(spans[slot].get(step).copied().unwrap_or(END)))
    })
}

struct Beam<T> {
    session: Session<T>,
    state: DecodeState,
    logits: Vec<T>,
    score: f64,
}

/// Beam search over single catalog entities for the first mask slot. At each
/// step the best `beam` extensions across all beams survive; those ending in
/// `[E]` are finished. Scores are total span log-likelihoods, descending.
pub fn next_item_predict<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &[TokenId],
    pool: &EntityPool,
    beam: usize,
    max_steps: usize,
) -> Result<Vec<(EntityId, f64)>> {
    let beam = beam.max(1);
    let slot = mask_slots(prompt)?[0];
    let inter = slot as u32 + 1;
    let mut session = prefill(params, prompt, pool)?;
    let logits = session.push(params, START, inter, 1)?;
    let mut beams = vec![Beam {
        session,
        state: DecodeState::new(),
        logits,
        score: 0.0,
    }];
    let mut finished: Vec<(EntityId, f64)> = Vec::new();
    for _ in 0..max_steps {
        if beams.is_empty() {
            break;
        }
        // (score, beam index, token)
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            let lp = log_softmax(&b.logits);
            for t in feasible_tokens(&b.state, pool, Constraint::SingleEntity, b.logits.len()) {
                cands.push((b.score + lp[t as usize], bi, t));
            }
        }
        if cands.is_empty() {
            return Err(Error::NoFeasibleToken);
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (score, bi, tok) in cands {
            let b = &beams[bi];
            if tok == END {
                let id = pool.completed(b.state.walk).expect("[E] is feasible only at complete entities");
                finished.push((id, score));
                continue;
            }
            let mut state = b.state;
            let intra = next_intra(&mut state, tok, pool);
            let mut session = b.session.clone();
            let logits = session.push(params, tok, inter, intra)?;
            next.push(Beam {
                session,
                state,
                logits,
                score,
            });
        }
        beams = next;
    }
    finished.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(finished)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CandidateScoring {
    /// Mean per-token log-likelihood of the teacher-forced candidate.
    #[default]
    Likelihood,
    /// The greedy single-entity generation goes first when it is a candidate;
    /// the rest follow by likelihood.
    FreeGeneration,
}

/// Mean log-probability of `tokens` followed by `[E]` in the first mask slot.
pub fn span_score<T: Scalar>(
    params: &ModelParams<T>,
    session: &Session<T>,
    slot_inter: u32,
    tokens: &[TokenId],
    pool: &EntityPool,
) -> Result<f64> {
    let mut state = DecodeState::new();
    let mut toks = vec![START];
    let mut intra = vec![1];
    for &t in tokens {
        toks.push(t);
        intra.push(next_intra(&mut state, t, pool));
    }
    let inter = vec![slot_inter; toks.len()];
    let mut s = session.clone();
    let hidden = s.extend(params, &toks, &inter, &intra, false)?;
    let rows: Vec<usize> = (0..toks.len()).collect();
    let logits = project(params, &hidden, &rows);
    let v = params.config.vocab_size;
    let mut total = 0.0;
    for (r, &target) in tokens.iter().chain(std::iter::once(&END)).enumerate() {
        total += log_softmax(&logits[r * v..(r + 1) * v])[target as usize];
    }
    Ok(total / (tokens.len() + 1) as f64)
}

/// Ranks candidates for the first mask slot. Ties keep input order.
pub fn candidate_rank<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &[TokenId],
    candidates: &[EntityId],
    pool: &EntityPool,
    scoring: CandidateScoring,
) -> Result<Vec<(EntityId, f64)>> {
    let entities = candidates
        .iter()
        .map(|&id| pool.entity(id).ok_or_else(|| Error::UnknownEntity(id.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let slot = mask_slots(prompt)?[0];
    let session = prefill(params, prompt, pool)?;
    let mut scored = Vec::with_capacity(candidates.len());
    for (&id, e) in candidates.iter().zip(&entities) {
        scored.push((id, span_score(params, &session, slot as u32 + 1, &e.tokens, pool)?));
    }
    // stable sort keeps input order among equal scores
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    if scoring == CandidateScoring::FreeGeneration {
        let greedy = next_item_predict(params, prompt, pool, 1, DEFAULT_MAX_STEPS)?;
        if let Some(&(top, _)) = greedy.first() {
            if let Some(pos) = scored.iter().position(|(id, _)| *id == top) {
                let hit = scored.remove(pos);
                scored.insert(0, hit);
            }
        }
    }
    Ok(scored)
}
