//! Entity-preserving span sampling and corruption.
//!
//! All samplers work in [`Unit`] space (whole entities or standalone tokens)
//! and only convert to token offsets at the end, so a span boundary can never
//! fall inside an entity.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::entity_pool::{EntityPool, Unit};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary, DOC_MASK, MASK, SENT_MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskLevel {
    Entity,
    Sentence,
    Document,
}

impl MaskLevel {
    pub const ALL: [MaskLevel; 3] = [MaskLevel::Entity, MaskLevel::Sentence, MaskLevel::Document];

    pub fn mask_token(self) -> TokenId {
        match self {
            MaskLevel::Entity => MASK,
            MaskLevel::Sentence => SENT_MASK,
            MaskLevel::Document => DOC_MASK,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskLevel::Entity => "entity",
            MaskLevel::Sentence => "sentence",
            MaskLevel::Document => "document",
        }
    }
}

impl fmt::Display for MaskLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskLevel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask level {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpan {
    pub start: usize,
    pub len: usize,
    pub level: MaskLevel,
}

impl MaskSpan {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// One blank: where its mask token sits in Part A and what it hid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSpan {
    pub mask_pos: usize,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedExample {
    pub doc_id: String,
    /// Original tokens with every span replaced by one mask token.
    pub part_a: Vec<TokenId>,
    /// In ascending order of original position.
    pub spans: Vec<MaskedSpan>,
    pub level: MaskLevel,
}

impl CorruptedExample {
    /// Splices every span back over its mask token.
    pub fn reconstruct(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.part_a.len() + self.spans.iter().map(|s| s.tokens.len()).sum::<usize>());
        let mut spans = self.spans.iter().peekable();
        for (i, &tok) in self.part_a.iter().enumerate() {
            match spans.peek() {
                Some(s) if s.mask_pos == i => {
                    out.extend_from_slice(&s.tokens);
                    spans.next();
                }
                _ => out.push(tok),
            }
        }
        out
    }

    /// Line of the masked-example dump: part_a ids, mask positions, span ids, level.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "doc_id": self.doc_id,
            "level": self.level,
            "part_a": self.part_a,
            "mask_positions": self.spans.iter().map(|s| s.mask_pos).collect::<Vec<_>>(),
            "spans": self.spans.iter().map(|s| &s.tokens).collect::<Vec<_>>(),
        })
        .to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub entity_budget: f64,
    pub sentence_budget: f64,
    pub poisson_lambda: f64,
    /// Probabilities of (entity, sentence, document) objectives.
    pub objective_mix: [f64; 3],
    pub terminators: Vec<String>,
    /// Entity level: always blank the document's answer region first.
    pub mask_target: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            entity_budget: 0.15,
            sentence_budget: 0.15,
            poisson_lambda: 3.0,
            objective_mix: [0.5, 0.25, 0.25],
            terminators: [".", "!", "?", ";", "\n"].map(String::from).to_vec(),
            mask_target: true,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        check_mix(&self.objective_mix, "mask.objective_mix")?;
        for (name, b) in [("mask.entity_budget", self.entity_budget), ("mask.sentence_budget", self.sentence_budget)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.poisson_lambda > 0.0 && self.poisson_lambda.is_finite()) {
            return Err(Error::Config("mask.poisson_lambda must be positive".into()));
        }
        Ok(())
    }

    pub fn terminator_ids(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        self.terminators.iter().filter_map(|t| vocab.id(t)).collect()
    }
}

pub fn check_mix(mix: &[f64], name: &str) -> Result<()> {
    let sum: f64 = mix.iter().sum();
    if mix.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{name} must be non-negative and sum to 1, got {mix:?}")));
    }
    Ok(())
}

pub fn choose_objective<R: Rng + ?Sized>(rng: &mut R, mix: &[f64; 3]) -> Result<MaskLevel> {
    check_mix(mix, "objective mix")?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (level, p) in MaskLevel::ALL.into_iter().zip(mix) {
        acc += p;
        if u < acc {
            return Ok(level);
        }
    }
    // u landed in the rounding gap above the cumulative sum
    Ok(MaskLevel::ALL
        .into_iter()
        .zip(mix)
        .rev()
        .find(|(_, p)| **p > 0.0)
        .map(|(l, _)| l)
        .expect("mix sums to 1"))
}

/// Smallest unit-aligned token range covering `range`.
fn snap_outward(units: &[Unit], range: Range<usize>) -> Range<usize> {
    let start = units
        .iter()
        .find(|u| u.end() > range.start)
        .map_or(range.start, Unit::start);
    let end = units
        .iter()
        .rev()
        .find(|u| u.start() < range.end)
        .map_or(range.end, Unit::end);
    start..end.max(start)
}

fn unit_index_range(units: &[Unit], tokens: Range<usize>) -> Range<usize> {
    let first = units.partition_point(|u| u.end() <= tokens.start);
    let last = units.partition_point(|u| u.start() < tokens.end);
    first..last
}

/// Random entity-level spans: Poisson(λ) lengths in units, uniform placements
/// disjoint from earlier spans, until `budget * n` tokens are masked.
pub fn sample_entity_spans<R: Rng + ?Sized>(
    tokens: &[TokenId],
    pool: &EntityPool,
    budget: f64,
    lambda: f64,
    rng: &mut R,
) -> Vec<MaskSpan> {
    let units = pool.segment(tokens);
    sample_entity_spans_in(&units, tokens.len(), budget, lambda, Vec::new(), rng)
}

fn sample_entity_spans_in<R: Rng + ?Sized>(
    units: &[Unit],
    n: usize,
    budget: f64,
    lambda: f64,
    mut spans: Vec<MaskSpan>,
    rng: &mut R,
) -> Vec<MaskSpan> {
    let poisson = Poisson::new(lambda).expect("lambda validated positive");
    let mut taken = vec![false; units.len()];
    let mut masked = 0;
    for s in &spans {
        for u in unit_index_range(units, s.start..s.end()) {
            taken[u] = true;
        }
        masked += s.len;
    }

    while (masked as f64) < budget * n as f64 {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < units.len() {
            if taken[i] {
                i += 1;
                continue;
            }
            let start = i;
            while i < units.len() && !taken[i] {
                i += 1;
            }
            runs.push(start..i);
        }
        let longest = runs.iter().map(|r| r.len()).max().unwrap_or(0);
        if longest == 0 {
            break;
        }
        let drawn = (poisson.sample(rng) as usize).max(1);
        let k = drawn.min(longest);
        let placements: usize = runs.iter().filter(|r| r.len() >= k).map(|r| r.len() - k + 1).sum();
        let mut pick = rng.random_range(0..placements);
        let mut first = 0;
        for r in runs.iter().filter(|r| r.len() >= k) {
            let here = r.len() - k + 1;
            if pick < here {
                first = r.start + pick;
                break;
            }
            pick -= here;
        }
        for t in &mut taken[first..first + k] {
            *t = true;
        }
        let start = units[first].start();
        let end = units[first + k - 1].end();
        masked += end - start;
        spans.push(MaskSpan {
            start,
            len: end - start,
            level: MaskLevel::Entity,
        });
    }
    spans.sort_by_key(|s| s.start);
    spans
}

/// Sentences as unit-aligned token ranges. A terminator only closes a
/// sentence when it is a standalone token; one inside an entity is skipped,
/// which grows the sentence outward to the next real boundary.
pub fn sentence_ranges(tokens: &[TokenId], units: &[Unit], terminators: &[TokenId]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for u in units {
        if let Unit::Single(i) = *u {
            if terminators.contains(&tokens[i]) {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
    }
    if start < tokens.len() {
        out.push(start..tokens.len());
    }
    out
}

/// Whole sentences, drawn uniformly without replacement until `budget * n`
/// tokens are masked.
pub fn sample_sentence_spans<R: Rng + ?Sized>(
    tokens: &[TokenId],
    pool: &EntityPool,
    terminators: &[TokenId],
    budget: f64,
    rng: &mut R,
) -> Vec<MaskSpan> {
    let units = pool.segment(tokens);
    let mut sentences = sentence_ranges(tokens, &units, terminators);
    sentences.shuffle(rng);
    let mut spans = Vec::new();
    let mut masked = 0;
    for s in sentences {
        if (masked as f64) >= budget * tokens.len() as f64 {
            break;
        }
        masked += s.len();
        spans.push(MaskSpan {
            start: s.start,
            len: s.len(),
            level: MaskLevel::Sentence,
        });
    }
    spans.sort_by_key(|s| s.start);
    spans
}

/// Target length for the document objective, uniform over 50%..=100% of `n`.
pub fn draw_document_length<R: Rng + ?Sized>(n: usize, rng: &mut R) -> usize {
    let lo = n.div_ceil(2);
    rng.random_range(lo..=n)
}

/// One span of 50–100% of the document, grown outward to unit boundaries.
pub fn sample_document_span<R: Rng + ?Sized>(tokens: &[TokenId], pool: &EntityPool, rng: &mut R) -> Vec<MaskSpan> {
    let n = tokens.len();
    if n == 0 {
        return Vec::new();
    }
    let units = pool.segment(tokens);
    let len = draw_document_length(n, rng);
    let start = rng.random_range(0..=n - len);
    let r = snap_outward(&units, start..start + len);
    vec![MaskSpan {
        start: r.start,
        len: r.len(),
        level: MaskLevel::Document,
    }]
}

/// Builds Part A and the chronologically ordered span list.
pub fn corrupt(doc_id: &str, tokens: &[TokenId], spans: &[MaskSpan], level: MaskLevel) -> Result<CorruptedExample> {
    let mut sorted = spans.to_vec();
    sorted.sort_by_key(|s| s.start);
    let mut prev_end = 0;
    for s in &sorted {
        if s.start < prev_end {
            return Err(Error::OverlappingSpans);
        }
        if s.len == 0 || s.end() > tokens.len() {
            return Err(Error::Shape(format!(
                "span {}..{} invalid for document of {} tokens",
                s.start,
                s.end(),
                tokens.len()
            )));
        }
        prev_end = s.end();
    }

    let mut part_a = Vec::with_capacity(tokens.len());
    let mut out = Vec::with_capacity(sorted.len());
    let mut i = 0;
    for s in &sorted {
        part_a.extend_from_slice(&tokens[i..s.start]);
        out.push(MaskedSpan {
            mask_pos: part_a.len(),
            tokens: tokens[s.start..s.end()].to_vec(),
        });
        part_a.push(level.mask_token());
        i = s.end();
    }
    part_a.extend_from_slice(&tokens[i..]);
    Ok(CorruptedExample {
        doc_id: doc_id.to_owned(),
        part_a,
        spans: out,
        level,
    })
}

/// Draws an objective and masks `doc` with it.
pub fn mask_document<R: Rng + ?Sized>(
    doc: &Document,
    pool: &EntityPool,
    config: &MaskConfig,
    terminators: &[TokenId],
    rng: &mut R,
) -> Result<CorruptedExample> {
    let level = choose_objective(rng, &config.objective_mix)?;
    let spans = match level {
        MaskLevel::Entity => {
            let units = pool.segment(&doc.tokens);
            let mut initial = Vec::new();
            if config.mask_target && !doc.target.is_empty() {
                let r = snap_outward(&units, doc.target.clone());
                initial.push(MaskSpan {
                    start: r.start,
                    len: r.len(),
                    level: MaskLevel::Entity,
                });
            }
            sample_entity_spans_in(
                &units,
                doc.tokens.len(),
                config.entity_budget,
                config.poisson_lambda,
                initial,
                rng,
            )
        }
        MaskLevel::Sentence => sample_sentence_spans(&doc.tokens, pool, terminators, config.sentence_budget, rng),
        MaskLevel::Document => sample_document_span(&doc.tokens, pool, rng),
    };
    corrupt(&doc.doc_id, &doc.tokens, &spans, level)
}
