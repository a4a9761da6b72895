//! Two-dimensional position ids and the Part A / Part B visibility rule.
//!
//! Inter ids locate a token in the corrupted text (1-based; Part B tokens
//! reuse the id of their span's mask). Intra ids number tokens inside an
//! entity: Part A standalone and mask tokens get 0, Part A entities count
//! 1..=L, and Part B spans start at 1 on `[S]` and then follow the Trie walk,
//! continuing inside an entity and resetting to 1 at a boundary.

use std::fmt::Write as _;
use std::ops::Range;

use crate::entity_pool::{EntityPool, MatchState, Unit, Verdict, MAX_ENTITY_LEN};
use crate::error::{Error, Result};
use crate::masking::CorruptedExample;
use crate::vocab::{TokenId, Vocabulary, END, START};

/// Rows of the intra-position table: a 64-token entity after `[S]` reaches 65.
pub const INTRA_TABLE_SIZE: usize = MAX_ENTITY_LEN + 2;
pub const DEFAULT_MAX_LEN: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionedExample {
    pub doc_id: String,
    /// `part_a ++ ([S] ++ span)*`
    pub tokens: Vec<TokenId>,
    pub inter: Vec<u32>,
    pub intra: Vec<u32>,
    pub part_a_len: usize,
    /// Next-token targets, defined on Part B only: span tokens then `[E]`.
    pub targets: Vec<Option<TokenId>>,
    /// Part B index range of each span, `[S]` included.
    pub spans: Vec<Range<usize>>,
}

impl PositionedExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Part A attends bidirectionally within itself; Part B attends to all of
    /// Part A and causally to Part B.
    pub fn sees(&self, row: usize, col: usize) -> bool {
        col < self.part_a_len || col <= row
    }

    pub fn visibility(&self) -> Vec<Vec<bool>> {
        let n = self.len();
        (0..n).map(|i| (0..n).map(|j| self.sees(i, j)).collect()).collect()
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().flatten().count()
    }

    /// Tab-separated `token inter intra part target` dump, one row per position.
    pub fn debug_dump(&self, vocab: &Vocabulary) -> String {
        let name = |t: TokenId| vocab.token(t).unwrap_or("?").to_owned();
        let mut out = String::from("token\tinter\tintra\tpart\ttarget\n");
        for i in 0..self.len() {
            let part = if i < self.part_a_len { "A" } else { "B" };
            let target = self.targets[i].map_or_else(|| "-".to_owned(), name);
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{part}\t{target}",
                name(self.tokens[i]),
                self.inter[i],
                self.intra[i]
            );
        }
        out
    }
}

/// Part A intra ids from the segmentation of the corrupted text.
pub fn part_a_intra(part_a: &[TokenId], pool: &EntityPool) -> Vec<u32> {
    let mut intra = vec![0; part_a.len()];
    for unit in pool.segment(part_a) {
        if let Unit::Entity { start, len, .. } = unit {
            for k in 0..len {
                intra[start + k] = k as u32 + 1;
            }
        }
    }
    intra
}

/// Intra ids of `[S] ++ span`.
pub fn span_intra(span: &[TokenId], pool: &EntityPool) -> Vec<u32> {
    let mut ids = Vec::with_capacity(span.len() + 1);
    ids.push(1);
    let mut state = MatchState::root();
    let mut counter = 1;
    for (k, &tok) in span.iter().enumerate() {
        if k == 0 {
            state = pool.fresh(tok);
            counter += 1;
        } else {
            let (next, verdict) = pool.step(state, tok);
            state = next;
            counter = match verdict {
                Verdict::Continue => counter + 1,
                Verdict::Restart => 1,
            };
        }
        ids.push(counter);
    }
    ids
}

pub fn assign_positions(ex: &CorruptedExample, pool: &EntityPool, max_len: usize) -> Result<PositionedExample> {
    let part_a_len = ex.part_a.len();
    let total = part_a_len + ex.spans.iter().map(|s| s.tokens.len() + 1).sum::<usize>();
    if total > max_len {
        return Err(Error::SequenceTooLong {
            doc_id: ex.doc_id.clone(),
            len: total,
            max_len,
        });
    }

    let mut tokens = ex.part_a.clone();
    let mut inter: Vec<u32> = (1..=part_a_len as u32).collect();
    let mut intra = part_a_intra(&ex.part_a, pool);
    let mut targets = vec![None; part_a_len];
    let mut spans = Vec::with_capacity(ex.spans.len());

    for span in &ex.spans {
        let begin = tokens.len();
        let slot = span.mask_pos as u32 + 1;
        tokens.push(START);
        tokens.extend_from_slice(&span.tokens);
        inter.extend(std::iter::repeat_n(slot, span.tokens.len() + 1));
        intra.extend(span_intra(&span.tokens, pool));
        targets.extend(span.tokens.iter().map(|&t| Some(t)));
        targets.push(Some(END));
        spans.push(begin..tokens.len());
    }

    Ok(PositionedExample {
        doc_id: ex.doc_id.clone(),
        tokens,
        inter,
        intra,
        part_a_len,
        targets,
        spans,
    })
}
