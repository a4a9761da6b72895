//! Trie over entity token sequences.
//!
//! The pool serves three consumers: the corpus builder annotates entity spans
//! with [`EntityPool::segment`], the masker samples in segment units so no
//! entity is ever split, and the decoder walks the Trie with
//! [`EntityPool::step`] to decide intra-position ids one token at a time.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{normalize_text, TokenId, Vocabulary};

pub const MAX_ENTITY_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityKind {
    Item,
    UserAttribute,
    Other,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Item => "item",
            EntityKind::UserAttribute => "user_attribute",
            EntityKind::Other => "other",
        }
    }
}

impl FromStr for EntityKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "item" => Ok(EntityKind::Item),
            "user_attribute" => Ok(EntityKind::UserAttribute),
            "other" => Ok(EntityKind::Other),
            other => Err(format!("unknown entity kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub tokens: Vec<TokenId>,
    pub surface: String,
    pub kind: EntityKind,
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<TokenId, usize>,
    terminal: Option<EntityId>,
}

/// One atom of a segmentation: a whole entity or a single standalone token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Entity { id: EntityId, start: usize, len: usize },
    Single(usize),
}

impl Unit {
    pub fn start(&self) -> usize {
        match *self {
            Unit::Entity { start, .. } => start,
            Unit::Single(i) => i,
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            Unit::Entity { len, .. } => len,
            Unit::Single(_) => 1,
        }
    }

    pub fn end(&self) -> usize {
        self.start() + self.len()
    }

    pub fn is_entity(&self) -> bool {
        matches!(self, Unit::Entity { .. })
    }
}

/// Position of an incremental Trie walk. `depth == 0` means "at the root".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchState {
    node: usize,
    depth: usize,
}

impl MatchState {
    pub fn root() -> Self {
        Self::default()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Continue,
    Restart,
}

#[derive(Debug, Clone)]
pub struct EntityPool {
    nodes: Vec<Node>,
    entities: Vec<Entity>,
}

impl Default for EntityPool {
    fn default() -> Self {
        Self::new()
    }
}

impl EntityPool {
    pub fn new() -> Self {
        Self {
            nodes: vec![Node::default()],
            entities: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entity(&self, id: EntityId) -> Option<&Entity> {
        self.entities.get(id.0 as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = (EntityId, &Entity)> {
        self.entities
            .iter()
            .enumerate()
            .map(|(i, e)| (EntityId(i as u32), e))
    }

    pub fn register(
        &mut self,
        tokens: &[TokenId],
        surface: impl Into<String>,
        kind: EntityKind,
    ) -> Result<EntityId> {
        let surface = surface.into();
        if tokens.is_empty() || tokens.len() > MAX_ENTITY_LEN {
            return Err(Error::InvalidEntity(format!(
                "{surface:?} has {} tokens, expected 1..={MAX_ENTITY_LEN}",
                tokens.len()
            )));
        }
        if self.lookup(tokens).is_some() {
            return Err(Error::DuplicateEntity(surface));
        }
        let mut node = 0;
        for &tok in tokens {
            node = match self.nodes[node].children.get(&tok) {
                Some(&next) => next,
                None => {
                    self.nodes.push(Node::default());
                    let next = self.nodes.len() - 1;
                    self.nodes[node].children.insert(tok, next);
                    next
                }
            };
        }
        let id = EntityId(self.entities.len() as u32);
        self.nodes[node].terminal = Some(id);
        self.entities.push(Entity {
            tokens: tokens.to_vec(),
            surface,
            kind,
        });
        Ok(id)
    }

    /// Registers `surface` unless the same token sequence is already present.
    pub fn get_or_register(
        &mut self,
        tokens: &[TokenId],
        surface: impl Into<String>,
        kind: EntityKind,
    ) -> Result<EntityId> {
        match self.lookup(tokens) {
            Some(id) => Ok(id),
            None => self.register(tokens, surface, kind),
        }
    }

    fn walk(&self, tokens: &[TokenId]) -> Option<usize> {
        tokens
            .iter()
            .try_fold(0, |node, tok| self.nodes[node].children.get(tok).copied())
    }

    /// Exact lookup of a registered sequence.
    pub fn lookup(&self, tokens: &[TokenId]) -> Option<EntityId> {
        self.walk(tokens).and_then(|n| self.nodes[n].terminal)
    }

    /// True when `tokens` is a (possibly improper) prefix of some entity.
    pub fn is_prefix(&self, tokens: &[TokenId]) -> bool {
        self.walk(tokens).is_some()
    }

    pub fn starts_entity(&self, tok: TokenId) -> bool {
        self.nodes[0].children.contains_key(&tok)
    }

    /// Greedy leftmost-longest segmentation. Lossless and total.
    pub fn segment(&self, tokens: &[TokenId]) -> Vec<Unit> {
        let mut units = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let mut node = 0;
            let mut best: Option<(EntityId, usize)> = None;
            for (k, tok) in tokens[i..].iter().enumerate() {
                match self.nodes[node].children.get(tok) {
                    Some(&next) => {
                        node = next;
                        if let Some(id) = self.nodes[node].terminal {
                            best = Some((id, k + 1));
                        }
                    }
                    None => break,
                }
            }
            match best {
                Some((id, len)) => {
                    units.push(Unit::Entity { id, start: i, len });
                    i += len;
                }
                None => {
                    units.push(Unit::Single(i));
                    i += 1;
                }
            }
        }
        units
    }

    /// Advances a Trie walk by one token.
    ///
    /// `Continue` iff the walk is inside the Trie (depth >= 1) and the current
    /// node has a child for `next`. On `Restart` the walk re-roots and tries
    /// `next` as the first token of a fresh entity.
    pub fn step(&self, state: MatchState, next: TokenId) -> (MatchState, Verdict) {
        if state.depth > 0 {
            if let Some(&child) = self.nodes[state.node].children.get(&next) {
                let s = MatchState {
                    node: child,
                    depth: state.depth + 1,
                };
                return (s, Verdict::Continue);
            }
        }
        (self.fresh(next), Verdict::Restart)
    }

    /// Walk state after reading `tok` from the root.
    pub fn fresh(&self, tok: TokenId) -> MatchState {
        match self.nodes[0].children.get(&tok) {
            Some(&child) => MatchState {
                node: child,
                depth: 1,
            },
            None => MatchState::root(),
        }
    }

    /// Entity completed by the walk so far, if any.
    pub fn completed(&self, state: MatchState) -> Option<EntityId> {
        if state.depth == 0 {
            None
        } else {
            self.nodes[state.node].terminal
        }
    }

    /// Tokens that extend the walk inside the Trie (empty at the root).
    pub fn continuations(&self, state: MatchState) -> impl Iterator<Item = TokenId> + '_ {
        let node = if state.depth == 0 { None } else { Some(state.node) };
        node.into_iter()
            .flat_map(move |n| self.nodes[n].children.keys().copied())
    }

    pub fn entity_starts(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.nodes[0].children.keys().copied()
    }

    /// `entity_id<TAB>kind<TAB>surface`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (id, e) in self.iter() {
            writeln!(w, "{id}\t{}\t{}", e.kind.as_str(), e.surface)?;
        }
        Ok(())
    }

    /// Reads a pool file, encoding each normalized surface with `vocab`.
    pub fn read_tsv<R: BufRead>(r: R, vocab: &Vocabulary) -> Result<Self> {
        let mut pool = Self::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let (Some(id), Some(kind), Some(surface)) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::parse(n + 1, "expected entity_id<TAB>kind<TAB>surface"));
            };
            let id: u32 = id.parse().map_err(|_| Error::parse(n + 1, "bad entity id"))?;
            if id as usize != pool.len() {
                return Err(Error::parse(n + 1, "entity ids must be dense and ascending"));
            }
            let kind: EntityKind = kind.parse().map_err(|e: String| Error::parse(n + 1, e))?;
            let tokens = vocab.encode(&normalize_text(surface))?;
            pool.register(&tokens, surface, kind)
                .map_err(|e| Error::parse(n + 1, e.to_string()))?;
        }
        Ok(pool)
    }
}
