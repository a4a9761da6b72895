use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::templates::TaskFamily;
use super::window::WindowClass;
use crate::entity_pool::EntityId;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntitySpan {
    pub start: usize,
    pub len: usize,
    pub entity: EntityId,
}

/// A rendered token sequence with its entity annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<TokenId>,
    /// Non-overlapping, ascending.
    pub entity_spans: Vec<EntitySpan>,
    pub task_family: TaskFamily,
    pub template_id: String,
    pub window_class: WindowClass,
    pub split: Split,
    /// Token range of the supervised answer.
    pub target: Range<usize>,
}

/// On-disk layout of one corpus line. Field order is part of the format.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    doc_id: String,
    text: String,
    entity_spans: Vec<[usize; 3]>,
    task_family: TaskFamily,
    template_id: String,
    window_class: WindowClass,
    split: Split,
    target: [usize; 2],
}

impl Document {
    pub fn to_json_line(&self, vocab: &Vocabulary) -> Result<String> {
        let rec = Record {
            doc_id: self.doc_id.clone(),
            text: vocab.decode(&self.tokens)?,
            entity_spans: self
                .entity_spans
                .iter()
                .map(|s| [s.start, s.len, s.entity.0 as usize])
                .collect(),
            task_family: self.task_family,
            template_id: self.template_id.clone(),
            window_class: self.window_class,
            split: self.split,
            target: [self.target.start, self.target.end],
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json_line(line: &str, vocab: &Vocabulary) -> Result<Self> {
        let rec: Record = serde_json::from_str(line)?;
        let tokens = vocab.encode_rendered(&rec.text);
        let doc = Document {
            doc_id: rec.doc_id,
            tokens,
            entity_spans: rec
                .entity_spans
                .into_iter()
                .map(|[start, len, id]| EntitySpan {
                    start,
                    len,
                    entity: EntityId(id as u32),
                })
                .collect(),
            task_family: rec.task_family,
            template_id: rec.template_id,
            window_class: rec.window_class,
            split: rec.split,
            target: rec.target[0]..rec.target[1],
        };
        doc.check()?;
        Ok(doc)
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Error::Shape(format!("document {}: {m}", self.doc_id));
        let mut prev_end = 0;
        for s in &self.entity_spans {
            if s.len == 0 || s.start < prev_end || s.start + s.len > self.tokens.len() {
                return Err(bad("entity spans must be non-empty, ascending and in bounds"));
            }
            prev_end = s.start + s.len;
        }
        if self.target.start > self.target.end || self.target.end > self.tokens.len() {
            return Err(bad("target region out of bounds"));
        }
        Ok(())
    }
}

pub fn write_corpus<W: Write>(mut w: W, docs: &[Document], vocab: &Vocabulary) -> Result<()> {
    for d in docs {
        writeln!(w, "{}", d.to_json_line(vocab)?)?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R, vocab: &Vocabulary) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(Document::from_json_line(&line, vocab).map_err(|e| Error::parse(i + 1, e.to_string()))?);
    }
    Ok(docs)
}
