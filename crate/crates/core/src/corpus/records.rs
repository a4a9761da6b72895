use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::templates::PromptTemplate;
use crate::entity_pool::{EntityId, EntityKind, EntityPool};
use crate::error::{Error, Result};
use crate::vocab::{normalize_text, Vocabulary};

/// One row of the interaction log:
/// `user_id<TAB>item_id<TAB>item_title<TAB>rating<TAB>timestamp<TAB>review?`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub item_title: String,
    pub rating: u8,
    pub timestamp: i64,
    pub review: Option<String>,
}

impl InteractionRecord {
    pub fn parse_line(line: &str, lineno: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if !(5..=6).contains(&fields.len()) {
            return Err(Error::parse(
                lineno,
                format!("expected 5 or 6 tab-separated fields, found {}", fields.len()),
            ));
        }
        for (name, value) in [("user_id", fields[0]), ("item_id", fields[1]), ("item_title", fields[2])] {
            if value.trim().is_empty() {
                return Err(Error::parse(lineno, format!("empty {name}")));
            }
        }
        let rating: u8 = fields[3]
            .trim()
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad rating {:?}", fields[3])))?;
        if !(1..=5).contains(&rating) {
            return Err(Error::parse(lineno, format!("rating {rating} out of range 1..=5")));
        }
        let timestamp: i64 = fields[4]
            .trim()
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad timestamp {:?}", fields[4])))?;
        if timestamp <= 0 {
            return Err(Error::parse(lineno, "timestamp must be positive"));
        }
        let review = fields
            .get(5)
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(str::to_owned);
        Ok(Self {
            user_id: fields[0].trim().to_owned(),
            item_id: fields[1].trim().to_owned(),
            item_title: fields[2].trim().to_owned(),
            rating,
            timestamp,
            review,
        })
    }

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.user_id,
            self.item_id,
            self.item_title,
            self.rating,
            self.timestamp,
            self.review.as_deref().unwrap_or("")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    #[serde(default)]
    pub attributes: Vec<EntityId>,
    /// Sorted ascending by timestamp.
    pub interactions: Vec<InteractionRecord>,
}

/// Groups records by user (ascending user id) and sorts each history by
/// timestamp. Equal timestamps keep file order.
pub fn ingest<R: BufRead>(reader: R) -> Result<Vec<UserHistory>> {
    let mut by_user: BTreeMap<String, Vec<InteractionRecord>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = InteractionRecord::parse_line(&line, i + 1)?;
        by_user.entry(rec.user_id.clone()).or_default().push(rec);
    }
    Ok(by_user
        .into_iter()
        .map(|(user_id, mut interactions)| {
            interactions.sort_by_key(|r| r.timestamp);
            UserHistory {
                user_id,
                attributes: Vec::new(),
                interactions,
            }
        })
        .collect())
}

/// Text fed to vocabulary construction: every user id, title, review and
/// template word that can appear in a rendered document.
pub fn vocabulary_lines(histories: &[UserHistory], templates: &[PromptTemplate]) -> Vec<String> {
    let mut lines = Vec::new();
    for t in templates {
        lines.push(normalize_text(&t.literal_text()));
    }
    for d in 1..=5 {
        lines.push(d.to_string());
    }
    for h in histories {
        lines.push(normalize_text(&h.user_id));
        for r in &h.interactions {
            lines.push(normalize_text(&r.item_title));
            if let Some(review) = &r.review {
                lines.push(normalize_text(review));
            }
        }
    }
    lines
}

/// Registers every distinct normalized title as an item entity, in order of
/// first appearance (users ascending, then time).
pub fn register_items(
    histories: &[UserHistory],
    vocab: &Vocabulary,
    pool: &mut EntityPool,
) -> Result<()> {
    for h in histories {
        for r in &h.interactions {
            let tokens = vocab.encode(&normalize_text(&r.item_title))?;
            pool.get_or_register(&tokens, r.item_title.clone(), EntityKind::Item)?;
        }
    }
    Ok(())
}
