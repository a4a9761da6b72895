//! Turns interaction logs into entity-annotated training documents.

mod document;
mod records;
mod templates;
mod window;

pub use document::{read_corpus, write_corpus, Document, EntitySpan, Split};
pub use records::{ingest, register_items, vocabulary_lines, InteractionRecord, UserHistory};
pub use templates::{builtin_templates, PromptTemplate, TaskFamily};
pub use window::{classify_window, sample_slice, WindowClass, WindowConfig, DAY};

use serde::{Deserialize, Serialize};

use crate::entity_pool::{EntityId, EntityPool};
use crate::error::{Error, Result};
use crate::seed;
use crate::vocab::{normalize_text, TokenId, Vocabulary};

/// A contiguous run of one user's interactions, ready to be rendered.
#[derive(Debug, Clone, Copy)]
pub struct Slice<'a> {
    pub user_id: &'a str,
    pub attributes: &'a [EntityId],
    pub interactions: &'a [InteractionRecord],
    pub window: WindowClass,
}

struct Renderer<'a> {
    vocab: &'a Vocabulary,
    pool: &'a EntityPool,
    tokens: Vec<TokenId>,
    spans: Vec<EntitySpan>,
}

impl Renderer<'_> {
    fn words(&mut self, text: &str) -> Result<()> {
        let ids = self.vocab.encode(&normalize_text(text))?;
        self.tokens.extend(ids);
        Ok(())
    }

    fn entity(&mut self, id: EntityId) -> Result<()> {
        let e = self
            .pool
            .entity(id)
            .ok_or_else(|| Error::UnknownEntity(id.to_string()))?;
        self.spans.push(EntitySpan {
            start: self.tokens.len(),
            len: e.tokens.len(),
            entity: id,
        });
        self.tokens.extend_from_slice(&e.tokens);
        Ok(())
    }

    fn title(&mut self, title: &str) -> Result<()> {
        let ids = self.vocab.encode(&normalize_text(title))?;
        let id = self
            .pool
            .lookup(&ids)
            .ok_or_else(|| Error::UnknownEntity(title.to_owned()))?;
        self.entity(id)
    }
}

/// Renders a slice through a template. The last interaction of the slice is
/// the subject of `{item}`, `{rating}` and `{review}`; the ones before it form
/// `{history}`.
pub fn textualize(
    slice: &Slice<'_>,
    template: &PromptTemplate,
    vocab: &Vocabulary,
    pool: &EntityPool,
    doc_id: impl Into<String>,
) -> Result<Document> {
    let (last, earlier) = slice
        .interactions
        .split_last()
        .ok_or_else(|| Error::UnsatisfiablePlaceholder("item".into()))?;
    let answer = template.family.answer_placeholder();

    let mut r = Renderer {
        vocab,
        pool,
        tokens: Vec::new(),
        spans: Vec::new(),
    };
    let mut target = 0..0;
    for word in template.text.split_whitespace() {
        let Some(name) = templates::placeholder(word) else {
            r.words(word)?;
            continue;
        };
        let begin = r.tokens.len();
        match name {
            "user" => {
                r.words(slice.user_id)?;
                for (i, &attr) in slice.attributes.iter().enumerate() {
                    if i > 0 {
                        r.words(",")?;
                    }
                    r.entity(attr)?;
                }
            }
            "history" => {
                if earlier.is_empty() {
                    return Err(Error::UnsatisfiablePlaceholder("history".into()));
                }
                for (i, rec) in earlier.iter().enumerate() {
                    if i > 0 {
                        r.words(",")?;
                    }
                    r.title(&rec.item_title)?;
                }
            }
            "item" => r.title(&last.item_title)?,
            "rating" => r.words(&last.rating.to_string())?,
            "review" => match last.review.as_deref().map(str::trim) {
                Some(text) if !text.is_empty() => r.words(text)?,
                _ => return Err(Error::UnsatisfiablePlaceholder("review".into())),
            },
            other => return Err(Error::UnsatisfiablePlaceholder(other.to_owned())),
        }
        if name == answer {
            target = begin..r.tokens.len();
        }
    }

    Ok(Document {
        doc_id: doc_id.into(),
        tokens: r.tokens,
        entity_spans: r.spans,
        task_family: template.family,
        template_id: template.id.clone(),
        window_class: slice.window,
        split: Split::Train,
        target,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub examples_per_user: usize,
    /// Families cycled round-robin across a user's training examples.
    pub families: Vec<TaskFamily>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            examples_per_user: 5,
            families: TaskFamily::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub users: usize,
    pub skipped_users: usize,
    pub skipped_examples: usize,
    pub train_docs: usize,
    pub test_docs: usize,
}

/// Emits training and leave-one-out test documents for every user.
///
/// Training slices come from each user's history minus its final interaction;
/// the final interaction is the answer of that user's test documents. Test
/// documents are rendered once with a seen template and once with a held-out
/// template per family.
pub fn build_corpus(
    histories: &[UserHistory],
    templates: &[PromptTemplate],
    config: &CorpusConfig,
    windows: &WindowConfig,
    vocab: &Vocabulary,
    pool: &EntityPool,
    seed: u64,
) -> Result<(Vec<Document>, CorpusStats)> {
    use rand::seq::IndexedRandom;

    for t in templates {
        t.validate()?;
    }
    if config.families.is_empty() {
        return Err(Error::Config("corpus.families is empty".into()));
    }
    for fam in &config.families {
        if !templates.iter().any(|t| t.family == *fam && !t.held_out) {
            return Err(Error::Config(format!(
                "no training template for family {}",
                fam.as_str()
            )));
        }
    }
    let pick = |fam: TaskFamily, held_out: bool, rng: &mut seed::Rng| {
        let pool: Vec<&PromptTemplate> = templates
            .iter()
            .filter(|t| t.family == fam && t.held_out == held_out)
            .collect();
        pool.choose(rng).copied()
    };

    let mut users: Vec<&UserHistory> = histories.iter().collect();
    users.sort_by(|a, b| a.user_id.cmp(&b.user_id));

    let mut stats = CorpusStats::default();
    let mut docs = Vec::new();
    for user in users {
        let n = user.interactions.len();
        if n < 3 {
            stats.skipped_users += 1;
            continue;
        }
        stats.users += 1;
        let prefix = &user.interactions[..n - 1];

        for k in 0..config.examples_per_user {
            let mut rng = seed::stream(seed, "corpus.train", &format!("{}/{k}", user.user_id));
            let Some((window, range)) = sample_slice(prefix, windows, &mut rng) else {
                stats.skipped_examples += 1;
                continue;
            };
            let slice = Slice {
                user_id: &user.user_id,
                attributes: &user.attributes,
                interactions: &prefix[range],
                window,
            };
            let fams = &config.families;
            let mut emitted = false;
            for step in 0..fams.len() {
                let fam = fams[(k + step) % fams.len()];
                let template = pick(fam, false, &mut rng).expect("checked above");
                match textualize(&slice, template, vocab, pool, format!("{}:train:{k:03}", user.user_id)) {
                    Ok(doc) => {
                        docs.push(doc);
                        emitted = true;
                        break;
                    }
                    Err(Error::UnsatisfiablePlaceholder(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            if emitted {
                stats.train_docs += 1;
            } else {
                stats.skipped_examples += 1;
            }
        }

        let start = n.saturating_sub(windows.max_history_items.max(2));
        let slice = Slice {
            user_id: &user.user_id,
            attributes: &user.attributes,
            interactions: &user.interactions[start..],
            window: classify_window(&user.interactions, n - 1, windows),
        };
        let mut done = std::collections::BTreeSet::new();
        for &fam in &config.families {
            if !done.insert(fam) {
                continue;
            }
            let mut rng = seed::stream(seed, "corpus.test", &format!("{}/{}", user.user_id, fam.as_str()));
            for held_out in [false, true] {
                let Some(template) = pick(fam, held_out, &mut rng) else {
                    continue;
                };
                let tag = if held_out { "unseen" } else { "seen" };
                let id = format!("{}:test:{}:{tag}", user.user_id, fam.as_str());
                match textualize(&slice, template, vocab, pool, id) {
                    Ok(mut doc) => {
                        doc.split = Split::Test;
                        docs.push(doc);
                        stats.test_docs += 1;
                    }
                    Err(Error::UnsatisfiablePlaceholder(_)) => stats.skipped_examples += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    Ok((docs, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: &str, title: &str, ts: i64) -> InteractionRecord {
        InteractionRecord {
            user_id: user.into(),
            item_id: title.to_lowercase().replace(' ', "_"),
            item_title: title.into(),
            rating: 4,
            timestamp: ts,
            review: Some("fun for the whole family .".into()),
        }
    }

    fn setup(records: &[InteractionRecord]) -> (Vec<UserHistory>, Vocabulary, EntityPool) {
        let text: String = records.iter().map(InteractionRecord::to_line).collect::<Vec<_>>().join("\n");
        let histories = ingest(text.as_bytes()).unwrap();
        let vocab = Vocabulary::build(vocabulary_lines(&histories, &builtin_templates()), 1).unwrap();
        let mut pool = EntityPool::new();
        register_items(&histories, &vocab, &mut pool).unwrap();
        (histories, vocab, pool)
    }

    #[test]
    fn textualize_marks_titles_and_target() {
        let recs = vec![
            rec("u1", "Gloom", 100),
            rec("u1", "Cards Against Humanity", 200),
            rec("u1", "Hasbro Electronic Catch Phrase", 300),
        ];
        let (hist, vocab, pool) = setup(&recs);
        let template = PromptTemplate::new(
            "seq-x",
            TaskFamily::Sequential,
            "user {user} bought {history} next they will buy {item}",
            false,
        );
        let slice = Slice {
            user_id: "u1",
            attributes: &[],
            interactions: &hist[0].interactions,
            window: WindowClass::Short,
        };
        let doc = textualize(&slice, &template, &vocab, &pool, "d0").unwrap();
        assert_eq!(
            vocab.decode(&doc.tokens).unwrap(),
            "user u1 bought gloom , cards against humanity next they will buy hasbro electronic catch phrase"
        );
        let covered: Vec<String> = doc
            .entity_spans
            .iter()
            .map(|s| vocab.decode(&doc.tokens[s.start..s.start + s.len]).unwrap())
            .collect();
        assert_eq!(
            covered,
            ["gloom", "cards against humanity", "hasbro electronic catch phrase"]
        );
        assert_eq!(
            vocab.decode(&doc.tokens[doc.target.clone()]).unwrap(),
            "hasbro electronic catch phrase"
        );
        // user without attributes renders as the bare id token
        assert_eq!(doc.tokens[1], vocab.id("u1").unwrap());

        let again = textualize(&slice, &template, &vocab, &pool, "d0").unwrap();
        assert_eq!(doc.to_json_line(&vocab).unwrap(), again.to_json_line(&vocab).unwrap());
    }

    #[test]
    fn unsatisfiable_placeholder_is_named() {
        let mut recs = vec![rec("u1", "Gloom", 100)];
        recs[0].review = None;
        let (hist, vocab, pool) = setup(&recs);
        let slice = Slice {
            user_id: "u1",
            attributes: &[],
            interactions: &hist[0].interactions,
            window: WindowClass::Short,
        };
        let t = PromptTemplate::new("e", TaskFamily::Explanation, "why {user} {item} ? {review}", false);
        match textualize(&slice, &t, &vocab, &pool, "d") {
            Err(Error::UnsatisfiablePlaceholder(p)) => assert_eq!(p, "review"),
            other => panic!("{other:?}"),
        }
        let t = PromptTemplate::new("s", TaskFamily::Sequential, "{user} {history} {item}", false);
        match textualize(&slice, &t, &vocab, &pool, "d") {
            Err(Error::UnsatisfiablePlaceholder(p)) => assert_eq!(p, "history"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corpus_counts_and_held_out_split() {
        let day = 86_400;
        let mut recs = Vec::new();
        for u in ["u1", "u2"] {
            for (i, t) in ["Gloom", "Catan", "Azul", "Root", "Wingspan"].iter().enumerate() {
                recs.push(rec(u, t, 1_000_000 + i as i64 * 20 * day));
            }
        }
        let (hist, vocab, pool) = setup(&recs);
        let templates = builtin_templates();
        let (docs, stats) = build_corpus(
            &hist,
            &templates,
            &CorpusConfig::default(),
            &WindowConfig::default(),
            &vocab,
            &pool,
            7,
        )
        .unwrap();
        assert_eq!(stats.train_docs, 10);
        assert_eq!(docs.iter().filter(|d| d.split == Split::Train).count(), 10);
        let held: Vec<&str> = templates.iter().filter(|t| t.held_out).map(|t| t.id.as_str()).collect();
        for d in &docs {
            if d.split == Split::Train {
                assert!(!held.contains(&d.template_id.as_str()), "{}", d.doc_id);
                // leave-one-out: the final interaction never appears in training
                let text = vocab.decode(&d.tokens).unwrap();
                assert!(!text.contains("wingspan"), "{text}");
            }
        }
        assert!(docs.windows(2).all(|w| w[0].doc_id < w[1].doc_id));
        assert_eq!(stats.test_docs, 2 * 5 * 2);
    }
}
