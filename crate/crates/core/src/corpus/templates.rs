use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    Rating,
    Sequential,
    Explanation,
    Review,
    Direct,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 5] = [
        TaskFamily::Rating,
        TaskFamily::Sequential,
        TaskFamily::Explanation,
        TaskFamily::Review,
        TaskFamily::Direct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::Rating => "rating",
            TaskFamily::Sequential => "sequential",
            TaskFamily::Explanation => "explanation",
            TaskFamily::Review => "review",
            TaskFamily::Direct => "direct",
        }
    }

    /// Placeholders a template of this family must use, each exactly once.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TaskFamily::Rating => &["user", "item", "rating"],
            TaskFamily::Sequential | TaskFamily::Direct => &["user", "history", "item"],
            TaskFamily::Explanation => &["user", "item", "review"],
            TaskFamily::Review => &["user", "item", "rating", "review"],
        }
    }

    /// The placeholder holding the supervised answer.
    pub fn answer_placeholder(self) -> &'static str {
        match self {
            TaskFamily::Rating => "rating",
            TaskFamily::Sequential | TaskFamily::Direct => "item",
            TaskFamily::Explanation | TaskFamily::Review => "review",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub family: TaskFamily,
    pub text: String,
    /// Held-out templates only ever render evaluation documents.
    pub held_out: bool,
}

pub(super) fn placeholder(word: &str) -> Option<&str> {
    word.strip_prefix('{')?.strip_suffix('}')
}

impl PromptTemplate {
    pub fn new(id: &str, family: TaskFamily, text: &str, held_out: bool) -> Self {
        Self {
            id: id.to_owned(),
            family,
            text: text.to_owned(),
            held_out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Template {
            id: self.id.clone(),
            message,
        };
        let used: Vec<&str> = self.text.split_whitespace().filter_map(placeholder).collect();
        for name in &used {
            if !self.family.placeholders().contains(name) {
                return Err(fail(format!("placeholder {{{name}}} not used by {}", self.family)));
            }
        }
        for name in self.family.placeholders() {
            let n = used.iter().filter(|u| *u == name).count();
            if n != 1 {
                return Err(fail(format!("placeholder {{{name}}} appears {n} times")));
            }
        }
        Ok(())
    }

    /// Template text with placeholders removed.
    pub fn literal_text(&self) -> String {
        self.text
            .split_whitespace()
            .filter(|w| placeholder(w).is_none())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Three training templates and one held-out template per family.
pub fn builtin_templates() -> Vec<PromptTemplate> {
    use TaskFamily::*;
    let rows: [(&str, TaskFamily, &str, bool); 20] = [
        ("rating-1", Rating, "what star rating will user {user} give to {item} ? {rating}", false),
        ("rating-2", Rating, "user {user} rated {item} with {rating} stars .", false),
        ("rating-3", Rating, "how many stars does user {user} give {item} ? {rating}", false),
        ("rating-4", Rating, "predict the score user {user} assigns to {item} : {rating}", true),
        ("sequential-1", Sequential, "user {user} bought {history} next they will buy {item}", false),
        ("sequential-2", Sequential, "user {user} has purchased {history} . the next item is {item}", false),
        ("sequential-3", Sequential, "purchase history of user {user} : {history} . what comes next ? {item}", false),
        ("sequential-4", Sequential, "given that user {user} interacted with {history} in order , predict the next one : {item}", true),
        ("explanation-1", Explanation, "why would user {user} buy {item} ? {review}", false),
        ("explanation-2", Explanation, "explain the choice of {item} by user {user} : {review}", false),
        ("explanation-3", Explanation, "user {user} picked {item} because {review}", false),
        ("explanation-4", Explanation, "give a reason for user {user} choosing {item} . {review}", true),
        ("review-1", Review, "user {user} gave {item} {rating} stars and wrote : {review}", false),
        ("review-2", Review, "write a {rating} star review of {item} from user {user} . {review}", false),
        ("review-3", Review, "review by user {user} of {item} with rating {rating} : {review}", false),
        ("review-4", Review, "user {user} scored {item} as {rating} and said {review}", true),
        ("direct-1", Direct, "recommend an item to user {user} who bought {history} . we recommend {item}", false),
        ("direct-2", Direct, "user {user} liked {history} . pick something for them : {item}", false),
        ("direct-3", Direct, "what should we suggest to user {user} after {history} ? {item}", false),
        ("direct-4", Direct, "user {user} enjoyed {history} . a good recommendation is {item}", true),
    ];
    rows.into_iter()
        .map(|(id, fam, text, held)| PromptTemplate::new(id, fam, text, held))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_set_is_valid_and_balanced() {
        let t = builtin_templates();
        assert_eq!(t.len(), 20);
        for fam in TaskFamily::ALL {
            let train = t.iter().filter(|x| x.family == fam && !x.held_out).count();
            let held = t.iter().filter(|x| x.family == fam && x.held_out).count();
            assert_eq!((train, held), (3, 1), "{fam}");
        }
        for x in &t {
            x.validate().unwrap();
        }
    }

    #[test]
    fn validation_rejects_bad_placeholders() {
        let dup = PromptTemplate::new("x", TaskFamily::Rating, "{user} {item} {rating} {rating}", false);
        assert!(dup.validate().is_err());
        let missing = PromptTemplate::new("x", TaskFamily::Rating, "{user} {item}", false);
        assert!(missing.validate().is_err());
        let foreign = PromptTemplate::new("x", TaskFamily::Rating, "{user} {item} {rating} {history}", false);
        assert!(foreign.validate().is_err());
    }
}
