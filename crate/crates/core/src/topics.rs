//! Two-stage topic attribution (summary, then category) and per-user and
//! per-group topic distributions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::Conversation;
use crate::judge::{fingerprint, Judge, JudgeError, JudgeRequest};
use crate::taxonomy::render_snippet;

pub const BUNDLED_CATALOG: &str = include_str!("../data/topic_catalog.txt");
pub const OTHER: &str = "Other";
pub const SUMMARY_STAGE: &str = "topic_summary";
pub const CATEGORY_STAGE: &str = "topic_category";

const SUMMARY_PROMPT: &str = "Summarize the following conversation between a user and a chatbot in exactly one sentence.\n\n<conversation>\n{conversation}\n</conversation>\n\nOne-sentence summary:";
const CATEGORY_PROMPT: &str = "Assign the conversation summary below to exactly one of these topic categories:\n{categories}\n\nSummary: {summary}\n\nReply with the category name only.";

#[derive(Debug, thiserror::Error)]
pub enum TopicError {
    #[error("cannot read catalog: {0}")]
    Read(String),
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("duplicate catalog entry `{0}`")]
    Duplicate(String),
    #[error("conversation {0} has no messages")]
    EmptyConversation(String),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicCatalog {
    names: Vec<String>,
}

impl TopicCatalog {
    pub fn new(names: Vec<String>) -> Result<Self, TopicError> {
        if names.is_empty() {
            return Err(TopicError::EmptyCatalog);
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n.to_lowercase()) {
                return Err(TopicError::Duplicate(n.clone()));
            }
        }
        Ok(TopicCatalog { names })
    }

    /// One name per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self, TopicError> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect(),
        )
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_CATALOG).expect("bundled catalog is valid")
    }

    pub fn load(path: &Path) -> Result<Self, TopicError> {
        let text = std::fs::read_to_string(path).map_err(|e| TopicError::Read(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Catalog member matching `reply` after trimming whitespace and
    /// surrounding punctuation, compared case-insensitively; otherwise
    /// [`OTHER`].
    pub fn resolve(&self, reply: &str) -> String {
        let cleaned = reply
            .trim()
            .trim_matches(|c: char| c.is_whitespace() || ".,;:!?\"'`*".contains(c))
            .to_lowercase();
        self.names
            .iter()
            .find(|n| n.to_lowercase() == cleaned)
            .cloned()
            .unwrap_or_else(|| OTHER.to_string())
    }
}

fn conversation_text(c: &Conversation) -> String {
    let whole = crate::corpus::extract_units(c, crate::corpus::Target::WholeConversation, 0);
    render_snippet(&whole[0])
}

/// One-sentence judge summary of a conversation.
pub fn summarize(conversation: &Conversation, judge: &Judge) -> Result<String, TopicError> {
    if conversation.messages.is_empty() {
        return Err(TopicError::EmptyConversation(conversation.id.clone()));
    }
    let text = conversation_text(conversation);
    let prompt = SUMMARY_PROMPT.replace("{conversation}", &text);
    let fp = fingerprint(&text);
    let reply = judge.complete_text(&JudgeRequest {
        classifier_id: SUMMARY_STAGE,
        prompt: &prompt,
        unit_text: &conversation.full_text(),
        fingerprint: &fp,
    })?;
    Ok(reply.trim_end().to_string())
}

/// Maps a summary to a catalog category (or [`OTHER`]).
pub fn categorize(summary: &str, catalog: &TopicCatalog, judge: &Judge) -> Result<String, TopicError> {
    let prompt = CATEGORY_PROMPT
        .replace("{categories}", &catalog.names().join("\n"))
        .replace("{summary}", summary);
    let fp = fingerprint(summary);
    let reply = judge.complete_text(&JudgeRequest {
        classifier_id: CATEGORY_STAGE,
        prompt: &prompt,
        unit_text: summary,
        fingerprint: &fp,
    })?;
    Ok(catalog.resolve(&reply))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicAssignment {
    pub conversation_id: String,
    pub user_id: String,
    pub summary: String,
    pub summary_hash: String,
    pub category: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TopicRun {
    pub assignments: Vec<TopicAssignment>,
    /// Conversations dropped because a judge stage failed.
    pub failures: Vec<(String, String)>,
}

/// Summarizes and categorizes every conversation. Summaries and categories
/// may come from different judges.
pub fn run_topics(
    conversations: &[Conversation],
    summarizer: &Judge,
    categorizer: &Judge,
    catalog: &TopicCatalog,
    max_concurrency: usize,
) -> TopicRun {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_concurrency.max(1))
        .build()
        .expect("thread pool");
    let outcomes: Vec<Result<TopicAssignment, (String, String)>> = pool.install(|| {
        conversations
            .par_iter()
            .map(|c| {
                let summary = summarize(c, summarizer).map_err(|e| (c.id.clone(), e.to_string()))?;
                let category =
                    categorize(&summary, catalog, categorizer).map_err(|e| (c.id.clone(), e.to_string()))?;
                Ok(TopicAssignment {
                    conversation_id: c.id.clone(),
                    user_id: c.user_id.clone(),
                    summary_hash: fingerprint(&summary),
                    summary,
                    category,
                })
            })
            .collect()
    });
    let mut run = TopicRun::default();
    for o in outcomes {
        match o {
            Ok(a) => run.assignments.push(a),
            Err(f) => run.failures.push(f),
        }
    }
    run
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicDistribution {
    pub owner: String,
    pub weights: BTreeMap<String, f64>,
}

/// Share of each category among one owner's conversations.
pub fn topic_distribution(owner: &str, categories: &[String]) -> Option<TopicDistribution> {
    if categories.is_empty() {
        return None;
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for c in categories {
        *counts.entry(c.clone()).or_default() += 1;
    }
    let n = categories.len() as f64;
    Some(TopicDistribution {
        owner: owner.to_string(),
        weights: counts.into_iter().map(|(k, v)| (k, v as f64 / n)).collect(),
    })
}

/// Unweighted mean of user distributions: every user counts once no matter
/// how many conversations they had.
pub fn group_average(owner: &str, users: &[TopicDistribution]) -> Option<TopicDistribution> {
    if users.is_empty() {
        return None;
    }
    let mut acc: BTreeMap<String, f64> = BTreeMap::new();
    for u in users {
        for (k, w) in &u.weights {
            *acc.entry(k.clone()).or_default() += w;
        }
    }
    let n = users.len() as f64;
    Some(TopicDistribution {
        owner: owner.to_string(),
        weights: acc.into_iter().map(|(k, v)| (k, v / n)).collect(),
    })
}

/// Per-user distributions from assignments, in user-id order.
pub fn user_distributions(assignments: &[TopicAssignment]) -> Vec<TopicDistribution> {
    let mut by_user: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for a in assignments {
        by_user.entry(&a.user_id).or_default().push(a.category.clone());
    }
    by_user
        .into_iter()
        .filter_map(|(u, cats)| topic_distribution(u, &cats))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Message, Modality, Role};
    use crate::judge::{Predicate, Rule, ScriptedBackend};

    #[test]
    fn resolve_rules() {
        let cat = TopicCatalog::bundled();
        assert_eq!(cat.names().len(), 15);
        assert_eq!(cat.resolve("Emotional Support & Empathy"), "Emotional Support & Empathy");
        assert_eq!(cat.resolve("  Fact-based Queries. "), "Fact-based Queries");
        assert_eq!(cat.resolve("fact-based queries"), "Fact-based Queries");
        assert_eq!(cat.resolve("Cooking"), OTHER);
    }

    #[test]
    fn catalog_validation() {
        assert!(matches!(TopicCatalog::parse("\n# none\n"), Err(TopicError::EmptyCatalog)));
        assert!(matches!(TopicCatalog::parse("A\na\n"), Err(TopicError::Duplicate(_))));
    }

    fn conv(id: &str, user: &str, text: &str) -> Conversation {
        Conversation::new(id, user, Modality::Text, vec![Message::new(Role::User, text, 0.0)])
    }

    #[test]
    fn scripted_summary_and_category_with_cache() {
        let judge = Judge::scripted(ScriptedBackend::new(vec![
            Rule::new(SUMMARY_STAGE, Predicate::Contains("weather".into()), "The user asks about the weather.  \n"),
            Rule::new(CATEGORY_STAGE, Predicate::Contains("weather".into()), "Fact-based Queries."),
        ]));
        let c = conv("c1", "u", "what's the weather");
        let s = summarize(&c, &judge).unwrap();
        assert_eq!(s, "The user asks about the weather.");
        assert_eq!(summarize(&c, &judge).unwrap(), s);
        assert_eq!(judge.backend_calls(), 1);
        assert_eq!(categorize(&s, &TopicCatalog::bundled(), &judge).unwrap(), "Fact-based Queries");
    }

    #[test]
    fn empty_conversation_is_rejected() {
        let judge = Judge::scripted(ScriptedBackend::default());
        let c = Conversation::new("e", "u", Modality::Text, vec![]);
        assert!(matches!(summarize(&c, &judge), Err(TopicError::EmptyConversation(_))));
    }

    #[test]
    fn distributions() {
        let d = topic_distribution("u", &["A".into(), "A".into(), "B".into()]).unwrap();
        assert!((d.weights["A"] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.weights["B"] - 1.0 / 3.0).abs() < 1e-12);
        let heavy = topic_distribution("u1", &vec!["A".to_string(); 100]).unwrap();
        let light = topic_distribution("u2", &["B".to_string()]).unwrap();
        let g = group_average("g", &[heavy, light]).unwrap();
        assert_eq!(g.weights["A"], 0.5);
        assert_eq!(g.weights["B"], 0.5);
        assert!(topic_distribution("u", &[]).is_none());
    }
}
