use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, JudgeRequest};

/// Reply when no rule matches.
pub const DEFAULT_REPLY: &str = "no";

#[derive(Clone)]
pub enum Predicate {
    Always,
    Contains(String),
    Fingerprint(String),
    Fn(Arc<dyn Fn(&str) -> bool + Send + Sync>),
}

impl fmt::Debug for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Always => f.write_str("Always"),
            Predicate::Contains(s) => f.debug_tuple("Contains").field(s).finish(),
            Predicate::Fingerprint(s) => f.debug_tuple("Fingerprint").field(s).finish(),
            Predicate::Fn(_) => f.write_str("Fn(..)"),
        }
    }
}

impl Predicate {
    fn matches(&self, req: &JudgeRequest<'_>) -> bool {
        match self {
            Predicate::Always => true,
            Predicate::Contains(s) => req.unit_text.contains(s.as_str()),
            Predicate::Fingerprint(fp) => req.fingerprint == fp,
            Predicate::Fn(f) => f(req.unit_text),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rule {
    /// `*` matches every classifier.
    pub classifier_id: String,
    pub predicate: Predicate,
    pub reply: String,
}

impl Rule {
    pub fn new(classifier_id: impl Into<String>, predicate: Predicate, reply: impl Into<String>) -> Self {
        Rule {
            classifier_id: classifier_id.into(),
            predicate,
            reply: reply.into(),
        }
    }
}

/// Serialized rule. At most one of `contains`/`fingerprint` may be set;
/// neither means the rule always matches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleFile {
    pub classifier_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    pub reply: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RulesError {
    #[error("cannot read rules {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid rules file: {0}")]
    Parse(String),
}

impl TryFrom<RuleFile> for Rule {
    type Error = RulesError;

    fn try_from(r: RuleFile) -> Result<Self, Self::Error> {
        let predicate = match (r.contains, r.fingerprint) {
            (Some(_), Some(_)) => {
                return Err(RulesError::Parse(format!(
                    "rule for `{}` sets both contains and fingerprint",
                    r.classifier_id
                )))
            }
            (Some(s), None) => Predicate::Contains(s),
            (None, Some(fp)) => Predicate::Fingerprint(fp),
            (None, None) => Predicate::Always,
        };
        Ok(Rule::new(r.classifier_id, predicate, r.reply))
    }
}

/// Deterministic backend: the first rule whose classifier and predicate
/// match supplies the reply, otherwise `no`.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    rules: Vec<Rule>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<Rule>) -> Self {
        ScriptedBackend { rules }
    }

    pub fn from_json(text: &str) -> Result<Self, RulesError> {
        let files: Vec<RuleFile> =
            serde_json::from_str(text).map_err(|e| RulesError::Parse(e.to_string()))?;
        let rules = files
            .into_iter()
            .map(Rule::try_from)
            .collect::<Result<_, _>>()?;
        Ok(Self::new(rules))
    }

    pub fn load(path: &Path) -> Result<Self, RulesError> {
        let text = std::fs::read_to_string(path).map_err(|source| RulesError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn reply_for(&self, req: &JudgeRequest<'_>) -> &str {
        self.rules
            .iter()
            .find(|r| {
                (r.classifier_id == "*" || r.classifier_id == req.classifier_id)
                    && r.predicate.matches(req)
            })
            .map_or(DEFAULT_REPLY, |r| r.reply.as_str())
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &JudgeRequest<'_>) -> Result<String, BackendError> {
        Ok(self.reply_for(request).to_string())
    }
}
