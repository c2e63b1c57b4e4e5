//! Two-tier classifier taxonomy: loading, validation, and prompt rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Message, Role, Target, Unit, UnitBody};

pub const BUNDLED_V1: &str = include_str!("../data/taxonomy_v1.toml");
pub const BUNDLED_TEMPLATE: &str = include_str!("../data/prompt_template.txt");

const WHOLE_CONVERSATION_NOTE: &str =
    "The classification applies to the entire conversation snippet above, not only its last message.";

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse taxonomy: {0}")]
    Parse(String),
    #[error("duplicate classifier id `{0}`")]
    DuplicateId(String),
    #[error("classifier `{id}` references unknown top-level parent `{parent}`")]
    UnknownParent { id: String, parent: String },
    #[error("sub-classifier `{0}` has no parent")]
    Orphan(String),
    #[error("top-level classifier `{0}` must not declare parents")]
    TopLevelWithParents(String),
    #[error("top-level classifier `{0}` must target whole_conversation")]
    TopLevelTarget(String),
    #[error("classifier `{0}` has an empty prompt")]
    MissingPrompt(String),
    #[error("taxonomy has no top-level classifier")]
    NoTopLevel,
    #[error("classifier `{id}` targets {expected}, unit is {actual}")]
    TargetMismatch {
        id: String,
        expected: Target,
        actual: Target,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    TopLevel,
    Sub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub id: String,
    pub name: String,
    pub tier: Tier,
    pub target: Target,
    pub prompt: String,
    #[serde(default)]
    pub parents: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rephrasings: Vec<String>,
}

impl ClassifierSpec {
    /// First line of the prompt, or the whole prompt if it is a single line.
    pub fn prompt_short(&self) -> &str {
        prompt_short(&self.prompt)
    }
}

fn prompt_short(prompt: &str) -> &str {
    prompt.lines().next().unwrap_or("")
}

#[derive(Debug, Deserialize)]
struct TaxonomyFile {
    version: String,
    #[serde(rename = "classifier")]
    classifiers: Vec<ClassifierSpec>,
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    pub version: String,
    /// In file order; ids are unique.
    classifiers: Vec<ClassifierSpec>,
    index: BTreeMap<String, usize>,
}

impl Taxonomy {
    pub fn bundled_v1() -> Self {
        Self::from_toml(BUNDLED_V1).expect("bundled taxonomy is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile =
            toml::from_str(text).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
        Self::new(file.version, file.classifiers)
    }

    pub fn from_json(text: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile =
            serde_json::from_str(text).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
        Self::new(file.version, file.classifiers)
    }

    pub fn new(version: String, classifiers: Vec<ClassifierSpec>) -> Result<Self, TaxonomyError> {
        let mut index = BTreeMap::new();
        for (i, c) in classifiers.iter().enumerate() {
            if index.insert(c.id.clone(), i).is_some() {
                return Err(TaxonomyError::DuplicateId(c.id.clone()));
            }
        }
        let top: BTreeSet<&str> = classifiers
            .iter()
            .filter(|c| c.tier == Tier::TopLevel)
            .map(|c| c.id.as_str())
            .collect();
        if top.is_empty() {
            return Err(TaxonomyError::NoTopLevel);
        }
        for c in &classifiers {
            if c.prompt.trim().is_empty() {
                return Err(TaxonomyError::MissingPrompt(c.id.clone()));
            }
            match c.tier {
                Tier::TopLevel => {
                    if !c.parents.is_empty() {
                        return Err(TaxonomyError::TopLevelWithParents(c.id.clone()));
                    }
                    if c.target != Target::WholeConversation {
                        return Err(TaxonomyError::TopLevelTarget(c.id.clone()));
                    }
                }
                Tier::Sub => {
                    if c.parents.is_empty() {
                        return Err(TaxonomyError::Orphan(c.id.clone()));
                    }
                    if let Some(p) = c.parents.iter().find(|p| !top.contains(p.as_str())) {
                        return Err(TaxonomyError::UnknownParent {
                            id: c.id.clone(),
                            parent: p.clone(),
                        });
                    }
                }
            }
        }
        Ok(Taxonomy {
            version,
            classifiers,
            index,
        })
    }

    pub fn classifiers(&self) -> &[ClassifierSpec] {
        &self.classifiers
    }

    pub fn get(&self, id: &str) -> Option<&ClassifierSpec> {
        self.index.get(id).map(|&i| &self.classifiers[i])
    }

    pub fn top_level(&self) -> impl Iterator<Item = &ClassifierSpec> {
        self.classifiers.iter().filter(|c| c.tier == Tier::TopLevel)
    }

    pub fn subs(&self) -> impl Iterator<Item = &ClassifierSpec> {
        self.classifiers.iter().filter(|c| c.tier == Tier::Sub)
    }

    pub fn len(&self) -> usize {
        self.classifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classifiers.is_empty()
    }
}

/// Loads a taxonomy file; `.json` files are parsed as JSON, anything else as
/// TOML.
pub fn load_taxonomy(path: &Path) -> Result<Taxonomy, TaxonomyError> {
    let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if path.extension().is_some_and(|e| e == "json") {
        Taxonomy::from_json(&text)
    } else {
        Taxonomy::from_toml(&text)
    }
}

/// Classifier prompt template with `{classifier_name}`, `{classifier_prompt}`,
/// `{snippet}` and `{classifier_prompt_short}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            text: BUNDLED_TEMPLATE.trim_end_matches('\n').to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        PromptTemplate { text: text.into() }
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::new(text.trim_end_matches('\n')))
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }

    /// Renders the prompt for `spec` on `unit`. Whole-conversation units get
    /// every line unstarred plus a closing note that the judgment covers the
    /// entire snippet.
    pub fn render(&self, spec: &ClassifierSpec, unit: &Unit<'_>) -> Result<String, TaxonomyError> {
        self.render_with_prompt(spec, &spec.prompt, unit)
    }

    /// Like [`render`](Self::render) with an alternative classifier prompt,
    /// used for rephrasing votes.
    pub fn render_with_prompt(
        &self,
        spec: &ClassifierSpec,
        prompt: &str,
        unit: &Unit<'_>,
    ) -> Result<String, TaxonomyError> {
        if unit.target != spec.target {
            return Err(TaxonomyError::TargetMismatch {
                id: spec.id.clone(),
                expected: spec.target,
                actual: unit.target,
            });
        }
        let snippet = render_snippet(unit);
        let mut out = self
            .text
            .replace("{classifier_name}", &spec.name)
            .replace("{classifier_prompt_short}", prompt_short(prompt))
            .replace("{classifier_prompt}", prompt)
            .replace("{snippet}", &snippet);
        if matches!(unit.body, UnitBody::Whole(_)) {
            out = match out.find("</snippet>") {
                Some(pos) => {
                    let end = pos + "</snippet>".len();
                    format!("{}\n{}{}", &out[..end], WHOLE_CONVERSATION_NOTE, &out[end..])
                }
                None => format!("{out}\n{WHOLE_CONVERSATION_NOTE}"),
            };
        }
        Ok(out)
    }
}

fn line(m: &Message, starred: bool) -> String {
    if starred {
        format!("[*{}*]: {}", m.role.tag(), m.text)
    } else {
        format!("[{}]: {}", m.role.tag(), m.text)
    }
}

/// Snippet body: context lines, then the unit with its final line starred.
pub fn render_snippet(unit: &Unit<'_>) -> String {
    let mut lines: Vec<String> = unit.context.iter().map(|m| line(m, false)).collect();
    match &unit.body {
        UnitBody::Message(m) => lines.push(line(m, true)),
        UnitBody::Exchange(ex) => {
            debug_assert_eq!(ex.user_message.role, Role::User);
            lines.push(line(ex.user_message, false));
            lines.push(line(ex.assistant_message, true));
        }
        UnitBody::Whole(msgs) => lines.extend(msgs.iter().map(|m| line(m, false))),
    }
    lines.join("\n")
}
