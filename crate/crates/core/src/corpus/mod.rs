//! Step-description corpus: prompt construction, response parsing, a
//! deterministic offline generator, persistence, and featurization into the
//! description memory layout.

mod featurize;
mod llm;
mod mock;
mod parse;
mod prompt;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use featurize::{embed_corpus, DescKind, DescriptionFeatures, HashedBow, Precomputed, TextFeaturizer};
pub use llm::{CompletionBackend, LlmClient, LlmClientConfig, MockBackend};
#[cfg(feature = "llm-http")]
pub use llm::HttpBackend;
pub use mock::{mock_corpus, mock_llm_generate, mock_set};
pub use parse::{parse_llm_response, ParsedResponse};
pub use prompt::{build_prompt, default_exemplars, Exemplar};

/// Which side of a state change a description talks about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateSide {
    Before,
    After,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing section: {section}")]
    MissingSection { section: &'static str },
    #[error("{section}: expected {expected}, got {got}")]
    BulletCount {
        section: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("missing step classes: {0:?}")]
    MissingClasses(Vec<usize>),
    #[error("duplicate step class id {0}")]
    DuplicateClass(usize),
    #[error("class {class}: empty {field}")]
    EmptyField { class: usize, field: &'static str },
    #[error("class {class} {section}: expected {expected} sentences, got {got}")]
    WrongCount {
        class: usize,
        section: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("feature dim mismatch: expected {expected}, got {got}")]
    FeatureDim { expected: usize, got: usize },
    #[error("no precomputed feature for class {class} ({kind})")]
    MissingFeature { class: usize, kind: String },
    #[error("unknown step class {0}")]
    UnknownClass(usize),
    #[error("unsupported corpus version {0}")]
    Version(u32),
    #[error("llm endpoint: {0}")]
    Endpoint(String),
    #[error("description validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
}

/// One step class's descriptions: the step itself plus K before-state and K
/// after-state sentences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDescriptionSet {
    pub task: String,
    pub step: String,
    pub verb: String,
    pub step_description: String,
    pub before: Vec<String>,
    pub after: Vec<String>,
}

/// True when `needle` occurs as a whole word in `hay`, ignoring case.
pub(crate) fn contains_token(hay: &str, needle: &str) -> bool {
    hay.split(|c: char| !c.is_alphanumeric())
        .any(|tok| !tok.is_empty() && tok.eq_ignore_ascii_case(needle))
}

impl StepDescriptionSet {
    /// Structural and content problems, as human-readable messages. Empty
    /// means valid. Verb avoidance is checked here because generated state
    /// sentences are instructed not to reuse the step verb.
    pub fn violations(&self, k: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.before.len() != k {
            out.push(format!("before: expected {k}, got {}", self.before.len()));
        }
        if self.after.len() != k {
            out.push(format!("after: expected {k}, got {}", self.after.len()));
        }
        for (name, text) in [
            ("task", &self.task),
            ("step", &self.step),
            ("verb", &self.verb),
            ("step_description", &self.step_description),
        ] {
            if text.trim().is_empty() {
                out.push(format!("empty {name}"));
            }
        }
        for (side, sents) in [("before", &self.before), ("after", &self.after)] {
            for (j, s) in sents.iter().enumerate() {
                if s.trim().is_empty() {
                    out.push(format!("{side}[{j}] is empty"));
                } else if contains_token(s, &self.verb) {
                    out.push(format!("{side}[{j}] contains the verb {:?}", self.verb));
                }
            }
        }
        out
    }
}

/// All step classes' descriptions, densely indexed by class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptionCorpus {
    k: usize,
    entries: Vec<StepDescriptionSet>,
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    version: u32,
    #[serde(rename = "K")]
    k: usize,
    classes: Vec<ClassEntry>,
}

#[derive(Serialize, Deserialize)]
struct ClassEntry {
    id: usize,
    task: String,
    step: String,
    verb: String,
    step_description: String,
    before: Vec<String>,
    after: Vec<String>,
}

impl DescriptionCorpus {
    /// `entries[i]` describes class `i`. Counts are checked; other content
    /// problems are reported via [`DescriptionCorpus::violations`].
    pub fn new(k: usize, entries: Vec<StepDescriptionSet>) -> Result<Self, CorpusError> {
        for (id, e) in entries.iter().enumerate() {
            if e.before.len() != k {
                return Err(CorpusError::WrongCount {
                    class: id,
                    section: "before",
                    expected: k,
                    got: e.before.len(),
                });
            }
            if e.after.len() != k {
                return Err(CorpusError::WrongCount {
                    class: id,
                    section: "after",
                    expected: k,
                    got: e.after.len(),
                });
            }
        }
        Ok(DescriptionCorpus { k, entries })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, class: usize) -> Result<&StepDescriptionSet, CorpusError> {
        self.entries.get(class).ok_or(CorpusError::UnknownClass(class))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &StepDescriptionSet)> {
        self.entries.iter().enumerate()
    }

    /// Content problems across all classes, prefixed with the class id.
    pub fn violations(&self) -> Vec<String> {
        self.iter()
            .flat_map(|(id, e)| {
                e.violations(self.k)
                    .into_iter()
                    .map(move |v| format!("class {id}: {v}"))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = CorpusFile {
            version: 1,
            k: self.k,
            classes: self
                .iter()
                .map(|(id, e)| ClassEntry {
                    id,
                    task: e.task.clone(),
                    step: e.step.clone(),
                    verb: e.verb.clone(),
                    step_description: e.step_description.clone(),
                    before: e.before.clone(),
                    after: e.after.clone(),
                })
                .collect(),
        };
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let file: CorpusFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        if file.version != 1 {
            return Err(CorpusError::Version(file.version));
        }
        let mut by_id: BTreeMap<usize, StepDescriptionSet> = BTreeMap::new();
        let count = file.classes.len();
        for c in file.classes {
            let set = StepDescriptionSet {
                task: c.task,
                step: c.step,
                verb: c.verb,
                step_description: c.step_description,
                before: c.before,
                after: c.after,
            };
            if by_id.insert(c.id, set).is_some() {
                return Err(CorpusError::DuplicateClass(c.id));
            }
        }
        let missing: Vec<usize> = (0..count).filter(|i| !by_id.contains_key(i)).collect();
        if !missing.is_empty() {
            return Err(CorpusError::MissingClasses(missing));
        }
        DescriptionCorpus::new(file.k, by_id.into_values().collect())
    }
}
