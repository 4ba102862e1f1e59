//! Prompt templates and their rendering.
//!
//! Template files are plain text. `{name}` is a placeholder when `name` is
//! an identifier (`[A-Za-z_][A-Za-z0-9_]*`); `{{` and `}}` render as literal
//! braces; any other brace is copied through unchanged. A single trailing
//! newline at the end of a file is ignored.
//!
//! Placeholders spelled `_NAME_PLACEHOLDER` may also be supplied under the
//! lowercase key `name` (so `statement` fills `_STATEMENT_PLACEHOLDER`).
//! The label placeholders `_FACTUAL_LABEL` and `_NON_FACTUAL_LABEL` default
//! to `True` and `False`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FACTUAL_LABEL: &str = "_FACTUAL_LABEL";
pub const NON_FACTUAL_LABEL: &str = "_NON_FACTUAL_LABEL";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template} has unresolved placeholders: {}", missing.join(", "))]
    MissingPlaceholder {
        template: TemplateId,
        missing: Vec<String>,
    },
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    VerbalConfidence,
    VerdictToken,
    RationaleTrue,
    RationaleFalse,
    TargetedQuery,
    ReflectionQuery,
    DeepVerdict,
    DeepQuery,
    DeepSufficiency,
}

impl TemplateId {
    pub const ALL: [TemplateId; 9] = [
        TemplateId::VerbalConfidence,
        TemplateId::VerdictToken,
        TemplateId::RationaleTrue,
        TemplateId::RationaleFalse,
        TemplateId::TargetedQuery,
        TemplateId::ReflectionQuery,
        TemplateId::DeepVerdict,
        TemplateId::DeepQuery,
        TemplateId::DeepSufficiency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::VerbalConfidence => "verbal_confidence",
            TemplateId::VerdictToken => "verdict_token",
            TemplateId::RationaleTrue => "rationale_true",
            TemplateId::RationaleFalse => "rationale_false",
            TemplateId::TargetedQuery => "targeted_query",
            TemplateId::ReflectionQuery => "reflection_query",
            TemplateId::DeepVerdict => "deep_verdict",
            TemplateId::DeepQuery => "deep_query",
            TemplateId::DeepSufficiency => "deep_sufficiency",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.as_str())
    }

    fn default_body(self) -> &'static str {
        match self {
            TemplateId::VerbalConfidence => include_str!("../templates/verbal_confidence.txt"),
            TemplateId::VerdictToken => include_str!("../templates/verdict_token.txt"),
            TemplateId::RationaleTrue => include_str!("../templates/rationale_true.txt"),
            TemplateId::RationaleFalse => include_str!("../templates/rationale_false.txt"),
            TemplateId::TargetedQuery => include_str!("../templates/targeted_query.txt"),
            TemplateId::ReflectionQuery => include_str!("../templates/reflection_query.txt"),
            TemplateId::DeepVerdict => include_str!("../templates/deep_verdict.txt"),
            TemplateId::DeepQuery => include_str!("../templates/deep_query.txt"),
            TemplateId::DeepSufficiency => include_str!("../templates/deep_sufficiency.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Placeholder(String),
}

fn is_ident(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c == '_' || c.is_ascii_alphabetic())
        && chars.all(|c| c == '_' || c.is_ascii_alphanumeric())
}

fn parse(body: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut rest = body;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with("{{") {
            text.push('{');
            rest = &rest[2..];
        } else if rest.starts_with("}}") {
            text.push('}');
            rest = &rest[2..];
        } else if c == '{' {
            match rest[1..].find('}') {
                Some(end) if is_ident(&rest[1..1 + end]) => {
                    if !text.is_empty() {
                        segments.push(Segment::Text(std::mem::take(&mut text)));
                    }
                    segments.push(Segment::Placeholder(rest[1..1 + end].to_string()));
                    rest = &rest[end + 2..];
                }
                _ => {
                    text.push('{');
                    rest = &rest[1..];
                }
            }
        } else {
            text.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    segments
}

/// Alternate lookup key for `_NAME_PLACEHOLDER` style names.
fn alias(placeholder: &str) -> Option<String> {
    placeholder
        .strip_prefix('_')
        .and_then(|s| s.strip_suffix("_PLACEHOLDER"))
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    id: TemplateId,
    body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(id: TemplateId, body: impl Into<String>) -> Self {
        let mut body: String = body.into();
        if body.ends_with('\n') {
            body.pop();
        }
        let segments = parse(&body);
        Self { id, body, segments }
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    /// Raw template text, escapes included.
    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Placeholder(name) => Some(name.as_str()),
                Segment::Text(_) => None,
            })
            .collect()
    }

    /// Substitute every placeholder; values are inserted verbatim and never
    /// re-scanned.
    pub fn render(&self, substitutions: &HashMap<String, String>) -> Result<String, PromptError> {
        let lookup = |name: &str| {
            substitutions
                .get(name)
                .or_else(|| alias(name).and_then(|a| substitutions.get(&a)))
        };
        let missing: BTreeSet<&str> = self
            .placeholders()
            .into_iter()
            .filter(|name| lookup(name).is_none())
            .collect();
        if !missing.is_empty() {
            return Err(PromptError::MissingPlaceholder {
                template: self.id,
                missing: missing.into_iter().map(String::from).collect(),
            });
        }
        let mut out = String::with_capacity(self.body.len());
        for segment in &self.segments {
            match segment {
                Segment::Text(t) => out.push_str(t),
                Segment::Placeholder(name) => out.push_str(lookup(name).expect("checked above")),
            }
        }
        Ok(out)
    }
}

/// The full template set used by a run.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
    factual_label: String,
    non_factual_label: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            templates: TemplateId::ALL
                .into_iter()
                .map(|id| (id, PromptTemplate::new(id, id.default_body())))
                .collect(),
            factual_label: "True".to_string(),
            non_factual_label: "False".to_string(),
        }
    }
}

impl TemplateSet {
    /// Shipped defaults, overridden by any `<id>.txt` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::default();
        for id in TemplateId::ALL {
            let path = dir.join(id.file_name());
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                set.templates.insert(id, PromptTemplate::new(id, body));
            }
        }
        Ok(set)
    }

    pub fn with_labels(mut self, factual: &str, non_factual: &str) -> Self {
        self.factual_label = factual.to_string();
        self.non_factual_label = non_factual.to_string();
        self
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn factual_label(&self) -> &str {
        &self.factual_label
    }

    pub fn non_factual_label(&self) -> &str {
        &self.non_factual_label
    }

    /// Render with the label placeholders pre-filled.
    pub fn render(
        &self,
        id: TemplateId,
        substitutions: &[(&str, &str)],
    ) -> Result<String, PromptError> {
        let mut map: HashMap<String, String> = HashMap::from([
            (FACTUAL_LABEL.to_string(), self.factual_label.clone()),
            (NON_FACTUAL_LABEL.to_string(), self.non_factual_label.clone()),
        ]);
        for (k, v) in substitutions {
            map.insert(k.to_string(), v.to_string());
        }
        self.get(id).render(&map)
    }

    /// SHA-256 over every template id and body, for run manifests.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (id, template) in &self.templates {
            hasher.update(id.as_str().as_bytes());
            hasher.update([0u8]);
            hasher.update(template.body().as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }
}

/// Render a template by id against the shipped defaults.
pub fn render(id: TemplateId, substitutions: &HashMap<String, String>) -> Result<String, PromptError> {
    let mut map: HashMap<String, String> = HashMap::from([
        (FACTUAL_LABEL.to_string(), "True".to_string()),
        (NON_FACTUAL_LABEL.to_string(), "False".to_string()),
    ]);
    map.extend(substitutions.iter().map(|(k, v)| (k.clone(), v.clone())));
    PromptTemplate::new(id, id.default_body()).render(&map)
}
