//! Prompt templates with `{{placeholder}}` markers.
//!
//! Defaults ship in `prompts/*.txt` and are compiled in; a directory of
//! same-named files can override them at runtime.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateName {
    Extract,
    CodifyGrid,
    CodifySparse,
    Relevance,
    Activity,
    Discriminate,
}

impl TemplateName {
    pub const ALL: [TemplateName; 6] = [
        TemplateName::Extract,
        TemplateName::CodifyGrid,
        TemplateName::CodifySparse,
        TemplateName::Relevance,
        TemplateName::Activity,
        TemplateName::Discriminate,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateName::Extract => "extract",
            TemplateName::CodifyGrid => "codify-grid",
            TemplateName::CodifySparse => "codify-sparse",
            TemplateName::Relevance => "relevance",
            TemplateName::Activity => "activity",
            TemplateName::Discriminate => "discriminate",
        }
    }

    /// Placeholders the orchestration step for this template always fills.
    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateName::Extract => &["profile"],
            TemplateName::CodifyGrid | TemplateName::CodifySparse => &["profile", "states"],
            TemplateName::Relevance | TemplateName::Activity => &["character"],
            TemplateName::Discriminate => &["text", "question"],
        }
    }

    fn default_body(self) -> &'static str {
        match self {
            TemplateName::Extract => include_str!("../prompts/extract.txt"),
            TemplateName::CodifyGrid => include_str!("../prompts/codify-grid.txt"),
            TemplateName::CodifySparse => include_str!("../prompts/codify-sparse.txt"),
            TemplateName::Relevance => include_str!("../prompts/relevance.txt"),
            TemplateName::Activity => include_str!("../prompts/activity.txt"),
            TemplateName::Discriminate => include_str!("../prompts/discriminate.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {name} is missing placeholder {{{{{placeholder}}}}}")]
    MissingPlaceholder { name: TemplateName, placeholder: String },
    #[error("template {name} expected, got {got}")]
    WrongTemplate { name: TemplateName, got: TemplateName },
    #[error("template {name} left placeholder {{{{{placeholder}}}}} unfilled")]
    Unfilled { name: TemplateName, placeholder: String },
    #[error("reading template {0}: {1}")]
    Io(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    body: String,
}

impl PromptTemplate {
    pub fn new(name: TemplateName, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        for p in name.required_placeholders() {
            if !body.contains(&format!("{{{{{p}}}}}")) {
                return Err(TemplateError::MissingPlaceholder {
                    name,
                    placeholder: p.to_string(),
                });
            }
        }
        Ok(PromptTemplate { name, body })
    }

    pub fn builtin(name: TemplateName) -> Self {
        Self::new(name, name.default_body()).expect("shipped templates are well-formed")
    }

    /// Loads `<dir>/<name>.txt`, falling back to the built-in body if absent.
    pub fn load(dir: &Path, name: TemplateName) -> Result<Self, TemplateError> {
        let path = dir.join(format!("{}.txt", name.file_stem()));
        if !path.exists() {
            return Ok(Self::builtin(name));
        }
        let body = std::fs::read_to_string(&path)
            .map_err(|e| TemplateError::Io(path.display().to_string(), e.to_string()))?;
        Self::new(name, body)
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn expect(&self, name: TemplateName) -> Result<(), TemplateError> {
        if self.name == name {
            Ok(())
        } else {
            Err(TemplateError::WrongTemplate {
                name,
                got: self.name,
            })
        }
    }

    /// Substitutes every `{{key}}`. Any marker left unfilled is an error.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find("{{") {
            out.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            match after.find("}}") {
                Some(close) => {
                    let key = &after[..close];
                    let is_ident = !key.is_empty()
                        && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
                    if !is_ident {
                        out.push_str("{{");
                        rest = after;
                        continue;
                    }
                    match values.get(key) {
                        Some(v) => out.push_str(v),
                        None => {
                            return Err(TemplateError::Unfilled {
                                name: self.name,
                                placeholder: key.to_string(),
                            })
                        }
                    }
                    rest = &after[close + 2..];
                }
                None => {
                    out.push_str(&rest[open..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}
