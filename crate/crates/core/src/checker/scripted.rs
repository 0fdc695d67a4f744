use serde::{Deserialize, Serialize};

use super::{
    label_logprob_coherent, Checker, CheckerError, CheckerVerdict, Label, Query, VerdictSource,
};

/// Default log-probability returned for a `true` rule without an explicit value.
pub fn default_true_logprob() -> f64 {
    0.95f64.ln()
}

/// Default log-probability returned when no rule matches.
pub fn default_false_logprob() -> f64 {
    0.05f64.ln()
}

/// Case-insensitive match over text.
///
/// * `foo` matches anywhere as a substring.
/// * `^foo` must start the text and end on a token boundary.
/// * `foo$` must end the text and start on a token boundary.
/// * `^foo$` must equal the whole (trimmed) text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    raw: String,
    needle: String,
    start: bool,
    end: bool,
}

impl Pattern {
    pub fn new(raw: &str) -> Self {
        let mut body = raw;
        let start = body.starts_with('^');
        if start {
            body = &body[1..];
        }
        let end = body.ends_with('$');
        if end {
            body = &body[..body.len() - 1];
        }
        Pattern {
            raw: raw.to_string(),
            needle: body.to_lowercase(),
            start,
            end,
        }
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn is_empty(&self) -> bool {
        self.needle.is_empty() && !self.start && !self.end
    }

    /// `text` must already be lowercased.
    fn matches_lower(&self, text: &str) -> bool {
        let text = if self.start || self.end {
            text.trim()
        } else {
            text
        };
        match (self.start, self.end) {
            (false, false) => text.contains(&self.needle),
            (true, true) => text == self.needle,
            (true, false) => {
                text.starts_with(&self.needle)
                    && boundary_at(text, self.needle.len(), true)
            }
            (false, true) => {
                text.ends_with(&self.needle)
                    && boundary_at(text, text.len() - self.needle.len(), false)
            }
        }
    }

    pub fn matches(&self, text: &str) -> bool {
        self.matches_lower(&text.to_lowercase())
    }
}

fn boundary_at(text: &str, idx: usize, after: bool) -> bool {
    let c = if after {
        text[idx..].chars().next()
    } else {
        text[..idx].chars().next_back()
    };
    c.is_none_or(|c| !c.is_alphanumeric())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedRule {
    pub action_pattern: Option<Pattern>,
    pub question_pattern: Option<Pattern>,
    pub label: Label,
    pub logprob: f64,
}

impl ScriptedRule {
    pub fn new(
        action_pattern: Option<&str>,
        question_pattern: Option<&str>,
        label: Label,
        logprob: f64,
    ) -> Result<Self, CheckerError> {
        let action_pattern = action_pattern.map(Pattern::new).filter(|p| !p.is_empty());
        let question_pattern = question_pattern.map(Pattern::new).filter(|p| !p.is_empty());
        if action_pattern.is_none() && question_pattern.is_none() {
            return Err(CheckerError::Backend(
                "scripted rule needs an action or question pattern".into(),
            ));
        }
        if !label_logprob_coherent(label, logprob) {
            return Err(CheckerError::Backend(format!(
                "scripted rule label {} is incoherent with logprob {logprob}",
                label.as_str()
            )));
        }
        Ok(ScriptedRule {
            action_pattern,
            question_pattern,
            label,
            logprob,
        })
    }

    fn matches_lower(&self, text: &str, question: &str) -> bool {
        self.action_pattern
            .as_ref()
            .is_none_or(|p| p.matches_lower(text))
            && self
                .question_pattern
                .as_ref()
                .is_none_or(|p| p.matches_lower(question))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action_pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question_pattern: Option<String>,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logprob: Option<f64>,
}

/// Parses a scripted rule file (a JSON list of rule objects).
pub fn parse_rule_file(text: &str) -> Result<Vec<ScriptedRule>, CheckerError> {
    let docs: Vec<RuleDoc> = serde_json::from_str(text)
        .map_err(|e| CheckerError::Backend(format!("rule file: {e}")))?;
    docs.into_iter()
        .map(|d| {
            let lp = d.logprob.unwrap_or(match d.label {
                Label::True => default_true_logprob(),
                Label::False => default_false_logprob(),
                Label::Unknown => 0.5f64.ln(),
            });
            ScriptedRule::new(
                d.action_pattern.as_deref(),
                d.question_pattern.as_deref(),
                d.label,
                lp,
            )
        })
        .collect()
}

pub fn serialize_rule_file(rules: &[ScriptedRule]) -> String {
    let docs: Vec<RuleDoc> = rules
        .iter()
        .map(|r| RuleDoc {
            action_pattern: r.action_pattern.as_ref().map(|p| p.as_str().to_string()),
            question_pattern: r.question_pattern.as_ref().map(|p| p.as_str().to_string()),
            label: r.label,
            logprob: Some(r.logprob),
        })
        .collect();
    serde_json::to_string_pretty(&docs).expect("rule files always serialize")
}

/// Deterministic pattern-table oracle. First matching rule wins; no match
/// answers `false` with the configured false logit.
#[derive(Debug, Clone)]
pub struct ScriptedChecker {
    rules: Vec<ScriptedRule>,
    false_logprob: f64,
}

impl ScriptedChecker {
    pub fn new(rules: Vec<ScriptedRule>) -> Self {
        ScriptedChecker {
            rules,
            false_logprob: default_false_logprob(),
        }
    }

    pub fn with_false_logprob(mut self, lp: f64) -> Self {
        assert!(label_logprob_coherent(Label::False, lp));
        self.false_logprob = lp;
        self
    }

    pub fn from_rule_file(text: &str) -> Result<Self, CheckerError> {
        parse_rule_file(text).map(Self::new)
    }

    pub fn rules(&self) -> &[ScriptedRule] {
        &self.rules
    }
}

impl Checker for ScriptedChecker {
    fn backend_id(&self) -> String {
        "scripted".to_string()
    }

    fn ask(&self, query: &Query<'_>) -> Result<CheckerVerdict, CheckerError> {
        if query.question.trim().is_empty() {
            return Err(CheckerError::EmptyQuestion);
        }
        let text = query.text.to_lowercase();
        let question = query.question.to_lowercase();
        let verdict = match self.rules.iter().find(|r| r.matches_lower(&text, &question)) {
            Some(rule) => CheckerVerdict::new(rule.label, rule.logprob, VerdictSource::Scripted),
            None => CheckerVerdict::new(Label::False, self.false_logprob, VerdictSource::Scripted),
        };
        Ok(verdict)
    }
}
