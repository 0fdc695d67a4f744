//! The binary-question primitive and its backends.
//!
//! Every guard in a machine and every cell of a transition matrix reduces to a
//! [`Checker::ask`] call: given scene text, action text and a yes/no question,
//! return a [`CheckerVerdict`] with a label and the log-probability of "true".

mod cache;
mod remote;
mod sampled;
mod scripted;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheKey, CacheStore, CachedChecker};
pub use remote::{RemoteChecker, RemoteCheckerConfig};
pub use sampled::SampledChecker;
pub use scripted::{default_false_logprob, default_true_logprob, parse_rule_file, serialize_rule_file, Pattern, ScriptedChecker, ScriptedRule};

/// Label coherence tolerance at the log 0.5 boundary.
pub const COHERENCE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    True,
    False,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::True => "true",
            Label::False => "false",
            Label::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" => Some(Label::True),
            "false" | "no" => Some(Label::False),
            "unknown" => Some(Label::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictSource {
    Scripted,
    Remote,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckerVerdict {
    pub label: Label,
    /// Natural log of P(true); always ≤ 0.
    pub true_logprob: f64,
    pub source: VerdictSource,
    /// Set when the backend's raw output could not be interpreted.
    #[serde(default)]
    pub flagged: bool,
}

impl CheckerVerdict {
    pub fn new(label: Label, true_logprob: f64, source: VerdictSource) -> Self {
        CheckerVerdict {
            label,
            true_logprob,
            source,
            flagged: false,
        }
    }

    /// `true` labels carry logprob ≥ log 0.5, `false` labels ≤ log 0.5.
    pub fn is_coherent(&self) -> bool {
        label_logprob_coherent(self.label, self.true_logprob)
    }

    /// Deterministic engines only fire on an explicit `true`.
    pub fn is_true(&self) -> bool {
        self.label == Label::True
    }
}

pub fn label_logprob_coherent(label: Label, lp: f64) -> bool {
    let half = 0.5f64.ln();
    if !(lp <= 0.0) || lp.is_nan() {
        return false;
    }
    match label {
        Label::True => lp >= half - COHERENCE_EPS,
        Label::False => lp <= half + COHERENCE_EPS,
        Label::Unknown => true,
    }
}

/// One binary-question request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query<'a> {
    pub scene: &'a str,
    /// The text under test, usually the observed action.
    pub text: &'a str,
    pub question: &'a str,
}

impl<'a> Query<'a> {
    pub fn new(scene: &'a str, text: &'a str, question: &'a str) -> Self {
        Query {
            scene,
            text,
            question,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckerError {
    #[error("question must be non-empty")]
    EmptyQuestion,
    #[error("remote checker failed after {attempts} attempt(s): {message}")]
    Remote { attempts: u32, message: String },
    #[error("checker backend error: {0}")]
    Backend(String),
}

/// A binary-question backend. Implementations must tolerate concurrent calls.
pub trait Checker: Send + Sync {
    /// Stable identifier, part of the cache key.
    fn backend_id(&self) -> String;

    fn ask(&self, query: &Query<'_>) -> Result<CheckerVerdict, CheckerError>;

    /// `binary_question(text, question)` without scene context.
    fn binary_question(&self, text: &str, question: &str) -> Result<CheckerVerdict, CheckerError> {
        self.ask(&Query::new("", text, question))
    }
}

impl<C: Checker + ?Sized> Checker for &C {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
    fn ask(&self, query: &Query<'_>) -> Result<CheckerVerdict, CheckerError> {
        (**self).ask(query)
    }
}

impl<C: Checker + ?Sized> Checker for Box<C> {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
    fn ask(&self, query: &Query<'_>) -> Result<CheckerVerdict, CheckerError> {
        (**self).ask(query)
    }
}

impl<C: Checker + ?Sized> Checker for std::sync::Arc<C> {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
    fn ask(&self, query: &Query<'_>) -> Result<CheckerVerdict, CheckerError> {
        (**self).ask(query)
    }
}

/// Wraps a checker and counts the calls that reach it.
pub struct CountingChecker<C> {
    inner: C,
    calls: AtomicU64,
}

impl<C: Checker> CountingChecker<C> {
    pub fn new(inner: C) -> Self {
        CountingChecker {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: Checker> Checker for CountingChecker<C> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn ask(&self, query: &Query<'_>) -> Result<CheckerVerdict, CheckerError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.ask(query)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coherence_boundary() {
        let half = 0.5f64.ln();
        assert!(label_logprob_coherent(Label::True, half));
        assert!(label_logprob_coherent(Label::False, half));
        assert!(!label_logprob_coherent(Label::True, 0.1f64.ln()));
        assert!(!label_logprob_coherent(Label::False, 0.9f64.ln()));
        assert!(!label_logprob_coherent(Label::Unknown, 0.1));
        assert!(!label_logprob_coherent(Label::True, f64::NAN));
    }

    #[test]
    fn label_parse_accepts_yes_no() {
        assert_eq!(Label::parse(" Yes"), Some(Label::True));
        assert_eq!(Label::parse("NO"), Some(Label::False));
        assert_eq!(Label::parse("unknown"), Some(Label::Unknown));
        assert_eq!(Label::parse("maybe"), None);
    }
}
