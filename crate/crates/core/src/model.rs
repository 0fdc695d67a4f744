//! Machine schema: states, prioritized guarded rules, character models.
//!
//! A [`MachineDefinition`] is the codified form of a character FSM. States are
//! ordered; index 0 is always `Unactivated` (also the initial state) and the
//! last index is always `Other`. Rules are kept exactly as authored, including
//! wildcard-source rules, so that serialization round-trips. The evaluation
//! order the engine uses is derived on demand by [`MachineDefinition::evaluation_order`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const UNACTIVATED: &str = "Unactivated";
pub const OTHER: &str = "Other";
pub const WILDCARD: &str = "*";

/// Zero-based index of a state inside its machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateId(pub usize);

impl StateId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Behavioral dimension a machine models. The vocabulary is open.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dimension {
    Identity,
    Personality,
    Ability,
    Other(String),
}

impl Dimension {
    pub fn as_str(&self) -> &str {
        match self {
            Dimension::Identity => "identity",
            Dimension::Personality => "personality",
            Dimension::Ability => "ability",
            Dimension::Other(s) => s,
        }
    }
}

impl From<&str> for Dimension {
    fn from(s: &str) -> Self {
        match s {
            "identity" => Dimension::Identity,
            "personality" => Dimension::Personality,
            "ability" => Dimension::Ability,
            other => Dimension::Other(other.to_string()),
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Dimension {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Dimension {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Dimension::from(s.as_str()))
    }
}

/// Whose actions drive the machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perspective {
    Active,
    Passive,
    Shared,
}

impl fmt::Display for Perspective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Perspective::Active => "active",
            Perspective::Passive => "passive",
            Perspective::Shared => "shared",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuardKind {
    /// Fires when the checker answers the question with `true`.
    Question,
    /// Like `Question`, but evaluated in the fallback pass after every other
    /// guard of the source, ordered by target declaration order.
    DefaultTarget,
    Always,
    Never,
}

impl GuardKind {
    pub fn needs_question(self) -> bool {
        matches!(self, GuardKind::Question | GuardKind::DefaultTarget)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardCondition {
    pub kind: GuardKind,
    pub question: Option<String>,
    pub target: StateId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleSource {
    State(StateId),
    Any,
}

impl RuleSource {
    pub fn applies_to(self, state: StateId) -> bool {
        match self {
            RuleSource::State(s) => s == state,
            RuleSource::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionRule {
    pub source: RuleSource,
    pub guard: GuardCondition,
    pub priority: i64,
}

/// Index of a rule in [`MachineDefinition::rules`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RuleRef(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineDefinition {
    pub machine_id: String,
    pub dimension: Dimension,
    pub perspective: Perspective,
    pub states: Vec<String>,
    pub rules: Vec<TransitionRule>,
    pub initial: StateId,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(SchemaError),
    #[error("schema errors: {}", join_errors(.0))]
    SchemaMany(Vec<SchemaError>),
    #[error("invalid character model: {}", join_errors(.0))]
    Invalid(Vec<Diagnostic>),
}

fn join_errors<E: fmt::Display>(errs: &[E]) -> String {
    errs.iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl ModelError {
    /// All schema violations carried by this error (empty for syntax errors).
    pub fn schema_errors(&self) -> Vec<&SchemaError> {
        match self {
            ModelError::Syntax { .. } | ModelError::Invalid(_) => Vec::new(),
            ModelError::Schema(e) => vec![e],
            ModelError::SchemaMany(v) => v.iter().collect(),
        }
    }
}

impl From<serde_json::Error> for ModelError {
    fn from(e: serde_json::Error) -> Self {
        ModelError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("machine must declare at least the two reserved states")]
    TooFewStates,
    #[error("first state must be \"{UNACTIVATED}\", found \"{0}\"")]
    MissingUnactivated(String),
    #[error("last state must be \"{OTHER}\", found \"{0}\"")]
    MissingOther(String),
    #[error("reserved state \"{0}\" may only appear in its reserved position")]
    MisplacedReserved(String),
    #[error("state name must be non-empty")]
    EmptyStateName,
    #[error("duplicate state \"{0}\"")]
    DuplicateState(String),
    #[error("reference to undeclared state \"{0}\"")]
    UnknownState(String),
    #[error("initial state must be \"{UNACTIVATED}\", found \"{0}\"")]
    BadInitial(String),
    #[error("duplicate priority {priority} for source \"{source_name}\"")]
    DuplicatePriority { source_name: String, priority: i64 },
    #[error("rule {rule} of kind {kind} requires a non-empty question")]
    MissingQuestion { rule: usize, kind: String },
    #[error("rule {rule} of kind {kind} must not carry a question")]
    UnexpectedQuestion { rule: usize, kind: String },
    #[error("state index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("\"{WILDCARD}\" is reserved for wildcard rule sources")]
    WildcardState,
}

// Wire documents. Unknown fields are rejected.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GuardDoc {
    kind: GuardKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question: Option<String>,
    target: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleDoc {
    source: String,
    priority: i64,
    guard: GuardDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MachineDoc {
    machine_id: String,
    dimension: Dimension,
    perspective: Perspective,
    states: Vec<String>,
    initial: String,
    rules: Vec<RuleDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CharacterDoc {
    character_id: String,
    relevance_question: String,
    activity_question: String,
    machines: Vec<MachineDoc>,
}

impl MachineDefinition {
    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn state_name(&self, id: StateId) -> &str {
        &self.states[id.0]
    }

    pub fn state_id(&self, name: &str) -> Option<StateId> {
        self.states.iter().position(|s| s == name).map(StateId)
    }

    pub fn unactivated(&self) -> StateId {
        StateId(0)
    }

    pub fn other(&self) -> StateId {
        StateId(self.states.len().saturating_sub(1))
    }

    pub fn rule(&self, r: RuleRef) -> &TransitionRule {
        &self.rules[r.0]
    }

    /// Human-readable reference to a rule, e.g. `small->super@0` or `*->death@0`.
    pub fn describe_rule(&self, r: RuleRef) -> String {
        let rule = self.rule(r);
        let src = match rule.source {
            RuleSource::State(s) => self.state_name(s),
            RuleSource::Any => WILDCARD,
        };
        format!(
            "{}->{}@{}",
            src,
            self.state_name(rule.guard.target),
            rule.priority
        )
    }

    /// Rules applicable to `state`, in the order the engine evaluates them:
    /// state-specific guards by priority, then wildcard guards by priority,
    /// then every `default-target` guard ordered by target declaration index
    /// (state-specific before wildcard, then priority).
    pub fn evaluation_order(&self, state: StateId) -> Vec<RuleRef> {
        let mut specific = Vec::new();
        let mut wildcard = Vec::new();
        let mut defaults = Vec::new();
        for (i, rule) in self.rules.iter().enumerate() {
            if !rule.source.applies_to(state) {
                continue;
            }
            let is_any = rule.source == RuleSource::Any;
            if rule.guard.kind == GuardKind::DefaultTarget {
                defaults.push((rule.guard.target.0, is_any, rule.priority, i));
            } else if is_any {
                wildcard.push((rule.priority, i));
            } else {
                specific.push((rule.priority, i));
            }
        }
        specific.sort_unstable();
        wildcard.sort_unstable();
        defaults.sort_unstable();
        specific
            .into_iter()
            .chain(wildcard)
            .map(|(_, i)| RuleRef(i))
            .chain(defaults.into_iter().map(|(.., i)| RuleRef(i)))
            .collect()
    }

    /// Largest number of question-bearing guards any single state can evaluate.
    pub fn max_questions_per_state(&self) -> usize {
        (0..self.states.len())
            .map(|s| {
                self.evaluation_order(StateId(s))
                    .into_iter()
                    .filter(|r| self.rule(*r).guard.kind.needs_question())
                    .count()
            })
            .max()
            .unwrap_or(0)
    }

    /// Every invariant violation, in a stable order. Empty means valid.
    pub fn check(&self) -> Vec<SchemaError> {
        let mut errs = Vec::new();
        let n = self.states.len();
        if n < 2 {
            errs.push(SchemaError::TooFewStates);
        }
        if let Some(first) = self.states.first() {
            if first != UNACTIVATED {
                errs.push(SchemaError::MissingUnactivated(first.clone()));
            }
        }
        if n >= 2 {
            let last = &self.states[n - 1];
            if last != OTHER {
                errs.push(SchemaError::MissingOther(last.clone()));
            }
        }
        let mut seen = HashSet::new();
        for (i, s) in self.states.iter().enumerate() {
            if s.is_empty() {
                errs.push(SchemaError::EmptyStateName);
            }
            if s == WILDCARD {
                errs.push(SchemaError::WildcardState);
            }
            if !seen.insert(s.as_str()) {
                errs.push(SchemaError::DuplicateState(s.clone()));
            }
            let reserved_slot = (s == UNACTIVATED && i == 0) || (s == OTHER && i + 1 == n);
            if (s == UNACTIVATED || s == OTHER) && !reserved_slot && n >= 2 {
                errs.push(SchemaError::MisplacedReserved(s.clone()));
            }
        }
        if self.initial.0 >= n {
            errs.push(SchemaError::IndexOutOfRange(self.initial.0));
        } else if self.initial.0 != 0 {
            errs.push(SchemaError::BadInitial(self.states[self.initial.0].clone()));
        }
        let mut priorities: HashMap<RuleSource, HashSet<i64>> = HashMap::new();
        for (i, rule) in self.rules.iter().enumerate() {
            if let RuleSource::State(s) = rule.source {
                if s.0 >= n {
                    errs.push(SchemaError::IndexOutOfRange(s.0));
                }
            }
            if rule.guard.target.0 >= n {
                errs.push(SchemaError::IndexOutOfRange(rule.guard.target.0));
            }
            let kind = kind_name(rule.guard.kind).to_string();
            let has_q = rule
                .guard
                .question
                .as_deref()
                .is_some_and(|q| !q.trim().is_empty());
            if rule.guard.kind.needs_question() && !has_q {
                errs.push(SchemaError::MissingQuestion { rule: i, kind });
            } else if !rule.guard.kind.needs_question() && rule.guard.question.is_some() {
                errs.push(SchemaError::UnexpectedQuestion { rule: i, kind });
            }
            if !priorities
                .entry(rule.source)
                .or_default()
                .insert(rule.priority)
            {
                let source_name = match rule.source {
                    RuleSource::Any => WILDCARD.to_string(),
                    RuleSource::State(s) => self
                        .states
                        .get(s.0)
                        .cloned()
                        .unwrap_or_else(|| s.to_string()),
                };
                errs.push(SchemaError::DuplicatePriority {
                    source_name,
                    priority: rule.priority,
                });
            }
        }
        errs
    }

    pub fn is_valid(&self) -> bool {
        self.check().is_empty()
    }

    fn from_doc(doc: MachineDoc) -> Result<Self, SchemaError> {
        let index: HashMap<&str, usize> = doc
            .states
            .iter()
            .enumerate()
            .rev()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let lookup = |name: &str| {
            index
                .get(name)
                .map(|&i| StateId(i))
                .ok_or_else(|| SchemaError::UnknownState(name.to_string()))
        };
        let initial = lookup(&doc.initial)?;
        let mut rules = Vec::with_capacity(doc.rules.len());
        for r in &doc.rules {
            let source = if r.source == WILDCARD {
                RuleSource::Any
            } else {
                RuleSource::State(lookup(&r.source)?)
            };
            rules.push(TransitionRule {
                source,
                priority: r.priority,
                guard: GuardCondition {
                    kind: r.guard.kind,
                    question: r.guard.question.clone(),
                    target: lookup(&r.guard.target)?,
                },
            });
        }
        Ok(MachineDefinition {
            machine_id: doc.machine_id,
            dimension: doc.dimension,
            perspective: doc.perspective,
            states: doc.states,
            rules,
            initial,
        })
    }

    fn to_doc(&self) -> MachineDoc {
        MachineDoc {
            machine_id: self.machine_id.clone(),
            dimension: self.dimension.clone(),
            perspective: self.perspective,
            states: self.states.clone(),
            initial: self.state_name(self.initial).to_string(),
            rules: self
                .rules
                .iter()
                .map(|r| RuleDoc {
                    source: match r.source {
                        RuleSource::Any => WILDCARD.to_string(),
                        RuleSource::State(s) => self.state_name(s).to_string(),
                    },
                    priority: r.priority,
                    guard: GuardDoc {
                        kind: r.guard.kind,
                        question: r.guard.question.clone(),
                        target: self.state_name(r.guard.target).to_string(),
                    },
                })
                .collect(),
        }
    }
}

pub(crate) fn kind_name(kind: GuardKind) -> &'static str {
    match kind {
        GuardKind::Question => "question",
        GuardKind::DefaultTarget => "default-target",
        GuardKind::Always => "always",
        GuardKind::Never => "never",
    }
}

/// Parses and fully validates a machine definition document.
pub fn parse_machine(text: &str) -> Result<MachineDefinition, ModelError> {
    let doc: MachineDoc = serde_json::from_str(text)?;
    let machine = MachineDefinition::from_doc(doc).map_err(ModelError::Schema)?;
    let mut errs = machine.check();
    match errs.len() {
        0 => Ok(machine),
        1 => Err(ModelError::Schema(errs.remove(0))),
        _ => Err(ModelError::SchemaMany(errs)),
    }
}

pub fn serialize_machine(m: &MachineDefinition) -> String {
    serde_json::to_string_pretty(&m.to_doc()).expect("machine documents always serialize")
}

/// A character with one or more machines and the two routing questions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharacterStateModel {
    pub character_id: String,
    pub machines: Vec<MachineDefinition>,
    pub relevance_question: String,
    pub activity_question: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    /// Empty for model-level diagnostics.
    pub machine_id: String,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        if self.machine_id.is_empty() {
            write!(f, "{sev}: {}", self.message)
        } else {
            write!(f, "{sev} [{}]: {}", self.machine_id, self.message)
        }
    }
}

/// Parses a character model file. Machines are resolved (state names must
/// exist) but not otherwise validated; run [`validate_model`] for that.
pub fn parse_character_model(text: &str) -> Result<CharacterStateModel, ModelError> {
    let doc: CharacterDoc = serde_json::from_str(text)?;
    let machines = doc
        .machines
        .into_iter()
        .map(MachineDefinition::from_doc)
        .collect::<Result<Vec<_>, _>>()
        .map_err(ModelError::Schema)?;
    Ok(CharacterStateModel {
        character_id: doc.character_id,
        machines,
        relevance_question: doc.relevance_question,
        activity_question: doc.activity_question,
    })
}

/// Parses a character model and rejects it if any error diagnostic remains.
pub fn load_character_model(text: &str) -> Result<CharacterStateModel, ModelError> {
    let model = parse_character_model(text)?;
    let diags: Vec<Diagnostic> = validate_model(&model)
        .into_iter()
        .filter(|d| d.severity == Severity::Error)
        .collect();
    if diags.is_empty() {
        Ok(model)
    } else {
        Err(ModelError::Invalid(diags))
    }
}

pub fn serialize_character_model(model: &CharacterStateModel) -> String {
    let doc = CharacterDoc {
        character_id: model.character_id.clone(),
        relevance_question: model.relevance_question.clone(),
        activity_question: model.activity_question.clone(),
        machines: model.machines.iter().map(|m| m.to_doc()).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("character documents always serialize")
}

pub fn validate_model(model: &CharacterStateModel) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let error = |machine_id: &str, message: String| Diagnostic {
        machine_id: machine_id.to_string(),
        severity: Severity::Error,
        message,
    };
    if model.relevance_question.trim().is_empty() {
        out.push(error("", "relevance_question must be non-empty".into()));
    }
    if model.activity_question.trim().is_empty() {
        out.push(error("", "activity_question must be non-empty".into()));
    }
    let mut ids: HashSet<&str> = HashSet::new();
    let mut slots: BTreeMap<(Dimension, Perspective), Vec<&str>> = BTreeMap::new();
    for m in &model.machines {
        if !ids.insert(&m.machine_id) {
            out.push(error(&m.machine_id, "duplicate machine_id".into()));
        }
        slots
            .entry((m.dimension.clone(), m.perspective))
            .or_default()
            .push(&m.machine_id);
        for e in m.check() {
            out.push(error(&m.machine_id, e.to_string()));
        }
    }
    for ((dim, persp), machines) in slots {
        if machines.len() > 1 {
            out.push(error(
                machines[1],
                format!(
                    "more than one {dim}/{persp} machine: {}",
                    machines.join(", ")
                ),
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"machine_id":"m","dimension":"identity","perspective":"active",
            "states":["Unactivated","Other"],"initial":"Unactivated","rules":[]}"#
    }

    #[test]
    fn smallest_legal_machine() {
        let m = parse_machine(minimal()).unwrap();
        assert_eq!(m.state_count(), 2);
        assert!(m.rules.is_empty());
        assert_eq!(m.initial, StateId(0));
    }

    #[test]
    fn dangling_target_is_named() {
        let doc = r#"{"machine_id":"m","dimension":"ability","perspective":"active",
            "states":["Unactivated","walking","Other"],"initial":"Unactivated",
            "rules":[{"source":"walking","priority":0,
                      "guard":{"kind":"question","question":"Did it jump?","target":"flying"}}]}"#;
        match parse_machine(doc) {
            Err(ModelError::Schema(SchemaError::UnknownState(s))) => assert_eq!(s, "flying"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let doc = minimal().replace("\"rules\":[]", "\"rules\":[],\"extra\":1");
        assert!(matches!(
            parse_machine(&doc),
            Err(ModelError::Syntax { .. })
        ));
    }

    #[test]
    fn syntax_error_carries_position() {
        let err = parse_machine("{\n  \"machine_id\": ,\n}").unwrap_err();
        match err {
            ModelError::Syntax { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_priority_rejected_but_wildcard_has_own_order() {
        let doc = r#"{"machine_id":"m","dimension":"identity","perspective":"active",
            "states":["Unactivated","a","Other"],"initial":"Unactivated",
            "rules":[
              {"source":"a","priority":1,"guard":{"kind":"always","target":"Other"}},
              {"source":"*","priority":1,"guard":{"kind":"never","target":"a"}}]}"#;
        assert!(parse_machine(doc).is_ok());
        let dup = doc.replace("\"source\":\"*\"", "\"source\":\"a\"");
        let err = parse_machine(&dup).unwrap_err();
        assert!(err.schema_errors().iter().any(|e| matches!(
            e,
            SchemaError::DuplicatePriority { priority: 1, .. }
        )));
    }

    #[test]
    fn reserved_states_enforced() {
        let doc = r#"{"machine_id":"m","dimension":"identity","perspective":"active",
            "states":["Unactivated","a"],"initial":"Unactivated","rules":[]}"#;
        let err = parse_machine(doc).unwrap_err();
        assert!(matches!(err, ModelError::Schema(SchemaError::MissingOther(_))));
        let doc = r#"{"machine_id":"m","dimension":"identity","perspective":"active",
            "states":["a","Other"],"initial":"a","rules":[]}"#;
        let err = parse_machine(doc).unwrap_err();
        assert!(err
            .schema_errors()
            .iter()
            .any(|e| matches!(e, SchemaError::MissingUnactivated(_))));
    }

    #[test]
    fn question_required_for_question_guards() {
        let doc = r#"{"machine_id":"m","dimension":"identity","perspective":"active",
            "states":["Unactivated","Other"],"initial":"Unactivated",
            "rules":[{"source":"Unactivated","priority":0,"guard":{"kind":"question","question":"  ","target":"Other"}}]}"#;
        let err = parse_machine(doc).unwrap_err();
        assert!(matches!(
            err,
            ModelError::Schema(SchemaError::MissingQuestion { rule: 0, .. })
        ));
    }

    #[test]
    fn wildcard_survives_round_trip() {
        let doc = r#"{"machine_id":"m","dimension":"ability","perspective":"passive",
            "states":["Unactivated","a","Other"],"initial":"Unactivated",
            "rules":[{"source":"*","priority":0,"guard":{"kind":"question","question":"Hit?","target":"Other"}}]}"#;
        let m = parse_machine(doc).unwrap();
        let text = serialize_machine(&m);
        assert!(text.contains("\"source\": \"*\""));
        assert_eq!(parse_machine(&text).unwrap(), m);
    }

    #[test]
    fn evaluation_order_puts_wildcards_then_defaults_last() {
        let doc = r#"{"machine_id":"m","dimension":"x","perspective":"shared",
            "states":["Unactivated","a","b","Other"],"initial":"Unactivated",
            "rules":[
              {"source":"*","priority":0,"guard":{"kind":"question","question":"w","target":"b"}},
              {"source":"a","priority":5,"guard":{"kind":"default-target","question":"d-other","target":"Other"}},
              {"source":"a","priority":3,"guard":{"kind":"question","question":"late","target":"b"}},
              {"source":"*","priority":1,"guard":{"kind":"default-target","question":"d-b","target":"b"}},
              {"source":"a","priority":9,"guard":{"kind":"question","question":"later","target":"Other"}},
              {"source":"b","priority":0,"guard":{"kind":"always","target":"a"}}]}"#;
        let m = parse_machine(doc).unwrap();
        let order: Vec<usize> = m
            .evaluation_order(StateId(1))
            .into_iter()
            .map(|r| r.0)
            .collect();
        assert_eq!(order, vec![2, 4, 0, 3, 1]);
        assert_eq!(m.describe_rule(RuleRef(0)), "*->b@0");
    }

    fn machine(id: &str, dim: &str, persp: &str, states: &[&str]) -> String {
        let states: Vec<String> = states.iter().map(|s| format!("\"{s}\"")).collect();
        format!(
            r#"{{"machine_id":"{id}","dimension":"{dim}","perspective":"{persp}",
                "states":[{}],"initial":"Unactivated","rules":[]}}"#,
            states.join(",")
        )
    }

    fn character(machines: &[String]) -> String {
        format!(
            r#"{{"character_id":"c","relevance_question":"Is c involved?",
                "activity_question":"Is c acting?","machines":[{}]}}"#,
            machines.join(",")
        )
    }

    #[test]
    fn valid_three_machine_model_has_no_diagnostics() {
        let text = character(&[
            machine("id", "identity", "active", &["Unactivated", "Other"]),
            machine("pe", "personality", "active", &["Unactivated", "calm", "Other"]),
            machine("ab", "ability", "passive", &["Unactivated", "Other"]),
        ]);
        let model = parse_character_model(&text).unwrap();
        assert!(validate_model(&model).is_empty());
        assert!(load_character_model(&text).is_ok());
        let again = parse_character_model(&serialize_character_model(&model)).unwrap();
        assert_eq!(again, model);
    }

    #[test]
    fn duplicate_dimension_perspective_is_one_error() {
        let text = character(&[
            machine("p1", "personality", "active", &["Unactivated", "Other"]),
            machine("p2", "personality", "active", &["Unactivated", "Other"]),
        ]);
        let diags = validate_model(&parse_character_model(&text).unwrap());
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].severity, Severity::Error);
        assert!(diags[0].message.contains("personality/active"));
    }

    #[test]
    fn missing_other_is_reported_as_diagnostic() {
        let text = character(&[machine("m", "identity", "active", &["Unactivated", "calm"])]);
        let diags = validate_model(&parse_character_model(&text).unwrap());
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].machine_id, "m");
        assert!(diags[0].message.contains("last state must be \"Other\""));
    }

    #[test]
    fn star_is_not_a_state_name() {
        let doc = minimal().replace("[\"Unactivated\",\"Other\"]", "[\"Unactivated\",\"*\",\"Other\"]");
        assert!(matches!(parse_machine(&doc), Err(ModelError::Schema(SchemaError::WildcardState))));
    }
}
