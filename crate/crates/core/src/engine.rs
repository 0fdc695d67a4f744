//! Deterministic execution: ordered guard evaluation per action, character
//! routing (relevance, then active/passive), and trace folding with checker
//! call instrumentation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{Checker, CheckerError, Query};
use crate::model::{CharacterStateModel, GuardKind, MachineDefinition, Perspective, RuleRef, StateId};

/// One observed action and the scene it happened in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneAction {
    #[serde(rename = "scene", default)]
    pub scene_text: String,
    #[serde(rename = "action")]
    pub action_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor_hint: Option<String>,
}

impl SceneAction {
    pub fn new(scene: impl Into<String>, action: impl Into<String>) -> Self {
        SceneAction {
            scene_text: scene.into(),
            action_text: action.into(),
            actor_hint: None,
        }
    }

    pub fn action(action: impl Into<String>) -> Self {
        Self::new("", action)
    }

    pub(crate) fn query<'a>(&'a self, question: &'a str) -> Query<'a> {
        Query::new(&self.scene_text, &self.action_text, question)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Routing {
    SkippedIrrelevant,
    Active,
    Passive,
    Shared,
    /// Relevant action, but the machine's perspective did not match.
    Unrouted,
}

impl Routing {
    pub fn for_perspective(p: Perspective) -> Self {
        match p {
            Perspective::Active => Routing::Active,
            Perspective::Passive => Routing::Passive,
            Perspective::Shared => Routing::Shared,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineStep {
    pub prior: StateId,
    pub next: StateId,
    pub fired_rule: Option<RuleRef>,
    /// Question guards evaluated for this machine. Routing questions are
    /// asked once per character and counted in [`CharacterStep::routing_calls`].
    pub checker_calls: u32,
    pub routing: Routing,
}

impl EngineStep {
    fn unchanged(state: StateId, routing: Routing) -> Self {
        EngineStep {
            prior: state,
            next: state,
            fired_rule: None,
            checker_calls: 0,
            routing,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("action text must be non-empty")]
    EmptyAction,
    #[error("state {state} is not a state of machine {machine_id}")]
    UnknownState { machine_id: String, state: StateId },
    #[error("no current state for machine {0}")]
    MissingMachine(String),
    #[error("checker failed: {0}")]
    Checker(#[from] CheckerError),
}

/// Applies the transition function once.
///
/// Rules for `state` are evaluated in [`MachineDefinition::evaluation_order`];
/// the first guard that holds fires. `always` fires without a checker call,
/// `never` is skipped, and an `unknown` verdict counts as false. If nothing
/// fires the machine stays where it is.
pub fn get_next_state<C: Checker + ?Sized>(
    machine: &MachineDefinition,
    state: StateId,
    sa: &SceneAction,
    checker: &C,
) -> Result<EngineStep, EngineError> {
    if state.0 >= machine.state_count() {
        return Err(EngineError::UnknownState {
            machine_id: machine.machine_id.clone(),
            state,
        });
    }
    if sa.action_text.trim().is_empty() {
        return Err(EngineError::EmptyAction);
    }
    let mut step = EngineStep::unchanged(state, Routing::for_perspective(machine.perspective));
    for r in machine.evaluation_order(state) {
        let guard = &machine.rule(r).guard;
        let fires = match guard.kind {
            GuardKind::Always => true,
            GuardKind::Never => false,
            GuardKind::Question | GuardKind::DefaultTarget => {
                let question = guard.question.as_deref().unwrap_or_default();
                step.checker_calls += 1;
                checker.ask(&sa.query(question))?.is_true()
            }
        };
        if fires {
            step.next = guard.target;
            step.fired_rule = Some(r);
            break;
        }
    }
    Ok(step)
}

/// Character-level routing decision for one action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteDecision {
    Irrelevant,
    Active,
    Passive,
}

impl RouteDecision {
    pub fn runs(self, p: Perspective) -> bool {
        match self {
            RouteDecision::Irrelevant => false,
            RouteDecision::Active => p != Perspective::Passive,
            RouteDecision::Passive => p != Perspective::Active,
        }
    }

    pub fn routing_for(self, p: Perspective) -> Routing {
        match self {
            RouteDecision::Irrelevant => Routing::SkippedIrrelevant,
            _ if self.runs(p) => Routing::for_perspective(p),
            _ => Routing::Unrouted,
        }
    }
}

/// Asks the relevance question and, if relevant, the activity question.
/// Returns the decision and the number of checker calls made.
pub fn route<C: Checker + ?Sized>(
    model: &CharacterStateModel,
    sa: &SceneAction,
    checker: &C,
) -> Result<(RouteDecision, u32), EngineError> {
    if sa.action_text.trim().is_empty() {
        return Err(EngineError::EmptyAction);
    }
    if !checker.ask(&sa.query(&model.relevance_question))?.is_true() {
        return Ok((RouteDecision::Irrelevant, 1));
    }
    let active = checker.ask(&sa.query(&model.activity_question))?.is_true();
    let decision = if active {
        RouteDecision::Active
    } else {
        RouteDecision::Passive
    };
    Ok((decision, 2))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharacterStep {
    pub decision: RouteDecision,
    pub routing_calls: u32,
    /// One entry per machine, in model declaration order.
    pub steps: Vec<(String, EngineStep)>,
}

impl CharacterStep {
    pub fn total_calls(&self) -> u32 {
        self.routing_calls + self.steps.iter().map(|(_, s)| s.checker_calls).sum::<u32>()
    }

    pub fn step(&self, machine_id: &str) -> Option<&EngineStep> {
        self.steps.iter().find(|(id, _)| id == machine_id).map(|(_, s)| s)
    }

    pub fn next_states(&self) -> HashMap<String, StateId> {
        self.steps.iter().map(|(id, s)| (id.clone(), s.next)).collect()
    }
}

/// Initial per-machine state map: every machine at its initial state.
pub fn initial_states(model: &CharacterStateModel) -> HashMap<String, StateId> {
    model
        .machines
        .iter()
        .map(|m| (m.machine_id.clone(), m.initial))
        .collect()
}

pub fn step_character<C: Checker + ?Sized>(
    model: &CharacterStateModel,
    current: &HashMap<String, StateId>,
    sa: &SceneAction,
    checker: &C,
) -> Result<CharacterStep, EngineError> {
    let states = model
        .machines
        .iter()
        .map(|m| {
            current
                .get(&m.machine_id)
                .copied()
                .ok_or_else(|| EngineError::MissingMachine(m.machine_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (decision, routing_calls) = route(model, sa, checker)?;
    let mut steps = Vec::with_capacity(model.machines.len());
    for (m, state) in model.machines.iter().zip(states) {
        let step = if decision.runs(m.perspective) {
            get_next_state(m, state, sa, checker)?
        } else {
            EngineStep::unchanged(state, decision.routing_for(m.perspective))
        };
        steps.push((m.machine_id.clone(), step));
    }
    Ok(CharacterStep {
        decision,
        routing_calls,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub initial: StateId,
    pub terminal: StateId,
    pub steps: Vec<EngineStep>,
}

impl TraceRecord {
    pub fn total_calls(&self) -> u64 {
        self.steps.iter().map(|s| s.checker_calls as u64).sum()
    }

    pub fn states(&self) -> Vec<StateId> {
        std::iter::once(self.initial)
            .chain(self.steps.iter().map(|s| s.next))
            .collect()
    }

    /// Line-delimited output records, one per step.
    pub fn step_lines(&self, machine: &MachineDefinition, actions: &[SceneAction]) -> Vec<StepLine> {
        self.steps
            .iter()
            .zip(actions)
            .enumerate()
            .map(|(t, (s, a))| StepLine::new(t, machine, a, s))
            .collect()
    }
}

/// Per-step trace output record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLine {
    pub t: usize,
    pub action: String,
    pub scene: String,
    pub prior: String,
    pub next: String,
    pub rule: Option<String>,
    pub calls: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub machine: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist: Option<Vec<f64>>,
}

impl StepLine {
    pub fn new(t: usize, machine: &MachineDefinition, a: &SceneAction, s: &EngineStep) -> Self {
        StepLine {
            t,
            action: a.action_text.clone(),
            scene: a.scene_text.clone(),
            prior: machine.state_name(s.prior).to_string(),
            next: machine.state_name(s.next).to_string(),
            rule: s.fired_rule.map(|r| machine.describe_rule(r)),
            calls: s.checker_calls,
            machine: None,
            dist: None,
        }
    }
}

#[derive(Debug, Error)]
#[error("trace aborted at step {}: {error}", .partial.steps.len())]
pub struct TraceError {
    pub error: EngineError,
    /// Steps completed before the failure.
    pub partial: TraceRecord,
}

/// Folds [`get_next_state`] over `actions`.
pub fn run_trace<C: Checker + ?Sized>(
    machine: &MachineDefinition,
    initial: StateId,
    actions: &[SceneAction],
    checker: &C,
) -> Result<TraceRecord, Box<TraceError>> {
    let mut record = TraceRecord {
        initial,
        terminal: initial,
        steps: Vec::with_capacity(actions.len()),
    };
    for sa in actions {
        match get_next_state(machine, record.terminal, sa, checker) {
            Ok(step) => {
                record.terminal = step.next;
                record.steps.push(step);
            }
            Err(error) => {
                return Err(Box::new(TraceError {
                    error,
                    partial: record,
                }))
            }
        }
    }
    Ok(record)
}
