//! Shared generators and reference implementations for integration tests.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use cfsm_core::checker::{Checker, CheckerError, CheckerVerdict, Label, Query, ScriptedChecker, ScriptedRule, VerdictSource};
use cfsm_core::model::{
    Dimension, GuardCondition, GuardKind, MachineDefinition, Perspective, RuleSource, StateId, TransitionRule, OTHER,
    UNACTIVATED,
};
use rand::Rng;

pub const ACTIONS: usize = 5;
pub const QUESTIONS: usize = 5;

pub fn action_name(i: usize) -> String {
    format!("action {i}")
}

pub fn question_name(i: usize) -> String {
    format!("question {i}?")
}

/// A machine with at most 6 states and 8 rules, drawn uniformly-ish.
pub fn random_machine(rng: &mut impl Rng) -> MachineDefinition {
    let domain = rng.gen_range(0..=4);
    let mut states = vec![UNACTIVATED.to_string()];
    states.extend((0..domain).map(|i| format!("s{i}")));
    states.push(OTHER.to_string());
    let n = states.len();
    let mut used: HashSet<(Option<usize>, i64)> = HashSet::new();
    let mut rules = Vec::new();
    for _ in 0..rng.gen_range(0..=8) {
        let source = if rng.gen_bool(0.2) {
            RuleSource::Any
        } else {
            RuleSource::State(StateId(rng.gen_range(0..n)))
        };
        let key_source = match source {
            RuleSource::Any => None,
            RuleSource::State(s) => Some(s.0),
        };
        let priority = loop {
            let p = rng.gen_range(-5..20);
            if used.insert((key_source, p)) {
                break p;
            }
        };
        let kind = match rng.gen_range(0..20) {
            0..=9 => GuardKind::Question,
            10..=13 => GuardKind::DefaultTarget,
            14..=16 => GuardKind::Always,
            _ => GuardKind::Never,
        };
        rules.push(TransitionRule {
            source,
            priority,
            guard: GuardCondition {
                kind,
                question: kind.needs_question().then(|| question_name(rng.gen_range(0..QUESTIONS))),
                target: StateId(rng.gen_range(0..n)),
            },
        });
    }
    let dimension = match rng.gen_range(0..4) {
        0 => Dimension::Identity,
        1 => Dimension::Personality,
        2 => Dimension::Ability,
        _ => Dimension::Other("mood".into()),
    };
    let perspective = match rng.gen_range(0..3) {
        0 => Perspective::Active,
        1 => Perspective::Passive,
        _ => Perspective::Shared,
    };
    MachineDefinition {
        machine_id: format!("m{}", rng.gen_range(0..1000)),
        dimension,
        perspective,
        states,
        rules,
        initial: StateId(0),
    }
}

/// Random (action, question) → label table.
pub fn random_truth(rng: &mut impl Rng) -> HashMap<(String, String), Label> {
    let mut t = HashMap::new();
    for a in 0..ACTIONS {
        for q in 0..QUESTIONS {
            let label = match rng.gen_range(0..3) {
                0 => Label::True,
                1 => Label::False,
                _ => Label::Unknown,
            };
            t.insert((action_name(a), question_name(q)), label);
        }
    }
    t
}

pub fn scripted_from_truth(truth: &HashMap<(String, String), Label>) -> ScriptedChecker {
    let mut keys: Vec<_> = truth.keys().collect();
    keys.sort();
    let rules = keys
        .into_iter()
        .map(|(a, q)| {
            let label = truth[&(a.clone(), q.clone())];
            let lp = match label {
                Label::True => 0.9f64.ln(),
                Label::False => 0.1f64.ln(),
                Label::Unknown => 0.5f64.ln(),
            };
            ScriptedRule::new(Some(&format!("^{a}$")), Some(&format!("^{q}$")), label, lp).unwrap()
        })
        .collect();
    ScriptedChecker::new(rules)
}

/// Straight-line reference interpreter. Per step: specific non-default
/// rules by priority, then wildcard non-default rules by priority, then
/// default-target rules by (target, specific before wildcard, priority); the
/// first guard that holds fires, otherwise the state is kept.
pub fn simulate(
    m: &MachineDefinition,
    truth: &HashMap<(String, String), Label>,
    start: usize,
    actions: &[String],
) -> usize {
    let mut s = start;
    for a in actions {
        let mut specific = Vec::new();
        let mut wildcard = Vec::new();
        let mut defaults = Vec::new();
        for (i, r) in m.rules.iter().enumerate() {
            let is_any = match r.source {
                RuleSource::Any => true,
                RuleSource::State(x) if x.0 == s => false,
                RuleSource::State(_) => continue,
            };
            if r.guard.kind == GuardKind::DefaultTarget {
                defaults.push((r.guard.target.0, is_any, r.priority, i));
            } else if is_any {
                wildcard.push((r.priority, i));
            } else {
                specific.push((r.priority, i));
            }
        }
        specific.sort();
        wildcard.sort();
        defaults.sort();
        let order = specific
            .iter()
            .map(|x| x.1)
            .chain(wildcard.iter().map(|x| x.1))
            .chain(defaults.iter().map(|x| x.3));
        for i in order {
            let g = &m.rules[i].guard;
            let fires = match g.kind {
                GuardKind::Always => true,
                GuardKind::Never => false,
                GuardKind::Question | GuardKind::DefaultTarget => {
                    truth[&(a.clone(), g.question.clone().unwrap())] == Label::True
                }
            };
            if fires {
                s = g.target.0;
                break;
            }
        }
    }
    s
}

/// Answers from a nested lookup table; anything absent is `false`.
pub struct TableOracle {
    pub answers: HashMap<String, HashMap<String, bool>>,
    pub true_logprob: f64,
    pub false_logprob: f64,
}

impl Checker for TableOracle {
    fn backend_id(&self) -> String {
        "table-oracle".into()
    }

    fn ask(&self, q: &Query<'_>) -> Result<CheckerVerdict, CheckerError> {
        let yes = self
            .answers
            .get(q.text)
            .and_then(|m| m.get(q.question))
            .copied()
            .unwrap_or(false);
        Ok(if yes {
            CheckerVerdict::new(Label::True, self.true_logprob, VerdictSource::Scripted)
        } else {
            CheckerVerdict::new(Label::False, self.false_logprob, VerdictSource::Scripted)
        })
    }
}
