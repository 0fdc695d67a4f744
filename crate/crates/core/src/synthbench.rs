//! Synthetic ground-truth machines, random-policy path pools, balanced
//! terminal-state sampling and predictor evaluation.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{Checker, Label, ScriptedChecker, ScriptedRule};
use crate::client::{ChatClient, ChatMessage, ChatRequest};
use crate::engine::{run_trace, SceneAction};
use crate::model::{
    Dimension, GuardCondition, GuardKind, MachineDefinition, Perspective, RuleSource, StateId,
    TransitionRule, OTHER, UNACTIVATED,
};
pub use crate::pfsm::move_question;
use crate::pfsm::QuestionBank;

pub const BENCHMARKS: [&str; 3] = ["mario", "cod-enemy", "westeros"];
pub const RULES_TEMPLATE_VERSION: &str = "rules-v1";
/// Extra pool-sized batches drawn when topping up under-filled terminals.
pub const MAX_TOPUP_BATCHES: u64 = 32;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown benchmark \"{0}\" (expected one of mario, cod-enemy, westeros)")]
    UnknownBenchmark(String),
    #[error("unknown state \"{0}\"")]
    UnknownState(String),
    #[error("unknown action \"{0}\"")]
    UnknownAction(String),
    #[error("malformed table: {0}")]
    Table(String),
    #[error("pool line {line}: {message}")]
    Pool { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthTable {
    pub name: String,
    pub states: Vec<String>,
    pub actions: Vec<String>,
    /// `next[state][action]`.
    pub next: Vec<Vec<usize>>,
    pub initial: usize,
    pub absorbing: Vec<usize>,
}

impl GroundTruthTable {
    /// Builds a table from explicit moves; unlisted cells are self-loops.
    pub fn from_moves(
        name: &str,
        states: &[&str],
        actions: &[&str],
        initial: &str,
        absorbing: &[&str],
        moves: &[(&str, &str, &str)],
    ) -> Result<Self, SynthError> {
        let sidx = |s: &str| {
            states
                .iter()
                .position(|x| *x == s)
                .ok_or_else(|| SynthError::UnknownState(s.to_string()))
        };
        let aidx = |a: &str| {
            actions
                .iter()
                .position(|x| *x == a)
                .ok_or_else(|| SynthError::UnknownAction(a.to_string()))
        };
        let mut next: Vec<Vec<Option<usize>>> = vec![vec![None; actions.len()]; states.len()];
        for &(from, action, to) in moves {
            let (f, a, t) = (sidx(from)?, aidx(action)?, sidx(to)?);
            match next[f][a] {
                Some(prev) if prev != t => {
                    return Err(SynthError::Table(format!(
                        "conflicting moves for ({from}, {action}): {} vs {to}",
                        states[prev]
                    )))
                }
                _ => next[f][a] = Some(t),
            }
        }
        let table = GroundTruthTable {
            name: name.to_string(),
            states: states.iter().map(|s| s.to_string()).collect(),
            actions: actions.iter().map(|s| s.to_string()).collect(),
            next: next
                .into_iter()
                .enumerate()
                .map(|(s, row)| row.into_iter().map(|c| c.unwrap_or(s)).collect())
                .collect(),
            initial: sidx(initial)?,
            absorbing: absorbing.iter().map(|s| sidx(s)).collect::<Result<_, _>>()?,
        };
        table.check()?;
        Ok(table)
    }

    /// Totality and absorbing-state closure.
    pub fn check(&self) -> Result<(), SynthError> {
        let n = self.states.len();
        if n == 0 || self.actions.is_empty() {
            return Err(SynthError::Table("empty table".into()));
        }
        if self.next.len() != n
            || self
                .next
                .iter()
                .any(|row| row.len() != self.actions.len() || row.iter().any(|&t| t >= n))
        {
            return Err(SynthError::Table("transition map is not total".into()));
        }
        for &s in &self.absorbing {
            if self.next[s].iter().any(|&t| t != s) {
                return Err(SynthError::Table(format!(
                    "absorbing state {} has an exit",
                    self.states[s]
                )));
            }
        }
        if self.initial >= n {
            return Err(SynthError::Table("initial out of range".into()));
        }
        Ok(())
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a == name)
    }

    pub fn step(&self, state: usize, action: usize) -> usize {
        self.next[state][action]
    }

    pub fn walk(&self, initial: usize, actions: &[usize]) -> usize {
        actions.iter().fold(initial, |s, &a| self.step(s, a))
    }

    /// Walks named actions; unknown names are an error.
    pub fn walk_named(&self, initial: &str, actions: &[String]) -> Result<String, SynthError> {
        let mut s = self
            .state_index(initial)
            .ok_or_else(|| SynthError::UnknownState(initial.to_string()))?;
        for a in actions {
            let a = self
                .action_index(a)
                .ok_or_else(|| SynthError::UnknownAction(a.clone()))?;
            s = self.step(s, a);
        }
        Ok(self.states[s].clone())
    }

    /// States reachable in exactly `length` steps from `initial`.
    pub fn reachable_at(&self, initial: usize, length: usize) -> BTreeSet<usize> {
        let mut frontier = BTreeSet::from([initial]);
        for _ in 0..length {
            frontier = frontier
                .iter()
                .flat_map(|&s| self.next[s].iter().copied())
                .collect();
        }
        frontier
    }

    pub fn with_initial(mut self, initial: &str) -> Result<Self, SynthError> {
        self.initial = self
            .state_index(initial)
            .ok_or_else(|| SynthError::UnknownState(initial.to_string()))?;
        Ok(self)
    }
}

pub fn builtin_table(name: &str) -> Result<GroundTruthTable, SynthError> {
    match name {
        "mario" => Ok(mario()),
        "cod-enemy" => Ok(cod_enemy()),
        "westeros" => Ok(westeros()),
        other => Err(SynthError::UnknownBenchmark(other.to_string())),
    }
}

fn mario() -> GroundTruthTable {
    const M: &str = "get a super mushroom";
    const F: &str = "get a fire flower";
    const G: &str = "hit by a goomba";
    GroundTruthTable::from_moves(
        "mario",
        &["small", "super", "fire", "miss"],
        &[M, F, G],
        "small",
        &["miss"],
        &[
            ("small", M, "super"),
            ("small", F, "super"),
            ("small", G, "miss"),
            ("super", F, "fire"),
            ("super", G, "small"),
            ("fire", G, "small"),
        ],
    )
    .expect("builtin mario table")
}

fn cod_enemy() -> GroundTruthTable {
    const NOISE: &str = "make noise";
    const REVEAL: &str = "reveal position";
    const FIRE: &str = "sustained fire";
    const KILL: &str = "direct elimination";
    const HIDE: &str = "stay hidden";
    let mut moves = vec![
        ("idle", NOISE, "alert"),
        ("idle", REVEAL, "engaged"),
        ("idle", FIRE, "engaged"),
        ("alert", REVEAL, "engaged"),
        ("alert", FIRE, "engaged"),
        ("alert", HIDE, "idle"),
        ("engaged", FIRE, "retreat"),
        ("engaged", HIDE, "alert"),
        ("retreat", REVEAL, "engaged"),
        ("retreat", HIDE, "alert"),
    ];
    for s in ["idle", "alert", "engaged", "retreat"] {
        moves.push((s, KILL, "death"));
    }
    GroundTruthTable::from_moves(
        "cod-enemy",
        &["idle", "alert", "engaged", "retreat", "death"],
        &[NOISE, REVEAL, FIRE, KILL, HIDE],
        "idle",
        &["death"],
        &moves,
    )
    .expect("builtin cod-enemy table")
}

const DIRECTIONS: [&str; 8] = [
    "north",
    "northeast",
    "east",
    "southeast",
    "south",
    "southwest",
    "west",
    "northwest",
];

fn opposite(dir: &str) -> &'static str {
    let i = DIRECTIONS.iter().position(|d| *d == dir).expect("direction");
    DIRECTIONS[(i + 4) % 8]
}

fn westeros() -> GroundTruthTable {
    let edges: [(&str, &str, &str); 16] = [
        ("the north", "south", "the riverlands"),
        ("the north", "southeast", "the vale"),
        ("the north", "southwest", "the iron islands"),
        ("the iron islands", "east", "the riverlands"),
        ("the iron islands", "southeast", "the westerlands"),
        ("the westerlands", "northeast", "the riverlands"),
        ("the westerlands", "southeast", "the reach"),
        ("the riverlands", "east", "the vale"),
        ("the riverlands", "southeast", "the crownlands"),
        ("the riverlands", "south", "the reach"),
        ("the vale", "south", "the crownlands"),
        ("the crownlands", "south", "the stormlands"),
        ("the crownlands", "west", "the reach"),
        ("the reach", "southeast", "the stormlands"),
        ("the reach", "south", "dorne"),
        ("the stormlands", "southwest", "dorne"),
    ];
    let actions: Vec<String> = DIRECTIONS.iter().map(|d| format!("travel {d}")).collect();
    let mut moves = Vec::new();
    for (a, d, b) in edges {
        moves.push((a, d, b));
        moves.push((b, opposite(d), a));
    }
    let moves: Vec<(&str, String, &str)> = moves
        .into_iter()
        .map(|(a, d, b)| (a, format!("travel {d}"), b))
        .collect();
    let moves: Vec<(&str, &str, &str)> = moves.iter().map(|(a, d, b)| (*a, d.as_str(), *b)).collect();
    let action_refs: Vec<&str> = actions.iter().map(String::as_str).collect();
    GroundTruthTable::from_moves(
        "westeros",
        &[
            "the north",
            "the iron islands",
            "the riverlands",
            "the vale",
            "the westerlands",
            "the crownlands",
            "the reach",
            "the stormlands",
            "dorne",
        ],
        &action_refs,
        "the westerlands",
        &[],
        &moves,
    )
    .expect("builtin westeros table")
}

/// Binary question a codified machine asks for one action.
pub fn action_question(action: &str) -> String {
    format!("Does the action describe \"{action}\"?")
}


fn machine_states(table: &GroundTruthTable) -> Vec<String> {
    std::iter::once(UNACTIVATED.to_string())
        .chain(table.states.iter().cloned())
        .chain(std::iter::once(OTHER.to_string()))
        .collect()
}

/// Codifies a table as a deterministic machine.
///
/// States are `[Unactivated, table states..., Other]`, so table state `s` is
/// `StateId(s + 1)`. An action that leads to the same state from every
/// non-absorbing source becomes one wildcard rule; every other effective
/// (state, action) cell becomes a question rule. Self-loops need no rule.
pub fn to_machine(table: &GroundTruthTable) -> MachineDefinition {
    let n = table.states.len();
    let global: Vec<Option<usize>> = (0..table.actions.len())
        .map(|a| {
            let movers: Vec<usize> = (0..n).filter(|s| !table.absorbing.contains(s)).collect();
            let target = table.next[*movers.first()?][a];
            let all_same = movers.iter().all(|&s| table.next[s][a] == target);
            let absorbing_ok = table.absorbing.iter().all(|&s| s == target);
            (all_same && absorbing_ok && movers.iter().any(|&s| s != target)).then_some(target)
        })
        .collect();
    let mut rules = Vec::new();
    for s in 0..n {
        for (a, action) in table.actions.iter().enumerate() {
            let t = table.next[s][a];
            if t == s || global[a].is_some() {
                continue;
            }
            rules.push(question_rule(RuleSource::State(StateId(s + 1)), action, t, a));
        }
    }
    for (a, target) in global.iter().enumerate() {
        if let Some(t) = target {
            rules.push(question_rule(RuleSource::Any, &table.actions[a], *t, a));
        }
    }
    MachineDefinition {
        machine_id: table.name.clone(),
        dimension: Dimension::Other("state".into()),
        perspective: Perspective::Shared,
        states: machine_states(table),
        rules,
        initial: StateId(0),
    }
}

fn question_rule(source: RuleSource, action: &str, target: usize, priority: usize) -> TransitionRule {
    TransitionRule {
        source,
        guard: GuardCondition {
            kind: GuardKind::Question,
            question: Some(action_question(action)),
            target: StateId(target + 1),
        },
        priority: priority as i64,
    }
}

/// Scripted oracle that answers both [`action_question`] and
/// [`move_question`] exactly as the table would.
pub fn scripted_rules(table: &GroundTruthTable, true_logprob: f64) -> Vec<ScriptedRule> {
    let mut rules = Vec::new();
    for (a, action) in table.actions.iter().enumerate() {
        let anchored = format!("^{action}$");
        rules.push(
            ScriptedRule::new(Some(&anchored), Some(&format!("describe \"{action}\"")), Label::True, true_logprob)
                .expect("valid rule"),
        );
        for (s, from) in table.states.iter().enumerate() {
            let to = &table.states[table.next[s][a]];
            let q = format!("from \"{from}\" to \"{to}\"");
            rules.push(ScriptedRule::new(Some(&anchored), Some(&q), Label::True, true_logprob).expect("valid rule"));
        }
    }
    rules
}

pub fn scripted_oracle(table: &GroundTruthTable) -> ScriptedChecker {
    ScriptedChecker::new(scripted_rules(table, crate::checker::default_true_logprob()))
}

/// Oracle with sharp logits (log 0.99 / log 0.01), for the probabilistic engine.
pub fn sharp_oracle(table: &GroundTruthTable) -> ScriptedChecker {
    ScriptedChecker::new(scripted_rules(table, 0.99f64.ln())).with_false_logprob(0.01f64.ln())
}

/// Grid bank over the machine's states, one [`move_question`] per cell.
pub fn grid_bank(table: &GroundTruthTable) -> QuestionBank {
    let states = machine_states(table);
    QuestionBank::grid(
        states
            .iter()
            .map(|to| states.iter().map(|from| move_question(from, to)).collect())
            .collect(),
    )
}

/// Fixed textual rendering of a table for text-based predictors.
pub fn render_rules(table: &GroundTruthTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {RULES_TEMPLATE_VERSION}");
    let _ = writeln!(out, "machine: {}", table.name);
    let _ = writeln!(out, "states: {}", table.states.join(", "));
    let _ = writeln!(out, "actions: {}", table.actions.join(", "));
    let _ = writeln!(out, "transitions:");
    for (s, from) in table.states.iter().enumerate() {
        for (a, action) in table.actions.iter().enumerate() {
            let _ = writeln!(out, "{from} + {action} -> {}", table.states[table.next[s][a]]);
        }
    }
    out
}

/// One generated path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathRecord {
    pub initial: String,
    pub actions: Vec<String>,
    pub terminal: String,
}

impl PathRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn scene_actions(&self) -> Vec<SceneAction> {
        self.actions.iter().map(SceneAction::action).collect()
    }
}

pub fn write_pool(pool: &[PathRecord]) -> String {
    let mut out = String::new();
    for p in pool {
        out.push_str(&serde_json::to_string(p).expect("paths serialize"));
        out.push('\n');
    }
    out
}

pub fn read_pool(text: &str) -> Result<Vec<PathRecord>, SynthError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SynthError::Pool {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub fsm: String,
    pub pool_size: usize,
    pub per_terminal: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub seed: u64,
    pub initial: Option<String>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            fsm: "mario".into(),
            pool_size: 10_000,
            per_terminal: 100,
            min_length: 1,
            max_length: 10,
            seed: 0,
            initial: None,
        }
    }
}

impl BenchmarkConfig {
    pub fn table(&self) -> Result<GroundTruthTable, SynthError> {
        let t = builtin_table(&self.fsm)?;
        match &self.initial {
            Some(s) => t.with_initial(s),
            None => Ok(t),
        }
    }

    pub fn lengths(&self) -> std::ops::RangeInclusive<usize> {
        self.min_length..=self.max_length
    }
}

/// Per-trace RNG: the master seed with a stream derived from
/// (length, batch, index), so any trace can be regenerated on its own.
pub fn trace_rng(seed: u64, length: usize, batch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((length as u64) << 48) | (batch << 32) | (index & 0xffff_ffff));
    rng
}

fn sampling_rng(seed: u64, length: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | length as u64);
    rng
}

fn random_path(table: &GroundTruthTable, length: usize, rng: &mut impl Rng) -> PathRecord {
    let actions: Vec<usize> = (0..length).map(|_| rng.gen_range(0..table.actions.len())).collect();
    PathRecord {
        initial: table.states[table.initial].clone(),
        terminal: table.states[table.walk(table.initial, &actions)].clone(),
        actions: actions.into_iter().map(|a| table.actions[a].clone()).collect(),
    }
}

fn generate_batch(table: &GroundTruthTable, count: usize, length: usize, seed: u64, batch: u64) -> Vec<PathRecord> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| random_path(table, length, &mut trace_rng(seed, length, batch, i)))
        .collect()
}

/// `pool_size` uniformly random paths of the given length.
pub fn generate_pool(table: &GroundTruthTable, cfg: &BenchmarkConfig, length: usize) -> Vec<PathRecord> {
    generate_batch(table, cfg.pool_size, length, cfg.seed, 0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminalCount {
    pub state: String,
    pub reachable: bool,
    pub sampled: usize,
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedSample {
    pub length: usize,
    pub traces: Vec<PathRecord>,
    /// One entry per table state, in table order.
    pub report: Vec<TerminalCount>,
}

impl BalancedSample {
    pub fn shortfalls(&self) -> impl Iterator<Item = &TerminalCount> {
        self.report.iter().filter(|c| c.shortfall > 0)
    }
}

/// Up to `per_terminal` paths per terminal state, without replacement.
/// Terminals reachable at this length but under-represented in the pool are
/// topped up from extra batches; whatever is still missing is reported.
pub fn balanced_sample(
    table: &GroundTruthTable,
    pool: &[PathRecord],
    cfg: &BenchmarkConfig,
    length: usize,
) -> BalancedSample {
    let reachable = table.reachable_at(table.initial, length);
    let mut groups: HashMap<&str, Vec<PathRecord>> = HashMap::new();
    for p in pool {
        groups.entry(p.terminal.as_str()).or_default().push(p.clone());
    }
    let deficit = |groups: &HashMap<&str, Vec<PathRecord>>| {
        reachable
            .iter()
            .any(|&s| groups.get(table.states[s].as_str()).map_or(0, Vec::len) < cfg.per_terminal)
    };
    let mut batch = 1;
    while cfg.per_terminal > 0 && cfg.pool_size > 0 && batch <= MAX_TOPUP_BATCHES && deficit(&groups) {
        for p in generate_batch(table, cfg.pool_size, length, cfg.seed, batch) {
            let state = table.state_index(&p.terminal).expect("own state");
            let g = groups.entry(table.states[state].as_str()).or_default();
            if g.len() < cfg.per_terminal {
                g.push(p);
            }
        }
        batch += 1;
    }
    let mut rng = sampling_rng(cfg.seed, length);
    let mut traces = Vec::new();
    let mut report = Vec::with_capacity(table.states.len());
    for (s, name) in table.states.iter().enumerate() {
        let available = groups.get(name.as_str()).map_or(&[][..], Vec::as_slice);
        let picked: Vec<PathRecord> = available
            .choose_multiple(&mut rng, cfg.per_terminal.min(available.len()))
            .cloned()
            .collect();
        report.push(TerminalCount {
            state: name.clone(),
            reachable: reachable.contains(&s),
            sampled: picked.len(),
            shortfall: cfg.per_terminal - picked.len(),
        });
        traces.extend(picked);
    }
    BalancedSample {
        length,
        traces,
        report,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("predictor failed: {0}")]
pub struct PredictorError(pub String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub state: String,
    /// Model forward passes (checker or LLM calls), when instrumented.
    pub forwards: Option<u64>,
}

/// Predicts the terminal state of a path from its rules and actions.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, rules: &str, initial: &str, actions: &[String]) -> Result<Prediction, PredictorError>;
}

/// Walks the ground-truth table itself.
pub struct TablePredictor(pub GroundTruthTable);

impl Predictor for TablePredictor {
    fn name(&self) -> String {
        "table".into()
    }

    fn predict(&self, _: &str, initial: &str, actions: &[String]) -> Result<Prediction, PredictorError> {
        let state = self
            .0
            .walk_named(initial, actions)
            .map_err(|e| PredictorError(e.to_string()))?;
        Ok(Prediction { state, forwards: None })
    }
}

pub struct ConstantPredictor(pub String);

impl Predictor for ConstantPredictor {
    fn name(&self) -> String {
        format!("constant:{}", self.0)
    }

    fn predict(&self, _: &str, _: &str, _: &[String]) -> Result<Prediction, PredictorError> {
        Ok(Prediction {
            state: self.0.clone(),
            forwards: None,
        })
    }
}

/// Runs the deterministic engine over a codified machine.
pub struct CfsmPredictor<C> {
    pub machine: MachineDefinition,
    pub checker: C,
}

impl CfsmPredictor<ScriptedChecker> {
    pub fn scripted(table: &GroundTruthTable) -> Self {
        CfsmPredictor {
            machine: to_machine(table),
            checker: scripted_oracle(table),
        }
    }
}

impl<C: Checker> Predictor for CfsmPredictor<C> {
    fn name(&self) -> String {
        "cfsm".into()
    }

    fn predict(&self, _: &str, initial: &str, actions: &[String]) -> Result<Prediction, PredictorError> {
        let start = self
            .machine
            .state_id(initial)
            .ok_or_else(|| PredictorError(format!("unknown initial state \"{initial}\"")))?;
        let actions: Vec<SceneAction> = actions.iter().map(SceneAction::action).collect();
        let trace = run_trace(&self.machine, start, &actions, &self.checker)
            .map_err(|e| PredictorError(e.to_string()))?;
        Ok(Prediction {
            state: self.machine.state_name(trace.terminal).to_string(),
            forwards: Some(trace.total_calls()),
        })
    }
}

/// Asks a chat model for the final state in one call.
pub struct RemotePredictor<C> {
    pub client: C,
    pub states: Vec<String>,
}

impl<C: ChatClient> Predictor for RemotePredictor<C> {
    fn name(&self) -> String {
        format!("remote:{}", self.client.model_name())
    }

    fn predict(&self, rules: &str, initial: &str, actions: &[String]) -> Result<Prediction, PredictorError> {
        let prompt = format!(
            "{rules}\nStarting state: {initial}\nActions, in order:\n{}\n\
             Apply the transitions and answer with the final state name only.",
            actions
                .iter()
                .enumerate()
                .map(|(i, a)| format!("{}. {a}", i + 1))
                .collect::<Vec<_>>()
                .join("\n")
        );
        let reply = self
            .client
            .complete(&ChatRequest::new(vec![ChatMessage::user(prompt)]))
            .map_err(|e| PredictorError(e.to_string()))?;
        let answer = reply.content.trim().trim_end_matches('.').to_lowercase();
        let state = self
            .states
            .iter()
            .filter(|s| answer == s.to_lowercase() || answer.ends_with(&s.to_lowercase()))
            .max_by_key(|s| s.len())
            .cloned()
            .ok_or_else(|| PredictorError(format!("unrecognised answer {:?}", reply.content)))?;
        Ok(Prediction {
            state,
            forwards: Some(1),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateScore {
    pub state: String,
    pub count: usize,
    pub correct: usize,
    /// `None` when no sampled path ends in this state.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub fsm: String,
    pub length: usize,
    pub predictor: String,
    pub per_state: Vec<StateScore>,
    pub overall_accuracy: f64,
    pub forwards_per_trace: Option<f64>,
    pub max_forwards: Option<u64>,
    pub errors: usize,
}

pub fn evaluate_predictor<P: Predictor + ?Sized>(
    sample: &BalancedSample,
    table: &GroundTruthTable,
    predictor: &P,
) -> EvalResult {
    let rules = render_rules(table);
    let outcomes: Vec<Result<Prediction, PredictorError>> = sample
        .traces
        .par_iter()
        .map(|p| predictor.predict(&rules, &p.initial, &p.actions))
        .collect();
    let mut per_state: Vec<StateScore> = table
        .states
        .iter()
        .map(|s| StateScore {
            state: s.clone(),
            count: 0,
            correct: 0,
            accuracy: None,
        })
        .collect();
    let (mut correct, mut errors) = (0, 0);
    let mut forwards = Vec::new();
    for (path, outcome) in sample.traces.iter().zip(&outcomes) {
        let score = &mut per_state[table.state_index(&path.terminal).expect("sampled state")];
        score.count += 1;
        match outcome {
            Ok(pred) => {
                if pred.state == path.terminal {
                    score.correct += 1;
                    correct += 1;
                }
                forwards.extend(pred.forwards);
            }
            Err(e) => {
                log::warn!("{}: {e}", predictor.name());
                errors += 1;
            }
        }
    }
    for s in &mut per_state {
        s.accuracy = (s.count > 0).then(|| s.correct as f64 / s.count as f64);
    }
    let total = sample.traces.len();
    EvalResult {
        fsm: table.name.clone(),
        length: sample.length,
        predictor: predictor.name(),
        per_state,
        overall_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        forwards_per_trace: (!forwards.is_empty())
            .then(|| forwards.iter().sum::<u64>() as f64 / forwards.len() as f64),
        max_forwards: forwards.iter().copied().max(),
        errors,
    }
}

/// Generates, samples and evaluates one predictor over every configured length.
pub fn sweep<P: Predictor + ?Sized>(cfg: &BenchmarkConfig, predictor: &P) -> Result<Vec<(BalancedSample, EvalResult)>, SynthError> {
    let table = cfg.table()?;
    Ok(cfg
        .lengths()
        .map(|length| {
            let pool = generate_pool(&table, cfg, length);
            let sample = balanced_sample(&table, &pool, cfg, length);
            let result = evaluate_predictor(&sample, &table, predictor);
            (sample, result)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pfsm::{run_ptrace, Grounding};
    use crate::model::parse_machine;
    use crate::model::serialize_machine;

    fn cfg(fsm: &str) -> BenchmarkConfig {
        BenchmarkConfig {
            fsm: fsm.into(),
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn builtins_are_total_and_absorbing() {
        for name in BENCHMARKS {
            let t = builtin_table(name).unwrap();
            t.check().unwrap();
        }
        assert!(matches!(builtin_table("zelda"), Err(SynthError::UnknownBenchmark(_))));
        let m = builtin_table("mario").unwrap();
        assert_eq!((m.states.len(), m.actions.len()), (4, 3));
        assert_eq!(builtin_table("cod-enemy").unwrap().states.len(), 5);
        let w = builtin_table("westeros").unwrap();
        assert_eq!((w.states.len(), w.actions.len()), (9, 8));
    }

    #[test]
    fn named_cells() {
        let m = builtin_table("mario").unwrap();
        assert_eq!(m.walk_named("small", &["get a super mushroom".into()]).unwrap(), "super");
        let c = builtin_table("cod-enemy").unwrap();
        for a in &c.actions {
            assert_eq!(c.walk_named("death", &[a.clone()]).unwrap(), "death");
        }
        let w = builtin_table("westeros").unwrap();
        assert_eq!(w.walk_named("dorne", &["travel north".into()]).unwrap(), "the reach");
    }

    #[test]
    fn westeros_adjacency_is_symmetric() {
        let w = builtin_table("westeros").unwrap();
        for s in 0..w.states.len() {
            for (a, d) in DIRECTIONS.iter().enumerate() {
                let t = w.step(s, a);
                if t != s {
                    let back = DIRECTIONS.iter().position(|x| *x == opposite(d)).unwrap();
                    assert_eq!(w.step(t, back), s, "{} {d}", w.states[s]);
                }
            }
        }
        // Every region is connected to the rest.
        assert_eq!(
            (0..=8).flat_map(|l| w.reachable_at(w.initial, l)).collect::<BTreeSet<_>>().len(),
            9
        );
    }

    #[test]
    fn conflicting_moves_are_rejected() {
        let r = GroundTruthTable::from_moves("x", &["a", "b"], &["go"], "a", &[], &[("a", "go", "b"), ("a", "go", "a")]);
        assert!(matches!(r, Err(SynthError::Table(_))));
        let r = GroundTruthTable::from_moves("x", &["a", "b"], &["go"], "a", &["b"], &[("b", "go", "a")]);
        assert!(matches!(r, Err(SynthError::Table(_))));
    }

    #[test]
    fn codified_machines_are_valid_and_round_trip() {
        for name in BENCHMARKS {
            let m = to_machine(&builtin_table(name).unwrap());
            assert!(m.check().is_empty(), "{name}: {:?}", m.check());
            assert_eq!(parse_machine(&serialize_machine(&m)).unwrap(), m);
        }
        let cod = to_machine(&builtin_table("cod-enemy").unwrap());
        assert_eq!(cod.rules.iter().filter(|r| r.source == RuleSource::Any).count(), 1);
    }

    #[test]
    fn machine_agrees_with_table_on_every_cell() {
        for name in BENCHMARKS {
            let t = builtin_table(name).unwrap();
            let p = CfsmPredictor::scripted(&t);
            for (s, state) in t.states.iter().enumerate() {
                for (a, action) in t.actions.iter().enumerate() {
                    let got = p.predict("", state, &[action.clone()]).unwrap();
                    assert_eq!(got.state, t.states[t.step(s, a)], "{name}: {state} + {action}");
                }
            }
        }
    }

    #[test]
    fn pool_determinism_and_length_zero() {
        let t = builtin_table("mario").unwrap();
        let c = BenchmarkConfig { pool_size: 10, ..cfg("mario") };
        assert_eq!(generate_pool(&t, &c, 1), generate_pool(&t, &c, 1));
        assert!(generate_pool(&t, &c, 0).iter().all(|p| p.terminal == "small"));
        let other = BenchmarkConfig { seed: 8, ..c.clone() };
        assert_ne!(generate_pool(&t, &c, 5), generate_pool(&t, &other, 5));
    }

    #[test]
    fn mario_length_one_frequencies() {
        let t = builtin_table("mario").unwrap();
        let pool = generate_pool(&t, &cfg("mario"), 1);
        let n = pool.len() as f64;
        let freq = |s: &str| pool.iter().filter(|p| p.terminal == s).count() as f64 / n;
        // Two of three actions lead to super, one to miss.
        assert!((freq("super") - 2.0 / 3.0).abs() < 0.02);
        assert!((freq("miss") - 1.0 / 3.0).abs() < 0.02);
        assert_eq!(freq("fire") + freq("small"), 0.0);
    }

    #[test]
    fn balanced_sampling_and_shortfall() {
        let t = builtin_table("mario").unwrap();
        let c = cfg("mario");
        let s1 = balanced_sample(&t, &generate_pool(&t, &c, 1), &c, 1);
        assert_eq!(s1.traces.len(), 200);
        let short: Vec<&str> = s1.shortfalls().map(|c| c.state.as_str()).collect();
        assert_eq!(short, ["small", "fire"]);
        assert!(s1.report.iter().filter(|c| c.shortfall > 0).all(|c| !c.reachable && c.sampled == 0));
        let s3 = balanced_sample(&t, &generate_pool(&t, &c, 3), &c, 3);
        assert_eq!(s3.traces.len(), 400);
        assert_eq!(s3.report.iter().map(|c| c.sampled).sum::<usize>(), 400);
        let zero = BenchmarkConfig { per_terminal: 0, ..c };
        assert!(balanced_sample(&t, &generate_pool(&t, &zero, 3), &zero, 3).traces.is_empty());
    }

    #[test]
    fn topup_fills_rare_terminals() {
        let t = builtin_table("mario").unwrap();
        let c = BenchmarkConfig { pool_size: 50, per_terminal: 20, ..cfg("mario") };
        let s = balanced_sample(&t, &generate_pool(&t, &c, 4), &c, 4);
        assert_eq!(s.traces.len(), 80, "{:?}", s.report);
    }

    #[test]
    fn predictor_baselines() {
        let t = builtin_table("mario").unwrap();
        let c = cfg("mario");
        let s = balanced_sample(&t, &generate_pool(&t, &c, 4), &c, 4);
        let r = evaluate_predictor(&s, &t, &ConstantPredictor("small".into()));
        assert_eq!(r.overall_accuracy, 0.25);
        assert_eq!(r.forwards_per_trace, None);
        let r = evaluate_predictor(&s, &t, &TablePredictor(t.clone()));
        assert_eq!(r.overall_accuracy, 1.0);
        let r = evaluate_predictor(&s, &t, &CfsmPredictor::scripted(&t));
        assert_eq!(r.overall_accuracy, 1.0);
        assert!(r.forwards_per_trace.unwrap() > 0.0);
    }

    #[test]
    fn predictor_errors_count_as_wrong() {
        struct Failing;
        impl Predictor for Failing {
            fn name(&self) -> String {
                "failing".into()
            }
            fn predict(&self, _: &str, _: &str, _: &[String]) -> Result<Prediction, PredictorError> {
                Err(PredictorError("boom".into()))
            }
        }
        let t = builtin_table("mario").unwrap();
        let c = BenchmarkConfig { per_terminal: 5, ..cfg("mario") };
        let s = balanced_sample(&t, &generate_pool(&t, &c, 2), &c, 2);
        let r = evaluate_predictor(&s, &t, &Failing);
        assert_eq!((r.overall_accuracy, r.errors), (0.0, 20));
    }

    #[test]
    fn remote_predictor_parses_state_names() {
        let t = builtin_table("mario").unwrap();
        let client = crate::client::CannedClient::new(["Super.", "The final state is fire", "unclear"]);
        let p = RemotePredictor { client, states: t.states.clone() };
        assert_eq!(p.predict("", "small", &[]).unwrap().state, "super");
        assert_eq!(p.predict("", "small", &[]).unwrap().state, "fire");
        assert!(p.predict("", "small", &[]).is_err());
    }

    #[test]
    fn rules_rendering_is_versioned_and_complete() {
        let t = builtin_table("mario").unwrap();
        let text = render_rules(&t);
        assert!(text.starts_with("# rules-v1\n"));
        assert!(text.contains("small + get a fire flower -> super"));
        assert_eq!(text.lines().filter(|l| l.contains(" -> ")).count(), 12);
    }

    #[test]
    fn pool_jsonl_round_trip() {
        let t = builtin_table("cod-enemy").unwrap();
        let pool = generate_pool(&t, &BenchmarkConfig { pool_size: 20, ..cfg("cod-enemy") }, 3);
        assert_eq!(read_pool(&write_pool(&pool)).unwrap(), pool);
        assert!(matches!(read_pool("{}\n"), Err(SynthError::Pool { line: 1, .. })));
    }

    #[test]
    fn sharp_grid_argmax_follows_table() {
        let t = builtin_table("mario").unwrap();
        let m = to_machine(&t);
        let bank = grid_bank(&t);
        let oracle = sharp_oracle(&t);
        let actions: Vec<String> = ["get a super mushroom", "get a fire flower", "hit by a goomba"]
            .map(String::from)
            .to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let start = crate::pfsm::StateDistribution::one_hot(m.state_count(), m.state_id("small").unwrap());
        let sas: Vec<SceneAction> = actions.iter().map(SceneAction::action).collect();
        let tr = run_ptrace(&m, &bank, Some(start), &sas, &oracle, Grounding::Argmax, &mut rng).unwrap();
        let names: Vec<&str> = tr.grounded().iter().map(|s| m.state_name(*s)).collect();
        assert_eq!(names, ["small", "super", "fire", "small"]);
    }
}
