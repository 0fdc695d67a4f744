//! Probabilistic execution. The character's state is a distribution on the
//! simplex; each action builds a logit matrix from binary-question verdicts
//! and the distribution is pushed through its column-wise softmax.
//!
//! Matrix layout: row = next state, column = current state. Column `j` of
//! `softmax(W)` is the next-state distribution given current state `j`, so
//! `softmax(W) · p` stays on the simplex.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{Checker, CheckerError, CheckerVerdict, Label};
use crate::engine::{route, EngineError, RouteDecision, Routing, SceneAction};
use crate::model::{CharacterStateModel, MachineDefinition, StateId};

pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PfsmError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("not a probability distribution: {0}")]
    NotOnSimplex(String),
    #[error("non-finite logit at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("invalid question bank: {0}")]
    InvalidBank(String),
    #[error("question bank file: {0}")]
    BankSyntax(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl From<CheckerError> for PfsmError {
    fn from(e: CheckerError) -> Self {
        PfsmError::Engine(EngineError::Checker(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateDistribution(Vec<f64>);

impl StateDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, PfsmError> {
        if probs.is_empty() {
            return Err(PfsmError::NotOnSimplex("empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(PfsmError::NotOnSimplex(format!("entry {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(PfsmError::NotOnSimplex(format!("sum {sum}")));
        }
        Ok(StateDistribution(probs))
    }

    pub fn one_hot(n: usize, k: StateId) -> Self {
        assert!(k.0 < n);
        let mut v = vec![0.0; n];
        v[k.0] = 1.0;
        StateDistribution(v)
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0);
        StateDistribution(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// n×n logits, row-major, entry (i, j) = logit of moving from j to i.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    logits: Vec<f64>,
}

impl TransitionMatrix {
    pub fn filled(n: usize, value: f64) -> Self {
        TransitionMatrix {
            n,
            logits: vec![value; n * n],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, PfsmError> {
        let n = rows.len();
        let mut logits = Vec::with_capacity(n * n);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(PfsmError::DimensionMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            for (j, w) in row.into_iter().enumerate() {
                if !w.is_finite() {
                    return Err(PfsmError::NonFinite { row: i, col: j });
                }
                logits.push(w);
            }
        }
        Ok(TransitionMatrix { n, logits })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, next: usize, current: usize) -> f64 {
        self.logits[next * self.n + current]
    }

    pub fn set(&mut self, next: usize, current: usize, w: f64) {
        assert!(w.is_finite(), "logits must be finite");
        self.logits[next * self.n + current] = w;
    }

    pub fn column(&self, current: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, current)).collect()
    }

    /// Stable softmax of one column (max-subtracted).
    pub fn column_softmax(&self, current: usize) -> Vec<f64> {
        softmax(&self.column(current))
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `softmax_columns(W) · p`.
pub fn update_distribution(
    p: &StateDistribution,
    w: &TransitionMatrix,
) -> Result<StateDistribution, PfsmError> {
    if p.len() != w.n {
        return Err(PfsmError::DimensionMismatch {
            expected: w.n,
            got: p.len(),
        });
    }
    let mut out = vec![0.0; w.n];
    for (j, &pj) in p.0.iter().enumerate() {
        if pj == 0.0 {
            continue;
        }
        for (o, s) in out.iter_mut().zip(w.column_softmax(j)) {
            *o += s * pj;
        }
    }
    Ok(StateDistribution(out))
}

/// Most probable state; ties go to the lowest index.
pub fn ground_state(p: &StateDistribution) -> StateId {
    let mut best = 0;
    for (i, &v) in p.0.iter().enumerate().skip(1) {
        if v > p.0[best] {
            best = i;
        }
    }
    StateId(best)
}

pub fn sample_state<R: Rng + ?Sized>(p: &StateDistribution, rng: &mut R) -> StateId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &v) in p.0.iter().enumerate() {
        if v > 0.0 {
            last_nonzero = i;
        }
        acc += v;
        if u < acc {
            return StateId(i);
        }
    }
    StateId(last_nonzero)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankMode {
    Grid,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecialQuestion {
    pub source: String,
    pub target: String,
    pub question: String,
}

/// Transition questions for one machine.
///
/// * grid: `grid[i][j]` asks whether the character moves from state j to
///   state i (same layout as [`TransitionMatrix`]).
/// * sparse: `defaults[i]` asks whether the character is now in state i; it is
///   broadcast to every column of row i, then each special overwrites its
///   own (target, source) cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionBank {
    pub mode: BankMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defaults: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub specials: Vec<SpecialQuestion>,
}

impl QuestionBank {
    pub fn grid(grid: Vec<Vec<String>>) -> Self {
        QuestionBank {
            mode: BankMode::Grid,
            defaults: None,
            grid: Some(grid),
            specials: Vec::new(),
        }
    }

    pub fn sparse(defaults: Vec<String>, specials: Vec<SpecialQuestion>) -> Self {
        QuestionBank {
            mode: BankMode::Sparse,
            defaults: Some(defaults),
            grid: None,
            specials,
        }
    }

    pub fn parse(text: &str) -> Result<Self, PfsmError> {
        serde_json::from_str(text).map_err(|e| PfsmError::BankSyntax(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("banks always serialize")
    }

    /// Number of questions the bank asks per action: n² or n + k.
    pub fn question_count(&self) -> usize {
        match self.mode {
            BankMode::Grid => self.grid.as_ref().map_or(0, |g| g.iter().map(Vec::len).sum()),
            BankMode::Sparse => {
                self.defaults.as_ref().map_or(0, Vec::len) + self.specials.len()
            }
        }
    }

    /// Resolves specials to (target row, source column) and checks shape.
    fn resolve(&self, machine: &MachineDefinition) -> Result<Vec<(usize, usize, &str)>, PfsmError> {
        let n = machine.state_count();
        let bad = |m: String| Err(PfsmError::InvalidBank(m));
        let nonempty = |q: &str| !q.trim().is_empty();
        match self.mode {
            BankMode::Grid => {
                let Some(grid) = &self.grid else {
                    return bad("grid mode requires \"grid\"".into());
                };
                if grid.len() != n || grid.iter().any(|r| r.len() != n) {
                    return bad(format!("grid must be {n}x{n}"));
                }
                if !grid.iter().flatten().all(|q| nonempty(q)) {
                    return bad("grid questions must be non-empty".into());
                }
                if !self.specials.is_empty() {
                    return bad("grid mode takes no specials".into());
                }
                Ok(Vec::new())
            }
            BankMode::Sparse => {
                let Some(defaults) = &self.defaults else {
                    return bad("sparse mode requires \"defaults\"".into());
                };
                if defaults.len() != n {
                    return bad(format!("sparse mode needs {n} defaults, got {}", defaults.len()));
                }
                if !defaults.iter().all(|q| nonempty(q)) {
                    return bad("default questions must be non-empty".into());
                }
                let mut seen = HashSet::new();
                let mut out = Vec::with_capacity(self.specials.len());
                for s in &self.specials {
                    let lookup = |name: &str| {
                        machine
                            .state_id(name)
                            .ok_or_else(|| PfsmError::InvalidBank(format!("unknown state \"{name}\"")))
                    };
                    let (src, tgt) = (lookup(&s.source)?, lookup(&s.target)?);
                    if !seen.insert((src, tgt)) {
                        return bad(format!("duplicate special {} -> {}", s.source, s.target));
                    }
                    if !nonempty(&s.question) {
                        return bad("special questions must be non-empty".into());
                    }
                    out.push((tgt.0, src.0, s.question.as_str()));
                }
                Ok(out)
            }
        }
    }

    pub fn validate(&self, machine: &MachineDefinition) -> Result<(), PfsmError> {
        self.resolve(machine).map(|_| ())
    }
}

/// Generic grid-cell question for the cell (next = `to`, current = `from`).
pub fn move_question(from: &str, to: &str) -> String {
    format!("Does the action move the character from \"{from}\" to \"{to}\"?")
}

/// Logit contributed by a verdict. `unknown` is uninformative: log 0.5.
pub fn verdict_logit(v: &CheckerVerdict) -> f64 {
    match v.label {
        Label::Unknown => 0.5f64.ln(),
        _ => v.true_logprob,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixBuild {
    pub matrix: TransitionMatrix,
    pub checker_calls: u32,
}

pub fn build_matrix<C: Checker + ?Sized>(
    machine: &MachineDefinition,
    bank: &QuestionBank,
    sa: &SceneAction,
    checker: &C,
) -> Result<MatrixBuild, PfsmError> {
    let specials = bank.resolve(machine)?;
    if sa.action_text.trim().is_empty() {
        return Err(EngineError::EmptyAction.into());
    }
    let n = machine.state_count();
    let mut calls = 0u32;
    let mut ask = |q: &str| -> Result<f64, PfsmError> {
        calls += 1;
        Ok(verdict_logit(&checker.ask(&sa.query(q))?))
    };
    let mut matrix = TransitionMatrix::filled(n, 0.0);
    match bank.mode {
        BankMode::Grid => {
            let grid = bank.grid.as_ref().expect("resolved");
            for (i, row) in grid.iter().enumerate() {
                for (j, q) in row.iter().enumerate() {
                    matrix.set(i, j, ask(q)?);
                }
            }
        }
        BankMode::Sparse => {
            let defaults = bank.defaults.as_ref().expect("resolved");
            for (i, q) in defaults.iter().enumerate() {
                let w = ask(q)?;
                for j in 0..n {
                    matrix.set(i, j, w);
                }
            }
            for (row, col, q) in specials {
                matrix.set(row, col, ask(q)?);
            }
        }
    }
    Ok(MatrixBuild {
        matrix,
        checker_calls: calls,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grounding {
    Argmax,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PTracePoint {
    pub dist: StateDistribution,
    pub grounded: StateId,
    /// Checker calls spent producing this point (0 for the initial point).
    pub checker_calls: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PTrace {
    /// Initial point followed by one point per action.
    pub points: Vec<PTracePoint>,
}

impl PTrace {
    pub fn grounded(&self) -> Vec<StateId> {
        self.points.iter().map(|p| p.grounded).collect()
    }

    pub fn total_calls(&self) -> u64 {
        self.points.iter().map(|p| p.checker_calls as u64).sum()
    }
}

#[derive(Debug, Error)]
#[error("probabilistic trace aborted after {} point(s): {error}", .partial.points.len())]
pub struct PTraceError {
    pub error: PfsmError,
    pub partial: PTrace,
}

fn ground<R: Rng + ?Sized>(p: &StateDistribution, grounding: Grounding, rng: &mut R) -> StateId {
    match grounding {
        Grounding::Argmax => ground_state(p),
        Grounding::Sample => sample_state(p, rng),
    }
}

/// Folds build_matrix + update_distribution over the actions. `initial`
/// defaults to one-hot on `Unactivated`.
pub fn run_ptrace<C: Checker + ?Sized, R: Rng + ?Sized>(
    machine: &MachineDefinition,
    bank: &QuestionBank,
    initial: Option<StateDistribution>,
    actions: &[SceneAction],
    checker: &C,
    grounding: Grounding,
    rng: &mut R,
) -> Result<PTrace, Box<PTraceError>> {
    let n = machine.state_count();
    let fail = |error, partial| Box::new(PTraceError { error, partial });
    let dist = initial.unwrap_or_else(|| StateDistribution::one_hot(n, machine.unactivated()));
    let mut trace = PTrace { points: Vec::new() };
    if dist.len() != n {
        return Err(fail(
            PfsmError::DimensionMismatch {
                expected: n,
                got: dist.len(),
            },
            trace,
        ));
    }
    if let Err(e) = bank.validate(machine) {
        return Err(fail(e, trace));
    }
    let grounded = ground(&dist, grounding, rng);
    trace.points.push(PTracePoint {
        dist,
        grounded,
        checker_calls: 0,
    });
    for sa in actions {
        let current = &trace.points.last().expect("initial point").dist;
        let next = build_matrix(machine, bank, sa, checker)
            .and_then(|b| Ok((update_distribution(current, &b.matrix)?, b.checker_calls)));
        match next {
            Ok((dist, calls)) => {
                let grounded = ground(&dist, grounding, rng);
                trace.points.push(PTracePoint {
                    dist,
                    grounded,
                    checker_calls: calls,
                });
            }
            Err(e) => return Err(fail(e, trace)),
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PStep {
    pub dist: StateDistribution,
    pub grounded: StateId,
    pub checker_calls: u32,
    pub routing: Routing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PCharacterStep {
    pub decision: RouteDecision,
    pub routing_calls: u32,
    pub steps: Vec<(String, PStep)>,
}

impl PCharacterStep {
    pub fn total_calls(&self) -> u32 {
        self.routing_calls + self.steps.iter().map(|(_, s)| s.checker_calls).sum::<u32>()
    }

    pub fn distributions(&self) -> HashMap<String, StateDistribution> {
        self.steps
            .iter()
            .map(|(id, s)| (id.clone(), s.dist.clone()))
            .collect()
    }
}

/// Character-level probabilistic step with the same relevance/activity
/// routing as the deterministic engine. Unrouted machines keep their
/// distribution.
pub fn pstep_character<C: Checker + ?Sized>(
    model: &CharacterStateModel,
    banks: &HashMap<String, QuestionBank>,
    current: &HashMap<String, StateDistribution>,
    sa: &SceneAction,
    checker: &C,
) -> Result<PCharacterStep, PfsmError> {
    for m in &model.machines {
        if !current.contains_key(&m.machine_id) || !banks.contains_key(&m.machine_id) {
            return Err(EngineError::MissingMachine(m.machine_id.clone()).into());
        }
    }
    let (decision, routing_calls) = route(model, sa, checker)?;
    let mut steps = Vec::with_capacity(model.machines.len());
    for m in &model.machines {
        let dist = &current[&m.machine_id];
        let step = if decision.runs(m.perspective) {
            let build = build_matrix(m, &banks[&m.machine_id], sa, checker)?;
            let dist = update_distribution(dist, &build.matrix)?;
            PStep {
                grounded: ground_state(&dist),
                dist,
                checker_calls: build.checker_calls,
                routing: decision.routing_for(m.perspective),
            }
        } else {
            PStep {
                dist: dist.clone(),
                grounded: ground_state(dist),
                checker_calls: 0,
                routing: decision.routing_for(m.perspective),
            }
        };
        steps.push((m.machine_id.clone(), step));
    }
    Ok(PCharacterStep {
        decision,
        routing_calls,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checker::{CountingChecker, ScriptedChecker, ScriptedRule};
    use crate::model::parse_machine;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn machine(n_domain: usize) -> MachineDefinition {
        let mut states = vec!["\"Unactivated\"".to_string()];
        states.extend((0..n_domain).map(|i| format!("\"s{i}\"")));
        states.push("\"Other\"".into());
        parse_machine(&format!(
            r#"{{"machine_id":"m","dimension":"x","perspective":"active","states":[{}],
                "initial":"Unactivated","rules":[]}}"#,
            states.join(",")
        ))
        .unwrap()
    }

    fn dist(v: &[f64]) -> StateDistribution {
        StateDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn simplex_validation() {
        assert!(StateDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(StateDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(StateDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(StateDistribution::new(vec![]).is_err());
    }

    #[test]
    fn one_hot_selects_column_softmax() {
        let w = TransitionMatrix::from_rows(vec![
            vec![0.3, -1.0, 2.0],
            vec![1.0, 0.0, 0.5],
            vec![-2.0, 4.0, 0.0],
        ])
        .unwrap();
        let out = update_distribution(&StateDistribution::one_hot(3, StateId(1)), &w).unwrap();
        for (a, b) in out.probs().iter().zip(w.column_softmax(1)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_with_identical_columns_is_that_columns_softmax() {
        let col = [0.1, -0.7, 1.3];
        let rows = col.iter().map(|&v| vec![v; 3]).collect();
        let w = TransitionMatrix::from_rows(rows).unwrap();
        let out = update_distribution(&StateDistribution::uniform(3), &w).unwrap();
        for (a, b) in out.probs().iter().zip(softmax(&col)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_three_state_update() {
        // Columns (current state) carry logits [0,0,0], [1,0,0], [0,2,0].
        let w = TransitionMatrix::from_rows(vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 2.0],
            vec![0.0, 0.0, 0.0],
        ])
        .unwrap();
        let p = dist(&[0.5, 0.3, 0.2]);
        // Long-hand: each column softmax written out, then weighted sum.
        let e = std::f64::consts::E;
        let c0 = [1.0 / 3.0; 3];
        let d1 = e + 2.0;
        let c1 = [e / d1, 1.0 / d1, 1.0 / d1];
        let d2 = e * e + 2.0;
        let c2 = [1.0 / d2, e * e / d2, 1.0 / d2];
        let expected: Vec<f64> = (0..3)
            .map(|i| 0.5 * c0[i] + 0.3 * c1[i] + 0.2 * c2[i])
            .collect();
        let out = update_distribution(&p, &w).unwrap();
        for (a, b) in out.probs().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // Reference values from an independent numpy computation.
        let frozen = [0.36080312788025554, 0.387646342384112, 0.25155052973563247];
        for (a, b) in out.probs().iter().zip(frozen) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dimension_mismatch() {
        let w = TransitionMatrix::filled(3, 0.0);
        assert!(matches!(
            update_distribution(&StateDistribution::uniform(2), &w),
            Err(PfsmError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let s = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((s[0] - 0.5).abs() < 1e-15 && s[2] == 0.0);
    }

    #[test]
    fn grounding_rules() {
        assert_eq!(ground_state(&dist(&[0.2, 0.5, 0.3])), StateId(1));
        assert_eq!(ground_state(&StateDistribution::uniform(4)), StateId(0));
        assert_eq!(ground_state(&StateDistribution::one_hot(4, StateId(3))), StateId(3));
    }

    #[test]
    fn sampling_one_hot_and_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = StateDistribution::one_hot(3, StateId(2));
        assert!((0..100).all(|_| sample_state(&p, &mut rng) == StateId(2)));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = dist(&[0.5, 0.5]);
        let zeros = (0..10_000)
            .filter(|_| sample_state(&p, &mut rng) == StateId(0))
            .count();
        let f = zeros as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&f), "{f}");
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_state(&p, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    fn true_for(question: &str) -> ScriptedRule {
        ScriptedRule::new(None, Some(question), Label::True, 0.95f64.ln()).unwrap()
    }

    #[test]
    fn sparse_broadcast_two_states() {
        // n=2: Unactivated/Other only.
        let m = machine(0);
        let bank = QuestionBank::sparse(vec!["to zero?".into(), "to one?".into()], vec![]);
        let c = ScriptedChecker::new(vec![true_for("to zero")]);
        let b = build_matrix(&m, &bank, &SceneAction::action("a"), &c).unwrap();
        assert_eq!(b.checker_calls, 2);
        for j in 0..2 {
            assert_eq!(b.matrix.column(j), vec![0.95f64.ln(), 0.05f64.ln()]);
        }
    }

    #[test]
    fn sparse_and_grid_call_counts() {
        let m = machine(3);
        let defaults: Vec<String> = (0..5).map(|i| format!("d{i}?")).collect();
        let specials = vec![
            SpecialQuestion { source: "s0".into(), target: "s1".into(), question: "x?".into() },
            SpecialQuestion { source: "s1".into(), target: "s2".into(), question: "y?".into() },
            SpecialQuestion { source: "Other".into(), target: "s0".into(), question: "z?".into() },
        ];
        let sparse = QuestionBank::sparse(defaults, specials);
        let grid = QuestionBank::grid((0..5).map(|i| (0..5).map(|j| format!("g{i}{j}?")).collect()).collect());
        let c = CountingChecker::new(ScriptedChecker::new(vec![]));
        let sa = SceneAction::action("a");
        assert_eq!(build_matrix(&m, &sparse, &sa, &c).unwrap().checker_calls, 8);
        assert_eq!(c.calls(), 8);
        assert_eq!(build_matrix(&m, &grid, &sa, &c).unwrap().checker_calls, 25);
        assert_eq!(sparse.question_count(), 8);
        assert_eq!(grid.question_count(), 25);
    }

    #[test]
    fn special_overrides_only_its_cell() {
        let m = machine(1);
        let bank = QuestionBank::sparse(
            vec!["u?".into(), "s?".into(), "o?".into()],
            vec![SpecialQuestion { source: "s0".into(), target: "Other".into(), question: "special?".into() }],
        );
        let c = ScriptedChecker::new(vec![true_for("special")]);
        let b = build_matrix(&m, &bank, &SceneAction::action("a"), &c).unwrap();
        assert_eq!(b.matrix.get(2, 1), 0.95f64.ln());
        assert_eq!(b.matrix.get(2, 0), 0.05f64.ln());
        assert_eq!(b.matrix.get(2, 2), 0.05f64.ln());
    }

    #[test]
    fn equal_logits_give_uniform_columns() {
        let m = machine(3);
        let bank = QuestionBank::sparse((0..5).map(|i| format!("d{i}?")).collect(), vec![]);
        let b = build_matrix(&m, &bank, &SceneAction::action("a"), &ScriptedChecker::new(vec![])).unwrap();
        for j in 0..5 {
            for p in b.matrix.column_softmax(j) {
                assert!((p - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unknown_verdict_contributes_half() {
        let m = machine(0);
        let bank = QuestionBank::sparse(vec!["a?".into(), "b?".into()], vec![]);
        let c = ScriptedChecker::new(vec![
            ScriptedRule::new(None, Some("a?"), Label::Unknown, 0.9f64.ln()).unwrap(),
        ]);
        let b = build_matrix(&m, &bank, &SceneAction::action("x"), &c).unwrap();
        assert_eq!(b.matrix.get(0, 0), 0.5f64.ln());
    }

    #[test]
    fn bank_validation() {
        let m = machine(1);
        let short = QuestionBank::sparse(vec!["a?".into()], vec![]);
        assert!(short.validate(&m).is_err());
        let dup = QuestionBank::sparse(
            vec!["a?".into(), "b?".into(), "c?".into()],
            vec![
                SpecialQuestion { source: "s0".into(), target: "Other".into(), question: "x?".into() },
                SpecialQuestion { source: "s0".into(), target: "Other".into(), question: "y?".into() },
            ],
        );
        assert!(dup.validate(&m).is_err());
        let unknown = QuestionBank::sparse(
            vec!["a?".into(), "b?".into(), "c?".into()],
            vec![SpecialQuestion { source: "s9".into(), target: "Other".into(), question: "x?".into() }],
        );
        assert!(unknown.validate(&m).is_err());
        let bad_grid = QuestionBank::grid(vec![vec!["q".into(); 3]; 2]);
        assert!(bad_grid.validate(&m).is_err());
        assert!(QuestionBank::parse(r#"{"mode":"grid","grid":[],"bogus":1}"#).is_err());
    }

    #[test]
    fn bank_file_round_trips() {
        let bank = QuestionBank::sparse(
            vec!["a?".into(), "b?".into()],
            vec![SpecialQuestion { source: "Unactivated".into(), target: "Other".into(), question: "x?".into() }],
        );
        assert_eq!(QuestionBank::parse(&bank.to_json()).unwrap(), bank);
    }

    #[test]
    fn empty_ptrace_is_initial_point() {
        let m = machine(2);
        let bank = QuestionBank::sparse((0..4).map(|i| format!("d{i}?")).collect(), vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = run_ptrace(&m, &bank, None, &[], &ScriptedChecker::new(vec![]), Grounding::Argmax, &mut rng)
            .unwrap();
        assert_eq!(t.points.len(), 1);
        assert_eq!(t.points[0].grounded, StateId(0));
        assert_eq!(t.points[0].dist, StateDistribution::one_hot(4, StateId(0)));
    }

    #[test]
    fn ambiguous_action_splits_mass_and_ties_to_lower_index() {
        let m = machine(2);
        let bank = QuestionBank::sparse(
            vec!["stay?".into(), "to s0?".into(), "to s1?".into(), "other?".into()],
            vec![],
        );
        let c = ScriptedChecker::new(vec![true_for("to s0"), true_for("to s1")]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = run_ptrace(&m, &bank, None, &[SceneAction::action("both")], &c, Grounding::Argmax, &mut rng)
            .unwrap();
        let p = t.points[1].dist.probs();
        assert!((p[1] - p[2]).abs() < 1e-12);
        assert_eq!(t.points[1].grounded, StateId(1));
    }

    #[test]
    fn ptrace_failure_keeps_partial() {
        let m = machine(1);
        let bank = QuestionBank::sparse(vec!["a?".into(), "b?".into(), "c?".into()], vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let actions = [SceneAction::action("ok"), SceneAction::action(" ")];
        let err = run_ptrace(&m, &bank, None, &actions, &ScriptedChecker::new(vec![]), Grounding::Argmax, &mut rng)
            .unwrap_err();
        assert_eq!(err.partial.points.len(), 2);
    }
}
