//! Profile → machine construction through a chat model: state extraction,
//! grid codification into a machine, sparse codification into a question
//! bank. Every draft is checked locally and rejected drafts are sent back
//! with their diagnostics until the repair budget runs out.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatClient, ChatMessage, ChatRequest, ClientError};
use crate::model::{
    parse_machine, validate_model, CharacterStateModel, Dimension, GuardKind, MachineDefinition,
    Perspective, Severity, StateId, OTHER, UNACTIVATED,
};
use crate::pfsm::{move_question, BankMode, QuestionBank, SpecialQuestion};
use crate::prompts::{PromptTemplate, TemplateError, TemplateName};

pub const DEFAULT_REPAIR_BUDGET: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharacterProfile {
    pub character_id: String,
    pub paragraphs: Vec<String>,
}

impl CharacterProfile {
    pub fn parse(text: &str) -> Result<Self, CodifyError> {
        let p: CharacterProfile =
            serde_json::from_str(text).map_err(|e| CodifyError::InvalidProfile(e.to_string()))?;
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<(), CodifyError> {
        if self.character_id.trim().is_empty() {
            return Err(CodifyError::InvalidProfile("empty character_id".into()));
        }
        if self.paragraphs.iter().all(|p| p.trim().is_empty()) {
            return Err(CodifyError::InvalidProfile("no non-empty paragraph".into()));
        }
        Ok(())
    }

    pub fn text(&self) -> String {
        self.paragraphs
            .iter()
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

#[derive(Debug, Error)]
pub enum CodifyError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("state extraction failed after {attempts} draft(s): {}", .diagnostics.join("; "))]
    Extraction {
        attempts: u32,
        diagnostics: Vec<String>,
    },
    #[error("codification failed after {attempts} draft(s): {}", .diagnostics.join("; "))]
    Codification {
        attempts: u32,
        diagnostics: Vec<String>,
    },
    #[error("states must start with \"{UNACTIVATED}\" and end with \"{OTHER}\"")]
    MissingReserved,
    #[error("codified model is invalid: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Result of a draft-and-repair loop with its accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct Drafted<T> {
    pub value: T,
    pub llm_calls: u32,
    pub rejected_drafts: u32,
    /// Diagnostics of every rejected draft, oldest first.
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Machine(MachineDefinition),
    Bank(QuestionBank),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodificationReport {
    pub artifact: Artifact,
    pub mode: BankMode,
    /// Grid: n² cells of the derived grid bank. Sparse: n defaults + k specials.
    pub question_count: usize,
    pub llm_calls: u32,
    pub rejected_drafts: u32,
    pub diagnostics: Vec<String>,
}

impl CodificationReport {
    pub fn machine(&self) -> Option<&MachineDefinition> {
        match &self.artifact {
            Artifact::Machine(m) => Some(m),
            Artifact::Bank(_) => None,
        }
    }

    pub fn bank(&self) -> Option<&QuestionBank> {
        match &self.artifact {
            Artifact::Bank(b) => Some(b),
            Artifact::Machine(_) => None,
        }
    }
}

/// Which machine to codify.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineTarget {
    pub machine_id: String,
    pub dimension: Dimension,
    pub perspective: Perspective,
}

impl MachineTarget {
    pub fn new(machine_id: impl Into<String>, dimension: Dimension, perspective: Perspective) -> Self {
        MachineTarget {
            machine_id: machine_id.into(),
            dimension,
            perspective,
        }
    }
}

/// Returns the first JSON value embedded in a model reply, tolerating code
/// fences and surrounding prose.
fn json_payload(reply: &str) -> &str {
    let start = reply.find(['{', '[']);
    let end = reply.rfind(['}', ']']);
    match (start, end) {
        (Some(s), Some(e)) if e >= s => &reply[s..=e],
        _ => reply.trim(),
    }
}

fn repair_message(diagnostics: &[String]) -> String {
    let mut msg = String::from("Your answer was rejected. Problems found so far:\n");
    for d in diagnostics {
        msg.push_str("- ");
        msg.push_str(d);
        msg.push('\n');
    }
    msg.push_str("Reply with a corrected document only.");
    msg
}

/// Requests drafts until `accept` returns a value or the budget is spent.
/// Each repair turn repeats every diagnostic collected so far.
fn draft_loop<C, T>(
    client: &C,
    prompt: String,
    budget: u32,
    mut accept: impl FnMut(&str) -> Result<T, Vec<String>>,
) -> Result<Drafted<T>, (u32, Vec<String>, Option<ClientError>)>
where
    C: ChatClient + ?Sized,
{
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut diagnostics = Vec::new();
    let mut calls = 0;
    while calls < budget {
        let reply = match client.complete(&ChatRequest::new(messages.clone())) {
            Ok(r) => r,
            Err(e) => return Err((calls, diagnostics, Some(e))),
        };
        calls += 1;
        match accept(&reply.content) {
            Ok(value) => {
                return Ok(Drafted {
                    value,
                    llm_calls: calls,
                    rejected_drafts: calls - 1,
                    diagnostics,
                })
            }
            Err(errs) => {
                let errs = if errs.is_empty() {
                    vec!["draft rejected".to_string()]
                } else {
                    errs
                };
                for e in errs {
                    diagnostics.push(format!("draft {calls}: {e}"));
                }
                messages.push(ChatMessage::assistant(reply.content));
                messages.push(ChatMessage::user(repair_message(&diagnostics)));
            }
        }
    }
    Err((calls, diagnostics, None))
}

fn render(template: &PromptTemplate, values: &BTreeMap<&str, String>) -> Result<String, CodifyError> {
    Ok(template.render(values)?)
}

fn base_values(profile: &CharacterProfile) -> BTreeMap<&'static str, String> {
    let mut v = BTreeMap::new();
    v.insert("character", profile.character_id.clone());
    v.insert("profile", profile.text());
    v
}

/// Forces the reserved pair around a deduplicated list of domain states.
pub fn with_reserved(names: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = vec![UNACTIVATED.to_string()];
    for n in names {
        let n = n.trim();
        if n.is_empty() || n == UNACTIVATED || n == OTHER || !seen.insert(n.to_string()) {
            continue;
        }
        out.push(n.to_string());
    }
    out.push(OTHER.to_string());
    out
}

pub fn extract_states<C: ChatClient + ?Sized>(
    profile: &CharacterProfile,
    client: &C,
    template: &PromptTemplate,
    budget: u32,
) -> Result<Drafted<Vec<String>>, CodifyError> {
    profile.check()?;
    template.expect(TemplateName::Extract)?;
    let prompt = render(template, &base_values(profile))?;
    draft_loop(client, prompt, budget, |reply| {
        let names: Vec<String> = serde_json::from_str(json_payload(reply))
            .map_err(|e| vec![format!("expected a JSON array of state names: {e}")])?;
        let states = with_reserved(&names);
        if states.len() < 3 {
            return Err(vec!["at least one non-reserved state is required".into()]);
        }
        if states.iter().any(|s| s == "*") {
            return Err(vec!["\"*\" is not a valid state name".into()]);
        }
        Ok(states)
    })
    .map_err(|(attempts, diagnostics, client)| match client {
        Some(e) => CodifyError::Client(e),
        None => CodifyError::Extraction {
            attempts,
            diagnostics,
        },
    })
}

fn check_reserved(states: &[String]) -> Result<(), CodifyError> {
    if states.len() < 2 || states[0] != UNACTIVATED || states[states.len() - 1] != OTHER {
        return Err(CodifyError::MissingReserved);
    }
    Ok(())
}

fn codification_error((attempts, diagnostics, client): (u32, Vec<String>, Option<ClientError>)) -> CodifyError {
    match client {
        Some(e) => CodifyError::Client(e),
        None => CodifyError::Codification {
            attempts,
            diagnostics,
        },
    }
}

/// Codifies one machine. The draft must parse, validate, declare exactly
/// `states`, and match the target's id, dimension and perspective.
pub fn codify_machine<C: ChatClient + ?Sized>(
    profile: &CharacterProfile,
    states: &[String],
    target: &MachineTarget,
    client: &C,
    template: &PromptTemplate,
    budget: u32,
) -> Result<CodificationReport, CodifyError> {
    profile.check()?;
    check_reserved(states)?;
    template.expect(TemplateName::CodifyGrid)?;
    let mut values = base_values(profile);
    values.insert("states", serde_json::to_string(states).expect("strings serialize"));
    values.insert("machine_id", target.machine_id.clone());
    values.insert("dimension", target.dimension.to_string());
    values.insert("perspective", target.perspective.to_string());
    let prompt = render(template, &values)?;
    let drafted = draft_loop(client, prompt, budget, |reply| {
        let m = parse_machine(json_payload(reply)).map_err(|e| match e.schema_errors() {
            errs if errs.is_empty() => vec![e.to_string()],
            errs => errs.iter().map(|s| s.to_string()).collect(),
        })?;
        let mut errs = Vec::new();
        if m.states != states {
            errs.push(format!("states must be exactly {}", values["states"]));
        }
        if m.machine_id != target.machine_id {
            errs.push(format!("machine_id must be \"{}\"", target.machine_id));
        }
        if m.dimension != target.dimension || m.perspective != target.perspective {
            errs.push(format!(
                "dimension/perspective must be {}/{}",
                target.dimension, target.perspective
            ));
        }
        if errs.is_empty() {
            Ok(m)
        } else {
            Err(errs)
        }
    })
    .map_err(codification_error)?;
    let n = drafted.value.state_count();
    Ok(CodificationReport {
        question_count: n * n,
        artifact: Artifact::Machine(drafted.value),
        mode: BankMode::Grid,
        llm_calls: drafted.llm_calls,
        rejected_drafts: drafted.rejected_drafts,
        diagnostics: drafted.diagnostics,
    })
}

/// n×n bank whose cell (i, j) carries the question of the first rule that
/// moves state j to state i, or a generic move question if none does.
pub fn grid_bank_from_machine(m: &MachineDefinition) -> QuestionBank {
    let n = m.state_count();
    let mut grid: Vec<Vec<String>> = (0..n)
        .map(|i| (0..n).map(|j| move_question(&m.states[j], &m.states[i])).collect())
        .collect();
    for j in 0..n {
        let mut filled = HashSet::new();
        for r in m.evaluation_order(StateId(j)) {
            let rule = m.rule(r);
            let i = rule.guard.target.0;
            if rule.guard.kind == GuardKind::Never || !filled.insert(i) {
                continue;
            }
            if let Some(q) = &rule.guard.question {
                grid[i][j] = q.clone();
            }
        }
    }
    QuestionBank::grid(grid)
}

#[derive(Debug, Deserialize)]
struct SparseDraft {
    #[serde(default)]
    glosses: BTreeMap<String, String>,
    #[serde(default)]
    specials: Vec<SpecialQuestion>,
}

pub fn default_question(state: &str, gloss: Option<&str>) -> String {
    match gloss.map(str::trim).filter(|g| !g.is_empty()) {
        Some(g) => format!("Given this action, is the character now best described as {state} ({g})?"),
        None => format!("Given this action, is the character now best described as {state}?"),
    }
}

/// A rule-less machine over `states`, used as the state index of a bank.
pub fn bare_machine(target: &MachineTarget, states: &[String]) -> MachineDefinition {
    MachineDefinition {
        machine_id: target.machine_id.clone(),
        dimension: target.dimension.clone(),
        perspective: target.perspective,
        states: states.to_vec(),
        rules: Vec::new(),
        initial: StateId(0),
    }
}

/// Codifies a sparse bank: one templated default per state plus the
/// profile-specific specials the model proposes. Duplicate special cells
/// keep their first question.
pub fn codify_sparse<C: ChatClient + ?Sized>(
    profile: &CharacterProfile,
    states: &[String],
    client: &C,
    template: &PromptTemplate,
    budget: u32,
) -> Result<CodificationReport, CodifyError> {
    profile.check()?;
    check_reserved(states)?;
    template.expect(TemplateName::CodifySparse)?;
    let mut values = base_values(profile);
    values.insert("states", serde_json::to_string(states).expect("strings serialize"));
    let prompt = render(template, &values)?;
    let known: HashSet<&str> = states.iter().map(String::as_str).collect();
    let drafted = draft_loop(client, prompt, budget, |reply| {
        let draft: SparseDraft = serde_json::from_str(json_payload(reply))
            .map_err(|e| vec![format!("expected {{\"glosses\", \"specials\"}}: {e}")])?;
        let mut errs = Vec::new();
        let mut seen = HashSet::new();
        let mut specials = Vec::new();
        for (i, s) in draft.specials.into_iter().enumerate() {
            for name in [&s.source, &s.target] {
                if !known.contains(name.as_str()) {
                    errs.push(format!("special {i}: unknown state \"{name}\""));
                }
            }
            if s.question.trim().is_empty() {
                errs.push(format!("special {i}: empty question"));
            }
            if seen.insert((s.source.clone(), s.target.clone())) {
                specials.push(s);
            }
        }
        for g in draft.glosses.keys().filter(|g| !known.contains(g.as_str())) {
            log::warn!("ignoring gloss for unknown state \"{g}\"");
        }
        if !errs.is_empty() {
            return Err(errs);
        }
        let defaults = states
            .iter()
            .map(|s| default_question(s, draft.glosses.get(s).map(String::as_str)))
            .collect();
        Ok(QuestionBank::sparse(defaults, specials))
    })
    .map_err(codification_error)?;
    Ok(CodificationReport {
        question_count: drafted.value.question_count(),
        artifact: Artifact::Bank(drafted.value),
        mode: BankMode::Sparse,
        llm_calls: drafted.llm_calls,
        rejected_drafts: drafted.rejected_drafts,
        diagnostics: drafted.diagnostics,
    })
}

pub fn routing_questions(character_id: &str) -> Result<(String, String), CodifyError> {
    let mut v = BTreeMap::new();
    v.insert("character", character_id.to_string());
    Ok((
        PromptTemplate::builtin(TemplateName::Relevance).render(&v)?,
        PromptTemplate::builtin(TemplateName::Activity).render(&v)?,
    ))
}

/// Templates used by [`codify_character`], builtins unless overridden.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub extract: PromptTemplate,
    pub codify_grid: PromptTemplate,
    pub codify_sparse: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            extract: PromptTemplate::builtin(TemplateName::Extract),
            codify_grid: PromptTemplate::builtin(TemplateName::CodifyGrid),
            codify_sparse: PromptTemplate::builtin(TemplateName::CodifySparse),
        }
    }
}

impl TemplateSet {
    pub fn load(dir: &std::path::Path) -> Result<Self, CodifyError> {
        Ok(TemplateSet {
            extract: PromptTemplate::load(dir, TemplateName::Extract)?,
            codify_grid: PromptTemplate::load(dir, TemplateName::CodifyGrid)?,
            codify_sparse: PromptTemplate::load(dir, TemplateName::CodifySparse)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharacterCodification {
    pub model: CharacterStateModel,
    pub states: Vec<String>,
    /// One bank per machine id (derived grid banks in grid mode).
    pub banks: HashMap<String, QuestionBank>,
    pub extraction: Drafted<Vec<String>>,
    pub reports: Vec<(String, CodificationReport)>,
}

impl CharacterCodification {
    pub fn llm_calls(&self) -> u32 {
        self.extraction.llm_calls + self.reports.iter().map(|(_, r)| r.llm_calls).sum::<u32>()
    }

    pub fn rejected_drafts(&self) -> u32 {
        self.extraction.rejected_drafts
            + self.reports.iter().map(|(_, r)| r.rejected_drafts).sum::<u32>()
    }
}

/// Full path: extract once, codify every target, assemble and validate.
/// In sparse mode each machine is rule-less and its bank drives execution.
pub fn codify_character<C: ChatClient + ?Sized>(
    profile: &CharacterProfile,
    targets: &[MachineTarget],
    mode: BankMode,
    client: &C,
    templates: &TemplateSet,
    budget: u32,
) -> Result<CharacterCodification, CodifyError> {
    let extraction = extract_states(profile, client, &templates.extract, budget)?;
    let states = extraction.value.clone();
    let mut machines = Vec::new();
    let mut banks = HashMap::new();
    let mut reports = Vec::new();
    for target in targets {
        let report = match mode {
            BankMode::Grid => codify_machine(profile, &states, target, client, &templates.codify_grid, budget)?,
            BankMode::Sparse => codify_sparse(profile, &states, client, &templates.codify_sparse, budget)?,
        };
        let (machine, bank) = match &report.artifact {
            Artifact::Machine(m) => (m.clone(), grid_bank_from_machine(m)),
            Artifact::Bank(b) => (bare_machine(target, &states), b.clone()),
        };
        banks.insert(target.machine_id.clone(), bank);
        machines.push(machine);
        reports.push((target.machine_id.clone(), report));
    }
    let (relevance_question, activity_question) = routing_questions(&profile.character_id)?;
    let model = CharacterStateModel {
        character_id: profile.character_id.clone(),
        machines,
        relevance_question,
        activity_question,
    };
    let errors: Vec<String> = validate_model(&model)
        .into_iter()
        .filter(|d| d.severity == Severity::Error)
        .map(|d| d.to_string())
        .collect();
    if !errors.is_empty() {
        return Err(CodifyError::InvalidModel(errors.join("; ")));
    }
    Ok(CharacterCodification {
        model,
        states,
        banks,
        extraction,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::CannedClient;
    use crate::model::serialize_machine;

    fn profile() -> CharacterProfile {
        CharacterProfile {
            character_id: "Haruhi".into(),
            paragraphs: vec!["Haruhi is restless and easily bored.".into(), "".into()],
        }
    }

    fn extract(client: &CannedClient) -> Result<Drafted<Vec<String>>, CodifyError> {
        extract_states(&profile(), client, &PromptTemplate::builtin(TemplateName::Extract), 3)
    }

    fn states() -> Vec<String> {
        with_reserved(&["calm".into(), "angry".into()])
    }

    fn target() -> MachineTarget {
        MachineTarget::new("haruhi-mood", Dimension::Personality, Perspective::Active)
    }

    fn machine_doc(target_state: &str) -> String {
        format!(
            r#"{{"machine_id":"haruhi-mood","dimension":"personality","perspective":"active",
               "states":["Unactivated","calm","angry","Other"],"initial":"Unactivated",
               "rules":[{{"source":"Unactivated","priority":0,"guard":{{"kind":"always","target":"calm"}}}},
                        {{"source":"calm","priority":0,"guard":{{"kind":"question","question":"Is she insulted?","target":"{target_state}"}}}}]}}"#
        )
    }

    #[test]
    fn profile_requires_text() {
        assert!(CharacterProfile::parse(r#"{"character_id":"x","paragraphs":["  "]}"#).is_err());
        assert!(CharacterProfile::parse(r#"{"character_id":"x","paragraphs":["ok"]}"#).is_ok());
    }

    #[test]
    fn extraction_dedupes_and_forces_reserved() {
        let c = CannedClient::new([r#"["angry","calm","angry"]"#]);
        assert_eq!(extract(&c).unwrap().value, ["Unactivated", "angry", "calm", "Other"]);
        let c = CannedClient::new([r#"```json
["Other","happy","Unactivated"]
```"#]);
        assert_eq!(extract(&c).unwrap().value, ["Unactivated", "happy", "Other"]);
    }

    #[test]
    fn extraction_repairs_then_gives_up() {
        let c = CannedClient::new(["not json", "[]", r#"["a","b","c"]"#]);
        let d = extract(&c).unwrap();
        assert_eq!(d.value.len(), 5);
        assert_eq!((d.llm_calls, d.rejected_drafts), (3, 2));
        let c = CannedClient::new(["x", "y", "z"]);
        match extract(&c) {
            Err(CodifyError::Extraction { attempts, diagnostics }) => {
                assert_eq!(attempts, 3);
                assert_eq!(diagnostics.len(), 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn machine_accepted_first_pass() {
        let c = CannedClient::new([machine_doc("angry")]);
        let r = codify_machine(&profile(), &states(), &target(), &c, &PromptTemplate::builtin(TemplateName::CodifyGrid), 3)
            .unwrap();
        assert_eq!((r.llm_calls, r.rejected_drafts, r.question_count), (1, 0, 16));
        let prompt = &c.requests()[0].messages[0].content;
        assert!(prompt.contains("Haruhi is restless") && prompt.contains("\"calm\"") && prompt.contains("haruhi-mood"));
    }

    #[test]
    fn dangling_state_is_repaired() {
        let c = CannedClient::new([machine_doc("furious"), machine_doc("angry")]);
        let r = codify_machine(&profile(), &states(), &target(), &c, &PromptTemplate::builtin(TemplateName::CodifyGrid), 3)
            .unwrap();
        assert_eq!((r.llm_calls, r.rejected_drafts), (2, 1));
        let repair = &c.requests()[1];
        assert_eq!(repair.messages.len(), 3);
        assert!(repair.messages[2].content.contains("furious"));
    }

    #[test]
    fn budget_exhaustion_carries_every_diagnostic() {
        let c = CannedClient::new(["garbage one", "garbage two", "garbage three"]);
        let err = codify_machine(&profile(), &states(), &target(), &c, &PromptTemplate::builtin(TemplateName::CodifyGrid), 3)
            .unwrap_err();
        match err {
            CodifyError::Codification { attempts, diagnostics } => {
                assert_eq!(attempts, 3);
                assert_eq!(diagnostics.len(), 3);
                for (i, d) in diagnostics.iter().enumerate() {
                    assert!(d.starts_with(&format!("draft {}:", i + 1)));
                }
            }
            other => panic!("{other:?}"),
        }
        let last = &c.requests()[2].messages;
        assert!(last[last.len() - 1].content.contains("draft 2:"));
        assert!(last[last.len() - 1].content.contains("draft 1:"));
    }

    #[test]
    fn wrong_states_are_rejected() {
        let doc = machine_doc("angry").replace("\"calm\",\"angry\"", "\"angry\",\"calm\"");
        let c = CannedClient::new([doc]);
        assert!(codify_machine(&profile(), &states(), &target(), &c, &PromptTemplate::builtin(TemplateName::CodifyGrid), 1)
            .is_err());
    }

    #[test]
    fn sparse_accounting_and_dedupe() {
        let five = with_reserved(&["calm".into(), "angry".into(), "bored".into()]);
        let reply = r#"{"glosses":{"calm":"composed","nobody":"x"},
            "specials":[{"source":"calm","target":"angry","question":"Is she insulted?"},
                        {"source":"calm","target":"angry","question":"Again?"},
                        {"source":"angry","target":"calm","question":"Is she praised?"},
                        {"source":"bored","target":"angry","question":"Is the club cancelled?"}]}"#;
        let c = CannedClient::new([reply]);
        let r = codify_sparse(&profile(), &five, &c, &PromptTemplate::builtin(TemplateName::CodifySparse), 3).unwrap();
        assert_eq!(r.question_count, 8);
        let bank = r.bank().unwrap();
        assert_eq!(bank.specials.len(), 3);
        assert_eq!(bank.specials[0].question, "Is she insulted?");
        let defaults = bank.defaults.as_ref().unwrap();
        assert_eq!(defaults[1], "Given this action, is the character now best described as calm (composed)?");
        assert_eq!(defaults[2], "Given this action, is the character now best described as angry?");
    }

    #[test]
    fn sparse_unknown_state_triggers_repair() {
        let bad = r#"{"specials":[{"source":"calm","target":"sleepy","question":"q?"}]}"#;
        let c = CannedClient::new([bad, r#"{"specials":[]}"#]);
        let r = codify_sparse(&profile(), &states(), &c, &PromptTemplate::builtin(TemplateName::CodifySparse), 3).unwrap();
        assert_eq!((r.llm_calls, r.rejected_drafts, r.question_count), (2, 1, 4));
    }

    #[test]
    fn wrong_template_is_rejected() {
        let c = CannedClient::new(Vec::<String>::new());
        assert!(matches!(
            extract_states(&profile(), &c, &PromptTemplate::builtin(TemplateName::CodifyGrid), 3),
            Err(CodifyError::Template(_))
        ));
    }

    #[test]
    fn derived_grid_bank_uses_rule_questions() {
        let m = parse_machine(&machine_doc("angry")).unwrap();
        let bank = grid_bank_from_machine(&m);
        let grid = bank.grid.as_ref().unwrap();
        assert_eq!(bank.question_count(), 16);
        assert_eq!(grid[2][1], "Is she insulted?");
        assert_eq!(grid[1][1], move_question("calm", "calm"));
        bank.validate(&m).unwrap();
    }

    #[test]
    fn character_path_with_one_repair() {
        let c = CannedClient::new([
            r#"["calm","angry"]"#.to_string(),
            machine_doc("furious"),
            machine_doc("angry"),
        ]);
        let out = codify_character(&profile(), &[target()], BankMode::Grid, &c, &TemplateSet::default(), 3).unwrap();
        assert_eq!((out.llm_calls(), out.rejected_drafts()), (3, 1));
        assert_eq!(c.remaining(), 0);
        assert!(out.model.relevance_question.contains("Haruhi"));
        assert_eq!(serialize_machine(&out.model.machines[0]), serialize_machine(&parse_machine(&machine_doc("angry")).unwrap()));
    }
}
