//! Experiment harness: scene segmentation, grounded prompt assembly,
//! Best@K exploration and result emission.

mod bestk;
pub mod config;
mod emit;

pub use bestk::{
    run_bestk, BestKResult, ExplorationStrategy, Generator, Judge, JudgeError, NliJudge,
    RemoteGenerator, Rollout, RolloutEnv, StubJudge,
};
pub use emit::{
    bestk_csv, bestk_plotdata, emit_bestk, emit_eval, eval_csv, eval_plotdata, write_output, OutputFormat,
};

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SceneAction;
use crate::model::{CharacterStateModel, StateId};
use crate::pfsm::StateDistribution;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("sentences_per_step must be at least 1")]
    ZeroStep,
    #[error("temperature must be non-negative, got {0}")]
    NegativeTemperature(f64),
    #[error("unknown strategy \"{0}\"")]
    UnknownStrategy(String),
    #[error("strategy {0} needs a question bank for machine \"{1}\"")]
    MissingBank(String, String),
    #[error("every judge call failed: {0}")]
    AllJudgesFailed(String),
    #[error("nothing to emit")]
    EmptyResults,
    #[error("rollout failed: {0}")]
    Rollout(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepBatch {
    pub sentences_per_step: usize,
    pub segments: Vec<SceneAction>,
}

const CLOSERS: [char; 6] = ['"', '\'', '\u{201d}', '\u{2019}', '\u{bb}', ')'];

/// Splits text into sentences on `.`, `!`, `?` (with any trailing closing
/// quotes or brackets) followed by whitespace or the end of the text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        cur.push(c);
        i += 1;
        if matches!(c, '.' | '!' | '?') {
            while i < chars.len() && (matches!(chars[i], '.' | '!' | '?') || CLOSERS.contains(&chars[i])) {
                cur.push(chars[i]);
                i += 1;
            }
            if i == chars.len() || chars[i].is_whitespace() {
                push_normalized(&mut out, &cur);
                cur.clear();
            }
        }
    }
    push_normalized(&mut out, &cur);
    out
}

fn push_normalized(out: &mut Vec<String>, s: &str) {
    let s = normalize_whitespace(s);
    if !s.is_empty() {
        out.push(s);
    }
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Groups consecutive sentences into actions of `sentences_per_step`.
pub fn segment_scene(text: &str, sentences_per_step: usize) -> Result<StepBatch, HarnessError> {
    if sentences_per_step == 0 {
        return Err(HarnessError::ZeroStep);
    }
    let segments = split_sentences(text)
        .chunks(sentences_per_step)
        .map(|c| SceneAction::action(c.join(" ")))
        .collect();
    Ok(StepBatch {
        sentences_per_step,
        segments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroundedState {
    State(String),
    Distribution(Vec<(String, f64)>),
}

/// Instructions for the role-play model plus the grounded state block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub global_instruction: String,
    pub character_instruction: String,
    /// One entry per machine, declaration order.
    pub grounded: Vec<(String, GroundedState)>,
}

impl PromptContext {
    pub fn new(global: impl Into<String>, character: impl Into<String>) -> Self {
        PromptContext {
            global_instruction: global.into(),
            character_instruction: character.into(),
            grounded: Vec::new(),
        }
    }

    pub fn ground_states(mut self, model: &CharacterStateModel, states: &HashMap<String, StateId>) -> Self {
        self.grounded = model
            .machines
            .iter()
            .filter_map(|m| {
                let s = states.get(&m.machine_id)?;
                Some((m.machine_id.clone(), GroundedState::State(m.state_name(*s).to_string())))
            })
            .collect();
        self
    }

    pub fn ground_distributions(
        mut self,
        model: &CharacterStateModel,
        dists: &HashMap<String, StateDistribution>,
    ) -> Self {
        self.grounded = model
            .machines
            .iter()
            .filter_map(|m| {
                let d = dists.get(&m.machine_id)?;
                let entries = m.states.iter().cloned().zip(d.probs().iter().copied()).collect();
                Some((m.machine_id.clone(), GroundedState::Distribution(entries)))
            })
            .collect();
        self
    }
}

/// Deterministic prompt: I_g, I_x with the state block, then scene and action.
pub fn assemble_prompt(ctx: &PromptContext, sa: &SceneAction) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", ctx.global_instruction.trim_end());
    let _ = writeln!(out);
    let _ = writeln!(out, "{}", ctx.character_instruction.trim_end());
    if !ctx.grounded.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "Current state:");
        for (machine, state) in &ctx.grounded {
            match state {
                GroundedState::State(s) => {
                    let _ = writeln!(out, "- {machine}: {s}");
                }
                GroundedState::Distribution(entries) => {
                    let parts: Vec<String> = entries
                        .iter()
                        .filter(|(_, p)| *p >= 0.005)
                        .map(|(s, p)| format!("{s} {p:.2}"))
                        .collect();
                    let _ = writeln!(out, "- {machine}: {}", parts.join(", "));
                }
            }
        }
    }
    let _ = writeln!(out);
    if !sa.scene_text.trim().is_empty() {
        let _ = writeln!(out, "Scene: {}", sa.scene_text.trim());
    }
    let _ = write!(out, "Action: {}", sa.action_text.trim());
    out
}
