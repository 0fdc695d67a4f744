use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{assemble_prompt, HarnessError, PromptContext};
use crate::checker::{Checker, SampledChecker};
use crate::client::{ChatClient, ChatMessage, ChatRequest};
use crate::engine::{initial_states, step_character, SceneAction};
use crate::model::{CharacterStateModel, StateId};
use crate::pfsm::{pstep_character, sample_state, QuestionBank, StateDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplorationStrategy {
    Deterministic,
    SampledStateDist,
    RandomStateDist,
    SampledChecker,
    GeneratorTemperature(f64),
}

impl ExplorationStrategy {
    pub fn name(&self) -> String {
        match self {
            Self::Deterministic => "deterministic".into(),
            Self::SampledStateDist => "sampled-state-dist".into(),
            Self::RandomStateDist => "random-state-dist".into(),
            Self::SampledChecker => "sampled-checker".into(),
            Self::GeneratorTemperature(t) => format!("generator-temperature:{t}"),
        }
    }

    /// Seed-stream tag; each strategy draws from its own streams.
    fn tag(&self) -> u64 {
        match self {
            Self::Deterministic => 1,
            Self::SampledStateDist => 2,
            Self::RandomStateDist => 3,
            Self::SampledChecker => 4,
            Self::GeneratorTemperature(_) => 5,
        }
    }

    pub fn check(&self) -> Result<(), HarnessError> {
        match self {
            Self::GeneratorTemperature(t) if !(*t >= 0.0) => Err(HarnessError::NegativeTemperature(*t)),
            _ => Ok(()),
        }
    }
}

impl FromStr for ExplorationStrategy {
    type Err = HarnessError;

    /// Accepts the full names plus `sampled-dist`, `random-dist` and
    /// `temperature[:t]` (default 0.3).
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let strategy = match (head, arg) {
            ("deterministic", None) => Self::Deterministic,
            ("sampled-state-dist" | "sampled-dist", None) => Self::SampledStateDist,
            ("random-state-dist" | "random-dist", None) => Self::RandomStateDist,
            ("sampled-checker", None) => Self::SampledChecker,
            ("generator-temperature" | "temperature", a) => Self::GeneratorTemperature(
                a.map_or(Ok(0.3), str::parse)
                    .map_err(|_| HarnessError::UnknownStrategy(s.to_string()))?,
            ),
            _ => return Err(HarnessError::UnknownStrategy(s.to_string())),
        };
        strategy.check()?;
        Ok(strategy)
    }
}

/// One sampled rollout over an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub index: usize,
    /// Grounded (machine, state) pairs per step, declaration order.
    pub states: Vec<Vec<(String, String)>>,
    pub prompts: Vec<String>,
    pub responses: Vec<String>,
    pub temperature: Option<f64>,
}

impl Rollout {
    pub fn trajectory_text(&self) -> String {
        let mut out = String::new();
        for (t, step) in self.states.iter().enumerate() {
            let parts: Vec<String> = step.iter().map(|(m, s)| format!("{m}={s}")).collect();
            let _ = writeln!(out, "{t}: {}", parts.join(", "));
        }
        out
    }

    /// What the judge sees: generated responses if any, else the trajectory.
    pub fn candidate(&self) -> String {
        if self.responses.is_empty() {
            self.trajectory_text()
        } else {
            self.responses.join("\n")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("judge failed: {0}")]
pub struct JudgeError(pub String);

pub trait Judge: Sync {
    fn name(&self) -> String;
    fn score(&self, episode: &[SceneAction], rollout: &Rollout) -> Result<f64, JudgeError>;
}

/// Deterministic judge for tests: a score in 0..=100 derived from a hash of
/// the candidate.
pub struct StubJudge;

impl Judge for StubJudge {
    fn name(&self) -> String {
        "stub".into()
    }

    fn score(&self, _: &[SceneAction], rollout: &Rollout) -> Result<f64, JudgeError> {
        let digest = Sha256::digest(rollout.candidate().as_bytes());
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        Ok((u64::from_le_bytes(head) % 101) as f64)
    }
}

/// Entailment judge: 100 entailment, 50 neutral, 0 contradiction.
pub struct NliJudge<C> {
    pub client: C,
    pub reference: String,
}

impl<C: ChatClient> Judge for NliJudge<C> {
    fn name(&self) -> String {
        format!("nli:{}", self.client.model_name())
    }

    fn score(&self, _: &[SceneAction], rollout: &Rollout) -> Result<f64, JudgeError> {
        let prompt = format!(
            "Premise:\n{}\n\nHypothesis:\n{}\n\nDoes the premise entail the hypothesis? \
             Answer with exactly one word: entailment, neutral, or contradiction.",
            self.reference,
            rollout.candidate()
        );
        let reply = self
            .client
            .complete(&ChatRequest::new(vec![ChatMessage::user(prompt)]))
            .map_err(|e| JudgeError(e.to_string()))?;
        let word = reply.content.trim().to_lowercase();
        if word.starts_with("entail") {
            Ok(100.0)
        } else if word.starts_with("neutral") {
            Ok(50.0)
        } else if word.starts_with("contradict") {
            Ok(0.0)
        } else {
            Err(JudgeError(format!("unrecognised verdict {:?}", reply.content)))
        }
    }
}

/// External role-play model.
pub trait Generator: Sync {
    fn generate(&self, prompt: &str, temperature: Option<f64>) -> Result<String, String>;
}

pub struct RemoteGenerator<C> {
    pub client: C,
    pub default_temperature: f64,
}

impl<C: ChatClient> Generator for RemoteGenerator<C> {
    fn generate(&self, prompt: &str, temperature: Option<f64>) -> Result<String, String> {
        let mut req = ChatRequest::new(vec![ChatMessage::user(prompt)]);
        req.temperature = temperature.unwrap_or(self.default_temperature);
        self.client
            .complete(&req)
            .map(|c| c.content)
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestKResult {
    pub strategy: String,
    pub k: usize,
    /// Indexed by sample; `None` where the judge failed.
    pub per_sample_scores: Vec<Option<f64>>,
    pub best: f64,
    pub rollouts: Vec<Rollout>,
}

impl BestKResult {
    /// Best over the first `k` samples.
    pub fn best_at(&self, k: usize) -> Option<f64> {
        self.per_sample_scores
            .iter()
            .take(k)
            .flatten()
            .copied()
            .reduce(f64::max)
    }
}

/// Everything a rollout needs besides the strategy.
pub struct RolloutEnv<'a> {
    pub model: &'a CharacterStateModel,
    pub checker: &'a dyn Checker,
    /// Required by the sampled-state-dist strategy.
    pub banks: Option<&'a HashMap<String, QuestionBank>>,
    pub generator: Option<&'a dyn Generator>,
    pub context: PromptContext,
}

impl<'a> RolloutEnv<'a> {
    pub fn new(model: &'a CharacterStateModel, checker: &'a dyn Checker) -> Self {
        RolloutEnv {
            model,
            checker,
            banks: None,
            generator: None,
            context: PromptContext::new("", ""),
        }
    }
}

fn rollout_rng(seed: u64, tag: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 32) | index as u64);
    rng
}

fn rollout(
    episode: &[SceneAction],
    env: &RolloutEnv<'_>,
    strategy: ExplorationStrategy,
    seed: u64,
    index: usize,
) -> Result<Rollout, HarnessError> {
    let model = env.model;
    let mut rng = rollout_rng(seed, strategy.tag(), index);
    let fail = |e: &dyn std::fmt::Display| HarnessError::Rollout(e.to_string());
    let mut grounded_steps: Vec<HashMap<String, StateId>> = Vec::with_capacity(episode.len());
    match strategy {
        ExplorationStrategy::Deterministic
        | ExplorationStrategy::GeneratorTemperature(_)
        | ExplorationStrategy::SampledChecker => {
            let sampled;
            let checker: &dyn Checker = if strategy == ExplorationStrategy::SampledChecker {
                sampled = SampledChecker::from_rng(env.checker, rng.clone());
                &sampled
            } else {
                env.checker
            };
            let mut states = initial_states(model);
            for sa in episode {
                states = step_character(model, &states, sa, checker).map_err(|e| fail(&e))?.next_states();
                grounded_steps.push(states.clone());
            }
        }
        ExplorationStrategy::SampledStateDist => {
            let banks = env.banks.ok_or_else(|| {
                HarnessError::MissingBank(strategy.name(), model.machines.first().map_or(String::new(), |m| m.machine_id.clone()))
            })?;
            if let Some(m) = model.machines.iter().find(|m| !banks.contains_key(&m.machine_id)) {
                return Err(HarnessError::MissingBank(strategy.name(), m.machine_id.clone()));
            }
            let mut dists: HashMap<String, StateDistribution> = model
                .machines
                .iter()
                .map(|m| (m.machine_id.clone(), StateDistribution::one_hot(m.state_count(), m.initial)))
                .collect();
            for sa in episode {
                dists = pstep_character(model, banks, &dists, sa, env.checker)
                    .map_err(|e| fail(&e))?
                    .distributions();
                grounded_steps.push(
                    model
                        .machines
                        .iter()
                        .map(|m| (m.machine_id.clone(), sample_state(&dists[&m.machine_id], &mut rng)))
                        .collect(),
                );
            }
        }
        ExplorationStrategy::RandomStateDist => {
            for _ in episode {
                grounded_steps.push(
                    model
                        .machines
                        .iter()
                        .map(|m| (m.machine_id.clone(), StateId(rng.gen_range(0..m.state_count()))))
                        .collect(),
                );
            }
        }
    }
    let temperature = match strategy {
        ExplorationStrategy::GeneratorTemperature(t) => Some(t),
        _ => None,
    };
    let mut out = Rollout {
        index,
        states: Vec::with_capacity(episode.len()),
        prompts: Vec::with_capacity(episode.len()),
        responses: Vec::new(),
        temperature,
    };
    for (sa, states) in episode.iter().zip(&grounded_steps) {
        out.states.push(
            model
                .machines
                .iter()
                .map(|m| (m.machine_id.clone(), m.state_name(states[&m.machine_id]).to_string()))
                .collect(),
        );
        let prompt = assemble_prompt(&env.context.clone().ground_states(model, states), sa);
        if let Some(g) = env.generator {
            out.responses.push(g.generate(&prompt, temperature).map_err(|e| fail(&e))?);
        }
        out.prompts.push(prompt);
    }
    Ok(out)
}

/// Runs `k` independent rollouts and keeps every judge score. Rollout `j`
/// depends only on (`seed`, strategy, `j`).
pub fn run_bestk(
    episode: &[SceneAction],
    env: &RolloutEnv<'_>,
    strategy: ExplorationStrategy,
    k: usize,
    judge: &dyn Judge,
    seed: u64,
) -> Result<BestKResult, HarnessError> {
    if k == 0 {
        return Err(HarnessError::ZeroK);
    }
    strategy.check()?;
    let rollouts: Vec<Rollout> = (0..k)
        .into_par_iter()
        .map(|j| rollout(episode, env, strategy, seed, j))
        .collect::<Result<_, _>>()?;
    let mut last_error = None;
    let per_sample_scores: Vec<Option<f64>> = rollouts
        .iter()
        .map(|r| match judge.score(episode, r) {
            Ok(s) => Some(s),
            Err(e) => {
                log::warn!("sample {}: {e}", r.index);
                last_error = Some(e);
                None
            }
        })
        .collect();
    let best = per_sample_scores
        .iter()
        .flatten()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| HarnessError::AllJudgesFailed(last_error.map_or_else(String::new, |e| e.to_string())))?;
    Ok(BestKResult {
        strategy: strategy.name(),
        k,
        per_sample_scores,
        best,
        rollouts,
    })
}
