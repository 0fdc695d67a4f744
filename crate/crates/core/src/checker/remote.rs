use std::collections::BTreeMap;

use super::{Checker, CheckerError, CheckerVerdict, Label, Query, VerdictSource};
use crate::client::{ChatClient, ChatCompletion, ChatMessage, ChatRequest, ClientError};
use crate::prompts::{PromptTemplate, TemplateName};

/// Label → log P(true) fallback when the backend returns no token logprobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemoteCheckerConfig {
    pub calibrated_true: f64,
    pub calibrated_false: f64,
    pub calibrated_unknown: f64,
    pub top_logprobs: u8,
}

impl Default for RemoteCheckerConfig {
    fn default() -> Self {
        RemoteCheckerConfig {
            calibrated_true: 0.9f64.ln(),
            calibrated_false: 0.1f64.ln(),
            calibrated_unknown: 0.5f64.ln(),
            top_logprobs: 5,
        }
    }
}

/// Discriminator behind a chat-completions endpoint.
pub struct RemoteChecker<C> {
    client: C,
    template: PromptTemplate,
    config: RemoteCheckerConfig,
}

impl<C: ChatClient> RemoteChecker<C> {
    pub fn new(client: C) -> Self {
        Self::with_template(client, PromptTemplate::builtin(TemplateName::Discriminate))
    }

    pub fn with_template(client: C, template: PromptTemplate) -> Self {
        RemoteChecker {
            client,
            template,
            config: RemoteCheckerConfig::default(),
        }
    }

    pub fn with_config(mut self, config: RemoteCheckerConfig) -> Self {
        self.config = config;
        self
    }

    fn interpret(&self, completion: &ChatCompletion) -> CheckerVerdict {
        let half = 0.5f64.ln();
        let word = first_word(&completion.content);
        let Some(label) = Label::parse(&word) else {
            let mut v = CheckerVerdict::new(
                Label::Unknown,
                self.config.calibrated_unknown,
                VerdictSource::Remote,
            );
            v.flagged = true;
            log::warn!("unparseable discriminator output: {:?}", completion.content);
            return v;
        };
        let token_lp = completion.tokens.first().map(|t| {
            let mut yes = None;
            let mut no = None;
            for (tok, lp) in std::iter::once((&t.token, t.logprob))
                .chain(t.top.iter().map(|(tok, lp)| (tok, *lp)))
            {
                match Label::parse(&first_word(tok)) {
                    Some(Label::True) => yes = Some(yes.map_or(lp, |y: f64| y.max(lp))),
                    Some(Label::False) => no = Some(no.map_or(lp, |n: f64| n.max(lp))),
                    _ => {}
                }
            }
            (yes, no)
        });
        let lp = match (label, token_lp) {
            (Label::True, Some((Some(yes), _))) => yes.max(half),
            (Label::True, _) => self.config.calibrated_true,
            (Label::False, Some((Some(yes), _))) => yes.min(half),
            (Label::False, Some((None, Some(no)))) => (-no.exp()).ln_1p().min(half),
            (Label::False, _) => self.config.calibrated_false,
            (Label::Unknown, _) => self.config.calibrated_unknown,
        };
        CheckerVerdict::new(label, lp.min(0.0), VerdictSource::Remote)
    }
}

fn first_word(s: &str) -> String {
    s.split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_string()
}

impl<C: ChatClient> Checker for RemoteChecker<C> {
    fn backend_id(&self) -> String {
        format!("remote:{}", self.client.model_name())
    }

    fn ask(&self, query: &Query<'_>) -> Result<CheckerVerdict, CheckerError> {
        if query.question.trim().is_empty() {
            return Err(CheckerError::EmptyQuestion);
        }
        let mut values = BTreeMap::new();
        values.insert("scene", query.scene.to_string());
        values.insert("text", query.text.to_string());
        values.insert("question", query.question.to_string());
        let prompt = self
            .template
            .render(&values)
            .map_err(|e| CheckerError::Backend(e.to_string()))?;
        let mut request = ChatRequest::new(vec![ChatMessage::user(prompt)]);
        request.top_logprobs = Some(self.config.top_logprobs);
        request.max_tokens = Some(1);
        let completion = self.client.complete(&request).map_err(|e| match e {
            ClientError::Exhausted { attempts, message } => CheckerError::Remote { attempts, message },
            other => CheckerError::Remote {
                attempts: 1,
                message: other.to_string(),
            },
        })?;
        Ok(self.interpret(&completion))
    }
}
