use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scripted::{default_false_logprob, default_true_logprob};
use super::{Checker, CheckerError, CheckerVerdict, Label, Query};

/// Draws a yes/no label with P(true) = exp(inner logprob).
///
/// The returned logprob is replaced with the configured value for the sampled
/// label, so downstream consumers see a coherent verdict.
pub struct SampledChecker<C> {
    inner: C,
    rng: Mutex<ChaCha8Rng>,
    true_logprob: f64,
    false_logprob: f64,
}

impl<C: Checker> SampledChecker<C> {
    pub fn new(inner: C, seed: u64) -> Self {
        Self::from_rng(inner, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng(inner: C, rng: ChaCha8Rng) -> Self {
        SampledChecker {
            inner,
            rng: Mutex::new(rng),
            true_logprob: default_true_logprob(),
            false_logprob: default_false_logprob(),
        }
    }

    pub fn with_logprobs(mut self, true_logprob: f64, false_logprob: f64) -> Self {
        self.true_logprob = true_logprob;
        self.false_logprob = false_logprob;
        self
    }
}

impl<C: Checker> Checker for SampledChecker<C> {
    fn backend_id(&self) -> String {
        format!("sampled({})", self.inner.backend_id())
    }

    fn ask(&self, query: &Query<'_>) -> Result<CheckerVerdict, CheckerError> {
        let mut v = self.inner.ask(query)?;
        let p_true = v.true_logprob.exp().clamp(0.0, 1.0);
        let draw: f64 = self.rng.lock().unwrap().gen();
        if draw < p_true {
            v.label = Label::True;
            v.true_logprob = self.true_logprob;
        } else {
            v.label = Label::False;
            v.true_logprob = self.false_logprob;
        }
        Ok(v)
    }
}
