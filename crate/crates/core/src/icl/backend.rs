use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::textdata::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capability {
    pub scorer: bool,
    pub generator: bool,
}

impl Capability {
    pub fn can_score(self) -> bool {
        self.scorer
    }

    pub fn can_generate(self) -> bool {
        self.generator
    }
}

/// A language model as seen by the harness: it either scores a candidate
/// completion of a prompt, or produces free text, or both.
pub trait ScoringBackend: Send + Sync {
    fn name(&self) -> &str;

    fn capability(&self) -> Capability;

    fn score(&self, _prompt: &str, _candidate: &str) -> Result<f64> {
        Err(Error::config(format!("backend {} has no scorer", self.name())))
    }

    fn generate(&self, _prompt: &str) -> Result<String> {
        Err(Error::config(format!("backend {} has no generator", self.name())))
    }

    /// Results come back in submission order.
    fn generate_batch(&self, prompts: &[String]) -> Vec<Result<String>> {
        prompts.iter().map(|p| self.generate(p)).collect()
    }
}

/// Deterministic scorer: the candidate's own occurrence is removed from the
/// prompt (its last one), then every remaining prompt token that also appears
/// in the candidate counts one point.
#[derive(Debug, Clone, Default)]
pub struct OverlapScorer;

impl OverlapScorer {
    pub fn overlap(prompt: &str, candidate: &str) -> usize {
        let context = match prompt.rfind(candidate) {
            Some(pos) if !candidate.is_empty() => format!("{} {}", &prompt[..pos], &prompt[pos + candidate.len()..]),
            _ => prompt.to_owned(),
        };
        let wanted = tokenize(candidate);
        tokenize(&context).iter().filter(|t| wanted.contains(t)).count()
    }
}

impl ScoringBackend for OverlapScorer {
    fn name(&self) -> &str {
        "mock-overlap"
    }

    fn capability(&self) -> Capability {
        Capability {
            scorer: true,
            generator: false,
        }
    }

    fn score(&self, prompt: &str, candidate: &str) -> Result<f64> {
        Ok(Self::overlap(prompt, candidate) as f64)
    }
}

/// Generator that replays canned completions in a cycle.
#[derive(Debug)]
pub struct ScriptedGenerator {
    responses: Vec<String>,
    cursor: AtomicUsize,
}

impl ScriptedGenerator {
    pub fn new(responses: Vec<String>) -> Result<Self> {
        if responses.is_empty() {
            return Err(Error::config("scripted generator needs at least one response"));
        }
        Ok(Self {
            responses,
            cursor: AtomicUsize::new(0),
        })
    }
}

impl ScoringBackend for ScriptedGenerator {
    fn name(&self) -> &str {
        "mock-scripted"
    }

    fn capability(&self) -> Capability {
        Capability {
            scorer: false,
            generator: true,
        }
    }

    fn generate(&self, _prompt: &str) -> Result<String> {
        let i = self.cursor.fetch_add(1, Ordering::Relaxed);
        Ok(self.responses[i % self.responses.len()].clone())
    }
}
