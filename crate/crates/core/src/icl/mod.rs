//! In-context learning harness.
//!
//! A prompt pairs a template (with one `[Mask]` slot and one `{x}` input
//! slot) with a verbalizer that turns each label into text. Zero-shot
//! prediction instantiates the template once per label and picks the
//! best-scoring string; few-shot prediction prefixes `k` instantiated
//! demonstrations joined by a separator.

mod backend;
mod chat;
mod resources;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backend::{Capability, OverlapScorer, ScoringBackend, ScriptedGenerator};
pub use chat::{ChatClient, ChatConfig, DEFAULT_API_KEY_ENV};
pub use resources::{PromptLibrary, PromptResource};

use crate::error::{Error, Result};
use crate::eval::{Method, RunResult};
use crate::textdata::{Example, TaskSpec};

pub const MASK: &str = "[Mask]";
pub const INPUT_SLOT: &str = "{x}";
pub const CONTEXT_MARKER: &str = "[CONTEXT]";
pub const QUESTION_MARKER: &str = "[QUESTION]";
pub const DEFAULT_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Input,
    Mask,
}

/// Prompt skeleton with exactly one `[Mask]` and one `{x}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    body: String,
    segments: Vec<Segment>,
}

impl Template {
    pub fn new(body: &str) -> Result<Self> {
        let masks = body.matches(MASK).count();
        if masks != 1 {
            return Err(Error::config(format!("template must contain exactly one {MASK}, found {masks}")));
        }
        let inputs = body.matches(INPUT_SLOT).count();
        if inputs != 1 {
            return Err(Error::config(format!(
                "template must contain exactly one {INPUT_SLOT} input slot, found {inputs}"
            )));
        }
        let ctx = body.matches(CONTEXT_MARKER).count();
        let q = body.matches(QUESTION_MARKER).count();
        if ctx > 1 || q > 1 {
            return Err(Error::config("section markers may appear at most once"));
        }
        if let (Some(c), Some(qp)) = (body.find(CONTEXT_MARKER), body.find(QUESTION_MARKER)) {
            if c > qp {
                return Err(Error::config(format!("{CONTEXT_MARKER} must precede {QUESTION_MARKER}")));
            }
        }
        let mut segments = Vec::new();
        let mut rest = body;
        while !rest.is_empty() {
            let next = [(rest.find(MASK), Segment::Mask, MASK.len()), (rest.find(INPUT_SLOT), Segment::Input, INPUT_SLOT.len())]
                .into_iter()
                .filter_map(|(pos, seg, len)| pos.map(|p| (p, seg, len)))
                .min_by_key(|(p, _, _)| *p);
            match next {
                Some((pos, seg, len)) => {
                    if pos > 0 {
                        segments.push(Segment::Text(rest[..pos].to_owned()));
                    }
                    segments.push(seg);
                    rest = &rest[pos + len..];
                }
                None => {
                    segments.push(Segment::Text(rest.to_owned()));
                    rest = "";
                }
            }
        }
        Ok(Self {
            body: body.to_owned(),
            segments,
        })
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Fills the slots. A literal `[Mask]` inside the input is defused so the
    /// rendered string never carries an unfilled mask.
    pub fn fill(&self, input: &str, answer: &str) -> String {
        let input = input.replace(MASK, "(Mask)");
        let mut out = String::with_capacity(self.body.len() + input.len() + answer.len());
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Input => out.push_str(&input),
                Segment::Mask => out.push_str(answer),
            }
        }
        out
    }
}

/// Label index → answer text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verbalizer {
    labels: Vec<String>,
}

impl Verbalizer {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::config("verbalizer is empty"));
        }
        for (i, l) in labels.iter().enumerate() {
            if l.trim().is_empty() {
                return Err(Error::config(format!("verbalizer entry {i} is empty")));
            }
            if labels[..i].contains(l) {
                return Err(Error::config(format!("verbalizer string {l:?} used twice")));
            }
        }
        Ok(Self { labels })
    }

    pub fn get(&self, label: usize) -> Option<&str> {
        self.labels.get(label).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.labels.iter().map(String::as_str).enumerate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Swahili template, verbalizer, demonstrations and test posts.
    Swahili,
    /// English template and verbalizer over Swahili demonstrations and test posts.
    CrossLingual,
    /// English template over English posts.
    English,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Swahili, Strategy::CrossLingual, Strategy::English];

    pub fn template_language(self) -> &'static str {
        match self {
            Strategy::Swahili => "sw",
            Strategy::CrossLingual | Strategy::English => "en",
        }
    }

    pub fn example_language(self) -> &'static str {
        match self {
            Strategy::Swahili | Strategy::CrossLingual => "sw",
            Strategy::English => "en",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Swahili => "Swahili",
            Strategy::CrossLingual => "Cross-lingual",
            Strategy::English => "English",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Input-output pairs only.
    #[default]
    ExamplesOnly,
    /// Task definition and constraints ahead of the pairs.
    InstructionDemo,
}

/// Report label for a (k, mode) combination.
pub fn setting_label(k: usize, mode: PromptMode) -> &'static str {
    match (k, mode) {
        (0, _) => "Zero-shot",
        (_, PromptMode::ExamplesOnly) => "Few-shot (Examples)",
        (_, PromptMode::InstructionDemo) => "Few-shot (Demonstration)",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub template: Template,
    pub verbalizer: Verbalizer,
    pub strategy: Strategy,
    pub separator: String,
    /// Present only in instruction-demo mode.
    pub instruction: Option<String>,
}

/// Which corpus language demonstrations and test posts must come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoConstraints {
    pub demo_language: String,
    pub test_language: String,
}

/// Resolves the (task, strategy, mode) combination against the prompt files.
pub fn build_strategy_prompt(
    library: &PromptLibrary,
    task: &TaskSpec,
    strategy: Strategy,
    mode: PromptMode,
    separator: &str,
) -> Result<(Prompt, DemoConstraints)> {
    let res = library.load(task, strategy.template_language())?;
    let instruction = match mode {
        PromptMode::ExamplesOnly => None,
        PromptMode::InstructionDemo => Some(res.instruction.clone().ok_or_else(|| {
            Error::config(format!(
                "prompt resource for task {} ({}) has no INSTRUCTION section",
                task.task_id,
                strategy.template_language()
            ))
        })?),
    };
    let prompt = Prompt {
        template: res.template,
        verbalizer: res.verbalizer,
        strategy,
        separator: separator.to_owned(),
        instruction,
    };
    let lang = strategy.example_language().to_owned();
    Ok((
        prompt,
        DemoConstraints {
            demo_language: lang.clone(),
            test_language: lang,
        },
    ))
}

/// `P(x, y)`: the template filled with the post and the verbalized label.
pub fn instantiate(prompt: &Prompt, x: &Example, y: usize) -> Result<String> {
    let answer = prompt
        .verbalizer
        .get(y)
        .ok_or_else(|| Error::contract(format!("label {y} has no verbalizer entry")))?;
    Ok(prompt.template.fill(&x.text, answer))
}

/// One scored alternative: the label, its answer text, and the full prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub label: usize,
    pub candidate: String,
    pub text: String,
}

fn preamble(prompt: &Prompt) -> String {
    prompt
        .instruction
        .as_ref()
        .map(|i| format!("{}\n", i.trim_end()))
        .unwrap_or_default()
}

pub fn render_zero_shot(prompt: &Prompt, x_test: &Example) -> Result<Vec<Rendered>> {
    render_few_shot(prompt, &DemoSet::default(), x_test)
}

/// `P(x₁,y₁) [sep] … [sep] P(x_k,y_k) [sep] P(x, y)` for every candidate y.
pub fn render_few_shot(prompt: &Prompt, demos: &DemoSet, x_test: &Example) -> Result<Vec<Rendered>> {
    let mut prefix = preamble(prompt);
    for d in &demos.examples {
        prefix.push_str(&instantiate(prompt, d, d.label)?);
        prefix.push_str(&prompt.separator);
    }
    prompt
        .verbalizer
        .iter()
        .map(|(label, candidate)| {
            Ok(Rendered {
                label,
                candidate: candidate.to_owned(),
                text: format!("{prefix}{}", instantiate(prompt, x_test, label)?),
            })
        })
        .collect()
}

/// Prompt for generator backends: demonstrations as usual, the test segment
/// with a blank in place of the mask, and the allowed answers listed.
pub fn render_generation_prompt(prompt: &Prompt, demos: &DemoSet, x_test: &Example) -> Result<String> {
    let mut out = preamble(prompt);
    for d in &demos.examples {
        out.push_str(&instantiate(prompt, d, d.label)?);
        out.push_str(&prompt.separator);
    }
    out.push_str(&prompt.template.fill(&x_test.text, "___"));
    let options: Vec<&str> = prompt.verbalizer.iter().map(|(_, s)| s).collect();
    out.push_str(&format!("\nAnswer with one of: {}", options.join(" | ")));
    Ok(out)
}

/// k demonstrations, in the order they will appear in the prompt.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemoSet {
    pub examples: Vec<Example>,
}

impl DemoSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Uniform draw of `k` examples without replacement.
    pub fn sample(pool: &[Example], k: usize, seed: u64) -> Result<Self> {
        if k > pool.len() {
            return Err(Error::Sampling {
                what: "demonstrations".into(),
                required: k,
                available: pool.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            examples: pool.choose_multiple(&mut rng, k).cloned().collect(),
        })
    }
}

/// Argmax of σ over the candidates; ties go to the lowest label index.
pub fn predict_argmax(backend: &dyn ScoringBackend, rendered: &[Rendered]) -> Result<usize> {
    if !backend.capability().can_score() {
        return Err(Error::config(format!("backend {} cannot score candidates", backend.name())));
    }
    let mut best: Option<(usize, f64)> = None;
    for r in rendered {
        let s = backend.score(&r.text, &r.candidate).map_err(|e| {
            Error::Transport(format!("scoring candidate {} ({:?}): {e}", r.label, r.candidate))
        })?;
        match best {
            Some((bl, bs)) if s < bs || (s == bs && r.label > bl) => {}
            _ => best = Some((r.label, s)),
        }
    }
    best.map(|(l, _)| l).ok_or_else(|| Error::contract("no candidates to score"))
}

/// Lowercase, strip punctuation, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Maps a completion to a label: exact match first, then whole-word
/// containment, preferring the longest verbalizer string. Ambiguity or no
/// match yields `None`.
pub fn parse_generation(completion: &str, verbalizer: &Verbalizer) -> Option<usize> {
    let norm = normalize_answer(completion);
    let options: Vec<(usize, String)> = verbalizer.iter().map(|(l, s)| (l, normalize_answer(s))).collect();
    if let Some((l, _)) = options.iter().find(|(_, s)| *s == norm) {
        return Some(*l);
    }
    let words: Vec<&str> = norm.split(' ').collect();
    let contains = |needle: &str| {
        let n: Vec<&str> = needle.split(' ').collect();
        !n.is_empty() && words.windows(n.len()).any(|w| w == n.as_slice())
    };
    let mut hits: Vec<(usize, usize)> = options
        .iter()
        .filter(|(_, s)| !s.is_empty() && contains(s))
        .map(|(l, s)| (*l, s.split(' ').count()))
        .collect();
    hits.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    match hits.as_slice() {
        [] => None,
        [(l, _)] => Some(*l),
        [(l, n1), (_, n2), ..] if n1 > n2 => Some(*l),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GenerationOutcome {
    Label(usize),
    Unparsed(String),
}

pub fn predict_via_generation(
    backend: &dyn ScoringBackend,
    prompt_text: &str,
    verbalizer: &Verbalizer,
) -> Result<GenerationOutcome> {
    if !backend.capability().can_generate() {
        return Err(Error::config(format!("backend {} cannot generate", backend.name())));
    }
    let completion = backend.generate(prompt_text)?;
    Ok(match parse_generation(&completion, verbalizer) {
        Some(l) => GenerationOutcome::Label(l),
        None => GenerationOutcome::Unparsed(completion),
    })
}

/// Keeps the head and tail of an over-long post, dropping the middle.
/// Budget is in whitespace tokens. Returns the text and whether it was cut.
pub fn truncate_middle(text: &str, max_tokens: usize) -> (String, bool) {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= max_tokens || max_tokens == 0 {
        return (text.to_owned(), false);
    }
    let head = max_tokens.div_ceil(2);
    let tail = max_tokens - head;
    let mut out = words[..head].join(" ");
    out.push_str(" ... ");
    out.push_str(&words[words.len() - tail..].join(" "));
    (out, true)
}

/// Parameters of one in-context run.
#[derive(Debug, Clone, PartialEq)]
pub struct IclRunSpec {
    pub strategy: Strategy,
    pub mode: PromptMode,
    pub k: usize,
    pub separator: String,
    pub max_input_tokens: Option<usize>,
    pub seed: u64,
    pub model_label: String,
}

#[derive(Debug, Clone)]
pub struct IclRunOutput {
    pub result: RunResult,
    pub truncated: usize,
}

/// Renders, scores or generates, and collects one run over `test`.
/// Demonstrations are drawn from `demo_pool` with the run seed.
pub fn run_icl(
    backend: &dyn ScoringBackend,
    library: &PromptLibrary,
    task: &TaskSpec,
    spec: &IclRunSpec,
    demo_pool: &[Example],
    test: &[Example],
) -> Result<IclRunOutput> {
    let (prompt, _) = build_strategy_prompt(library, task, spec.strategy, spec.mode, &spec.separator)?;
    // Corpus language codes are the caller's business; demonstrations and
    // test posts only have to agree with each other.
    if let Some(first) = test.first() {
        if let Some(bad) = demo_pool.iter().chain(test).find(|e| e.language != first.language) {
            return Err(Error::config(format!(
                "{} strategy mixes languages: {} is {:?}, test posts are {:?}",
                spec.strategy, bad.id, bad.language, first.language
            )));
        }
    }
    let demos = DemoSet::sample(demo_pool, spec.k, spec.seed)?;
    let mut truncated = 0;
    let clip = |ex: &Example, truncated: &mut usize| -> Example {
        match spec.max_input_tokens {
            Some(budget) => {
                let (text, cut) = truncate_middle(&ex.text, budget);
                *truncated += usize::from(cut);
                Example { text, ..ex.clone() }
            }
            None => ex.clone(),
        }
    };
    let demos = DemoSet {
        examples: demos.examples.iter().map(|d| clip(d, &mut truncated)).collect(),
    };
    let tests: Vec<Example> = test.iter().map(|t| clip(t, &mut truncated)).collect();

    let mut predictions = Vec::with_capacity(tests.len());
    let mut unparsed = 0;
    let cap = backend.capability();
    if cap.can_score() {
        for t in &tests {
            let rendered = render_few_shot(&prompt, &demos, t)?;
            predictions.push(Some(predict_argmax(backend, &rendered)?));
        }
    } else if cap.can_generate() {
        let prompts: Vec<String> = tests
            .iter()
            .map(|t| render_generation_prompt(&prompt, &demos, t))
            .collect::<Result<_>>()?;
        for completion in backend.generate_batch(&prompts) {
            match parse_generation(&completion?, &prompt.verbalizer) {
                Some(l) => predictions.push(Some(l)),
                None => {
                    unparsed += 1;
                    predictions.push(None);
                }
            }
        }
    } else {
        return Err(Error::config("backend offers neither scoring nor generation"));
    }
    Ok(IclRunOutput {
        result: RunResult {
            task_id: task.task_id,
            method: Method::Icl,
            setting: setting_label(spec.k, spec.mode).to_owned(),
            strategy: spec.strategy.to_string(),
            model: spec.model_label.clone(),
            seed: spec.seed,
            n_classes: task.num_classes(),
            predictions,
            golds: test.iter().map(|e| e.label).collect(),
            unparsed,
        },
        truncated,
    })
}
