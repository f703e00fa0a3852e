//! Metrics, multi-seed aggregation, report emission, and a synthetic
//! parallel-corpus generator used to exercise cross-lingual transfer.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textdata::{Corpus, Example, TaskSpec};

/// A prediction that may be missing (an unparsed generation).
pub trait AsPrediction {
    fn class(&self) -> Option<usize>;
}

impl AsPrediction for usize {
    fn class(&self) -> Option<usize> {
        Some(*self)
    }
}

impl AsPrediction for Option<usize> {
    fn class(&self) -> Option<usize> {
        *self
    }
}

fn check_lengths(n_pred: usize, n_gold: usize) -> Result<()> {
    if n_pred != n_gold {
        return Err(Error::contract(format!(
            "{n_pred} predictions for {n_gold} gold labels"
        )));
    }
    if n_gold == 0 {
        return Err(Error::contract("metrics need at least one example"));
    }
    Ok(())
}

/// Unweighted mean of per-class F1. A class with no gold and no predicted
/// instances scores 0. Missing predictions count as wrong.
pub fn macro_f1<P: AsPrediction>(predictions: &[P], golds: &[usize], n_classes: usize) -> Result<f64> {
    check_lengths(predictions.len(), golds.len())?;
    if n_classes == 0 {
        return Err(Error::contract("n_classes must be >= 1"));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (p, &g) in predictions.iter().zip(golds) {
        if g >= n_classes {
            return Err(Error::contract(format!("gold label {g} >= {n_classes}")));
        }
        match p.class() {
            Some(c) if c >= n_classes => {
                return Err(Error::contract(format!("predicted label {c} >= {n_classes}")))
            }
            Some(c) if c == g => tp[c] += 1,
            Some(c) => {
                fp[c] += 1;
                fn_[g] += 1;
            }
            None => fn_[g] += 1,
        }
    }
    let total: f64 = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / n_classes as f64)
}

/// Fraction exactly correct; missing predictions count as wrong.
pub fn accuracy<P: AsPrediction>(predictions: &[P], golds: &[usize]) -> Result<f64> {
    check_lengths(predictions.len(), golds.len())?;
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.class() == Some(**g))
        .count();
    Ok(correct as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    FineTune,
    Meta,
    SelfTrain,
    DomainAdapt,
    Icl,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::FineTune => "fine-tune",
            Method::Meta => "meta",
            Method::SelfTrain => "self-train",
            Method::DomainAdapt => "domain-adapt",
            Method::Icl => "icl",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    MacroF1,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro-f1",
        })
    }
}

/// Predictions of one run (one seed of one configuration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task_id: u8,
    pub method: Method,
    pub setting: String,
    #[serde(default)]
    pub strategy: String,
    #[serde(default)]
    pub model: String,
    pub seed: u64,
    pub n_classes: usize,
    pub predictions: Vec<Option<usize>>,
    pub golds: Vec<usize>,
    #[serde(default)]
    pub unparsed: usize,
}

impl RunResult {
    pub fn metric(&self, metric: Metric) -> Result<f64> {
        match metric {
            Metric::Accuracy => accuracy(&self.predictions, &self.golds),
            Metric::MacroF1 => macro_f1(&self.predictions, &self.golds, self.n_classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    /// `None` when results are pooled across tasks.
    pub task: Option<u8>,
    pub method: String,
    pub setting: String,
    pub model: String,
    pub strategy: String,
    pub metric: Metric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single run.
    pub std: f64,
    pub n_runs: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("cannot aggregate an empty group"));
        }
        let n = values.len();
        let mut sorted = values.to_vec();
        // summing in sorted order makes the mean independent of run order
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self { mean, std, n_runs: n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    /// One group per task.
    #[default]
    PerTask,
    /// Runs of all tasks pooled together.
    AcrossTasks,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregateReport {
    pub groups: BTreeMap<GroupKey, Stats>,
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "task", "method", "setting", "model", "strategy", "metric", "mean", "std", "n_runs",
];

#[derive(Serialize)]
struct ReportRow<'a> {
    task: String,
    method: &'a str,
    setting: &'a str,
    model: &'a str,
    strategy: &'a str,
    metric: String,
    mean: f64,
    std: f64,
    n_runs: usize,
}

impl AggregateReport {
    pub fn from_values(values: impl IntoIterator<Item = (GroupKey, f64)>) -> Result<Self> {
        let mut buckets: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
        for (k, v) in values {
            buckets.entry(k).or_default().push(v);
        }
        let groups = buckets
            .into_iter()
            .map(|(k, vs)| Ok((k, Stats::of(&vs)?)))
            .collect::<Result<_>>()?;
        Ok(Self { groups })
    }

    pub fn get(&self, key: &GroupKey) -> Option<&Stats> {
        self.groups.get(key)
    }

    fn rows(&self) -> impl Iterator<Item = ReportRow<'_>> {
        self.groups.iter().map(|(k, s)| ReportRow {
            task: k.task.map_or_else(|| "all".to_owned(), |t| t.to_string()),
            method: &k.method,
            setting: &k.setting,
            model: &k.model,
            strategy: &k.strategy,
            metric: k.metric.to_string(),
            mean: s.mean,
            std: s.std,
            n_runs: s.n_runs,
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", REPORT_COLUMNS.join(","))?;
        for r in self.rows() {
            writeln!(
                w,
                "{},{},{},{},{},{},{:.6},{:.6},{}",
                csv_field(&r.task),
                csv_field(r.method),
                csv_field(r.setting),
                csv_field(r.model),
                csv_field(r.strategy),
                r.metric,
                r.mean,
                r.std,
                r.n_runs
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<ReportRow<'_>> = self.rows().collect();
        Ok(serde_json::to_string_pretty(&rows)?)
    }

    /// Setting × model rows against strategy columns for one metric.
    pub fn strategy_grid(&self, metric: Metric) -> StrategyGrid {
        let mut cells = BTreeMap::new();
        for (k, s) in &self.groups {
            if k.metric == metric {
                cells.insert((k.setting.clone(), k.model.clone(), k.strategy.clone()), s.mean);
            }
        }
        StrategyGrid { cells }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Groups runs and computes per-group mean and sample std of both metrics.
pub fn aggregate(results: &[RunResult], grouping: Grouping) -> Result<AggregateReport> {
    let mut values = Vec::with_capacity(results.len() * 2);
    for r in results {
        for metric in [Metric::Accuracy, Metric::MacroF1] {
            let key = GroupKey {
                task: match grouping {
                    Grouping::PerTask => Some(r.task_id),
                    Grouping::AcrossTasks => None,
                },
                method: r.method.to_string(),
                setting: r.setting.clone(),
                model: r.model.clone(),
                strategy: r.strategy.clone(),
                metric,
            };
            values.push((key, r.metric(metric)?));
        }
    }
    AggregateReport::from_values(values)
}

pub const SETTING_ORDER: [&str; 3] = ["Zero-shot", "Few-shot (Examples)", "Few-shot (Demonstration)"];
pub const STRATEGY_ORDER: [&str; 3] = ["Swahili", "Cross-lingual", "English"];

fn rank(order: &[&str], s: &str) -> (usize, String) {
    (
        order.iter().position(|o| o.eq_ignore_ascii_case(s)).unwrap_or(order.len()),
        s.to_owned(),
    )
}

/// Mean values laid out as (setting, model) rows by strategy columns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StrategyGrid {
    cells: BTreeMap<(String, String, String), f64>,
}

impl StrategyGrid {
    pub fn cell(&self, setting: &str, model: &str, strategy: &str) -> Option<f64> {
        self.cells
            .get(&(setting.to_owned(), model.to_owned(), strategy.to_owned()))
            .copied()
    }

    pub fn rows(&self) -> Vec<(String, String)> {
        let mut rows: Vec<(String, String)> = self.cells.keys().map(|(s, m, _)| (s.clone(), m.clone())).collect();
        rows.sort_by_key(|(s, m)| (rank(&SETTING_ORDER, s), m.clone()));
        rows.dedup();
        rows
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self.cells.keys().map(|(_, _, c)| c.clone()).collect();
        cols.sort_by_key(|c| rank(&STRATEGY_ORDER, c));
        cols.dedup();
        cols
    }

    /// Every cell multiplied by `factor`, e.g. 100 for percentages.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            cells: self.cells.iter().map(|(k, v)| (k.clone(), v * factor)).collect(),
        }
    }

    /// Plain-text table with one decimal, blank where a cell is missing.
    pub fn render(&self) -> String {
        let cols = self.columns();
        let mut out = format!("Setting | Model | {}\n", cols.join(" | "));
        for (setting, model) in self.rows() {
            let vals: Vec<String> = cols
                .iter()
                .map(|c| self.cell(&setting, &model, c).map_or_else(String::new, |v| format!("{v:.1}")))
                .collect();
            out.push_str(&format!("{setting} | {model} | {}\n", vals.join(" | ")));
        }
        out
    }
}

/// Parameters of the synthetic language family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Size of the shared underlying lexicon.
    pub vocab_size: usize,
    pub classes: usize,
    /// In (0, 1]; 1 means every token comes from the document's class block.
    pub margin: f64,
    /// Fraction of lexicon items that keep one surface form in every language.
    pub shared_fraction: f64,
    pub docs_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub dataset: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 2000,
            classes: 2,
            margin: 0.8,
            shared_fraction: 0.0,
            docs_per_class: 500,
            min_len: 12,
            max_len: 24,
            dataset: "synthetic".to_owned(),
        }
    }
}

const CONSONANTS: &[u8] = b"bdfghjklmnprstvw";
const VOWELS: &[u8] = b"aeiou";
const LANGUAGE_ENDINGS: [&str; 8] = ["", "ni", "ya", "ku", "ma", "ta", "wo", "le"];

fn spell(mut id: usize) -> String {
    let n_syll = CONSONANTS.len() * VOWELS.len();
    let mut out = String::with_capacity(6);
    for _ in 0..3 {
        let s = id % n_syll;
        id /= n_syll;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
    }
    out
}

/// A bijection from the base lexicon onto one language's surface forms.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLanguagePair {
    pub source_language: String,
    pub target_language: String,
    /// Base token id → the id whose spelling the target language uses.
    pub permutation: Vec<usize>,
    pub shared: Vec<bool>,
    pub source_words: Vec<String>,
    pub target_words: Vec<String>,
    source_index: HashMap<String, usize>,
    target_index: HashMap<String, usize>,
}

impl SyntheticLanguagePair {
    fn build(
        source_language: &str,
        target_language: &str,
        permutation: Vec<usize>,
        shared: Vec<bool>,
        ending: &str,
    ) -> Self {
        let word = |id: usize, shared: bool, ending: &str| {
            if shared {
                format!("z{}", spell(id))
            } else {
                format!("{}{}", spell(id), ending)
            }
        };
        let source_words: Vec<String> = (0..permutation.len()).map(|i| word(i, shared[i], "")).collect();
        let target_words: Vec<String> = (0..permutation.len())
            .map(|i| {
                if shared[i] {
                    source_words[i].clone()
                } else {
                    word(permutation[i], false, ending)
                }
            })
            .collect();
        let index = |ws: &[String]| ws.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self {
            source_language: source_language.to_owned(),
            target_language: target_language.to_owned(),
            source_index: index(&source_words),
            target_index: index(&target_words),
            permutation,
            shared,
            source_words,
            target_words,
        }
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.permutation.len()];
        for &p in &self.permutation {
            if p >= seen.len() || seen[p] {
                return false;
            }
            seen[p] = true;
        }
        self.source_index.len() == self.source_words.len() && self.target_index.len() == self.target_words.len()
    }

    /// Word-by-word translation into the target language. Unknown words pass through.
    pub fn translate(&self, text: &str) -> String {
        map_words(text, &self.source_index, &self.target_words)
    }

    pub fn translate_back(&self, text: &str) -> String {
        map_words(text, &self.target_index, &self.source_words)
    }

    /// The same pair with source and target swapped.
    pub fn inverse(&self) -> Self {
        let mut inv = self.clone();
        std::mem::swap(&mut inv.source_language, &mut inv.target_language);
        std::mem::swap(&mut inv.source_words, &mut inv.target_words);
        std::mem::swap(&mut inv.source_index, &mut inv.target_index);
        let mut perm = vec![0; self.permutation.len()];
        for (i, &p) in self.permutation.iter().enumerate() {
            perm[p] = i;
        }
        inv.permutation = perm;
        inv
    }

    pub fn translate_corpus(&self, corpus: &Corpus) -> Result<Corpus> {
        let examples = corpus
            .examples
            .iter()
            .map(|e| Example {
                id: retag_id(&e.id, &self.target_language),
                text: self.translate(&e.text),
                language: self.target_language.clone(),
                ..e.clone()
            })
            .collect();
        Corpus::new(corpus.task.clone(), examples)
    }
}

fn retag_id(id: &str, lang: &str) -> String {
    match id.split_once('-') {
        Some((_, rest)) => format!("{lang}-{rest}"),
        None => format!("{lang}-{id}"),
    }
}

fn map_words(text: &str, index: &HashMap<String, usize>, words: &[String]) -> String {
    text.split(' ')
        .map(|w| index.get(w).map_or(w, |&i| words[i].as_str()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generated corpora: `corpora[0]` is the base (source) language, the others
/// are its translations through `pairs[i - 1]`.
#[derive(Debug, Clone)]
pub struct SyntheticFamily {
    pub pairs: Vec<SyntheticLanguagePair>,
    pub corpora: Vec<Corpus>,
}

fn synthetic_task(classes: usize) -> Result<TaskSpec> {
    match classes {
        2 => TaskSpec::by_id(1),
        4 => TaskSpec::by_id(3),
        other => Err(Error::config(format!(
            "synthetic corpora support 2 or 4 classes, got {other}"
        ))),
    }
}

/// Base-language documents: each token comes from the document's class
/// block with probability `1/C + margin·(1 − 1/C)`, otherwise from another
/// class block, all uniformly.
pub fn make_synthetic_family(cfg: &SyntheticConfig, languages: &[&str]) -> Result<SyntheticFamily> {
    if !(cfg.margin > 0.0 && cfg.margin <= 1.0) {
        return Err(Error::config(format!("margin must lie in (0, 1], got {}", cfg.margin)));
    }
    if !(0.0..1.0).contains(&cfg.shared_fraction) {
        return Err(Error::config("shared_fraction must lie in [0, 1)"));
    }
    if languages.len() < 2 || languages.len() > LANGUAGE_ENDINGS.len() {
        return Err(Error::config("synthetic family needs 2 to 8 languages"));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::config("invalid synthetic document length range"));
    }
    let task = synthetic_task(cfg.classes)?;
    let c = cfg.classes;
    let block = cfg.vocab_size / c;
    if block == 0 || cfg.vocab_size > 80usize.pow(3) {
        return Err(Error::config(format!("unsupported synthetic vocab size {}", cfg.vocab_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let n_shared = (cfg.shared_fraction * cfg.vocab_size as f64).round() as usize;
    let mut ids: Vec<usize> = (0..cfg.vocab_size).collect();
    ids.shuffle(&mut rng);
    let mut shared = vec![false; cfg.vocab_size];
    for &i in &ids[..n_shared] {
        shared[i] = true;
    }

    let p_own = 1.0 / c as f64 + cfg.margin * (1.0 - 1.0 / c as f64);
    let len_dist = Uniform::new_inclusive(cfg.min_len, cfg.max_len);
    let in_block = Uniform::new(0, block);
    let mut base_docs = Vec::with_capacity(c * cfg.docs_per_class);
    for label in 0..c {
        for _ in 0..cfg.docs_per_class {
            let len = len_dist.sample(&mut rng);
            let tokens: Vec<usize> = (0..len)
                .map(|_| {
                    let b = if rng.gen::<f64>() < p_own || c == 1 {
                        label
                    } else {
                        let other = rng.gen_range(0..c - 1);
                        if other >= label {
                            other + 1
                        } else {
                            other
                        }
                    };
                    b * block + in_block.sample(&mut rng)
                })
                .collect();
            base_docs.push((label, tokens));
        }
    }
    base_docs.shuffle(&mut rng);

    let source_lang = languages[0];
    let identity: Vec<usize> = (0..cfg.vocab_size).collect();
    let base_pair = SyntheticLanguagePair::build(source_lang, source_lang, identity, shared.clone(), "");
    let source_examples: Vec<Example> = base_docs
        .iter()
        .enumerate()
        .map(|(i, (label, toks))| {
            let text = toks
                .iter()
                .map(|&t| base_pair.source_words[t].as_str())
                .collect::<Vec<_>>()
                .join(" ");
            Example::new(format!("{source_lang}-{i:05}"), text, *label, source_lang)
        })
        .collect();
    let source = Corpus::new(task, source_examples)?;

    let mut pairs = Vec::new();
    let mut corpora = vec![source.clone()];
    for (k, lang) in languages.iter().enumerate().skip(1) {
        let mut perm: Vec<usize> = (0..cfg.vocab_size).collect();
        perm.shuffle(&mut rng);
        let pair = SyntheticLanguagePair::build(source_lang, lang, perm, shared.clone(), LANGUAGE_ENDINGS[k]);
        corpora.push(pair.translate_corpus(&source)?);
        pairs.push(pair);
    }
    Ok(SyntheticFamily { pairs, corpora })
}

/// Source corpus, its translation, and the mapping between them.
pub fn make_synthetic_pair(
    cfg: &SyntheticConfig,
    source_language: &str,
    target_language: &str,
) -> Result<(SyntheticLanguagePair, Corpus, Corpus)> {
    let mut fam = make_synthetic_family(cfg, &[source_language, target_language])?;
    let target = fam.corpora.pop().expect("two corpora");
    let source = fam.corpora.pop().expect("two corpora");
    Ok((fam.pairs.remove(0), source, target))
}
