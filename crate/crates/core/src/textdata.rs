//! Corpus ingestion, tokenization, hashing features, task schemas, and
//! deterministic splitting and episode sampling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_VOCAB_SIZE: usize = 1 << 15;
pub const EMPTY_TOKEN: &str = "<empty>";

/// Where a label came from. Silver labels are model predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum LabelOrigin {
    #[default]
    Gold,
    Silver,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub label: usize,
    pub language: String,
    pub origin: LabelOrigin,
}

impl Example {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: usize, language: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label,
            language: language.into(),
            origin: LabelOrigin::Gold,
        }
    }

    pub fn with_silver_label(&self, label: usize) -> Self {
        Self {
            label,
            origin: LabelOrigin::Silver,
            ..self.clone()
        }
    }
}

/// One of the four prediction tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u8,
    pub name: String,
    pub label_names: Vec<String>,
    pub dataset: String,
}

const SEVERITY: [&str; 4] = ["minimum", "mild", "moderate", "severe"];

impl TaskSpec {
    pub fn by_id(task_id: u8) -> Result<Self> {
        let (name, labels, dataset): (&str, &[&str], &str) = match task_id {
            1 => ("binary stress prediction", &["no_stress", "stress"], "dreaddit"),
            2 => (
                "binary depression prediction",
                &["no_depression", "depression"],
                "depseverity",
            ),
            3 => ("depression severity prediction", &SEVERITY, "depseverity"),
            4 => (
                "binary suicide ideation prediction",
                &["no_suicide", "suicide"],
                "sdcnl",
            ),
            other => return Err(Error::config(format!("unknown task id {other}, expected 1-4"))),
        };
        Ok(Self {
            task_id,
            name: name.to_owned(),
            label_names: labels.iter().map(|s| (*s).to_owned()).collect(),
            dataset: dataset.to_owned(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    /// Case-insensitive exact lookup. Task 2 also accepts the four severity
    /// levels, collapsing anything at least mild to the positive class.
    pub fn label_index(&self, raw: &str) -> Option<usize> {
        let wanted = raw.trim().to_lowercase();
        if let Some(i) = self.label_names.iter().position(|n| n.to_lowercase() == wanted) {
            return Some(i);
        }
        if self.task_id == 2 {
            return SEVERITY.iter().position(|s| *s == wanted).map(|i| usize::from(i > 0));
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub task: TaskSpec,
    pub examples: Vec<Example>,
    /// id → split, filled by [`split_corpus`] or [`Corpus::load_splits`].
    pub splits: BTreeMap<String, Split>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    label: String,
    language: String,
}

impl Corpus {
    pub fn new(task: TaskSpec, examples: Vec<Example>) -> Result<Self> {
        let mut seen = HashSet::new();
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::Ingestion {
                    record: ex.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
            if ex.label >= task.num_classes() {
                return Err(Error::Ingestion {
                    record: ex.id.clone(),
                    reason: format!("label index {} outside task label set", ex.label),
                });
            }
            if ex.text.trim().is_empty() {
                return Err(Error::Ingestion {
                    record: ex.id.clone(),
                    reason: "empty text".into(),
                });
            }
        }
        Ok(Self {
            task,
            examples,
            splits: BTreeMap::new(),
        })
    }

    /// Concatenates corpora of the same task. Ids must stay unique.
    pub fn merge(parts: Vec<Corpus>) -> Result<Self> {
        let mut parts = parts.into_iter();
        let first = parts
            .next()
            .ok_or_else(|| Error::contract("merge needs at least one corpus"))?;
        let task = first.task.clone();
        let mut examples = first.examples;
        let mut splits = first.splits;
        for p in parts {
            if p.task != task {
                return Err(Error::contract("cannot merge corpora of different tasks"));
            }
            examples.extend(p.examples);
            splits.extend(p.splits);
        }
        let mut merged = Corpus::new(task, examples)?;
        merged.splits = splits;
        Ok(merged)
    }

    pub fn languages(&self) -> BTreeSet<&str> {
        self.examples.iter().map(|e| e.language.as_str()).collect()
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.splits.get(id).copied()
    }

    /// Examples of one language in one split, in corpus order.
    pub fn select(&self, language: &str, split: Split) -> Vec<Example> {
        self.examples
            .iter()
            .filter(|e| e.language == language && self.split_of(&e.id) == Some(split))
            .cloned()
            .collect()
    }

    pub fn of_language(&self, language: &str) -> Vec<Example> {
        self.examples.iter().filter(|e| e.language == language).cloned().collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for ex in &self.examples {
            let rec = Record {
                id: ex.id.clone(),
                text: ex.text.clone(),
                label: self.task.label_names[ex.label].clone(),
                language: ex.language.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn save_splits(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.splits)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_splits(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let splits: BTreeMap<String, Split> = serde_json::from_str(&text)?;
        let ids: HashSet<&str> = self.examples.iter().map(|e| e.id.as_str()).collect();
        if let Some(unknown) = splits.keys().find(|k| !ids.contains(k.as_str())) {
            return Err(Error::Ingestion {
                record: unknown.clone(),
                reason: "split sidecar names an id missing from the corpus".into(),
            });
        }
        self.splits.extend(splits);
        Ok(())
    }
}

/// Parses JSON Lines records (`id`, `text`, `label`, `language`).
pub fn read_corpus<R: BufRead>(reader: R, task: &TaskSpec) -> Result<Corpus> {
    let mut examples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Ingestion {
            record: format!("line {}", lineno + 1),
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            record: format!("line {}", lineno + 1),
            reason: e.to_string(),
        })?;
        let label = task.label_index(&rec.label).ok_or_else(|| Error::Ingestion {
            record: rec.id.clone(),
            reason: format!("label {:?} not in {:?}", rec.label, task.label_names),
        })?;
        examples.push(Example::new(rec.id, rec.text, label, rec.language));
    }
    Corpus::new(task.clone(), examples)
}

pub fn load_corpus(path: &Path, task: &TaskSpec) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(std::io::BufReader::new(file), task)
}

/// Conventional file name for one (dataset, language) pair, e.g. `dreaddit.sw.jsonl`.
pub fn corpus_file_name(dataset: &str, language: &str) -> String {
    format!("{dataset}.{language}.jsonl")
}

pub fn tokenize(text: &str) -> Vec<String> {
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|piece| piece.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        vec![EMPTY_TOKEN.to_owned()]
    } else {
        tokens
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Hashed token ids in `[0, vocab_size)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVector {
    pub token_ids: Vec<usize>,
    pub vocab_size: usize,
}

pub fn featurize(tokens: &[String], vocab_size: usize) -> Result<FeatureVector> {
    if !vocab_size.is_power_of_two() {
        return Err(Error::config(format!("vocab size {vocab_size} is not a power of two")));
    }
    let mask = vocab_size as u64 - 1;
    Ok(FeatureVector {
        token_ids: tokens
            .iter()
            .map(|t| (fnv1a64(t.as_bytes()) & mask) as usize)
            .collect(),
        vocab_size,
    })
}

pub fn featurize_text(text: &str, vocab_size: usize) -> Result<FeatureVector> {
    featurize(&tokenize(text), vocab_size)
}

/// Stratified split by (language, label). Each cell is shuffled with a
/// seeded generator and cut at rounded train and val counts; test takes the rest.
pub fn split_corpus(corpus: &Corpus, fractions: (f64, f64, f64), seed: u64) -> Result<Corpus> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let mut cells: BTreeMap<(&str, usize), Vec<&str>> = BTreeMap::new();
    for ex in &corpus.examples {
        cells.entry((&ex.language, ex.label)).or_default().push(&ex.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = BTreeMap::new();
    for ((language, label), mut ids) in cells {
        let n = ids.len();
        if n < 3 {
            return Err(Error::Split {
                language: language.to_owned(),
                label: corpus.task.label_names[label].clone(),
                count: n,
            });
        }
        ids.shuffle(&mut rng);
        let n_train = ((ft * n as f64).round() as usize).min(n);
        let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
        for (i, id) in ids.into_iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            splits.insert(id.to_owned(), split);
        }
    }
    Ok(Corpus {
        splits,
        ..corpus.clone()
    })
}

/// A meta-task: support set S and query set Q.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<Example>,
    pub query: Vec<Example>,
}

/// Per-class quotas for `total` draws: an even share, remainder going to
/// the lowest class indices, with shortfalls spilled to the next classes
/// that still have examples left.
fn class_quotas(available: &BTreeMap<usize, usize>, total: usize) -> Option<BTreeMap<usize, usize>> {
    if available.values().sum::<usize>() < total || available.is_empty() {
        return None;
    }
    let k = available.len();
    let mut quotas: BTreeMap<usize, usize> = available
        .keys()
        .enumerate()
        .map(|(i, c)| (*c, total / k + usize::from(i < total % k)))
        .collect();
    let mut deficit = 0;
    for (c, q) in quotas.iter_mut() {
        let have = available[c];
        if *q > have {
            deficit += *q - have;
            *q = have;
        }
    }
    while deficit > 0 {
        let mut moved = false;
        for (c, q) in quotas.iter_mut() {
            if deficit > 0 && *q < available[c] {
                *q += 1;
                deficit -= 1;
                moved = true;
            }
        }
        if !moved {
            return None;
        }
    }
    Some(quotas)
}

fn balanced_draw(
    pool: &[&Example],
    n: usize,
    what: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Example>> {
    let mut by_class: BTreeMap<usize, Vec<&Example>> = BTreeMap::new();
    for ex in pool {
        by_class.entry(ex.label).or_default().push(ex);
    }
    let available: BTreeMap<usize, usize> = by_class.iter().map(|(c, v)| (*c, v.len())).collect();
    let quotas = class_quotas(&available, n).ok_or_else(|| Error::Sampling {
        what: what.to_owned(),
        required: n,
        available: pool.len(),
    })?;
    let mut drawn = Vec::with_capacity(n);
    for (class, members) in &by_class {
        let q = quotas[class];
        drawn.extend(members.choose_multiple(rng, q).map(|e| (*e).clone()));
    }
    drawn.shuffle(rng);
    Ok(drawn)
}

/// Draws one episode. S and Q are class-balanced samples without
/// replacement; when the pools share examples, Q excludes everything in S.
pub fn sample_support_query(
    pool_support: &[Example],
    pool_query: &[Example],
    shots: usize,
    query_size: usize,
    seed: u64,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_episode_with(pool_support, pool_query, shots, query_size, &mut rng)
}

pub(crate) fn sample_episode_with(
    pool_support: &[Example],
    pool_query: &[Example],
    shots: usize,
    query_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if shots == 0 || query_size == 0 {
        return Err(Error::contract("shots and query_size must be >= 1"));
    }
    let support_refs: Vec<&Example> = pool_support.iter().collect();
    let support = balanced_draw(&support_refs, shots, "support set", rng)?;
    let taken: HashSet<(&str, &str)> = support
        .iter()
        .map(|e| (e.id.as_str(), e.language.as_str()))
        .collect();
    let query_refs: Vec<&Example> = pool_query
        .iter()
        .filter(|e| !taken.contains(&(e.id.as_str(), e.language.as_str())))
        .collect();
    let query = balanced_draw(&query_refs, query_size, "query set", rng)?;
    Ok(Episode { support, query })
}
