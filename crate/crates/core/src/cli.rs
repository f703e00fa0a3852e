//! Command-line front end. Every subcommand reads one JSON experiment
//! config, applies `--set key.path=value` overrides, and writes its outputs
//! to `{paths.output}/{subcommand}-{hash}` where the hash covers the
//! subcommand and the effective config.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::classifier::{fine_tune, Architecture, ModelMeta, TextClassifier, TrainConfig, DEFAULT_EMBED_DIM};
use crate::error::{Error, Result};
use crate::eval::{aggregate, Grouping, Method, Metric, RunResult, SyntheticConfig, make_synthetic_family};
use crate::icl::{
    run_icl, ChatClient, ChatConfig, IclRunSpec, OverlapScorer, PromptLibrary, PromptMode, ScoringBackend,
    ScriptedGenerator, Strategy, DEFAULT_SEPARATOR,
};
use crate::metalearn::{
    domain_adapt_train, meta_train, save_trace_csv, self_train, LanguagePools, LanguageRoles, MetaConfig,
    SelfTrainConfig, StageKind, TrainingChoice,
};
use crate::textdata::{corpus_file_name, load_corpus, split_corpus, Corpus, Example, Split, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Languages {
    pub source: Vec<String>,
    pub target: String,
}

impl Default for Languages {
    fn default() -> Self {
        Self {
            source: vec!["en".into()],
            target: "sw".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `{dataset}.{language}.jsonl` files.
    pub corpora: PathBuf,
    /// Prompt resource directory; the built-in prompts when absent.
    pub prompts: Option<PathBuf>,
    pub output: PathBuf,
    /// Optional split assignment written by `prep`.
    pub splits: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpora: "data".into(),
            prompts: None,
            output: "runs".into(),
            splits: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1 << 15,
            dim: DEFAULT_EMBED_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainAdaptConfig {
    pub instances: usize,
}

impl Default for DomainAdaptConfig {
    fn default() -> Self {
        Self { instances: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    /// Deterministic token-overlap scorer.
    Mock,
    /// Replays canned completions; for exercising the generation path.
    Scripted { responses: Vec<String> },
    /// Live chat-completion endpoint.
    Chat(ChatConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IclConfig {
    pub strategies: Vec<Strategy>,
    pub mode: PromptMode,
    /// Few-shot demonstrations per prompt; a zero-shot run is always added.
    pub k: usize,
    pub backend: BackendConfig,
    pub separator: String,
    /// Overrides the chat backend's temperature when set.
    pub temperature: Option<f64>,
    pub max_input_tokens: Option<usize>,
    /// Evaluate only the first `test_limit` test posts.
    pub test_limit: Option<usize>,
    /// Model column in reports; defaults to the backend name.
    pub model_label: Option<String>,
}

impl Default for IclConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            mode: PromptMode::ExamplesOnly,
            k: 4,
            backend: BackendConfig::Mock,
            separator: DEFAULT_SEPARATOR.into(),
            temperature: None,
            max_input_tokens: None,
            test_limit: None,
            model_label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// `runs.jsonl` files to aggregate.
    pub inputs: Vec<PathBuf>,
    pub grouping: Grouping,
    /// Metric of the rendered setting × model × strategy grid.
    pub grid_metric: Metric,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            grouping: Grouping::PerTask,
            grid_metric: Metric::Accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task_id: u8,
    /// Corpus file prefix; the task's dataset name when absent.
    pub dataset: Option<String>,
    pub languages: Languages,
    pub paths: Paths,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub meta: MetaConfig,
    pub meta_stages: Vec<StageKind>,
    pub training_choice: TrainingChoice,
    pub self_train: SelfTrainConfig,
    pub domain_adapt: DomainAdaptConfig,
    pub icl: IclConfig,
    pub synth: SyntheticConfig,
    pub report: ReportConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task_id: 1,
            dataset: None,
            languages: Languages::default(),
            paths: Paths::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            meta: MetaConfig::default(),
            meta_stages: vec![StageKind::MetaTrain, StageKind::MetaAdapt],
            training_choice: TrainingChoice::FewShot { k_target_labeled: None },
            self_train: SelfTrainConfig::default(),
            domain_adapt: DomainAdaptConfig::default(),
            icl: IclConfig::default(),
            synth: SyntheticConfig::default(),
            report: ReportConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn task(&self) -> Result<TaskSpec> {
        TaskSpec::by_id(self.task_id).map_err(|e| Error::config(e.to_string()))
    }

    pub fn dataset_name(&self) -> Result<String> {
        Ok(match &self.dataset {
            Some(d) => d.clone(),
            None => self.task()?.dataset,
        })
    }

    pub fn validate(&self, command: &Command) -> Result<()> {
        self.task()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        if self.languages.source.is_empty() {
            return Err(Error::config("languages.source must not be empty"));
        }
        if self.languages.source.contains(&self.languages.target) {
            return Err(Error::config("target language also listed as a source"));
        }
        self.train.validate()?;
        self.meta.validate()?;
        self.self_train.validate()?;
        let fr = [self.split.train, self.split.val, self.split.test];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split fractions must lie in [0, 1] and sum to 1"));
        }
        if !self.model.vocab_size.is_power_of_two() || self.model.dim == 0 {
            return Err(Error::config("model.vocab_size must be a power of two and model.dim >= 1"));
        }
        let needs_corpora = !matches!(command, Command::SynthGen(_) | Command::Report(_));
        if needs_corpora && !self.paths.corpora.is_dir() {
            return Err(Error::config(format!(
                "corpus directory {} does not exist",
                self.paths.corpora.display()
            )));
        }
        if let Some(p) = &self.paths.prompts {
            if !p.is_dir() {
                return Err(Error::config(format!("prompt directory {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.paths.splits {
            if !p.is_file() {
                return Err(Error::config(format!("split file {} does not exist", p.display())));
            }
        }
        if let Command::Report(_) = command {
            if self.report.inputs.is_empty() {
                return Err(Error::config("report.inputs lists no runs.jsonl files"));
            }
            for p in &self.report.inputs {
                if !p.is_file() {
                    return Err(Error::config(format!("report input {} does not exist", p.display())));
                }
            }
        }
        if let Command::DomainAdapt(_) = command {
            crate::metalearn::check_instance_cap(self.domain_adapt.instances)?;
            if self.languages.source.len() < 2 {
                return Err(Error::config("domain-adapt needs at least two source (auxiliary) languages"));
            }
        }
        if let Command::IclRun(_) = command {
            if self.icl.strategies.is_empty() {
                return Err(Error::config("icl.strategies must not be empty"));
            }
            if let Some(t) = self.icl.temperature {
                if !(0.0..=2.0).contains(&t) {
                    return Err(Error::config(format!("icl.temperature {t} outside [0, 2]")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "xlmh", version, about = "Cross-lingual mental health text classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a scalar config field, e.g. `--set meta.alpha=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run the seed list in parallel.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Validate corpora and write the stratified split assignment.
    Prep(CommonArgs),
    /// Fine-tune on the source language and evaluate on the target.
    TrainBaseline(CommonArgs),
    /// Source fine-tuning followed by meta-train and meta-adapt.
    MetaTrain(CommonArgs),
    /// Zero-shot meta-training refined with silver target labels.
    SelfTrain(CommonArgs),
    /// Train on auxiliary languages only, evaluate on the target.
    DomainAdapt(CommonArgs),
    /// In-context learning over the prompt strategies.
    IclRun(CommonArgs),
    /// Aggregate runs.jsonl files into a report.
    Report(CommonArgs),
    /// Write a synthetic parallel corpus family.
    SynthGen(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prep(_) => "prep",
            Command::TrainBaseline(_) => "train-baseline",
            Command::MetaTrain(_) => "meta-train",
            Command::SelfTrain(_) => "self-train",
            Command::DomainAdapt(_) => "domain-adapt",
            Command::IclRun(_) => "icl-run",
            Command::Report(_) => "report",
            Command::SynthGen(_) => "synth-gen",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Prep(a)
            | Command::TrainBaseline(a)
            | Command::MetaTrain(a)
            | Command::SelfTrain(a)
            | Command::DomainAdapt(a)
            | Command::IclRun(a)
            | Command::Report(a)
            | Command::SynthGen(a) => a,
        }
    }
}

/// Applies `key.path=value` overrides to a JSON config. Values parse as JSON
/// when possible and as strings otherwise. Only scalar fields may be set.
pub fn apply_overrides(config: &mut Value, overrides: &[String]) -> Result<Vec<(String, Value, Value)>> {
    let mut applied = Vec::new();
    for raw in overrides {
        let (path, value) = raw
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {raw:?} is not KEY=VALUE")))?;
        let new: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_owned()));
        if new.is_object() || new.is_array() {
            return Err(Error::config(format!("override {path} must be a scalar")));
        }
        let keys: Vec<&str> = path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(Error::config(format!("malformed override key {path:?}")));
        }
        let mut node = &mut *config;
        for k in &keys[..keys.len() - 1] {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::config(format!("override {path}: {k} is not inside an object")))?;
            node = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override {path}: parent is not an object")))?;
        let last = keys[keys.len() - 1].to_owned();
        let old = obj.get(&last).cloned().unwrap_or(Value::Null);
        if old.is_object() || old.is_array() {
            return Err(Error::config(format!("override {path} targets a non-scalar field")));
        }
        obj.insert(last, new.clone());
        log::info!("override {path}: {old} -> {new}");
        applied.push((path.to_owned(), old, new));
    }
    Ok(applied)
}

/// Parses the config file, applies overrides, and returns the effective
/// config together with its canonical JSON form.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<(ExperimentConfig, String)> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(Error::config("config must be a JSON object"));
    }
    apply_overrides(&mut value, overrides)?;
    let cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| Error::config(format!("config {}: {e}", path.display())))?;
    let canonical = serde_json::to_string(&cfg)?;
    Ok((cfg, canonical))
}

/// `{output}/{command}-{first 16 hex digits of sha256(command, config)}`.
pub fn output_dir(cfg: &ExperimentConfig, command: &str, canonical: &str) -> PathBuf {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(canonical.as_bytes());
    let digest = hex::encode(h.finalize());
    cfg.paths.output.join(format!("{command}-{}", &digest[..16]))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_runs(path: &Path, runs: &[RunResult]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in runs {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_runs(path: &Path) -> Result<Vec<RunResult>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Ingestion {
                record: format!("{}:{}", path.display(), i + 1),
                reason: e.to_string(),
            })
        })
        .collect()
}

fn write_report(dir: &Path, runs: &[RunResult], grouping: Grouping, grid_metric: Option<Metric>) -> Result<()> {
    let report = aggregate(runs, grouping)?;
    let csv_path = dir.join("report.csv");
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(|e| Error::io(&csv_path, e))?;
    fs::write(&csv_path, buf).map_err(|e| Error::io(&csv_path, e))?;
    write_file(&dir.join("report.json"), &report.to_json()?)?;
    if let Some(m) = grid_metric {
        let grid = report.strategy_grid(m).scaled(100.0);
        if !grid.rows().is_empty() {
            write_file(&dir.join("grid.txt"), &grid.render())?;
        }
    }
    Ok(())
}

/// Loads every language of the experiment and assigns splits.
fn load_experiment_corpus(cfg: &ExperimentConfig, languages: &[String]) -> Result<Corpus> {
    let task = cfg.task()?;
    let dataset = cfg.dataset_name()?;
    let mut parts = Vec::new();
    for lang in languages {
        let path = cfg.paths.corpora.join(corpus_file_name(&dataset, lang));
        if !path.is_file() {
            return Err(Error::io(&path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        parts.push(load_corpus(&path, &task)?);
    }
    let merged = Corpus::merge(parts)?;
    match &cfg.paths.splits {
        Some(p) => {
            let mut c = merged;
            c.load_splits(p)?;
            Ok(c)
        }
        None => split_corpus(&merged, (cfg.split.train, cfg.split.val, cfg.split.test), cfg.split.seed),
    }
}

fn all_languages(cfg: &ExperimentConfig) -> Vec<String> {
    let mut l = cfg.languages.source.clone();
    l.push(cfg.languages.target.clone());
    l
}

fn architecture(cfg: &ExperimentConfig) -> Result<Architecture> {
    Ok(Architecture {
        vocab_size: cfg.model.vocab_size,
        dim: cfg.model.dim,
        num_classes: cfg.task()?.num_classes(),
    })
}

fn seeded(cfg: &ExperimentConfig, seed: u64) -> (TrainConfig, MetaConfig) {
    (
        TrainConfig { seed, ..cfg.train },
        MetaConfig { seed, ..cfg.meta },
    )
}

fn setting_of(choice: TrainingChoice) -> String {
    match choice {
        TrainingChoice::ZeroShot => "zero-shot".into(),
        TrainingChoice::FewShot { k_target_labeled: None } => "few-shot".into(),
        TrainingChoice::FewShot { k_target_labeled: Some(k) } => format!("few-shot (k={k})"),
    }
}

fn run_result(cfg: &ExperimentConfig, method: Method, setting: String, model: &str, seed: u64, preds: Vec<usize>, test: &[Example]) -> Result<RunResult> {
    Ok(RunResult {
        task_id: cfg.task_id,
        method,
        setting,
        strategy: String::new(),
        model: model.to_owned(),
        seed,
        n_classes: cfg.task()?.num_classes(),
        predictions: preds.into_iter().map(Some).collect(),
        golds: test.iter().map(|e| e.label).collect(),
        unparsed: 0,
    })
}

fn save_model(dir: &Path, name: &str, cfg: &ExperimentConfig, model: &TextClassifier, seed: u64) -> Result<()> {
    let ckpt = dir.join("checkpoints");
    create_dir(&ckpt)?;
    model.save(
        &ckpt.join(format!("{name}.params")),
        &ModelMeta {
            task: cfg.task()?,
            vocab_size: cfg.model.vocab_size,
            dim: cfg.model.dim,
            seed,
        },
    )
}

fn target_train_for_choice(cfg: &ExperimentConfig, corpus: &Corpus, seed: u64) -> Vec<Example> {
    match cfg.training_choice {
        TrainingChoice::ZeroShot => Vec::new(),
        TrainingChoice::FewShot { k_target_labeled } => {
            let mut t = corpus.select(&cfg.languages.target, Split::Train);
            if let Some(k) = k_target_labeled {
                t.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6b5f_7461_7267));
                t.truncate(k);
            }
            t
        }
    }
}

fn source_train(cfg: &ExperimentConfig, corpus: &Corpus) -> Vec<Example> {
    cfg.languages
        .source
        .iter()
        .flat_map(|l| corpus.select(l, Split::Train))
        .collect()
}

fn for_seeds<T: Send>(cfg: &ExperimentConfig, parallel: bool, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    if parallel {
        cfg.seeds.par_iter().map(|s| f(*s)).collect()
    } else {
        cfg.seeds.iter().map(|s| f(*s)).collect()
    }
}

fn cmd_prep(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let corpus = load_experiment_corpus(cfg, &all_languages(cfg))?;
    corpus.save_splits(&dir.join("splits.json"))?;
    let mut summary = serde_json::Map::new();
    for lang in corpus.languages() {
        let mut per_split = serde_json::Map::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut counts = vec![0usize; corpus.task.num_classes()];
            for e in corpus.select(lang, split) {
                counts[e.label] += 1;
            }
            per_split.insert(format!("{split:?}").to_lowercase(), serde_json::json!(counts));
        }
        summary.insert(lang.to_owned(), Value::Object(per_split));
    }
    write_file(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)
}

fn cmd_train_baseline(cfg: &ExperimentConfig, dir: &Path, parallel: bool) -> Result<Vec<RunResult>> {
    let corpus = load_experiment_corpus(cfg, &all_languages(cfg))?;
    let arch = architecture(cfg)?;
    let test = corpus.select(&cfg.languages.target, Split::Test);
    for_seeds(cfg, parallel, |seed| {
        let (tc, _) = seeded(cfg, seed);
        let mut train = source_train(cfg, &corpus);
        train.extend(target_train_for_choice(cfg, &corpus, seed));
        let model = fine_tune(&TextClassifier::new(arch, seed)?, &train, &tc)?.model;
        save_model(dir, &format!("baseline.seed{seed}"), cfg, &model, seed)?;
        run_result(cfg, Method::FineTune, setting_of(cfg.training_choice), "bow", seed, model.predict(&test)?, &test)
    })
}

fn cmd_meta_train(cfg: &ExperimentConfig, dir: &Path, parallel: bool) -> Result<Vec<RunResult>> {
    let corpus = load_experiment_corpus(cfg, &all_languages(cfg))?;
    let pools = LanguagePools::from_corpus(&corpus)?;
    let roles = LanguageRoles {
        source: cfg.languages.source.clone(),
        target: vec![cfg.languages.target.clone()],
    };
    let arch = architecture(cfg)?;
    let test = corpus.select(&cfg.languages.target, Split::Test);
    for_seeds(cfg, parallel, |seed| {
        let (tc, mc) = seeded(cfg, seed);
        let base = fine_tune(&TextClassifier::new(arch, seed)?, &source_train(cfg, &corpus), &tc)?.model;
        let out = meta_train(&base, cfg.training_choice, &cfg.meta_stages, &pools, &roles, &mc)?;
        save_model(dir, &format!("meta.seed{seed}"), cfg, &out.model, seed)?;
        save_trace_csv(&out.trace, &dir.join(format!("meta_loss.seed{seed}.csv")))?;
        run_result(cfg, Method::Meta, setting_of(cfg.training_choice), "bow", seed, out.model.predict(&test)?, &test)
    })
}

fn cmd_self_train(cfg: &ExperimentConfig, dir: &Path, parallel: bool) -> Result<Vec<RunResult>> {
    let corpus = load_experiment_corpus(cfg, &all_languages(cfg))?;
    let pools = LanguagePools::from_corpus(&corpus)?;
    let roles = LanguageRoles {
        source: cfg.languages.source.clone(),
        target: vec![cfg.languages.target.clone()],
    };
    let arch = architecture(cfg)?;
    let test = corpus.select(&cfg.languages.target, Split::Test);
    let unlabeled = corpus.select(&cfg.languages.target, Split::Train);
    let monitor: Vec<Example> = cfg
        .languages
        .source
        .iter()
        .flat_map(|l| corpus.select(l, Split::Val))
        .collect();
    let per_seed = for_seeds(cfg, parallel, |seed| {
        let (tc, mc) = seeded(cfg, seed);
        let base = fine_tune(&TextClassifier::new(arch, seed)?, &source_train(cfg, &corpus), &tc)?.model;
        let zs = meta_train(&base, TrainingChoice::ZeroShot, &cfg.meta_stages, &pools, &roles, &mc)?.model;
        let st = self_train(&zs, &unlabeled, &cfg.self_train, &mc, &monitor)?;
        save_model(dir, &format!("self_train.seed{seed}"), cfg, &st.model, seed)?;
        save_trace_csv(&st.trace, &dir.join(format!("meta_loss.seed{seed}.csv")))?;
        write_file(
            &dir.join(format!("rounds.seed{seed}.json")),
            &serde_json::to_string_pretty(&serde_json::json!({"best_round": st.best_round, "rounds": st.rounds}))?,
        )?;
        Ok(vec![
            run_result(cfg, Method::Meta, "zero-shot".into(), "bow", seed, zs.predict(&test)?, &test)?,
            run_result(cfg, Method::SelfTrain, "zero-shot".into(), "bow", seed, st.model.predict(&test)?, &test)?,
        ])
    })?;
    Ok(per_seed.into_iter().flatten().collect())
}

fn cmd_domain_adapt(cfg: &ExperimentConfig, dir: &Path, parallel: bool) -> Result<Vec<RunResult>> {
    let corpus = load_experiment_corpus(cfg, &all_languages(cfg))?;
    let arch = architecture(cfg)?;
    let test = corpus.select(&cfg.languages.target, Split::Test);
    let aux: Vec<(String, Vec<Example>)> = cfg
        .languages
        .source
        .iter()
        .map(|l| (l.clone(), corpus.select(l, Split::Train)))
        .collect();
    let setting = format!("{} instances", cfg.domain_adapt.instances);
    let per_seed = for_seeds(cfg, parallel, |seed| {
        let (tc, mc) = seeded(cfg, seed);
        let init = TextClassifier::new(arch, seed)?;
        let r = domain_adapt_train(&init, &aux, &test, cfg.domain_adapt.instances, &tc, &mc)?;
        write_file(&dir.join(format!("domain_adapt.seed{seed}.json")), &serde_json::to_string_pretty(&r)?)?;
        Ok(vec![
            run_result(cfg, Method::DomainAdapt, setting.clone(), "fine-tune", seed, r.finetune_predictions, &test)?,
            run_result(cfg, Method::DomainAdapt, setting.clone(), "meta", seed, r.meta_predictions, &test)?,
        ])
    })?;
    Ok(per_seed.into_iter().flatten().collect())
}

fn build_backend(cfg: &IclConfig) -> Result<Box<dyn ScoringBackend>> {
    Ok(match &cfg.backend {
        BackendConfig::Mock => Box::new(OverlapScorer),
        BackendConfig::Scripted { responses } => Box::new(ScriptedGenerator::new(responses.clone())?),
        BackendConfig::Chat(c) => {
            let mut c = c.clone();
            if let Some(t) = cfg.temperature {
                c.temperature = t;
            }
            Box::new(ChatClient::from_env(c)?)
        }
    })
}

fn cmd_icl_run(cfg: &ExperimentConfig, parallel: bool) -> Result<Vec<RunResult>> {
    let corpus = load_experiment_corpus(cfg, &all_languages(cfg))?;
    let task = cfg.task()?;
    let library = match &cfg.paths.prompts {
        Some(p) => PromptLibrary::dir(p),
        None => PromptLibrary::Builtin,
    };
    let backend = build_backend(&cfg.icl)?;
    let model_label = cfg.icl.model_label.clone().unwrap_or_else(|| backend.name().to_owned());
    let english = &cfg.languages.source[0];
    let mut shots = vec![0];
    if cfg.icl.k > 0 {
        shots.push(cfg.icl.k);
    }
    let mut jobs = Vec::new();
    for &strategy in &cfg.icl.strategies {
        for &k in &shots {
            for &seed in &cfg.seeds {
                jobs.push((strategy, k, seed));
            }
        }
    }
    let run = |(strategy, k, seed): (Strategy, usize, u64)| -> Result<RunResult> {
        let lang = match strategy {
            Strategy::Swahili | Strategy::CrossLingual => &cfg.languages.target,
            Strategy::English => english,
        };
        let pool = corpus.select(lang, Split::Train);
        let mut test = corpus.select(lang, Split::Test);
        if let Some(n) = cfg.icl.test_limit {
            test.truncate(n);
        }
        let spec = IclRunSpec {
            strategy,
            mode: cfg.icl.mode,
            k,
            separator: cfg.icl.separator.clone(),
            max_input_tokens: cfg.icl.max_input_tokens,
            seed,
            model_label: model_label.clone(),
        };
        let out = run_icl(backend.as_ref(), &library, &task, &spec, &pool, &test)?;
        if out.truncated > 0 {
            log::warn!("{strategy} k={k} seed={seed}: {} inputs truncated", out.truncated);
        }
        Ok(out.result)
    };
    if parallel {
        jobs.into_par_iter().map(run).collect()
    } else {
        jobs.into_iter().map(run).collect()
    }
}

fn cmd_synth_gen(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let langs = all_languages(cfg);
    let refs: Vec<&str> = langs.iter().map(String::as_str).collect();
    let synth = SyntheticConfig {
        dataset: cfg.dataset_name()?,
        ..cfg.synth.clone()
    };
    let family = make_synthetic_family(&synth, &refs)?;
    create_dir(&cfg.paths.corpora)?;
    let mut written = Vec::new();
    for (lang, corpus) in langs.iter().zip(&family.corpora) {
        let path = cfg.paths.corpora.join(corpus_file_name(&synth.dataset, lang));
        corpus.save_jsonl(&path)?;
        written.push(path.display().to_string());
    }
    write_file(
        &dir.join("manifest.json"),
        &serde_json::to_string_pretty(&serde_json::json!({"task_id": family.corpora[0].task.task_id, "files": written}))?,
    )
}

/// Runs one parsed command; returns the output directory.
pub fn run(command: &Command) -> Result<PathBuf> {
    let args = command.args();
    let (cfg, canonical) = load_config(&args.config, &args.overrides)?;
    cfg.validate(command)?;
    let dir = output_dir(&cfg, command.name(), &canonical);
    create_dir(&dir)?;
    write_file(&dir.join("config.json"), &serde_json::to_string_pretty(&cfg)?)?;
    if !args.overrides.is_empty() {
        write_file(&dir.join("overrides.json"), &serde_json::to_string_pretty(&args.overrides)?)?;
    }
    let parallel = args.parallel;
    let (runs, grid) = match command {
        Command::Prep(_) => {
            cmd_prep(&cfg, &dir)?;
            return Ok(dir);
        }
        Command::SynthGen(_) => {
            cmd_synth_gen(&cfg, &dir)?;
            return Ok(dir);
        }
        Command::Report(_) => {
            let mut runs = Vec::new();
            for p in &cfg.report.inputs {
                runs.extend(read_runs(p)?);
            }
            write_report(&dir, &runs, cfg.report.grouping, Some(cfg.report.grid_metric))?;
            return Ok(dir);
        }
        Command::TrainBaseline(_) => (cmd_train_baseline(&cfg, &dir, parallel)?, None),
        Command::MetaTrain(_) => (cmd_meta_train(&cfg, &dir, parallel)?, None),
        Command::SelfTrain(_) => (cmd_self_train(&cfg, &dir, parallel)?, None),
        Command::DomainAdapt(_) => (cmd_domain_adapt(&cfg, &dir, parallel)?, None),
        Command::IclRun(_) => (cmd_icl_run(&cfg, parallel)?, Some(Metric::Accuracy)),
    };
    write_runs(&dir.join("runs.jsonl"), &runs)?;
    write_report(&dir, &runs, Grouping::PerTask, grid)?;
    Ok(dir)
}

/// Process entry point: parses argv, runs, prints errors on one line, and
/// returns the exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            let kind = e.kind();
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("xlmh: error[{}]: {msg}", kind.as_str());
            kind.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_scalars_only() {
        let mut v = serde_json::json!({"meta": {"alpha": 0.1}, "seeds": [1, 2]});
        let applied = apply_overrides(&mut v, &["meta.alpha=0.2".into(), "paths.output=out".into()]).unwrap();
        assert_eq!(v["meta"]["alpha"], 0.2);
        assert_eq!(v["paths"]["output"], "out");
        assert_eq!(applied[0].1, serde_json::json!(0.1));
        assert!(apply_overrides(&mut v, &["seeds=3".into()]).is_err());
        assert!(apply_overrides(&mut v, &["meta.alpha".into()]).is_err());
    }

    #[test]
    fn default_config_roundtrips() {
        let cfg = ExperimentConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
    }
}
