//! Episodic first-order MAML with a source→target meta-train stage and a
//! target-only meta-adapt stage, plus silver-label self-training and the
//! auxiliary-language domain adaptation experiment.
//!
//! Inner step: `θ′ = θ − α ∇L_S(θ)`. Outer step:
//! `θ ← θ − β Σ_i ∇L_{Q_i}(θ′_i)`, where the query gradient is taken at the
//! adapted parameters and applied to θ (first-order approximation). The sum
//! is reduced in episode order so a fixed seed gives a bit-identical θ path.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamSet};
use crate::classifier::{argmax, fine_tune, Objective, TextClassifier, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::macro_f1;
use crate::textdata::{sample_episode_with, Corpus, Episode, Example, LabelOrigin, Split};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Inner-loop step size. Zero disables adaptation (θ′ = θ).
    pub alpha: f64,
    /// Outer-loop step size.
    pub beta: f64,
    pub shots: usize,
    pub query_size: usize,
    pub inner_steps: usize,
    /// Episodes per outer step (M).
    pub task_batch: usize,
    pub outer_steps: usize,
    pub seed: u64,
    pub first_order: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.05,
            shots: 32,
            query_size: 32,
            inner_steps: 1,
            task_batch: 4,
            outer_steps: 500,
            seed: 0,
            first_order: true,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("meta.alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::config(format!("meta.beta must be > 0, got {}", self.beta)));
        }
        if self.shots == 0 || self.query_size == 0 {
            return Err(Error::config("meta.shots and meta.query_size must be >= 1"));
        }
        if self.inner_steps == 0 {
            return Err(Error::config("meta.inner_steps must be >= 1"));
        }
        if self.task_batch == 0 {
            return Err(Error::config("meta.task_batch must be >= 1"));
        }
        if !self.first_order {
            return Err(Error::config("second-order meta-gradients are not implemented; set first_order = true"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    MetaTrain,
    MetaAdapt,
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageKind::MetaTrain => "meta-train",
            StageKind::MetaAdapt => "meta-adapt",
        })
    }
}

/// Which languages feed the support and query sides of a stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub stage: StageKind,
    pub support_languages: Vec<String>,
    pub query_languages: Vec<String>,
    /// Meta-train only: query sets come from the source training split,
    /// standing in for target data when no target labels may be used.
    pub surrogate_query: bool,
}

impl StageSpec {
    pub fn meta_train(source: &[String], target: &[String]) -> Self {
        Self {
            stage: StageKind::MetaTrain,
            support_languages: source.to_vec(),
            query_languages: target.to_vec(),
            surrogate_query: false,
        }
    }

    pub fn meta_train_surrogate(source: &[String]) -> Self {
        Self {
            stage: StageKind::MetaTrain,
            support_languages: source.to_vec(),
            query_languages: source.to_vec(),
            surrogate_query: true,
        }
    }

    pub fn meta_adapt(target: &[String]) -> Self {
        Self {
            stage: StageKind::MetaAdapt,
            support_languages: target.to_vec(),
            query_languages: target.to_vec(),
            surrogate_query: false,
        }
    }

    fn validate(&self, pools: &LanguagePools) -> Result<()> {
        if self.support_languages.is_empty() || self.query_languages.is_empty() {
            return Err(Error::config(format!("{} stage needs support and query languages", self.stage)));
        }
        for lang in self.support_languages.iter().chain(&self.query_languages) {
            if !pools.pools.contains_key(lang) {
                return Err(Error::config(format!("no pool for language {lang:?}")));
            }
        }
        let support: BTreeSet<&String> = self.support_languages.iter().collect();
        let query: BTreeSet<&String> = self.query_languages.iter().collect();
        match self.stage {
            StageKind::MetaTrain if self.surrogate_query => {
                if support != query {
                    return Err(Error::config("surrogate meta-train draws both sides from the source languages"));
                }
            }
            StageKind::MetaTrain => {
                if !support.is_disjoint(&query) {
                    return Err(Error::config(format!(
                        "meta-train support languages {support:?} overlap query languages {query:?}"
                    )));
                }
            }
            StageKind::MetaAdapt => {
                if support != query {
                    return Err(Error::config(format!(
                        "meta-adapt uses the same target languages on both sides, got {support:?} / {query:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Zero-shot or few-shot use of target-language labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "choice", rename_all = "kebab-case")]
pub enum TrainingChoice {
    /// No gold target labels. Target-side sets come from silver labels when
    /// present, otherwise from source-language surrogate queries.
    ZeroShot,
    /// Gold target labels, optionally capped at `k_target_labeled` examples.
    FewShot { k_target_labeled: Option<usize> },
}

/// Per-language example pools used to build episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LanguagePool {
    pub validation: Vec<Example>,
    pub train: Vec<Example>,
    /// Model-labelled target examples for zero-shot training.
    pub silver: Vec<Example>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LanguagePools {
    pub pools: BTreeMap<String, LanguagePool>,
}

impl LanguagePools {
    /// Collects the train and validation splits of every language in `corpus`.
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        if corpus.splits.is_empty() {
            return Err(Error::contract("corpus has no split markers; run split_corpus first"));
        }
        let mut out = Self::default();
        for lang in corpus.languages() {
            out.pools.insert(
                lang.to_owned(),
                LanguagePool {
                    validation: corpus.select(lang, Split::Val),
                    train: corpus.select(lang, Split::Train),
                    silver: Vec::new(),
                },
            );
        }
        Ok(out)
    }

    pub fn from_corpora(corpora: &[Corpus]) -> Result<Self> {
        let mut out = Self::default();
        for c in corpora {
            for (lang, pool) in Self::from_corpus(c)?.pools {
                if out.pools.insert(lang.clone(), pool).is_some() {
                    return Err(Error::config(format!("language {lang:?} appears in two corpora")));
                }
            }
        }
        Ok(out)
    }

    pub fn get(&self, lang: &str) -> Option<&LanguagePool> {
        self.pools.get(lang)
    }

    pub fn set_silver(&mut self, lang: &str, silver: Vec<Example>) -> Result<()> {
        let pool = self
            .pools
            .get_mut(lang)
            .ok_or_else(|| Error::config(format!("no pool for language {lang:?}")))?;
        pool.silver = silver;
        Ok(())
    }

    fn gather(&self, langs: &[String], pick: impl Fn(&LanguagePool) -> &Vec<Example>) -> Vec<Example> {
        langs
            .iter()
            .filter_map(|l| self.pools.get(l))
            .flat_map(|p| pick(p).iter().cloned())
            .collect()
    }
}

/// Draws `count` episodes for one stage. Meta-train support comes from the
/// source validation split and queries from the target training split;
/// meta-adapt draws both sides from the target training split.
pub fn generate_episodes(
    pools: &LanguagePools,
    stage: &StageSpec,
    cfg: &MetaConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_episodes_with(pools, stage, cfg, count, &mut rng)
}

fn generate_episodes_with(
    pools: &LanguagePools,
    stage: &StageSpec,
    cfg: &MetaConfig,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Episode>> {
    stage.validate(pools)?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let (support_pool, query_pool) = stage_pools(pools, stage);
    (0..count)
        .map(|_| sample_episode_with(&support_pool, &query_pool, cfg.shots, cfg.query_size, rng))
        .collect()
}

fn stage_pools(pools: &LanguagePools, stage: &StageSpec) -> (Vec<Example>, Vec<Example>) {
    match stage.stage {
        StageKind::MetaTrain => (
            pools.gather(&stage.support_languages, |p| &p.validation),
            pools.gather(&stage.query_languages, |p| &p.train),
        ),
        StageKind::MetaAdapt => {
            let pool = pools.gather(&stage.support_languages, |p| &p.train);
            (pool.clone(), pool)
        }
    }
}

/// Checks that every support example is in a support language and every
/// query example in a query language.
pub fn audit_languages(episodes: &[Episode], stage: &StageSpec) -> Result<()> {
    let support: BTreeSet<&str> = stage.support_languages.iter().map(String::as_str).collect();
    let query: BTreeSet<&str> = stage.query_languages.iter().map(String::as_str).collect();
    for (i, ep) in episodes.iter().enumerate() {
        if let Some(ex) = ep.support.iter().find(|e| !support.contains(e.language.as_str())) {
            return Err(Error::contract(format!(
                "episode {i}: support example {} is {:?}",
                ex.id, ex.language
            )));
        }
        if let Some(ex) = ep.query.iter().find(|e| !query.contains(e.language.as_str())) {
            return Err(Error::contract(format!(
                "episode {i}: query example {} is {:?}",
                ex.id, ex.language
            )));
        }
    }
    Ok(())
}

/// Fails if any episode carries a gold-labelled example of a target language.
pub fn audit_zero_shot(episodes: &[Episode], target_languages: &[String]) -> Result<()> {
    for (i, ep) in episodes.iter().enumerate() {
        let leak = ep.support.iter().chain(&ep.query).find(|e| {
            e.origin == LabelOrigin::Gold && target_languages.iter().any(|t| *t == e.language)
        });
        if let Some(ex) = leak {
            return Err(Error::contract(format!(
                "zero-shot episode {i} contains gold target example {} ({})",
                ex.id, ex.language
            )));
        }
    }
    Ok(())
}

/// `steps` plain gradient steps on the support batch. Returns θ′ and the
/// support loss measured at θ.
pub fn inner_adapt_with<O: Objective>(
    objective: &O,
    params: &ParamSet,
    support: &O::Batch,
    alpha: f64,
    steps: usize,
) -> Result<(ParamSet, f64)> {
    if steps == 0 {
        return Err(Error::contract("inner_adapt needs steps >= 1"));
    }
    if !(alpha >= 0.0) {
        return Err(Error::contract(format!("inner step size must be >= 0, got {alpha}")));
    }
    let (first_loss, g) = objective.loss_and_grad(params, support)?;
    if alpha == 0.0 {
        return Ok((params.clone(), first_loss));
    }
    let mut adapted = params.sgd_step(&g, alpha)?;
    for _ in 1..steps {
        let (_, g) = objective.loss_and_grad(&adapted, support)?;
        adapted = adapted.sgd_step(&g, alpha)?;
    }
    Ok((adapted, first_loss))
}

pub fn inner_adapt(model: &TextClassifier, support: &[Example], alpha: f64, steps: usize) -> Result<ParamSet> {
    let batch = model.arch.batch(support)?;
    Ok(inner_adapt_with(&model.arch, &model.params, &batch, alpha, steps)?.0)
}

/// Result of one first-order outer step.
#[derive(Debug, Clone)]
pub struct OuterStep {
    pub params: ParamSet,
    /// `Σ_i ∇L_{Q_i}(θ′_i)`, before multiplying by β.
    pub meta_gradient: Gradients,
    pub mean_support_loss: f64,
    pub mean_query_loss: f64,
}

pub fn outer_step_with<O: Objective>(
    objective: &O,
    params: &ParamSet,
    episodes: &[(O::Batch, O::Batch)],
    cfg: &MetaConfig,
) -> Result<OuterStep> {
    if episodes.is_empty() {
        return Err(Error::contract("outer update needs at least one episode"));
    }
    // Adaptation per episode is independent; the reduction below stays in
    // episode order.
    let per_episode: Vec<Result<(f64, f64, Gradients)>> = episodes
        .par_iter()
        .map(|(support, query)| {
            let (adapted, ls) = inner_adapt_with(objective, params, support, cfg.alpha, cfg.inner_steps)?;
            let (lq, gq) = objective.loss_and_grad(&adapted, query)?;
            Ok((ls, lq, gq))
        })
        .collect();
    let mut sum = Gradients::zeros_like(params);
    let (mut ls_total, mut lq_total) = (0.0, 0.0);
    for r in per_episode {
        let (ls, lq, g) = r?;
        sum.accumulate(&g)?;
        ls_total += ls;
        lq_total += lq;
    }
    let n = episodes.len() as f64;
    Ok(OuterStep {
        params: params.sgd_step(&sum, cfg.beta)?,
        meta_gradient: sum,
        mean_support_loss: ls_total / n,
        mean_query_loss: lq_total / n,
    })
}

fn featurize_episodes(model: &TextClassifier, episodes: &[Episode]) -> Result<Vec<(crate::classifier::Batch, crate::classifier::Batch)>> {
    episodes
        .iter()
        .map(|ep| {
            if ep.support.is_empty() || ep.query.is_empty() {
                return Err(Error::contract("episode with empty support or query set"));
            }
            Ok((model.arch.batch(&ep.support)?, model.arch.batch(&ep.query)?))
        })
        .collect()
}

pub fn outer_update_detailed(model: &TextClassifier, episodes: &[Episode], cfg: &MetaConfig) -> Result<OuterStep> {
    let batches = featurize_episodes(model, episodes)?;
    outer_step_with(&model.arch, &model.params, &batches, cfg)
}

pub fn outer_update(model: &TextClassifier, episodes: &[Episode], cfg: &MetaConfig) -> Result<TextClassifier> {
    let step = outer_update_detailed(model, episodes, cfg)?;
    Ok(model.with_params(step.params))
}

/// One row of the meta-loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub outer_step: usize,
    pub stage: String,
    pub mean_support_loss: f64,
    pub mean_query_loss: f64,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "outer_step,stage,mean_support_loss,mean_query_loss")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.17e},{:.17e}",
            r.outer_step, r.stage, r.mean_support_loss, r.mean_query_loss
        )?;
    }
    Ok(())
}

pub fn save_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_trace_csv(rows, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Source and target languages of an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageRoles {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct MetaOutcome {
    pub model: TextClassifier,
    pub trace: Vec<TraceRow>,
    /// Stages that ran, with the stage spec actually used.
    pub stages_run: Vec<StageSpec>,
    /// Checkpoint at the end of each stage that ran.
    pub stage_checkpoints: Vec<(StageKind, ParamSet)>,
}

/// Resolves the pools and stage specs that a training choice permits.
fn plan_stages(
    pools: &LanguagePools,
    roles: &LanguageRoles,
    choice: TrainingChoice,
    stages: &[StageKind],
    seed: u64,
) -> Result<(LanguagePools, Vec<StageSpec>)> {
    let mut pools = pools.clone();
    let mut plan = Vec::new();
    match choice {
        TrainingChoice::FewShot { k_target_labeled } => {
            if let Some(k) = k_target_labeled {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b5f_7461_7267);
                for t in &roles.target {
                    let pool = pools
                        .pools
                        .get_mut(t)
                        .ok_or_else(|| Error::config(format!("no pool for target language {t:?}")))?;
                    if k < pool.train.len() {
                        pool.train.shuffle(&mut rng);
                        pool.train.truncate(k);
                    }
                }
            }
            for s in stages {
                plan.push(match s {
                    StageKind::MetaTrain => StageSpec::meta_train(&roles.source, &roles.target),
                    StageKind::MetaAdapt => StageSpec::meta_adapt(&roles.target),
                });
            }
        }
        TrainingChoice::ZeroShot => {
            let has_silver = roles
                .target
                .iter()
                .all(|t| pools.get(t).is_some_and(|p| !p.silver.is_empty()));
            for t in &roles.target {
                if let Some(pool) = pools.pools.get_mut(t) {
                    // Gold target labels never reach an episode.
                    pool.train = std::mem::take(&mut pool.silver);
                    pool.validation.clear();
                }
            }
            for s in stages {
                match (s, has_silver) {
                    (StageKind::MetaTrain, true) => plan.push(StageSpec::meta_train(&roles.source, &roles.target)),
                    (StageKind::MetaTrain, false) => plan.push(StageSpec::meta_train_surrogate(&roles.source)),
                    (StageKind::MetaAdapt, true) => plan.push(StageSpec::meta_adapt(&roles.target)),
                    (StageKind::MetaAdapt, false) => {
                        log::info!("zero-shot without silver labels: skipping meta-adapt stage");
                    }
                }
            }
        }
    }
    Ok((pools, plan))
}

/// Runs the requested stages in order, `cfg.outer_steps` outer updates each.
/// The base model should already be fine-tuned on the source language.
pub fn meta_train(
    base: &TextClassifier,
    choice: TrainingChoice,
    stages: &[StageKind],
    pools: &LanguagePools,
    roles: &LanguageRoles,
    cfg: &MetaConfig,
) -> Result<MetaOutcome> {
    cfg.validate()?;
    let (pools, plan) = plan_stages(pools, roles, choice, stages, cfg.seed)?;
    let mut model = base.clone();
    let mut trace = Vec::new();
    let mut checkpoints = Vec::new();
    let mut global_step = 0;
    for (stage_index, spec) in plan.iter().enumerate() {
        if cfg.outer_steps == 0 {
            break;
        }
        spec.validate(&pools)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + stage_index as u64));
        for _ in 0..cfg.outer_steps {
            let episodes = generate_episodes_with(&pools, spec, cfg, cfg.task_batch, &mut rng)?;
            audit_languages(&episodes, spec)?;
            if choice == TrainingChoice::ZeroShot {
                audit_zero_shot(&episodes, &roles.target)?;
            }
            let step = outer_update_detailed(&model, &episodes, cfg)?;
            model = model.with_params(step.params);
            trace.push(TraceRow {
                outer_step: global_step,
                stage: spec.stage.to_string(),
                mean_support_loss: step.mean_support_loss,
                mean_query_loss: step.mean_query_loss,
            });
            global_step += 1;
        }
        checkpoints.push((spec.stage, model.params.clone()));
    }
    let stages_run = if cfg.outer_steps == 0 { Vec::new() } else { plan };
    Ok(MetaOutcome {
        model,
        trace,
        stages_run,
        stage_checkpoints: checkpoints,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfTrainConfig {
    pub rounds: usize,
    pub threshold: f64,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            threshold: 0.9,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("self_train.rounds must be >= 1"));
        }
        if !(0.5..1.0).contains(&self.threshold) {
            return Err(Error::config(format!(
                "self_train.threshold must lie in [0.5, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub silver_examples: usize,
    pub monitor_macro_f1: f64,
    pub updated: bool,
}

#[derive(Debug, Clone)]
pub struct SelfTrainOutcome {
    pub model: TextClassifier,
    /// 0 means the input model was never beaten on the monitor set.
    pub best_round: usize,
    pub rounds: Vec<RoundReport>,
    pub trace: Vec<TraceRow>,
}

/// Labels the examples the model is confident about (max softmax ≥ threshold).
pub fn silver_label(model: &TextClassifier, unlabeled: &[Example], threshold: f64) -> Result<Vec<Example>> {
    let probs = model.predict_proba(unlabeled)?;
    Ok(unlabeled
        .iter()
        .zip(probs)
        .filter_map(|(ex, p)| {
            let best = argmax(&p);
            (p[best] >= threshold).then(|| ex.with_silver_label(best))
        })
        .collect())
}

/// Iterative refinement on silver target labels. Each round relabels the
/// target pool with the current model, runs meta-adapt style outer updates on
/// the confident part, and scores the result on a source-language monitor set.
/// The best round by monitor macro-F1 is returned (ties go to the later round).
pub fn self_train(
    model: &TextClassifier,
    unlabeled_target: &[Example],
    st: &SelfTrainConfig,
    cfg: &MetaConfig,
    monitor: &[Example],
) -> Result<SelfTrainOutcome> {
    st.validate()?;
    cfg.validate()?;
    if monitor.is_empty() {
        return Err(Error::contract("self_train needs a non-empty source validation set"));
    }
    let target_language = unlabeled_target
        .first()
        .map(|e| e.language.clone())
        .ok_or_else(|| Error::contract("self_train needs unlabeled target examples"))?;
    let classes = model.arch.num_classes;
    let monitor_golds: Vec<usize> = monitor.iter().map(|e| e.label).collect();
    let score = |m: &TextClassifier| -> Result<f64> { macro_f1(&m.predict(monitor)?, &monitor_golds, classes) };

    let mut current = model.clone();
    let mut best = (score(&current)?, 0, current.clone());
    let mut reports = vec![RoundReport {
        round: 0,
        silver_examples: 0,
        monitor_macro_f1: best.0,
        updated: false,
    }];
    let mut trace = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e1f_7ea1);
    for round in 1..=st.rounds {
        let silver = silver_label(&current, unlabeled_target, st.threshold)?;
        if silver.is_empty() && round == 1 {
            return Err(Error::SelfTraining(format!(
                "no target example reached confidence {}; lower the threshold",
                st.threshold
            )));
        }
        let n = silver.len();
        let updated = n >= 2 && cfg.outer_steps > 0;
        if updated {
            let shots = cfg.shots.min(n / 2).max(1);
            let query_size = cfg.query_size.min(n - shots).max(1);
            let round_cfg = MetaConfig {
                shots,
                query_size,
                ..*cfg
            };
            let mut pools = LanguagePools::default();
            pools.pools.insert(
                target_language.clone(),
                LanguagePool {
                    train: silver.clone(),
                    ..LanguagePool::default()
                },
            );
            let spec = StageSpec::meta_adapt(std::slice::from_ref(&target_language));
            for _ in 0..cfg.outer_steps {
                let episodes = generate_episodes_with(&pools, &spec, &round_cfg, cfg.task_batch, &mut rng)?;
                let step = outer_update_detailed(&current, &episodes, &round_cfg)?;
                current = current.with_params(step.params);
                trace.push(TraceRow {
                    outer_step: trace.len(),
                    stage: format!("self-train-{round}"),
                    mean_support_loss: step.mean_support_loss,
                    mean_query_loss: step.mean_query_loss,
                });
            }
        } else {
            log::info!("self-training round {round}: {n} silver examples, skipping updates");
        }
        let f1 = score(&current)?;
        reports.push(RoundReport {
            round,
            silver_examples: n,
            monitor_macro_f1: f1,
            updated,
        });
        if f1 >= best.0 {
            best = (f1, round, current.clone());
        }
    }
    Ok(SelfTrainOutcome {
        model: best.2,
        best_round: best.1,
        rounds: reports,
        trace,
    })
}

/// Allowed per-language training caps for the domain adaptation sweep.
pub const INSTANCE_CAPS: [usize; 3] = [512, 1024, 2048];

pub fn check_instance_cap(instances: usize) -> Result<()> {
    if INSTANCE_CAPS.contains(&instances) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "instances must be one of {INSTANCE_CAPS:?}, got {instances}"
        )))
    }
}

/// Seeded shuffle, then keep at most `instances`. Smaller pools are used whole.
pub fn cap_instances(examples: &[Example], instances: usize, seed: u64) -> Result<Vec<Example>> {
    check_instance_cap(instances)?;
    let mut out = examples.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out.truncate(instances);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAdaptResult {
    pub instances_requested: usize,
    /// Examples actually used per auxiliary language.
    pub instances_used: BTreeMap<String, usize>,
    pub finetune_macro_f1: f64,
    pub meta_macro_f1: f64,
    pub finetune_predictions: Vec<usize>,
    pub meta_predictions: Vec<usize>,
}

/// Trains on auxiliary languages only and evaluates on the target test set.
///
/// The fine-tune variant trains on the union of the capped auxiliary pools.
/// The meta variant starts from that model and meta-trains with the first
/// auxiliary language as source and the others as targets (meta-train
/// followed by meta-adapt).
pub fn domain_adapt_train(
    init: &TextClassifier,
    aux: &[(String, Vec<Example>)],
    target_test: &[Example],
    instances: usize,
    train_cfg: &TrainConfig,
    meta_cfg: &MetaConfig,
) -> Result<DomainAdaptResult> {
    check_instance_cap(instances)?;
    if aux.len() < 2 {
        return Err(Error::config("domain adaptation needs at least two auxiliary languages"));
    }
    if target_test.is_empty() {
        return Err(Error::contract("empty target test set"));
    }
    let mut capped = Vec::new();
    let mut used = BTreeMap::new();
    for (i, (lang, examples)) in aux.iter().enumerate() {
        let c = cap_instances(examples, instances, meta_cfg.seed.wrapping_add(i as u64))?;
        used.insert(lang.clone(), c.len());
        capped.push((lang.clone(), c));
    }

    let union: Vec<Example> = capped.iter().flat_map(|(_, v)| v.iter().cloned()).collect();
    let ft = fine_tune(init, &union, train_cfg)?.model;

    let base = ft.clone();
    let mut pools = LanguagePools::default();
    for (lang, examples) in &capped {
        pools.pools.insert(
            lang.clone(),
            LanguagePool {
                validation: examples.clone(),
                train: examples.clone(),
                silver: Vec::new(),
            },
        );
    }
    let roles = LanguageRoles {
        source: vec![capped[0].0.clone()],
        target: capped[1..].iter().map(|(l, _)| l.clone()).collect(),
    };
    let meta = meta_train(
        &base,
        TrainingChoice::FewShot { k_target_labeled: None },
        &[StageKind::MetaTrain, StageKind::MetaAdapt],
        &pools,
        &roles,
        meta_cfg,
    )?
    .model;

    let golds: Vec<usize> = target_test.iter().map(|e| e.label).collect();
    let classes = init.arch.num_classes;
    let finetune_predictions = ft.predict(target_test)?;
    let meta_predictions = meta.predict(target_test)?;
    Ok(DomainAdaptResult {
        instances_requested: instances,
        instances_used: used,
        finetune_macro_f1: macro_f1(&finetune_predictions, &golds, classes)?,
        meta_macro_f1: macro_f1(&meta_predictions, &golds, classes)?,
        finetune_predictions,
        meta_predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, label: usize, lang: &str) -> Example {
        Example::new(id, format!("w{id}"), label, lang)
    }

    fn pools() -> LanguagePools {
        let mut p = LanguagePools::default();
        for lang in ["en", "sw"] {
            let mk = |tag: &str| -> Vec<Example> {
                (0..20).map(|i| ex(&format!("{lang}-{tag}-{i}"), i % 2, lang)).collect()
            };
            p.pools.insert(
                lang.to_owned(),
                LanguagePool {
                    validation: mk("val"),
                    train: mk("train"),
                    silver: Vec::new(),
                },
            );
        }
        p
    }

    fn langs(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| (*s).to_owned()).collect()
    }

    #[test]
    fn zero_count_gives_no_episodes() {
        let cfg = MetaConfig {
            shots: 4,
            query_size: 4,
            ..MetaConfig::default()
        };
        let spec = StageSpec::meta_train(&langs(&["en"]), &langs(&["sw"]));
        assert!(generate_episodes(&pools(), &spec, &cfg, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn stage_language_violations_are_config_errors() {
        let cfg = MetaConfig {
            shots: 4,
            query_size: 4,
            ..MetaConfig::default()
        };
        let overlapping = StageSpec::meta_train(&langs(&["en"]), &langs(&["en"]));
        assert!(matches!(
            generate_episodes(&pools(), &overlapping, &cfg, 1, 0),
            Err(Error::Config(_))
        ));
        let missing = StageSpec::meta_adapt(&langs(&["ar"]));
        assert!(matches!(generate_episodes(&pools(), &missing, &cfg, 1, 0), Err(Error::Config(_))));
        let mut mixed = StageSpec::meta_adapt(&langs(&["sw"]));
        mixed.query_languages = langs(&["en"]);
        assert!(matches!(generate_episodes(&pools(), &mixed, &cfg, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn meta_adapt_support_and_query_are_disjoint() {
        let cfg = MetaConfig {
            shots: 4,
            query_size: 4,
            ..MetaConfig::default()
        };
        let spec = StageSpec::meta_adapt(&langs(&["sw"]));
        for ep in generate_episodes(&pools(), &spec, &cfg, 50, 9).unwrap() {
            for s in &ep.support {
                assert!(ep.query.iter().all(|q| q.id != s.id));
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(MetaConfig::default().validate().is_ok());
        let bad = MetaConfig {
            beta: 0.0,
            ..MetaConfig::default()
        };
        assert!(bad.validate().is_err());
        let second_order = MetaConfig {
            first_order: false,
            ..MetaConfig::default()
        };
        assert!(second_order.validate().is_err());
        let st = SelfTrainConfig {
            threshold: 0.4,
            ..SelfTrainConfig::default()
        };
        assert!(st.validate().is_err());
        let st = SelfTrainConfig {
            rounds: 0,
            ..SelfTrainConfig::default()
        };
        assert!(st.validate().is_err());
    }

    #[test]
    fn instance_caps_are_enumerated() {
        for ok in INSTANCE_CAPS {
            assert!(check_instance_cap(ok).is_ok());
        }
        assert!(matches!(check_instance_cap(1000), Err(Error::Config(_))));
        let few: Vec<Example> = (0..400).map(|i| ex(&i.to_string(), i % 2, "en")).collect();
        assert_eq!(cap_instances(&few, 512, 0).unwrap().len(), 400);
        assert_eq!(cap_instances(&few, 512, 0).unwrap().len(), 400);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace_csv(
            &[TraceRow {
                outer_step: 0,
                stage: "meta-train".into(),
                mean_support_loss: 0.5,
                mean_query_loss: 0.25,
            }],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("outer_step,stage,mean_support_loss,mean_query_loss\n0,meta-train,"));
    }
}
