//! Bag-of-embeddings text classifier and its plain-SGD fine-tuning loop.

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::textdata::{featurize_text, Example, TaskSpec};

pub const EMBEDDINGS: &str = "embeddings";
pub const HEAD_WEIGHT: &str = "head_weight";
pub const HEAD_BIAS: &str = "head_bias";
pub const DEFAULT_EMBED_DIM: usize = 64;
const INIT_SCALE: f64 = 0.05;

/// Something that can score a batch under a given parameter set. The meta
/// learner only needs this, which lets tests drive it with scalar surrogates.
pub trait Objective: Sync {
    type Batch: Sync;

    fn loss_and_grad(&self, params: &ParamSet, batch: &Self::Batch) -> Result<(f64, Gradients)>;
}

/// Fixed sizes of the classifier: hashing vocabulary, embedding width, classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub vocab_size: usize,
    pub dim: usize,
    pub num_classes: usize,
}

/// Token-id bags with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub bags: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }
}

impl Architecture {
    pub fn batch(&self, examples: &[Example]) -> Result<Batch> {
        let mut bags = Vec::with_capacity(examples.len());
        let mut labels = Vec::with_capacity(examples.len());
        for ex in examples {
            bags.push(featurize_text(&ex.text, self.vocab_size)?.token_ids);
            labels.push(ex.label);
        }
        Ok(Batch { bags, labels })
    }

    /// Records `mean(E[ids]) · W + 1·b` on the tape.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, bags: &[Vec<usize>]) -> Result<Var> {
        let pooled = tape.gather_mean(vars.embeddings, bags.to_vec())?;
        let scores = tape.matmul(pooled, vars.head_weight)?;
        let ones = tape.constant(Tensor::new(vec![bags.len(), 1], vec![1.0; bags.len()])?);
        let bias = tape.matmul(ones, vars.head_bias)?;
        tape.add(scores, bias)
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let expect = [
            (EMBEDDINGS, vec![self.vocab_size, self.dim]),
            (HEAD_WEIGHT, vec![self.dim, self.num_classes]),
            (HEAD_BIAS, vec![self.num_classes]),
        ];
        if params.len() != expect.len() {
            return Err(Error::contract(format!(
                "classifier expects {} parameters, got {}",
                expect.len(),
                params.len()
            )));
        }
        for (name, shape) in expect {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Dimension {
                        op: "classifier",
                        detail: format!("{name}: expected {shape:?}, got {:?}", t.shape()),
                    })
                }
                None => return Err(Error::contract(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }
}

pub struct ParamVars {
    pub embeddings: Var,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ParamSet) -> Result<Self> {
        let vars = tape.params(params)?;
        let get = |n: &str| {
            vars.get(n)
                .copied()
                .ok_or_else(|| Error::contract(format!("missing parameter {n}")))
        };
        Ok(Self {
            embeddings: get(EMBEDDINGS)?,
            head_weight: get(HEAD_WEIGHT)?,
            head_bias: get(HEAD_BIAS)?,
        })
    }
}

/// Mean negative log-softmax of the true class.
pub fn loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = tape.value(logits).shape().last().copied().unwrap_or(0);
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
    }
    let log_probs = tape.log_softmax(logits)?;
    tape.nll(log_probs, labels.to_vec())
}

impl Objective for Architecture {
    type Batch = Batch;

    fn loss_and_grad(&self, params: &ParamSet, batch: &Batch) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, params)?;
        let logits = self.forward(&mut tape, &vars, &batch.bags)?;
        let l = loss(&mut tape, logits, &batch.labels)?;
        let value = tape.value(l).item().expect("scalar loss");
        Ok((value, tape.backward(l)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextClassifier {
    pub arch: Architecture,
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub task: TaskSpec,
    pub vocab_size: usize,
    pub dim: usize,
    pub seed: u64,
}

impl TextClassifier {
    /// Embeddings ~ U(−0.05, 0.05) from `seed`; zero head, so the initial loss is ln C.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        if !arch.vocab_size.is_power_of_two() || arch.dim == 0 || arch.num_classes < 2 {
            return Err(Error::config(format!("invalid architecture {arch:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new_inclusive(-INIT_SCALE, INIT_SCALE);
        let emb: Vec<f64> = (0..arch.vocab_size * arch.dim).map(|_| dist.sample(&mut rng)).collect();
        let mut params = ParamSet::new();
        params.insert(EMBEDDINGS, Tensor::new(vec![arch.vocab_size, arch.dim], emb)?)?;
        params.insert(HEAD_WEIGHT, Tensor::zeros(&[arch.dim, arch.num_classes]))?;
        params.insert(HEAD_BIAS, Tensor::zeros(&[arch.num_classes]))?;
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: ParamSet) -> Result<Self> {
        arch.check_params(&params)?;
        Ok(Self { arch, params })
    }

    pub fn with_params(&self, params: ParamSet) -> Self {
        Self {
            arch: self.arch,
            params,
        }
    }

    pub fn forward_logits(&self, examples: &[Example]) -> Result<Tensor> {
        let batch = self.arch.batch(examples)?;
        self.logits_for_bags(&batch.bags)
    }

    pub fn logits_for_bags(&self, bags: &[Vec<usize>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &self.params)?;
        let out = self.arch.forward(&mut tape, &vars, bags)?;
        Ok(tape.value(out).clone())
    }

    pub fn loss(&self, examples: &[Example]) -> Result<f64> {
        let batch = self.arch.batch(examples)?;
        Ok(self.arch.loss_and_grad(&self.params, &batch)?.0)
    }

    /// Row-wise softmax probabilities.
    pub fn predict_proba(&self, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
        if examples.is_empty() {
            return Ok(Vec::new());
        }
        let logits = self.forward_logits(examples)?;
        let c = self.arch.num_classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                exps.into_iter().map(|e| e / z).collect()
            })
            .collect())
    }

    /// Argmax class per example; ties go to the lowest index.
    pub fn predict(&self, examples: &[Example]) -> Result<Vec<usize>> {
        if examples.is_empty() {
            return Ok(Vec::new());
        }
        let logits = self.forward_logits(examples)?;
        Ok(logits.data().chunks(self.arch.num_classes).map(argmax).collect())
    }

    pub fn save(&self, params_path: &Path, meta: &ModelMeta) -> Result<()> {
        self.params.save(params_path)?;
        let meta_path = params_path.with_extension("meta.json");
        let text = serde_json::to_string_pretty(meta)?;
        std::fs::write(&meta_path, text).map_err(|e| Error::io(meta_path, e))
    }

    pub fn load(params_path: &Path) -> Result<(Self, ModelMeta)> {
        let meta_path = params_path.with_extension("meta.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ModelMeta = serde_json::from_str(&text)?;
        let arch = Architecture {
            vocab_size: meta.vocab_size,
            dim: meta.dim,
            num_classes: meta.task.num_classes(),
        };
        let params = ParamSet::load(params_path)?;
        Ok((Self::from_params(arch, params)?, meta))
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2.0,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("train.weight_decay must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub model: TextClassifier,
    /// Mean mini-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD over seeded shuffles. The input model is not modified.
pub fn fine_tune(model: &TextClassifier, train: &[Example], cfg: &TrainConfig) -> Result<FineTuneOutcome> {
    if train.is_empty() {
        return Err(Error::contract("fine_tune needs a non-empty training set"));
    }
    cfg.validate()?;
    let batch = model.arch.batch(train)?;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.params.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mb = Batch {
                bags: chunk.iter().map(|&i| batch.bags[i].clone()).collect(),
                labels: chunk.iter().map(|&i| batch.labels[i]).collect(),
            };
            let (l, mut g) = model.arch.loss_and_grad(&params, &mb)?;
            if cfg.weight_decay > 0.0 {
                let mut decay = Gradients::default();
                for (name, t) in params.iter() {
                    let scaled: Vec<f64> = t.data().iter().map(|v| v * cfg.weight_decay).collect();
                    decay.insert(name, Tensor::new(t.shape().to_vec(), scaled)?);
                }
                g.accumulate(&decay)?;
            }
            params = params.sgd_step(&g, cfg.lr)?;
            total += l;
            steps += 1;
        }
        epoch_losses.push(total / steps as f64);
    }
    Ok(FineTuneOutcome {
        model: model.with_params(params),
        epoch_losses,
    })
}
