#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use xlmh::autodiff::{Gradients, ParamSet, Tape, Tensor, Var};
use xlmh::classifier::Objective;
use xlmh::error::Result;

/// One layer of a random test graph.
#[derive(Debug, Clone)]
pub enum Step {
    MatMul(String),
    Relu,
    Add(String),
    Sub(String),
    Scale(f64),
    Bias(String),
}

#[derive(Debug, Clone)]
pub enum Input {
    Dense(String),
    Bags { table: String, bags: Vec<Vec<usize>> },
}

#[derive(Debug, Clone)]
pub enum Head {
    Nll(Vec<usize>),
    Sum,
}

/// A small random computation ending in a scalar.
#[derive(Debug, Clone)]
pub struct Graph {
    pub params: ParamSet,
    pub input: Input,
    pub steps: Vec<Step>,
    pub head: Head,
    pub rows: usize,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_graph(rng: &mut ChaCha8Rng) -> Graph {
    let mut params = ParamSet::new();
    let rows = rng.gen_range(1..=4);
    let mut width = rng.gen_range(1..=5);
    let input = if rng.gen_bool(0.5) {
        params.insert("x", random_tensor(rng, &[rows, width])).unwrap();
        Input::Dense("x".into())
    } else {
        let vocab = rng.gen_range(2..=8);
        params.insert("table", random_tensor(rng, &[vocab, width])).unwrap();
        let bags = (0..rows)
            .map(|_| (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(0..vocab)).collect())
            .collect();
        Input::Bags { table: "table".into(), bags }
    };
    let mut steps = Vec::new();
    for i in 0..rng.gen_range(1..=4) {
        let name = format!("p{i}");
        match rng.gen_range(0..6) {
            0 | 1 => {
                let out = rng.gen_range(1..=5);
                params.insert(&name, random_tensor(rng, &[width, out])).unwrap();
                width = out;
                steps.push(Step::MatMul(name));
            }
            2 => steps.push(Step::Relu),
            3 => {
                params.insert(&name, random_tensor(rng, &[rows, width])).unwrap();
                steps.push(if rng.gen_bool(0.5) { Step::Add(name) } else { Step::Sub(name) });
            }
            4 => steps.push(Step::Scale(rng.gen_range(-2.0..2.0))),
            _ => {
                params.insert(&name, random_tensor(rng, &[width])).unwrap();
                steps.push(Step::Bias(name));
            }
        }
    }
    let head = if rng.gen_bool(0.6) {
        Head::Nll((0..rows).map(|_| rng.gen_range(0..width)).collect())
    } else {
        Head::Sum
    };
    Graph {
        params,
        input,
        steps,
        head,
        rows,
    }
}

impl Graph {
    /// Builds the graph on `tape` and returns the loss together with the
    /// smallest |x| fed to a ReLU (infinite when there is none).
    pub fn build(&self, tape: &mut Tape, params: &ParamSet) -> Result<(Var, f64)> {
        let vars = tape.params(params)?;
        let mut margin = f64::INFINITY;
        let mut h = match &self.input {
            Input::Dense(n) => vars[n],
            Input::Bags { table, bags } => tape.gather_mean(vars[table], bags.clone())?,
        };
        for step in &self.steps {
            h = match step {
                Step::MatMul(n) => tape.matmul(h, vars[n])?,
                Step::Relu => {
                    margin = tape.value(h).data().iter().fold(margin, |m, v| m.min(v.abs()));
                    tape.relu(h)
                }
                Step::Add(n) => tape.add(h, vars[n])?,
                Step::Sub(n) => tape.sub(h, vars[n])?,
                Step::Scale(f) => tape.scale(h, *f),
                Step::Bias(n) => {
                    let ones = tape.constant(Tensor::new(vec![self.rows, 1], vec![1.0; self.rows])?);
                    let b = tape.matmul(ones, vars[n])?;
                    tape.add(h, b)?
                }
            };
        }
        let loss = match &self.head {
            Head::Nll(labels) => {
                let lp = tape.log_softmax(h)?;
                tape.nll(lp, labels.clone())?
            }
            Head::Sum => {
                let cols = tape.value(h).shape()[1];
                let left = tape.constant(Tensor::new(vec![1, self.rows], vec![1.0; self.rows])?);
                let right = tape.constant(Tensor::new(vec![cols, 1], vec![1.0; cols])?);
                let s = tape.matmul(left, h)?;
                tape.matmul(s, right)?
            }
        };
        Ok((loss, margin))
    }

    pub fn loss(&self, params: &ParamSet) -> f64 {
        let mut tape = Tape::new();
        let (l, _) = self.build(&mut tape, params).unwrap();
        tape.value(l).data()[0]
    }

    pub fn gradients(&self) -> (Gradients, f64) {
        let mut tape = Tape::new();
        let (l, margin) = self.build(&mut tape, &self.params).unwrap();
        (tape.backward(l).unwrap(), margin)
    }
}

/// Largest relative error between reverse-mode and central differences.
/// Denominators are floored at 1e-3 so exact zeros do not divide by zero.
pub fn max_relative_error(graph: &Graph, h: f64) -> f64 {
    let (grads, _) = graph.gradients();
    let mut worst: f64 = 0.0;
    for (name, value) in graph.params.iter() {
        for i in 0..value.len() {
            let bump = |delta: f64| {
                let mut p = ParamSet::new();
                for (n, t) in graph.params.iter() {
                    let mut t = t.clone();
                    if n == name {
                        t.data_mut()[i] += delta;
                    }
                    p.insert(n, t).unwrap();
                }
                graph.loss(&p)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let analytic = grads.get(name).unwrap().data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

/// L(θ) = (θ − c)² with θ stored as a 1×1 parameter and c the batch.
pub struct Quadratic;

impl Objective for Quadratic {
    type Batch = f64;

    fn loss_and_grad(&self, params: &ParamSet, c: &f64) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let theta = tape.param("theta", params.get("theta").unwrap().clone())?;
        let target = tape.constant(Tensor::new(vec![1, 1], vec![*c])?);
        let d = tape.sub(theta, target)?;
        let loss = tape.matmul(d, d)?;
        let value = tape.value(loss).data()[0];
        Ok((value, tape.backward(loss)?))
    }
}

pub fn theta(value: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("theta", Tensor::new(vec![1, 1], vec![value]).unwrap()).unwrap();
    p
}

pub fn theta_of(p: &ParamSet) -> f64 {
    p.get("theta").unwrap().data()[0]
}
