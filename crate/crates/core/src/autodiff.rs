//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive ops in topological order as they are
//! evaluated. [`Tape::backward`] walks the record once in reverse and returns
//! the gradient of a scalar loss with respect to every registered parameter.
//! Parameters live in a [`ParamSet`], which is never mutated by training code:
//! [`ParamSet::sgd_step`] returns a fresh set.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense row-major tensor. A scalar has an empty shape and one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` view; 1-D tensors are treated as a single row.
    fn as_matrix(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            [c] => Some((1, *c)),
            _ => None,
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn add_assign_scaled(&mut self, other: &Tensor, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    GatherMean { table: Var, bags: Vec<Vec<usize>> },
    Relu(Var),
    LogSoftmax(Var),
    Nll { log_probs: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only op record. Inputs always precede the node that consumes them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Registers a differentiable leaf. Names must be unique per tape.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        let taken = self
            .nodes
            .iter()
            .any(|n| matches!(&n.op, Op::Param(existing) if existing == name));
        if taken {
            return Err(Error::contract(format!("parameter {name:?} registered twice")));
        }
        Ok(self.push(value, Op::Param(name.to_owned())))
    }

    /// Registers every tensor of `params` and returns the handles by name.
    pub fn params(&mut self, params: &ParamSet) -> Result<BTreeMap<String, Var>> {
        params
            .iter()
            .map(|(name, t)| Ok((name.to_owned(), self.param(name, t.clone())?)))
            .collect()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign_scaled(self.value(b), -1.0);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Matrix product of an `r×k` and a `k×c` tensor. 1-D inputs count as one row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let dims = ta.as_matrix().zip(tb.as_matrix());
        let ((r, k), (k2, c)) = match dims {
            Some(d) if d.0 .1 == d.1 .0 => d,
            _ => {
                return Err(Error::Dimension {
                    op: "matmul",
                    detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
                })
            }
        };
        debug_assert_eq!(k, k2);
        let out = matmul_raw(ta.data(), tb.data(), r, k, c);
        let value = Tensor {
            shape: vec![r, c],
            data: out,
        };
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Embedding bag: row `b` of the output is the mean of `table` rows listed in `bags[b]`.
    pub fn gather_mean(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Dimension {
                    op: "gather_mean",
                    detail: format!("table must be 2-D, got {s:?}"),
                })
            }
        };
        let mut out = vec![0.0; bags.len() * cols];
        for (b, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::contract(format!("gather_mean: bag {b} is empty")));
            }
            let dst = &mut out[b * cols..(b + 1) * cols];
            for &idx in bag {
                if idx >= rows {
                    return Err(Error::Index {
                        op: "gather_mean",
                        index: idx,
                        limit: rows,
                    });
                }
                for (o, v) in dst.iter_mut().zip(&t.data[idx * cols..(idx + 1) * cols]) {
                    *o += v;
                }
            }
            let inv = 1.0 / bag.len() as f64;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor {
            shape: vec![bags.len(), cols],
            data: out,
        };
        Ok(self.push(value, Op::GatherMean { table, bags }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Row-wise log-softmax, shifted by the row max for stability.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.as_matrix().ok_or_else(|| Error::Dimension {
            op: "log_softmax",
            detail: format!("expected 1-D or 2-D, got {:?}", t.shape()),
        })?;
        let mut out = t.clone();
        for row in 0..r {
            let xs = &mut out.data[row * c..(row + 1) * c];
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            xs.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.push(out, Op::LogSoftmax(a)))
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
    pub fn nll(&mut self, log_probs: Var, labels: Vec<usize>) -> Result<Var> {
        let t = self.value(log_probs);
        let (r, c) = t.as_matrix().ok_or_else(|| Error::Dimension {
            op: "nll",
            detail: format!("expected 2-D, got {:?}", t.shape()),
        })?;
        if labels.len() != r || r == 0 {
            return Err(Error::Dimension {
                op: "nll",
                detail: format!("{} labels for {} rows", labels.len(), r),
            });
        }
        let mut total = 0.0;
        for (row, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index {
                    op: "nll",
                    index: y,
                    limit: c,
                });
            }
            total -= t.data[row * c + y];
        }
        let value = Tensor::scalar(total / r as f64);
        Ok(self.push(value, Op::Nll { log_probs, labels }))
    }

    /// Reverse pass from a scalar `loss`. Every registered parameter gets an
    /// entry; parameters off the loss path receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut seed = self.value(loss).clone();
        seed.data[0] = 1.0;
        grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(_) => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, 1.0, self);
                    accumulate(&mut grads, *b, &g, 1.0, self);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g, 1.0, self);
                    accumulate(&mut grads, *b, &g, -1.0, self);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, &g, *f, self),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (r, k) = ta.as_matrix().expect("checked in forward");
                    let c = tb.as_matrix().expect("checked in forward").1;
                    // dA = G Bᵀ, dB = Aᵀ G
                    let mut da = vec![0.0; r * k];
                    for i in 0..r {
                        for j in 0..c {
                            let gij = g.data[i * c + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * tb.data[p * c + j];
                            }
                        }
                    }
                    let mut db = vec![0.0; k * c];
                    for i in 0..r {
                        for p in 0..k {
                            let aip = ta.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..c {
                                db[p * c + j] += aip * g.data[i * c + j];
                            }
                        }
                    }
                    let da = Tensor {
                        shape: ta.shape.clone(),
                        data: da,
                    };
                    let db = Tensor {
                        shape: tb.shape.clone(),
                        data: db,
                    };
                    accumulate(&mut grads, *a, &da, 1.0, self);
                    accumulate(&mut grads, *b, &db, 1.0, self);
                }
                Op::GatherMean { table, bags } => {
                    let t = self.value(*table);
                    let cols = t.shape[1];
                    let slot = grads[table.0].get_or_insert_with(|| Tensor::zeros(&t.shape));
                    for (b, bag) in bags.iter().enumerate() {
                        let inv = 1.0 / bag.len() as f64;
                        let gb = &g.data[b * cols..(b + 1) * cols];
                        for &idx in bag {
                            let dst = &mut slot.data[idx * cols..(idx + 1) * cols];
                            for (d, v) in dst.iter_mut().zip(gb) {
                                *d += v * inv;
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut d = g.clone();
                    for (dv, xv) in d.data.iter_mut().zip(&x.data) {
                        if *xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, &d, 1.0, self);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let (r, c) = y.as_matrix().expect("checked in forward");
                    let mut d = g.clone();
                    for row in 0..r {
                        let gs = &g.data[row * c..(row + 1) * c];
                        let total: f64 = gs.iter().sum();
                        for j in 0..c {
                            d.data[row * c + j] = gs[j] - y.data[row * c + j].exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, &d, 1.0, self);
                }
                Op::Nll { log_probs, labels } => {
                    let t = self.value(*log_probs);
                    let c = t.as_matrix().expect("checked in forward").1;
                    let mut d = Tensor::zeros(&t.shape);
                    let w = -g.data[0] / labels.len() as f64;
                    for (row, &y) in labels.iter().enumerate() {
                        d.data[row * c + y] = w;
                    }
                    accumulate(&mut grads, *log_probs, &d, 1.0, self);
                }
            }
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(&node.value.shape));
                out.insert(name.clone(), g);
            }
        }
        Ok(Gradients(out))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: &Tensor, scale: f64, tape: &Tape) {
    if matches!(tape.nodes[var.0].op, Op::Constant) {
        return;
    }
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign_scaled(g, scale),
        slot @ None => {
            let mut t = g.clone();
            if scale != 1.0 {
                t.data.iter_mut().for_each(|v| *v *= scale);
            }
            *slot = Some(t);
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * c..(p + 1) * c]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Gradient map keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn zeros_like(params: &ParamSet) -> Self {
        Self(
            params
                .iter()
                .map(|(k, t)| (k.to_owned(), Tensor::zeros(t.shape())))
                .collect(),
        )
    }

    pub fn insert(&mut self, name: &str, grad: Tensor) {
        self.0.insert(name.to_owned(), grad);
    }

    /// `self += other`, key by key. Keys must match.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::contract("gradient maps have different key sets"));
        }
        for (name, g) in &mut self.0 {
            let o = other
                .0
                .get(name)
                .ok_or_else(|| Error::contract(format!("missing gradient for {name:?}")))?;
            if o.shape != g.shape {
                return Err(Error::Dimension {
                    op: "accumulate",
                    detail: format!("{name}: {:?} vs {:?}", g.shape, o.shape),
                });
            }
            g.add_assign(o);
        }
        Ok(())
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for g in self.0.values_mut() {
            g.data.iter_mut().for_each(|v| *v *= factor);
        }
        self
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"XLMHPSET";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.tensors.insert(name.to_owned(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Functional gradient step `θ − lr·g`. The receiver is left untouched.
    pub fn sgd_step(&self, grads: &Gradients, lr: f64) -> Result<ParamSet> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::contract(format!("learning rate must be > 0, got {lr}")));
        }
        let mut next = self.clone();
        for (name, t) in &mut next.tensors {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("no gradient for parameter {name:?}")))?;
            if g.shape != t.shape {
                return Err(Error::Dimension {
                    op: "sgd_step",
                    detail: format!("{name}: param {:?} vs grad {:?}", t.shape, g.shape),
                });
            }
            t.add_assign_scaled(g, -lr);
        }
        Ok(next)
    }

    /// Binary checkpoint: magic, version, count, then per parameter its name,
    /// shape, and little-endian `f64` values. Round trips are bit-exact.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for d in &t.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn bad(msg: &str) -> Error {
            Error::Checkpoint(msg.to_owned())
        }
        let mut io = |buf: &mut [u8]| r.read_exact(buf).map_err(|_| bad("truncated checkpoint"));
        let mut magic = [0u8; 8];
        io(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a parameter checkpoint"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        io(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        io(&mut b8)?;
        let count = u64::from_le_bytes(b8);
        let mut set = ParamSet::new();
        for _ in 0..count {
            io(&mut b4)?;
            let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
            io(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            io(&mut b4)?;
            let ndim = u32::from_le_bytes(b4) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                io(&mut b8)?;
                shape.push(u64::from_le_bytes(b8) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                io(&mut b8)?;
                data.push(f64::from_le_bytes(b8));
            }
            set.insert(&name, Tensor { shape, data })
                .map_err(|_| bad("duplicate parameter in checkpoint"))?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
