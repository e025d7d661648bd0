//! Dense 64-bit tensors with a recording tape for reverse-mode gradients.
//!
//! The op set is exactly what the two message-passing networks need. All ops
//! work on rank-2 views: a rank-1 tensor of length `n` is a `1 × n` row and a
//! scalar is `1 × 1`. The only broadcast is a row vector over a matrix.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
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

    /// `(rows, cols)` of the rank-2 view.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        !self.data.iter().fold(false, |bad, v| bad | !v.is_finite())
    }

    /// Rounds every value to the nearest 32-bit float (checkpoint precision).
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a parameter slot in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("parameter `{name}` registered twice")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Total scalar count of parameters whose names start with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.round_to_f32();
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    IndexSelect(usize, Arc<[u32]>),
    ScatterAdd(usize, Arc<[u32]>),
    Concat {
        a: usize,
        b: usize,
        axis: usize,
    },
    Bce {
        logits: usize,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::IndexSelect(..) => "index_select",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Concat { .. } => "concat",
            Op::Bce { .. } => "binary_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Records operations in creation order, which is a topological order.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Dense gradient list aligned with `store`; unreachable parameters get zeros.
    pub fn dense(mut self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.params
                    .remove(&id)
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
            })
            .collect()
    }
}

fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g (n×m) · bᵀ` where `b` is `k×m`.
fn matmul_nt(g: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut bt = vec![0.0; m * k];
    for p in 0..k {
        for j in 0..m {
            bt[j * k + p] = b[p * m + j];
        }
    }
    matmul_nn(g, &bt, n, m, k)
}

/// `aᵀ (k×n) · g (n×m)` where `a` is `n×k`.
fn matmul_tn(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sums `values` in an order that depends only on the multiset of values, so
/// results do not depend on how edges happen to be numbered.
/// Orders row indices by row content so a bucket sum does not depend on
/// the order its members arrive in.
fn sort_rows(rows: &mut [usize], data: &[f64], c: usize) {
    let key = |r: usize| &data[r * c..(r + 1) * c];
    let cmp = |x: usize, y: usize| {
        key(x)
            .iter()
            .zip(key(y))
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    if rows.len() <= 16 {
        for i in 1..rows.len() {
            let mut j = i;
            while j > 0 && cmp(rows[j - 1], rows[j]).is_gt() {
                rows.swap(j - 1, j);
                j -= 1;
            }
        }
    } else {
        rows.sort_unstable_by(|&x, &y| cmp(x, y));
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_owned(),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Constant)
    }

    /// Records the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((n, k), (k2, m)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("{n}x{k} times {k2}x{m}")));
        }
        let out = matmul_nn(self.data(a), self.data(b), n, k, m);
        self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a.0, b.0))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push(Tensor::matrix(r, c, out)?, Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push(Tensor::matrix(r, c, out)?, Op::Mul(a.0, b.0))
    }

    fn row_operand(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let ((r, c), (rr, rc)) = (self.dims(a), self.dims(row));
        if rr != 1 || rc != c {
            return Err(Error::shape(op, format!("{r}x{c} with row {rr}x{rc}")));
        }
        Ok((r, c))
    }

    /// Adds a `1 × c` row to every row of an `r × c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_operand("add_row", a, row)?;
        let rv = self.data(row);
        let out = self
            .data(a)
            .chunks(c.max(1))
            .flat_map(|ar| ar.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        self.push(Tensor::matrix(r, c, out)?, Op::AddRow(a.0, row.0))
    }

    /// Multiplies every row of an `r × c` matrix elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_operand("mul_row", a, row)?;
        let rv = self.data(row);
        let out = self
            .data(a)
            .chunks(c.max(1))
            .flat_map(|ar| ar.iter().zip(rv).map(|(x, y)| x * y))
            .collect();
        self.push(Tensor::matrix(r, c, out)?, Op::MulRow(a.0, row.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().map(|x| x * factor).collect();
        self.push(Tensor::matrix(r, c, out)?, Op::Scale(a.0, factor))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(Tensor::matrix(r, c, out)?, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(Tensor::matrix(r, c, out)?, Op::Sigmoid(a.0))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.row_operand("layer_norm", x, gamma)?;
        self.row_operand("layer_norm", x, beta)?;
        let (xv, gv, bv) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.0))
    }

    /// Gathers rows: `out[i] = a[index[i]]`.
    pub fn index_select(&mut self, a: Var, index: Arc<[u32]>) -> Result<Var> {
        let (r, c) = self.dims(a);
        let av = self.data(a);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            let i = i as usize;
            if i >= r {
                return Err(Error::Index {
                    what: "index_select rows",
                    index: i,
                    len: r,
                });
            }
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        self.push(Tensor::matrix(index.len(), c, out)?, Op::IndexSelect(a.0, index))
    }

    /// Accumulates rows into buckets: `out[index[i]] += a[i]`, with `out`
    /// having `num_buckets` rows. Per-bucket sums are order independent.
    pub fn scatter_add(&mut self, a: Var, index: Arc<[u32]>, num_buckets: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if index.len() != r {
            return Err(Error::shape(
                "scatter_add",
                format!("{} indices for {r} rows", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= num_buckets) {
            return Err(Error::Index {
                what: "scatter_add buckets",
                index: bad as usize,
                len: num_buckets,
            });
        }
        // group member rows per bucket (counting sort)
        let mut start = vec![0usize; num_buckets + 1];
        for &i in index.iter() {
            start[i as usize + 1] += 1;
        }
        for b in 0..num_buckets {
            start[b + 1] += start[b];
        }
        let mut fill = start.clone();
        let mut members = vec![0usize; r];
        for (row, &i) in index.iter().enumerate() {
            members[fill[i as usize]] = row;
            fill[i as usize] += 1;
        }
        let av = self.data(a);
        let mut out = vec![0.0; num_buckets * c];
        for b in 0..num_buckets {
            let group = &mut members[start[b]..start[b + 1]];
            let orow = &mut out[b * c..(b + 1) * c];
            if group.len() > 2 {
                sort_rows(group, av, c);
            }
            for &row in group.iter() {
                for (o, v) in orow.iter_mut().zip(&av[row * c..(row + 1) * c]) {
                    *o += v;
                }
            }
        }
        self.push(Tensor::matrix(num_buckets, c, out)?, Op::ScatterAdd(a.0, index))
    }

    /// Concatenates along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let ((ra, ca), (rb, cb)) = (self.dims(a), self.dims(b));
        let (av, bv) = (self.data(a), self.data(b));
        let value = match axis {
            0 => {
                if ca != cb {
                    return Err(Error::shape("concat", format!("{ra}x{ca} over {rb}x{cb}")));
                }
                let mut out = Vec::with_capacity(av.len() + bv.len());
                out.extend_from_slice(av);
                out.extend_from_slice(bv);
                Tensor::matrix(ra + rb, ca, out)?
            }
            1 => {
                if ra != rb {
                    return Err(Error::shape("concat", format!("{ra}x{ca} beside {rb}x{cb}")));
                }
                let mut out = Vec::with_capacity(av.len() + bv.len());
                for i in 0..ra {
                    out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
                    out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
                }
                Tensor::matrix(ra, ca + cb, out)?
            }
            _ => return Err(Error::shape("concat", format!("axis {axis} unsupported"))),
        };
        self.push(
            value,
            Op::Concat {
                a: a.0,
                b: b.0,
                axis,
            },
        )
    }

    /// `Σᵢ wᵢ · BCE(σ(logitᵢ), targetᵢ)` computed from logits in a stable form.
    pub fn binary_cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Var> {
        let n = self.data(logits).len();
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("{n} logits, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let loss = self
            .data(logits)
            .iter()
            .zip(targets.iter().zip(&weights))
            .map(|(&x, (&y, &w))| w * (y * softplus(-x) + (1.0 - y) * softplus(x)))
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits: logits.0,
                targets,
                weights,
            },
        )
    }

    /// Propagates d(loss)/d(node) back through the tape. The tape can be
    /// differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::contract("backward called twice on the same tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract("backward needs a scalar loss"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let mut acc = |target: usize, t: Tensor| match &mut grads[target] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            let val = |i: usize| &self.nodes[i].value;
            let gd = g.data();
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => match out.params.get_mut(pid) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        let mut t = g.clone();
                        t.shape = node.value.shape.clone();
                        out.params.insert(*pid, t);
                    }
                },
                Op::MatMul(a, b) => {
                    let ((n, k), (_, m)) = (val(*a).dims2(), val(*b).dims2());
                    let da = matmul_nt(gd, val(*b).data(), n, k, m);
                    let db = matmul_tn(val(*a).data(), gd, n, k, m);
                    acc(*a, Tensor::matrix(n, k, da)?);
                    acc(*b, Tensor::matrix(k, m, db)?);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, row) => {
                    let c = g.cols();
                    let mut dr = vec![0.0; c];
                    for chunk in gd.chunks(c.max(1)) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(*row, Tensor::matrix(1, c, dr)?);
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (r, c) = g.dims2();
                    let da = gd.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    let db = gd.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    acc(*a, Tensor::matrix(r, c, da)?);
                    acc(*b, Tensor::matrix(r, c, db)?);
                }
                Op::MulRow(a, row) => {
                    let (r, c) = g.dims2();
                    let (av, rv) = (val(*a).data(), val(*row).data());
                    let mut dr = vec![0.0; c];
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let gij = gd[i * c + j];
                            da[i * c + j] = gij * rv[j];
                            dr[j] += gij * av[i * c + j];
                        }
                    }
                    acc(*a, Tensor::matrix(r, c, da)?);
                    acc(*row, Tensor::matrix(1, c, dr)?);
                }
                Op::Scale(a, f) => {
                    let (r, c) = g.dims2();
                    acc(*a, Tensor::matrix(r, c, gd.iter().map(|x| x * f).collect())?);
                }
                Op::Relu(a) => {
                    let (r, c) = g.dims2();
                    let d = gd
                        .iter()
                        .zip(val(*a).data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    acc(*a, Tensor::matrix(r, c, d)?);
                }
                Op::Sigmoid(a) => {
                    let (r, c) = g.dims2();
                    let d = gd
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, s)| gv * s * (1.0 - s))
                        .collect();
                    acc(*a, Tensor::matrix(r, c, d)?);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (r, c) = g.dims2();
                    let gv = val(*gamma).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; r * c];
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..c {
                            let gij = gd[i * c + j];
                            let h = xhat[i * c + j];
                            dgamma[j] += gij * h;
                            dbeta[j] += gij;
                            dxhat[j] = gij * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * h;
                        }
                        let k = inv_std[i] / c as f64;
                        for j in 0..c {
                            dx[i * c + j] =
                                k * (c as f64 * dxhat[j] - s1 - xhat[i * c + j] * s2);
                        }
                    }
                    acc(*x, Tensor::matrix(r, c, dx)?);
                    acc(*gamma, Tensor::matrix(1, c, dgamma)?);
                    acc(*beta, Tensor::matrix(1, c, dbeta)?);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).dims2();
                    acc(*a, Tensor::filled(vec![r, c], gd[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).dims2();
                    acc(*a, Tensor::filled(vec![r, c], gd[0] / (r * c) as f64));
                }
                Op::IndexSelect(a, index) => {
                    let (r, c) = val(*a).dims2();
                    let mut da = vec![0.0; r * c];
                    for (k, &i) in index.iter().enumerate() {
                        let i = i as usize;
                        for j in 0..c {
                            da[i * c + j] += gd[k * c + j];
                        }
                    }
                    acc(*a, Tensor::matrix(r, c, da)?);
                }
                Op::ScatterAdd(a, index) => {
                    let c = g.cols();
                    let mut da = Vec::with_capacity(index.len() * c);
                    for &i in index.iter() {
                        let i = i as usize;
                        da.extend_from_slice(&gd[i * c..(i + 1) * c]);
                    }
                    acc(*a, Tensor::matrix(index.len(), c, da)?);
                }
                Op::Concat { a, b, axis } => {
                    let ((ra, ca), (rb, cb)) = (val(*a).dims2(), val(*b).dims2());
                    if *axis == 0 {
                        acc(*a, Tensor::matrix(ra, ca, gd[..ra * ca].to_vec())?);
                        acc(*b, Tensor::matrix(rb, cb, gd[ra * ca..].to_vec())?);
                    } else {
                        let w = ca + cb;
                        let mut da = Vec::with_capacity(ra * ca);
                        let mut db = Vec::with_capacity(rb * cb);
                        for i in 0..ra {
                            da.extend_from_slice(&gd[i * w..i * w + ca]);
                            db.extend_from_slice(&gd[i * w + ca..(i + 1) * w]);
                        }
                        acc(*a, Tensor::matrix(ra, ca, da)?);
                        acc(*b, Tensor::matrix(rb, cb, db)?);
                    }
                }
                Op::Bce {
                    logits,
                    targets,
                    weights,
                } => {
                    let lv = val(*logits);
                    let (r, c) = lv.dims2();
                    let d = lv
                        .data()
                        .iter()
                        .zip(targets.iter().zip(weights))
                        .map(|(&x, (&y, &w))| gd[0] * w * (sigmoid(x) - y))
                        .collect();
                    acc(*logits, Tensor::matrix(r, c, d)?);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
pub fn adamw_step(store: &mut ParamStore, grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if grads.len() != store.len()
        || state.first_moment.len() != store.len()
        || state.second_moment.len() != store.len()
    {
        return Err(Error::contract("optimizer state does not match parameters"));
    }
    let cfg = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let p = store.get_mut(ParamId(i));
        if p.shape() != g.shape() || state.first_moment[i].shape() != p.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *w -= cfg.learning_rate * cfg.weight_decay * *w;
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            let mhat = *mj / bc1;
            let vhat = *vj / bc2;
            *w -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in values {
            s.register(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn elementwise_multiply_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        let b = tape.constant(Tensor::row_vector(vec![1.0, 1.0])).unwrap();
        let c = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0]);
    }

    #[test]
    fn scatter_add_same_bucket() {
        let mut tape = Tape::new();
        let a = tape
            .constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let s = tape.scatter_add(a, Arc::from(vec![0u32, 0]), 2).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn scatter_add_is_order_independent() {
        let vals = [1e16, 1.0, -1e16, 3.0, 0.1];
        let mut rev = vals;
        rev.reverse();
        let run = |v: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::matrix(5, 1, v.to_vec()).unwrap()).unwrap();
            let s = tape.scatter_add(a, Arc::from(vec![0u32; 5]), 1).unwrap();
            tape.value(s).item()
        };
        assert_eq!(run(&vals).to_bits(), run(&rev).to_bits());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![1.0, 1.0])).unwrap();
        let g = tape.constant(Tensor::row_vector(vec![1.0, 1.0])).unwrap();
        let b = tape.constant(Tensor::row_vector(vec![0.0, 0.0])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
        assert!(matches!(tape.add_row(a, b), Err(Error::Shape { op: "add_row", .. })));
    }

    #[test]
    fn non_finite_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1e308)).unwrap();
        let err = tape.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn square_gradient() {
        let store = store_with(&[("w", Tensor::row_vector(vec![3.0]))]);
        let mut tape = Tape::new();
        let w = tape.param(&store, ParamId(0));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[6.0]);
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn disconnected_parameter_gets_zero() {
        let store = store_with(&[
            ("w", Tensor::row_vector(vec![3.0])),
            ("p", Tensor::row_vector(vec![1.0, 2.0])),
        ]);
        let mut tape = Tape::new();
        let w = tape.param(&store, ParamId(0));
        let loss = tape.sum(w).unwrap();
        let dense = tape.backward(loss).unwrap().dense(&store);
        assert_eq!(dense[1].data(), &[0.0, 0.0]);
        assert_eq!(dense[1].shape(), &[1, 2]);
    }

    #[test]
    fn bce_gradient_matches_sigmoid_minus_target() {
        let mut tape = Tape::new();
        let store = store_with(&[("x", Tensor::row_vector(vec![0.3, -1.2]))]);
        let x = tape.param(&store, ParamId(0));
        let l = tape
            .binary_cross_entropy(x, vec![1.0, 0.0], vec![1.0, 0.5])
            .unwrap();
        let g = tape.backward(l).unwrap();
        let d = g.get(ParamId(0)).unwrap().data();
        assert!((d[0] - (sigmoid(0.3) - 1.0)).abs() < 1e-15);
        assert!((d[1] - 0.5 * sigmoid(-1.2)).abs() < 1e-15);
    }

    #[test]
    fn adamw_single_step() {
        let mut store = store_with(&[("w", Tensor::row_vector(vec![1.0]))]);
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &store);
        adamw_step(&mut store, &[Tensor::row_vector(vec![1.0])], &mut st).unwrap();
        let w = store.get(ParamId(0)).item();
        assert!((w - 0.9).abs() < 1e-7, "{w}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_noop() {
        let mut store = store_with(&[("w", Tensor::row_vector(vec![1.0]))]);
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &store);
        adamw_step(&mut store, &[Tensor::row_vector(vec![0.0])], &mut st).unwrap();
        assert_eq!(store.get(ParamId(0)).item(), 1.0);
    }

    #[test]
    fn adamw_decoupled_decay() {
        let mut store = store_with(&[("w", Tensor::row_vector(vec![1.0]))]);
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &store);
        adamw_step(&mut store, &[Tensor::row_vector(vec![0.0])], &mut st).unwrap();
        assert!((store.get(ParamId(0)).item() - 0.99).abs() < 1e-15);
        adamw_step(&mut store, &[Tensor::row_vector(vec![0.0])], &mut st).unwrap();
        assert_eq!(st.step, 2);
    }
}
