//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in an append-only arena, so
//! node indices are already a topological order and the backward pass is a
//! single reverse sweep. Parameters enter the graph as leaves copied from a
//! [`ParamStore`]; [`Graph::backward_to`] accumulates their gradients back
//! into the store.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    MaskedFill { src: Var, mask: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, probs: Vec<T>, count: usize },
    GroupMeanPool { src: Var, groups: Vec<Vec<usize>> },
    CosineCost { a: Var, b: Var, a_norm: Vec<T>, b_norm: Vec<T>, eps: T },
    Gelu(Var),
    Sum(Var),
    RelScores { query: Var, rel: Var },
    RelWeightedSum { weights: Var, rel: Var },
    AddRowsIndexed { base: Var, rows: Var, map: Vec<Option<usize>> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Computation graph over scalars of type `T`.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<usize, Var>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("{what} expects a matrix, got shape {s:?}"))),
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x);
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds a non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Adds (or reuses) the leaf holding parameter `name` of `store`.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))?;
        if let Some(&v) = self.params.get(&idx) {
            return Ok(v);
        }
        let v = self.push(store.by_index(idx).1.value.clone(), Op::Leaf);
        self.params.insert(idx, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if it was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = dims2(self.value(a), "matmul")?;
        let (k2, c) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul {r}x{k} by {k2}x{c}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), r, k, c);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "transpose")?;
        let src = self.value(a);
        let out = Tensor::from_fn(c, r, |i, j| src.at(j, i));
        Ok(self.push(out, Op::Transpose(a)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).len() != cols {
            return Err(Error::shape(format!(
                "bias of {} values for {cols} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let src = self.value(a);
        let data = src
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % cols])
            .collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat needs parts and axis 0 or 1"));
        }
        let dims = parts
            .iter()
            .map(|&p| dims2(self.value(p), "concat"))
            .collect::<Result<Vec<_>>>()?;
        let out = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(Error::shape(format!("concat rows with column counts {dims:?}")));
            }
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![data.len() / c, c], data)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(Error::shape(format!("concat columns with row counts {dims:?}")));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * total);
            for row in 0..r {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(row));
                }
            }
            Tensor::new(vec![r, total], data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Takes rows (`axis` 0) or columns (`axis` 1) in `start..end`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(a), "slice")?;
        let limit = if axis == 0 { r } else { c };
        if axis > 1 || start >= end || end > limit {
            return Err(Error::shape(format!(
                "slice {start}..{end} on axis {axis} of {r}x{c}"
            )));
        }
        let src = self.value(a);
        let out = if axis == 0 {
            Tensor::from_fn(end - start, c, |i, j| src.at(start + i, j))
        } else {
            Tensor::from_fn(r, end - start, |i, j| src.at(i, start + j))
        };
        Ok(self.push(out, Op::Slice { src: a, axis, start }))
    }

    /// Row-wise softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let mut data = Vec::with_capacity(src.len());
        for r in 0..src.rows() {
            let row = src.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
            let z: T = exps.iter().copied().sum();
            data.extend(exps.into_iter().map(|e| e / z));
        }
        debug_assert_eq!(data.len() % cols, 0);
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut data = Vec::with_capacity(src.len());
        for r in 0..src.rows() {
            let row = src.row(r);
            data.extend(log_softmax_row(row));
        }
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let src = self.value(x);
        let cols = src.cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape("layer_norm gain/bias width mismatch"));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = T::lit(cols as f64);
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(src.rows());
        let mut data = Vec::with_capacity(src.len());
        for r in 0..src.rows() {
            let row = src.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (c, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rs;
                xhat.push(xh);
                data.push(xh * g[c] + b[c]);
            }
        }
        let out = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.value(table), "embedding")?;
        if ids.is_empty() {
            return Err(Error::shape("embedding lookup of zero ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("id {bad} outside table of {v} rows")));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: T) -> Result<Var> {
        let src = self.value(a);
        if mask.len() != src.len() {
            return Err(Error::shape("masked_fill mask length mismatch"));
        }
        let data = src
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::MaskedFill {
                src: a,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping rows whose target is `ignore`. Zero when every row
    /// is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let src = self.value(logits);
        let (rows, vocab) = (src.rows(), src.cols());
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t >= vocab) {
            return Err(Error::Index(format!("target {bad} outside vocabulary {vocab}")));
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            let ls = log_softmax_row(src.row(r));
            total = total - ls[t];
            for (c, l) in ls.into_iter().enumerate() {
                probs[r * vocab + c] = l.exp();
            }
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::lit(count as f64)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
        ))
    }

    /// Mean of the selected rows as a `1 x d` matrix.
    pub fn index_mean_pool(&mut self, h: Var, positions: &[usize]) -> Result<Var> {
        if positions.is_empty() {
            return Err(Error::EmptyPool);
        }
        self.group_mean_pool(h, &[positions.to_vec()])
    }

    /// One output row per group holding the mean of that group's rows.
    /// An empty group yields an all-zero row.
    pub fn group_mean_pool(&mut self, h: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (r, d) = dims2(self.value(h), "group_mean_pool")?;
        if groups.is_empty() {
            return Err(Error::shape("group_mean_pool needs at least one group"));
        }
        if let Some(&bad) = groups.iter().flatten().find(|&&p| p >= r) {
            return Err(Error::Index(format!("pool position {bad} outside {r} rows")));
        }
        let src = self.value(h);
        let mut data = vec![T::zero(); groups.len() * d];
        for (gi, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let out = &mut data[gi * d..(gi + 1) * d];
            for &p in group {
                for (o, &x) in out.iter_mut().zip(src.row(p)) {
                    *o = *o + x;
                }
            }
            let inv = T::one() / T::lit(group.len() as f64);
            out.iter_mut().for_each(|o| *o = *o * inv);
        }
        let out = Tensor::new(vec![groups.len(), d], data)?;
        Ok(self.push(
            out,
            Op::GroupMeanPool {
                src: h,
                groups: groups.to_vec(),
            },
        ))
    }

    /// `C[i][j] = 1 - <a_i, b_j> / (|a_i| |b_j| + 1e-12)`.
    pub fn cosine_cost(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, d) = dims2(self.value(a), "cosine_cost")?;
        let (q, d2) = dims2(self.value(b), "cosine_cost")?;
        if d != d2 {
            return Err(Error::shape(format!("cosine_cost widths {d} vs {d2}")));
        }
        let eps = T::lit(1e-12);
        let va = self.value(a);
        let vb = self.value(b);
        let norm = |row: &[T]| row.iter().map(|&x| x * x).sum::<T>().sqrt();
        let a_norm: Vec<T> = (0..p).map(|i| norm(va.row(i))).collect();
        let b_norm: Vec<T> = (0..q).map(|j| norm(vb.row(j))).collect();
        let out = Tensor::from_fn(p, q, |i, j| {
            let dot: T = va.row(i).iter().zip(vb.row(j)).map(|(&x, &y)| x * y).sum();
            T::one() - dot / (a_norm[i] * b_norm[j] + eps)
        });
        Ok(self.push(
            out,
            Op::CosineCost {
                a,
                b,
                a_norm,
                b_norm,
                eps,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu_parts(x).0);
        self.push(out, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Relation-aware scores: `out[i][j] = <query_i, rel_{i*w + j}>` where
    /// `rel` holds `w` rows per query row.
    pub fn rel_scores(&mut self, query: Var, rel: Var) -> Result<Var> {
        let (n, k) = dims2(self.value(query), "rel_scores")?;
        let (rr, k2) = dims2(self.value(rel), "rel_scores")?;
        if k != k2 || n == 0 || rr % n != 0 {
            return Err(Error::shape(format!("rel_scores {n}x{k} with {rr}x{k2}")));
        }
        let w = rr / n;
        let vq = self.value(query);
        let vr = self.value(rel);
        let out = Tensor::from_fn(n, w, |i, j| {
            vq.row(i).iter().zip(vr.row(i * w + j)).map(|(&x, &y)| x * y).sum()
        });
        Ok(self.push(out, Op::RelScores { query, rel }))
    }

    /// `out[i] = sum_j weights[i][j] * rel_{i*w + j}`.
    pub fn rel_weighted_sum(&mut self, weights: Var, rel: Var) -> Result<Var> {
        let (n, w) = dims2(self.value(weights), "rel_weighted_sum")?;
        let (rr, k) = dims2(self.value(rel), "rel_weighted_sum")?;
        if rr != n * w {
            return Err(Error::shape(format!("rel_weighted_sum {n}x{w} with {rr}x{k}")));
        }
        let vw = self.value(weights);
        let vr = self.value(rel);
        let mut data = vec![T::zero(); n * k];
        for i in 0..n {
            for j in 0..w {
                let a = vw.at(i, j);
                for (o, &x) in data[i * k..(i + 1) * k].iter_mut().zip(vr.row(i * w + j)) {
                    *o = *o + a * x;
                }
            }
        }
        let out = Tensor::new(vec![n, k], data)?;
        Ok(self.push(out, Op::RelWeightedSum { weights, rel }))
    }

    /// Adds `rows[map[i]]` to row `i` of `base`; rows with `None` are copied
    /// through untouched.
    pub fn add_rows_indexed(&mut self, base: Var, rows: Var, map: &[Option<usize>]) -> Result<Var> {
        let (r, d) = dims2(self.value(base), "add_rows_indexed")?;
        let (e, d2) = dims2(self.value(rows), "add_rows_indexed")?;
        if d != d2 || map.len() != r {
            return Err(Error::shape("add_rows_indexed shape mismatch"));
        }
        if let Some(bad) = map.iter().flatten().find(|&&m| m >= e) {
            return Err(Error::Index(format!("row index {bad} outside {e} rows")));
        }
        let vb = self.value(base);
        let vr = self.value(rows);
        let mut data = vb.data().to_vec();
        for (i, m) in map.iter().enumerate() {
            if let Some(m) = *m {
                for (o, &x) in data[i * d..(i + 1) * d].iter_mut().zip(vr.row(m)) {
                    *o = *o + x;
                }
            }
        }
        let out = Tensor::new(vec![r, d], data)?;
        Ok(self.push(
            out,
            Op::AddRowsIndexed {
                base,
                rows,
                map: map.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. A graph can be differentiated
    /// only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this graph; build a new graph and zero gradients".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(out_grad) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &out_grad);
            self.grads[i] = Some(out_grad);
        }
        Ok(())
    }

    /// [`Graph::backward`], then adds parameter gradients into `store`.
    /// Every parameter of `store` ends up with a gradient (zero if unused).
    pub fn backward_to(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?;
        for (_, p) in store.iter_mut() {
            if p.grad.is_none() {
                p.grad = Some(vec![T::zero(); p.value.len()]);
            }
        }
        for (&idx, &v) in &self.params {
            if let Some(g) = self.grads[v.0].as_ref() {
                let (_, p) = store.by_index_mut(idx);
                let acc = p.grad.as_mut().expect("initialized above");
                if acc.len() != g.len() {
                    return Err(Error::Usage(
                        "parameter changed shape since graph construction".into(),
                    ));
                }
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a = *a + x;
                }
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> &mut [T] {
        let len = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn backward_node(&mut self, i: usize, dy: &[T]) {
        // Ops are cloned out so parents' gradient buffers can be borrowed
        // mutably; the cached vectors are small at the scales this engine
        // targets.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = dims2(self.value(a), "").expect("checked in forward");
                let c = self.value(b).cols();
                let va = self.value(a).data().to_vec();
                let vb = self.value(b).data().to_vec();
                // dA = dY B^T
                let ga = self.acc(a);
                for ri in 0..r {
                    for ki in 0..k {
                        let mut s = T::zero();
                        for ci in 0..c {
                            s = s + dy[ri * c + ci] * vb[ki * c + ci];
                        }
                        ga[ri * k + ki] = ga[ri * k + ki] + s;
                    }
                }
                // dB = A^T dY
                let gb = self.acc(b);
                for ri in 0..r {
                    for ki in 0..k {
                        let x = va[ri * k + ki];
                        for ci in 0..c {
                            gb[ki * c + ci] = gb[ki * c + ci] + x * dy[ri * c + ci];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims2(self.value(a), "").expect("checked in forward");
                let ga = self.acc(a);
                for ri in 0..r {
                    for ci in 0..c {
                        ga[ri * c + ci] = ga[ri * c + ci] + dy[ci * r + ri];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.acc(a), dy);
                add_into(self.acc(b), dy);
            }
            Op::Sub(a, b) => {
                add_into(self.acc(a), dy);
                let gb = self.acc(b);
                for (g, &d) in gb.iter_mut().zip(dy) {
                    *g = *g - d;
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(a).data().to_vec();
                let vb = self.value(b).data().to_vec();
                let ga = self.acc(a);
                for ((g, &d), &y) in ga.iter_mut().zip(dy).zip(&vb) {
                    *g = *g + d * y;
                }
                let gb = self.acc(b);
                for ((g, &d), &x) in gb.iter_mut().zip(dy).zip(&va) {
                    *g = *g + d * x;
                }
            }
            Op::Scale(a, c) => {
                let ga = self.acc(a);
                for (g, &d) in ga.iter_mut().zip(dy) {
                    *g = *g + d * c;
                }
            }
            Op::AddBias(a, bias) => {
                add_into(self.acc(a), dy);
                let gb = self.acc(bias);
                let cols = gb.len();
                for (idx, &d) in dy.iter().enumerate() {
                    gb[idx % cols] = gb[idx % cols] + d;
                }
            }
            Op::Concat { parts, axis } => {
                let out_cols = self.nodes[i].value.cols();
                let mut offset = 0;
                for p in parts {
                    let (r, c) = dims2(self.value(p), "").expect("checked in forward");
                    let g = self.acc(p);
                    if axis == 0 {
                        add_into(g, &dy[offset * out_cols..(offset + r) * out_cols]);
                        offset += r;
                    } else {
                        for ri in 0..r {
                            for ci in 0..c {
                                g[ri * c + ci] = g[ri * c + ci] + dy[ri * out_cols + offset + ci];
                            }
                        }
                        offset += c;
                    }
                }
            }
            Op::Slice { src, axis, start } => {
                let (or, oc) = dims2(&self.nodes[i].value, "").expect("matrix");
                let c = self.value(src).cols();
                let g = self.acc(src);
                for ri in 0..or {
                    for ci in 0..oc {
                        let idx = if axis == 0 {
                            (start + ri) * c + ci
                        } else {
                            ri * c + start + ci
                        };
                        g[idx] = g[idx] + dy[ri * oc + ci];
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.clone();
                let cols = y.cols();
                let ga = self.acc(a);
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dr = &dy[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for c in 0..cols {
                        ga[r * cols + c] = ga[r * cols + c] + yr[c] * (dr[c] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = self.nodes[i].value.clone();
                let cols = y.cols();
                let ga = self.acc(a);
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dr = &dy[r * cols..(r + 1) * cols];
                    let total: T = dr.iter().copied().sum();
                    for c in 0..cols {
                        ga[r * cols + c] = ga[r * cols + c] + dr[c] - yr[c].exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = self.value(x).cols();
                let g = self.value(gain).data().to_vec();
                let rows = rstd.len();
                {
                    let gg = self.acc(gain);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] = gg[c] + dy[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                {
                    let gb = self.acc(bias);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] = gb[c] + dy[r * cols + c];
                        }
                    }
                }
                let n = T::lit(cols as f64);
                let gx = self.acc(x);
                for r in 0..rows {
                    let dxhat: Vec<T> = (0..cols).map(|c| dy[r * cols + c] * g[c]).collect();
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    let mean_d = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dx = dxhat.iter().zip(xh).map(|(&d, &h)| d * h).sum::<T>() / n;
                    for c in 0..cols {
                        gx[r * cols + c] =
                            gx[r * cols + c] + rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(table).cols();
                let g = self.acc(table);
                for (row, &id) in ids.iter().enumerate() {
                    add_into(&mut g[id * d..(id + 1) * d], &dy[row * d..(row + 1) * d]);
                }
            }
            Op::MaskedFill { src, mask } => {
                let g = self.acc(src);
                for ((g, &d), &m) in g.iter_mut().zip(dy).zip(&mask) {
                    if !m {
                        *g = *g + d;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if count == 0 {
                    return;
                }
                let vocab = self.value(logits).cols();
                let scale = dy[0] / T::lit(count as f64);
                let g = self.acc(logits);
                for (r, &t) in targets.iter().enumerate() {
                    if t == ignore {
                        continue;
                    }
                    for c in 0..vocab {
                        let onehot = if c == t { T::one() } else { T::zero() };
                        g[r * vocab + c] = g[r * vocab + c] + scale * (probs[r * vocab + c] - onehot);
                    }
                }
            }
            Op::GroupMeanPool { src, groups } => {
                let d = self.value(src).cols();
                let g = self.acc(src);
                for (gi, group) in groups.iter().enumerate() {
                    if group.is_empty() {
                        continue;
                    }
                    let inv = T::one() / T::lit(group.len() as f64);
                    for &p in group {
                        for c in 0..d {
                            g[p * d + c] = g[p * d + c] + dy[gi * d + c] * inv;
                        }
                    }
                }
            }
            Op::CosineCost {
                a,
                b,
                a_norm,
                b_norm,
                eps,
            } => {
                let va = self.value(a).clone();
                let vb = self.value(b).clone();
                let (p, q, d) = (va.rows(), vb.rows(), va.cols());
                let mut ga = vec![T::zero(); p * d];
                let mut gb = vec![T::zero(); q * d];
                for i in 0..p {
                    for j in 0..q {
                        let up = dy[i * q + j];
                        if up == T::zero() {
                            continue;
                        }
                        let (ai, bj) = (va.row(i), vb.row(j));
                        let dot: T = ai.iter().zip(bj).map(|(&x, &y)| x * y).sum();
                        let den = a_norm[i] * b_norm[j] + eps;
                        let den2 = den * den;
                        // C = 1 - dot / den, den = |a||b| + eps
                        for c in 0..d {
                            let mut da = bj[c] / den;
                            if a_norm[i] > T::zero() {
                                da = da - dot * b_norm[j] * ai[c] / (a_norm[i] * den2);
                            }
                            ga[i * d + c] = ga[i * d + c] - up * da;
                            let mut db = ai[c] / den;
                            if b_norm[j] > T::zero() {
                                db = db - dot * a_norm[i] * bj[c] / (b_norm[j] * den2);
                            }
                            gb[j * d + c] = gb[j * d + c] - up * db;
                        }
                    }
                }
                add_into(self.acc(a), &ga);
                add_into(self.acc(b), &gb);
            }
            Op::Gelu(a) => {
                let x = self.value(a).data().to_vec();
                let g = self.acc(a);
                for ((g, &d), &x) in g.iter_mut().zip(dy).zip(&x) {
                    *g = *g + d * gelu_parts(x).1;
                }
            }
            Op::Sum(a) => {
                let g = self.acc(a);
                g.iter_mut().for_each(|x| *x = *x + dy[0]);
            }
            Op::RelScores { query, rel } => {
                let vq = self.value(query).clone();
                let vr = self.value(rel).clone();
                let (n, k) = (vq.rows(), vq.cols());
                let w = vr.rows() / n;
                {
                    let gq = self.acc(query);
                    for i in 0..n {
                        for j in 0..w {
                            let d = dy[i * w + j];
                            for (c, &x) in vr.row(i * w + j).iter().enumerate() {
                                gq[i * k + c] = gq[i * k + c] + d * x;
                            }
                        }
                    }
                }
                let gr = self.acc(rel);
                for i in 0..n {
                    for j in 0..w {
                        let d = dy[i * w + j];
                        let base = (i * w + j) * k;
                        for (c, &x) in vq.row(i).iter().enumerate() {
                            gr[base + c] = gr[base + c] + d * x;
                        }
                    }
                }
            }
            Op::RelWeightedSum { weights, rel } => {
                let vw = self.value(weights).clone();
                let vr = self.value(rel).clone();
                let (n, w) = (vw.rows(), vw.cols());
                let k = vr.cols();
                {
                    let gw = self.acc(weights);
                    for i in 0..n {
                        for j in 0..w {
                            let s: T = vr
                                .row(i * w + j)
                                .iter()
                                .zip(&dy[i * k..(i + 1) * k])
                                .map(|(&x, &d)| x * d)
                                .sum();
                            gw[i * w + j] = gw[i * w + j] + s;
                        }
                    }
                }
                let gr = self.acc(rel);
                for i in 0..n {
                    for j in 0..w {
                        let a = vw.at(i, j);
                        let base = (i * w + j) * k;
                        for c in 0..k {
                            gr[base + c] = gr[base + c] + a * dy[i * k + c];
                        }
                    }
                }
            }
            Op::AddRowsIndexed { base, rows, map } => {
                add_into(self.acc(base), dy);
                let d = self.value(rows).cols();
                let g = self.acc(rows);
                for (i, m) in map.iter().enumerate() {
                    if let Some(m) = *m {
                        add_into(&mut g[m * d..(m + 1) * d], &dy[i * d..(i + 1) * d]);
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a = *a + s;
    }
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - m).exp()).sum::<T>().ln() + m;
    row.iter().map(|&x| x - lse).collect()
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], r: usize, k: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for ri in 0..r {
        let orow = &mut out[ri * c..(ri + 1) * c];
        for ki in 0..k {
            let x = a[ri * k + ki];
            for (o, &y) in orow.iter_mut().zip(&b[ki * c..(ki + 1) * c]) {
                *o = *o + x * y;
            }
        }
    }
    out
}
