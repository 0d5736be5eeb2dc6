//! Tape-based reverse-mode differentiation over row-batched matrices.
//!
//! Every value on the tape is a `B×D` matrix whose rows are independent
//! examples; a plain vector is the `B = 1` case. Operations are recorded in
//! execution order and the reverse pass walks the record backwards,
//! accumulating parameter gradients into the [`ParamStore`].

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use super::{masked_softmax_into, NumArray};
use crate::error::{Error, Result};

/// Floor applied before taking the log of a probability.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    /// x · wᵀ
    MatMulT(Var, Var),
    /// x + row-broadcast b
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Cols(Var, usize),
    Rows(Var, usize),
    Gather(Var, Vec<usize>),
    Select(Vec<bool>, Var, Var),
    Softmax(Var, f64),
    LogSoftmax(Var),
    AdditiveScores {
        keys: Vec<Var>,
        query: Var,
        ws: Var,
    },
    DotScores {
        keys: Vec<Var>,
        query: Var,
    },
    WeightedSum {
        weights: Var,
        values: Vec<Var>,
    },
    PickNeg {
        x: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    PickNegLog {
        p: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: NumArray,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_str(a: &NumArray) -> String {
    format!("{}x{}", a.nrows(), a.ncols())
}

fn add_into(slot: &mut Option<NumArray>, delta: NumArray) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
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

    pub fn value(&self, v: Var) -> &NumArray {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: NumArray, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.rg(v))
    }

    /// A constant; no gradient flows into it.
    pub fn input(&mut self, value: NumArray) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// `x · wᵀ` with `x: B×n`, `w: m×n`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ncols() != wv.ncols() {
            return Err(Error::config(format!(
                "matmul shape mismatch: input {} against weight {}",
                shape_str(xv),
                shape_str(wv)
            )));
        }
        let out = xv.dot(&wv.t());
        let rg = self.any_rg(&[x, w]);
        Ok(self.push(out, Op::MatMulT(x, w), rg))
    }

    /// `x + b` with `b: 1×m` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.nrows() != 1 || bv.ncols() != xv.ncols() {
            return Err(Error::config(format!(
                "bias shape mismatch: input {} against bias {}",
                shape_str(xv),
                shape_str(bv)
            )));
        }
        let out = xv + bv;
        let rg = self.any_rg(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// `W·x + b` for every row `x`.
    pub fn affine(&mut self, w: Var, b: Option<Var>, x: Var) -> Result<Var> {
        let y = self.matmul_t(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::config(format!(
                "{what} shape mismatch: {} vs {}",
                shape_str(av),
                shape_str(bv)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a) + self.value(b);
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "elementwise_mul")?;
        let out = self.value(a) * self.value(b);
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Column-wise concatenation, order preserved. Empty parts are allowed.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).nrows();
        let mut width = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.nrows() != rows {
                return Err(Error::config(format!(
                    "concat row mismatch: {} rows vs {}",
                    rows,
                    pv.nrows()
                )));
            }
            width += pv.ncols();
        }
        let mut out = Array2::zeros((rows, width));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            out.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        let rg = self.any_rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + width`.
    pub fn cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + width > xv.ncols() {
            return Err(Error::config(format!(
                "column slice {start}..{} out of range for {}",
                start + width,
                shape_str(xv)
            )));
        }
        let out = xv.slice(s![.., start..start + width]).to_owned();
        let rg = self.rg(x);
        Ok(self.push(out, Op::Cols(x, start), rg))
    }

    /// Rows `start..start + count`.
    pub fn rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + count > xv.nrows() {
            return Err(Error::config(format!(
                "row slice {start}..{} out of range for {}",
                start + count,
                shape_str(xv)
            )));
        }
        let out = xv.slice(s![start..start + count, ..]).to_owned();
        let rg = self.rg(x);
        Ok(self.push(out, Op::Rows(x, start), rg))
    }

    /// Embedding lookup: row `indices[b]` of `table` for every output row `b`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut out = Array2::zeros((indices.len(), tv.ncols()));
        for (b, &i) in indices.iter().enumerate() {
            if i >= tv.nrows() {
                return Err(Error::InvalidInput(format!(
                    "index {i} out of range for table with {} rows",
                    tv.nrows()
                )));
            }
            out.row_mut(b).assign(&tv.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(out, Op::Gather(table, indices.to_vec()), rg))
    }

    /// Row `b` of the output is row `b` of `a` when `mask[b]`, else of `b`.
    pub fn select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "select")?;
        if mask.len() != self.value(a).nrows() {
            return Err(Error::config("select mask length differs from row count"));
        }
        let mut out = self.value(b).clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).assign(&self.value(a).row(r));
            }
        }
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(out, Op::Select(mask.to_vec(), a, b), rg))
    }

    /// Row-wise `softmax(scale · x)` restricted to `mask`; masked entries are
    /// exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &Array2<bool>, scale: f64) -> Result<Var> {
        let xv = self.value(x);
        if mask.shape() != xv.shape() {
            return Err(Error::config(format!(
                "softmax mask {}x{} does not match scores {}",
                mask.nrows(),
                mask.ncols(),
                shape_str(xv)
            )));
        }
        let mut out = Array2::zeros(xv.raw_dim());
        let mut scaled = vec![0.0; xv.ncols()];
        for ((row, m), mut o) in xv.rows().into_iter().zip(mask.rows()).zip(out.rows_mut()) {
            for (s, &v) in scaled.iter_mut().zip(row.iter()) {
                *s = v * scale;
            }
            masked_softmax_into(&scaled, m.as_slice().unwrap(), o.as_slice_mut().unwrap())?;
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x, scale), rg))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    fn check_keys(&self, keys: &[Var], query: Var) -> Result<()> {
        if keys.is_empty() {
            return Err(Error::config("attention over zero positions"));
        }
        let q = self.value(query);
        for &k in keys {
            let kv = self.value(k);
            if kv.shape() != q.shape() {
                return Err(Error::config(format!(
                    "key {} does not match query {}",
                    shape_str(kv),
                    shape_str(q)
                )));
            }
        }
        Ok(())
    }

    /// `out[b,i] = Σ_h ws[h]·relu(keys[i][b,h] + query[b,h])`.
    ///
    /// With `keys[i] = eo_i·W_encᵀ` and `query = do·W_decᵀ` this is the MLP
    /// alignment score `W_s·relu(W_c·[eo_i; do])` for `W_c = [W_enc | W_dec]`.
    pub fn additive_scores(&mut self, keys: &[Var], query: Var, ws: Var) -> Result<Var> {
        self.check_keys(keys, query)?;
        let q = self.value(query);
        let w = self.value(ws);
        if w.nrows() != 1 || w.ncols() != q.ncols() {
            return Err(Error::config(format!(
                "score vector {} does not match hidden size {}",
                shape_str(w),
                q.ncols()
            )));
        }
        let w = w.row(0);
        let mut out = Array2::zeros((q.nrows(), keys.len()));
        for (i, &k) in keys.iter().enumerate() {
            let kv = self.value(k);
            for b in 0..q.nrows() {
                let mut acc = 0.0;
                for ((&kk, &qq), &ww) in kv.row(b).iter().zip(q.row(b).iter()).zip(w.iter()) {
                    let pre = kk + qq;
                    if pre > 0.0 {
                        acc += ww * pre;
                    }
                }
                out[[b, i]] = acc;
            }
        }
        let mut deps = keys.to_vec();
        deps.extend([query, ws]);
        let rg = self.any_rg(&deps);
        Ok(self.push(
            out,
            Op::AdditiveScores {
                keys: keys.to_vec(),
                query,
                ws,
            },
            rg,
        ))
    }

    /// `out[b,i] = ⟨keys[i][b,:], query[b,:]⟩`.
    pub fn dot_scores(&mut self, keys: &[Var], query: Var) -> Result<Var> {
        self.check_keys(keys, query)?;
        let q = self.value(query);
        let mut out = Array2::zeros((q.nrows(), keys.len()));
        for (i, &k) in keys.iter().enumerate() {
            let kv = self.value(k);
            for b in 0..q.nrows() {
                out[[b, i]] = kv.row(b).dot(&q.row(b));
            }
        }
        let mut deps = keys.to_vec();
        deps.push(query);
        let rg = self.any_rg(&deps);
        Ok(self.push(
            out,
            Op::DotScores {
                keys: keys.to_vec(),
                query,
            },
            rg,
        ))
    }

    /// `out[b,:] = Σ_i weights[b,i]·values[i][b,:]`.
    pub fn weighted_sum(&mut self, weights: Var, values: &[Var]) -> Result<Var> {
        let wv = self.value(weights);
        if values.is_empty() || wv.ncols() != values.len() {
            return Err(Error::config(format!(
                "weights {} do not match {} value rows",
                shape_str(wv),
                values.len()
            )));
        }
        let first = self.value(values[0]);
        let mut out = Array2::zeros(first.raw_dim());
        for (i, &v) in values.iter().enumerate() {
            let vv = self.value(v);
            if vv.nrows() != wv.nrows() || vv.shape() != first.shape() {
                return Err(Error::config(format!(
                    "value {} does not match weights {}",
                    shape_str(vv),
                    shape_str(wv)
                )));
            }
            for b in 0..wv.nrows() {
                let w = wv[[b, i]];
                if w != 0.0 {
                    out.row_mut(b).scaled_add(w, &vv.row(b));
                }
            }
        }
        let mut deps = values.to_vec();
        deps.push(weights);
        let rg = self.any_rg(&deps);
        Ok(self.push(
            out,
            Op::WeightedSum {
                weights,
                values: values.to_vec(),
            },
            rg,
        ))
    }

    fn check_pick(&self, x: Var, targets: &[usize], weights: &[f64]) -> Result<()> {
        let xv = self.value(x);
        if targets.len() != xv.nrows() || weights.len() != xv.nrows() {
            return Err(Error::config(format!(
                "{} targets / {} weights for {} rows",
                targets.len(),
                weights.len(),
                xv.nrows()
            )));
        }
        for (&t, &w) in targets.iter().zip(weights) {
            if w != 0.0 && t >= xv.ncols() {
                return Err(Error::InvalidInput(format!(
                    "target {t} out of range for {} classes",
                    xv.ncols()
                )));
            }
        }
        Ok(())
    }

    /// `Σ_b weights[b]·(−x[b, targets[b]])`, a `1×1` scalar. Rows with zero
    /// weight are ignored entirely.
    pub fn pick_neg(&mut self, x: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        self.check_pick(x, targets, weights)?;
        let xv = self.value(x);
        let total: f64 = targets
            .iter()
            .zip(weights)
            .enumerate()
            .filter(|(_, (_, &w))| w != 0.0)
            .map(|(b, (&t, &w))| -w * xv[[b, t]])
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            Array2::from_elem((1, 1), total),
            Op::PickNeg {
                x,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ_b weights[b]·(−ln max(p[b, targets[b]], 1e-12))`, a `1×1` scalar.
    pub fn pick_neg_log(&mut self, p: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        self.check_pick(p, targets, weights)?;
        let pv = self.value(p);
        let total: f64 = targets
            .iter()
            .zip(weights)
            .enumerate()
            .filter(|(_, (_, &w))| w != 0.0)
            .map(|(b, (&t, &w))| -w * pv[[b, t]].max(LOG_CLAMP).ln())
            .sum();
        let rg = self.rg(p);
        Ok(self.push(
            Array2::from_elem((1, 1), total),
            Op::PickNegLog {
                p,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise sum of same-shaped values.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            self.same_shape(parts[0], p, "sum")?;
            out += self.value(p);
        }
        let rg = self.any_rg(parts);
        Ok(self.push(out, Op::Sum(parts.to_vec()), rg))
    }

    /// Reverse pass from the `1×1` node `loss`, adding parameter gradients
    /// into `store`. Nodes are visited in exact reverse execution order.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::config("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<NumArray>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads, store);
        }
        Ok(())
    }

    fn propagate(
        &self,
        op: &Op,
        out: &NumArray,
        g: NumArray,
        grads: &mut [Option<NumArray>],
        store: &mut ParamStore,
    ) {
        match op {
            Op::Input => {}
            Op::Param(id) => store.get_mut(*id).grad += &g,
            Op::MatMulT(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.rg(*x) {
                    accumulate_mm(&mut grads[x.0], g.view(), wv.view(), xv.raw_dim());
                }
                if self.rg(*w) {
                    accumulate_mm(&mut grads[w.0], g.t(), xv.view(), wv.raw_dim());
                }
            }
            Op::AddRow(x, b) => {
                if self.rg(*b) {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_into(&mut grads[b.0], gb);
                }
                if self.rg(*x) {
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], -g);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], &g * self.value(*b));
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], &g * self.value(*a));
                }
            }
            Op::Scale(x, c) => add_into(&mut grads[x.0], g * *c),
            Op::Sigmoid(x) => {
                let mut d = g;
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
                add_into(&mut grads[x.0], d);
            }
            Op::Tanh(x) => {
                let mut d = g;
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= 1.0 - y * y);
                add_into(&mut grads[x.0], d);
            }
            Op::Relu(x) => {
                let mut d = g;
                Zip::from(&mut d).and(out).for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0
                    }
                });
                add_into(&mut grads[x.0], d);
            }
            Op::Concat(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.rg(p) {
                        add_into(&mut grads[p.0], g.slice(s![.., at..at + w]).to_owned());
                    }
                    at += w;
                }
            }
            Op::Cols(x, start) => {
                let slot = grads[x.0].get_or_insert_with(|| Array2::zeros(self.value(*x).raw_dim()));
                let mut view = slot.slice_mut(s![.., *start..*start + g.ncols()]);
                view += &g;
            }
            Op::Rows(x, start) => {
                let slot = grads[x.0].get_or_insert_with(|| Array2::zeros(self.value(*x).raw_dim()));
                let mut view = slot.slice_mut(s![*start..*start + g.nrows(), ..]);
                view += &g;
            }
            Op::Gather(table, indices) => {
                let slot =
                    grads[table.0].get_or_insert_with(|| Array2::zeros(self.value(*table).raw_dim()));
                for (b, &i) in indices.iter().enumerate() {
                    let mut row = slot.row_mut(i);
                    row += &g.row(b);
                }
            }
            Op::Select(mask, a, b) => {
                let mut ga = g.clone();
                let mut gb = g;
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        gb.row_mut(r).fill(0.0);
                    } else {
                        ga.row_mut(r).fill(0.0);
                    }
                }
                if self.rg(*a) {
                    add_into(&mut grads[a.0], ga);
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::Softmax(x, scale) => {
                // dx = scale · y ⊙ (g − ⟨g, y⟩); masked entries have y = 0.
                let mut d = g;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let inner = drow.dot(&yrow);
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &y| *d = scale * y * (*d - inner));
                }
                add_into(&mut grads[x.0], d);
            }
            Op::LogSoftmax(x) => {
                let mut d = g;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let total = drow.sum();
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &y| *d -= y.exp() * total);
                }
                add_into(&mut grads[x.0], d);
            }
            Op::AdditiveScores { keys, query, ws } => {
                let q = self.value(*query);
                let w = self.value(*ws).row(0).to_owned();
                let (rows, hidden) = (q.nrows(), q.ncols());
                let mut dq = Array2::<f64>::zeros((rows, hidden));
                let mut dws = Array2::<f64>::zeros((1, hidden));
                for (i, &k) in keys.iter().enumerate() {
                    let kv = self.value(k);
                    let mut dk = Array2::<f64>::zeros((rows, hidden));
                    for b in 0..rows {
                        let gi = g[[b, i]];
                        if gi == 0.0 {
                            continue;
                        }
                        for h in 0..hidden {
                            let pre = kv[[b, h]] + q[[b, h]];
                            if pre > 0.0 {
                                let gp = gi * w[h];
                                dk[[b, h]] = gp;
                                dq[[b, h]] += gp;
                                dws[[0, h]] += gi * pre;
                            }
                        }
                    }
                    if self.rg(k) {
                        add_into(&mut grads[k.0], dk);
                    }
                }
                if self.rg(*query) {
                    add_into(&mut grads[query.0], dq);
                }
                if self.rg(*ws) {
                    add_into(&mut grads[ws.0], dws);
                }
            }
            Op::DotScores { keys, query } => {
                let q = self.value(*query);
                let mut dq = Array2::<f64>::zeros(q.raw_dim());
                for (i, &k) in keys.iter().enumerate() {
                    let kv = self.value(k);
                    let mut dk = Array2::<f64>::zeros(kv.raw_dim());
                    for b in 0..q.nrows() {
                        let gi = g[[b, i]];
                        dk.row_mut(b).scaled_add(gi, &q.row(b));
                        dq.row_mut(b).scaled_add(gi, &kv.row(b));
                    }
                    if self.rg(k) {
                        add_into(&mut grads[k.0], dk);
                    }
                }
                if self.rg(*query) {
                    add_into(&mut grads[query.0], dq);
                }
            }
            Op::WeightedSum { weights, values } => {
                let wv = self.value(*weights);
                if self.rg(*weights) {
                    let mut dw = Array2::<f64>::zeros(wv.raw_dim());
                    for (i, &v) in values.iter().enumerate() {
                        let vv = self.value(v);
                        for b in 0..wv.nrows() {
                            dw[[b, i]] = g.row(b).dot(&vv.row(b));
                        }
                    }
                    add_into(&mut grads[weights.0], dw);
                }
                for (i, &v) in values.iter().enumerate() {
                    if !self.rg(v) {
                        continue;
                    }
                    let mut dv = g.clone();
                    for (b, mut row) in dv.rows_mut().into_iter().enumerate() {
                        row *= wv[[b, i]];
                    }
                    add_into(&mut grads[v.0], dv);
                }
            }
            Op::PickNeg {
                x,
                targets,
                weights,
            } => {
                let g0 = g[[0, 0]];
                let slot = grads[x.0].get_or_insert_with(|| Array2::zeros(self.value(*x).raw_dim()));
                for (b, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w != 0.0 {
                        slot[[b, t]] -= g0 * w;
                    }
                }
            }
            Op::PickNegLog {
                p,
                targets,
                weights,
            } => {
                let g0 = g[[0, 0]];
                let pv = self.value(*p);
                let slot = grads[p.0].get_or_insert_with(|| Array2::zeros(pv.raw_dim()));
                for (b, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let v = pv[[b, t]];
                    if w != 0.0 && v > LOG_CLAMP {
                        slot[[b, t]] -= g0 * w / v;
                    }
                }
            }
            Op::Sum(parts) => {
                for &p in parts {
                    if self.rg(p) {
                        add_into(&mut grads[p.0], g.clone());
                    }
                }
            }
        }
    }
}

/// `slot += a · b`, allocating the slot on first use.
fn accumulate_mm(
    slot: &mut Option<NumArray>,
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    dim: ndarray::Ix2,
) {
    match slot {
        Some(c) => general_mat_mul(1.0, &a, &b, 1.0, c),
        None => {
            let mut c = Array2::zeros(dim);
            general_mat_mul(1.0, &a, &b, 0.0, &mut c);
            *slot = Some(c);
        }
    }
}
