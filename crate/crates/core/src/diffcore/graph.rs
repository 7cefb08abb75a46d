//! Define-by-run reverse-mode differentiation over 2-d matrices.
//!
//! Every value in a [`Graph`] is a `rows x cols` matrix. Ops append a node to
//! the tape; [`Graph::backward`] walks the tape in reverse and accumulates
//! vector-Jacobian products. Values are never mutated once recorded.

use std::collections::HashMap;

use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    MaskedSoftmax(Var),
    Sum(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Gradients of a scalar output with respect to every parameter leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.by_param.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Dense gradient for `id`, zero-filled when the parameter did not
    /// participate in the computation.
    pub fn dense(&self, id: ParamId, len: usize) -> Vec<f64> {
        self.by_param
            .get(&id)
            .cloned()
            .unwrap_or_else(|| vec![0.0; len])
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &str, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(rows * cols, value.len());
        check_finite(name, &value)?;
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push("constant", t.rows(), t.cols(), t.data().to_vec(), Op::Constant)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "constant {rows}x{cols} given {} values",
                data.len()
            )));
        }
        self.push("constant", rows, cols, data, Op::Constant)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push("zeros", rows, cols, vec![0.0; rows * cols], Op::Constant)
            .expect("zeros are finite")
    }

    /// Leaf for a stored parameter. Repeated calls return the same leaf, so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let t = store.get(id);
        let v = self.push(store.name(id), t.rows(), t.cols(), t.data().to_vec(), Op::Param(id))?;
        self.params.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    /// `a (n x k) * b (k x m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {n}x{k} * {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        let (ki, mi) = (k as isize, m as isize);
        gemm(n, k, m, (&self.nodes[a.0].value, ki, 1), (&self.nodes[b.0].value, mi, 1), 0.0, &mut out);
        self.push("matmul", n, m, out, Op::MatMul(a, b))
    }

    /// `a (n x k) * b^T` where `b` is `m x k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul_bt: {n}x{k} * ({m}x{k2})^T")));
        }
        let mut out = vec![0.0; n * m];
        let ki = k as isize;
        gemm(n, k, m, (&self.nodes[a.0].value, ki, 1), (&self.nodes[b.0].value, 1, ki), 0.0, &mut out);
        self.push("matmul_bt", n, m, out, Op::MatMulBt(a, b))
    }

    fn zip_with(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.same_shape(name, a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(name, r, c, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(row) != (1, m) {
            return Err(Error::Shape(format!(
                "add_row: {n}x{m} + {:?}",
                self.shape(row)
            )));
        }
        let rv = &self.nodes[row.0].value;
        let out = self.nodes[a.0]
            .value
            .chunks(m)
            .flat_map(|r| r.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        self.push("add_row", n, m, out, Op::AddRow(a, row))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(col) != (n, 1) {
            return Err(Error::Shape(format!(
                "mul_col: {n}x{m} * {:?}",
                self.shape(col)
            )));
        }
        let cv = &self.nodes[col.0].value;
        let out = self.nodes[a.0]
            .value
            .chunks(m)
            .zip(cv)
            .flat_map(|(r, &s)| r.iter().map(move |x| x * s))
            .collect();
        self.push("mul_col", n, m, out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|x| x * s).collect();
        self.push("scale", r, c, out, Op::Scale(a, s))
    }

    fn map(&mut self, name: &str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(name, r, c, out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map(
            "leaky_relu",
            a,
            |x| if x >= 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let n = self.shape(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != n {
                return Err(Error::Shape(format!("concat_cols: {r} rows vs {n}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                let node = &self.nodes[p.0];
                out.extend_from_slice(&node.value[i * node.cols..(i + 1) * node.cols]);
            }
        }
        self.push("concat_cols", n, total, out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let m = self.shape(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != m {
                return Err(Error::Shape(format!("concat_rows: {c} cols vs {m}")));
            }
            rows += r;
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push("concat_rows", rows, m, out, Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `[start, start + len)` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.shape(a);
        if start + len > m || len == 0 {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {}) of {m} columns",
                start + len
            )));
        }
        let av = &self.nodes[a.0].value;
        let out = (0..n)
            .flat_map(|i| av[i * m + start..i * m + start + len].iter().copied())
            .collect();
        self.push("slice_cols", n, len, out, Op::SliceCols(a, start))
    }

    /// Row `idx[i]` of `a` becomes row `i` of the output.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.shape(a);
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather_rows index {bad} of {n} rows")));
        }
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            out.extend_from_slice(&av[i * m..(i + 1) * m]);
        }
        self.push("gather_rows", idx.len(), m, out, Op::GatherRows(a, idx.to_vec()))
    }

    fn check_offsets(&self, name: &str, a: Var, offsets: &[usize]) -> Result<()> {
        let n = self.shape(a).0;
        let ok = offsets.len() >= 2
            && offsets[0] == 0
            && *offsets.last().unwrap() == n
            && offsets.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{name}: offsets {offsets:?} do not partition {n} rows into non-empty segments"
            )))
        }
    }

    /// Sums contiguous row segments `[offsets[s], offsets[s+1])`.
    pub fn segment_sum(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        self.check_offsets("segment_sum", a, offsets)?;
        let m = self.shape(a).1;
        let av = &self.nodes[a.0].value;
        let segs = offsets.len() - 1;
        let mut out = vec![0.0; segs * m];
        for s in 0..segs {
            let orow = &mut out[s * m..(s + 1) * m];
            for i in offsets[s]..offsets[s + 1] {
                for (o, x) in orow.iter_mut().zip(&av[i * m..(i + 1) * m]) {
                    *o += x;
                }
            }
        }
        self.push("segment_sum", segs, m, out, Op::SegmentSum(a, offsets.to_vec()))
    }

    /// Softmax of a column vector within each contiguous segment.
    pub fn segment_softmax(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        self.check_offsets("segment_softmax", a, offsets)?;
        let (n, m) = self.shape(a);
        if m != 1 {
            return Err(Error::Shape(format!("segment_softmax needs a column, got {n}x{m}")));
        }
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; n];
        for w in offsets.windows(2) {
            softmax_into(&av[w[0]..w[1]], &mut out[w[0]..w[1]]);
        }
        self.push("segment_softmax", n, 1, out, Op::SegmentSoftmax(a, offsets.to_vec()))
    }

    /// Row-wise softmax over the entries where `mask` is true; masked-out
    /// entries get probability zero. Every row needs at least one live entry.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (n, m) = self.shape(a);
        if mask.len() != n * m {
            return Err(Error::Shape(format!(
                "masked_softmax: mask of {} for {n}x{m}",
                mask.len()
            )));
        }
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &av[i * m..(i + 1) * m];
            let mrow = &mask[i * m..(i + 1) * m];
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Shape(format!("masked_softmax: row {i} fully masked")));
            }
            let mut z = 0.0;
            for j in 0..m {
                if mrow[j] {
                    let e = (row[j] - max).exp();
                    out[i * m + j] = e;
                    z += e;
                }
            }
            for v in &mut out[i * m..(i + 1) * m] {
                *v /= z;
            }
        }
        self.push("masked_softmax", n, m, out, Op::MaskedSoftmax(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        self.masked_softmax(a, &vec![true; n * m])
    }

    /// Sum of all entries, as a `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.iter().sum();
        self.push("sum", 1, 1, vec![s], Op::Sum(a))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, as a `1 x 1`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, m) = self.shape(logits);
        if targets.len() != n || n == 0 {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= m) {
            return Err(Error::Shape(format!("target {t} out of {m} classes")));
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; n * m];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
            for j in 0..m {
                probs[i * m + j] = (row[j] - lse).exp();
            }
        }
        loss /= n as f64;
        self.push(
            "softmax_cross_entropy",
            1,
            1,
            vec![loss],
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        let mut result = Gradients::default();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    result.by_param.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    let (n, k) = self.shape(*a);
                    let m = node.cols;
                    let (ki, mi) = (k as isize, m as isize);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // dA += G B^T, dB += A^T G
                    gemm(n, m, k, (&g, mi, 1), (bv, 1, mi), 1.0, accumulate(&mut grads[a.0], n * k));
                    gemm(k, n, m, (av, 1, ki), (&g, mi, 1), 1.0, accumulate(&mut grads[b.0], k * m));
                }
                Op::MatMulBt(a, b) => {
                    let (n, k) = self.shape(*a);
                    let m = node.cols;
                    let (ki, mi) = (k as isize, m as isize);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // dA += G B, dB += G^T A
                    gemm(n, m, k, (&g, mi, 1), (bv, ki, 1), 1.0, accumulate(&mut grads[a.0], n * k));
                    gemm(m, n, k, (&g, 1, mi), (av, ki, 1), 1.0, accumulate(&mut grads[b.0], m * k));
                }
                Op::Add(a, b) => {
                    add_into(accumulate(&mut grads[a.0], g.len()), &g, 1.0);
                    add_into(accumulate(&mut grads[b.0], g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(accumulate(&mut grads[a.0], g.len()), &g, 1.0);
                    add_into(accumulate(&mut grads[b.0], g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    {
                        let da = accumulate(&mut grads[a.0], g.len());
                        for ((d, gi), y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gi * y;
                        }
                    }
                    let db = accumulate(&mut grads[b.0], g.len());
                    for ((d, gi), x) in db.iter_mut().zip(&g).zip(av) {
                        *d += gi * x;
                    }
                }
                Op::AddRow(a, row) => {
                    let m = node.cols;
                    add_into(accumulate(&mut grads[a.0], g.len()), &g, 1.0);
                    let dr = accumulate(&mut grads[row.0], m);
                    for chunk in g.chunks(m) {
                        add_into(dr, chunk, 1.0);
                    }
                }
                Op::MulCol(a, col) => {
                    let m = node.cols;
                    let av = &self.nodes[a.0].value;
                    let cv = &self.nodes[col.0].value;
                    {
                        let da = accumulate(&mut grads[a.0], g.len());
                        for (i, (drow, grow)) in da.chunks_mut(m).zip(g.chunks(m)).enumerate() {
                            add_into(drow, grow, cv[i]);
                        }
                    }
                    let dc = accumulate(&mut grads[col.0], cv.len());
                    for (i, (arow, grow)) in av.chunks(m).zip(g.chunks(m)).enumerate() {
                        dc[i] += arow.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                Op::Scale(a, s) => {
                    add_into(accumulate(&mut grads[a.0], g.len()), &g, *s);
                }
                Op::Sigmoid(a) => {
                    let da = accumulate(&mut grads[a.0], g.len());
                    for ((d, gi), y) in da.iter_mut().zip(&g).zip(&node.value) {
                        *d += gi * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let da = accumulate(&mut grads[a.0], g.len());
                    for ((d, gi), y) in da.iter_mut().zip(&g).zip(&node.value) {
                        *d += gi * (1.0 - y * y);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let av = &self.nodes[a.0].value;
                    let da = accumulate(&mut grads[a.0], g.len());
                    for ((d, gi), x) in da.iter_mut().zip(&g).zip(av) {
                        *d += if *x >= 0.0 { *gi } else { gi * slope };
                    }
                }
                Op::ConcatCols(parts) => {
                    let m = node.cols;
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        let dp = accumulate(&mut grads[p.0], r * c);
                        for i in 0..r {
                            add_into(
                                &mut dp[i * c..(i + 1) * c],
                                &g[i * m + offset..i * m + offset + c],
                                1.0,
                            );
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        let dp = accumulate(&mut grads[p.0], r * c);
                        add_into(dp, &g[offset..offset + r * c], 1.0);
                        offset += r * c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (n, m) = self.shape(*a);
                    let len = node.cols;
                    let da = accumulate(&mut grads[a.0], n * m);
                    for i in 0..n {
                        add_into(
                            &mut da[i * m + start..i * m + start + len],
                            &g[i * len..(i + 1) * len],
                            1.0,
                        );
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (n, m) = self.shape(*a);
                    let da = accumulate(&mut grads[a.0], n * m);
                    for (row, &src) in idx.iter().enumerate() {
                        add_into(&mut da[src * m..(src + 1) * m], &g[row * m..(row + 1) * m], 1.0);
                    }
                }
                Op::SegmentSum(a, offsets) => {
                    let (n, m) = self.shape(*a);
                    let da = accumulate(&mut grads[a.0], n * m);
                    for (s, w) in offsets.windows(2).enumerate() {
                        for i in w[0]..w[1] {
                            add_into(&mut da[i * m..(i + 1) * m], &g[s * m..(s + 1) * m], 1.0);
                        }
                    }
                }
                Op::SegmentSoftmax(a, offsets) => {
                    let y = &node.value;
                    let da = accumulate(&mut grads[a.0], y.len());
                    for w in offsets.windows(2) {
                        let r = w[0]..w[1];
                        let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                        for i in r {
                            da[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
                Op::MaskedSoftmax(a) => {
                    let m = node.cols;
                    let y = &node.value;
                    let da = accumulate(&mut grads[a.0], y.len());
                    for ((drow, grow), yrow) in da.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].value.len();
                    let da = accumulate(&mut grads[a.0], len);
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    probs,
                } => {
                    let (n, m) = self.shape(*logits);
                    let scale = g[0] / n as f64;
                    let dl = accumulate(&mut grads[logits.0], n * m);
                    for i in 0..n {
                        for j in 0..m {
                            dl[i * m + j] += scale * probs[i * m + j];
                        }
                        dl[i * m + targets[i]] -= scale;
                    }
                }
            }
        }
        Ok(result)
    }
}

/// Strided view of a row-major buffer for [`gemm`]: `(data, row stride,
/// column stride)`. A transposed view swaps the strides.
type View<'a> = (&'a [f64], isize, isize);

/// `c (n x m) = beta * c + a (n x k) * b (k x m)`.
fn gemm(n: usize, k: usize, m: usize, a: View, b: View, beta: f64, c: &mut [f64]) {
    let span = |rows: usize, cols: usize, v: &View| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * v.1 as usize + (cols - 1) * v.2 as usize + 1
        }
    };
    assert!(a.0.len() >= span(n, k, &a) && b.0.len() >= span(k, m, &b) && c.len() >= n * m);
    if n == 0 || m == 0 {
        return;
    }
    // SAFETY: the assertion above keeps every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

/// Numerically stable softmax of `x` written into `out`.
pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}
