//! Dense f64 matrices and a small reverse-mode tape.
//!
//! Everything trainable in this crate runs in f64 on 2-D row-major tensors.
//! A [`Graph`] records eagerly-evaluated ops against a read-only
//! [`ParamStore`]; `backward` walks the tape in reverse and accumulates
//! per-parameter gradients. Each op's backward rule is finite-difference
//! tested below, so correctness of composite models reduces to correctness
//! of these primitives.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    pub fn randn<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "not a scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// out = self (m×k) · rhs (k×n), accumulation ordered row-major.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.cols, rhs.rows, "matmul inner dim mismatch");
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (kk, &a_ik) in a_row.iter().enumerate().take(k) {
                if a_ik == 0.0 {
                    continue;
                }
                let b_row = rhs.row(kk);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a_ik * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.at_mut(c, r) = self.at(r, c);
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, rhs: &Tensor, s: f64) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        for (a, &b) in self.data.iter_mut().zip(rhs.data.iter()) {
            *a += s * b;
        }
    }
}

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors. The graph borrows it immutably; the optimizer
/// is the single writer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name: {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|t| t.data.len()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    pub by_param: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn zeros(n: usize) -> Self {
        Grads { by_param: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param[id.0].as_ref()
    }

    fn accumulate(&mut self, id: ParamId, shape: (usize, usize), f: impl FnOnce(&mut Tensor)) {
        let slot = &mut self.by_param[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape.0, shape.1));
        }
        f(slot.as_mut().unwrap());
    }

    /// self += other, in parameter order.
    pub fn merge(&mut self, other: &Grads) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (a, b) in self.by_param.iter_mut().zip(other.by_param.iter()) {
            if let Some(gb) = b {
                match a {
                    Some(ga) => ga.add_assign_scaled(gb, 1.0),
                    None => *a = Some(gb.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.iter_mut().flatten() {
            for v in g.data.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .iter()
            .flatten()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.iter().flatten().all(|t| t.is_finite())
    }
}

pub type NodeId = usize;

enum Op {
    Const,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    SoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    RowSum(NodeId),
    RowMean(NodeId),
    ColMean(NodeId),
    AllMean(NodeId),
    RowNorm(NodeId, f64),
    Broadcast(NodeId),
    Reshape(NodeId),
    Embed(ParamId, Vec<usize>),
    RepeatRows(NodeId, Vec<usize>),
    Conv1dSame3(NodeId, NodeId),
    MaskedCrossEntropy(NodeId, Vec<usize>, Vec<bool>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Eagerly-evaluated compute tape over a read-only parameter store.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let orow = out.row_mut(r);
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    out
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph { store, nodes: Vec::new() }
    }

    pub fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(self.store.get(id).clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a).zip(self.val(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a).zip(self.val(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a).zip(self.val(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a).zip(self.val(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.val(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.val(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a).matmul(self.val(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.val(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        let mut out = Tensor::zeros(x.rows, 1);
        for r in 0..x.rows {
            let row = x.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            out.data[r] = m + z.ln();
        }
        self.push(out, Op::LogSumExpRows(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        let mut out = Tensor::zeros(x.rows, 1);
        for r in 0..x.rows {
            out.data[r] = x.row(r).iter().sum();
        }
        self.push(out, Op::RowSum(a))
    }

    pub fn row_mean(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        let n = x.cols as f64;
        let mut out = Tensor::zeros(x.rows, 1);
        for r in 0..x.rows {
            out.data[r] = x.row(r).iter().sum::<f64>() / n;
        }
        self.push(out, Op::RowMean(a))
    }

    pub fn col_mean(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        let m = x.rows as f64;
        let mut out = Tensor::zeros(1, x.cols);
        for r in 0..x.rows {
            for c in 0..x.cols {
                out.data[c] += x.at(r, c);
            }
        }
        for v in out.data.iter_mut() {
            *v /= m;
        }
        self.push(out, Op::ColMean(a))
    }

    pub fn all_mean(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        let v = x.data.iter().sum::<f64>() / (x.data.len() as f64);
        self.push(Tensor::from_vec(1, 1, vec![v]), Op::AllMean(a))
    }

    /// Per-row zero-mean, unit-variance normalization (biased variance).
    pub fn row_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.val(a);
        let mut out = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = x.row(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * inv;
            }
        }
        self.push(out, Op::RowNorm(a, eps))
    }

    /// Tile a 1×1, 1×c, or r×1 tensor up to rows×cols.
    pub fn broadcast(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let x = self.val(a);
        let mut out = Tensor::zeros(rows, cols);
        match (x.rows, x.cols) {
            (1, 1) => out.data.fill(x.data[0]),
            (1, c) => {
                assert_eq!(c, cols, "broadcast col mismatch");
                for r in 0..rows {
                    out.row_mut(r).copy_from_slice(&x.data);
                }
            }
            (r, 1) => {
                assert_eq!(r, rows, "broadcast row mismatch");
                for rr in 0..rows {
                    out.row_mut(rr).fill(x.data[rr]);
                }
            }
            _ => panic!("broadcast source must be 1×1, 1×c or r×1"),
        }
        self.push(out, Op::Broadcast(a))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let x = self.val(a);
        assert_eq!(x.data.len(), rows * cols, "reshape size mismatch");
        let v = Tensor::from_vec(rows, cols, x.data.clone());
        self.push(v, Op::Reshape(a))
    }

    /// Gather rows of an embedding table by id.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> NodeId {
        let t = self.store.get(table);
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < t.rows, "embedding id {id} out of range {}", t.rows);
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Embed(table, ids.to_vec()))
    }

    /// Repeat row i counts[i] times (length regulation).
    pub fn repeat_rows(&mut self, a: NodeId, counts: &[usize]) -> NodeId {
        let x = self.val(a);
        assert_eq!(counts.len(), x.rows, "one count per row");
        let total: usize = counts.iter().sum();
        let mut out = Tensor::zeros(total, x.cols);
        let mut cursor = 0;
        for (r, &cnt) in counts.iter().enumerate() {
            for _ in 0..cnt {
                out.row_mut(cursor).copy_from_slice(x.row(r));
                cursor += 1;
            }
        }
        self.push(out, Op::RepeatRows(a, counts.to_vec()))
    }

    /// Same-padded width-3 convolution over rows. `w` is (3·din)×dout,
    /// taps ordered [t−1, t, t+1].
    pub fn conv1d_same3(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = self.val(x);
        let wv = self.val(w);
        let din = xv.cols;
        assert_eq!(wv.rows, 3 * din, "conv kernel shape mismatch");
        let dout = wv.cols;
        let t_len = xv.rows;
        let mut out = Tensor::zeros(t_len, dout);
        for t in 0..t_len {
            let orow = out.row_mut(t);
            for tap in 0..3usize {
                let src = t as isize + tap as isize - 1;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let xrow = xv.row(src as usize);
                for (i, &xi) in xrow.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let wrow = wv.row(tap * din + i);
                    for (o, &wv_) in orow.iter_mut().zip(wrow.iter()) {
                        *o += xi * wv_;
                    }
                }
            }
        }
        self.push(out, Op::Conv1dSame3(x, w))
    }

    /// Mean cross-entropy over masked rows: lse(logits_r) − logits_r[target_r].
    /// Caller guarantees at least one masked row.
    pub fn masked_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> NodeId {
        let x = self.val(logits);
        assert_eq!(targets.len(), x.rows);
        assert_eq!(mask.len(), x.rows);
        let n_masked = mask.iter().filter(|&&m| m).count();
        assert!(n_masked > 0, "empty mask must be handled by the caller");
        let mut total = 0.0;
        for r in 0..x.rows {
            if !mask[r] {
                continue;
            }
            let row = x.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[targets[r]];
        }
        let v = Tensor::from_vec(1, 1, vec![total / n_masked as f64]);
        self.push(v, Op::MaskedCrossEntropy(logits, targets.to_vec(), mask.to_vec()))
    }

    /// Reverse pass from a scalar node; returns parameter gradients.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(
            (self.val(loss).rows, self.val(loss).cols),
            (1, 1),
            "backward expects a scalar loss"
        );
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        node_grads[loss] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        let mut grads = Grads::zeros(self.store.len());

        for id in (0..=loss).rev() {
            let g = match node_grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let add_to = |slot: &mut Option<Tensor>, delta: Tensor| match slot {
                Some(t) => t.add_assign_scaled(&delta, 1.0),
                None => *slot = Some(delta),
            };
            match &self.nodes[id].op {
                Op::Const => {}
                Op::Param(pid) => {
                    let shape = (g.rows, g.cols);
                    grads.accumulate(*pid, shape, |t| t.add_assign_scaled(&g, 1.0));
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    add_to(&mut node_grads[a], g.clone());
                    add_to(&mut node_grads[b], g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    add_to(&mut node_grads[a], g.clone());
                    add_to(&mut node_grads[b], g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.zip(self.val(b), |gv, bv| gv * bv);
                    let db = g.zip(self.val(a), |gv, av| gv * av);
                    add_to(&mut node_grads[a], da);
                    add_to(&mut node_grads[b], db);
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let bv = self.val(b);
                    let da = g.zip(bv, |gv, b_| gv / b_);
                    let mut db = g.zip(self.val(a), |gv, av| gv * av);
                    db = db.zip(bv, |v, b_| -v / (b_ * b_));
                    add_to(&mut node_grads[a], da);
                    add_to(&mut node_grads[b], db);
                }
                Op::Scale(a, s) => {
                    let (a, s) = (*a, *s);
                    add_to(&mut node_grads[a], g.map(|v| v * s));
                }
                Op::AddScalar(a) => {
                    add_to(&mut node_grads[*a], g);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.val(a);
                    let bv = self.val(b);
                    // dA = g · Bᵀ ; dB = Aᵀ · g
                    let da = g.matmul(&bv.transpose());
                    let db = av.transpose().matmul(&g);
                    add_to(&mut node_grads[a], da);
                    add_to(&mut node_grads[b], db);
                }
                Op::Transpose(a) => {
                    add_to(&mut node_grads[*a], g.transpose());
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let da = g.zip(y, |gv, yv| gv * (1.0 - yv * yv));
                    add_to(&mut node_grads[*a], da);
                }
                Op::Gelu(a) => {
                    let x = self.val(*a);
                    let da = g.zip(x, |gv, xv| gv * gelu_grad(xv));
                    add_to(&mut node_grads[*a], da);
                }
                Op::Softplus(a) => {
                    let x = self.val(*a);
                    let da = g.zip(x, |gv, xv| gv * sigmoid(xv));
                    add_to(&mut node_grads[*a], da);
                }
                Op::Ln(a) => {
                    let x = self.val(*a);
                    let da = g.zip(x, |gv, xv| gv / xv);
                    add_to(&mut node_grads[*a], da);
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[id].value;
                    let da = g.zip(y, |gv, yv| gv * 0.5 / yv);
                    add_to(&mut node_grads[*a], da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut da = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(&yv, &gv)| yv * gv).sum();
                        for ((d, &yv), &gv) in
                            da.row_mut(r).iter_mut().zip(yr.iter()).zip(gr.iter())
                        {
                            *d = yv * (gv - dot);
                        }
                    }
                    add_to(&mut node_grads[*a], da);
                }
                Op::LogSumExpRows(a) => {
                    let x = self.val(*a);
                    let sm = softmax_rows(x);
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let gr = g.data[r];
                        for (d, &s) in da.row_mut(r).iter_mut().zip(sm.row(r).iter()) {
                            *d = gr * s;
                        }
                    }
                    add_to(&mut node_grads[*a], da);
                }
                Op::RowSum(a) => {
                    let x = self.val(*a);
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        da.row_mut(r).fill(g.data[r]);
                    }
                    add_to(&mut node_grads[*a], da);
                }
                Op::RowMean(a) => {
                    let x = self.val(*a);
                    let inv = 1.0 / x.cols as f64;
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        da.row_mut(r).fill(g.data[r] * inv);
                    }
                    add_to(&mut node_grads[*a], da);
                }
                Op::ColMean(a) => {
                    let x = self.val(*a);
                    let inv = 1.0 / x.rows as f64;
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for c in 0..x.cols {
                            *da.at_mut(r, c) = g.data[c] * inv;
                        }
                    }
                    add_to(&mut node_grads[*a], da);
                }
                Op::AllMean(a) => {
                    let x = self.val(*a);
                    let gv = g.data[0] / (x.data.len() as f64);
                    add_to(&mut node_grads[*a], Tensor::filled(x.rows, x.cols, gv));
                }
                Op::RowNorm(a, eps) => {
                    let x = self.val(*a);
                    let y = &self.nodes[id].value;
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let xr = x.row(r);
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let n = xr.len() as f64;
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = gr.iter().sum::<f64>() / n;
                        let gy_mean: f64 =
                            gr.iter().zip(yr.iter()).map(|(&gv, &yv)| gv * yv).sum::<f64>() / n;
                        for ((d, &gv), &yv) in
                            da.row_mut(r).iter_mut().zip(gr.iter()).zip(yr.iter())
                        {
                            *d = inv * (gv - g_mean - yv * gy_mean);
                        }
                    }
                    add_to(&mut node_grads[*a], da);
                }
                Op::Broadcast(a) => {
                    let x = self.val(*a);
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    match (x.rows, x.cols) {
                        (1, 1) => da.data[0] = g.data.iter().sum(),
                        (1, _) => {
                            for r in 0..g.rows {
                                for c in 0..g.cols {
                                    da.data[c] += g.at(r, c);
                                }
                            }
                        }
                        (_, 1) => {
                            for r in 0..g.rows {
                                da.data[r] = g.row(r).iter().sum();
                            }
                        }
                        _ => unreachable!(),
                    }
                    add_to(&mut node_grads[*a], da);
                }
                Op::Reshape(a) => {
                    let x = self.val(*a);
                    let da = Tensor::from_vec(x.rows, x.cols, g.data.clone());
                    add_to(&mut node_grads[*a], da);
                }
                Op::Embed(table, ids) => {
                    let shape = {
                        let t = self.store.get(*table);
                        (t.rows, t.cols)
                    };
                    grads.accumulate(*table, shape, |dt| {
                        for (r, &idx) in ids.iter().enumerate() {
                            let grow = g.row(r);
                            for (d, &gv) in dt.row_mut(idx).iter_mut().zip(grow.iter()) {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::RepeatRows(a, counts) => {
                    let x = self.val(*a);
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    let mut cursor = 0;
                    for (r, &cnt) in counts.iter().enumerate() {
                        for _ in 0..cnt {
                            let grow = g.row(cursor);
                            for (d, &gv) in da.row_mut(r).iter_mut().zip(grow.iter()) {
                                *d += gv;
                            }
                            cursor += 1;
                        }
                    }
                    add_to(&mut node_grads[*a], da);
                }
                Op::Conv1dSame3(x, w) => {
                    let (x, w) = (*x, *w);
                    let xv = self.val(x);
                    let wv = self.val(w);
                    let din = xv.cols;
                    let t_len = xv.rows;
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    let mut dw = Tensor::zeros(wv.rows, wv.cols);
                    for t in 0..t_len {
                        let grow = g.row(t);
                        for tap in 0..3usize {
                            let src = t as isize + tap as isize - 1;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let src = src as usize;
                            for i in 0..din {
                                let wrow = wv.row(tap * din + i);
                                let mut acc = 0.0;
                                for (&gv, &wv_) in grow.iter().zip(wrow.iter()) {
                                    acc += gv * wv_;
                                }
                                *dx.at_mut(src, i) += acc;
                                let xi = xv.at(src, i);
                                if xi != 0.0 {
                                    let dwrow = dw.row_mut(tap * din + i);
                                    for (d, &gv) in dwrow.iter_mut().zip(grow.iter()) {
                                        *d += xi * gv;
                                    }
                                }
                            }
                        }
                    }
                    add_to(&mut node_grads[x], dx);
                    add_to(&mut node_grads[w], dw);
                }
                Op::MaskedCrossEntropy(logits, targets, mask) => {
                    let x = self.val(*logits);
                    let n_masked = mask.iter().filter(|&&m| m).count() as f64;
                    let gscale = g.data[0] / n_masked;
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        if !mask[r] {
                            continue;
                        }
                        let row = x.row(r);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                        let drow = da.row_mut(r);
                        for (d, &v) in drow.iter_mut().zip(row.iter()) {
                            *d = gscale * (v - m).exp() / z;
                        }
                        drow[targets[r]] -= gscale;
                    }
                    add_to(&mut node_grads[*logits], da);
                }
            }
        }
        grads
    }
}
