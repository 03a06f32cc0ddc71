use super::Tensor;
use crate::{Error, Result};
use rand::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

struct Node {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
}

/// Probabilities are clamped to this floor before any log in the loss.
const LOG_CLAMP: f64 = 1e-12;

enum Op {
    Matmul { a: NodeId, b: NodeId, out: NodeId },
    Transpose { x: NodeId, out: NodeId },
    Conv1dSame { x: NodeId, w: NodeId, out: NodeId, width: usize },
    EmbedRows { table: NodeId, indices: Vec<usize>, out: NodeId },
    SoftmaxRows { x: NodeId, out: NodeId },
    Tanh { x: NodeId, out: NodeId },
    Sigmoid { x: NodeId, out: NodeId },
    Relu { x: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    AddRowBroadcast { x: NodeId, bias: NodeId, out: NodeId },
    AddColBroadcast { x: NodeId, bias: NodeId, out: NodeId },
    BroadcastRows { x: NodeId, out: NodeId },
    ConcatCols { inputs: Vec<NodeId>, out: NodeId },
    ConcatRows { inputs: Vec<NodeId>, out: NodeId },
    MeanRows { x: NodeId, out: NodeId },
    Sum { x: NodeId, out: NodeId },
    Scale { x: NodeId, factor: f64, out: NodeId },
    Dropout { x: NodeId, keep: Vec<f64>, out: NodeId },
    BceSum { probs: NodeId, targets: Vec<f64>, out: NodeId },
}

/// Wengert tape: records forward operations and replays them in reverse.
///
/// A tape is single-owner: one forward pass builds it, one [`Tape::backward`]
/// call consumes the recording. Nodes are immutable once created.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push_node(&mut self, data: Vec<f64>, rows: usize, cols: usize, requires_grad: bool) -> NodeId {
        debug_assert_eq!(data.len(), rows * cols);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { data, rows, cols, requires_grad });
        self.grads.push(None);
        id
    }

    /// Register a leaf from a tensor value; gradient flows iff `requires_grad`.
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push_node(t.data().to_vec(), t.rows(), t.cols(), t.requires_grad)
    }

    /// Register a leaf that never receives gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        self.push_node(data, rows, cols, false)
    }

    pub fn zeros_const(&mut self, rows: usize, cols: usize) -> NodeId {
        self.constant(rows, cols, vec![0.0; rows * cols])
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn value_scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id.0].rows, self.nodes[id.0].cols)
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient of a leaf, zeros if nothing flowed to it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<f64> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.nodes[id.0].data.len()])
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn dims_err(&self, op: &str, a: NodeId, b: NodeId) -> Error {
        Error::Dimension(format!(
            "{op}: incompatible shapes {:?} and {:?}",
            self.shape(a),
            self.shape(b)
        ))
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.dims_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        let id = self.push_node(out, m, n, rg);
        self.ops.push(Op::Matmul { a, b, out: id });
        Ok(id)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires(x);
        let id = self.push_node(out, c, r, rg);
        self.ops.push(Op::Transpose { x, out: id });
        id
    }

    /// 1-D convolution over rows with zero padding of `width/2` on each end,
    /// stride 1. `x` is `n×d_in`, `w` is `(width·d_in)×d_out`, output `n×d_out`.
    pub fn conv1d_same(&mut self, x: NodeId, w: NodeId, width: usize) -> Result<NodeId> {
        if width % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d_same requires an odd kernel width, got {width}"
            )));
        }
        let (n, d_in) = self.shape(x);
        let (wk, d_out) = self.shape(w);
        if wk != width * d_in {
            return Err(Error::Dimension(format!(
                "conv1d_same: weight rows {wk} != width {width} × d_in {d_in}"
            )));
        }
        let pad = width / 2;
        let xs = &self.nodes[x.0].data;
        let ws = &self.nodes[w.0].data;
        let mut out = vec![0.0; n * d_out];
        for j in 0..n {
            for u in 0..width {
                let t = j as isize + u as isize - pad as isize;
                if t < 0 || t >= n as isize {
                    continue;
                }
                let xrow = &xs[t as usize * d_in..(t as usize + 1) * d_in];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &ws[(u * d_in + i) * d_out..(u * d_in + i + 1) * d_out];
                    let orow = &mut out[j * d_out..(j + 1) * d_out];
                    for (o, wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(w);
        let id = self.push_node(out, n, d_out, rg);
        self.ops.push(Op::Conv1dSame { x, w, out: id, width });
        Ok(id)
    }

    /// Gather rows of `table` by index; backward scatter-adds.
    pub fn embed_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.shape(table);
        if indices.is_empty() {
            return Err(Error::Contract("embed_rows: empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "embed_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.requires(table);
        let id = self.push_node(out, indices.len(), cols, rg);
        self.ops.push(Op::EmbedRows { table, indices: indices.to_vec(), out: id });
        Ok(id)
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let c = self.shape(x).1;
        self.softmax_rows_masked(x, &vec![true; c]).expect("all-true mask is valid")
    }

    /// Row-wise softmax where only `valid` columns receive mass; invalid
    /// columns get exactly zero. Every row shares the mask.
    pub fn softmax_rows_masked(&mut self, x: NodeId, valid: &[bool]) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if valid.len() != c {
            return Err(Error::Dimension(format!(
                "softmax mask length {} != column count {c}",
                valid.len()
            )));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Contract("softmax: mask excludes every column".into()));
        }
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(valid)
                .filter(|(_, &v)| v)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                if valid[j] {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    denom += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= denom;
            }
        }
        let rg = self.requires(x);
        let id = self.push_node(out, r, c, rg);
        self.ops.push(Op::SoftmaxRows { x, out: id });
        Ok(id)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let (r, c) = self.shape(x);
        let rg = self.requires(x);
        let id = self.push_node(out, r, c, rg);
        self.ops.push(Op::Tanh { x, out: id });
        id
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].data.iter().map(|&v| stable_sigmoid(v)).collect();
        let (r, c) = self.shape(x);
        let rg = self.requires(x);
        let id = self.push_node(out, r, c, rg);
        self.ops.push(Op::Sigmoid { x, out: id });
        id
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let (r, c) = self.shape(x);
        let rg = self.requires(x);
        let id = self.push_node(out, r, c, rg);
        self.ops.push(Op::Relu { x, out: id });
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dims_err("add", a, b));
        }
        let out = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.shape(a);
        let rg = self.requires(a) || self.requires(b);
        let id = self.push_node(out, r, c, rg);
        self.ops.push(Op::Add { a, b, out: id });
        Ok(id)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dims_err("mul", a, b));
        }
        let out = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let (r, c) = self.shape(a);
        let rg = self.requires(a) || self.requires(b);
        let id = self.push_node(out, r, c, rg);
        self.ops.push(Op::Mul { a, b, out: id });
        Ok(id)
    }

    /// `x: r×c` plus a `1×c` bias added to every row.
    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if self.shape(bias) != (1, c) {
            return Err(self.dims_err("add_row_broadcast", x, bias));
        }
        let bs = self.nodes[bias.0].data.clone();
        let out = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bs[i % c])
            .collect();
        let rg = self.requires(x) || self.requires(bias);
        let id = self.push_node(out, r, c, rg);
        self.ops.push(Op::AddRowBroadcast { x, bias, out: id });
        Ok(id)
    }

    /// `x: r×c` plus an `r×1` bias added to every column.
    pub fn add_col_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if self.shape(bias) != (r, 1) {
            return Err(self.dims_err("add_col_broadcast", x, bias));
        }
        let bs = self.nodes[bias.0].data.clone();
        let out = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bs[i / c])
            .collect();
        let rg = self.requires(x) || self.requires(bias);
        let id = self.push_node(out, r, c, rg);
        self.ops.push(Op::AddColBroadcast { x, bias, out: id });
        Ok(id)
    }

    /// Replicate a `1×c` row `rows` times.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if r != 1 {
            return Err(Error::Dimension(format!(
                "broadcast_rows expects a 1×c input, got {r}×{c}"
            )));
        }
        let row = self.nodes[x.0].data.clone();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(&row);
        }
        let rg = self.requires(x);
        let id = self.push_node(out, rows, c, rg);
        self.ops.push(Op::BroadcastRows { x, out: id });
        Ok(id)
    }

    /// Concatenate along columns: `[r×a], [r×b], ... → r×(a+b+...)`.
    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat_cols: no inputs".into()));
        }
        let r = self.shape(inputs[0]).0;
        if let Some(&bad) = inputs.iter().find(|&&i| self.shape(i).0 != r) {
            return Err(self.dims_err("concat_cols", inputs[0], bad));
        }
        let total: usize = inputs.iter().map(|&i| self.shape(i).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &id in inputs {
                let c = self.shape(id).1;
                out.extend_from_slice(&self.nodes[id.0].data[i * c..(i + 1) * c]);
            }
        }
        let rg = inputs.iter().any(|&i| self.requires(i));
        let id = self.push_node(out, r, total, rg);
        self.ops.push(Op::ConcatCols { inputs: inputs.to_vec(), out: id });
        Ok(id)
    }

    /// Concatenate along rows: `[a×c], [b×c], ... → (a+b+...)×c`.
    pub fn concat_rows(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat_rows: no inputs".into()));
        }
        let c = self.shape(inputs[0]).1;
        if let Some(&bad) = inputs.iter().find(|&&i| self.shape(i).1 != c) {
            return Err(self.dims_err("concat_rows", inputs[0], bad));
        }
        let total: usize = inputs.iter().map(|&i| self.shape(i).0).sum();
        let mut out = Vec::with_capacity(total * c);
        for &id in inputs {
            out.extend_from_slice(&self.nodes[id.0].data);
        }
        let rg = inputs.iter().any(|&i| self.requires(i));
        let id = self.push_node(out, total, c, rg);
        self.ops.push(Op::ConcatRows { inputs: inputs.to_vec(), out: id });
        Ok(id)
    }

    /// Average the rows: `r×c → 1×c`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += src[i * c + j];
            }
        }
        for v in out.iter_mut() {
            *v /= r as f64;
        }
        let rg = self.requires(x);
        let id = self.push_node(out, 1, c, rg);
        self.ops.push(Op::MeanRows { x, out: id });
        id
    }

    /// Sum all entries into a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.requires(x);
        let id = self.push_node(vec![total], 1, 1, rg);
        self.ops.push(Op::Sum { x, out: id });
        id
    }

    /// Multiply every entry by a constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = self.nodes[x.0].data.iter().map(|v| v * factor).collect();
        let (r, c) = self.shape(x);
        let rg = self.requires(x);
        let id = self.push_node(out, r, c, rg);
        self.ops.push(Op::Scale { x, factor, out: id });
        id
    }

    /// Inverted dropout: at train time each entry is kept with probability
    /// `1−p` and scaled by `1/(1−p)`; at eval time this is the identity (the
    /// caller simply does not insert the op).
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let out = self.nodes[x.0].data.iter().zip(&keep).map(|(v, k)| v * k).collect();
        let (r, c) = self.shape(x);
        let rg = self.requires(x);
        let id = self.push_node(out, r, c, rg);
        self.ops.push(Op::Dropout { x, keep, out: id });
        Ok(id)
    }

    /// Multi-label binary cross-entropy, summed over all entries:
    /// `Σ −y·ln(p) − (1−y)·ln(1−p)` with log arguments clamped at 1e-12.
    pub fn bce_sum(&mut self, probs: NodeId, targets: &[f64]) -> Result<NodeId> {
        let n = self.nodes[probs.0].data.len();
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "bce_sum: {n} probabilities vs {} targets",
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (&p, &y) in self.nodes[probs.0].data.iter().zip(targets) {
            total += -y * p.max(LOG_CLAMP).ln() - (1.0 - y) * (1.0 - p).max(LOG_CLAMP).ln();
        }
        let rg = self.requires(probs);
        let id = self.push_node(vec![total], 1, 1, rg);
        self.ops.push(Op::BceSum { probs, targets: targets.to_vec(), out: id });
        Ok(id)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Replay the tape in reverse, accumulating gradients into every
    /// `requires_grad` leaf reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx);
        }
        Ok(())
    }

    fn take_out_grad(&self, out: NodeId) -> Option<Vec<f64>> {
        self.grads[out.0].clone()
    }

    fn accumulate(&mut self, id: NodeId, g: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(buf) => {
                for (dst, src) in buf.iter_mut().zip(g) {
                    *dst += src;
                }
            }
            None => self.grads[id.0] = Some(g.to_vec()),
        }
    }

    fn backward_op(&mut self, idx: usize) {
        // Ops are processed strictly in reverse recording order; each op reads
        // the output gradient and scatters into its inputs.
        match &self.ops[idx] {
            Op::Matmul { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let Some(g) = self.take_out_grad(out) else { return };
                let (m, k) = self.shape(a);
                let n = self.shape(b).1;
                if self.requires(a) {
                    let bd = &self.nodes[b.0].data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * bd[p * n + j];
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.requires(b) {
                    let ad = &self.nodes[a.0].data;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Transpose { x, out } => {
                let (x, out) = (*x, *out);
                let Some(g) = self.take_out_grad(out) else { return };
                let (r, c) = self.shape(x);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Conv1dSame { x, w, out, width } => {
                let (x, w, out, width) = (*x, *w, *out, *width);
                let Some(g) = self.take_out_grad(out) else { return };
                let (n, d_in) = self.shape(x);
                let d_out = self.shape(w).1;
                let pad = width / 2;
                if self.requires(x) {
                    let ws = &self.nodes[w.0].data;
                    let mut dx = vec![0.0; n * d_in];
                    for j in 0..n {
                        let grow = &g[j * d_out..(j + 1) * d_out];
                        for u in 0..width {
                            let t = j as isize + u as isize - pad as isize;
                            if t < 0 || t >= n as isize {
                                continue;
                            }
                            for i in 0..d_in {
                                let wrow = &ws[(u * d_in + i) * d_out..(u * d_in + i + 1) * d_out];
                                let mut acc = 0.0;
                                for (gv, wv) in grow.iter().zip(wrow) {
                                    acc += gv * wv;
                                }
                                dx[t as usize * d_in + i] += acc;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.requires(w) {
                    let xs = &self.nodes[x.0].data;
                    let mut dw = vec![0.0; width * d_in * d_out];
                    for j in 0..n {
                        let grow = &g[j * d_out..(j + 1) * d_out];
                        for u in 0..width {
                            let t = j as isize + u as isize - pad as isize;
                            if t < 0 || t >= n as isize {
                                continue;
                            }
                            for i in 0..d_in {
                                let xv = xs[t as usize * d_in + i];
                                if xv == 0.0 {
                                    continue;
                                }
                                let wrow =
                                    &mut dw[(u * d_in + i) * d_out..(u * d_in + i + 1) * d_out];
                                for (dv, gv) in wrow.iter_mut().zip(grow) {
                                    *dv += xv * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(w, &dw);
                }
            }
            Op::EmbedRows { table, indices, out } => {
                let (table, out) = (*table, *out);
                let indices = indices.clone();
                let Some(g) = self.take_out_grad(out) else { return };
                if !self.requires(table) {
                    return;
                }
                let (rows, cols) = self.shape(table);
                let buf = self.grads[table.0].get_or_insert_with(|| vec![0.0; rows * cols]);
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..cols {
                        buf[i * cols + j] += g[r * cols + j];
                    }
                }
            }
            Op::SoftmaxRows { x, out } => {
                let (x, out) = (*x, *out);
                let Some(g) = self.take_out_grad(out) else { return };
                let (r, c) = self.shape(out);
                let s = &self.nodes[out.0].data;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let srow = &s[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = srow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Tanh { x, out } => {
                let (x, out) = (*x, *out);
                let Some(g) = self.take_out_grad(out) else { return };
                let dx: Vec<f64> = self.nodes[out.0]
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(y, gv)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Sigmoid { x, out } => {
                let (x, out) = (*x, *out);
                let Some(g) = self.take_out_grad(out) else { return };
                let dx: Vec<f64> = self.nodes[out.0]
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(y, gv)| gv * y * (1.0 - y))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Relu { x, out } => {
                let (x, out) = (*x, *out);
                let Some(g) = self.take_out_grad(out) else { return };
                let dx: Vec<f64> = self.nodes[x.0]
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Add { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let Some(g) = self.take_out_grad(out) else { return };
                self.accumulate(a, &g);
                self.accumulate(b, &g);
            }
            Op::Mul { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                let Some(g) = self.take_out_grad(out) else { return };
                if self.requires(a) {
                    let da: Vec<f64> =
                        self.nodes[b.0].data.iter().zip(&g).map(|(v, gv)| v * gv).collect();
                    self.accumulate(a, &da);
                }
                if self.requires(b) {
                    let db: Vec<f64> =
                        self.nodes[a.0].data.iter().zip(&g).map(|(v, gv)| v * gv).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::AddRowBroadcast { x, bias, out } => {
                let (x, bias, out) = (*x, *bias, *out);
                let Some(g) = self.take_out_grad(out) else { return };
                let (r, c) = self.shape(x);
                self.accumulate(x, &g);
                if self.requires(bias) {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::AddColBroadcast { x, bias, out } => {
                let (x, bias, out) = (*x, *bias, *out);
                let Some(g) = self.take_out_grad(out) else { return };
                let (r, c) = self.shape(x);
                self.accumulate(x, &g);
                if self.requires(bias) {
                    let mut db = vec![0.0; r];
                    for i in 0..r {
                        for j in 0..c {
                            db[i] += g[i * c + j];
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::BroadcastRows { x, out } => {
                let (x, out) = (*x, *out);
                let Some(g) = self.take_out_grad(out) else { return };
                let (r, c) = self.shape(out);
                let mut dx = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j] += g[i * c + j];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::ConcatCols { inputs, out } => {
                let inputs = inputs.clone();
                let out = *out;
                let Some(g) = self.take_out_grad(out) else { return };
                let (r, total) = self.shape(out);
                let mut offset = 0;
                for id in inputs {
                    let c = self.shape(id).1;
                    if self.requires(id) {
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            dx[i * c..(i + 1) * c]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(id, &dx);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { inputs, out } => {
                let inputs = inputs.clone();
                let out = *out;
                let Some(g) = self.take_out_grad(out) else { return };
                let c = self.shape(out).1;
                let mut offset = 0;
                for id in inputs {
                    let r = self.shape(id).0;
                    if self.requires(id) {
                        self.accumulate(id, &g[offset * c..(offset + r) * c]);
                    }
                    offset += r;
                }
            }
            Op::MeanRows { x, out } => {
                let (x, out) = (*x, *out);
                let Some(g) = self.take_out_grad(out) else { return };
                let (r, c) = self.shape(x);
                let inv = 1.0 / r as f64;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j] * inv;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Sum { x, out } => {
                let (x, out) = (*x, *out);
                let Some(g) = self.take_out_grad(out) else { return };
                let n = self.nodes[x.0].data.len();
                self.accumulate(x, &vec![g[0]; n]);
            }
            Op::Scale { x, factor, out } => {
                let (x, factor, out) = (*x, *factor, *out);
                let Some(g) = self.take_out_grad(out) else { return };
                let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                self.accumulate(x, &dx);
            }
            Op::Dropout { x, keep, out } => {
                let (x, out) = (*x, *out);
                let keep = keep.clone();
                let Some(g) = self.take_out_grad(out) else { return };
                let dx: Vec<f64> = g.iter().zip(&keep).map(|(gv, k)| gv * k).collect();
                self.accumulate(x, &dx);
            }
            Op::BceSum { probs, targets, out } => {
                let (probs, out) = (*probs, *out);
                let targets = targets.clone();
                let Some(g) = self.take_out_grad(out) else { return };
                let gv = g[0];
                // Derivative matches the clamped forward: a clamped log term
                // is locally constant, so its contribution is zero.
                let dx: Vec<f64> = self.nodes[probs.0]
                    .data
                    .iter()
                    .zip(&targets)
                    .map(|(&p, &y)| {
                        let d1 = if p > LOG_CLAMP { -y / p } else { 0.0 };
                        let d2 = if 1.0 - p > LOG_CLAMP { (1.0 - y) / (1.0 - p) } else { 0.0 };
                        gv * (d1 + d2)
                    })
                    .collect();
                self.accumulate(probs, &dx);
            }
        }
    }

}

/// Numerically stable logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
