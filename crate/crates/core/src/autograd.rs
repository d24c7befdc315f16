//! A small reverse-mode tape over [`Mat`] values.
//!
//! Every forward pass records its operations into a [`Graph`]; calling
//! [`Graph::backward`] on a scalar node yields gradients for every node that
//! transitively depends on a node created with [`Graph::param`].

use crate::tensor::{gemm_acc, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add(NodeId, NodeId),
    AddRow { a: NodeId, row: NodeId },
    MulRow { a: NodeId, row: NodeId },
    Scale { a: NodeId, f: f64 },
    DivScalar { a: NodeId, s: NodeId },
    Gelu(NodeId),
    LayerNorm { a: NodeId, xhat: Mat, rstd: Vec<f64> },
    SoftmaxRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    GatherRows { a: NodeId, idx: Vec<usize> },
    ReplaceRows { a: NodeId, rows: Vec<usize>, with: NodeId },
    Unfold { a: NodeId, kernel: usize, stride: usize, pad_left: usize },
    NormalizeRows { a: NodeId, norms: Vec<f64>, eps: f64 },
    PickPerRow { a: NodeId, idx: Vec<Vec<usize>> },
    NllRows { logits: NodeId, targets: Vec<usize>, probs: Mat },
    BceLogits { logits: NodeId, labels: Vec<f64> },
    Mean(NodeId),
    Sum(NodeId),
    Transpose(NodeId),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Mat> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log Σ exp(row)`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> NodeId {
        let v = Mat::matmul_t(self.value(a), ta, self.value(b), tb);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols());
        let r = r.data().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow { a, row }, rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols());
        let r = r.data().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(v, Op::MulRow { a, row }, rg)
    }

    pub fn scale(&mut self, a: NodeId, f: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_assign(f);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale { a, f }, rg)
    }

    /// Divides `a` by the value of the 1x1 node `s`.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let d = self.scalar(s);
        let mut v = self.value(a).clone();
        v.scale_assign(1.0 / d);
        let rg = self.rg(&[a, s]);
        self.push(v, Op::DivScalar { a, s }, rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = gelu(*x);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let (n, d) = x.shape();
        let mut xhat = Mat::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(&[a]);
        let v = xhat.clone();
        self.push(v, Op::LayerNorm { a, xhat, rstd }, rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                v.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.rows());
        let cols = x.cols();
        let v = Mat::from_vec(len, cols, x.data()[start * cols..(start + len) * cols].to_vec());
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows { a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.cols());
        let mut v = Mat::zeros(x.rows(), len);
        for i in 0..x.rows() {
            v.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols { a, start }, rg)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let x = self.value(a);
        let mut v = Mat::zeros(idx.len(), x.cols());
        for (o, &i) in idx.iter().enumerate() {
            v.row_mut(o).copy_from_slice(x.row(i));
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::GatherRows { a, idx: idx.to_vec() }, rg)
    }

    /// Copy of `a` with the listed rows overwritten by the 1-row node `with`.
    pub fn replace_rows(&mut self, a: NodeId, rows: &[usize], with: NodeId) -> NodeId {
        let w = self.value(with).row(0).to_vec();
        let mut v = self.value(a).clone();
        for &r in rows {
            v.row_mut(r).copy_from_slice(&w);
        }
        let rg = self.rg(&[a, with]);
        self.push(
            v,
            Op::ReplaceRows {
                a,
                rows: rows.to_vec(),
                with,
            },
            rg,
        )
    }

    /// im2col for a 1-D convolution over the row (time) axis.
    ///
    /// Output row `o` holds input rows `o*stride - pad_left .. + kernel`
    /// flattened kernel-major, with out-of-range rows read as zero.
    pub fn unfold(&mut self, a: NodeId, kernel: usize, stride: usize, pad_left: usize, out_len: usize) -> NodeId {
        let x = self.value(a);
        let (t, c) = x.shape();
        let mut v = Mat::zeros(out_len, kernel * c);
        for o in 0..out_len {
            let row = v.row_mut(o);
            for k in 0..kernel {
                let src = (o * stride + k) as isize - pad_left as isize;
                if src >= 0 && (src as usize) < t {
                    row[k * c..(k + 1) * c].copy_from_slice(x.row(src as usize));
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            v,
            Op::Unfold {
                a,
                kernel,
                stride,
                pad_left,
            },
            rg,
        )
    }

    /// Scales each row to unit length, dividing by `‖row‖ + eps`.
    pub fn normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in row.iter_mut() {
                *x /= n + eps;
            }
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::NormalizeRows { a, norms, eps }, rg)
    }

    /// `out[i][j] = a[i][idx[i][j]]`; every inner list must have equal length.
    pub fn pick_per_row(&mut self, a: NodeId, idx: &[Vec<usize>]) -> NodeId {
        let x = self.value(a);
        assert_eq!(idx.len(), x.rows());
        let k = idx.first().map_or(0, Vec::len);
        let mut v = Mat::zeros(idx.len(), k);
        for (i, cols) in idx.iter().enumerate() {
            assert_eq!(cols.len(), k);
            for (j, &c) in cols.iter().enumerate() {
                v.set(i, j, x.get(i, c));
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::PickPerRow { a, idx: idx.to_vec() }, rg)
    }

    /// Per-row negative log-softmax at the target column, as an `n x 1` column.
    pub fn nll_rows(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let z = self.value(logits);
        assert_eq!(z.rows(), targets.len());
        let mut probs = Mat::zeros(z.rows(), z.cols());
        let mut out = Mat::zeros(z.rows(), 1);
        for (i, &t) in targets.iter().enumerate() {
            let row = z.row(i);
            let lse = log_sum_exp(row);
            out.set(i, 0, lse - row[t]);
            for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::NllRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Binary cross-entropy with logits for an `n x 1` column.
    pub fn bce_logits(&mut self, logits: NodeId, labels: &[f64]) -> NodeId {
        let z = self.value(logits);
        assert_eq!(z.cols(), 1);
        assert_eq!(z.rows(), labels.len());
        let out: Vec<f64> = z
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| softplus(x) - y * x)
            .collect();
        let rg = self.rg(&[logits]);
        self.push(
            Mat::from_vec(labels.len(), 1, out),
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let m = x.data().iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Mat::scalar(m), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Mat::scalar(s), Op::Sum(a), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Reverse pass from a 1x1 node.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.wants(a) {
                    let da = if ta {
                        Mat::matmul_t(bv, tb, g, true)
                    } else {
                        Mat::matmul_t(g, false, bv, !tb)
                    };
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = if tb {
                        Mat::matmul_t(g, true, av, ta)
                    } else {
                        let mut db = Mat::zeros(bv.rows(), bv.cols());
                        gemm_acc(av, !ta, g, false, &mut db, 0.0);
                        db
                    };
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::AddRow { a, row } => {
                self.accumulate(grads, a, g.clone());
                if self.wants(row) {
                    self.accumulate(grads, row, col_sums(g));
                }
            }
            &Op::MulRow { a, row } => {
                let r = self.value(row);
                if self.wants(a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        for (x, s) in da.row_mut(i).iter_mut().zip(r.data()) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if self.wants(row) {
                    let av = self.value(a);
                    let mut dr = Mat::zeros(1, r.cols());
                    for i in 0..g.rows() {
                        for ((d, gv), x) in dr.data_mut().iter_mut().zip(g.row(i)).zip(av.row(i)) {
                            *d += gv * x;
                        }
                    }
                    self.accumulate(grads, row, dr);
                }
            }
            &Op::Scale { a, f } => {
                let mut da = g.clone();
                da.scale_assign(f);
                self.accumulate(grads, a, da);
            }
            &Op::DivScalar { a, s } => {
                let sv = self.scalar(s);
                if self.wants(a) {
                    let mut da = g.clone();
                    da.scale_assign(1.0 / sv);
                    self.accumulate(grads, a, da);
                }
                if self.wants(s) {
                    let av = self.value(a);
                    let dot: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, s, Mat::scalar(-dot / (sv * sv)));
                }
            }
            &Op::Gelu(a) => {
                let x = self.value(a);
                let mut da = g.clone();
                for (d, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                    *d *= gelu_grad(xv);
                }
                self.accumulate(grads, a, da);
            }
            Op::LayerNorm { a, xhat, rstd } => {
                let (n, d) = xhat.shape();
                let mut da = Mat::zeros(n, d);
                for i in 0..n {
                    let gr = g.row(i);
                    let xr = xhat.row(i);
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((o, gv), xv) in da.row_mut(i).iter_mut().zip(gr).zip(xr) {
                        *o = rstd[i] * (gv - mg - xv * mgx);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            &Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut da = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in da.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, a, da);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.wants(p) {
                        let d = Mat::from_vec(r, cols, g.data()[off * cols..(off + r) * cols].to_vec());
                        self.accumulate(grads, p, d);
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.wants(p) {
                        let mut d = Mat::zeros(g.rows(), c);
                        for i in 0..g.rows() {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    off += c;
                }
            }
            &Op::SliceRows { a, start } => {
                let x = self.value(a);
                let mut d = Mat::zeros(x.rows(), x.cols());
                let cols = x.cols();
                d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, a, d);
            }
            &Op::SliceCols { a, start } => {
                let x = self.value(a);
                let mut d = Mat::zeros(x.rows(), x.cols());
                for i in 0..g.rows() {
                    d.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, a, d);
            }
            Op::GatherRows { a, idx } => {
                let x = self.value(*a);
                let mut d = Mat::zeros(x.rows(), x.cols());
                for (o, &i) in idx.iter().enumerate() {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                        *dv += gv;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ReplaceRows { a, rows, with } => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    for &r in rows {
                        d.row_mut(r).fill(0.0);
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*with) {
                    let mut dw = Mat::zeros(1, g.cols());
                    for &r in rows {
                        for (dv, gv) in dw.data_mut().iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                    self.accumulate(grads, *with, dw);
                }
            }
            &Op::Unfold {
                a,
                kernel,
                stride,
                pad_left,
            } => {
                let x = self.value(a);
                let (t, c) = x.shape();
                let mut d = Mat::zeros(t, c);
                for o in 0..g.rows() {
                    let gr = g.row(o);
                    for k in 0..kernel {
                        let src = (o * stride + k) as isize - pad_left as isize;
                        if src >= 0 && (src as usize) < t {
                            for (dv, gv) in d.row_mut(src as usize).iter_mut().zip(&gr[k * c..(k + 1) * c]) {
                                *dv += gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::NormalizeRows { a, norms, eps } => {
                let x = self.value(*a);
                let mut d = Mat::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let r = norms[i];
                    let n = r + eps;
                    let xr = x.row(i);
                    let gr = g.row(i);
                    let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let k = if r > 0.0 { dot / (n * n * r) } else { 0.0 };
                    for ((o, xv), gv) in d.row_mut(i).iter_mut().zip(xr).zip(gr) {
                        *o = gv / n - xv * k;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::PickPerRow { a, idx } => {
                let x = self.value(*a);
                let mut d = Mat::zeros(x.rows(), x.cols());
                for (i, cols) in idx.iter().enumerate() {
                    for (j, &c) in cols.iter().enumerate() {
                        let cur = d.get(i, c);
                        d.set(i, c, cur + g.get(i, j));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::NllRows {
                logits,
                targets,
                probs,
            } => {
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let gi = g.get(i, 0);
                    let row = d.row_mut(i);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= gi;
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::BceLogits { logits, labels } => {
                let z = self.value(*logits);
                let d: Vec<f64> = z
                    .data()
                    .iter()
                    .zip(labels)
                    .zip(g.data())
                    .map(|((&x, &y), &gv)| gv * (sigmoid(x) - y))
                    .collect();
                self.accumulate(grads, *logits, Mat::from_vec(labels.len(), 1, d));
            }
            &Op::Mean(a) => {
                let x = self.value(a);
                let v = g.item() / x.len() as f64;
                self.accumulate(grads, a, Mat::filled(x.rows(), x.cols(), v));
            }
            &Op::Sum(a) => {
                let x = self.value(a);
                self.accumulate(grads, a, Mat::filled(x.rows(), x.cols(), g.item()));
            }
            &Op::Transpose(a) => {
                self.accumulate(grads, a, g.transpose());
            }
        }
    }
}

fn col_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central differences of `f` at every entry of `x`.
    fn numeric_grad(x: &Mat, f: &dyn Fn(&Mat) -> f64) -> Mat {
        let h = 1e-6;
        let mut out = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn check(x: Mat, build: &dyn Fn(&mut Graph, NodeId) -> NodeId) {
        let f = |v: &Mat| {
            let mut g = Graph::new();
            let p = g.param(v.clone());
            let out = build(&mut g, p);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let p = g.param(x.clone());
        let out = build(&mut g, p);
        let grads = g.backward(out);
        let analytic = grads.get(p).expect("gradient").clone();
        let numeric = numeric_grad(&x, &f);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_mat(&mut rng, 4, 3);
        let row = rand_mat(&mut rng, 1, 3);
        let other = rand_mat(&mut rng, 3, 5);

        let wc = w.clone();
        check(rand_mat(&mut rng, 5, 4), &move |g, x| {
            let w = g.constant(wc.clone());
            let y = g.matmul(x, w);
            let y = g.gelu(y);
            g.sum(y)
        });
        let oc = other.clone();
        check(rand_mat(&mut rng, 4, 3), &move |g, x| {
            let o = g.constant(oc.clone());
            let y = g.matmul_t(o, true, x, true);
            let y = g.softmax_rows(y);
            let t = g.constant(Mat::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.1).collect()));
            let y = g.matmul(y, t);
            g.sum(y)
        });
        let rc = row.clone();
        check(rand_mat(&mut rng, 3, 3), &move |g, x| {
            let r = g.constant(rc.clone());
            let y = g.layer_norm(x, 1e-5);
            let y = g.mul_row(y, r);
            let y = g.add_row(y, r);
            let y = g.normalize_rows(y, 1e-8);
            let y = g.nll_rows(y, &[0, 2, 1]);
            g.mean(y)
        });
        check(rand_mat(&mut rng, 1, 3), &|g, r| {
            let x = g.constant(Mat::from_vec(2, 3, vec![0.3, -0.2, 0.5, 1.0, 0.1, -0.7]));
            let y = g.mul_row(x, r);
            let y = g.add_row(y, r);
            let y = g.gelu(y);
            g.sum(y)
        });
        check(rand_mat(&mut rng, 7, 2), &|g, x| {
            let u = g.unfold(x, 3, 2, 1, 4);
            let w = g.constant(Mat::from_vec(6, 1, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]));
            let y = g.matmul(u, w);
            let y = g.bce_logits(y, &[1.0, 0.0, 1.0, 0.0]);
            g.mean(y)
        });
        check(rand_mat(&mut rng, 4, 3), &|g, x| {
            let m = g.slice_rows(x, 0, 1);
            let y = g.replace_rows(x, &[1, 3], m);
            let y = g.gather_rows(y, &[3, 3, 0, 2]);
            let a = g.slice_cols(y, 0, 2);
            let b = g.slice_cols(y, 2, 1);
            let c = g.concat_cols(&[b, a]);
            let c = g.concat_rows(&[c, c]);
            let c = g.transpose(c);
            let p = g.pick_per_row(c, &[vec![0, 7], vec![3, 3], vec![5, 1]]);
            let p = g.gelu(p);
            g.sum(p)
        });
        check(Mat::scalar(0.3), &|g, s| {
            let x = g.constant(Mat::from_vec(2, 2, vec![1.0, -2.0, 0.5, 0.25]));
            let y = g.div_scalar(x, s);
            let y = g.nll_rows(y, &[1, 0]);
            let y = g.scale(y, 0.5);
            g.sum(y)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Mat::scalar(2.0));
        let p = g.param(Mat::scalar(3.0));
        let y = g.matmul(c, p);
        let grads = g.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }
}
