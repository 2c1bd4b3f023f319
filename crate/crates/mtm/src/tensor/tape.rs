//! The recording tape. Every operation pushes one node; backward walks the
//! nodes in strict reverse order and accumulates gradients per node, summing
//! the contributions of all consumers.

use std::cell::RefCell;

use rand::Rng;

use super::{mm_nn, mm_nt, mm_tn, Tensor, ATTENTIVE_EPS, COSINE_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

pub struct Tape {
    inner: RefCell<Inner>,
}

struct Inner {
    nodes: Vec<Node>,
    stochastic: bool,
}

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    ConcatCols { parts: Vec<(NodeId, usize)> },
    Row { x: NodeId, i: usize },
    MeanRows { x: NodeId },
    MeanWindow { x: NodeId, ps: usize },
    Sum { x: NodeId },
    Cosine { a: NodeId, b: NodeId },
    CosineMatrix { a: NodeId, b: NodeId },
    Attentive { alpha: NodeId, target: NodeId },
    MultiCosine { a: NodeId, b: NodeId, w: NodeId },
    Dropout { x: NodeId, mask: Vec<f64> },
    Softmax { x: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, label: usize },
    Embed { table: NodeId, ids: Vec<usize> },
    LstmSeq(Box<LstmSeq>),
}

/// Cached forward state of one LSTM direction, kept for backprop through time.
struct LstmSeq {
    x: NodeId,
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
    reverse: bool,
    /// Post-activation gates `[i f g o]` per step, in processing order.
    gates: Vec<f64>,
    /// Cell states per step, in processing order.
    cell: Vec<f64>,
    tanh_cell: Vec<f64>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cosine with an epsilon guard on both norms; two zero vectors give 0.
fn cosine_raw(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let na = na.sqrt().max(COSINE_EPS);
    let nb = nb.sqrt().max(COSINE_EPS);
    (dot / (na * nb), na, nb)
}

/// Accumulates `d cos(a, b) / d a` scaled by `g` into `da`.
///
/// Where the norm guard was active the vector is treated as constant.
fn cosine_backward_into(g: f64, c: f64, a: &[f64], b: &[f64], na: f64, nb: f64, da: &mut [f64]) {
    if na <= COSINE_EPS {
        return;
    }
    let inv = 1.0 / (na * nb);
    let inv2 = c / (na * na);
    for k in 0..a.len() {
        da[k] += g * (b[k] * inv - a[k] * inv2);
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { inner: RefCell::new(Inner { nodes: Vec::new(), stochastic: false }) }
    }

    /// True once any train-mode dropout has been recorded.
    pub fn is_stochastic(&self) -> bool {
        self.inner.borrow().stochastic
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        self.inner.borrow().nodes[id.0].value.clone()
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.inner.borrow().nodes[id.0].value.shape().to_vec()
    }

    pub fn with_value<R>(&self, id: NodeId, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().nodes[id.0].value)
    }

    fn push(&self, value: Tensor, op: Op) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op });
        NodeId(inner.nodes.len() - 1)
    }

    pub fn matmul(&self, a: NodeId, b: NodeId) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let av = &inner.nodes[a.0].value;
            let bv = &inner.nodes[b.0].value;
            let (m, k) = (av.rows(), av.cols());
            let (kb, n) = (bv.rows(), bv.cols());
            assert_eq!(
                k, kb,
                "matmul: inner dimensions disagree: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            );
            let mut out = vec![0.0; m * n];
            mm_nn(av.data(), m, k, bv.data(), n, &mut out, false);
            Tensor::matrix(m, n, out).unwrap()
        };
        self.push(value, Op::Matmul { a, b })
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let av = &inner.nodes[a.0].value;
            let bv = &inner.nodes[b.0].value;
            assert_eq!(av.shape(), bv.shape(), "add: shape mismatch: {:?} vs {:?}", av.shape(), bv.shape());
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            Tensor::new(av.shape().to_vec(), data).unwrap()
        };
        self.push(value, Op::Add { a, b })
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let av = &inner.nodes[a.0].value;
            let bv = &inner.nodes[b.0].value;
            assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch: {:?} vs {:?}", av.shape(), bv.shape());
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
            Tensor::new(av.shape().to_vec(), data).unwrap()
        };
        self.push(value, Op::Mul { a, b })
    }

    pub fn scale(&self, x: NodeId, c: f64) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect()).unwrap()
        };
        self.push(value, Op::Scale { x, c })
    }

    pub fn tanh(&self, x: NodeId) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v.tanh()).collect()).unwrap()
        };
        self.push(value, Op::Tanh { x })
    }

    pub fn sigmoid(&self, x: NodeId) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| sigmoid(*v)).collect()).unwrap()
        };
        self.push(value, Op::Sigmoid { x })
    }

    /// Concatenate along the last axis; all inputs must share the row count.
    pub fn concat_cols(&self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty(), "concat_cols: no inputs");
        let (value, parts) = {
            let inner = self.inner.borrow();
            let rows = inner.nodes[ids[0].0].value.rows();
            let mut parts = Vec::with_capacity(ids.len());
            let mut total = 0usize;
            for id in ids {
                let v = &inner.nodes[id.0].value;
                assert_eq!(
                    v.rows(),
                    rows,
                    "concat_cols: row mismatch: {:?} vs {:?}",
                    inner.nodes[ids[0].0].value.shape(),
                    v.shape()
                );
                parts.push((*id, v.cols()));
                total += v.cols();
            }
            let mut data = vec![0.0; rows * total];
            let mut off = 0;
            for (id, w) in &parts {
                let v = &inner.nodes[id.0].value;
                for r in 0..rows {
                    data[r * total + off..r * total + off + w].copy_from_slice(v.row(r));
                }
                off += w;
            }
            (Tensor::matrix(rows, total, data).unwrap(), parts)
        };
        self.push(value, Op::ConcatCols { parts })
    }

    pub fn row(&self, x: NodeId, i: usize) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            assert!(i < xv.rows(), "row: index {} out of {} rows", i, xv.rows());
            Tensor::matrix(1, xv.cols(), xv.row(i).to_vec()).unwrap()
        };
        self.push(value, Op::Row { x, i })
    }

    pub fn mean_rows(&self, x: NodeId) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            let (m, n) = (xv.rows(), xv.cols());
            let mut out = vec![0.0; n];
            for r in 0..m {
                for (o, v) in out.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            for o in &mut out {
                *o /= m as f64;
            }
            Tensor::matrix(1, n, out).unwrap()
        };
        self.push(value, Op::MeanRows { x })
    }

    /// Overlapping mean over `ps` adjacent rows with stride 1.
    pub fn mean_window(&self, x: NodeId, ps: usize) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            let (m, n) = (xv.rows(), xv.cols());
            assert!(ps >= 1 && ps <= m, "mean_window: ps {} out of range for {} rows", ps, m);
            let out_rows = m - ps + 1;
            let mut out = vec![0.0; out_rows * n];
            for i in 0..out_rows {
                let dst = &mut out[i * n..(i + 1) * n];
                for k in 0..ps {
                    for (d, v) in dst.iter_mut().zip(xv.row(i + k)) {
                        *d += v;
                    }
                }
                for d in dst.iter_mut() {
                    *d /= ps as f64;
                }
            }
            Tensor::matrix(out_rows, n, out).unwrap()
        };
        self.push(value, Op::MeanWindow { x, ps })
    }

    pub fn sum(&self, x: NodeId) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            Tensor::scalar(inner.nodes[x.0].value.data().iter().sum())
        };
        self.push(value, Op::Sum { x })
    }

    /// Cosine similarity of two equally sized vectors, as a scalar node.
    pub fn cosine(&self, a: NodeId, b: NodeId) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let av = &inner.nodes[a.0].value;
            let bv = &inner.nodes[b.0].value;
            assert_eq!(av.len(), bv.len(), "cosine: length mismatch: {:?} vs {:?}", av.shape(), bv.shape());
            Tensor::scalar(cosine_raw(av.data(), bv.data()).0)
        };
        self.push(value, Op::Cosine { a, b })
    }

    /// All pairwise row cosines: `(m x d, n x d) -> m x n`.
    pub fn cosine_matrix(&self, a: NodeId, b: NodeId) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let av = &inner.nodes[a.0].value;
            let bv = &inner.nodes[b.0].value;
            assert_eq!(av.cols(), bv.cols(), "cosine_matrix: width mismatch: {:?} vs {:?}", av.shape(), bv.shape());
            let (m, n) = (av.rows(), bv.rows());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = cosine_raw(av.row(i), bv.row(j)).0;
                }
            }
            Tensor::matrix(m, n, out).unwrap()
        };
        self.push(value, Op::CosineMatrix { a, b })
    }

    /// Attention-weighted mean of target rows: `(m x n, n x d) -> m x d`.
    ///
    /// Rows whose weight sum cancels below the epsilon guard fall back to
    /// the unweighted mean of the target rows.
    pub fn attentive(&self, alpha: NodeId, target: NodeId) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let av = &inner.nodes[alpha.0].value;
            let tv = &inner.nodes[target.0].value;
            assert_eq!(
                av.cols(),
                tv.rows(),
                "attentive: weight columns {:?} must match target rows {:?}",
                av.shape(),
                tv.shape()
            );
            let (m, n, d) = (av.rows(), tv.rows(), tv.cols());
            let mut out = vec![0.0; m * d];
            for i in 0..m {
                let w = av.row(i);
                let denom: f64 = w.iter().sum();
                let dst = &mut out[i * d..(i + 1) * d];
                if denom.abs() < ATTENTIVE_EPS {
                    for j in 0..n {
                        for (o, v) in dst.iter_mut().zip(tv.row(j)) {
                            *o += v / n as f64;
                        }
                    }
                } else {
                    for j in 0..n {
                        let wj = w[j] / denom;
                        for (o, v) in dst.iter_mut().zip(tv.row(j)) {
                            *o += wj * v;
                        }
                    }
                }
            }
            Tensor::matrix(m, d, out).unwrap()
        };
        self.push(value, Op::Attentive { alpha, target })
    }

    /// Multi-perspective cosine over aligned rows:
    /// `(m x d, m x d, p x d) -> m x p` with entry `cos(a_i . w_k, b_i . w_k)`.
    pub fn multi_cosine(&self, a: NodeId, b: NodeId, w: NodeId) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let av = &inner.nodes[a.0].value;
            let bv = &inner.nodes[b.0].value;
            let wv = &inner.nodes[w.0].value;
            assert_eq!(av.shape(), bv.shape(), "multi_cosine: shape mismatch: {:?} vs {:?}", av.shape(), bv.shape());
            assert_eq!(wv.cols(), av.cols(), "multi_cosine: perspective width {:?} vs rows {:?}", wv.shape(), av.shape());
            let (m, d, p) = (av.rows(), av.cols(), wv.rows());
            let mut out = vec![0.0; m * p];
            let mut u = vec![0.0; d];
            let mut v = vec![0.0; d];
            for i in 0..m {
                for k in 0..p {
                    let wk = wv.row(k);
                    for (x, (ai, wi)) in u.iter_mut().zip(av.row(i).iter().zip(wk)) {
                        *x = ai * wi;
                    }
                    for (x, (bi, wi)) in v.iter_mut().zip(bv.row(i).iter().zip(wk)) {
                        *x = bi * wi;
                    }
                    out[i * p + k] = cosine_raw(&u, &v).0;
                }
            }
            Tensor::matrix(m, p, out).unwrap()
        };
        self.push(value, Op::MultiCosine { a, b, w })
    }

    /// Train-time inverted dropout. With `train == false` this is the
    /// identity and records nothing.
    pub fn dropout(&self, x: NodeId, rate: f64, train: bool, rng: &mut impl Rng) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout: rate {rate} outside [0, 1)");
        if !train || rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let (value, mask) = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            let mask: Vec<f64> = (0..xv.len())
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            (Tensor::new(xv.shape().to_vec(), data).unwrap(), mask)
        };
        self.inner.borrow_mut().stochastic = true;
        self.push(value, Op::Dropout { x, mask })
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax(&self, x: NodeId) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            let (m, n) = (xv.rows(), xv.cols());
            assert!(n >= 1, "softmax: empty input");
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                softmax_row(xv.row(r), &mut out[r * n..(r + 1) * n]);
            }
            Tensor::new(xv.shape().to_vec(), out).unwrap()
        };
        self.push(value, Op::Softmax { x })
    }

    /// Fused softmax + cross-entropy: scalar loss `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&self, logits: NodeId, label: usize) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let lv = &inner.nodes[logits.0].value;
            assert_eq!(lv.rows(), 1, "softmax_cross_entropy: expected a single row, got {:?}", lv.shape());
            assert!(label < lv.cols(), "softmax_cross_entropy: label {} out of {} classes", label, lv.cols());
            let row = lv.row(0);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            Tensor::scalar(lse - row[label])
        };
        self.push(value, Op::SoftmaxCrossEntropy { logits, label })
    }

    /// Gathers table rows; gradients flow only into the looked-up rows.
    pub fn embed(&self, table: NodeId, ids: &[usize]) -> NodeId {
        let value = {
            let inner = self.inner.borrow();
            let tv = &inner.nodes[table.0].value;
            let (v, d) = (tv.rows(), tv.cols());
            let mut out = vec![0.0; ids.len() * d];
            for (r, &id) in ids.iter().enumerate() {
                assert!(id < v, "embed: token id {} out of vocabulary size {}", id, v);
                out[r * d..(r + 1) * d].copy_from_slice(tv.row(id));
            }
            Tensor::matrix(ids.len(), d, out).unwrap()
        };
        self.push(value, Op::Embed { table, ids: ids.to_vec() })
    }

    /// One LSTM direction over a whole sequence, as a single fused node.
    ///
    /// `x` is `L x d`, `wx` is `d x 4H`, `wh` is `H x 4H`, `b` is `1 x 4H`
    /// with gate order `[input, forget, cell, output]`. Initial hidden and
    /// cell states are zero. With `reverse`, steps run from the last token
    /// to the first; output row `i` is always the state at token `i`.
    pub fn lstm_seq(&self, x: NodeId, wx: NodeId, wh: NodeId, b: NodeId, reverse: bool) -> NodeId {
        let (value, cache) = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.0].value;
            let wxv = &inner.nodes[wx.0].value;
            let whv = &inner.nodes[wh.0].value;
            let bv = &inner.nodes[b.0].value;
            let (len, d) = (xv.rows(), xv.cols());
            let h = whv.rows();
            assert_eq!(wxv.rows(), d, "lstm: input width {:?} vs wx {:?}", xv.shape(), wxv.shape());
            assert_eq!(wxv.cols(), 4 * h, "lstm: wx {:?} vs wh {:?}", wxv.shape(), whv.shape());
            assert_eq!(whv.cols(), 4 * h, "lstm: wh must be H x 4H, got {:?}", whv.shape());
            assert_eq!(bv.len(), 4 * h, "lstm: bias {:?} vs 4H = {}", bv.shape(), 4 * h);
            assert!(len >= 1, "lstm: empty sequence");

            // Input projection for all steps at once.
            let mut xproj = vec![0.0; len * 4 * h];
            mm_nn(xv.data(), len, d, wxv.data(), 4 * h, &mut xproj, false);

            let mut gates = vec![0.0; len * 4 * h];
            let mut cell = vec![0.0; len * h];
            let mut tanh_cell = vec![0.0; len * h];
            let mut out = vec![0.0; len * h];

            let mut h_prev = vec![0.0; h];
            let mut c_prev = vec![0.0; h];
            let order: Vec<usize> =
                if reverse { (0..len).rev().collect() } else { (0..len).collect() };
            for (step, &t) in order.iter().enumerate() {
                let mut a = xproj[t * 4 * h..(t + 1) * 4 * h].to_vec();
                mm_nn(&h_prev, 1, h, whv.data(), 4 * h, &mut a, true);
                for (ai, bi) in a.iter_mut().zip(bv.data()) {
                    *ai += bi;
                }
                let g = &mut gates[step * 4 * h..(step + 1) * 4 * h];
                for j in 0..h {
                    g[j] = sigmoid(a[j]);
                    g[h + j] = sigmoid(a[h + j]);
                    g[2 * h + j] = a[2 * h + j].tanh();
                    g[3 * h + j] = sigmoid(a[3 * h + j]);
                }
                for j in 0..h {
                    let c = g[h + j] * c_prev[j] + g[j] * g[2 * h + j];
                    cell[step * h + j] = c;
                    let tc = c.tanh();
                    tanh_cell[step * h + j] = tc;
                    let hv = g[3 * h + j] * tc;
                    out[t * h + j] = hv;
                    h_prev[j] = hv;
                    c_prev[j] = c;
                }
            }
            (
                Tensor::matrix(len, h, out).unwrap(),
                LstmSeq { x, wx, wh, b, reverse, gates, cell, tanh_cell },
            )
        };
        self.push(value, Op::LstmSeq(Box::new(cache)))
    }

    /// Reverse pass from a scalar node. Gradient accumulators are summed
    /// over all consumers; traversal is the strict reverse of recording.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        assert_eq!(nodes[loss.0].value.len(), 1, "backward: loss must be scalar, got {:?}", nodes[loss.0].value.shape());
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(nodes[loss.0].value.shape().to_vec(), vec![1.0]).unwrap());

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(nodes, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, nodes: &[Node], idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let accum = |grads: &mut [Option<Tensor>], id: NodeId, f: &mut dyn FnMut(&mut Tensor)| {
            let slot = &mut grads[id.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(nodes[id.0].value.shape().to_vec()));
            }
            f(slot.as_mut().unwrap());
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                accum(grads, *a, &mut |da| mm_nt(g.data(), m, n, bv.data(), k, da.data_mut(), true));
                accum(grads, *b, &mut |db| mm_tn(av.data(), k, m, g.data(), n, db.data_mut(), true));
            }
            Op::Add { a, b } => {
                accum(grads, *a, &mut |da| {
                    for (d, gi) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                });
                accum(grads, *b, &mut |db| {
                    for (d, gi) in db.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = nodes[a.0].value.data().to_vec();
                let bv = nodes[b.0].value.data().to_vec();
                accum(grads, *a, &mut |da| {
                    for ((d, gi), bi) in da.data_mut().iter_mut().zip(g.data()).zip(&bv) {
                        *d += gi * bi;
                    }
                });
                accum(grads, *b, &mut |db| {
                    for ((d, gi), ai) in db.data_mut().iter_mut().zip(g.data()).zip(&av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                accum(grads, *x, &mut |dx| {
                    for (d, gi) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gi * c;
                    }
                });
            }
            Op::Tanh { x } => {
                let y = nodes[idx].value.data();
                accum(grads, *x, &mut |dx| {
                    for ((d, gi), yi) in dx.data_mut().iter_mut().zip(g.data()).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = nodes[idx].value.data();
                accum(grads, *x, &mut |dx| {
                    for ((d, gi), yi) in dx.data_mut().iter_mut().zip(g.data()).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let rows = nodes[idx].value.rows();
                let total = nodes[idx].value.cols();
                let mut off = 0;
                for (id, w) in parts {
                    let w = *w;
                    let start = off;
                    accum(grads, *id, &mut |dp| {
                        let dpc = dp.cols();
                        for r in 0..rows {
                            let src = &g.data()[r * total + start..r * total + start + w];
                            for (d, s) in dp.data_mut()[r * dpc..(r + 1) * dpc].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Row { x, i } => {
                let i = *i;
                accum(grads, *x, &mut |dx| {
                    let n = dx.cols();
                    for (d, gi) in dx.data_mut()[i * n..(i + 1) * n].iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                });
            }
            Op::MeanRows { x } => {
                let m = nodes[x.0].value.rows();
                accum(grads, *x, &mut |dx| {
                    let n = dx.cols();
                    for r in 0..m {
                        for (d, gi) in dx.data_mut()[r * n..(r + 1) * n].iter_mut().zip(g.data()) {
                            *d += gi / m as f64;
                        }
                    }
                });
            }
            Op::MeanWindow { x, ps } => {
                let ps = *ps;
                let out_rows = nodes[idx].value.rows();
                let n = nodes[idx].value.cols();
                accum(grads, *x, &mut |dx| {
                    for i in 0..out_rows {
                        let src = &g.data()[i * n..(i + 1) * n];
                        for k in 0..ps {
                            let r = i + k;
                            for (d, s) in dx.data_mut()[r * n..(r + 1) * n].iter_mut().zip(src) {
                                *d += s / ps as f64;
                            }
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let gi = g.item();
                accum(grads, *x, &mut |dx| {
                    for d in dx.data_mut() {
                        *d += gi;
                    }
                });
            }
            Op::Cosine { a, b } => {
                let av = nodes[a.0].value.data().to_vec();
                let bv = nodes[b.0].value.data().to_vec();
                let (c, na, nb) = cosine_raw(&av, &bv);
                let gi = g.item();
                accum(grads, *a, &mut |da| cosine_backward_into(gi, c, &av, &bv, na, nb, da.data_mut()));
                accum(grads, *b, &mut |db| cosine_backward_into(gi, c, &bv, &av, nb, na, db.data_mut()));
            }
            Op::CosineMatrix { a, b } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (m, n, d) = (av.rows(), bv.rows(), av.cols());
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let gi = g.data()[i * n + j];
                        if gi == 0.0 {
                            continue;
                        }
                        let (c, na, nb) = cosine_raw(av.row(i), bv.row(j));
                        cosine_backward_into(gi, c, av.row(i), bv.row(j), na, nb, &mut da[i * d..(i + 1) * d]);
                        cosine_backward_into(gi, c, bv.row(j), av.row(i), nb, na, &mut db[j * d..(j + 1) * d]);
                    }
                }
                accum(grads, *a, &mut |dst| {
                    for (x, y) in dst.data_mut().iter_mut().zip(&da) {
                        *x += y;
                    }
                });
                accum(grads, *b, &mut |dst| {
                    for (x, y) in dst.data_mut().iter_mut().zip(&db) {
                        *x += y;
                    }
                });
            }
            Op::Attentive { alpha, target } => {
                let av = &nodes[alpha.0].value;
                let tv = &nodes[target.0].value;
                let out = &nodes[idx].value;
                let (m, n, d) = (av.rows(), tv.rows(), tv.cols());
                let mut dalpha = vec![0.0; m * n];
                let mut dtarget = vec![0.0; n * d];
                for i in 0..m {
                    let gi = &g.data()[i * d..(i + 1) * d];
                    let w = av.row(i);
                    let denom: f64 = w.iter().sum();
                    if denom.abs() < ATTENTIVE_EPS {
                        // Fallback branch: constant uniform weights.
                        for j in 0..n {
                            for (dt, gv) in dtarget[j * d..(j + 1) * d].iter_mut().zip(gi) {
                                *dt += gv / n as f64;
                            }
                        }
                    } else {
                        let oi = out.row(i);
                        for j in 0..n {
                            let tj = tv.row(j);
                            let mut dot = 0.0;
                            for ((gv, tvj), ov) in gi.iter().zip(tj).zip(oi) {
                                dot += gv * (tvj - ov);
                            }
                            dalpha[i * n + j] += dot / denom;
                            let wj = w[j] / denom;
                            for (dt, gv) in dtarget[j * d..(j + 1) * d].iter_mut().zip(gi) {
                                *dt += wj * gv;
                            }
                        }
                    }
                }
                accum(grads, *alpha, &mut |dst| {
                    for (x, y) in dst.data_mut().iter_mut().zip(&dalpha) {
                        *x += y;
                    }
                });
                accum(grads, *target, &mut |dst| {
                    for (x, y) in dst.data_mut().iter_mut().zip(&dtarget) {
                        *x += y;
                    }
                });
            }
            Op::MultiCosine { a, b, w } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let wv = &nodes[w.0].value;
                let (m, d, p) = (av.rows(), av.cols(), wv.rows());
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; m * d];
                let mut dw = vec![0.0; p * d];
                let mut u = vec![0.0; d];
                let mut v = vec![0.0; d];
                let mut du = vec![0.0; d];
                let mut dv = vec![0.0; d];
                for i in 0..m {
                    let ai = av.row(i);
                    let bi = bv.row(i);
                    for k in 0..p {
                        let gi = g.data()[i * p + k];
                        if gi == 0.0 {
                            continue;
                        }
                        let wk = wv.row(k);
                        for x in 0..d {
                            u[x] = ai[x] * wk[x];
                            v[x] = bi[x] * wk[x];
                        }
                        let (c, nu, nv) = cosine_raw(&u, &v);
                        du.iter_mut().for_each(|x| *x = 0.0);
                        dv.iter_mut().for_each(|x| *x = 0.0);
                        cosine_backward_into(gi, c, &u, &v, nu, nv, &mut du);
                        cosine_backward_into(gi, c, &v, &u, nv, nu, &mut dv);
                        for x in 0..d {
                            da[i * d + x] += du[x] * wk[x];
                            db[i * d + x] += dv[x] * wk[x];
                            dw[k * d + x] += du[x] * ai[x] + dv[x] * bi[x];
                        }
                    }
                }
                accum(grads, *a, &mut |dst| {
                    for (x, y) in dst.data_mut().iter_mut().zip(&da) {
                        *x += y;
                    }
                });
                accum(grads, *b, &mut |dst| {
                    for (x, y) in dst.data_mut().iter_mut().zip(&db) {
                        *x += y;
                    }
                });
                accum(grads, *w, &mut |dst| {
                    for (x, y) in dst.data_mut().iter_mut().zip(&dw) {
                        *x += y;
                    }
                });
            }
            Op::Dropout { x, mask } => {
                accum(grads, *x, &mut |dx| {
                    for ((d, gi), mi) in dx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *d += gi * mi;
                    }
                });
            }
            Op::Softmax { x } => {
                let y = &nodes[idx].value;
                let (m, n) = (y.rows(), y.cols());
                accum(grads, *x, &mut |dx| {
                    for r in 0..m {
                        let yr = y.row(r);
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yi), gi) in dx.data_mut()[r * n..(r + 1) * n].iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, label } => {
                let lv = &nodes[logits.0].value;
                let row = lv.row(0);
                let mut probs = vec![0.0; row.len()];
                softmax_row(row, &mut probs);
                let gi = g.item();
                let label = *label;
                accum(grads, *logits, &mut |dl| {
                    for (j, (d, p)) in dl.data_mut().iter_mut().zip(&probs).enumerate() {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        *d += gi * (p - onehot);
                    }
                });
            }
            Op::Embed { table, ids } => {
                let d = nodes[idx].value.cols();
                accum(grads, *table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g.data()[r * d..(r + 1) * d];
                        for (dst, s) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                });
            }
            Op::LstmSeq(seq) => {
                self.lstm_backward(nodes, idx, seq, g, grads);
            }
        }
    }

    /// Backprop through time for one fused LSTM direction.
    fn lstm_backward(
        &self,
        nodes: &[Node],
        idx: usize,
        seq: &LstmSeq,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = &nodes[seq.x.0].value;
        let wxv = &nodes[seq.wx.0].value;
        let whv = &nodes[seq.wh.0].value;
        let out = &nodes[idx].value;
        let (len, d) = (xv.rows(), xv.cols());
        let h = whv.rows();

        let order: Vec<usize> =
            if seq.reverse { (0..len).rev().collect() } else { (0..len).collect() };

        // Pre-activation gradients per step, in processing order.
        let mut da_all = vec![0.0; len * 4 * h];
        // Hidden states feeding each step (zero for the first), in processing order.
        let mut h_prev_all = vec![0.0; len * h];
        for (step, &t) in order.iter().enumerate().skip(1) {
            let _ = t;
            let t_prev = order[step - 1];
            h_prev_all[step * h..(step + 1) * h].copy_from_slice(out.row(t_prev));
        }

        let mut dh_carry = vec![0.0; h];
        let mut dc_carry = vec![0.0; h];
        let mut dh = vec![0.0; h];
        for step in (0..len).rev() {
            let t = order[step];
            for j in 0..h {
                dh[j] = g.data()[t * h + j] + dh_carry[j];
            }
            let gates = &seq.gates[step * 4 * h..(step + 1) * 4 * h];
            let tc = &seq.tanh_cell[step * h..(step + 1) * h];
            let c_prev: &[f64] = if step == 0 { &[] } else { &seq.cell[(step - 1) * h..step * h] };
            let da = &mut da_all[step * 4 * h..(step + 1) * 4 * h];
            for j in 0..h {
                let (gi, gf, gg, go) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                let dc = dc_carry[j] + dh[j] * go * (1.0 - tc[j] * tc[j]);
                let cp = if step == 0 { 0.0 } else { c_prev[j] };
                da[j] = dc * gg * gi * (1.0 - gi);
                da[h + j] = dc * cp * gf * (1.0 - gf);
                da[2 * h + j] = dc * gi * (1.0 - gg * gg);
                da[3 * h + j] = dh[j] * tc[j] * go * (1.0 - go);
                dc_carry[j] = dc * gf;
            }
            // dh for the previous step: da . wh^T
            mm_nt(da, 1, 4 * h, whv.data(), h, &mut dh_carry, false);
        }

        let accum = |grads: &mut [Option<Tensor>], id: NodeId, f: &mut dyn FnMut(&mut Tensor)| {
            let slot = &mut grads[id.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(nodes[id.0].value.shape().to_vec()));
            }
            f(slot.as_mut().unwrap());
        };

        // dX rows live at token positions; da_all is in processing order.
        accum(grads, seq.x, &mut |dx| {
            let mut dxp = vec![0.0; len * d];
            mm_nt(&da_all, len, 4 * h, wxv.data(), d, &mut dxp, false);
            for (step, &t) in order.iter().enumerate() {
                for (dst, s) in dx.data_mut()[t * d..(t + 1) * d].iter_mut().zip(&dxp[step * d..(step + 1) * d]) {
                    *dst += s;
                }
            }
        });
        accum(grads, seq.wx, &mut |dwx| {
            // X rows must be reordered to processing order to pair with da_all.
            let mut xp = vec![0.0; len * d];
            for (step, &t) in order.iter().enumerate() {
                xp[step * d..(step + 1) * d].copy_from_slice(xv.row(t));
            }
            mm_tn(&xp, d, len, &da_all, 4 * h, dwx.data_mut(), true);
        });
        accum(grads, seq.wh, &mut |dwh| {
            mm_tn(&h_prev_all, h, len, &da_all, 4 * h, dwh.data_mut(), true);
        });
        accum(grads, seq.b, &mut |db| {
            for step in 0..len {
                for (dst, s) in db.data_mut().iter_mut().zip(&da_all[step * 4 * h..(step + 1) * 4 * h]) {
                    *dst += s;
                }
            }
        });
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
