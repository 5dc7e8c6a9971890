//! Reverse-mode autodiff over a Wengert list.
//!
//! A [`Tape`] owns the forward graph for one loss evaluation: leaves are
//! constants (no gradient) or parameters (gradient accumulated), every other
//! node records the operation that produced it. Creation order is a valid
//! topological order, so the backward pass is a single reverse sweep.
//!
//! A tape is single-owner: build the step's graph, call [`Tape::backward`],
//! throw the tape away. Forward values are checked finite after every
//! primitive; NaN/Inf is an error, not a silent state.

use super::tensor::{dot, Element, Tensor};
use super::{NumericsError, Result};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    #[allow(dead_code)] // test-side introspection of raw node indices
    pub(crate) fn from_raw(index: usize) -> Var {
        Var(index)
    }
}

enum Op<E> {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: E,
    },
    AddRowVec {
        a: usize,
        b: usize,
    },
    MulRowVec {
        a: usize,
        b: usize,
    },
    /// Elementwise product with a fixed (non-differentiated) mask.
    MulMask {
        a: usize,
        mask: Tensor<E>,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    MatMulNT {
        a: usize,
        b: usize,
    },
    LayerNorm {
        a: usize,
        inv_std: Vec<E>,
    },
    Softmax {
        a: usize,
    },
    Gelu {
        a: usize,
        // tanh(u) saved from the forward pass; tanh dominates gelu cost
        tanh_u: Vec<E>,
    },
    MeanAxis {
        a: usize,
        axis: usize,
    },
    L2NormalizeRows {
        a: usize,
        norms: Vec<E>,
    },
    /// Scaled dot-product attention over all heads of one sequence block.
    AttentionCore {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        scale: E,
        weights: Vec<Tensor<E>>,
    },
    GatherRows {
        a: usize,
        idx: Vec<usize>,
    },
    NarrowRows {
        a: usize,
        start: usize,
    },
    ConcatRows {
        inputs: Vec<usize>,
    },
    /// Mean over rows of `logsumexp(row) - row[target]`; stores softmax rows.
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Tensor<E>,
    },
}

struct Node<E> {
    value: Tensor<E>,
    needs_grad: bool,
    op: Op<E>,
}

pub struct Tape<E = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient (inputs, masks, pooling matrices).
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push_unchecked(value, false, Op::Leaf)
    }

    /// Leaf that accumulates a gradient (trainable parameters).
    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.push_unchecked(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_unchecked(&mut self, value: Tensor<E>, needs_grad: bool, op: Op<E>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, opname: &'static str, value: Tensor<E>, needs_grad: bool, op: Op<E>) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NotFinite { op: opname });
        }
        Ok(self.push_unchecked(value, needs_grad, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let mut out = va.clone();
        out.add_scaled(vb, E::one());
        let needs = self.needs(a) || self.needs(b);
        self.push("add", out, needs, Op::Add { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: Var, c: E) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        let needs = self.needs(a);
        self.push("scale", out, needs, Op::Scale { a: a.0, c })
    }

    /// Broadcast-add a `1 x c` row vector to every row (bias add).
    pub fn add_rowvec(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_rowvec",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let mut out = va.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for (o, &x) in row.iter_mut().zip(vb.data()) {
                *o += x;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("add_rowvec", out, needs, Op::AddRowVec { a: a.0, b: b.0 })
    }

    /// Broadcast-multiply every row by a `1 x c` row vector (norm gain).
    pub fn mul_rowvec(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_rowvec",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let mut out = va.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for (o, &x) in row.iter_mut().zip(vb.data()) {
                *o *= x;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("mul_rowvec", out, needs, Op::MulRowVec { a: a.0, b: b.0 })
    }

    /// Elementwise product with a constant mask of identical shape.
    pub fn mul_mask(&mut self, a: Var, mask: Tensor<E>) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != mask.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_mask",
                lhs: va.shape(),
                rhs: mask.shape(),
            });
        }
        let mut out = va.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        let needs = self.needs(a);
        self.push("mul_mask", out, needs, Op::MulMask { a: a.0, mask })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", out, needs, Op::MatMul { a: a.0, b: b.0 })
    }

    /// `A B^T`; used for similarity (Gram) matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul_nt", out, needs, Op::MatMulNT { a: a.0, b: b.0 })
    }

    /// Standardize each row to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: E) -> Result<Var> {
        if eps <= E::zero() {
            return Err(NumericsError::Config("layer_norm eps must be > 0".into()));
        }
        let va = self.value(a);
        let cols = va.cols();
        let n = E::from_f64(cols as f64);
        let mut out = va.clone();
        let mut inv_std = Vec::with_capacity(va.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().copied().sum::<E>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<E>() / n;
            let inv = (var + eps).sqrt().recip();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let needs = self.needs(a);
        self.push("layer_norm", out, needs, Op::LayerNorm { a: a.0, inv_std })
    }

    /// Row-wise softmax (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut out = va.clone();
        for i in 0..out.rows() {
            softmax_row_in_place(out.row_mut(i));
        }
        let needs = self.needs(a);
        self.push("softmax", out, needs, Op::Softmax { a: a.0 })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let c = E::from_f64(GELU_C);
        let ac = E::from_f64(GELU_A);
        let half = E::from_f64(0.5);
        let mut tanh_u = Vec::with_capacity(va.len());
        let mut out = va.clone();
        for x in out.data_mut() {
            let u = c * (*x + ac * *x * *x * *x);
            let t = u.tanh();
            tanh_u.push(t);
            *x = half * *x * (E::one() + t);
        }
        let needs = self.needs(a);
        self.push("gelu", out, needs, Op::Gelu { a: a.0, tanh_u })
    }

    /// Mean over the given axis: axis 0 -> `1 x c`, axis 1 -> `r x 1`.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let out = match axis {
            0 => {
                let inv = E::from_f64(1.0 / va.rows() as f64);
                let mut acc = Tensor::zeros(1, va.cols());
                for i in 0..va.rows() {
                    for (o, &x) in acc.data_mut().iter_mut().zip(va.row(i)) {
                        *o += x * inv;
                    }
                }
                acc
            }
            1 => {
                let inv = E::from_f64(1.0 / va.cols() as f64);
                let mut acc = Tensor::zeros(va.rows(), 1);
                for i in 0..va.rows() {
                    acc.set(i, 0, va.row(i).iter().copied().sum::<E>() * inv);
                }
                acc
            }
            _ => {
                return Err(NumericsError::Dimension {
                    op: "mean_axis",
                    detail: format!("axis {axis} out of range for a matrix"),
                })
            }
        };
        let needs = self.needs(a);
        self.push("mean_axis", out, needs, Op::MeanAxis { a: a.0, axis })
    }

    /// Scale every row to unit Euclidean norm; zero rows are an error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut out = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for i in 0..out.rows() {
            let n = out.row_norm(i);
            if n == E::zero() {
                return Err(NumericsError::ZeroNorm {
                    op: "l2_normalize_rows",
                    row: i,
                });
            }
            let inv = n.recip();
            for x in out.row_mut(i) {
                *x *= inv;
            }
            norms.push(n);
        }
        let needs = self.needs(a);
        self.push(
            "l2_normalize_rows",
            out,
            needs,
            Op::L2NormalizeRows { a: a.0, norms },
        )
    }

    /// Multi-head scaled dot-product attention core (no projections):
    /// per head, `softmax(Q_h K_h^T / sqrt(d_h)) V_h`, heads concatenated.
    pub fn attention_core(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let width = vq.cols();
        if heads == 0 || width % heads != 0 {
            return Err(NumericsError::Config(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        if vk.cols() != width || vv.cols() != width || vk.rows() != vv.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "attention_core",
                lhs: vk.shape(),
                rhs: vv.shape(),
            });
        }
        let (lq, lk) = (vq.rows(), vk.rows());
        let hd = width / heads;
        let scale = E::from_f64(1.0 / (hd as f64).sqrt());
        let mut out = Tensor::zeros(lq, width);
        let mut weights = Vec::with_capacity(heads);
        let mut acc = vec![E::zero(); hd];
        for h in 0..heads {
            let cs = h * hd;
            let ce = cs + hd;
            let mut attn = Tensor::zeros(lq, lk);
            for i in 0..lq {
                let qrow = &vq.row(i)[cs..ce];
                let arow = attn.row_mut(i);
                for (j, s) in arow.iter_mut().enumerate() {
                    *s = dot(qrow, &vk.row(j)[cs..ce]) * scale;
                }
                softmax_row_in_place(arow);
            }
            for i in 0..lq {
                let arow = attn.row(i);
                acc.iter_mut().for_each(|v| *v = E::zero());
                for (j, &w) in arow.iter().enumerate() {
                    for (o, &x) in acc.iter_mut().zip(&vv.row(j)[cs..ce]) {
                        *o += w * x;
                    }
                }
                out.row_mut(i)[cs..ce].copy_from_slice(&acc);
            }
            weights.push(attn);
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            "attention_core",
            out,
            needs,
            Op::AttentionCore {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                scale,
                weights,
            },
        )
    }

    /// Select rows by index (duplicates allowed); gradient scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        if idx.is_empty() {
            return Err(NumericsError::Dimension {
                op: "gather_rows",
                detail: "empty index set".into(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.rows()) {
            return Err(NumericsError::Dimension {
                op: "gather_rows",
                detail: format!("row {bad} out of range ({} rows)", va.rows()),
            });
        }
        let mut out = Tensor::zeros(idx.len(), va.cols());
        for (o, &src) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(va.row(src));
        }
        let needs = self.needs(a);
        self.push("gather_rows", out, needs, Op::GatherRows { a: a.0, idx })
    }

    /// Contiguous row slice `[start, start + len)`.
    pub fn narrow_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if len == 0 || start + len > va.rows() {
            return Err(NumericsError::Dimension {
                op: "narrow_rows",
                detail: format!(
                    "slice [{start}, {}) out of range ({} rows)",
                    start + len,
                    va.rows()
                ),
            });
        }
        let mut out = Tensor::zeros(len, va.cols());
        for i in 0..len {
            out.row_mut(i).copy_from_slice(va.row(start + i));
        }
        let needs = self.needs(a);
        self.push("narrow_rows", out, needs, Op::NarrowRows { a: a.0, start })
    }

    /// Stack inputs vertically; an input var may repeat.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(NumericsError::Dimension {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        }
        let cols = self.value(inputs[0]).cols();
        let mut rows = 0;
        for &v in inputs {
            let t = self.value(v);
            if t.cols() != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: [rows, cols],
                    rhs: t.shape(),
                });
            }
            rows += t.rows();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &v in inputs {
            let t = self.value(v);
            for i in 0..t.rows() {
                out.row_mut(at).copy_from_slice(t.row(i));
                at += 1;
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            "concat_rows",
            out,
            needs,
            Op::ConcatRows {
                inputs: inputs.iter().map(|v| v.0).collect(),
            },
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`, as one stable fused
    /// op. Targets index columns; every contrastive loss reduces to this.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let vl = self.value(logits);
        if targets.len() != vl.rows() {
            return Err(NumericsError::Dimension {
                op: "softmax_cross_entropy",
                detail: format!("{} targets for {} rows", targets.len(), vl.rows()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vl.cols()) {
            return Err(NumericsError::Dimension {
                op: "softmax_cross_entropy",
                detail: format!("target column {bad} out of range ({} cols)", vl.cols()),
            });
        }
        let mut probs = vl.clone();
        let mut total = E::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(i);
            let max = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut z = E::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            let inv = z.recip();
            for x in row.iter_mut() {
                *x *= inv;
            }
            total += -(row[t].ln());
        }
        let mean = total / E::from_f64(targets.len() as f64);
        let needs = self.needs(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(mean),
            needs,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                targets,
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per reachable
    /// leaf; constants and unreachable parameters have no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(NumericsError::Dimension {
                op: "backward",
                detail: format!("loss must be 1x1, got {:?}", lv.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(E::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || grads[idx].is_none() {
                continue;
            }
            // Leaves keep their accumulated gradient; interior nodes hand
            // theirs down and release the buffer.
            let g = match node.op {
                Op::Leaf => continue,
                _ => grads[idx].take().expect("checked above"),
            };
            self.backprop_one(idx, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_one(&self, idx: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accum(grads, *a, |dst| dst.add_scaled(g, E::one()));
                self.accum(grads, *b, |dst| dst.add_scaled(g, E::one()));
            }
            Op::Scale { a, c } => {
                self.accum(grads, *a, |dst| dst.add_scaled(g, *c));
            }
            Op::AddRowVec { a, b } => {
                self.accum(grads, *a, |dst| dst.add_scaled(g, E::one()));
                self.accum(grads, *b, |dst| {
                    for i in 0..g.rows() {
                        for (o, &x) in dst.data_mut().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::MulRowVec { a, b } => {
                let vb = self.value(Var(*b));
                self.accum(grads, *a, |dst| {
                    for i in 0..g.rows() {
                        let gr = g.row(i);
                        let dr = dst.row_mut(i);
                        for ((o, &gx), &bx) in dr.iter_mut().zip(gr).zip(vb.data()) {
                            *o += gx * bx;
                        }
                    }
                });
                let va = self.value(Var(*a));
                self.accum(grads, *b, |dst| {
                    for i in 0..g.rows() {
                        let gr = g.row(i);
                        let ar = va.row(i);
                        for ((o, &gx), &ax) in dst.data_mut().iter_mut().zip(gr).zip(ar) {
                            *o += gx * ax;
                        }
                    }
                });
            }
            Op::MulMask { a, mask } => {
                self.accum(grads, *a, |dst| {
                    for ((o, &gx), &m) in dst.data_mut().iter_mut().zip(g.data()).zip(mask.data())
                    {
                        *o += gx * m;
                    }
                });
            }
            Op::MatMul { a, b } => {
                if self.nodes[*a].needs_grad {
                    let da = g.matmul_nt(self.value(Var(*b))).expect("shape ok");
                    self.accum(grads, *a, |dst| dst.add_scaled(&da, E::one()));
                }
                if self.nodes[*b].needs_grad {
                    let db = self.value(Var(*a)).matmul_tn(g).expect("shape ok");
                    self.accum(grads, *b, |dst| dst.add_scaled(&db, E::one()));
                }
            }
            Op::MatMulNT { a, b } => {
                if self.nodes[*a].needs_grad {
                    let da = g.matmul(self.value(Var(*b))).expect("shape ok");
                    self.accum(grads, *a, |dst| dst.add_scaled(&da, E::one()));
                }
                if self.nodes[*b].needs_grad {
                    let db = g.matmul_tn(self.value(Var(*a))).expect("shape ok");
                    self.accum(grads, *b, |dst| dst.add_scaled(&db, E::one()));
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let y = &node.value;
                let n = E::from_f64(y.cols() as f64);
                self.accum(grads, *a, |dst| {
                    for (i, &inv) in inv_std.iter().enumerate() {
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let gmean = gr.iter().copied().sum::<E>() / n;
                        let gymean = dot(gr, yr) / n;
                        for ((o, &gx), &yx) in dst.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *o += inv * (gx - gmean - yx * gymean);
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let y = &node.value;
                self.accum(grads, *a, |dst| {
                    for i in 0..y.rows() {
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let gy = dot(gr, yr);
                        for ((o, &gx), &yx) in dst.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *o += yx * (gx - gy);
                        }
                    }
                });
            }
            Op::Gelu { a, tanh_u } => {
                let x = self.value(Var(*a));
                let c = E::from_f64(GELU_C);
                let ac = E::from_f64(GELU_A);
                let half = E::from_f64(0.5);
                let three = E::from_f64(3.0);
                self.accum(grads, *a, |dst| {
                    for (((o, &gx), &xv), &t) in dst
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(x.data())
                        .zip(tanh_u)
                    {
                        let sech2 = E::one() - t * t;
                        let d = half * (E::one() + t)
                            + half * xv * sech2 * c * (E::one() + three * ac * xv * xv);
                        *o += gx * d;
                    }
                });
            }
            Op::MeanAxis { a, axis } => {
                let va = self.value(Var(*a));
                if *axis == 0 {
                    let inv = E::from_f64(1.0 / va.rows() as f64);
                    self.accum(grads, *a, |dst| {
                        for i in 0..va.rows() {
                            for (o, &gx) in dst.row_mut(i).iter_mut().zip(g.data()) {
                                *o += gx * inv;
                            }
                        }
                    });
                } else {
                    let inv = E::from_f64(1.0 / va.cols() as f64);
                    self.accum(grads, *a, |dst| {
                        for i in 0..va.rows() {
                            let gi = g.get(i, 0) * inv;
                            for o in dst.row_mut(i) {
                                *o += gi;
                            }
                        }
                    });
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                let y = &node.value;
                self.accum(grads, *a, |dst| {
                    for (i, norm) in norms.iter().enumerate() {
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let gy = dot(gr, yr);
                        let inv = norm.recip();
                        for ((o, &gx), &yx) in dst.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *o += (gx - yx * gy) * inv;
                        }
                    }
                });
            }
            Op::AttentionCore {
                q,
                k,
                v,
                heads,
                scale,
                weights,
            } => {
                let (vq, vk, vv) = (self.value(Var(*q)), self.value(Var(*k)), self.value(Var(*v)));
                let (lq, lk) = (vq.rows(), vk.rows());
                let hd = vq.cols() / heads;
                let mut dq = Tensor::zeros(lq, vq.cols());
                let mut dk = Tensor::zeros(lk, vk.cols());
                let mut dv = Tensor::zeros(lk, vv.cols());
                for (h, attn) in weights.iter().enumerate() {
                    let cs = h * hd;
                    let ce = cs + hd;
                    // dV_h = A^T dO_h ; dA = dO_h V_h^T
                    let mut dattn = Tensor::zeros(lq, lk);
                    for i in 0..lq {
                        let go = &g.row(i)[cs..ce];
                        let ar = attn.row(i);
                        let dar = dattn.row_mut(i);
                        for (j, dv) in dar.iter_mut().enumerate() {
                            *dv = dot(go, &vv.row(j)[cs..ce]);
                        }
                        for (j, &w) in ar.iter().enumerate() {
                            for (o, &gx) in dv.row_mut(j)[cs..ce].iter_mut().zip(go) {
                                *o += w * gx;
                            }
                        }
                    }
                    // dS = A o (dA - rowsum(dA o A)); dQ_h += dS K_h * scale;
                    // dK_h += dS^T Q_h * scale
                    for i in 0..lq {
                        let ar = attn.row(i);
                        let dar = dattn.row_mut(i);
                        let s = dot(dar, ar);
                        for (d, &w) in dar.iter_mut().zip(ar) {
                            *d = w * (*d - s);
                        }
                        let dqrow = &mut dq.row_mut(i)[cs..ce];
                        for (j, &ds) in dar.iter().enumerate() {
                            let coeff = ds * *scale;
                            let krow = &vk.row(j)[cs..ce];
                            for (o, &kx) in dqrow.iter_mut().zip(krow) {
                                *o += coeff * kx;
                            }
                            let qrow = &vq.row(i)[cs..ce];
                            for (o, &qx) in dk.row_mut(j)[cs..ce].iter_mut().zip(qrow) {
                                *o += coeff * qx;
                            }
                        }
                    }
                }
                self.accum(grads, *q, |dst| dst.add_scaled(&dq, E::one()));
                self.accum(grads, *k, |dst| dst.add_scaled(&dk, E::one()));
                self.accum(grads, *v, |dst| dst.add_scaled(&dv, E::one()));
            }
            Op::GatherRows { a, idx } => {
                self.accum(grads, *a, |dst| {
                    for (o, &src) in idx.iter().enumerate() {
                        let gr = g.row(o);
                        for (d, &gx) in dst.row_mut(src).iter_mut().zip(gr) {
                            *d += gx;
                        }
                    }
                });
            }
            Op::NarrowRows { a, start } => {
                self.accum(grads, *a, |dst| {
                    for i in 0..g.rows() {
                        for (d, &gx) in dst.row_mut(start + i).iter_mut().zip(g.row(i)) {
                            *d += gx;
                        }
                    }
                });
            }
            Op::ConcatRows { inputs } => {
                let mut at = 0;
                for &src in inputs {
                    let rows = self.nodes[src].value.rows();
                    let offset = at;
                    self.accum(grads, src, |dst| {
                        for i in 0..rows {
                            for (d, &gx) in dst.row_mut(i).iter_mut().zip(g.row(offset + i)) {
                                *d += gx;
                            }
                        }
                    });
                    at += rows;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let gs = g.item() / E::from_f64(targets.len() as f64);
                self.accum(grads, *logits, |dst| {
                    for (i, &t) in targets.iter().enumerate() {
                        let pr = probs.row(i);
                        let dr = dst.row_mut(i);
                        for (d, &p) in dr.iter_mut().zip(pr) {
                            *d += p * gs;
                        }
                        dr[t] -= gs;
                    }
                });
            }
        }
    }

    fn accum(
        &self,
        grads: &mut [Option<Tensor<E>>],
        target: usize,
        apply: impl FnOnce(&mut Tensor<E>),
    ) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let shape = self.nodes[target].value.shape();
        let slot = grads[target].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
        apply(slot);
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients<E = f32> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the loss w.r.t. `v`; `None` for constants and for
    /// parameters the loss never touched.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn softmax_row_in_place<E: Element>(row: &mut [E]) {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut z = E::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    let inv = z.recip();
    for x in row.iter_mut() {
        *x *= inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
