//! Reverse-mode autodiff on a flat tape of matrix operations.
//!
//! Each training sample builds its own tape, so forward passes on a frozen
//! parameter set can run on multiple threads without shared state. Gradients
//! accumulate into a [`GradStore`] whose slots mirror the [`ParamStore`].

use crate::math::{self, Matrix};
use std::collections::HashMap;

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Every parameter has exactly one gradient slot of
/// matching shape in any [`GradStore`] built from the same store.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a tensor under a unique name.
    pub fn register(&mut self, name: &str, tensor: Matrix) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total number of scalar coordinates across all tensors.
    pub fn coord_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradient accumulators, shape-matched to a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Matrix>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        GradStore {
            grads: params
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows, t.cols))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn accumulate(&mut self, other: &GradStore) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            a.add_in_place(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn zero(&mut self) {
        for g in self.grads.iter_mut() {
            g.data.fill(0.0);
        }
    }
}

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Geometry of a strided valid convolution (no padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dMeta {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Conv2dMeta {
    pub fn new(c_in: usize, h_in: usize, w_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        assert!(h_in >= kernel && w_in >= kernel, "kernel larger than input");
        let h_out = (h_in - kernel) / stride + 1;
        let w_out = (w_in - kernel) / stride + 1;
        Conv2dMeta {
            c_in,
            h_in,
            w_in,
            c_out,
            kernel,
            stride,
            h_out,
            w_out,
        }
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast-add a 1 x c row to every row of a.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Broadcast-multiply every row of a by a 1 x c row.
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    SoftmaxRows(NodeId, Option<Vec<bool>>),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        eps: f64,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        meta: Conv2dMeta,
    },
    SumAll(NodeId),
    L1Loss {
        pred: NodeId,
        target: Matrix,
    },
    /// KL(N(mu, diag exp(logvar)) || N(0, I)), summed over dimensions.
    KlStdNormal {
        mu: NodeId,
        logvar: NodeId,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// A forward tape. Build values with the op methods, then call
/// [`Tape::backward`] on a scalar node to accumulate parameter gradients.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.rows
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.cols
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Parameter leaf; gradients accumulate into its store slot.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = math::matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape mismatch");
        let mut v = va.clone();
        v.add_in_place(vb);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1, "add_row expects a 1 x c row");
        assert_eq!(va.cols, vr.cols, "add_row width mismatch");
        let mut v = va.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += vr.data[c];
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "mul shape mismatch");
        let data = va
            .data
            .iter()
            .zip(vb.data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let v = Matrix::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1, "mul_row expects a 1 x c row");
        assert_eq!(va.cols, vr.cols, "mul_row width mismatch");
        let mut v = va.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] *= vr.data[c];
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scaled(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> NodeId {
        let v = math::softmax_rows(self.value(a), mask.as_deref());
        self.push(v, Op::SoftmaxRows(a, mask))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId, eps: f64) -> NodeId {
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let (vx, vg, vs) = (self.value(x), self.value(gain), self.value(shift));
        assert_eq!(vg.rows, 1, "gain must be 1 x c");
        assert_eq!(vs.rows, 1, "shift must be 1 x c");
        assert_eq!(vx.cols, vg.cols, "gain width mismatch");
        assert_eq!(vx.cols, vs.cols, "shift width mismatch");
        let mut v = Matrix::zeros(vx.rows, vx.cols);
        let n = vx.cols as f64;
        for r in 0..vx.rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            let orow = v.row_mut(r);
            for c in 0..row.len() {
                orow[c] = (row[c] - mean) * inv * vg.data[c] + vs.data[c];
            }
        }
        self.push(v, Op::LayerNorm { x, gain, shift, eps })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Matrix {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|x| x.max(0.0)).collect(),
        };
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Matrix {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        };
        self.push(v, Op::Sigmoid(a))
    }

    /// x * sigmoid(x): smooth gating nonlinearity (composition of existing ops).
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Matrix {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|x| x.exp()).collect(),
        };
        self.push(v, Op::Exp(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.cols(parts[0]);
        let rows: usize = parts.iter().map(|&p| self.rows(p)).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut r0 = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols, cols, "concat_rows width mismatch");
            v.data[r0 * cols..(r0 + vp.rows) * cols].copy_from_slice(&vp.data);
            r0 += vp.rows;
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.rows, "slice_rows out of range");
        let v = Matrix::from_vec(
            len,
            va.cols,
            va.data[start * va.cols..(start + len) * va.cols].to_vec(),
        );
        self.push(v, Op::SliceRows(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.rows(parts[0]);
        let cols: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                v.data[r * cols + c0..r * cols + c0 + vp.cols].copy_from_slice(vp.row(r));
            }
            c0 += vp.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.cols, "slice_cols out of range");
        let mut v = Matrix::zeros(va.rows, len);
        for r in 0..va.rows {
            v.row_mut(r)
                .copy_from_slice(&va.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start, len))
    }

    /// Valid strided convolution. `input` is (c_in, h_in*w_in), `weight` is
    /// (c_out, c_in*k*k), `bias` is (1, c_out); output is (c_out, h_out*w_out).
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, meta: Conv2dMeta) -> NodeId {
        let (vi, vw, vb) = (self.value(input), self.value(weight), self.value(bias));
        assert_eq!(vi.rows, meta.c_in, "conv input channel mismatch");
        assert_eq!(vi.cols, meta.h_in * meta.w_in, "conv input size mismatch");
        assert_eq!(vw.rows, meta.c_out, "conv weight c_out mismatch");
        assert_eq!(
            vw.cols,
            meta.c_in * meta.kernel * meta.kernel,
            "conv weight size mismatch"
        );
        assert_eq!((vb.rows, vb.cols), (1, meta.c_out), "conv bias shape");
        let v = conv2d_forward(vi, vw, vb, &meta);
        self.push(v, Op::Conv2d { input, weight, bias, meta })
    }

    /// Mean absolute error against a constant target; returns a 1 x 1 node.
    pub fn l1_loss(&mut self, pred: NodeId, target: Matrix) -> NodeId {
        let vp = self.value(pred);
        assert_eq!(
            (vp.rows, vp.cols),
            (target.rows, target.cols),
            "l1_loss shape mismatch"
        );
        let n = vp.len() as f64;
        let sum: f64 = vp
            .data
            .iter()
            .zip(target.data.iter())
            .map(|(p, t)| (p - t).abs())
            .sum();
        self.push(
            Matrix::from_vec(1, 1, vec![sum / n]),
            Op::L1Loss { pred, target },
        )
    }

    /// 0.5 * sum(exp(logvar) + mu^2 - 1 - logvar); returns a 1 x 1 node.
    pub fn kl_std_normal(&mut self, mu: NodeId, logvar: NodeId) -> NodeId {
        let (vm, vl) = (self.value(mu), self.value(logvar));
        assert_eq!(
            (vm.rows, vm.cols),
            (vl.rows, vl.cols),
            "kl shape mismatch"
        );
        let kl: f64 = vm
            .data
            .iter()
            .zip(vl.data.iter())
            .map(|(m, l)| 0.5 * (l.exp() + m * m - 1.0 - l))
            .sum();
        self.push(Matrix::from_vec(1, 1, vec![kl]), Op::KlStdNormal { mu, logvar })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumAll(a))
    }

    /// Backpropagate from a scalar node, accumulating parameter gradients.
    pub fn backward(&self, loss: NodeId, grads: &mut GradStore) {
        let vl = self.value(loss);
        assert_eq!((vl.rows, vl.cols), (1, 1), "backward expects a scalar node");
        let mut node_grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for i in (0..self.nodes.len()).rev() {
            let g = match node_grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(pid) => {
                    grads.get_mut(*pid).add_in_place(&g);
                }
                Op::MatMul(a, b) => {
                    let da = math::matmul_nt(&g, &self.nodes[b.0].value);
                    let db = math::matmul_tn(&self.nodes[a.0].value, &g);
                    accum(&mut node_grads, *a, da);
                    accum(&mut node_grads, *b, db);
                }
                Op::Add(a, b) => {
                    accum(&mut node_grads, *a, g.clone());
                    accum(&mut node_grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            dr.data[c] += g.data[r * g.cols + c];
                        }
                    }
                    accum(&mut node_grads, *a, g);
                    accum(&mut node_grads, *row, dr);
                }
                Op::Mul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let da = elementwise(&g, vb);
                    let db = elementwise(&g, va);
                    accum(&mut node_grads, *a, da);
                    accum(&mut node_grads, *b, db);
                }
                Op::MulRow(a, row) => {
                    let va = &self.nodes[a.0].value;
                    let vr = &self.nodes[row.0].value;
                    let mut da = g.clone();
                    for r in 0..da.rows {
                        for c in 0..da.cols {
                            da.data[r * da.cols + c] *= vr.data[c];
                        }
                    }
                    let mut dr = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            dr.data[c] += g.data[r * g.cols + c] * va.data[r * g.cols + c];
                        }
                    }
                    accum(&mut node_grads, *a, da);
                    accum(&mut node_grads, *row, dr);
                }
                Op::Scale(a, s) => {
                    accum(&mut node_grads, *a, g.scaled(*s));
                }
                Op::Transpose(a) => {
                    accum(&mut node_grads, *a, g.transpose());
                }
                Op::SoftmaxRows(a, _mask) => {
                    let y = &self.nodes[i].value;
                    let mut da = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                        let dr = da.row_mut(r);
                        for c in 0..yr.len() {
                            dr[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accum(&mut node_grads, *a, da);
                }
                Op::LayerNorm { x, gain, shift, eps } => {
                    let vx = &self.nodes[x.0].value;
                    let vg = &self.nodes[gain.0].value;
                    let n = vx.cols as f64;
                    let mut dx = Matrix::zeros(vx.rows, vx.cols);
                    let mut dgain = Matrix::zeros(1, vx.cols);
                    let mut dshift = Matrix::zeros(1, vx.cols);
                    for r in 0..vx.rows {
                        let row = vx.row(r);
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = g.row(r);
                        // dxhat, plus gain/shift grads
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0; row.len()];
                        for c in 0..row.len() {
                            let xhat = (row[c] - mean) * inv;
                            dgain.data[c] += gr[c] * xhat;
                            dshift.data[c] += gr[c];
                            let d = gr[c] * vg.data[c];
                            dxhat[c] = d;
                            mean_dxhat += d;
                            mean_dxhat_xhat += d * xhat;
                        }
                        mean_dxhat /= n;
                        mean_dxhat_xhat /= n;
                        let dr = dx.row_mut(r);
                        for c in 0..row.len() {
                            let xhat = (row[c] - mean) * inv;
                            dr[c] = (dxhat[c] - mean_dxhat - xhat * mean_dxhat_xhat) * inv;
                        }
                    }
                    accum(&mut node_grads, *x, dx);
                    accum(&mut node_grads, *gain, dgain);
                    accum(&mut node_grads, *shift, dshift);
                }
                Op::Relu(a) => {
                    let va = &self.nodes[a.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(va.data.iter())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accum(
                        &mut node_grads,
                        *a,
                        Matrix::from_vec(g.rows, g.cols, data),
                    );
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let data = g
                        .data
                        .iter()
                        .zip(y.data.iter())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    accum(
                        &mut node_grads,
                        *a,
                        Matrix::from_vec(g.rows, g.cols, data),
                    );
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    let data = g
                        .data
                        .iter()
                        .zip(y.data.iter())
                        .map(|(g, y)| g * y)
                        .collect();
                    accum(
                        &mut node_grads,
                        *a,
                        Matrix::from_vec(g.rows, g.cols, data),
                    );
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let rows = self.nodes[p.0].value.rows;
                        let part = Matrix::from_vec(
                            rows,
                            g.cols,
                            g.data[r0 * g.cols..(r0 + rows) * g.cols].to_vec(),
                        );
                        accum(&mut node_grads, p, part);
                        r0 += rows;
                    }
                }
                Op::SliceRows(a, start, _len) => {
                    let va = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    da.data[start * va.cols..(start + g.rows) * va.cols]
                        .copy_from_slice(&g.data);
                    accum(&mut node_grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let cols = self.nodes[p.0].value.cols;
                        let mut part = Matrix::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            part.row_mut(r)
                                .copy_from_slice(&g.row(r)[c0..c0 + cols]);
                        }
                        accum(&mut node_grads, p, part);
                        c0 += cols;
                    }
                }
                Op::SliceCols(a, start, _len) => {
                    let va = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    for r in 0..g.rows {
                        da.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accum(&mut node_grads, *a, da);
                }
                Op::Conv2d { input, weight, bias, meta } => {
                    let vi = &self.nodes[input.0].value;
                    let vw = &self.nodes[weight.0].value;
                    let (di, dw, db) = conv2d_backward(vi, vw, &g, meta);
                    accum(&mut node_grads, *input, di);
                    accum(&mut node_grads, *weight, dw);
                    accum(&mut node_grads, *bias, db);
                }
                Op::SumAll(a) => {
                    let va = &self.nodes[a.0].value;
                    let da = Matrix {
                        rows: va.rows,
                        cols: va.cols,
                        data: vec![g.data[0]; va.len()],
                    };
                    accum(&mut node_grads, *a, da);
                }
                Op::L1Loss { pred, target } => {
                    let vp = &self.nodes[pred.0].value;
                    let scale = g.data[0] / vp.len() as f64;
                    let data = vp
                        .data
                        .iter()
                        .zip(target.data.iter())
                        .map(|(p, t)| {
                            let d = p - t;
                            if d > 0.0 {
                                scale
                            } else if d < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accum(
                        &mut node_grads,
                        *pred,
                        Matrix::from_vec(vp.rows, vp.cols, data),
                    );
                }
                Op::KlStdNormal { mu, logvar } => {
                    let vm = &self.nodes[mu.0].value;
                    let vl = &self.nodes[logvar.0].value;
                    let s = g.data[0];
                    let dmu = Matrix {
                        rows: vm.rows,
                        cols: vm.cols,
                        data: vm.data.iter().map(|m| s * m).collect(),
                    };
                    let dlv = Matrix {
                        rows: vl.rows,
                        cols: vl.cols,
                        data: vl.data.iter().map(|l| s * 0.5 * (l.exp() - 1.0)).collect(),
                    };
                    accum(&mut node_grads, *mu, dmu);
                    accum(&mut node_grads, *logvar, dlv);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accum(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_in_place(&g),
        slot => *slot = Some(g),
    }
}

fn elementwise(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| x * y)
            .collect(),
    }
}

fn conv2d_forward(input: &Matrix, weight: &Matrix, bias: &Matrix, m: &Conv2dMeta) -> Matrix {
    let mut out = Matrix::zeros(m.c_out, m.h_out * m.w_out);
    for o in 0..m.c_out {
        let wrow = weight.row(o);
        let b = bias.data[o];
        let orow = out.row_mut(o);
        for oy in 0..m.h_out {
            for ox in 0..m.w_out {
                let mut acc = b;
                let iy0 = oy * m.stride;
                let ix0 = ox * m.stride;
                for c in 0..m.c_in {
                    let irow = input.row(c);
                    for ky in 0..m.kernel {
                        let ibase = (iy0 + ky) * m.w_in + ix0;
                        let wbase = c * m.kernel * m.kernel + ky * m.kernel;
                        for kx in 0..m.kernel {
                            acc += wrow[wbase + kx] * irow[ibase + kx];
                        }
                    }
                }
                orow[oy * m.w_out + ox] = acc;
            }
        }
    }
    out
}

fn conv2d_backward(
    input: &Matrix,
    weight: &Matrix,
    g: &Matrix,
    m: &Conv2dMeta,
) -> (Matrix, Matrix, Matrix) {
    let mut di = Matrix::zeros(m.c_in, m.h_in * m.w_in);
    let mut dw = Matrix::zeros(m.c_out, m.c_in * m.kernel * m.kernel);
    let mut db = Matrix::zeros(1, m.c_out);
    for o in 0..m.c_out {
        let wrow = weight.row(o);
        let grow = g.row(o);
        for oy in 0..m.h_out {
            for ox in 0..m.w_out {
                let go = grow[oy * m.w_out + ox];
                if go == 0.0 {
                    continue;
                }
                db.data[o] += go;
                let iy0 = oy * m.stride;
                let ix0 = ox * m.stride;
                for c in 0..m.c_in {
                    let irow = input.row(c);
                    let dirow_base = c * (m.h_in * m.w_in);
                    for ky in 0..m.kernel {
                        let ibase = (iy0 + ky) * m.w_in + ix0;
                        let wbase = c * m.kernel * m.kernel + ky * m.kernel;
                        for kx in 0..m.kernel {
                            dw.data[o * dw.cols + wbase + kx] += go * irow[ibase + kx];
                            di.data[dirow_base + ibase + kx] += go * wrow[wbase + kx];
                        }
                    }
                }
            }
        }
    }
    (di, dw, db)
}
