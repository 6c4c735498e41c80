//! Define-by-run tape for reverse-mode differentiation.
//!
//! Operations are recorded in topological order during the forward pass;
//! `backward` replays them in reverse, accumulating gradients for every
//! node that requires them — including input leaves that are not
//! parameters, so input gradients can be harvested after the pass.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type VarId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Neg(VarId),
    Exp(VarId),
    Log(VarId),
    Tanh(VarId),
    Softplus(VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    Clamp(VarId, f64, f64),
    Matmul(VarId, VarId),
    /// a [m,k] times b^T where b is [n,k], yielding [m,n].
    MatmulTransB(VarId, VarId),
    /// Broadcast-add a row vector [n] to every row of [m,n].
    AddRow(VarId, VarId),
    ReduceSum(VarId, Vec<usize>),
    SumAll(VarId),
    /// Row-wise softmax over allowed entries; forbidden entries yield 0.
    MaskedSoftmax(VarId),
    /// x, gain, bias; normalization per row.
    LayerNorm(VarId, VarId, VarId),
    SliceCols(VarId, usize, usize),
    ConcatCols(Vec<VarId>),
    ConcatRows(Vec<VarId>),
    GatherRows(VarId, Rc<Vec<usize>>),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
    /// Saved forward results needed by the gradient rule (e.g. softmax probs).
    saved: Option<Vec<f64>>,
}

pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, VarId>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_vars: HashMap::new(), backward_done: false }
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, saved: Option<Vec<f64>>) -> VarId {
        self.nodes.push(Node { value, grad: None, op, requires_grad, saved });
        self.nodes.len() - 1
    }

    fn push_checked(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        saved: Option<Vec<f64>>,
        name: &'static str,
    ) -> Result<VarId> {
        value.check_finite(name)?;
        Ok(self.push(value, op, requires_grad, saved))
    }

    fn rg(&self, id: VarId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor) -> VarId {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg, None)
    }

    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf, false, None)
    }

    /// One leaf per parameter per tape; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> VarId {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let e = store.get(id);
        let t = Tensor { shape: e.shape.clone(), data: e.data.clone(), requires_grad: true };
        let v = self.push(t, Op::Leaf, true, None);
        self.param_vars.insert(id, v);
        v
    }

    /// Gradients of every parameter leaf touched by this tape.
    pub fn param_grads(&self) -> HashMap<ParamId, &[f64]> {
        self.param_vars
            .iter()
            .filter_map(|(&pid, &vid)| self.grad(vid).map(|g| (pid, g)))
            .collect()
    }

    // ── elementwise binary ───────────────────────────────────────────

    fn binary_shapes(&self, op: &'static str, a: VarId, b: VarId) -> Result<Vec<usize>> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape == tb.shape {
            Ok(ta.shape.clone())
        } else if tb.is_scalar() {
            Ok(ta.shape.clone())
        } else if ta.is_scalar() {
            Ok(tb.shape.clone())
        } else {
            Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", ta.shape, tb.shape),
            })
        }
    }

    fn ew2(
        &mut self,
        name: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(f64, f64) -> f64,
        opc: impl Fn(VarId, VarId) -> Op,
    ) -> Result<VarId> {
        let shape = self.binary_shapes(name, a, b)?;
        let (da, db) = (&self.nodes[a].value.data, &self.nodes[b].value.data);
        let n = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = da[i % da.len()];
            let y = db[i % db.len()];
            out.push(f(x, y));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(Tensor { shape, data: out, requires_grad: false }, opc(a, b), rg, None, name)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.ew2("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.ew2("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.ew2("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.nodes[b].value.data.iter().any(|&v| v == 0.0) {
            return Err(Error::Domain { op: "div", detail: "division by zero".into() });
        }
        self.ew2("div", a, b, |x, y| x / y, Op::Div)
    }

    // ── elementwise unary ────────────────────────────────────────────

    fn ew1(
        &mut self,
        name: &'static str,
        a: VarId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<VarId> {
        let t = &self.nodes[a].value;
        let out: Vec<f64> = t.data.iter().map(|&x| f(x)).collect();
        let shape = t.shape.clone();
        let rg = self.rg(a);
        self.push_checked(Tensor { shape, data: out, requires_grad: false }, op, rg, None, name)
    }

    pub fn neg(&mut self, a: VarId) -> Result<VarId> {
        self.ew1("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        self.ew1("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        if self.nodes[a].value.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain { op: "log", detail: "log of non-positive value".into() });
        }
        self.ew1("log", a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        self.ew1("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: VarId) -> Result<VarId> {
        self.ew1("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.ew1("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.ew1("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> Result<VarId> {
        self.ew1("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ── matrix ops ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape, tb.shape),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_raw(&ta.data, &tb.data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(
            Tensor { shape: vec![m, n], data: out, requires_grad: false },
            Op::Matmul(a, b),
            rg,
            None,
            "matmul",
        )
    }

    pub fn matmul_tb(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.cols() != tb.cols() {
            return Err(Error::ShapeMismatch {
                op: "matmul_tb",
                detail: format!("{:?} x {:?}^T", ta.shape, tb.shape),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let out = matmul_tb_raw(&ta.data, &tb.data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(
            Tensor { shape: vec![m, n], data: out, requires_grad: false },
            Op::MatmulTransB(a, b),
            rg,
            None,
            "matmul_tb",
        )
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> Result<VarId> {
        let (ta, tr) = (&self.nodes[a].value, &self.nodes[row].value);
        let n = ta.cols();
        if tr.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                detail: format!("{:?} + row {:?}", ta.shape, tr.shape),
            });
        }
        let m = ta.rows();
        let mut out = ta.data.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += tr.data[j];
            }
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(row);
        self.push_checked(
            Tensor { shape, data: out, requires_grad: false },
            Op::AddRow(a, row),
            rg,
            None,
            "add_row",
        )
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn reduce_sum(&mut self, a: VarId, axes: &[usize]) -> Result<VarId> {
        let t = &self.nodes[a].value;
        let ndim = t.shape.len();
        for &ax in axes {
            if ax >= ndim {
                return Err(Error::Domain {
                    op: "reduce_sum",
                    detail: format!("axis {} out of range for shape {:?}", ax, t.shape),
                });
            }
        }
        let mut axes_sorted = axes.to_vec();
        axes_sorted.sort_unstable();
        axes_sorted.dedup();
        let out_shape: Vec<usize> = t
            .shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes_sorted.contains(i))
            .map(|(_, &e)| e)
            .collect();
        let out_numel: usize = out_shape.iter().product::<usize>().max(1);
        let mut out = vec![0.0; out_numel];
        let shape = t.shape.clone();
        for (flat, &v) in t.data.iter().enumerate() {
            out[reduced_index(flat, &shape, &axes_sorted)] += v;
        }
        let rg = self.rg(a);
        self.push_checked(
            Tensor { shape: out_shape, data: out, requires_grad: false },
            Op::ReduceSum(a, axes_sorted),
            rg,
            None,
            "reduce_sum",
        )
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        let rg = self.rg(a);
        self.push_checked(Tensor::scalar(s), Op::SumAll(a), rg, None, "sum_all")
    }

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        let n = self.nodes[a].value.numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    // ── structured ops ───────────────────────────────────────────────

    /// Row-wise masked softmax over a [m,n] matrix. `mask[i*n+j]` true means
    /// entry (i,j) participates; forbidden entries are exactly zero in the
    /// output. Rows with no allowed entry are all-zero.
    pub fn masked_softmax(&mut self, a: VarId, mask: Rc<Vec<bool>>) -> Result<VarId> {
        let t = &self.nodes[a].value;
        let (m, n) = (t.rows(), t.cols());
        if mask.len() != m * n {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("mask length {} vs {}x{}", mask.len(), m, n),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data[i * n..(i + 1) * n];
            let mrow = &mask[i * n..(i + 1) * n];
            let mut hi = f64::NEG_INFINITY;
            for j in 0..n {
                if mrow[j] && row[j] > hi {
                    hi = row[j];
                }
            }
            if hi == f64::NEG_INFINITY {
                continue; // fully masked row
            }
            let mut z = 0.0;
            for j in 0..n {
                if mrow[j] {
                    let e = (row[j] - hi).exp();
                    out[i * n + j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        let rg = self.rg(a);
        let saved = Some(out.clone());
        self.push_checked(
            Tensor { shape: vec![m, n], data: out, requires_grad: false },
            Op::MaskedSoftmax(a),
            rg,
            saved,
            "masked_softmax",
        )
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId) -> Result<VarId> {
        let t = &self.nodes[x].value;
        let (m, n) = (t.rows(), t.cols());
        let g = &self.nodes[gain].value;
        let b = &self.nodes[bias].value;
        if g.numel() != n || b.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!("x {:?}, gain {:?}, bias {:?}", t.shape, g.shape, b.shape),
            });
        }
        let mut out = vec![0.0; m * n];
        // saved: per-row inv std followed by normalized values
        let mut saved = vec![0.0; m + m * n];
        for i in 0..m {
            let row = &t.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            saved[i] = inv_std;
            for j in 0..n {
                let xh = (row[j] - mean) * inv_std;
                saved[m + i * n + j] = xh;
                out[i * n + j] = g.data[j] * xh + b.data[j];
            }
        }
        let shape = t.shape.clone();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push_checked(
            Tensor { shape, data: out, requires_grad: false },
            Op::LayerNorm(x, gain, bias),
            rg,
            Some(saved),
            "layer_norm",
        )
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let t = &self.nodes[a].value;
        let (m, n) = (t.rows(), t.cols());
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("[{start}, {}) out of {} cols", start + len, n),
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.data[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        self.push_checked(
            Tensor { shape: vec![m, len], data: out, requires_grad: false },
            Op::SliceCols(a, start, len),
            rg,
            None,
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        let m = self.nodes[parts[0]].value.rows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
        for &p in parts {
            if self.nodes[p].value.rows() != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: "row counts differ".into(),
                });
            }
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let t = &self.nodes[p].value;
                let n = t.cols();
                out.extend_from_slice(&t.data[i * n..(i + 1) * n]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push_checked(
            Tensor { shape: vec![m, total], data: out, requires_grad: false },
            Op::ConcatCols(parts.to_vec()),
            rg,
            None,
            "concat_cols",
        )
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        let n = self.nodes[parts[0]].value.cols();
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = &self.nodes[p].value;
            if t.cols() != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    detail: "column counts differ".into(),
                });
            }
            m += t.rows();
            out.extend_from_slice(&t.data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push_checked(
            Tensor { shape: vec![m, n], data: out, requires_grad: false },
            Op::ConcatRows(parts.to_vec()),
            rg,
            None,
            "concat_rows",
        )
    }

    pub fn gather_rows(&mut self, a: VarId, idx: Rc<Vec<usize>>) -> Result<VarId> {
        let t = &self.nodes[a].value;
        let (m, n) = (t.rows(), t.cols());
        for &i in idx.iter() {
            if i >= m {
                return Err(Error::Domain {
                    op: "gather_rows",
                    detail: format!("row index {} out of {}", i, m),
                });
            }
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            out.extend_from_slice(&t.data[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        let rows = idx.len();
        self.push_checked(
            Tensor { shape: vec![rows, n], data: out, requires_grad: false },
            Op::GatherRows(a, idx),
            rg,
            None,
            "gather_rows",
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// node with `requires_grad`. May only be called once per tape.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward called twice on the same tape".into()));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss].value.shape
            )));
        }
        self.backward_done = true;
        self.nodes[loss].grad = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let gout = self.nodes[id].grad.clone().unwrap();
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum_broadcast(a, &gout, 1.0);
                    self.accum_broadcast(b, &gout, 1.0);
                }
                Op::Sub(a, b) => {
                    self.accum_broadcast(a, &gout, 1.0);
                    self.accum_broadcast(b, &gout, -1.0);
                }
                Op::Mul(a, b) => {
                    let gb: Vec<f64> = self.bc_map(&gout, b, a);
                    let ga: Vec<f64> = self.bc_map(&gout, a, b);
                    self.accum_raw(a, &ga);
                    self.accum_raw(b, &gb);
                }
                Op::Div(a, b) => {
                    // d(a/b)/da = 1/b ; d(a/b)/db = -a/b^2
                    let (da, db) = {
                        let ta = &self.nodes[a].value.data;
                        let tb = &self.nodes[b].value.data;
                        let mut ga = vec![0.0; ta.len()];
                        let mut gb = vec![0.0; tb.len()];
                        for (i, &g) in gout.iter().enumerate() {
                            let x = ta[i % ta.len()];
                            let y = tb[i % tb.len()];
                            ga[i % ta.len()] += g / y;
                            gb[i % tb.len()] += -g * x / (y * y);
                        }
                        (ga, gb)
                    };
                    self.accum_raw(a, &da);
                    self.accum_raw(b, &db);
                }
                Op::Neg(a) => self.accum_scaled(a, &gout, |_, g| -g),
                Op::Exp(a) => {
                    let out = self.nodes[id].value.data.clone();
                    self.accum_with(a, &gout, |i, g| g * out[i]);
                }
                Op::Log(a) => {
                    let xin = self.nodes[a].value.data.clone();
                    self.accum_with(a, &gout, |i, g| g / xin[i]);
                }
                Op::Tanh(a) => {
                    let out = self.nodes[id].value.data.clone();
                    self.accum_with(a, &gout, |i, g| g * (1.0 - out[i] * out[i]));
                }
                Op::Softplus(a) => {
                    let xin = self.nodes[a].value.data.clone();
                    self.accum_with(a, &gout, |i, g| g * sigmoid(xin[i]));
                }
                Op::Scale(a, c) => self.accum_scaled(a, &gout, move |_, g| g * c),
                Op::AddScalar(a) => self.accum_raw(a, &gout),
                Op::Clamp(a, lo, hi) => {
                    let xin = self.nodes[a].value.data.clone();
                    self.accum_with(a, &gout, |i, g| {
                        if xin[i] >= lo && xin[i] <= hi {
                            g
                        } else {
                            0.0
                        }
                    });
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                    let n = self.nodes[b].value.cols();
                    if self.rg(a) {
                        // dA = dC * B^T
                        let bdat = &self.nodes[b].value.data;
                        let ga = matmul_tb_raw(&gout, bdat, m, n, k);
                        self.accum_raw(a, &ga);
                    }
                    if self.rg(b) {
                        // dB = A^T * dC
                        let adat = &self.nodes[a].value.data;
                        let gb = matmul_ta_raw(adat, &gout, m, k, n);
                        self.accum_raw(b, &gb);
                    }
                }
                Op::MatmulTransB(a, b) => {
                    // C = A B^T : dA = dC * B ; dB = dC^T * A
                    let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                    let n = self.nodes[b].value.rows();
                    if self.rg(a) {
                        let bdat = &self.nodes[b].value.data;
                        let ga = matmul_raw(&gout, bdat, m, n, k);
                        self.accum_raw(a, &ga);
                    }
                    if self.rg(b) {
                        let adat = &self.nodes[a].value.data;
                        let gb = matmul_ta_raw(&gout, adat, m, n, k);
                        self.accum_raw(b, &gb);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(a) {
                        self.accum_raw(a, &gout);
                    }
                    if self.rg(row) {
                        let n = self.nodes[row].value.numel();
                        let mut gr = vec![0.0; n];
                        for (i, &g) in gout.iter().enumerate() {
                            gr[i % n] += g;
                        }
                        self.accum_raw(row, &gr);
                    }
                }
                Op::ReduceSum(a, axes) => {
                    let shape = self.nodes[a].value.shape.clone();
                    let numel = self.nodes[a].value.numel();
                    let mut ga = vec![0.0; numel];
                    for (flat, g) in ga.iter_mut().enumerate() {
                        *g = gout[reduced_index(flat, &shape, &axes)];
                    }
                    self.accum_raw(a, &ga);
                }
                Op::SumAll(a) => {
                    let n = self.nodes[a].value.numel();
                    let ga = vec![gout[0]; n];
                    self.accum_raw(a, &ga);
                }
                Op::MaskedSoftmax(a) => {
                    let p = self.nodes[id].saved.clone().unwrap();
                    let (m, n) = (self.nodes[id].value.rows(), self.nodes[id].value.cols());
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        let prow = &p[i * n..(i + 1) * n];
                        let grow = &gout[i * n..(i + 1) * n];
                        let dot: f64 = prow.iter().zip(grow).map(|(&pj, &gj)| pj * gj).sum();
                        for j in 0..n {
                            ga[i * n + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    self.accum_raw(a, &ga);
                }
                Op::LayerNorm(x, gain, bias) => {
                    let saved = self.nodes[id].saved.clone().unwrap();
                    let (m, n) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                    let gvals = self.nodes[gain].value.data.clone();
                    let mut gx = vec![0.0; m * n];
                    let mut gg = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        let inv_std = saved[i];
                        let xh = &saved[m + i * n..m + (i + 1) * n];
                        let dy = &gout[i * n..(i + 1) * n];
                        let mut sum_dyg = 0.0;
                        let mut sum_dyg_xh = 0.0;
                        for j in 0..n {
                            let dyg = dy[j] * gvals[j];
                            sum_dyg += dyg;
                            sum_dyg_xh += dyg * xh[j];
                            gg[j] += dy[j] * xh[j];
                            gb[j] += dy[j];
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let dyg = dy[j] * gvals[j];
                            gx[i * n + j] =
                                inv_std * (dyg - inv_n * sum_dyg - xh[j] * inv_n * sum_dyg_xh);
                        }
                    }
                    if self.rg(x) {
                        self.accum_raw(x, &gx);
                    }
                    if self.rg(gain) {
                        self.accum_raw(gain, &gg);
                    }
                    if self.rg(bias) {
                        self.accum_raw(bias, &gb);
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let (m, n) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..len {
                            ga[i * n + start + j] = gout[i * len + j];
                        }
                    }
                    self.accum_raw(a, &ga);
                }
                Op::ConcatCols(parts) => {
                    let m = self.nodes[id].value.rows();
                    let total = self.nodes[id].value.cols();
                    let mut off = 0;
                    for &p in &parts {
                        let n = self.nodes[p].value.cols();
                        if self.rg(p) {
                            let mut gp = vec![0.0; m * n];
                            for i in 0..m {
                                gp[i * n..(i + 1) * n]
                                    .copy_from_slice(&gout[i * total + off..i * total + off + n]);
                            }
                            self.accum_raw(p, &gp);
                        }
                        off += n;
                    }
                }
                Op::ConcatRows(parts) => {
                    let n = self.nodes[id].value.cols();
                    let mut off = 0;
                    for &p in &parts {
                        let rows = self.nodes[p].value.rows();
                        if self.rg(p) {
                            let gp = gout[off * n..(off + rows) * n].to_vec();
                            self.accum_raw(p, &gp);
                        }
                        off += rows;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (m, n) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                    let mut ga = vec![0.0; m * n];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            ga[i * n + j] += gout[r * n + j];
                        }
                    }
                    self.accum_raw(a, &ga);
                }
            }
        }
        Ok(())
    }

    fn accum_raw(&mut self, id: VarId, g: &[f64]) {
        if !self.rg(id) {
            return;
        }
        let numel = self.nodes[id].value.numel();
        debug_assert_eq!(numel, g.len());
        let slot = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (s, &v) in slot.iter_mut().zip(g) {
            *s += v;
        }
    }

    fn accum_with(&mut self, id: VarId, gout: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.rg(id) {
            return;
        }
        let g: Vec<f64> = gout.iter().enumerate().map(|(i, &v)| f(i, v)).collect();
        self.accum_raw(id, &g);
    }

    fn accum_scaled(&mut self, id: VarId, gout: &[f64], f: impl Fn(usize, f64) -> f64) {
        self.accum_with(id, gout, f);
    }

    /// Accumulate `sign * gout` into `id`, folding broadcast dimensions.
    fn accum_broadcast(&mut self, id: VarId, gout: &[f64], sign: f64) {
        if !self.rg(id) {
            return;
        }
        let numel = self.nodes[id].value.numel();
        let mut g = vec![0.0; numel];
        for (i, &v) in gout.iter().enumerate() {
            g[i % numel] += sign * v;
        }
        self.accum_raw(id, &g);
    }

    /// Gradient for one side of an elementwise mul with scalar broadcast:
    /// grad wrt `target` is gout * value(other), folded onto target's shape.
    fn bc_map(&self, gout: &[f64], target: VarId, other: VarId) -> Vec<f64> {
        let tn = self.nodes[target].value.numel();
        let od = &self.nodes[other].value.data;
        let mut g = vec![0.0; tn];
        for (i, &v) in gout.iter().enumerate() {
            g[i % tn] += v * od[i % od.len()];
        }
        g
    }
}

const LN_EPS: f64 = 1e-6;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
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

/// Flat index into the reduced tensor after summing over `axes`.
fn reduced_index(flat: usize, shape: &[usize], axes: &[usize]) -> usize {
    let mut rem = flat;
    let mut coords = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        coords[d] = rem % shape[d];
        rem /= shape[d];
    }
    let mut out = 0;
    for d in 0..shape.len() {
        if axes.contains(&d) {
            continue;
        }
        out = out * shape[d] + coords[d];
    }
    out
}

pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a [m,k] times b^T with b [n,k] -> [m,n]
pub fn matmul_tb_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// a^T [k,m]' from a [m,k], times b [m,n] -> [k,n]
pub fn matmul_ta_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}
