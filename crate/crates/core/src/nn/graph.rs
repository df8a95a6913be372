//! Minimal reverse-mode differentiation over a fixed op set.
//!
//! Define-by-run tape: each op evaluates eagerly into a node and records
//! its inputs; `backward` walks the tape in reverse accumulating adjoints.
//! The op set is exactly what the denoiser needs: matmul, depthwise
//! conv1d, layernorm, softmax, elementwise/broadcast arithmetic, the SSD
//! scan, embedding gather, and shape plumbing.

use std::collections::BTreeMap;

use super::scan::{ssd_scan_backward, ssd_scan_chunked, ScanDims};
use super::tensor::Tensor;

/// Chunk size used by the in-graph SSD scan fast path.
pub const SCAN_CHUNK: usize = 32;

/// Handle to a node in the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Matmul(Var, Var),
    Transpose(Var),
    LayerNorm(Var, f64),
    Softmax(Var),
    SumAll(Var),
    SumLast(Var),
    Gather(Var, Vec<usize>),
    ConvDepthwise {
        x: Var,
        w: Var,
        pad_left: usize,
    },
    SsdScan {
        x: Var,
        a: Var,
        b: Var,
        c: Var,
        dims: ScanDims,
    },
    ConcatLast(Var, Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize, usize),
    Reshape(Var),
    ReverseRows(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast_kind(lhs: &[usize], rhs: &[usize]) -> Bcast {
    if lhs == rhs {
        Bcast::Same
    } else if rhs.len() == 1 && rhs[0] == 1 {
        Bcast::Scalar
    } else if rhs.len() == 1 && rhs[0] == *lhs.last().unwrap() {
        Bcast::Row
    } else if lhs.len() == 2 && rhs.len() == 2 && rhs[0] == lhs[0] && rhs[1] == 1 {
        Bcast::Col
    } else {
        panic!("incompatible shapes {lhs:?} vs {rhs:?}");
    }
}

fn rhs_index(kind: Bcast, i: usize, lhs_cols: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Row => i % lhs_cols,
        Bcast::Col => i / lhs_cols,
    }
}

/// Fold a full-shape gradient back onto a broadcast operand's shape.
fn reduce_to(grad: &[f64], lhs_shape: &[usize], rhs_shape: &[usize]) -> Tensor {
    let kind = bcast_kind(lhs_shape, rhs_shape);
    let cols = *lhs_shape.last().unwrap();
    let mut out = Tensor::zeros(rhs_shape);
    let data = out.data_mut();
    for (i, &g) in grad.iter().enumerate() {
        data[rhs_index(kind, i, cols)] += g;
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf registered under a name for optimizer lookup.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn param_names(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let kind = bcast_kind(va.shape(), vb.shape());
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[rhs_index(kind, i, cols)]))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(op, value, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.0].value;
        let value = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|&x| f(x)).collect(),
        );
        let needs = self.needs(a);
        self.push(op, value, needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.rank(), 2, "matmul lhs must be 2-D");
        assert_eq!(vb.rank(), 2, "matmul rhs must be 2-D");
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let value = Tensor::new(vec![m, n], matmul_raw(va.data(), vb.data(), m, k, n));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), value, needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rank(), 2, "transpose needs 2-D");
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va.data()[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.push(Op::Transpose(a), Tensor::new(vec![n, m], data), needs)
    }

    /// Normalize over the last dimension to zero mean, unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let cols = va.cols();
        let mut data = Vec::with_capacity(va.len());
        for row in va.data().chunks_exact(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            data.extend(row.iter().map(|&x| (x - mean) * inv));
        }
        let value = Tensor::new(va.shape().to_vec(), data);
        let needs = self.needs(a);
        self.push(Op::LayerNorm(a, eps), value, needs)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let cols = va.cols();
        let mut data = Vec::with_capacity(va.len());
        for row in va.data().chunks_exact(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let sum: f64 = exp.iter().sum();
            data.extend(exp.iter().map(|&e| e / sum));
        }
        let value = Tensor::new(va.shape().to_vec(), data);
        let needs = self.needs(a);
        self.push(Op::Softmax(a), value, needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let needs = self.needs(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), needs)
    }

    /// Sum over the last dimension, keeping it as size 1.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let cols = va.cols();
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let data = va
            .data()
            .chunks_exact(cols)
            .map(|r| r.iter().sum())
            .collect();
        let needs = self.needs(a);
        self.push(Op::SumLast(a), Tensor::new(shape, data), needs)
    }

    /// Row lookup: `table` is `(V, d)`, output is `(indices.len(), d)`.
    pub fn gather(&mut self, table: Var, indices: Vec<usize>) -> Var {
        let vt = &self.nodes[table.0].value;
        assert_eq!(vt.rank(), 2, "gather table must be 2-D");
        let d = vt.shape()[1];
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], data);
        let needs = self.needs(table);
        self.push(Op::Gather(table, indices), value, needs)
    }

    /// Depthwise 1-D convolution: `x` is `(L, C)`, `w` is `(C, W)`; output
    /// keeps length `L` with zero padding (`pad_left` on the left, the
    /// rest on the right).
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var, pad_left: usize) -> Var {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        assert_eq!(vx.rank(), 2);
        assert_eq!(vw.rank(), 2);
        let (l, ch) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(vw.shape()[0], ch, "conv channels mismatch");
        let width = vw.shape()[1];
        assert!(pad_left < width);
        let mut data = vec![0.0; l * ch];
        for t in 0..l {
            for cnl in 0..ch {
                let mut acc = 0.0;
                for k in 0..width {
                    let src = t as isize + k as isize - pad_left as isize;
                    if src >= 0 && (src as usize) < l {
                        acc += vx.data()[src as usize * ch + cnl] * vw.data()[cnl * width + k];
                    }
                }
                data[t * ch + cnl] = acc;
            }
        }
        let value = Tensor::new(vec![l, ch], data);
        let needs = self.needs(x) || self.needs(w);
        self.push(Op::ConvDepthwise { x, w, pad_left }, value, needs)
    }

    /// SSD scan; shapes `(L,H,P)`, `(L,H)`, `(L,G,N)`, `(L,G,N)`.
    pub fn ssd_scan(&mut self, x: Var, a: Var, b: Var, c: Var, dims: ScanDims) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.len(), dims.x_len(), "scan x length");
        assert_eq!(self.nodes[a.0].value.len(), dims.a_len(), "scan a length");
        assert_eq!(self.nodes[b.0].value.len(), dims.bc_len(), "scan b length");
        assert_eq!(self.nodes[c.0].value.len(), dims.bc_len(), "scan c length");
        let y = ssd_scan_chunked(
            vx.data(),
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            self.nodes[c.0].value.data(),
            dims,
            SCAN_CHUNK,
        );
        let shape = vx.shape().to_vec();
        let needs = self.needs(x) || self.needs(a) || self.needs(b) || self.needs(c);
        self.push(
            Op::SsdScan { x, a, b, c, dims },
            Tensor::new(shape, y),
            needs,
        )
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.rank(), 2);
        assert_eq!(vb.rank(), 2);
        assert_eq!(va.shape()[0], vb.shape()[0], "concat_last rows differ");
        let (rows, ca, cb) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Op::ConcatLast(a, b),
            Tensor::new(vec![rows, ca + cb], data),
            needs,
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.rank(), 2);
        assert_eq!(vb.rank(), 2);
        assert_eq!(va.shape()[1], vb.shape()[1], "concat_rows cols differ");
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let shape = vec![va.shape()[0] + vb.shape()[0], va.shape()[1]];
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::ConcatRows(a, b), Tensor::new(shape, data), needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rank(), 2);
        assert!(start < end && end <= va.shape()[0]);
        let cols = va.shape()[1];
        let data = va.data()[start * cols..end * cols].to_vec();
        let needs = self.needs(a);
        self.push(
            Op::SliceRows(a, start, end),
            Tensor::new(vec![end - start, cols], data),
            needs,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let va = &self.nodes[a.0].value;
        let value = va.clone().reshaped(shape);
        let needs = self.needs(a);
        self.push(Op::Reshape(a), value, needs)
    }

    /// Reverse along the first axis.
    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let rows = va.shape()[0];
        let stride = va.len() / rows.max(1);
        let mut data = vec![0.0; va.len()];
        for r in 0..rows {
            data[(rows - 1 - r) * stride..(rows - r) * stride]
                .copy_from_slice(&va.data()[r * stride..(r + 1) * stride]);
        }
        let value = Tensor::new(va.shape().to_vec(), data);
        let needs = self.needs(a);
        self.push(Op::ReverseRows(a), value, needs)
    }

    /// Reverse-mode sweep from a scalar loss. Returns per-node adjoints.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        if !node.needs_grad {
            return;
        }
        let mut send = |v: Var, t: Tensor| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (sa, sb) = self.shapes2(*a, *b);
                send(*a, Tensor::new(sa.to_vec(), g.data().to_vec()));
                send(*b, reduce_to(g.data(), sa, sb));
            }
            Op::Sub(a, b) => {
                let (sa, sb) = self.shapes2(*a, *b);
                send(*a, Tensor::new(sa.to_vec(), g.data().to_vec()));
                let mut r = reduce_to(g.data(), sa, sb);
                for v in r.data_mut() {
                    *v = -*v;
                }
                send(*b, r);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let kind = bcast_kind(va.shape(), vb.shape());
                let cols = va.cols();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * vb.data()[rhs_index(kind, i, cols)])
                    .collect();
                send(*a, Tensor::new(va.shape().to_vec(), ga));
                let gb_full: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gv, &xv)| gv * xv)
                    .collect();
                send(*b, reduce_to(&gb_full, va.shape(), vb.shape()));
            }
            Op::Neg(a) => {
                let mut t = g.clone();
                for v in t.data_mut() {
                    *v = -*v;
                }
                send(*a, t);
            }
            Op::Scale(a, s) => {
                let mut t = g.clone();
                for v in t.data_mut() {
                    *v *= s;
                }
                send(*a, t);
            }
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Exp(a) => {
                let y = &node.value;
                let t: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv)
                    .collect();
                send(*a, Tensor::new(y.shape().to_vec(), t));
            }
            Op::Ln(a) => {
                let x = &self.nodes[a.0].value;
                let t: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                send(*a, Tensor::new(x.shape().to_vec(), t));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let t: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                send(*a, Tensor::new(y.shape().to_vec(), t));
            }
            Op::Silu(a) => {
                let x = &self.nodes[a.0].value;
                let t: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                    .collect();
                send(*a, Tensor::new(x.shape().to_vec(), t));
            }
            Op::Softplus(a) => {
                let x = &self.nodes[a.0].value;
                let t: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * sigmoid(xv))
                    .collect();
                send(*a, Tensor::new(x.shape().to_vec(), t));
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA = dY · Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g.data()[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            da[i * k + l] += gv * vb.data()[l * n + j];
                        }
                    }
                }
                send(*a, Tensor::new(vec![m, k], da));
                // dB = Aᵀ · dY
                let mut dbm = vec![0.0; k * n];
                for i in 0..m {
                    for l in 0..k {
                        let av = va.data()[i * k + l];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            dbm[l * n + j] += av * g.data()[i * n + j];
                        }
                    }
                }
                send(*b, Tensor::new(vec![k, n], dbm));
            }
            Op::Transpose(a) => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                let mut t = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        t[j * n + i] = g.data()[i * m + j];
                    }
                }
                send(*a, Tensor::new(vec![m, n], t));
            }
            Op::LayerNorm(a, eps) => {
                let x = &self.nodes[a.0].value;
                let cols = x.cols();
                let mut t = Vec::with_capacity(x.len());
                for (row, grow) in x.data().chunks_exact(cols).zip(g.data().chunks_exact(cols)) {
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let g_mean = grow.iter().sum::<f64>() / cols as f64;
                    let gx_mean = grow
                        .iter()
                        .zip(&xhat)
                        .map(|(&gv, &xv)| gv * xv)
                        .sum::<f64>()
                        / cols as f64;
                    t.extend(
                        grow.iter()
                            .zip(&xhat)
                            .map(|(&gv, &xv)| inv * (gv - g_mean - xv * gx_mean)),
                    );
                }
                send(*a, Tensor::new(x.shape().to_vec(), t));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut t = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks_exact(cols).zip(g.data().chunks_exact(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    t.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                send(*a, Tensor::new(y.shape().to_vec(), t));
            }
            Op::SumAll(a) => {
                let x = &self.nodes[a.0].value;
                send(*a, Tensor::full(x.shape(), g.item()));
            }
            Op::SumLast(a) => {
                let x = &self.nodes[a.0].value;
                let cols = x.cols();
                let mut t = Vec::with_capacity(x.len());
                for (r, &gv) in g.data().iter().enumerate() {
                    let _ = r;
                    t.extend(std::iter::repeat_n(gv, cols));
                }
                send(*a, Tensor::new(x.shape().to_vec(), t));
            }
            Op::Gather(table, indices) => {
                let vt = &self.nodes[table.0].value;
                let d = vt.shape()[1];
                let mut t = Tensor::zeros(vt.shape());
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        t.data_mut()[i * d + j] += g.data()[row * d + j];
                    }
                }
                send(*table, t);
            }
            Op::ConvDepthwise { x, w, pad_left } => {
                let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (l, ch) = (vx.shape()[0], vx.shape()[1]);
                let width = vw.shape()[1];
                let mut dx = vec![0.0; l * ch];
                let mut dw = vec![0.0; ch * width];
                for t in 0..l {
                    for cnl in 0..ch {
                        let gv = g.data()[t * ch + cnl];
                        if gv == 0.0 {
                            continue;
                        }
                        for k in 0..width {
                            let src = t as isize + k as isize - *pad_left as isize;
                            if src >= 0 && (src as usize) < l {
                                dx[src as usize * ch + cnl] += gv * vw.data()[cnl * width + k];
                                dw[cnl * width + k] += gv * vx.data()[src as usize * ch + cnl];
                            }
                        }
                    }
                }
                send(*x, Tensor::new(vec![l, ch], dx));
                send(*w, Tensor::new(vec![ch, width], dw));
            }
            Op::SsdScan { x, a, b, c, dims } => {
                let (dx, da, db, dc) = ssd_scan_backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[a.0].value.data(),
                    self.nodes[b.0].value.data(),
                    self.nodes[c.0].value.data(),
                    g.data(),
                    *dims,
                );
                send(*x, Tensor::new(self.nodes[x.0].value.shape().to_vec(), dx));
                send(*a, Tensor::new(self.nodes[a.0].value.shape().to_vec(), da));
                send(*b, Tensor::new(self.nodes[b.0].value.shape().to_vec(), db));
                send(*c, Tensor::new(self.nodes[c.0].value.shape().to_vec(), dc));
            }
            Op::ConcatLast(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (rows, ca, cb) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut ga = vec![0.0; rows * ca];
                let mut gb = vec![0.0; rows * cb];
                for r in 0..rows {
                    ga[r * ca..(r + 1) * ca]
                        .copy_from_slice(&g.data()[r * (ca + cb)..r * (ca + cb) + ca]);
                    gb[r * cb..(r + 1) * cb]
                        .copy_from_slice(&g.data()[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                }
                send(*a, Tensor::new(vec![rows, ca], ga));
                send(*b, Tensor::new(vec![rows, cb], gb));
            }
            Op::ConcatRows(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let na = va.len();
                send(
                    *a,
                    Tensor::new(va.shape().to_vec(), g.data()[..na].to_vec()),
                );
                send(
                    *b,
                    Tensor::new(vb.shape().to_vec(), g.data()[na..].to_vec()),
                );
            }
            Op::SliceRows(a, start, end) => {
                let va = &self.nodes[a.0].value;
                let cols = va.shape()[1];
                let mut t = Tensor::zeros(va.shape());
                t.data_mut()[start * cols..end * cols].copy_from_slice(g.data());
                send(*a, t);
            }
            Op::Reshape(a) => {
                let va = &self.nodes[a.0].value;
                send(*a, Tensor::new(va.shape().to_vec(), g.data().to_vec()));
            }
            Op::ReverseRows(a) => {
                let va = &self.nodes[a.0].value;
                let rows = va.shape()[0];
                let stride = va.len() / rows.max(1);
                let mut t = vec![0.0; va.len()];
                for r in 0..rows {
                    t[(rows - 1 - r) * stride..(rows - r) * stride]
                        .copy_from_slice(&g.data()[r * stride..(r + 1) * stride]);
                }
                send(*a, Tensor::new(va.shape().to_vec(), t));
            }
        }
    }

    fn shapes2(&self, a: Var, b: Var) -> (&[usize], &[usize]) {
        (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape())
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Collect named parameter gradients (zero tensors when a parameter
    /// did not participate in the loss).
    pub fn named(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .param_names()
            .map(|(name, var)| {
                let g = self
                    .of(var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(var).shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
