//! The reverse-mode tape: eager forward execution with recorded backward.

use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::{matmul_raw, Tensor};

/// Handle to a tensor registered on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    /// `x[r, c] + row[c]` for every row r.
    AddRow { x: TensorId, row: TensorId },
    /// Elementwise `mul * x + add` with scalar constants.
    Affine { x: TensorId, mul: f64 },
    Gelu { x: TensorId },
    Exp { x: TensorId },
    Ln { x: TensorId },
    Sqrt { x: TensorId },
    Abs { x: TensorId },
    ClampMin { x: TensorId, floor: f64 },
    Concat { parts: Vec<TensorId>, axis: usize },
    Slice { x: TensorId, axis: usize, start: usize, len: usize },
    Reshape { x: TensorId },
    Transpose { x: TensorId },
    Sum { x: TensorId },
    Mean { x: TensorId },
    SumAxis { x: TensorId, axis: usize },
    Softmax { x: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
///
/// The node list is its own topological order: every operation's inputs have
/// smaller indices than its output, so [`Tape::backward`] is a single reverse
/// sweep that visits each node exactly once. Backward overwrites gradients
/// (no accumulation across calls): two backward passes over the same graph
/// produce bit-identical results.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf (input or parameter).
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Registers a borrowed tensor as a leaf, cloning its data.
    pub fn leaf_from(&mut self, tensor: &Tensor) -> TensorId {
        self.leaf(tensor.clone())
    }

    /// Registers constant (non-trainable) data as a leaf.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(data, shape)?))
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Gradient of the most recent backward pass, if one ran.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> Result<f64> {
        let t = &self.nodes[id.0].tensor;
        if t.numel() != 1 {
            return Err(Error::contract(format!(
                "expected scalar tensor, got shape {:?}",
                t.shape
            )));
        }
        Ok(t.data[0])
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    fn out(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            op,
        )
    }

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// `a[m,k] * b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.out(data, vec![m, n], Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::contract(format!("transpose expects 2-d, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let data = transpose_raw(self.data(x), m, n);
        Ok(self.out(data, vec![n, m], Op::Transpose { x }))
    }

    // ── Elementwise binary ──────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.out(data, shape, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.out(data, shape, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.out(data, shape, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("div", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x / y);
        let shape = self.shape(a).to_vec();
        Ok(self.out(data, shape, Op::Div { a, b }))
    }

    /// Broadcasts a `[n]` bias over every row of `x[m,n]`.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sx.len() != 2 || sr.len() != 1 || sr[0] != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sx.to_vec(),
                rhs: sr.to_vec(),
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let xd = self.data(x);
        let rd = self.data(row);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(xd[r * n + c] + rd[c]);
            }
        }
        Ok(self.out(data, vec![m, n], Op::AddRow { x, row }))
    }

    // ── Elementwise unary ───────────────────────────────────────────

    /// Elementwise `mul * x + add` with scalar constants.
    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| mul * v + add).collect();
        let shape = self.shape(x).to_vec();
        self.out(data, shape, Op::Affine { x, mul })
    }

    /// Multiplies every entry by a scalar constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        self.affine(x, c, 0.0)
    }

    /// GELU nonlinearity (tanh approximation).
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.out(data, shape, Op::Gelu { x })
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.out(data, shape, Op::Exp { x })
    }

    pub fn ln(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.out(data, shape, Op::Ln { x })
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.sqrt()).collect();
        let shape = self.shape(x).to_vec();
        self.out(data, shape, Op::Sqrt { x })
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        self.out(data, shape, Op::Abs { x })
    }

    /// Elementwise `max(x, floor)`; gradient passes only where `x > floor`.
    /// NaN propagates (unlike `f64::max`, which would mask it).
    pub fn clamp_min(&mut self, x: TensorId, floor: f64) -> TensorId {
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| if v < floor { floor } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        self.out(data, shape, Op::ClampMin { x, floor })
    }

    // ── Shape ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.out(data, shape, Op::Reshape { x }))
    }

    /// Concatenates 2-d tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        if axis > 1 {
            return Err(Error::contract(format!("concat axis {axis} out of range")));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 2 {
            return Err(Error::contract(format!(
                "concat expects 2-d tensors, got {first:?}"
            )));
        }
        let keep = 1 - axis;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[keep] != first[keep] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (m, n) = (shape[0], shape[1]);
        let mut data = vec![0.0; m * n];
        let mut offset = 0;
        for &p in parts {
            let s = self.shape(p).to_vec();
            let pd = self.data(p);
            match axis {
                0 => {
                    data[offset * n..(offset + s[0]) * n].copy_from_slice(pd);
                    offset += s[0];
                }
                _ => {
                    for r in 0..m {
                        data[r * n + offset..r * n + offset + s[1]]
                            .copy_from_slice(&pd[r * s[1]..(r + 1) * s[1]]);
                    }
                    offset += s[1];
                }
            }
        }
        Ok(self.out(
            data,
            shape,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous slice of a 2-d tensor along `axis`.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 || axis > 1 {
            return Err(Error::contract(format!(
                "slice expects 2-d tensor and axis 0/1, got {s:?} axis {axis}"
            )));
        }
        if start + len > s[axis] || len == 0 {
            return Err(Error::contract(format!(
                "slice [{start}, {start}+{len}) out of range for axis {axis} of {s:?}"
            )));
        }
        let (m, n) = (s[0], s[1]);
        let xd = self.data(x);
        let (data, shape) = match axis {
            0 => (xd[start * n..(start + len) * n].to_vec(), vec![len, n]),
            _ => {
                let mut d = Vec::with_capacity(m * len);
                for r in 0..m {
                    d.extend_from_slice(&xd[r * n + start..r * n + start + len]);
                }
                (d, vec![m, len])
            }
        };
        Ok(self.out(data, shape, Op::Slice { x, axis, start, len }))
    }

    /// Splits a 2-d tensor into consecutive chunks of the given sizes.
    pub fn split(&mut self, x: TensorId, axis: usize, sizes: &[usize]) -> Result<Vec<TensorId>> {
        let extent = self
            .shape(x)
            .get(axis)
            .copied()
            .ok_or_else(|| Error::contract(format!("split axis {axis} out of range")))?;
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::contract(format!(
                "split sizes {sizes:?} do not cover axis {axis} extent {extent}"
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    // ── Reductions ──────────────────────────────────────────────────

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        self.out(vec![s], vec![1], Op::Sum { x })
    }

    /// Mean of all entries, as a `[1]` scalar.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.data(x).len() as f64;
        let s: f64 = self.data(x).iter().sum();
        self.out(vec![s / n], vec![1], Op::Mean { x })
    }

    /// Sum of a 2-d tensor over one axis: axis 0 -> `[cols]`, axis 1 -> `[rows]`.
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 || axis > 1 {
            return Err(Error::contract(format!(
                "sum_axis expects 2-d tensor and axis 0/1, got {s:?} axis {axis}"
            )));
        }
        let (m, n) = (s[0], s[1]);
        let xd = self.data(x);
        let (data, shape) = match axis {
            0 => {
                let mut d = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        d[c] += xd[r * n + c];
                    }
                }
                (d, vec![n])
            }
            _ => {
                let d = (0..m)
                    .map(|r| xd[r * n..(r + 1) * n].iter().sum())
                    .collect();
                (d, vec![m])
            }
        };
        Ok(self.out(data, shape, Op::SumAxis { x, axis }))
    }

    /// Euclidean norm over all entries (`axis: None`) or per-axis for 2-d.
    pub fn l2_norm(&mut self, x: TensorId, axis: Option<usize>) -> Result<TensorId> {
        let sq = self.mul(x, x)?;
        let ssq = match axis {
            None => self.sum(sq),
            Some(ax) => self.sum_axis(sq, ax)?,
        };
        Ok(self.sqrt(ssq))
    }

    /// Inner product of two same-shaped tensors, as a scalar.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Cosine similarity of two same-shaped tensors (flattened).
    ///
    /// Errors when either input has zero norm.
    pub fn cosine(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("cosine", a, b)?;
        let na: f64 = self.data(a).iter().map(|v| v * v).sum();
        let nb: f64 = self.data(b).iter().map(|v| v * v).sum();
        if na == 0.0 {
            return Err(Error::numeric("cosine: left vector has zero norm"));
        }
        if nb == 0.0 {
            return Err(Error::numeric("cosine: right vector has zero norm"));
        }
        let num = self.dot(a, b)?;
        let asq = self.mul(a, a)?;
        let bsq = self.mul(b, b)?;
        let na2 = self.sum(asq);
        let nb2 = self.sum(bsq);
        let prod = self.mul(na2, nb2)?;
        let denom = self.sqrt(prod);
        self.div(num, denom)
    }

    // ── Normalization / attention ───────────────────────────────────

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().expect("softmax on 0-d tensor");
        let xd = self.data(x);
        let mut data = vec![0.0; xd.len()];
        for (row_in, row_out) in xd.chunks_exact(last).zip(data.chunks_exact_mut(last)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                z += *o;
            }
            for o in row_out.iter_mut() {
                *o /= z;
            }
        }
        self.out(data, shape, Op::Softmax { x })
    }

    /// Per-vector normalization over the last axis, then affine by gain/bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm on 0-d tensor");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xd = self.data(x);
        let gd = self.data(gain).to_vec();
        let bd = self.data(bias).to_vec();
        let mut data = vec![0.0; xd.len()];
        for (row_in, row_out) in xd.chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let mean = row_in.iter().sum::<f64>() / d as f64;
            let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                row_out[c] = (row_in[c] - mean) * inv_std * gd[c] + bd[c];
            }
        }
        Ok(self.out(data, shape, Op::LayerNorm { x, gain, bias, eps }))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populates `grad` for every node reachable from `loss`.
    ///
    /// Gradients are overwritten on each call (zeroed first, then
    /// accumulated within the single reverse sweep).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Vec<f64>> = self.nodes[..n]
            .iter()
            .map(|nd| vec![0.0; nd.tensor.numel()])
            .collect();
        grads[loss.0][0] = 1.0;

        for i in (0..n).rev() {
            let g = std::mem::take(&mut grads[i]);
            self.backprop_node(i, &g, &mut grads);
            grads[i] = g;
        }

        for (node, g) in self.nodes[..n].iter_mut().zip(grads) {
            node.tensor.grad = Some(g);
        }
        for node in self.nodes[n..].iter_mut() {
            node.tensor.grad = Some(vec![0.0; node.tensor.numel()]);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = self.shape(*b)[1];
                let bt = transpose_raw(self.data(*b), k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                accumulate(&mut grads[a.0], &da);
                let at = transpose_raw(self.data(*a), m, k);
                let db = matmul_raw(&at, g, k, m, n);
                accumulate(&mut grads[b.0], &db);
            }

            Op::Add { a, b } => {
                accumulate(&mut grads[a.0], g);
                accumulate(&mut grads[b.0], g);
            }

            Op::Sub { a, b } => {
                accumulate(&mut grads[a.0], g);
                for (dst, &gv) in grads[b.0].iter_mut().zip(g) {
                    *dst -= gv;
                }
            }

            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                for ((dst, &gv), &bv) in grads[a.0].iter_mut().zip(g).zip(bd) {
                    *dst += gv * bv;
                }
                for ((dst, &gv), &av) in grads[b.0].iter_mut().zip(g).zip(ad) {
                    *dst += gv * av;
                }
            }

            Op::Div { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                for ((dst, &gv), &bv) in grads[a.0].iter_mut().zip(g).zip(bd) {
                    *dst += gv / bv;
                }
                for (((dst, &gv), &av), &bv) in grads[b.0].iter_mut().zip(g).zip(ad).zip(bd) {
                    *dst -= gv * av / (bv * bv);
                }
            }

            Op::AddRow { x, row } => {
                accumulate(&mut grads[x.0], g);
                let n = self.shape(*row)[0];
                let dr = &mut grads[row.0];
                for (idx, &gv) in g.iter().enumerate() {
                    dr[idx % n] += gv;
                }
            }

            Op::Affine { x, mul } => {
                for (dst, &gv) in grads[x.0].iter_mut().zip(g) {
                    *dst += mul * gv;
                }
            }

            Op::Gelu { x } => {
                let xd = self.data(*x);
                for ((dst, &gv), &xv) in grads[x.0].iter_mut().zip(g).zip(xd) {
                    *dst += gv * gelu_grad_scalar(xv);
                }
            }

            Op::Exp { x } => {
                let out = self.data(TensorId(i));
                for ((dst, &gv), &ov) in grads[x.0].iter_mut().zip(g).zip(out) {
                    *dst += gv * ov;
                }
            }

            Op::Ln { x } => {
                let xd = self.data(*x);
                for ((dst, &gv), &xv) in grads[x.0].iter_mut().zip(g).zip(xd) {
                    *dst += gv / xv;
                }
            }

            Op::Sqrt { x } => {
                let out = self.data(TensorId(i));
                for ((dst, &gv), &ov) in grads[x.0].iter_mut().zip(g).zip(out) {
                    *dst += gv / (2.0 * ov);
                }
            }

            Op::Abs { x } => {
                let xd = self.data(*x);
                for ((dst, &gv), &xv) in grads[x.0].iter_mut().zip(g).zip(xd) {
                    *dst += gv * if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }

            Op::ClampMin { x, floor } => {
                let xd = self.data(*x);
                for ((dst, &gv), &xv) in grads[x.0].iter_mut().zip(g).zip(xd) {
                    if xv > *floor {
                        *dst += gv;
                    }
                }
            }

            Op::Concat { parts, axis } => {
                let out_shape = self.shape(TensorId(i));
                let n_out = out_shape[1];
                let mut offset = 0;
                for &p in parts {
                    let sp = self.shape(p).to_vec();
                    let dp = &mut grads[p.0];
                    match axis {
                        0 => {
                            accumulate(dp, &g[offset * n_out..(offset + sp[0]) * n_out]);
                            offset += sp[0];
                        }
                        _ => {
                            for r in 0..sp[0] {
                                for c in 0..sp[1] {
                                    dp[r * sp[1] + c] += g[r * n_out + offset + c];
                                }
                            }
                            offset += sp[1];
                        }
                    }
                }
            }

            Op::Slice { x, axis, start, len } => {
                let sx = self.shape(*x);
                let (_, n) = (sx[0], sx[1]);
                let dx = &mut grads[x.0];
                match axis {
                    0 => accumulate(&mut dx[start * n..(start + len) * n], g),
                    _ => {
                        let rows = g.len() / len;
                        for r in 0..rows {
                            for c in 0..*len {
                                dx[r * n + start + c] += g[r * len + c];
                            }
                        }
                    }
                }
            }

            Op::Reshape { x } => accumulate(&mut grads[x.0], g),

            Op::Transpose { x } => {
                let out_shape = self.shape(TensorId(i));
                let dt = transpose_raw(g, out_shape[0], out_shape[1]);
                accumulate(&mut grads[x.0], &dt);
            }

            Op::Sum { x } => {
                let gv = g[0];
                for dst in grads[x.0].iter_mut() {
                    *dst += gv;
                }
            }

            Op::Mean { x } => {
                let gv = g[0] / grads[x.0].len() as f64;
                for dst in grads[x.0].iter_mut() {
                    *dst += gv;
                }
            }

            Op::SumAxis { x, axis } => {
                let sx = self.shape(*x);
                let (m, n) = (sx[0], sx[1]);
                let dx = &mut grads[x.0];
                match axis {
                    0 => {
                        for r in 0..m {
                            for c in 0..n {
                                dx[r * n + c] += g[c];
                            }
                        }
                    }
                    _ => {
                        for r in 0..m {
                            for c in 0..n {
                                dx[r * n + c] += g[r];
                            }
                        }
                    }
                }
            }

            Op::Softmax { x } => {
                // Per row: dx = s * (g - <g, s>)
                let out = self.data(TensorId(i));
                let last = *self.shape(TensorId(i)).last().unwrap();
                let dx = &mut grads[x.0];
                for ((srow, grow), drow) in out
                    .chunks_exact(last)
                    .zip(g.chunks_exact(last))
                    .zip(dx.chunks_exact_mut(last))
                {
                    let dot: f64 = srow.iter().zip(grow).map(|(s, gv)| s * gv).sum();
                    for ((d, &s), &gv) in drow.iter_mut().zip(srow).zip(grow) {
                        *d += s * (gv - dot);
                    }
                }
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let xd = self.data(*x);
                let gd = self.data(*gain);
                let d = self.shape(*gain)[0];
                let df = d as f64;
                let (dx_all, rest) = {
                    // split borrows: x grad vs gain/bias grads live at distinct ids
                    let xi = x.0;
                    let gi = gain.0;
                    let bi = bias.0;
                    debug_assert!(xi != gi && xi != bi && gi != bi);
                    (xi, (gi, bi))
                };
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (v, (xrow, grow)) in xd.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                    let mean = xrow.iter().sum::<f64>() / df;
                    let var = xrow.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / df;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|&t| (t - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gd).map(|(&gv, &ga)| gv * ga).collect();
                    let dxhat_sum: f64 = dxhat.iter().sum();
                    let dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let dxrow = &mut grads[dx_all][v * d..(v + 1) * d];
                    for c in 0..d {
                        dxrow[c] +=
                            inv_std / df * (df * dxhat[c] - dxhat_sum - xhat[c] * dxhat_xhat);
                        dgain[c] += grow[c] * xhat[c];
                        dbias[c] += grow[c];
                    }
                }
                accumulate(&mut grads[rest.0], &dgain);
                accumulate(&mut grads[rest.1], &dbias);
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = x[r * n + c];
        }
    }
    out
}

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let inner = c * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, rel_err};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new((0..numel).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(), shape).unwrap()
    }

    #[test]
    fn matmul_hand_cases() {
        let mut tape = Tape::new();
        let eye = tape.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let x = tape.constant(vec![3.0, -1.0, 2.0, 5.0], vec![2, 2]).unwrap();
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.data(y), tape.data(x));

        let a = tape.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let b = tape.constant(vec![3.0, 4.0], vec![2, 1]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]);

        // mismatch names both shapes
        let bad = tape.constant(vec![0.0; 6], vec![3, 2]).unwrap();
        let err = tape.matmul(a, bad).unwrap_err().to_string();
        assert!(err.contains("[1, 2]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![random_tensor(vec![4, 5], &mut rng), random_tensor(vec![5, 3], &mut rng)];
        check_gradients(
            "matmul",
            &|tape, ids| {
                let c = tape.matmul(ids[0], ids[1])?;
                let sq = tape.mul(c, c)?;
                Ok(tape.sum(sq))
            },
            &params,
            1e-5,
            1e-5,
        )
        .unwrap();
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut tape = Tape::new();
        let gain = tape.constant(vec![1.0, 1.0], vec![2]).unwrap();
        let bias = tape.constant(vec![0.0, 0.0], vec![2]).unwrap();
        // constant vector: zero output (variance handled by eps)
        let c = tape.constant(vec![5.0, 5.0], vec![1, 2]).unwrap();
        let out = tape.layer_norm(c, gain, bias, 1e-6).unwrap();
        assert!(tape.data(out).iter().all(|&v| v.abs() < 1e-9));
        // already normalized stays put as eps -> 0
        let x = tape.constant(vec![1.0, -1.0], vec![1, 2]).unwrap();
        let out = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!((tape.data(out)[0] - 1.0).abs() < 1e-9);
        assert!((tape.data(out)[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![
            random_tensor(vec![3, 4], &mut rng),
            random_tensor(vec![4], &mut rng),
            random_tensor(vec![4], &mut rng),
        ];
        check_gradients(
            "layer_norm",
            &|tape, ids| {
                let ln = tape.layer_norm(ids[0], ids[1], ids[2], 1e-6)?;
                let sq = tape.mul(ln, ln)?;
                Ok(tape.sum(sq))
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
    }

    #[test]
    fn softmax_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0, 0.0], vec![1, 2]).unwrap();
        let s = tape.softmax(x);
        assert_eq!(tape.data(s), &[0.5, 0.5]);
        // large logits stay stable
        let x = tape.constant(vec![1000.0, 0.0], vec![1, 2]).unwrap();
        let s = tape.softmax(x);
        assert!((tape.data(s)[0] - 1.0).abs() < 1e-12);
        assert!(tape.data(s)[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![random_tensor(vec![2, 5], &mut rng), random_tensor(vec![2, 5], &mut rng)];
        check_gradients(
            "softmax",
            &|tape, ids| {
                let s = tape.softmax(ids[0]);
                // weighted sum to give every entry a distinct gradient path
                let w = tape.mul(s, ids[1])?;
                Ok(tape.sum(w))
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
    }

    #[test]
    fn gelu_hand_cases_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0, 8.0, -8.0], vec![3]).unwrap();
        let g = tape.gelu(x);
        assert_eq!(tape.data(g)[0], 0.0);
        assert!((tape.data(g)[1] - 8.0).abs() < 1e-9);
        assert!(tape.data(g)[2].abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = vec![random_tensor(vec![6], &mut rng)];
        check_gradients(
            "gelu",
            &|tape, ids| {
                let g = tape.gelu(ids[0]);
                let sq = tape.mul(g, g)?;
                Ok(tape.sum(sq))
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_tensor(vec![3, 3], &mut rng);
        let b = {
            // keep b away from zero so div is well-conditioned
            let mut t = random_tensor(vec![3, 3], &mut rng);
            for v in &mut t.data {
                *v = *v + if *v >= 0.0 { 0.5 } else { -0.5 };
            }
            t
        };
        type OpBuilder = fn(&mut Tape, TensorId, TensorId) -> crate::error::Result<TensorId>;
        let cases: Vec<(&str, OpBuilder)> = vec![
            ("add", |t, x, y| t.add(x, y)),
            ("sub", |t, x, y| t.sub(x, y)),
            ("mul", |t, x, y| t.mul(x, y)),
            ("div", |t, x, y| t.div(x, y)),
        ];
        for (name, op) in cases {
            check_gradients(
                name,
                &|tape, ids| {
                    let r = op(tape, ids[0], ids[1])?;
                    let sq = tape.mul(r, r)?;
                    Ok(tape.sum(sq))
                },
                &[a.clone(), b.clone()],
                1e-5,
                1e-6,
            )
            .unwrap();
        }
    }

    #[test]
    fn unary_and_shape_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(vec![2, 6], &mut rng);
        // positive tensor for ln/sqrt
        let mut pos = random_tensor(vec![2, 6], &mut rng);
        for v in &mut pos.data {
            *v = v.abs() + 0.3;
        }

        check_gradients(
            "affine_scale",
            &|tape, ids| {
                let y = tape.affine(ids[0], 1.7, -0.4);
                let z = tape.scale(y, 2.5);
                let sq = tape.mul(z, z)?;
                Ok(tape.sum(sq))
            },
            std::slice::from_ref(&x),
            1e-5,
            1e-6,
        )
        .unwrap();

        check_gradients(
            "ln_sqrt_exp",
            &|tape, ids| {
                let l = tape.ln(ids[0]);
                let s = tape.sqrt(ids[0]);
                let e = tape.exp(l);
                let sum1 = tape.add(l, s)?;
                let sum2 = tape.add(sum1, e)?;
                Ok(tape.sum(sum2))
            },
            &[pos.clone()],
            1e-5,
            1e-6,
        )
        .unwrap();

        check_gradients(
            "abs",
            &|tape, ids| {
                let a = tape.abs(ids[0]);
                let sq = tape.mul(a, a)?;
                Ok(tape.sum(sq))
            },
            std::slice::from_ref(&x),
            1e-5,
            1e-7,
        )
        .unwrap();

        check_gradients(
            "clamp_min",
            &|tape, ids| {
                let c = tape.clamp_min(ids[0], 0.1);
                let sq = tape.mul(c, c)?;
                Ok(tape.sum(sq))
            },
            &[pos.clone()],
            1e-5,
            1e-7,
        )
        .unwrap();

        check_gradients(
            "transpose_reshape",
            &|tape, ids| {
                let t = tape.transpose(ids[0])?;
                let r = tape.reshape(t, vec![3, 4])?;
                let sq = tape.mul(r, r)?;
                Ok(tape.sum(sq))
            },
            std::slice::from_ref(&x),
            1e-5,
            1e-6,
        )
        .unwrap();

        check_gradients(
            "add_row",
            &|tape, ids| {
                let y = tape.add_row(ids[0], ids[1])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            },
            &[x.clone(), random_tensor(vec![6], &mut rng)],
            1e-5,
            1e-6,
        )
        .unwrap();

        check_gradients(
            "mean_sum_axis",
            &|tape, ids| {
                let m = tape.mean(ids[0]);
                let s0 = tape.sum_axis(ids[0], 0)?;
                let s1 = tape.sum_axis(ids[0], 1)?;
                let n0 = tape.l2_norm(s0, None)?;
                let n1 = tape.l2_norm(s1, None)?;
                let t = tape.add(n0, n1)?;
                tape.add(m, t)
            },
            std::slice::from_ref(&x),
            1e-5,
            1e-6,
        )
        .unwrap();
    }

    #[test]
    fn concat_split_roundtrip_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(vec![4, 6], &mut rng);
        for axis in [0usize, 1] {
            let mut tape = Tape::new();
            let id = tape.leaf_from(&x);
            let sizes = if axis == 0 { vec![1, 2, 1] } else { vec![2, 2, 2] };
            let parts = tape.split(id, axis, &sizes).unwrap();
            let back = tape.concat(&parts, axis).unwrap();
            assert_eq!(tape.data(back), x.data.as_slice(), "axis {axis}");
        }
        check_gradients(
            "split_concat",
            &|tape, ids| {
                let parts = tape.split(ids[0], 1, &[2, 4])?;
                let swapped = tape.concat(&[parts[1], parts[0]], 1)?;
                let sq = tape.mul(swapped, swapped)?;
                Ok(tape.sum(sq))
            },
            std::slice::from_ref(&x),
            1e-5,
            1e-6,
        )
        .unwrap();
    }

    #[test]
    fn cosine_hand_cases_and_gradient() {
        let mut tape = Tape::new();
        let v = tape.constant(vec![0.3, -2.0, 1.5], vec![3]).unwrap();
        let c = tape.cosine(v, v).unwrap();
        assert!((tape.scalar(c).unwrap() - 1.0).abs() < 1e-12);

        let z = tape.constant(vec![0.0; 3], vec![3]).unwrap();
        assert!(tape.cosine(v, z).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = vec![random_tensor(vec![5], &mut rng), random_tensor(vec![5], &mut rng)];
        check_gradients(
            "cosine",
            &|tape, ids| tape.cosine(ids[0], ids[1]),
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
    }

    #[test]
    fn backward_hand_cases() {
        // loss = sum(x): grad all ones
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1.0, 2.0, 3.0], vec![3]).unwrap().with_grad());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        // loss = sum(x*x): grad 2x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1.0, -2.0, 0.5], vec![3]).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);

        // non-scalar loss refuses
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0], vec![2]).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn composite_graph_gradient_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = vec![random_tensor(vec![3, 4], &mut rng), random_tensor(vec![4, 4], &mut rng)];
        let build = |tape: &mut Tape, ids: &[TensorId]| -> crate::error::Result<TensorId> {
            let mm = tape.matmul(ids[0], ids[1])?;
            let gain = tape.constant(vec![1.0; 4], vec![4])?;
            let bias = tape.constant(vec![0.0; 4], vec![4])?;
            let ln = tape.layer_norm(mm, gain, bias, 1e-6)?;
            let sm = tape.softmax(ln);
            let sq = tape.mul(sm, sm)?;
            Ok(tape.sum(sq))
        };
        check_gradients("composite", &build, &params, 1e-5, 1e-6).unwrap();

        // two identical runs give bit-identical grads; repeated backward on
        // one tape overwrites rather than accumulates
        let run = || {
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = params
                .iter()
                .map(|p| tape.leaf_from(&p.clone().with_grad()))
                .collect();
            let loss = build(&mut tape, &ids).unwrap();
            tape.backward(loss).unwrap();
            (tape.grad(ids[0]).unwrap().to_vec(), tape, ids, loss)
        };
        let (g1, _, _, _) = run();
        let (g2, mut tape, ids, loss) = run();
        assert_eq!(g1, g2);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(ids[0]).unwrap(), g1.as_slice());
    }

    #[test]
    fn rel_err_floors_small_magnitudes() {
        assert!(rel_err(1e-9, 0.0) < 1e-8);
        assert!(rel_err(2.0, 1.0) > 0.3);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            rows in 1usize..4,
            cols in 1usize..6,
            seed in any::<u64>(),
            shift in -50.0f64..50.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen::<f64>() * 20.0 - 10.0).collect();
            let mut tape = Tape::new();
            let x = tape.constant(data.clone(), vec![rows, cols]).unwrap();
            let s = tape.softmax(x);
            for row in tape.data(s).chunks_exact(cols) {
                let total: f64 = row.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
            let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
            let xs = tape.constant(shifted, vec![rows, cols]).unwrap();
            let ss = tape.softmax(xs);
            for (a, b) in tape.data(s).iter().zip(tape.data(ss)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
