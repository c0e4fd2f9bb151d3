//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the tape in reverse and returns [`Gradients`] for
//! every recorded node; parameter gradients can then be folded into a
//! [`ParamStore`]. Tapes are not reused across optimizer steps.

use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, ParamId, ParamStore, Result, Tensor,
    TensorError,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchedLinear {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxAxis {
        a: Var,
        argmax: Vec<usize>,
    },
    MeanAxis {
        a: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Stack {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
    },
    Concat {
        spans: Vec<(Var, usize, usize)>,
        outer: usize,
        row: usize,
    },
    Gather {
        a: Var,
        indices: Vec<usize>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    PairwiseL2(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Parameter gradients in tape order; a parameter used twice appears twice.
    pub fn params(&self) -> &[(ParamId, Vec<f64>)] {
        &self.params
    }

    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g);
        }
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
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

/// Output positions `o` in `[lo, hi)` for which `o*stride + k - pad` lands inside `[0, len)`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let (k, pad, stride, len) = (k as i64, pad as i64, stride as i64, len as i64);
    let lo = if pad > k { (pad - k + stride - 1) / stride } else { 0 };
    let lim = len + pad - k;
    let hi = if lim <= 0 { 0 } else { (lim + stride - 1) / stride };
    let hi = hi.min(out_len as i64).max(0) as usize;
    (lo.max(0) as usize, hi.max(lo.max(0) as usize))
}

struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records the current value of a parameter; its gradient is reported under `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(op, &sa, &sb)?;
        let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; out.iter().product()];
        for_each_broadcast(&out, &ta, &tb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
        Tensor::new(out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        self.push(t, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x + s).collect())
            .expect("same shape");
        self.push(t, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x.max(0.0)).collect())
            .expect("same shape");
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| sigmoid(x)).collect())
            .expect("same shape");
        self.push(t, Op::Sigmoid(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let &[r, c] = v.shape() else {
            return Err(invalid("transpose", format!("expects rank 2, got {:?}", v.shape())));
        };
        let d = v.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    fn conv_geom(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<ConvGeom> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (&[n, ci, h, wd], &[co, wci, kh, kw]) = (xs, ws) else {
            return Err(mismatch(op, xs, ws));
        };
        if wci != ci || bs != [co] {
            return Err(mismatch(op, xs, ws));
        }
        if stride == 0 {
            return Err(invalid(op, "stride must be positive"));
        }
        if h + 2 * pad_h < kh || wd + 2 * pad_w < kw {
            return Err(invalid(op, format!("kernel {kh}x{kw} larger than padded input {xs:?}")));
        }
        Ok(ConvGeom {
            n,
            ci,
            h,
            w: wd,
            co,
            kh,
            kw,
            ho: (h + 2 * pad_h - kh) / stride + 1,
            wo: (wd + 2 * pad_w - kw) / stride + 1,
            stride,
            pad_h,
            pad_w,
        })
    }

    /// 2-D cross-correlation. `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`,
    /// symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv_general("conv2d", x, w, b, stride, pad, pad)
    }

    /// 1-D cross-correlation with stride 1. `x: [Cin, L]` or `[N, Cin, L]`,
    /// `w: [Cout, Cin, k]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (n, ci, l) = match *xs.as_slice() {
            [ci, l] => (None, ci, l),
            [n, ci, l] => (Some(n), ci, l),
            _ => return Err(mismatch("conv1d", &xs, &ws)),
        };
        let &[co, wci, k] = ws.as_slice() else {
            return Err(mismatch("conv1d", &xs, &ws));
        };
        if wci != ci {
            return Err(mismatch("conv1d", &xs, &ws));
        }
        let x4 = self.reshape(x, &[n.unwrap_or(1), ci, 1, l])?;
        let w4 = self.reshape(w, &[co, ci, 1, k])?;
        let y = self.conv_general("conv1d", x4, w4, b, 1, 0, pad)?;
        let lo = self.shape(y)[3];
        match n {
            Some(n) => self.reshape(y, &[n, co, lo]),
            None => self.reshape(y, &[co, lo]),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_general(
        &mut self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<Var> {
        let g = self.conv_geom(op, x, w, b, stride, pad_h, pad_w)?;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let plane_in = g.h * g.w;
        let plane_out = g.ho * g.wo;
        let mut out = vec![0.0; g.n * g.co * plane_out];
        for n in 0..g.n {
            for co in 0..g.co {
                let out_plane = &mut out[(n * g.co + co) * plane_out..][..plane_out];
                out_plane.fill(bd[co]);
                for ci in 0..g.ci {
                    let in_plane = &xd[(n * g.ci + ci) * plane_in..][..plane_in];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = valid_range(ky, g.pad_h, g.stride, g.h, g.ho);
                        for kx in 0..g.kw {
                            let wv = wd[((co * g.ci + ci) * g.kh + ky) * g.kw + kx];
                            let (ox0, ox1) = valid_range(kx, g.pad_w, g.stride, g.w, g.wo);
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.pad_h;
                                let in_row = &in_plane[iy * g.w..][..g.w];
                                let out_row = &mut out_plane[oy * g.wo..][..g.wo];
                                if g.stride == 1 {
                                    let src = &in_row[ox0 + kx - g.pad_w..ox1 + kx - g.pad_w];
                                    for (o, i) in out_row[ox0..ox1].iter_mut().zip(src) {
                                        *o += wv * i;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        out_row[ox] += wv * in_row[ox * g.stride + kx - g.pad_w];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![g.n, g.co, g.ho, g.wo], out)?;
        Ok(self.push(
            t,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad_h,
                pad_w,
            },
        ))
    }

    /// `x: [n, in]`, `w: [out, in]`, `b: [out]` → `[n, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (&[n, din], &[dout, wdin]) = (xs, ws) else {
            return Err(mismatch("linear", xs, ws));
        };
        if din != wdin || bs != [dout] {
            return Err(mismatch("linear", xs, ws));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let xr = &xd[i * din..][..din];
            for o in 0..dout {
                let wr = &wd[o * din..][..din];
                out[i * dout + o] = bd[o] + dot(xr, wr);
            }
        }
        let t = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    /// Independent linear map per leading index:
    /// `x: [G, in]` or `[G, n, in]`, `w: [G, out, in]`, `b: [G, out]` → `[G, out]` or `[G, n, out]`.
    pub fn batched_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (ng, rows, din, out_rank3) = match *xs {
            [ng, din] => (ng, 1, din, false),
            [ng, rows, din] => (ng, rows, din, true),
            _ => return Err(mismatch("batched_linear", xs, ws)),
        };
        let &[wg, dout, wdin] = ws else {
            return Err(mismatch("batched_linear", xs, ws));
        };
        if ng != wg || din != wdin || bs != [ng, dout] {
            return Err(mismatch("batched_linear", xs, ws));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; ng * rows * dout];
        for k in 0..ng {
            for r in 0..rows {
                let xr = &xd[(k * rows + r) * din..][..din];
                for o in 0..dout {
                    let wr = &wd[(k * dout + o) * din..][..din];
                    out[(k * rows + r) * dout + o] = bd[k * dout + o] + dot(xr, wr);
                }
            }
        }
        let shape = if out_rank3 { vec![ng, rows, dout] } else { vec![ng, dout] };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::BatchedLinear { x, w, b }))
    }

    fn axis_split(&self, op: &'static str, a: Var, axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(invalid(op, format!("axis {axis} out of range for shape {s:?}")));
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        let mut out_shape = s.to_vec();
        out_shape.remove(axis);
        Ok((outer, s[axis], inner, out_shape))
    }

    /// Maximum over one axis (removed from the output). Ties resolve to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.axis_split("max_axis", a, axis)?;
        if n == 0 {
            return Err(invalid("max_axis", "empty axis"));
        }
        let d = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    let v = d[base + i];
                    let slot = o * inner + i;
                    if k == 0 || v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = base + i;
                    }
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MaxAxis { a, argmax }))
    }

    /// Arithmetic mean over one axis (removed from the output).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner, shape) = self.axis_split("mean_axis", a, axis)?;
        if n == 0 {
            return Err(invalid("mean_axis", "empty axis"));
        }
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::MeanAxis {
                a,
                outer,
                n,
                inner,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).data();
        if d.is_empty() {
            return Err(invalid("mean", "empty tensor"));
        }
        let s = d.iter().sum::<f64>() / d.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a)))
    }

    /// Stacks equally shaped tensors along a new axis at position `axis`.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("stack", "no inputs"))?;
        let shape = self.shape(*first).to_vec();
        if axis > shape.len() {
            return Err(invalid("stack", format!("axis {axis} out of range for {shape:?}")));
        }
        for p in parts {
            if self.shape(*p) != shape.as_slice() {
                return Err(mismatch("stack", &shape, self.shape(*p)));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let k = parts.len();
        let mut out = vec![0.0; outer * k * inner];
        for (j, p) in parts.iter().enumerate() {
            let d = self.value(*p).data();
            for o in 0..outer {
                out[(o * k + j) * inner..][..inner].copy_from_slice(&d[o * inner..][..inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, k);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            t,
            Op::Stack {
                parts: parts.to_vec(),
                outer,
                inner,
            },
        ))
    }

    /// Concatenates along an existing axis.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let shape = self.shape(*first).to_vec();
        if axis >= shape.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {shape:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == shape.len()
                && s.iter()
                    .zip(&shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &shape, s));
            }
            total += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let row = total * inner;
        let mut data = vec![0.0; outer * row];
        let mut spans = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for p in parts {
            let width = self.shape(*p)[axis] * inner;
            let d = self.value(*p).data();
            for o in 0..outer {
                data[o * row + offset..][..width].copy_from_slice(&d[o * width..][..width]);
            }
            spans.push((*p, offset, width));
            offset += width;
        }
        let mut out_shape = shape;
        out_shape[axis] = total;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Concat { spans, outer, row }))
    }

    /// Gathers elements by flat index into a rank-1 tensor.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let d = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= d.len()) {
            return Err(invalid("gather", format!("index {bad} out of range for {} elements", d.len())));
        }
        let out: Vec<f64> = indices.iter().map(|&i| d[i]).collect();
        Ok(self.push(Tensor::from_vec(out), Op::Gather { a, indices }))
    }

    /// Mean softmax cross-entropy of `logits: [n, K]` against integer labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let &[n, k] = s else {
            return Err(invalid("softmax_xent", format!("expects [n, K], got {s:?}")));
        };
        if labels.len() != n || n == 0 {
            return Err(invalid("softmax_xent", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid("softmax_xent", format!("label {bad} out of range for {k} classes")));
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &d[i * k..][..k];
            let lse = log_sum_exp(row);
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        loss /= n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Euclidean distances between all row pairs within each batch slice:
    /// `[B, n, d]` → `[B, n, n]`.
    pub fn pairwise_l2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let &[nb, n, d] = s else {
            return Err(invalid("pairwise_l2", format!("expects [B, n, d], got {s:?}")));
        };
        let x = self.value(a).data();
        let mut out = vec![0.0; nb * n * n];
        for b in 0..nb {
            for i in 0..n {
                for j in (i + 1)..n {
                    let xi = &x[(b * n + i) * d..][..d];
                    let xj = &x[(b * n + j) * d..][..d];
                    let dist = xi
                        .iter()
                        .zip(xj)
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum::<f64>()
                        .sqrt();
                    out[(b * n + i) * n + j] = dist;
                    out[(b * n + j) * n + i] = dist;
                }
            }
        }
        let t = Tensor::new(vec![nb, n, n], out)?;
        Ok(self.push(t, Op::PairwiseL2(a)))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        self.backward_from(&[(loss, Tensor::scalar(1.0))])
    }

    /// Runs `backward` and adds the parameter gradients into `store`.
    /// Repeated calls accumulate; call [`ParamStore::zero_grad`] between steps.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(())
    }

    /// Reverse sweep seeded with explicit upstream gradients for any set of nodes.
    pub fn backward_from(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(mismatch("backward", self.shape(*v), g.shape()));
            }
            accumulate(&mut grads, *v, g.data());
            start = start.max(v.0 + 1);
        }
        let mut params = Vec::new();
        for idx in (0..start).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut Vec<(ParamId, Vec<f64>)>,
    ) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.push((*id, g.to_vec())),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let out = node.value.shape();
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ta, tb) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
                let mut ga = vec![0.0; self.value(*a).len()];
                let mut gb = vec![0.0; self.value(*b).len()];
                for_each_broadcast(out, &ta, &tb, |o, ia, ib| {
                    ga[ia] += g[o];
                    gb[ib] += sign * g[o];
                });
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Mul(a, b) => {
                let out = node.value.shape();
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ta, tb) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for_each_broadcast(out, &ta, &tb, |o, ia, ib| {
                    ga[ia] += g[o] * db[ib];
                    gb[ib] += g[o] * da[ia];
                });
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                accumulate(grads, *a, &ga);
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, *a, g),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let ga: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Transpose(a) => {
                let &[r, c] = self.shape(*a) else { unreachable!() };
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad_h,
                pad_w,
            } => {
                let geom = self
                    .conv_geom("conv", *x, *w, *b, *stride, *pad_h, *pad_w)
                    .expect("validated in forward");
                let (gx, gw, gb) = self.conv_backward(&geom, *x, *w, g);
                accumulate(grads, *x, &gx);
                accumulate(grads, *w, &gw);
                accumulate(grads, *b, &gb);
            }
            Op::Linear { x, w, b } => {
                let &[n, din] = self.shape(*x) else { unreachable!() };
                let dout = self.shape(*w)[0];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut gx = vec![0.0; n * din];
                let mut gw = vec![0.0; dout * din];
                let mut gb = vec![0.0; dout];
                for i in 0..n {
                    for o in 0..dout {
                        let go = g[i * dout + o];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        for k in 0..din {
                            gx[i * din + k] += go * wd[o * din + k];
                            gw[o * din + k] += go * xd[i * din + k];
                        }
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *w, &gw);
                accumulate(grads, *b, &gb);
            }
            Op::BatchedLinear { x, w, b } => {
                let (ng, din) = (self.shape(*w)[0], self.shape(*w)[2]);
                let dout = self.shape(*w)[1];
                let rows = self.value(*x).len() / (ng * din);
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut gx = vec![0.0; ng * rows * din];
                let mut gw = vec![0.0; ng * dout * din];
                let mut gb = vec![0.0; ng * dout];
                for k in 0..ng {
                    for r in 0..rows {
                        let xo = (k * rows + r) * din;
                        for o in 0..dout {
                            let go = g[(k * rows + r) * dout + o];
                            gb[k * dout + o] += go;
                            let wo = (k * dout + o) * din;
                            for i in 0..din {
                                gx[xo + i] += go * wd[wo + i];
                                gw[wo + i] += go * xd[xo + i];
                            }
                        }
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *w, &gw);
                accumulate(grads, *b, &gb);
            }
            Op::MaxAxis { a, argmax } => {
                let mut ga = vec![0.0; self.value(*a).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    ga[src] += g[o];
                }
                accumulate(grads, *a, &ga);
            }
            Op::MeanAxis {
                a,
                outer,
                n,
                inner,
            } => {
                let inv = 1.0 / *n as f64;
                let mut ga = vec![0.0; outer * n * inner];
                for o in 0..*outer {
                    for k in 0..*n {
                        for i in 0..*inner {
                            ga[(o * n + k) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(*a).len()];
                accumulate(grads, *a, &ga);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let ga = vec![g[0] / n as f64; n];
                accumulate(grads, *a, &ga);
            }
            Op::Stack {
                parts,
                outer,
                inner,
            } => {
                let k = parts.len();
                for (j, p) in parts.iter().enumerate() {
                    let mut gp = vec![0.0; outer * inner];
                    for o in 0..*outer {
                        gp[o * inner..][..*inner]
                            .copy_from_slice(&g[(o * k + j) * inner..][..*inner]);
                    }
                    accumulate(grads, *p, &gp);
                }
            }
            Op::Concat { spans, outer, row } => {
                for &(p, offset, width) in spans {
                    let mut gp = vec![0.0; outer * width];
                    for o in 0..*outer {
                        gp[o * width..][..width].copy_from_slice(&g[o * row + offset..][..width]);
                    }
                    accumulate(grads, p, &gp);
                }
            }
            Op::Gather { a, indices } => {
                let mut ga = vec![0.0; self.value(*a).len()];
                for (gi, &src) in g.iter().zip(indices) {
                    ga[src] += gi;
                }
                accumulate(grads, *a, &ga);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut gl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * k + l] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                accumulate(grads, *logits, &gl);
            }
            Op::PairwiseL2(a) => {
                let &[nb, n, d] = self.shape(*a) else { unreachable!() };
                let x = self.value(*a).data();
                let dist = node.value.data();
                let mut ga = vec![0.0; x.len()];
                for b in 0..nb {
                    for i in 0..n {
                        for j in 0..n {
                            let dij = dist[(b * n + i) * n + j];
                            let gij = g[(b * n + i) * n + j];
                            // zero distance: use the zero subgradient
                            if i == j || dij == 0.0 || gij == 0.0 {
                                continue;
                            }
                            let coef = gij / dij;
                            for t in 0..d {
                                let diff = x[(b * n + i) * d + t] - x[(b * n + j) * d + t];
                                ga[(b * n + i) * d + t] += coef * diff;
                                ga[(b * n + j) * d + t] -= coef * diff;
                            }
                        }
                    }
                }
                accumulate(grads, *a, &ga);
            }
        }
    }

    fn conv_backward(&self, g: &ConvGeom, x: Var, w: Var, gout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let plane_in = g.h * g.w;
        let plane_out = g.ho * g.wo;
        let mut gx = vec![0.0; xd.len()];
        let mut gw = vec![0.0; wd.len()];
        let mut gb = vec![0.0; g.co];
        for n in 0..g.n {
            for co in 0..g.co {
                let g_plane = &gout[(n * g.co + co) * plane_out..][..plane_out];
                gb[co] += g_plane.iter().sum::<f64>();
                for ci in 0..g.ci {
                    let in_off = (n * g.ci + ci) * plane_in;
                    for ky in 0..g.kh {
                        let (oy0, oy1) = valid_range(ky, g.pad_h, g.stride, g.h, g.ho);
                        for kx in 0..g.kw {
                            let widx = ((co * g.ci + ci) * g.kh + ky) * g.kw + kx;
                            let wv = wd[widx];
                            let (ox0, ox1) = valid_range(kx, g.pad_w, g.stride, g.w, g.wo);
                            let mut acc = 0.0;
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.pad_h;
                                let row = in_off + iy * g.w;
                                let g_row = &g_plane[oy * g.wo..][..g.wo];
                                if g.stride == 1 {
                                    let lo = row + ox0 + kx - g.pad_w;
                                    let n = ox1 - ox0;
                                    let gs = &g_row[ox0..ox1];
                                    acc += dot(gs, &xd[lo..lo + n]);
                                    for (gxi, go) in gx[lo..lo + n].iter_mut().zip(gs) {
                                        *gxi += go * wv;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        let ix = row + ox * g.stride + kx - g.pad_w;
                                        let go = g_row[ox];
                                        acc += go * xd[ix];
                                        gx[ix] += go * wv;
                                    }
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
