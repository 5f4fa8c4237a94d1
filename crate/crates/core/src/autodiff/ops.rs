use super::{accumulate, Node, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::tensor::{Elem, Tensor};

const GELU_C: Elem = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Elem = 0.044_715;

/// Which (query, key) pairs may attend. Row-major `[queries, keys]`,
/// `true` = allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..queries * keys).map(|i| f(i / keys, i % keys)).collect();
        Self { queries, keys, allowed }
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.queries, self.keys)
    }
}

/// Bilinear interpolation plan: for each output element, up to four
/// `(input index, weight)` taps.
pub(crate) struct ResizePlan {
    taps: Vec<[(usize, Elem); 4]>,
}

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batched: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale(Var, Elem),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Elem>,
        rstd: Vec<Elem>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    MeanRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Elem>,
    },
    BceWithLogits {
        z: Var,
        target: Vec<Elem>,
    },
    Dice {
        z: Var,
        target: Vec<Elem>,
        smooth: Elem,
    },
    Resize {
        x: Var,
        plan: ResizePlan,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            AddBias { x, bias } => vec![*x, *bias],
            Scale(x, _) | Relu(x) | Gelu(x) | Reshape(x) | Sum(x) | MeanRows(x) => vec![*x],
            Softmax { x, .. } | Gather { x, .. } | Resize { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat { inputs, .. } => inputs.clone(),
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            BceWithLogits { z, .. } | Dice { z, .. } => vec![*z],
        }
    }
}

fn sigmoid(z: Elem) -> Elem {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn binary_targets(op: &'static str, z: &Tensor, target: &Tensor) -> Result<Vec<Elem>> {
    same_shape(op, z, target)?;
    if let Some(bad) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::Validation(format!("{op}: target value {bad} is not 0 or 1")));
    }
    Ok(target.data().to_vec())
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    /// Matrix product.
    ///
    /// `a: [.., m, k]` times `b: [k, n]` (leading dims of `a` are folded
    /// into rows), or batched `[B, m, k] x [B, k, n]`. With `trans_b`, `b`
    /// is given as its transpose.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let mismatch = || {
            Error::shape(
                "matmul",
                format!("{:?} x {:?}{}", av.shape(), bv.shape(), if trans_b { "^T" } else { "" }),
            )
        };
        if av.rank() < 2 || !(bv.rank() == 2 || bv.rank() == 3) {
            return Err(mismatch());
        }
        let batched = bv.rank() == 3;
        let k = av.last_dim();
        let m = av.shape()[av.rank() - 2];
        let (bk, n) = {
            let s = &bv.shape()[bv.rank() - 2..];
            if trans_b {
                (s[1], s[0])
            } else {
                (s[0], s[1])
            }
        };
        if bk != k {
            return Err(mismatch());
        }
        let mut out_shape = av.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; out_shape.iter().product()];
        if batched {
            if av.rank() != 3 || av.shape()[0] != bv.shape()[0] {
                return Err(mismatch());
            }
            let batch = av.shape()[0];
            for bi in 0..batch {
                let bm = MatRef::dense(bv.data(), bi * k * n, bv.shape()[1], bv.shape()[2]);
                gemm(
                    1.0,
                    MatRef::dense(av.data(), bi * m * k, m, k),
                    if trans_b { bm.t() } else { bm },
                    0.0,
                    MatMut::dense(&mut out, bi * m * n, m, n),
                );
            }
        } else {
            let rows = av.rows();
            let bm = MatRef::dense(bv.data(), 0, bv.shape()[0], bv.shape()[1]);
            gemm(
                1.0,
                MatRef::dense(av.data(), 0, rows, k),
                if trans_b { bm.t() } else { bm },
                0.0,
                MatMut::dense(&mut out, 0, rows, n),
            );
        }
        let value = Tensor::from_parts(out_shape, out);
        self.push_op("matmul", value, Op::MatMul { a, b, trans_b, batched })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    fn elementwise(&mut self, name: &'static str, a: Var, b: Var, f: fn(Elem, Elem) -> Elem, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push_op(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[d]` vector to every row of `x: [.., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.last_dim();
        if bv.shape() != [d] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push_op("add_bias", value, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, c: Elem) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push_op("scale", value, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push_op("relu", value, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push_op("gelu", value, Op::Gelu(x))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {:?}", xv.shape()),
            ));
        }
        let (outer, len, inner) = axis_extents(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| src[at(i)]).fold(Elem::NEG_INFINITY, Elem::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[at(i)] /= sum;
                }
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push_op("softmax", value, Op::Softmax { x, axis })
    }

    /// Layer normalization over the last axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Elem) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<Elem>() / d as Elem;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Elem>() / d as Elem;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push_op(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != index.len() || shape.contains(&0) {
            return Err(Error::shape(
                "gather",
                format!("{} indices cannot fill {shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.numel()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {:?}", xv.shape()),
            ));
        }
        let src = xv.data();
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_parts(shape.to_vec(), data);
        self.push_op("gather", value, Op::Gather { x, index })
    }

    /// Rows `start..end` of `x: [rows, d]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || start >= end || end > shape[0] {
            return Err(Error::shape("slice_rows", format!("rows {start}..{end} of {shape:?}")));
        }
        let d = shape[1];
        self.gather(x, (start * d..end * d).collect(), &[end - start, d])
    }

    /// Picks rows of `x: [rows, d]` in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(Error::shape("select_rows", format!("rows {rows:?} of {shape:?}")));
        }
        let d = shape[1];
        let index = rows.iter().flat_map(|&r| r * d..(r + 1) * d).collect();
        self.gather(x, index, &[rows.len(), d])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("transpose", format!("{shape:?} is not a matrix")));
        }
        let (r, c) = (shape[0], shape[1]);
        let index = (0..r * c).map(|i| (i % r) * c + i / r).collect();
        self.gather(x, index, &[c, r])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let value = xv
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", xv.shape())))?;
        self.push_op("reshape", value, Op::Reshape(x))
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::from_parts(out_shape, data);
        self.push_op(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op("sum", value, Op::Sum(x))
    }

    /// Mean over rows of `x: [rows, d]`, shape `[1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("mean_rows", format!("{:?} is not a matrix", xv.shape())));
        }
        let (rows, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; d];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as Elem);
        let value = Tensor::from_parts(vec![1, d], out);
        self.push_op("mean_rows", value, Op::MeanRows(x))
    }

    /// Scaled dot-product multi-head attention.
    ///
    /// `q: [n, D]`, `k, v: [m, D]` with `D` split evenly into `heads`
    /// contiguous column groups. Masked pairs get exactly zero weight; a
    /// query with no allowed key produces a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&AttentionMask>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let bad = || {
            Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, {heads} heads",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                ),
            )
        };
        if qv.rank() != 2 || kv.rank() != 2 || kv.shape() != vv.shape() {
            return Err(bad());
        }
        let (n, dim) = (qv.shape()[0], qv.shape()[1]);
        let m = kv.shape()[0];
        if kv.shape()[1] != dim || heads == 0 || dim % heads != 0 {
            return Err(bad());
        }
        if let Some(mask) = mask {
            if mask.dims() != (n, m) {
                return Err(Error::shape(
                    "attention",
                    format!("mask {:?} for {n} queries and {m} keys", mask.dims()),
                ));
            }
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as Elem).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * dim];
        for h in 0..heads {
            let qh = head_view(qv.data(), n, dim, h, dh);
            let kh = head_view(kv.data(), m, dim, h, dh);
            let scores = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(scale, qh, kh.t(), 0.0, MatMut::dense(scores, 0, n, m));
            for i in 0..n {
                let row = &mut scores[i * m..(i + 1) * m];
                masked_softmax_row(row, |j| mask.is_none_or(|mk| mk.allowed(i, j)));
            }
            let vh = head_view(vv.data(), m, dim, h, dh);
            gemm(
                1.0,
                MatRef::dense(&probs, h * n * m, n, m),
                vh,
                0.0,
                head_view_mut(&mut out, n, dim, h, dh),
            );
        }
        let value = Tensor::from_parts(vec![n, dim], out);
        self.push_op("attention", value, Op::Attention { q, k, v, heads, probs })
    }

    /// Mean binary cross-entropy on logits, computed as
    /// `max(z,0) - z*t + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor) -> Result<Var> {
        let zv = self.value(z);
        let target = binary_targets("bce_with_logits", zv, target)?;
        let n = target.len() as Elem;
        let total: Elem = zv
            .data()
            .iter()
            .zip(&target)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        self.push_op(
            "bce_with_logits",
            Tensor::scalar(total / n),
            Op::BceWithLogits { z, target },
        )
    }

    /// Soft dice loss on `sigmoid(z)`:
    /// `1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)`.
    pub fn dice_with_logits(&mut self, z: Var, target: &Tensor, smooth: Elem) -> Result<Var> {
        let zv = self.value(z);
        let target = binary_targets("dice_with_logits", zv, target)?;
        let (mut inter, mut psum) = (0.0, 0.0);
        for (&z, &t) in zv.data().iter().zip(&target) {
            let p = sigmoid(z);
            inter += p * t;
            psum += p;
        }
        let tsum: Elem = target.iter().sum();
        let loss = 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth);
        self.push_op("dice_with_logits", Tensor::scalar(loss), Op::Dice { z, target, smooth })
    }

    /// Bilinear resize of a `[h, w]` map (half-pixel centers, edge clamp).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || out_h == 0 || out_w == 0 {
            return Err(Error::shape(
                "resize_bilinear",
                format!("{:?} -> [{out_h}, {out_w}]", xv.shape()),
            ));
        }
        let (h, w) = (xv.shape()[0], xv.shape()[1]);
        let plan = ResizePlan::bilinear(h, w, out_h, out_w);
        let data = plan
            .taps
            .iter()
            .map(|taps| taps.iter().map(|&(i, wt)| xv.data()[i] * wt).sum())
            .collect();
        let value = Tensor::from_parts(vec![out_h, out_w], data);
        self.push_op("resize_bilinear", value, Op::Resize { x, plan })
    }
}

impl ResizePlan {
    fn bilinear(h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, Elem)> {
            (0..n_out)
                .map(|o| {
                    let src = ((o as Elem + 0.5) * n_in as Elem / n_out as Elem - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(n_in - 1);
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, src - i0 as Elem)
                })
                .collect()
        };
        let ys = axis(h, out_h);
        let xs = axis(w, out_w);
        let mut taps = Vec::with_capacity(out_h * out_w);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                taps.push([
                    (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * w + x1, (1.0 - fy) * fx),
                    (y1 * w + x0, fy * (1.0 - fx)),
                    (y1 * w + x1, fy * fx),
                ]);
            }
        }
        Self { taps }
    }
}

fn head_view(data: &[Elem], rows: usize, dim: usize, h: usize, dh: usize) -> MatRef<'_> {
    MatRef {
        data,
        offset: h * dh,
        rows,
        cols: dh,
        rs: dim,
        cs: 1,
    }
}

fn head_view_mut(data: &mut [Elem], rows: usize, dim: usize, h: usize, dh: usize) -> MatMut<'_> {
    MatMut {
        data,
        offset: h * dh,
        rows,
        cols: dh,
        rs: dim,
        cs: 1,
    }
}

fn masked_softmax_row(row: &mut [Elem], allowed: impl Fn(usize) -> bool) {
    let mut max = Elem::NEG_INFINITY;
    for (j, &s) in row.iter().enumerate() {
        if allowed(j) {
            max = max.max(s);
        }
    }
    if max == Elem::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, s) in row.iter_mut().enumerate() {
        *s = if allowed(j) { (*s - max).exp() } else { 0.0 };
        sum += *s;
    }
    row.iter_mut().for_each(|s| *s /= sum);
}

/// Applies the chain rule for node `i` with upstream gradient `g`.
pub(crate) fn backward_op(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let needs = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    let gd = g.data();

    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b, batched } => {
            let (av, bv) = (val(*a), val(*b));
            let k = av.last_dim();
            let n = out.last_dim();
            if *batched {
                let batch = av.shape()[0];
                let m = av.shape()[1];
                let (br, bc) = (bv.shape()[1], bv.shape()[2]);
                if needs(*a) {
                    let mut da = vec![0.0; av.numel()];
                    for bi in 0..batch {
                        let bm = MatRef::dense(bv.data(), bi * br * bc, br, bc);
                        // dA = dC . B^T  (or dC . B when B was given transposed)
                        gemm(
                            1.0,
                            MatRef::dense(gd, bi * m * n, m, n),
                            if *trans_b { bm } else { bm.t() },
                            0.0,
                            MatMut::dense(&mut da, bi * m * k, m, k),
                        );
                    }
                    accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; bv.numel()];
                    for bi in 0..batch {
                        let am = MatRef::dense(av.data(), bi * m * k, m, k);
                        let gm = MatRef::dense(gd, bi * m * n, m, n);
                        if *trans_b {
                            gemm(1.0, gm.t(), am, 0.0, MatMut::dense(&mut db, bi * n * k, n, k));
                        } else {
                            gemm(1.0, am.t(), gm, 0.0, MatMut::dense(&mut db, bi * k * n, k, n));
                        }
                    }
                    accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            } else {
                let rows = av.rows();
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let bm = MatRef::dense(bv.data(), 0, br, bc);
                if needs(*a) {
                    let mut da = vec![0.0; av.numel()];
                    gemm(
                        1.0,
                        MatRef::dense(gd, 0, rows, n),
                        if *trans_b { bm } else { bm.t() },
                        0.0,
                        MatMut::dense(&mut da, 0, rows, k),
                    );
                    accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; bv.numel()];
                    let am = MatRef::dense(av.data(), 0, rows, k);
                    let gm = MatRef::dense(gd, 0, rows, n);
                    if *trans_b {
                        gemm(1.0, gm.t(), am, 0.0, MatMut::dense(&mut db, 0, n, k));
                    } else {
                        gemm(1.0, am.t(), gm, 0.0, MatMut::dense(&mut db, 0, k, n));
                    }
                    accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
        }
        Op::Add(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone());
            }
            if needs(*b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone());
            }
            if needs(*b) {
                accumulate(grads, *b, g.map(|x| -x));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let d = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), d));
            }
            if needs(*b) {
                let d = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), d));
            }
        }
        Op::AddBias { x, bias } => {
            if needs(*x) {
                accumulate(grads, *x, g.clone());
            }
            if needs(*bias) {
                let d = g.last_dim();
                let mut db = vec![0.0; d];
                for row in gd.chunks(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, *bias, Tensor::from_parts(vec![d], db));
            }
        }
        Op::Scale(x, c) => {
            if needs(*x) {
                accumulate(grads, *x, g.map(|v| v * c));
            }
        }
        Op::Relu(x) => {
            if needs(*x) {
                let xv = val(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
        }
        Op::Gelu(x) => {
            if needs(*x) {
                let xv = val(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &x)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
        }
        Op::Softmax { x, axis } => {
            if needs(*x) {
                let y = out.data();
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: Elem = (0..len).map(|i| gd[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            dx[at(i)] = y[at(i)] * (gd[at(i)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma);
            let d = gv.numel();
            let rows = rstd.len();
            if needs(*x) {
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        let dh = gd[r * d + c] * gv.data()[c];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + c];
                    }
                    mean_dh /= d as Elem;
                    mean_dh_h /= d as Elem;
                    for c in 0..d {
                        let dh = gd[r * d + c] * gv.data()[c];
                        dx[r * d + c] = rstd[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
            }
            if needs(*gamma) {
                let mut dg = vec![0.0; d];
                for r in 0..rows {
                    for c in 0..d {
                        dg[c] += gd[r * d + c] * xhat[r * d + c];
                    }
                }
                accumulate(grads, *gamma, Tensor::from_parts(vec![d], dg));
            }
            if needs(*beta) {
                let mut db = vec![0.0; d];
                for row in gd.chunks(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, *beta, Tensor::from_parts(vec![d], db));
            }
        }
        Op::Gather { x, index } => {
            if needs(*x) {
                let xv = val(*x);
                let mut dx = vec![0.0; xv.numel()];
                for (&src, &g) in index.iter().zip(gd) {
                    dx[src] += g;
                }
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
        }
        Op::Reshape(x) => {
            if needs(*x) {
                let shape = val(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::from_parts(shape, gd.to_vec()));
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = axis_extents(out.shape(), *axis);
            let total_block = out.shape()[*axis] * inner;
            let mut start = 0;
            for &v in inputs {
                let shape = val(v).shape();
                let block = shape[*axis] * inner;
                if needs(v) {
                    let mut d = Vec::with_capacity(val(v).numel());
                    for o in 0..outer {
                        let base = o * total_block + start;
                        d.extend_from_slice(&gd[base..base + block]);
                    }
                    accumulate(grads, v, Tensor::from_parts(shape.to_vec(), d));
                }
                start += block;
            }
        }
        Op::Sum(x) => {
            if needs(*x) {
                let shape = val(*x).shape();
                accumulate(grads, *x, Tensor::full(shape, gd[0]));
            }
        }
        Op::MeanRows(x) => {
            if needs(*x) {
                let shape = val(*x).shape();
                let rows = shape[0] as Elem;
                let d = shape[1];
                let data = (0..shape[0] * d).map(|i| gd[i % d] / rows).collect();
                accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), data));
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (n, dim) = (qv.shape()[0], qv.shape()[1]);
            let m = kv.shape()[0];
            let dh = dim / heads;
            let scale = 1.0 / (dh as Elem).sqrt();
            let mut dq = vec![0.0; n * dim];
            let mut dk = vec![0.0; m * dim];
            let mut dv = vec![0.0; m * dim];
            let mut ds = vec![0.0; n * m];
            for h in 0..*heads {
                let p = MatRef::dense(probs, h * n * m, n, m);
                let go = head_view(gd, n, dim, h, dh);
                // dV = P^T dO
                gemm(1.0, p.t(), go, 0.0, head_view_mut(&mut dv, m, dim, h, dh));
                // dP = dO V^T, then softmax backward into dS (scaled).
                gemm(
                    1.0,
                    go,
                    head_view(vv.data(), m, dim, h, dh).t(),
                    0.0,
                    MatMut::dense(&mut ds, 0, n, m),
                );
                let ph = &probs[h * n * m..(h + 1) * n * m];
                for i in 0..n {
                    let row = &mut ds[i * m..(i + 1) * m];
                    let prow = &ph[i * m..(i + 1) * m];
                    let dot: Elem = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (d, &pp) in row.iter_mut().zip(prow) {
                        *d = pp * (*d - dot) * scale;
                    }
                }
                let dsm = MatRef::dense(&ds, 0, n, m);
                gemm(
                    1.0,
                    dsm,
                    head_view(kv.data(), m, dim, h, dh),
                    0.0,
                    head_view_mut(&mut dq, n, dim, h, dh),
                );
                gemm(
                    1.0,
                    dsm.t(),
                    head_view(qv.data(), n, dim, h, dh),
                    0.0,
                    head_view_mut(&mut dk, m, dim, h, dh),
                );
            }
            if needs(*q) {
                accumulate(grads, *q, Tensor::from_parts(vec![n, dim], dq));
            }
            if needs(*k) {
                accumulate(grads, *k, Tensor::from_parts(vec![m, dim], dk));
            }
            if needs(*v) {
                accumulate(grads, *v, Tensor::from_parts(vec![m, dim], dv));
            }
        }
        Op::BceWithLogits { z, target } => {
            if needs(*z) {
                let zv = val(*z);
                let n = target.len() as Elem;
                let d = zv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| gd[0] * (sigmoid(z) - t) / n)
                    .collect();
                accumulate(grads, *z, Tensor::from_parts(zv.shape().to_vec(), d));
            }
        }
        Op::Dice { z, target, smooth } => {
            if needs(*z) {
                let zv = val(*z);
                let p: Vec<Elem> = zv.data().iter().map(|&z| sigmoid(z)).collect();
                let inter: Elem = p.iter().zip(target).map(|(p, t)| p * t).sum();
                let denom = p.iter().sum::<Elem>() + target.iter().sum::<Elem>() + smooth;
                let numer = 2.0 * inter + smooth;
                let d = p
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let dl_dp = -(2.0 * t * denom - numer) / (denom * denom);
                        gd[0] * dl_dp * p * (1.0 - p)
                    })
                    .collect();
                accumulate(grads, *z, Tensor::from_parts(zv.shape().to_vec(), d));
            }
        }
        Op::Resize { x, plan } => {
            if needs(*x) {
                let xv = val(*x);
                let mut dx = vec![0.0; xv.numel()];
                for (taps, &g) in plan.taps.iter().zip(gd) {
                    for &(i, w) in taps {
                        dx[i] += g * w;
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
        }
    }
}
