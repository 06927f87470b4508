//! Dense tensor algebra with reverse-mode automatic differentiation.
//!
//! Tensors are flat row-major `f64` buffers held in a [`Tape`] arena and
//! addressed by [`TensorId`]. Every forward operation records enough
//! metadata for its backward rule; [`Tape::backward`] replays the records
//! in reverse, accumulating gradients additively into every tensor that
//! requires them.
//!
//! Broadcasting is deliberately narrow: elementwise binary operations
//! accept operands whose padded shapes differ only in a leading prefix of
//! 1-extents (so an operand tiles cyclically over the output), and matmul
//! broadcasts leading batch extents of 1. Per-row scalar broadcasting is
//! its own operation, [`Tape::scale_rows`]. Anything fancier is an error.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("k = {k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle into a [`Tape`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

/// One dense tensor: flat row-major values plus an optional gradient slot.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Recorded operation; inputs are tape ids, metadata is whatever the
/// backward rule needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Softmax { x: TensorId, axis: usize },
    MeanAxis { x: TensorId, axis: usize },
    SumAxis { x: TensorId, axis: usize },
    SumAll { x: TensorId },
    Gather { x: TensorId, idx: Vec<Vec<usize>> },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    AddScalar { x: TensorId },
    ScaleRows { x: TensorId, s: TensorId },
    Concat { xs: Vec<TensorId>, axis: usize },
    SliceLast { x: TensorId, start: usize, len: usize },
    TransposeLast2 { x: TensorId },
    Reshape { x: TensorId },
    Sigmoid { x: TensorId },
    Relu { x: TensorId },
    Exp { x: TensorId },
    Log { x: TensorId },
    Gelu { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    CrossEntropy { logits: TensorId, targets: Vec<usize> },
    NllRows { probs: TensorId, targets: Vec<usize> },
}

/// Wengert tape: records the forward graph, replays it in reverse.
///
/// Single-threaded by construction; independent model replicas use
/// independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

fn check_shape(data_len: usize, shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(TensorError::Invalid(format!(
            "zero extent in shape {shape:?}"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != data_len {
        return Err(TensorError::Invalid(format!(
            "shape {shape:?} has {numel} elements but {data_len} values given"
        )));
    }
    Ok(())
}

/// Row-major 2D product: c[m,n] += a[m,k] * b[k,n].
fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,k] += a[m,n] * b[k,n]^T  (i.e. a · bᵀ).
fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * k + p] += s;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]  (i.e. aᵀ · b).
fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Pad a shape on the left with 1s to the given rank.
fn pad_left(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut v = vec![1; rank - shape.len()];
    v.extend_from_slice(shape);
    v
}

/// Decomposition of an axis reduction: slices of `extent` values, strided
/// by `inner`, repeated `outer` times.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant input; no gradient will be tracked for it.
    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        check_shape(values.len(), &shape)?;
        Ok(self.push(values, shape, false, Op::Leaf))
    }

    /// Record a differentiable input (a parameter).
    pub fn param(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        check_shape(values.len(), &shape)?;
        Ok(self.push(values, shape, true, Op::Leaf))
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, rg: bool, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            values,
            requires_grad: rg,
            grad: None,
        });
        self.ops.push(op);
        id
    }

    fn rg(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn tensor(&self, t: TensorId) -> &Tensor {
        &self.nodes[t.0]
    }

    pub fn values(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].values
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn grad(&self, t: TensorId) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, t: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[t.0].values.len(), 1);
        self.nodes[t.0].values[0]
    }

    fn accum(&mut self, t: TensorId, contrib: &[f64]) {
        let node = &mut self.nodes[t.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gv, cv) in g.iter_mut().zip(contrib) {
                    *gv += cv;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    /// Like [`Tape::accum`] but takes ownership; the first consumer's
    /// contribution becomes the gradient buffer without a copy.
    fn accum_vec(&mut self, t: TensorId, contrib: Vec<f64>) {
        let node = &mut self.nodes[t.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gv, cv) in g.iter_mut().zip(&contrib) {
                    *gv += cv;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    // ── Contractions ─────────────────────────────────────────────────

    /// Batched matrix product `[...,m,k] x [...,k,n] -> [...,m,n]`.
    /// Leading batch extents must match or be 1 on one side.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let (m, ka) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let (ob, aoffs, boffs) = Self::batch_layout(&ashape, &bshape).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ashape.clone(),
                rhs: bshape.clone(),
            }
        })?;
        let batches = aoffs.len();
        let mut out = vec![0.0; batches * m * n];
        {
            let (ad, bd) = (self.values(a), self.values(b));
            for s in 0..batches {
                matmul_acc(
                    &mut out[s * m * n..(s + 1) * m * n],
                    &ad[aoffs[s] * m * ka..],
                    &bd[boffs[s] * ka * n..],
                    m,
                    ka,
                    n,
                );
            }
        }
        let mut oshape = ob;
        oshape.push(m);
        oshape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, oshape, rg, Op::Matmul { a, b }))
    }

    /// Batch broadcast layout: output batch shape plus, per output batch
    /// slice, the operand batch-slice indices it reads.
    fn batch_layout(
        ashape: &[usize],
        bshape: &[usize],
    ) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let ab = &ashape[..ashape.len() - 2];
        let bb = &bshape[..bshape.len() - 2];
        let rank = ab.len().max(bb.len());
        let ap = pad_left(ab, rank);
        let bp = pad_left(bb, rank);
        let mut ob = vec![0usize; rank];
        for i in 0..rank {
            ob[i] = match (ap[i], bp[i]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return None,
            };
        }
        let total: usize = ob.iter().product();
        let mut aoffs = Vec::with_capacity(total);
        let mut boffs = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let (mut ai, mut bi) = (0usize, 0usize);
            let (mut astride, mut bstride) = (1usize, 1usize);
            for d in (0..rank).rev() {
                let coord = rem % ob[d];
                rem /= ob[d];
                if ap[d] != 1 {
                    ai += coord * astride;
                }
                if bp[d] != 1 {
                    bi += coord * bstride;
                }
                astride *= ap[d];
                bstride *= bp[d];
            }
            aoffs.push(ai);
            boffs.push(bi);
        }
        Some((ob, aoffs, boffs))
    }

    /// Transpose of the trailing two axes.
    pub fn transpose_last2(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::AxisOutOfRange {
                axis: 1,
                shape,
            });
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batches: usize = shape[..shape.len() - 2].iter().product();
        let xd = self.values(x);
        let mut out = vec![0.0; xd.len()];
        for s in 0..batches {
            let src = &xd[s * r * c..(s + 1) * r * c];
            let dst = &mut out[s * r * c..(s + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut oshape = shape;
        let len = oshape.len();
        oshape.swap(len - 2, len - 1);
        let rg = self.rg(x);
        Ok(self.push(out, oshape, rg, Op::TransposeLast2 { x }))
    }

    // ── Elementwise binary with prefix broadcast ─────────────────────

    fn binary(
        &mut self,
        opname: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let oshape = Self::prefix_broadcast(&ashape, &bshape).ok_or(TensorError::ShapeMismatch {
            op: opname,
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        })?;
        let numel: usize = oshape.iter().product();
        let (ad, bd) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
        let (la, lb) = (ad.len(), bd.len());
        let mut out = Vec::with_capacity(numel);
        if la == numel && lb == numel {
            out.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..numel {
                out.push(f(ad[i % la], bd[i % lb]));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, oshape, rg, op))
    }

    /// Shapes may differ only by a leading prefix of 1-extents on one
    /// side; the smaller operand then tiles cyclically over the output.
    fn prefix_broadcast(ashape: &[usize], bshape: &[usize]) -> Option<Vec<usize>> {
        let rank = ashape.len().max(bshape.len());
        let ap = pad_left(ashape, rank);
        let bp = pad_left(bshape, rank);
        let mut out = vec![0usize; rank];
        for d in 0..rank {
            out[d] = match (ap[d], bp[d]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return None,
            };
        }
        if Self::tiles_cyclically(&ap, &out) && Self::tiles_cyclically(&bp, &out) {
            Some(out)
        } else {
            None
        }
    }

    /// True when the padded operand shape is all-1 up to some split point
    /// and matches the output exactly after it, i.e. the operand repeats
    /// as a contiguous block.
    fn tiles_cyclically(padded: &[usize], out: &[usize]) -> bool {
        (0..=padded.len())
            .any(|t| padded[..t].iter().all(|&e| e == 1) && padded[t..] == out[t..])
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.values(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(data, shape, rg, Op::Scale { x, c }))
    }

    /// Add a constant to every element.
    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.values(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(data, shape, rg, Op::AddScalar { x }))
    }

    /// Per-row scalar broadcast: `x[..., r, d] * s[..., r]` where the shape
    /// of `s` equals the shape of `x` minus the last axis.
    pub fn scale_rows(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let xshape = self.shape(x).to_vec();
        let sshape = self.shape(s).to_vec();
        if xshape.len() < 2 || sshape[..] != xshape[..xshape.len() - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: xshape,
                rhs: sshape,
            });
        }
        let d = xshape[xshape.len() - 1];
        let xd = self.values(x);
        let sd = &self.nodes[s.0].values;
        let mut out = Vec::with_capacity(xd.len());
        for (r, sv) in sd.iter().enumerate() {
            for v in &xd[r * d..(r + 1) * d] {
                out.push(v * sv);
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, xshape, rg, Op::ScaleRows { x, s }))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: TensorId, axis: usize, mean: bool) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let xd = self.values(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / extent as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let rg = self.rg(x);
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        Ok(self.push(out, oshape, rg, op))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.values(x).iter().sum();
        let rg = self.rg(x);
        Ok(self.push(vec![s], vec![1], rg, Op::SumAll { x }))
    }

    // ── Shape manipulation ───────────────────────────────────────────

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        check_shape(self.values(x).len(), &shape)?;
        let data = self.values(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(data, shape, rg, Op::Reshape { x }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape: first });
        }
        let mut cat_extent = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            cat_extent += s[axis];
        }
        let mut oshape = first.clone();
        oshape[axis] = cat_extent;
        let (outer, _, inner) = axis_split(&oshape, axis);
        let mut out = vec![0.0; outer * cat_extent * inner];
        let mut cursor = 0;
        for &x in xs {
            let ext = self.shape(x)[axis];
            let xd = &self.nodes[x.0].values;
            for o in 0..outer {
                let src = &xd[o * ext * inner..(o + 1) * ext * inner];
                let dst_base = (o * cat_extent + cursor) * inner;
                out[dst_base..dst_base + ext * inner].copy_from_slice(src);
            }
            cursor += ext;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            out,
            oshape,
            rg,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous slice `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if start + len > d || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                extent: d,
            });
        }
        let rows = self.values(x).len() / d;
        let xd = self.values(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(out, oshape, rg, Op::SliceLast { x, start, len }))
    }

    /// Copy rows `idx[b]` out of `x[b]`: `[B,L,D] -> [B,|idx|,D]`.
    /// Backward scatters gradients additively to the source rows.
    pub fn gather_rows(&mut self, x: TensorId, idx: &[Vec<usize>]) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::Invalid(format!(
                "gather_rows expects rank-3 input, got {shape:?}"
            )));
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        if idx.len() != b {
            return Err(TensorError::Invalid(format!(
                "gather_rows: {} index lists for batch {b}",
                idx.len()
            )));
        }
        let j = idx[0].len();
        for list in idx {
            if list.len() != j {
                return Err(TensorError::Invalid(
                    "gather_rows: ragged index lists".into(),
                ));
            }
            if let Some(&bad) = list.iter().find(|&&i| i >= l) {
                return Err(TensorError::IndexOutOfRange {
                    index: bad,
                    extent: l,
                });
            }
        }
        if j == 0 {
            return Err(TensorError::Invalid("gather_rows: empty index list".into()));
        }
        let xd = self.values(x);
        let mut out = Vec::with_capacity(b * j * d);
        for (bi, list) in idx.iter().enumerate() {
            for &row in list {
                let base = (bi * l + row) * d;
                out.extend_from_slice(&xd[base..base + d]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            vec![b, j, d],
            rg,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    fn unary(
        &mut self,
        x: TensorId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> TensorId {
        let data: Vec<f64> = self.values(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(data, shape, rg, op)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        Ok(self.unary(x, sigmoid_scalar, Op::Sigmoid { x }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        Ok(self.unary(x, |v| v.max(0.0), Op::Relu { x }))
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        Ok(self.unary(x, f64::exp, Op::Exp { x }))
    }

    /// Natural log; errors on non-positive values to keep outputs finite.
    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some(&bad) = self.values(x).iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Invalid(format!(
                "log of non-positive value {bad}"
            )));
        }
        Ok(self.unary(x, f64::ln, Op::Log { x }))
    }

    /// Exact GELU: `x * Phi(x)` with the normal CDF through `erf`.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        Ok(self.unary(x, |v| v * normal_cdf(v), Op::Gelu { x }))
    }

    /// Numerically stable softmax along `axis`; slices sum to 1.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let xd = self.values(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for e in 0..extent {
                    mx = mx.max(xd[at(e)]);
                }
                let mut z = 0.0;
                for e in 0..extent {
                    let v = (xd[at(e)] - mx).exp();
                    out[at(e)] = v;
                    z += v;
                }
                for e in 0..extent {
                    out[at(e)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, shape, rg, Op::Softmax { x, axis }))
    }

    /// Last-axis layer normalization with learned gain and shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| {
            TensorError::Invalid("layer_norm on rank-0 tensor".into())
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = self.values(x).len() / d;
        let xd = self.values(x);
        let gd = &self.nodes[gamma.0].values;
        let bd = &self.nodes[beta.0].values;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * inv * gd[j] + bd[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, shape, rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    // ── Losses ───────────────────────────────────────────────────────

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid(format!(
                "cross_entropy expects [B,C] logits, got {shape:?}"
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        if b != targets.len() {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: {} targets for batch {b}",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::IndexOutOfRange {
                index: bad,
                extent: c,
            });
        }
        let xd = self.values(logits);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &xd[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![total / b as f64],
            vec![1],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean over the batch of `-log probs[target]` for rows that are
    /// already distributions (each row must sum to 1 within 1e-6).
    /// Probabilities are clamped below at 1e-12 before the log.
    pub fn nll_rows(&mut self, probs: TensorId, targets: &[usize]) -> Result<TensorId> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid(format!(
                "nll_rows expects [B,C] probabilities, got {shape:?}"
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        if b != targets.len() {
            return Err(TensorError::Invalid(format!(
                "nll_rows: {} targets for batch {b}",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::IndexOutOfRange {
                index: bad,
                extent: c,
            });
        }
        let xd = self.values(probs);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &xd[r * c..(r + 1) * c];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(TensorError::Invalid(format!(
                    "nll_rows: row {r} sums to {sum}, not a distribution"
                )));
            }
            total -= row[t].max(NLL_CLAMP).ln();
        }
        let rg = self.rg(probs);
        Ok(self.push(
            vec![total / b as f64],
            vec![1],
            rg,
            Op::NllRows {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// on every tensor with `requires_grad`; read them with [`Tape::grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || matches!(self.ops[id], Op::Leaf) {
                continue;
            }
            let op = self.ops[id].clone();
            self.backward_op(id, &op);
        }
        Ok(())
    }

    fn backward_op(&mut self, out: usize, op: &Op) {
        let g = self.nodes[out].grad.take().expect("grad present");
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
                let n = bshape[bshape.len() - 1];
                let (_, aoffs, boffs) = Self::batch_layout(&ashape, &bshape).unwrap();
                if self.rg(a) {
                    let mut da = vec![0.0; self.values(a).len()];
                    let bd = &self.nodes[b.0].values;
                    for (s, (&ao, &bo)) in aoffs.iter().zip(&boffs).enumerate() {
                        matmul_nt_acc(
                            &mut da[ao * m * k..],
                            &g[s * m * n..(s + 1) * m * n],
                            &bd[bo * k * n..],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accum_vec(a, da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; self.values(b).len()];
                    let ad = &self.nodes[a.0].values;
                    for (s, (&ao, &bo)) in aoffs.iter().zip(&boffs).enumerate() {
                        matmul_tn_acc(
                            &mut db[bo * k * n..],
                            &ad[ao * m * k..],
                            &g[s * m * n..(s + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accum_vec(b, db);
                }
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(out_id(out)).to_vec();
                let (outer, extent, inner) = axis_split(&shape, axis);
                let y = &self.nodes[out].values;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |e: usize| (o * extent + e) * inner + i;
                        let mut dot = 0.0;
                        for e in 0..extent {
                            dot += g[at(e)] * y[at(e)];
                        }
                        for e in 0..extent {
                            dx[at(e)] = y[at(e)] * (g[at(e)] - dot);
                        }
                    }
                }
                self.accum_vec(x, dx);
            }
            Op::MeanAxis { x, axis } | Op::SumAxis { x, axis } => {
                let mean = matches!(op, Op::MeanAxis { .. });
                let shape = self.shape(x).to_vec();
                let (outer, extent, inner) = axis_split(&shape, axis);
                let w = if mean { 1.0 / extent as f64 } else { 1.0 };
                let mut dx = vec![0.0; self.values(x).len()];
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i] * w;
                        }
                    }
                }
                self.accum_vec(x, dx);
            }
            Op::SumAll { x } => {
                let dx = vec![g[0]; self.values(x).len()];
                self.accum_vec(x, dx);
            }
            Op::Gather { x, ref idx } => {
                let shape = self.shape(x).to_vec();
                let (l, d) = (shape[1], shape[2]);
                let mut dx = vec![0.0; self.values(x).len()];
                let j = idx[0].len();
                for (bi, list) in idx.iter().enumerate() {
                    for (pos, &row) in list.iter().enumerate() {
                        let src = (bi * j + pos) * d;
                        let dst = (bi * l + row) * d;
                        for t in 0..d {
                            dx[dst + t] += g[src + t];
                        }
                    }
                }
                self.accum_vec(x, dx);
            }
            Op::Add { a, b } => {
                self.accum_tiled(a, &g);
                self.accum_tiled(b, &g);
            }
            Op::Sub { a, b } => {
                self.accum_tiled(a, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accum_tiled_vec(b, neg);
            }
            Op::Mul { a, b } => {
                let tiled_product = |other: &[f64], g: &[f64]| -> Vec<f64> {
                    if other.len() == g.len() {
                        g.iter().zip(other).map(|(v, o)| v * o).collect()
                    } else {
                        let lo = other.len();
                        g.iter().enumerate().map(|(i, v)| v * other[i % lo]).collect()
                    }
                };
                if self.rg(a) {
                    let da = tiled_product(&self.nodes[b.0].values, &g);
                    self.accum_tiled_vec(a, da);
                }
                if self.rg(b) {
                    let db = tiled_product(&self.nodes[a.0].values, &g);
                    self.accum_tiled_vec(b, db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accum_vec(x, dx);
            }
            Op::AddScalar { x } => {
                self.accum(x, &g);
            }
            Op::ScaleRows { x, s } => {
                let d = *self.shape(x).last().unwrap();
                if self.rg(x) {
                    let sd = &self.nodes[s.0].values;
                    let mut dx = Vec::with_capacity(g.len());
                    for (r, sv) in sd.iter().enumerate() {
                        for t in 0..d {
                            dx.push(g[r * d + t] * sv);
                        }
                    }
                    self.accum_vec(x, dx);
                }
                if self.rg(s) {
                    let xd = &self.nodes[x.0].values;
                    let rows = xd.len() / d;
                    let mut ds = Vec::with_capacity(rows);
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for t in 0..d {
                            acc += g[r * d + t] * xd[r * d + t];
                        }
                        ds.push(acc);
                    }
                    self.accum_vec(s, ds);
                }
            }
            Op::Concat { ref xs, axis } => {
                let oshape = self.nodes[out].shape.clone();
                let (outer, cat_extent, inner) = axis_split(&oshape, axis);
                let mut cursor = 0;
                for &x in xs {
                    let ext = self.shape(x)[axis];
                    let mut dx = vec![0.0; self.values(x).len()];
                    for o in 0..outer {
                        let src_base = (o * cat_extent + cursor) * inner;
                        let dst_base = o * ext * inner;
                        dx[dst_base..dst_base + ext * inner]
                            .copy_from_slice(&g[src_base..src_base + ext * inner]);
                    }
                    self.accum_vec(x, dx);
                    cursor += ext;
                }
            }
            Op::SliceLast { x, start, len } => {
                let d = *self.shape(x).last().unwrap();
                let rows = self.values(x).len() / d;
                let mut dx = vec![0.0; self.values(x).len()];
                for r in 0..rows {
                    for t in 0..len {
                        dx[r * d + start + t] = g[r * len + t];
                    }
                }
                self.accum_vec(x, dx);
            }
            Op::TransposeLast2 { x } => {
                let oshape = self.nodes[out].shape.clone();
                let (r, c) = (oshape[oshape.len() - 2], oshape[oshape.len() - 1]);
                let batches: usize = oshape[..oshape.len() - 2].iter().product();
                let mut dx = vec![0.0; g.len()];
                for s in 0..batches {
                    let src = &g[s * r * c..(s + 1) * r * c];
                    let dst = &mut dx[s * r * c..(s + 1) * r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dst[j * r + i] = src[i * c + j];
                        }
                    }
                }
                self.accum_vec(x, dx);
            }
            Op::Reshape { x } => {
                self.accum(x, &g);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[out].values;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                self.accum_vec(x, dx);
            }
            Op::Relu { x } => {
                let xd = &self.nodes[x.0].values;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accum_vec(x, dx);
            }
            Op::Exp { x } => {
                let y = &self.nodes[out].values;
                let dx: Vec<f64> = g.iter().zip(y).map(|(gv, yv)| gv * yv).collect();
                self.accum_vec(x, dx);
            }
            Op::Log { x } => {
                let xd = &self.nodes[x.0].values;
                let dx: Vec<f64> = g.iter().zip(xd).map(|(gv, xv)| gv / xv).collect();
                self.accum_vec(x, dx);
            }
            Op::Gelu { x } => {
                // d/dx [x Phi(x)] = Phi(x) + x phi(x)
                let xd = &self.nodes[x.0].values;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .map(|(gv, &xv)| gv * (normal_cdf(xv) + xv * normal_pdf(xv)))
                    .collect();
                self.accum_vec(x, dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *self.shape(x).last().unwrap();
                let rows = self.values(x).len() / d;
                let xd = self.nodes[x.0].values.clone();
                let gd = self.nodes[gamma.0].values.clone();
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                    let mut dxhat_mean = 0.0;
                    let mut dxhat_xhat_mean = 0.0;
                    let dxhat: Vec<f64> = (0..d)
                        .map(|j| {
                            let v = grow[j] * gd[j];
                            dxhat_mean += v;
                            dxhat_xhat_mean += v * xhat[j];
                            v
                        })
                        .collect();
                    dxhat_mean /= d as f64;
                    dxhat_xhat_mean /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv * (dxhat[j] - dxhat_mean - xhat[j] * dxhat_xhat_mean);
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                }
                self.accum_vec(x, dx);
                self.accum_vec(gamma, dgamma);
                self.accum_vec(beta, dbeta);
            }
            Op::CrossEntropy {
                logits,
                ref targets,
            } => {
                let c = self.shape(logits)[1];
                let b = targets.len();
                let xd = &self.nodes[logits.0].values;
                let scale = g[0] / b as f64;
                let mut dx = vec![0.0; xd.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &xd[r * c..(r + 1) * c];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / z;
                        dx[r * c + j] = scale * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.accum_vec(logits, dx);
            }
            Op::NllRows { probs, ref targets } => {
                let c = self.shape(probs)[1];
                let b = targets.len();
                let xd = &self.nodes[probs.0].values;
                let scale = g[0] / b as f64;
                let mut dx = vec![0.0; xd.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let p = xd[r * c + t];
                    if p > NLL_CLAMP {
                        dx[r * c + t] = -scale / p;
                    }
                }
                self.accum_vec(probs, dx);
            }
        }
        self.nodes[out].grad = Some(g);
    }

    /// Reduce a full-size gradient onto a (possibly cyclically tiled)
    /// operand by summing over the repeats.
    fn accum_tiled(&mut self, t: TensorId, g: &[f64]) {
        if !self.rg(t) {
            return;
        }
        let len = self.values(t).len();
        if len == g.len() {
            self.accum(t, g);
        } else {
            let mut dx = vec![0.0; len];
            for chunk in g.chunks(len) {
                for (d, v) in dx.iter_mut().zip(chunk) {
                    *d += v;
                }
            }
            self.accum_vec(t, dx);
        }
    }

    /// Owned-buffer variant of [`Tape::accum_tiled`].
    fn accum_tiled_vec(&mut self, t: TensorId, g: Vec<f64>) {
        if !self.rg(t) {
            return;
        }
        let len = self.values(t).len();
        if len == g.len() {
            self.accum_vec(t, g);
        } else {
            let mut dx = vec![0.0; len];
            for chunk in g.chunks(len) {
                for (d, v) in dx.iter_mut().zip(chunk) {
                    *d += v;
                }
            }
            self.accum_vec(t, dx);
        }
    }
}

fn out_id(i: usize) -> TensorId {
    TensorId(i)
}

/// Floor applied to probabilities before taking logs.
pub const NLL_CLAMP: f64 = 1e-12;

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF via the error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Indices of the `k` largest values, sorted by descending value then
/// ascending index; ties broken by the lower index. Selection is
/// gradient-opaque: gradients flow only through subsequently gathered
/// values.
pub fn topk_indices(xs: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > xs.len() {
        return Err(TensorError::KOutOfRange { k, max: xs.len() });
    }
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}
