use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

use super::{cast, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{contract_err, dim_err, HtrError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Affine { x: Var, w: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    AddRow { a: Var, b: Var, n: usize },
    Sigmoid { a: Var },
    Tanh { a: Var },
    LeakyRelu { a: Var, slope: T },
    Square { a: Var },
    Sum { a: Var },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    SliceCols { a: Var, start: usize, len: usize, cols: usize },
    GatherRows { a: Var, idx: Vec<usize>, row: usize },
    Reshape { a: Var },
    StackSteps { parts: Vec<Var>, b: usize, d: usize },
    StepOf { a: Var, t: usize, steps: usize, d: usize },
    Conv2d { x: Var, k: Var, dims: ConvDims },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, valid: Option<Vec<bool>>, dims: [usize; 4], train: bool },
    MulConst { a: Var, m: Vec<T> },
    BlendRows { new: Var, old: Var, keep: Vec<bool>, row: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T>, d: usize },
    Softmax { a: Var, n: usize },
    LogSoftmax { a: Var, n: usize },
    AddBroadcastSteps { a: Var, b: Var, ba: usize, batch: usize, steps: usize, d: usize },
    WeightedSum { alpha: Var, h: Var, bh: usize, batch: usize, steps: usize, d: usize },
    Embedding { table: Var, ids: Vec<usize>, e: usize },
    FocalLoss { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, logp: Vec<T>, clamped: Vec<bool>, gamma: T, scale: T, n: usize },
    MapToSequence { x: Var, b: usize, c: usize, w: usize },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddRow { a, b, .. } | Op::AddBroadcastSteps { a, b, .. } => vec![*a, *b],
            Op::Affine { x, w, b, .. } => vec![*x, *w, *b],
            Op::Scale { a, .. }
            | Op::Sigmoid { a }
            | Op::Tanh { a }
            | Op::LeakyRelu { a, .. }
            | Op::Square { a }
            | Op::Sum { a }
            | Op::SliceCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::Reshape { a }
            | Op::StepOf { a, .. }
            | Op::MulConst { a, .. }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. } => vec![*a],
            Op::ConcatCols { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Op::StackSteps { parts, .. } => parts.clone(),
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::MaxPool { x, .. } | Op::MapToSequence { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::BlendRows { new, old, .. } => vec![*new, *old],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::WeightedSum { alpha, h, .. } => vec![*alpha, *h],
            Op::Embedding { table, .. } => vec![*table],
            Op::FocalLoss { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of a training-mode batch normalization: the normalized output plus
/// the per-channel batch statistics used, for running-average updates.
pub struct BatchNormOutput<T> {
    pub out: Var,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    /// Number of (valid) positions each channel was averaged over.
    pub count: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Tape of eagerly evaluated operations. Values are computed when an op is
/// recorded; [`Graph::backward`] replays the tape in reverse.
///
/// An inference graph (`Graph::inference`) records values only, so no
/// backward information is kept.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    record: bool,
    bound: HashMap<ParamId, Var>,
    bindings: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true, bound: HashMap::new(), bindings: Vec::new() }
    }

    pub fn inference() -> Self {
        Self { record: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bindings.iter().copied()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = self.record && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn tensor(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape, data).expect("internal shape bookkeeping")
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let t = t.with_requires_grad(false);
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A free input whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = self.record;
        let t = t.with_requires_grad(requires_grad);
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. Repeated calls return the same node, so a
    /// weight shared across timesteps is copied onto the tape once.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let src = store.get(id);
        let mut t = Tensor::new(src.shape().to_vec(), src.data().to_vec()).expect("valid");
        t.requires_grad = src.requires_grad && self.record;
        let requires_grad = t.requires_grad;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        self.bindings.push((id, v));
        v
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err!("{what}: expected a matrix, got shape {s:?}")),
        }
    }

    fn last_axis(&self, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        let n = *s.last().ok_or_else(|| dim_err!("scalar has no last axis"))?;
        if n == 0 {
            return Err(dim_err!("empty last axis"));
        }
        Ok((self.value(v).numel() / n, n))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(dim_err!("matmul inner dimensions {k} and {k2} disagree"));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Self::tensor(vec![m, n], out), Op::MatMul { a, b, m, k, n }))
    }

    /// `x·W + b` for `x: [m×k]`, `W: [k×n]`, `b: [n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(x, "affine input")?;
        let (k2, n) = self.dims2(w, "affine weight")?;
        if k != k2 {
            return Err(dim_err!("affine: input width {k} does not match weight rows {k2}"));
        }
        if self.shape(b) != [n] {
            return Err(dim_err!("affine: bias shape {:?}, expected [{n}]", self.shape(b)));
        }
        let bias = self.data(b);
        let mut out: Vec<T> = (0..m).flat_map(|_| bias.iter().copied()).collect();
        gemm(self.data(x), self.data(w), &mut out, m, k, n);
        Ok(self.push(Self::tensor(vec![m, n], out), Op::Affine { x, w, b, m, k, n }))
    }

    // ---- elementwise -------------------------------------------------------

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        self.same_shape(a, b, what)?;
        Ok(self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Self::tensor(shape, out), Op::Scale { a, s })
    }

    /// Adds a length-`n` vector to every row of a tensor whose last axis is `n`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.last_axis(a)?;
        if self.shape(b) != [n] {
            return Err(dim_err!("add_row: vector shape {:?}, expected [{n}]", self.shape(b)));
        }
        let bv = self.data(b);
        let out = self.data(a).chunks(n).flat_map(|r| r.iter().zip(bv).map(|(&x, &y)| x + y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::AddRow { a, b, n }))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        Self::tensor(self.shape(a).to_vec(), self.data(a).iter().map(|&x| f(x)).collect())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| T::one() / (T::one() + (-x).exp()));
        self.push(t, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.tanh());
        self.push(t, Op::Tanh { a })
    }

    /// `x` for `x ≥ 0`, `slope·x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let t = self.map(a, |x| if x >= T::zero() { x } else { slope * x });
        self.push(t, Op::LeakyRelu { a, slope })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * x);
        self.push(t, Op::Square { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    /// Elementwise product with a fixed tensor (masks, dropout patterns).
    pub fn mul_const(&mut self, a: Var, m: Vec<T>) -> Result<Var> {
        if m.len() != self.value(a).numel() {
            return Err(dim_err!("mul_const: {} factors for {} elements", m.len(), self.value(a).numel()));
        }
        let out = self.data(a).iter().zip(&m).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::MulConst { a, m }))
    }

    /// Inverted dropout. In inference (`train == false`) or with `rate == 0`
    /// the input is returned untouched.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(contract_err!("dropout rate {rate} outside [0, 1)"));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale: T = cast(1.0 / (1.0 - rate));
        let m = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep_scale })
            .collect();
        self.mul_const(a, m)
    }

    /// Row-wise select: rows with `keep[r]` come from `new`, the rest from `old`.
    pub fn blend_rows(&mut self, new: Var, old: Var, keep: &[bool]) -> Result<Var> {
        self.same_shape(new, old, "blend_rows")?;
        let rows = *self.shape(new).first().ok_or_else(|| dim_err!("blend_rows on scalar"))?;
        if keep.len() != rows {
            return Err(dim_err!("blend_rows: {} flags for {rows} rows", keep.len()));
        }
        let row = self.value(new).numel() / rows.max(1);
        let mut out = self.data(old).to_vec();
        let nd = self.data(new);
        for (r, &k) in keep.iter().enumerate() {
            if k {
                out[r * row..(r + 1) * row].copy_from_slice(&nd[r * row..(r + 1) * row]);
            }
        }
        let shape = self.shape(new).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::BlendRows { new, old, keep: keep.to_vec(), row }))
    }

    // ---- structural --------------------------------------------------------

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2(*parts.first().ok_or_else(|| contract_err!("concat of nothing"))?, "concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            if r != rows {
                return Err(dim_err!("concat_cols: row counts {rows} and {r} differ"));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(Self::tensor(vec![rows, total], out), Op::ConcatCols { parts: widths, rows }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if start + len > cols {
            return Err(dim_err!("slice_cols: {start}+{len} exceeds {cols} columns"));
        }
        let d = self.data(a);
        let out = (0..rows).flat_map(|r| d[r * cols + start..r * cols + start + len].iter().copied()).collect();
        Ok(self.push(Self::tensor(vec![rows, len], out), Op::SliceCols { a, start, len, cols }))
    }

    /// Picks rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape.first().ok_or_else(|| dim_err!("gather_rows on scalar"))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(dim_err!("gather_rows: index {bad} out of {rows} rows"));
        }
        let row = self.value(a).numel() / rows.max(1);
        let d = self.data(a);
        let out = idx.iter().flat_map(|&i| d[i * row..(i + 1) * row].iter().copied()).collect();
        let mut new_shape = shape;
        new_shape[0] = idx.len();
        Ok(self.push(Self::tensor(new_shape, out), Op::GatherRows { a, idx: idx.to_vec(), row }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    /// Stacks `T` matrices `[B×D]` into a `[B×T×D]` sequence tensor.
    pub fn stack_steps(&mut self, parts: &[Var]) -> Result<Var> {
        let (b, d) = self.dims2(*parts.first().ok_or_else(|| contract_err!("stack of nothing"))?, "stack")?;
        for &p in parts {
            if self.shape(p) != [b, d] {
                return Err(dim_err!("stack_steps: step shape {:?}, expected [{b}, {d}]", self.shape(p)));
            }
        }
        let steps = parts.len();
        let mut out = vec![T::zero(); b * steps * d];
        for (t, &p) in parts.iter().enumerate() {
            let src = self.data(p);
            for r in 0..b {
                out[(r * steps + t) * d..(r * steps + t + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        Ok(self.push(Self::tensor(vec![b, steps, d], out), Op::StackSteps { parts: parts.to_vec(), b, d }))
    }

    /// Extracts step `t` of a `[B×T×D]` tensor as `[B×D]`.
    pub fn step_of(&mut self, a: Var, t: usize) -> Result<Var> {
        let (b, steps, d) = match self.shape(a) {
            [b, s, d] => (*b, *s, *d),
            s => return Err(dim_err!("step_of: expected rank 3, got {s:?}")),
        };
        if t >= steps {
            return Err(dim_err!("step_of: step {t} of {steps}"));
        }
        let src = self.data(a);
        let out = (0..b).flat_map(|r| src[(r * steps + t) * d..(r * steps + t + 1) * d].iter().copied()).collect();
        Ok(self.push(Self::tensor(vec![b, d], out), Op::StepOf { a, t, steps, d }))
    }

    // ---- convolutional -----------------------------------------------------

    /// Stride-1 cross-correlation of `x: [B×C×H×W]` with `k: [F×C×kh×kw]`
    /// and symmetric zero padding `pad = (ph, pw)`.
    pub fn conv2d(&mut self, x: Var, k: Var, pad: (usize, usize)) -> Result<Var> {
        let (b, c, h, w) = match self.shape(x) {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => return Err(dim_err!("conv2d input must be rank 4, got {s:?}")),
        };
        let (f, kc, kh, kw) = match self.shape(k) {
            [f, kc, kh, kw] => (*f, *kc, *kh, *kw),
            s => return Err(dim_err!("conv2d kernel must be rank 4, got {s:?}")),
        };
        if kc != c {
            return Err(dim_err!("conv2d: kernel expects {kc} channels, input has {c}"));
        }
        let (ph, pw) = pad;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(dim_err!("conv2d: kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * ph, w + 2 * pw));
        }
        let dims = ConvDims { b, c, h, w, f, kh, kw, ph, pw, ho: h + 2 * ph - kh + 1, wo: w + 2 * pw - kw + 1 };
        let out = conv_forward(self.data(x), self.data(k), dims);
        Ok(self.push(Self::tensor(vec![b, f, dims.ho, dims.wo], out), Op::Conv2d { x, k, dims }))
    }

    /// Non-overlapping max pooling; trailing rows/columns that do not fill a
    /// window are dropped. Ties resolve to the first position in scan order.
    pub fn maxpool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let (b, c, h, w) = match self.shape(x) {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => return Err(dim_err!("maxpool2d input must be rank 4, got {s:?}")),
        };
        if kh == 0 || kw == 0 || h < kh || w < kw {
            return Err(dim_err!("maxpool2d: window {kh}x{kw} does not fit {h}x{w}"));
        }
        let (ho, wo) = (h / kh, w / kw);
        let src = self.data(x);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * kh * w + ox * kw;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let i = base + (oy * kh + dy) * w + ox * kw + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(Self::tensor(vec![b, c, ho, wo], out), Op::MaxPool { x, argmax }))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var, valid: Option<&[bool]>) -> Result<[usize; 4]> {
        let dims = match self.shape(x) {
            [b, c, h, w] => [*b, *c, *h, *w],
            s => return Err(dim_err!("batch_norm input must be rank 4, got {s:?}")),
        };
        if self.shape(gamma) != [dims[1]] || self.shape(beta) != [dims[1]] {
            return Err(dim_err!("batch_norm: affine parameters must have shape [{}]", dims[1]));
        }
        if let Some(v) = valid {
            if v.len() != dims[0] * dims[3] {
                return Err(dim_err!("batch_norm: column mask has {} entries, expected {}", v.len(), dims[0] * dims[3]));
            }
        }
        Ok(dims)
    }

    /// Training-mode batch normalization over `[B×C×H×W]`, with statistics
    /// taken per channel over the positions whose column is marked valid in
    /// `valid` (shape `[B×W]`, `None` = everything). Invalid positions are
    /// written as zero.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, valid: Option<&[bool]>) -> Result<BatchNormOutput<T>> {
        let dims = self.check_bn(x, gamma, beta, valid)?;
        let [b, c, h, w] = dims;
        let is_valid = |bi: usize, xi: usize| valid.map_or(true, |v| v[bi * w + xi]);
        let count = (0..b).map(|bi| (0..w).filter(|&xi| is_valid(bi, xi)).count()).sum::<usize>() * h;
        if count < 2 {
            return Err(contract_err!("batch_norm (train) needs at least 2 valid positions per channel, got {count}"));
        }
        let n: T = cast(count as f64);
        let src = self.data(x);
        let (g, be) = (self.data(gamma), self.data(beta));
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                let base = (bi * c + ch) * h * w;
                for y in 0..h {
                    for xi in 0..w {
                        if is_valid(bi, xi) {
                            s += src[base + y * w + xi];
                        }
                    }
                }
            }
            mean[ch] = s / n;
            let mut s2 = T::zero();
            for bi in 0..b {
                let base = (bi * c + ch) * h * w;
                for y in 0..h {
                    for xi in 0..w {
                        if is_valid(bi, xi) {
                            let d = src[base + y * w + xi] - mean[ch];
                            s2 += d * d;
                        }
                    }
                }
            }
            var[ch] = s2 / n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + cast(eps)).sqrt()).collect();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                for y in 0..h {
                    for xi in 0..w {
                        if is_valid(bi, xi) {
                            let i = base + y * w + xi;
                            xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                            out[i] = g[ch] * xhat[i] + be[ch];
                        }
                    }
                }
            }
        }
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, valid: valid.map(<[bool]>::to_vec), dims, train: true };
        let out = self.push(Self::tensor(dims.to_vec(), out), op);
        Ok(BatchNormOutput { out, mean, var, count })
    }

    /// Inference-mode batch normalization with fixed statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64, valid: Option<&[bool]>) -> Result<Var> {
        let dims = self.check_bn(x, gamma, beta, valid)?;
        let [b, c, h, w] = dims;
        if mean.len() != c || var.len() != c {
            return Err(dim_err!("batch_norm: running statistics must have {c} entries"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + cast(eps)).sqrt()).collect();
        let src = self.data(x);
        let (g, be) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                for y in 0..h {
                    for xi in 0..w {
                        if valid.map_or(true, |v| v[bi * w + xi]) {
                            let i = base + y * w + xi;
                            xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                            out[i] = g[ch] * xhat[i] + be[ch];
                        }
                    }
                }
            }
        }
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, valid: valid.map(<[bool]>::to_vec), dims, train: false };
        Ok(self.push(Self::tensor(dims.to_vec(), out), op))
    }

    /// Zeroes every column of `[B×C×H×W]` not marked valid in `valid: [B×W]`.
    pub fn mask_columns(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let (b, c, h, w) = match self.shape(x) {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => return Err(dim_err!("mask_columns input must be rank 4, got {s:?}")),
        };
        if valid.len() != b * w {
            return Err(dim_err!("mask_columns: {} flags for {}x{} columns", valid.len(), b, w));
        }
        let mut m = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for _ in 0..c * h {
                m.extend(valid[bi * w..(bi + 1) * w].iter().map(|&v| if v { T::one() } else { T::zero() }));
            }
        }
        self.mul_const(x, m)
    }

    /// `[B×C×1×W]` feature maps to a `[B×W×C]` sequence of column vectors.
    pub fn map_to_sequence(&mut self, x: Var) -> Result<Var> {
        let (b, c, w) = match self.shape(x) {
            [b, c, 1, w] => (*b, *c, *w),
            s => return Err(contract_err!("map_to_sequence needs feature maps of height 1, got shape {s:?}")),
        };
        let src = self.data(x);
        let mut out = vec![T::zero(); b * w * c];
        for bi in 0..b {
            for ch in 0..c {
                for i in 0..w {
                    out[(bi * w + i) * c + ch] = src[(bi * c + ch) * w + i];
                }
            }
        }
        Ok(self.push(Self::tensor(vec![b, w, c], out), Op::MapToSequence { x, b, c, w }))
    }

    // ---- normalization & distributions -------------------------------------

    /// Per-row normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.last_axis(x)?;
        if d < 2 {
            return Err(contract_err!("layer_norm needs at least 2 features, got {d}"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err!("layer_norm: gain/bias must have shape [{d}]"));
        }
        let src = self.data(x);
        let (g, bi) = (self.data(gain), self.data(bias));
        let dn: T = cast(d as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + cast(eps)).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bi[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::LayerNorm { x, gain, bias, xhat, inv_std, d }))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.last_axis(a)?;
        let out = self.data(a).chunks(n).flat_map(softmax_row).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::Softmax { a, n }))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.last_axis(a)?;
        let out = self.data(a).chunks(n).flat_map(log_softmax_row).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::LogSoftmax { a, n }))
    }

    /// Softmax over the last axis where masked-out entries get probability
    /// exactly zero. A row with every entry masked is a contract violation.
    pub fn masked_softmax(&mut self, a: Var, valid: &[bool]) -> Result<Var> {
        let (rows, n) = self.last_axis(a)?;
        if valid.len() != rows * n {
            return Err(dim_err!("masked_softmax: {} flags for {} scores", valid.len(), rows * n));
        }
        let src = self.data(a);
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mask = &valid[r * n..(r + 1) * n];
            let mx = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or_else(|| contract_err!("attention row {r} has every frame masked"))?;
            let mut z = T::zero();
            for j in 0..n {
                if mask[j] {
                    let e = (row[j] - mx).exp();
                    out[r * n + j] = e;
                    z += e;
                }
            }
            for v in &mut out[r * n..(r + 1) * n] {
                *v /= z;
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::tensor(shape, out), Op::Softmax { a, n }))
    }

    // ---- attention helpers --------------------------------------------------

    /// `out[b,t,:] = a[b',t,:] + v[b,:]` where `a` is `[B×T×D]` or `[1×T×D]`
    /// (broadcast over the batch) and `v` is `[B×D]`.
    pub fn add_broadcast_steps(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ba, steps, d) = match self.shape(a) {
            [b, s, d] => (*b, *s, *d),
            s => return Err(dim_err!("add_broadcast_steps: expected rank 3, got {s:?}")),
        };
        let (batch, d2) = self.dims2(v, "add_broadcast_steps")?;
        if d2 != d || (ba != 1 && ba != batch) {
            return Err(dim_err!("add_broadcast_steps: {:?} with {:?}", self.shape(a), self.shape(v)));
        }
        let (ad, vd) = (self.data(a), self.data(v));
        let mut out = Vec::with_capacity(batch * steps * d);
        for b in 0..batch {
            let ab = if ba == 1 { 0 } else { b };
            for t in 0..steps {
                let arow = &ad[(ab * steps + t) * d..(ab * steps + t + 1) * d];
                out.extend(arow.iter().zip(&vd[b * d..(b + 1) * d]).map(|(&x, &y)| x + y));
            }
        }
        Ok(self.push(Self::tensor(vec![batch, steps, d], out), Op::AddBroadcastSteps { a, b: v, ba, batch, steps, d }))
    }

    /// `out[b,:] = Σ_t alpha[b,t]·h[b',t,:]` with `h` either `[B×T×D]` or `[1×T×D]`.
    pub fn weighted_sum(&mut self, alpha: Var, h: Var) -> Result<Var> {
        let (batch, steps) = self.dims2(alpha, "weighted_sum weights")?;
        let (bh, s2, d) = match self.shape(h) {
            [b, s, d] => (*b, *s, *d),
            s => return Err(dim_err!("weighted_sum: expected rank-3 values, got {s:?}")),
        };
        if s2 != steps || (bh != 1 && bh != batch) {
            return Err(dim_err!("weighted_sum: weights {:?} vs values {:?}", self.shape(alpha), self.shape(h)));
        }
        let (al, hd) = (self.data(alpha), self.data(h));
        let mut out = vec![T::zero(); batch * d];
        for b in 0..batch {
            let hb = if bh == 1 { 0 } else { b };
            for t in 0..steps {
                let wgt = al[b * steps + t];
                if wgt == T::zero() {
                    continue;
                }
                let row = &hd[(hb * steps + t) * d..(hb * steps + t + 1) * d];
                for (o, &x) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                    *o += wgt * x;
                }
            }
        }
        Ok(self.push(Self::tensor(vec![batch, d], out), Op::WeightedSum { alpha, h, bh, batch, steps, d }))
    }

    /// Row lookup into an `[N×E]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, e) = self.dims2(table, "embedding table")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(contract_err!("token index {bad} outside vocabulary of {n}"));
        }
        let t = self.data(table);
        let out = ids.iter().flat_map(|&i| t[i * e..(i + 1) * e].iter().copied()).collect();
        Ok(self.push(Self::tensor(vec![ids.len(), e], out), Op::Embedding { table, ids: ids.to_vec(), e }))
    }

    /// `scale · Σ_r −(1−p_r)^γ · log p_r` over rows of `logits: [R×N]`, where
    /// `p_r` is the softmax probability of `targets[r]`; `None` rows are
    /// excluded. `log p` is floored at `log(prob_floor)`.
    pub fn focal_loss(&mut self, logits: Var, targets: &[Option<usize>], gamma: f64, scale: f64, prob_floor: f64) -> Result<Var> {
        let (rows, n) = self.dims2(logits, "focal_loss logits")?;
        if targets.len() != rows {
            return Err(dim_err!("focal_loss: {} targets for {rows} rows", targets.len()));
        }
        if gamma < 0.0 {
            return Err(contract_err!("focal loss gamma must be non-negative, got {gamma}"));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= n) {
            return Err(HtrError::Data(format!("target class {bad} outside {n} classes")));
        }
        let g: T = cast(gamma);
        let floor: T = cast(prob_floor.ln());
        let src = self.data(logits);
        let mut probs = vec![T::zero(); rows * n];
        let mut clamped = vec![false; rows];
        let mut logp = vec![T::zero(); rows];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let ls = log_softmax_row(row);
            for j in 0..n {
                probs[r * n + j] = ls[j].exp();
            }
            if let Some(t) = targets[r] {
                let mut lp = ls[t];
                if lp < floor {
                    lp = floor;
                    clamped[r] = true;
                }
                logp[r] = lp;
                let p = probs[r * n + t];
                total += -focal_weight(p, g) * lp;
            }
        }
        let s: T = cast(scale);
        let op = Op::FocalLoss { logits, targets: targets.to_vec(), probs, logp, clamped, gamma: g, scale: s, n };
        Ok(self.push(Tensor::scalar(total * s), op))
    }

    // ---- reverse sweep -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt(g, bd, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(ad, g, gb, m, k, n);
                }
            }
            Op::Affine { x, w, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (xd, wd) = (self.data(*x), self.data(*w));
                if let Some(gx) = self.acc(grads, *x) {
                    gemm_nt(g, wd, gx, m, n, k);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gemm_tn(xd, g, gw, m, k, n);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        add_into(ga, g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v);
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g.iter().zip(bd)).for_each(|(o, (&gv, &y))| *o += gv * y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g.iter().zip(ad)).for_each(|(o, (&gv, &x))| *o += gv * x);
                }
            }
            Op::Scale { a, s } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *s);
                }
            }
            Op::AddRow { a, b, n } => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(*n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(out) {
                        *o += gv * y * (T::one() - y);
                    }
                }
            }
            Op::Tanh { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(out) {
                        *o += gv * (T::one() - y * y);
                    }
                }
            }
            Op::LeakyRelu { a, slope } => {
                let ad = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(ad) {
                        *o += if x >= T::zero() { gv } else { gv * *slope };
                    }
                }
            }
            Op::Square { a } => {
                let ad = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(ad) {
                        *o += gv * (x + x);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::MulConst { a, m } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &f) in ga.iter_mut().zip(g).zip(m) {
                        *o += gv * f;
                    }
                }
            }
            Op::BlendRows { new, old, keep, row } => {
                for (v, want) in [(*new, true), (*old, false)] {
                    if let Some(gv) = self.acc(grads, v) {
                        for (r, &k) in keep.iter().enumerate() {
                            if k == want {
                                add_into(&mut gv[r * row..(r + 1) * row], &g[r * row..(r + 1) * row]);
                            }
                        }
                    }
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, c) in parts {
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..*rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols { a, start, len, cols } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, row) in g.chunks(*len).enumerate() {
                        add_into(&mut ga[r * cols + start..r * cols + start + len], row);
                    }
                }
            }
            Op::GatherRows { a, idx, row } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (j, &src) in idx.iter().enumerate() {
                        add_into(&mut ga[src * row..(src + 1) * row], &g[j * row..(j + 1) * row]);
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::StackSteps { parts, b, d } => {
                let steps = parts.len();
                for (t, &p) in parts.iter().enumerate() {
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..*b {
                            add_into(&mut gp[r * d..(r + 1) * d], &g[(r * steps + t) * d..(r * steps + t + 1) * d]);
                        }
                    }
                }
            }
            Op::StepOf { a, t, steps, d } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, row) in g.chunks(*d).enumerate() {
                        add_into(&mut ga[(r * steps + t) * d..(r * steps + t + 1) * d], row);
                    }
                }
            }
            Op::Conv2d { x, k, dims } => {
                let (xd, kd) = (self.data(*x), self.data(*k));
                if let Some(gx) = self.acc(grads, *x) {
                    conv_backward_input(g, kd, gx, *dims);
                }
                if let Some(gk) = self.acc(grads, *k) {
                    conv_backward_kernel(g, xd, gk, *dims);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gx[src] += gv;
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, valid, dims, train } => {
                let [b, c, h, w] = *dims;
                let gam = self.data(*gamma);
                let is_valid = |bi: usize, xi: usize| valid.as_ref().map_or(true, |v| v[bi * w + xi]);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dxhat = vec![T::zero(); c];
                let mut sum_dxhat_xhat = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * h * w;
                        for y in 0..h {
                            for xi in 0..w {
                                if is_valid(bi, xi) {
                                    let i = base + y * w + xi;
                                    dgamma[ch] += g[i] * xhat[i];
                                    dbeta[ch] += g[i];
                                    let dxh = g[i] * gam[ch];
                                    sum_dxhat[ch] += dxh;
                                    sum_dxhat_xhat[ch] += dxh * xhat[i];
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let count = (0..b).map(|bi| (0..w).filter(|&xi| is_valid(bi, xi)).count()).sum::<usize>() * h;
                    let n: T = cast(count as f64);
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * h * w;
                            for y in 0..h {
                                for xi in 0..w {
                                    if !is_valid(bi, xi) {
                                        continue;
                                    }
                                    let i = base + y * w + xi;
                                    let dxh = g[i] * gam[ch];
                                    gx[i] += if *train {
                                        inv_std[ch] / n * (n * dxh - sum_dxhat[ch] - xhat[i] * sum_dxhat_xhat[ch])
                                    } else {
                                        dxh * inv_std[ch]
                                    };
                                }
                            }
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    add_into(gg, &dgamma);
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    add_into(gb, &dbeta);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std, d } => {
                let d = *d;
                let gn = self.data(*gain);
                let dn: T = cast(d as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, is) in inv_std.iter().enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gn[j];
                            s1 += dxh;
                            s2 += dxh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dxh = g[r * d + j] * gn[j];
                            gx[r * d + j] += *is / dn * (dn * dxh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for (r, row) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += row[j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Softmax { a, n } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, y), gr) in ga.chunks_mut(*n).zip(out.chunks(*n)).zip(g.chunks(*n)) {
                        let dot: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..*n {
                            o[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a, n } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, y), gr) in ga.chunks_mut(*n).zip(out.chunks(*n)).zip(g.chunks(*n)) {
                        let s: T = gr.iter().copied().sum();
                        for j in 0..*n {
                            o[j] += gr[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::AddBroadcastSteps { a, b, ba, batch, steps, d } => {
                let (ba, batch, steps, d) = (*ba, *batch, *steps, *d);
                if let Some(ga) = self.acc(grads, *a) {
                    for bb in 0..batch {
                        let ab = if ba == 1 { 0 } else { bb };
                        let dst = ab * steps * d;
                        add_into(&mut ga[dst..dst + steps * d], &g[bb * steps * d..(bb + 1) * steps * d]);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for bb in 0..batch {
                        for t in 0..steps {
                            add_into(&mut gb[bb * d..(bb + 1) * d], &g[(bb * steps + t) * d..(bb * steps + t + 1) * d]);
                        }
                    }
                }
            }
            Op::WeightedSum { alpha, h, bh, batch, steps, d } => {
                let (bh, batch, steps, d) = (*bh, *batch, *steps, *d);
                let (al, hd) = (self.data(*alpha), self.data(*h));
                if let Some(ga) = self.acc(grads, *alpha) {
                    for b in 0..batch {
                        let hb = if bh == 1 { 0 } else { b };
                        for t in 0..steps {
                            let row = &hd[(hb * steps + t) * d..(hb * steps + t + 1) * d];
                            ga[b * steps + t] += row.iter().zip(&g[b * d..(b + 1) * d]).map(|(&x, &y)| x * y).sum::<T>();
                        }
                    }
                }
                if let Some(gh) = self.acc(grads, *h) {
                    for b in 0..batch {
                        let hb = if bh == 1 { 0 } else { b };
                        for t in 0..steps {
                            let wgt = al[b * steps + t];
                            let dst = &mut gh[(hb * steps + t) * d..(hb * steps + t + 1) * d];
                            for (o, &gv) in dst.iter_mut().zip(&g[b * d..(b + 1) * d]) {
                                *o += wgt * gv;
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids, e } => {
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                }
            }
            Op::FocalLoss { logits, targets, probs, logp, clamped, gamma, scale, n } => {
                let n = *n;
                if let Some(gl) = self.acc(grads, *logits) {
                    let up = g[0] * *scale;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &probs[r * n..(r + 1) * n];
                        let p = row[t];
                        // p·dL/dp; the softmax Jacobian contributes p·(δ - s).
                        let one_minus = T::one() - p;
                        let mut coef = T::zero();
                        if *gamma != T::zero() && one_minus > T::zero() {
                            coef += *gamma * one_minus.powf(*gamma - T::one()) * p * logp[r];
                        }
                        if !clamped[r] {
                            coef -= focal_weight(p, *gamma);
                        }
                        for j in 0..n {
                            let delta = if j == t { T::one() } else { T::zero() };
                            gl[r * n + j] += up * coef * (delta - row[j]);
                        }
                    }
                }
            }
            Op::MapToSequence { x, b, c, w } => {
                let (b, c, w) = (*b, *c, *w);
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..b {
                        for ch in 0..c {
                            for i in 0..w {
                                gx[(bi * c + ch) * w + i] += g[(bi * w + i) * c + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Weight `(1 - p)^γ`, with `0^0 = 1`.
fn focal_weight<T: Scalar>(p: T, gamma: T) -> T {
    if gamma == T::zero() {
        T::one()
    } else {
        (T::one() - p).max(T::zero()).powf(gamma)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub(crate) fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
    row.iter().map(|&v| v - lse).collect()
}

/// `c += a·b` for `a: [m×k]`, `b: [k×n]`.
fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in crow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c += a·bᵀ` for `a: [m×n]`, `b: [k×n]`, `c: [m×k]`.
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, o) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *o += arow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        c.chunks_mut(k).enumerate().for_each(row);
    }
}

/// `c += aᵀ·b` for `a: [m×k]`, `b: [m×n]`, `c: [k×n]`.
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(p, crow): (usize, &mut [T])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in crow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Valid output column range `[lo, hi)` for a kernel tap at horizontal
/// offset `kx` so that the input column `x + kx - pw` stays in bounds.
fn tap_range(kx: usize, pad: usize, w_in: usize, w_out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w_in + pad).saturating_sub(kx).min(w_out);
    (lo, hi.max(lo))
}

fn conv_forward<T: Scalar>(x: &[T], k: &[T], d: ConvDims) -> Vec<T> {
    let mut out = vec![T::zero(); d.b * d.f * d.ho * d.wo];
    out.par_chunks_mut(d.ho * d.wo).enumerate().for_each(|(plane, o)| {
        let (bi, f) = (plane / d.f, plane % d.f);
        for c in 0..d.c {
            let xin = &x[(bi * d.c + c) * d.h * d.w..(bi * d.c + c + 1) * d.h * d.w];
            for ky in 0..d.kh {
                let (ylo, yhi) = tap_range(ky, d.ph, d.h, d.ho);
                for kx in 0..d.kw {
                    let wv = k[((f * d.c + c) * d.kh + ky) * d.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (xlo, xhi) = tap_range(kx, d.pw, d.w, d.wo);
                    for y in ylo..yhi {
                        let iy = y + ky - d.ph;
                        let orow = &mut o[y * d.wo + xlo..y * d.wo + xhi];
                        let irow = &xin[iy * d.w + xlo + kx - d.pw..iy * d.w + xhi + kx - d.pw];
                        for (ov, &iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_backward_input<T: Scalar>(g: &[T], k: &[T], gx: &mut [T], d: ConvDims) {
    gx.par_chunks_mut(d.c * d.h * d.w).enumerate().for_each(|(bi, gxb)| {
        for f in 0..d.f {
            let gp = &g[(bi * d.f + f) * d.ho * d.wo..(bi * d.f + f + 1) * d.ho * d.wo];
            for c in 0..d.c {
                let gxc = &mut gxb[c * d.h * d.w..(c + 1) * d.h * d.w];
                for ky in 0..d.kh {
                    let (ylo, yhi) = tap_range(ky, d.ph, d.h, d.ho);
                    for kx in 0..d.kw {
                        let wv = k[((f * d.c + c) * d.kh + ky) * d.kw + kx];
                        let (xlo, xhi) = tap_range(kx, d.pw, d.w, d.wo);
                        for y in ylo..yhi {
                            let iy = y + ky - d.ph;
                            let grow = &gp[y * d.wo + xlo..y * d.wo + xhi];
                            let dst = &mut gxc[iy * d.w + xlo + kx - d.pw..iy * d.w + xhi + kx - d.pw];
                            for (o, &gv) in dst.iter_mut().zip(grow) {
                                *o += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });
}

fn conv_backward_kernel<T: Scalar>(g: &[T], x: &[T], gk: &mut [T], d: ConvDims) {
    gk.par_chunks_mut(d.c * d.kh * d.kw).enumerate().for_each(|(f, gkf)| {
        for bi in 0..d.b {
            let gp = &g[(bi * d.f + f) * d.ho * d.wo..(bi * d.f + f + 1) * d.ho * d.wo];
            for c in 0..d.c {
                let xin = &x[(bi * d.c + c) * d.h * d.w..(bi * d.c + c + 1) * d.h * d.w];
                for ky in 0..d.kh {
                    let (ylo, yhi) = tap_range(ky, d.ph, d.h, d.ho);
                    for kx in 0..d.kw {
                        let (xlo, xhi) = tap_range(kx, d.pw, d.w, d.wo);
                        let mut s = T::zero();
                        for y in ylo..yhi {
                            let iy = y + ky - d.ph;
                            let grow = &gp[y * d.wo + xlo..y * d.wo + xhi];
                            let irow = &xin[iy * d.w + xlo + kx - d.pw..iy * d.w + xhi + kx - d.pw];
                            s += grow.iter().zip(irow).map(|(&a, &b)| a * b).sum::<T>();
                        }
                        gkf[(c * d.kh + ky) * d.kw + kx] += s;
                    }
                }
            }
        }
    });
}
