//! Reverse-mode differentiation over tensors.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the tape is a DAG whose
//! insertion order is a topological order; [`Tape::backward`] walks it once
//! in reverse. Each recorded operation belongs to one [`OpKind`] with a
//! hand-written backward rule.

mod cases;
mod gradcheck;

use std::sync::Arc;

use crate::arch::PatchGeom;
use crate::ssm::selective::{SelectiveDims, SelectiveInputs};
use crate::ssm::ZohMode;
use crate::tensor::{
    axis_layout, dims3, gemm, is_trailing, layernorm_forward, sigmoid, silu_grad, silu_scalar,
    softplus_scalar, MatView, Scalar, Tensor, TensorError,
};

pub use cases::{random_case, OpCase};
pub use gradcheck::{grad_check, grad_check_fn};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every operation with a registered backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Silu,
    Softplus,
    Exp,
    Softmax,
    LayerNorm,
    Sum,
    Mean,
    SumAxis,
    RowDiv,
    GatherRows,
    CausalConv,
    SelectiveScan,
    Patchify,
    Unpatchify,
    SliceLast,
    ConcatLast,
    RelL2,
    GridGradient,
}

impl OpKind {
    /// All differentiable kinds (everything except leaves).
    pub const DIFFERENTIABLE: [OpKind; 23] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Silu,
        OpKind::Softplus,
        OpKind::Exp,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAxis,
        OpKind::RowDiv,
        OpKind::GatherRows,
        OpKind::CausalConv,
        OpKind::SelectiveScan,
        OpKind::Patchify,
        OpKind::Unpatchify,
        OpKind::SliceLast,
        OpKind::ConcatLast,
        OpKind::RelL2,
        OpKind::GridGradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Silu => "silu",
            OpKind::Softplus => "softplus",
            OpKind::Exp => "exp",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layernorm",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::RowDiv => "row_div",
            OpKind::GatherRows => "gather_rows",
            OpKind::CausalConv => "causal_conv",
            OpKind::SelectiveScan => "selective_scan",
            OpKind::Patchify => "patchify",
            OpKind::Unpatchify => "unpatchify",
            OpKind::SliceLast => "slice_last",
            OpKind::ConcatLast => "concat_last",
            OpKind::RelL2 => "rel_l2",
            OpKind::GridGradient => "grid_gradient",
        }
    }
}

/// Lower bound on a target norm in relative-L2 losses.
pub const REL_L2_EPS: f64 = 1e-8;

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    RowDiv {
        a: Var,
        denom: Var,
        eps: T,
    },
    GatherRows(Var, Arc<[usize]>),
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
    },
    SelectiveScan {
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        skip: Var,
        mode: ZohMode,
        checkpoints: Vec<Vec<T>>,
    },
    Patchify(Var, PatchGeom),
    Unpatchify(Var, PatchGeom),
    SliceLast {
        a: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    RelL2 {
        pred: Var,
        truth: Tensor<T>,
    },
    GridGradient {
        a: Var,
        h: usize,
        w: usize,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Silu(_) => OpKind::Silu,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Exp(_) => OpKind::Exp,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::RowDiv { .. } => OpKind::RowDiv,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::CausalConv { .. } => OpKind::CausalConv,
            Op::SelectiveScan { .. } => OpKind::SelectiveScan,
            Op::Patchify(..) => OpKind::Patchify,
            Op::Unpatchify(..) => OpKind::Unpatchify,
            Op::SliceLast { .. } => OpKind::SliceLast,
            Op::ConcatLast(_) => OpKind::ConcatLast,
            Op::RelL2 { .. } => OpKind::RelL2,
            Op::GridGradient { .. } => OpKind::GridGradient,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Silu(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Softmax(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::GatherRows(a, _)
            | Op::Patchify(a, _)
            | Op::Unpatchify(a, _)
            | Op::SliceLast { a, .. }
            | Op::GridGradient { a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::RowDiv { a, denom, .. } => vec![*a, *denom],
            Op::CausalConv { x, w, b } => vec![*x, *w, *b],
            Op::SelectiveScan {
                u,
                delta,
                a_log,
                b,
                c,
                skip,
                ..
            } => vec![*u, *delta, *a_log, *b, *c, *skip],
            Op::ConcatLast(parts) => parts.clone(),
            Op::RelL2 { pred, .. } => vec![*pred],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Single-owner recording of one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

type R = Result<Var, TensorError>;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let inputs = op.inputs();
        let id = self.nodes.len();
        debug_assert!(inputs.iter().all(|v| v.0 < id), "tape edges must point backwards");
        let needs_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(id)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Handle of the `i`-th recorded node.
    pub fn var(&self, i: usize) -> Option<Var> {
        (i < self.nodes.len()).then_some(Var(i))
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).unwrap())
    }

    /// Clears accumulated adjoints so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ----- forward ops -------------------------------------------------

    /// Matrix product. With a rank-2 `b: [k, n]`, `a: [.., k]` is read as a
    /// stack of rows. With a rank-3 `b`, both operands are `[B, ·, ·]` batches
    /// and `ta`/`tb` select transposed operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> R {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let g = mm_geometry(&sa, &sb, ta, tb).ok_or_else(|| TensorError::shapes("matmul", &sa, &sb))?;
        let mut out = vec![T::zero(); g.batch * g.m * g.n];
        for bi in 0..g.batch {
            let (av, bv) = g.views(self.val(a), self.val(b), bi);
            gemm(
                g.m,
                g.k,
                g.n,
                T::one(),
                av,
                bv,
                T::zero(),
                &mut out[bi * g.m * g.n..(bi + 1) * g.m * g.n],
                g.n as isize,
                1,
            );
        }
        let value = Tensor::new(&g.out_shape, out)?;
        Ok(self.push(Op::MatMul { a, b, ta, tb }, value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> R {
        self.matmul_t(a, b, false, false)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_trailing(sa, sb) {
            return Err(TensorError::shapes(name, sa, sb));
        }
        let (av, bv) = (self.val(a), self.val(b));
        let n = bv.len().max(1);
        let data = av.iter().enumerate().map(|(i, &x)| f(x, bv[i % n])).collect();
        Tensor::new(self.shape(a), data)
    }

    /// `a + b` with `b` broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> R {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> R {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> R {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu_scalar);
        self.push(Op::Silu(a), v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus_scalar);
        self.push(Op::Softplus(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), v)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> R {
        let v = crate::tensor::softmax(self.value(a), axis)?;
        Ok(self.push(Op::Softmax(a, axis), v))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> R {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::shapes("layernorm", self.shape(x), self.shape(gain)));
        }
        if eps <= T::zero() {
            return Err(TensorError::contract("layernorm", "eps must be positive"));
        }
        let (out, means, rstds) = layernorm_forward(self.val(x), d, self.val(gain), self.val(bias), eps);
        let v = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            },
            v,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len().max(1) as f64);
        let v = Tensor::scalar(self.value(a).sum() / n);
        self.push(Op::Mean(a), v)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> R {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::contract("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_layout(&shape, axis);
        let src = self.val(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + j) * inner + i];
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let v = Tensor::new(&oshape, out)?;
        Ok(self.push(Op::SumAxis(a, axis), v))
    }

    /// `a[r, :] / (denom[r] + eps)` where `denom` has the leading shape of `a`.
    pub fn row_div(&mut self, a: Var, denom: Var, eps: T) -> R {
        let sa = self.shape(a);
        if sa.is_empty() || self.shape(denom) != &sa[..sa.len() - 1] {
            return Err(TensorError::shapes("row_div", sa, self.shape(denom)));
        }
        let d = self.value(a).last_dim();
        let (av, dv) = (self.val(a), self.val(denom));
        let data = av.iter().enumerate().map(|(i, &x)| x / (dv[i / d] + eps)).collect();
        let v = Tensor::new(sa, data)?;
        Ok(self.push(Op::RowDiv { a, denom, eps }, v))
    }

    /// Reorders axis 1 of `[B, L, C]`: `out[b, i] = a[b, perm[i]]`.
    pub fn gather_rows(&mut self, a: Var, perm: Arc<[usize]>) -> R {
        let len = dims3("gather_rows", self.shape(a))?.1;
        let mut seen = vec![false; len];
        for &p in perm.iter() {
            if p >= len || std::mem::replace(&mut seen[p], true) {
                return Err(TensorError::contract("gather_rows", "index list is not a permutation"));
            }
        }
        let v = self.value(a).gather_rows(&perm)?;
        Ok(self.push(Op::GatherRows(a, perm), v))
    }

    /// Depthwise causal convolution along axis 1 of `x: [B, L, C]` with
    /// `w: [C, K]` (tap `K-1` multiplies the current step) and `b: [C]`.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var) -> R {
        let (bsz, len, ch) = dims3("causal_conv", self.shape(x))?;
        let sw = self.shape(w);
        if sw.len() != 2 || sw[0] != ch || self.shape(b) != [ch] {
            return Err(TensorError::shapes("causal_conv", self.shape(x), sw));
        }
        let k = sw[1];
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        let mut out = vec![T::zero(); bsz * len * ch];
        for bi in 0..bsz {
            for t in 0..len {
                let row = &mut out[(bi * len + t) * ch..(bi * len + t + 1) * ch];
                row.copy_from_slice(bv);
                for j in 0..k {
                    let Some(src_t) = (t + j + 1).checked_sub(k) else { continue };
                    let src = &xv[(bi * len + src_t) * ch..(bi * len + src_t + 1) * ch];
                    for c in 0..ch {
                        row[c] += wv[c * k + j] * src[c];
                    }
                }
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        Ok(self.push(Op::CausalConv { x, w, b }, v))
    }

    /// Fused selective scan over `[B, L, ·]` batches; see
    /// [`SelectiveInputs`] for per-sequence shapes.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(&mut self, u: Var, delta: Var, a_log: Var, b: Var, c: Var, skip: Var, mode: ZohMode) -> R {
        let (bsz, len, ch) = dims3("selective_scan", self.shape(u))?;
        let sa = self.shape(a_log);
        if sa.len() != 2 || sa[0] != ch {
            return Err(TensorError::shapes("selective_scan", self.shape(u), sa));
        }
        let state = sa[1];
        let bc_shape: Vec<usize> = match self.shape(u).len() {
            2 => vec![len, state],
            _ => vec![bsz, len, state],
        };
        if self.shape(delta) != self.shape(u) {
            return Err(TensorError::shapes("selective_scan", self.shape(u), self.shape(delta)));
        }
        if self.shape(b) != bc_shape.as_slice() || self.shape(c) != bc_shape.as_slice() {
            return Err(TensorError::shapes("selective_scan", &bc_shape, self.shape(b)));
        }
        if self.shape(skip) != [ch] {
            return Err(TensorError::shapes("selective_scan", self.shape(u), self.shape(skip)));
        }
        let dims = SelectiveDims {
            len,
            channels: ch,
            state,
        };
        let mut out = Vec::with_capacity(bsz * len * ch);
        let mut checkpoints = Vec::with_capacity(bsz);
        for bi in 0..bsz {
            let inp = self.selective_inputs(dims, bi, [u, delta, a_log, b, c, skip], mode);
            let (y, ck) = inp.forward();
            out.extend_from_slice(&y);
            checkpoints.push(ck);
        }
        let v = Tensor::new(self.shape(u), out)?;
        Ok(self.push(
            Op::SelectiveScan {
                u,
                delta,
                a_log,
                b,
                c,
                skip,
                mode,
                checkpoints,
            },
            v,
        ))
    }

    fn selective_inputs(&self, dims: SelectiveDims, bi: usize, vars: [Var; 6], mode: ZohMode) -> SelectiveInputs<'_, T> {
        let lc = dims.len * dims.channels;
        let lp = dims.len * dims.state;
        let [u, delta, a_log, b, c, skip] = vars;
        SelectiveInputs {
            dims,
            u: &self.val(u)[bi * lc..(bi + 1) * lc],
            delta: &self.val(delta)[bi * lc..(bi + 1) * lc],
            a_log: self.val(a_log),
            b: &self.val(b)[bi * lp..(bi + 1) * lp],
            c: &self.val(c)[bi * lp..(bi + 1) * lp],
            skip: self.val(skip),
            mode,
        }
    }

    /// Patch means: `[B, h·w, C] → [B, M, C]`.
    pub fn patchify(&mut self, a: Var, geom: PatchGeom) -> R {
        let (bsz, n, ch) = dims3("patchify", self.shape(a))?;
        if n != geom.points() {
            return Err(TensorError::contract(
                "patchify",
                format!("{n} points do not match grid {}x{}", geom.grid_h, geom.grid_w),
            ));
        }
        let m = geom.tokens();
        let inv = T::one() / T::of(geom.patch_size() as f64);
        let src = self.val(a);
        let mut out = vec![T::zero(); bsz * m * ch];
        for bi in 0..bsz {
            for i in 0..n {
                let j = geom.token_of(i);
                for c in 0..ch {
                    out[(bi * m + j) * ch + c] += src[(bi * n + i) * ch + c] * inv;
                }
            }
        }
        let v = Tensor::new(&[bsz, m, ch], out)?;
        Ok(self.push(Op::Patchify(a, geom), v))
    }

    /// Broadcasts each latent back over its patch: `[B, M, C] → [B, h·w, C]`.
    pub fn unpatchify(&mut self, a: Var, geom: PatchGeom) -> R {
        let (bsz, m, ch) = dims3("unpatchify", self.shape(a))?;
        if m != geom.tokens() {
            return Err(TensorError::contract("unpatchify", format!("{m} latents, geometry has {}", geom.tokens())));
        }
        let n = geom.points();
        let src = self.val(a);
        let mut out = vec![T::zero(); bsz * n * ch];
        for bi in 0..bsz {
            for i in 0..n {
                let j = geom.token_of(i);
                out[(bi * n + i) * ch..(bi * n + i + 1) * ch]
                    .copy_from_slice(&src[(bi * m + j) * ch..(bi * m + j + 1) * ch]);
            }
        }
        let v = Tensor::new(&[bsz, n, ch], out)?;
        Ok(self.push(Op::Unpatchify(a, geom), v))
    }

    /// Channels `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> R {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if start + len > d {
            return Err(TensorError::contract("slice_last", format!("{start}+{len} exceeds {d}")));
        }
        let src = self.val(a);
        let data: Vec<T> = src.chunks(d).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len;
        let v = Tensor::new(&oshape, data)?;
        Ok(self.push(Op::SliceLast { a, start }, v))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> R {
        let first = self.shape(*parts.first().ok_or_else(|| TensorError::contract("concat_last", "no inputs"))?).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(TensorError::shapes("concat_last", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = lead.iter().product::<usize>();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first.clone();
        *shape.last_mut().unwrap() = total;
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(Op::ConcatLast(parts.to_vec()), v))
    }

    /// Mean over the leading (batch) axis of `‖pred_i - truth_i‖ / ‖truth_i‖`.
    pub fn rel_l2(&mut self, pred: Var, truth: &Tensor<T>) -> R {
        if self.shape(pred) != truth.shape() || truth.rank() == 0 {
            return Err(TensorError::shapes("rel_l2", self.shape(pred), truth.shape()));
        }
        let (diff_norms, truth_norms) = rel_l2_norms(self.val(pred), truth.data(), truth.shape()[0]);
        let bsz = diff_norms.len();
        let total: T = diff_norms.iter().zip(&truth_norms).map(|(&d, &t)| d / t).sum();
        let v = Tensor::scalar(total / T::of(bsz as f64));
        Ok(self.push(
            Op::RelL2 {
                pred,
                truth: truth.clone(),
            },
            v,
        ))
    }

    /// Central-difference spatial gradients of `[B, h·w, C]` fields on an
    /// `h×w` grid (unit spacing, one-sided at the edges). Output channels are
    /// `[∂/∂col (C) | ∂/∂row (C)]`.
    pub fn grid_gradient(&mut self, a: Var, h: usize, w: usize) -> R {
        let (bsz, n, ch) = dims3("grid_gradient", self.shape(a))?;
        if n != h * w || h < 2 || w < 2 {
            return Err(TensorError::contract("grid_gradient", format!("{n} points on a {h}x{w} grid")));
        }
        let src = self.val(a);
        let mut out = vec![T::zero(); bsz * n * 2 * ch];
        for bi in 0..bsz {
            for (i, (lo, hi, scale)) in stencil_iter(h, w) {
                for c in 0..ch {
                    let f = |p: usize| src[(bi * n + p) * ch + c];
                    out[(bi * n + i) * 2 * ch + c] = (f(lo.0) - f(lo.1)) * T::of(scale.0);
                    out[(bi * n + i) * 2 * ch + ch + c] = (f(hi.0) - f(hi.1)) * T::of(scale.1);
                }
            }
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = 2 * ch;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(Op::GridGradient { a, h, w }, v))
    }

    // ----- backward ----------------------------------------------------

    /// Propagates adjoints from a scalar `root` to every node it depends on.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                self.backprop_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr, $f:expr) => {{
                let v: Var = $v;
                if wants(v) {
                    let n = self.nodes[v.0].value.len();
                    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(slot.as_mut_slice());
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let g_geo = mm_geometry(self.shape(*a), self.shape(*b), *ta, *tb).unwrap();
                let (m, k, n) = (g_geo.m, g_geo.k, g_geo.n);
                let (av, bv) = (self.val(*a), self.val(*b));
                acc!(*a, |da: &mut [T]| {
                    for bi in 0..g_geo.batch {
                        let (_, bview) = g_geo.views(av, bv, bi);
                        let gv = MatView::row_major(&g[bi * m * n..(bi + 1) * m * n], n);
                        let (rs, cs) = if *ta { (1, m as isize) } else { (k as isize, 1) };
                        gemm(m, n, k, T::one(), gv, bview.t(), T::one(), &mut da[bi * m * k..(bi + 1) * m * k], rs, cs);
                    }
                });
                acc!(*b, |db: &mut [T]| {
                    for bi in 0..g_geo.batch {
                        let (aview, _) = g_geo.views(av, bv, bi);
                        let gv = MatView::row_major(&g[bi * m * n..(bi + 1) * m * n], n);
                        let (rs, cs) = if *tb { (1, k as isize) } else { (n as isize, 1) };
                        let slot = if g_geo.b_batched { bi * k * n..(bi + 1) * k * n } else { 0..k * n };
                        gemm(k, m, n, T::one(), aview.t(), gv, T::one(), &mut db[slot], rs, cs);
                    }
                });
            }
            Op::Add(a, b) => {
                acc!(*a, |da: &mut [T]| add_into(da, g));
                acc!(*b, |db: &mut [T]| fold_into(db, g, |x| x));
            }
            Op::Sub(a, b) => {
                acc!(*a, |da: &mut [T]| add_into(da, g));
                acc!(*b, |db: &mut [T]| fold_into(db, g, |x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let nb = bv.len().max(1);
                acc!(*a, |da: &mut [T]| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * bv[i % nb];
                    }
                });
                acc!(*b, |db: &mut [T]| {
                    for (i, (&gi, &ai)) in g.iter().zip(av).enumerate() {
                        db[i % nb] += gi * ai;
                    }
                });
            }
            Op::Scale(a, s) => acc!(*a, |da: &mut [T]| {
                for (d, &gi) in da.iter_mut().zip(g) {
                    *d += gi * *s;
                }
            }),
            Op::Silu(a) => {
                let x = self.val(*a);
                acc!(*a, |da: &mut [T]| {
                    for i in 0..da.len() {
                        da[i] += g[i] * silu_grad(x[i]);
                    }
                })
            }
            Op::Softplus(a) => {
                let x = self.val(*a);
                acc!(*a, |da: &mut [T]| {
                    for i in 0..da.len() {
                        da[i] += g[i] * sigmoid(x[i]);
                    }
                })
            }
            Op::Exp(a) => acc!(*a, |da: &mut [T]| {
                for i in 0..da.len() {
                    da[i] += g[i] * out[i];
                }
            }),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
                acc!(*a, |da: &mut [T]| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| o * len * inner + j * inner + i;
                            let dot: T = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..len {
                                da[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            } => {
                let xv = self.val(*x);
                let gv = self.val(*gain);
                let d = gv.len();
                let inv_d = T::one() / T::of(d as f64);
                acc!(*gain, |dg: &mut [T]| {
                    for (r, (&mu, &rs)) in means.iter().zip(rstds).enumerate() {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * (xv[r * d + j] - mu) * rs;
                        }
                    }
                });
                acc!(*bias, |db: &mut [T]| fold_into(db, g, |v| v));
                acc!(*x, |dx: &mut [T]| {
                    for (r, (&mu, &rs)) in means.iter().zip(rstds).enumerate() {
                        let row = r * d..(r + 1) * d;
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = g[row.start + j] * gv[j];
                            let xh = (xv[row.start + j] - mu) * rs;
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for j in 0..d {
                            let dxh = g[row.start + j] * gv[j];
                            let xh = (xv[row.start + j] - mu) * rs;
                            dx[row.start + j] += rs * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                });
            }
            Op::Sum(a) => acc!(*a, |da: &mut [T]| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = T::of(self.nodes[a.0].value.len().max(1) as f64);
                acc!(*a, |da: &mut [T]| da.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_layout(self.shape(*a), *axis);
                acc!(*a, |da: &mut [T]| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                da[(o * len + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::RowDiv { a, denom, eps } => {
                let (av, dv) = (self.val(*a), self.val(*denom));
                let d = self.nodes[a.0].value.last_dim();
                acc!(*a, |da: &mut [T]| {
                    for i in 0..da.len() {
                        da[i] += g[i] / (dv[i / d] + *eps);
                    }
                });
                acc!(*denom, |dd: &mut [T]| {
                    for (r, slot) in dd.iter_mut().enumerate() {
                        let den = dv[r] + *eps;
                        let s: T = (r * d..(r + 1) * d).map(|i| g[i] * av[i]).sum();
                        *slot -= s / (den * den);
                    }
                });
            }
            Op::GatherRows(a, perm) => {
                let (bsz, len, ch) = dims3("gather_rows", self.shape(*a)).unwrap();
                acc!(*a, |da: &mut [T]| {
                    for bi in 0..bsz {
                        for (i, &src) in perm.iter().enumerate() {
                            let (dst, gs) = ((bi * len + src) * ch, (bi * len + i) * ch);
                            for c in 0..ch {
                                da[dst + c] += g[gs + c];
                            }
                        }
                    }
                })
            }
            Op::CausalConv { x, w, b } => {
                let (bsz, len, ch) = dims3("causal_conv", self.shape(*x)).unwrap();
                let k = self.shape(*w)[1];
                let (xv, wv) = (self.val(*x), self.val(*w));
                acc!(*b, |db: &mut [T]| fold_into(db, g, |v| v));
                acc!(*w, |dw: &mut [T]| {
                    for bi in 0..bsz {
                        for t in 0..len {
                            for j in 0..k {
                                let Some(src_t) = (t + j + 1).checked_sub(k) else { continue };
                                for c in 0..ch {
                                    dw[c * k + j] += g[(bi * len + t) * ch + c] * xv[(bi * len + src_t) * ch + c];
                                }
                            }
                        }
                    }
                });
                acc!(*x, |dx: &mut [T]| {
                    for bi in 0..bsz {
                        for t in 0..len {
                            for j in 0..k {
                                let Some(src_t) = (t + j + 1).checked_sub(k) else { continue };
                                for c in 0..ch {
                                    dx[(bi * len + src_t) * ch + c] += g[(bi * len + t) * ch + c] * wv[c * k + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::SelectiveScan {
                u,
                delta,
                a_log,
                b,
                c,
                skip,
                mode,
                checkpoints,
            } => {
                let (bsz, len, ch) = dims3("selective_scan", self.shape(*u)).unwrap();
                let state = self.shape(*a_log)[1];
                let dims = SelectiveDims {
                    len,
                    channels: ch,
                    state,
                };
                let (lc, lp) = (len * ch, len * state);
                for bi in 0..bsz {
                    let inp = self.selective_inputs(dims, bi, [*u, *delta, *a_log, *b, *c, *skip], *mode);
                    let sg = inp.backward(&checkpoints[bi], &g[bi * lc..(bi + 1) * lc]);
                    acc!(*u, |d: &mut [T]| add_into(&mut d[bi * lc..(bi + 1) * lc], &sg.u));
                    acc!(*delta, |d: &mut [T]| add_into(&mut d[bi * lc..(bi + 1) * lc], &sg.delta));
                    acc!(*a_log, |d: &mut [T]| add_into(d, &sg.a_log));
                    acc!(*b, |d: &mut [T]| add_into(&mut d[bi * lp..(bi + 1) * lp], &sg.b));
                    acc!(*c, |d: &mut [T]| add_into(&mut d[bi * lp..(bi + 1) * lp], &sg.c));
                    acc!(*skip, |d: &mut [T]| add_into(d, &sg.skip));
                }
            }
            Op::Patchify(a, geom) => {
                let (bsz, n, ch) = dims3("patchify", self.shape(*a)).unwrap();
                let m = geom.tokens();
                let inv = T::one() / T::of(geom.patch_size() as f64);
                acc!(*a, |da: &mut [T]| {
                    for bi in 0..bsz {
                        for i in 0..n {
                            let j = geom.token_of(i);
                            for c in 0..ch {
                                da[(bi * n + i) * ch + c] += g[(bi * m + j) * ch + c] * inv;
                            }
                        }
                    }
                })
            }
            Op::Unpatchify(a, geom) => {
                let (bsz, m, ch) = dims3("unpatchify", self.shape(*a)).unwrap();
                let n = geom.points();
                acc!(*a, |da: &mut [T]| {
                    for bi in 0..bsz {
                        for i in 0..n {
                            let j = geom.token_of(i);
                            for c in 0..ch {
                                da[(bi * m + j) * ch + c] += g[(bi * n + i) * ch + c];
                            }
                        }
                    }
                })
            }
            Op::SliceLast { a, start } => {
                let d = self.nodes[a.0].value.last_dim();
                let len = node.value.last_dim();
                acc!(*a, |da: &mut [T]| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut da[r * d + start..r * d + start + len], gr);
                    }
                })
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    acc!(p, |dp: &mut [T]| {
                        for (r, gr) in g.chunks(total).enumerate() {
                            add_into(&mut dp[r * w..(r + 1) * w], &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::RelL2 { pred, truth } => {
                let pv = self.val(*pred);
                let bsz = truth.shape()[0];
                let (dn, tn) = rel_l2_norms(pv, truth.data(), bsz);
                let per = pv.len() / bsz;
                acc!(*pred, |dp: &mut [T]| {
                    for bi in 0..bsz {
                        if dn[bi] == T::zero() {
                            continue;
                        }
                        let coef = g[0] / (T::of(bsz as f64) * dn[bi] * tn[bi]);
                        for i in bi * per..(bi + 1) * per {
                            dp[i] += coef * (pv[i] - truth.data()[i]);
                        }
                    }
                })
            }
            Op::GridGradient { a, h, w } => {
                let (bsz, n, ch) = dims3("grid_gradient", self.shape(*a)).unwrap();
                acc!(*a, |da: &mut [T]| {
                    for bi in 0..bsz {
                        for (i, (lo, hi, scale)) in stencil_iter(*h, *w) {
                            for c in 0..ch {
                                let gx = g[(bi * n + i) * 2 * ch + c] * T::of(scale.0);
                                let gy = g[(bi * n + i) * 2 * ch + ch + c] * T::of(scale.1);
                                da[(bi * n + lo.0) * ch + c] += gx;
                                da[(bi * n + lo.1) * ch + c] -= gx;
                                da[(bi * n + hi.0) * ch + c] += gy;
                                da[(bi * n + hi.1) * ch + c] -= gy;
                            }
                        }
                    }
                })
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Accumulates `g` into a trailing-broadcast operand by summing over the
/// leading axes.
fn fold_into<T: Scalar>(dst: &mut [T], g: &[T], f: impl Fn(T) -> T) {
    let n = dst.len().max(1);
    for (i, &gi) in g.iter().enumerate() {
        dst[i % n] += f(gi);
    }
}

fn rel_l2_norms<T: Scalar>(pred: &[T], truth: &[T], bsz: usize) -> (Vec<T>, Vec<T>) {
    let per = pred.len() / bsz.max(1);
    let eps = T::of(REL_L2_EPS);
    (0..bsz)
        .map(|bi| {
            let r = bi * per..(bi + 1) * per;
            let d: T = pred[r.clone()].iter().zip(&truth[r.clone()]).map(|(&p, &t)| (p - t) * (p - t)).sum();
            let t: T = truth[r].iter().map(|&t| t * t).sum();
            (d.sqrt(), t.sqrt().max(eps))
        })
        .unzip()
}

type Stencil = ((usize, usize), (usize, usize), (f64, f64));

/// For each grid point: (column-difference pair, row-difference pair, scales).
fn stencil_iter(h: usize, w: usize) -> impl Iterator<Item = (usize, Stencil)> {
    let pair = |i: usize, n: usize| -> (usize, usize, f64) {
        if i == 0 {
            (1, 0, 1.0)
        } else if i == n - 1 {
            (n - 1, n - 2, 1.0)
        } else {
            (i + 1, i - 1, 0.5)
        }
    };
    (0..h * w).map(move |idx| {
        let (r, c) = (idx / w, idx % w);
        let (c1, c0, sc) = pair(c, w);
        let (r1, r0, sr) = pair(r, h);
        (idx, ((r * w + c1, r * w + c0), (r1 * w + c, r0 * w + c), (sc, sr)))
    })
}

struct MmGeometry {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

impl MmGeometry {
    fn views<'a, T>(&self, a: &'a [T], b: &'a [T], bi: usize) -> (MatView<'a, T>, MatView<'a, T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let a_s = &a[bi * m * k..(bi + 1) * m * k];
        let b_s = if self.b_batched { &b[bi * k * n..(bi + 1) * k * n] } else { b };
        let av = if self.ta { MatView::transposed(a_s, m) } else { MatView::row_major(a_s, k) };
        let bv = if self.tb { MatView::transposed(b_s, k) } else { MatView::row_major(b_s, n) };
        (av, bv)
    }
}

fn mm_geometry(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Option<MmGeometry> {
    match sb.len() {
        2 => {
            if ta || sa.len() < 2 {
                return None;
            }
            let (k, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
            if *sa.last()? != k {
                return None;
            }
            let m = sa.iter().product::<usize>() / k.max(1);
            let mut out_shape = sa.to_vec();
            *out_shape.last_mut()? = n;
            Some(MmGeometry {
                batch: 1,
                m,
                k,
                n,
                ta,
                tb,
                b_batched: false,
                out_shape,
            })
        }
        3 => {
            if sa.len() != 3 || sa[0] != sb[0] {
                return None;
            }
            let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
            let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
            if k != kb {
                return None;
            }
            Some(MmGeometry {
                batch: sa[0],
                m,
                k,
                n,
                ta,
                tb,
                b_batched: true,
                out_shape: vec![sa[0], m, n],
            })
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests;
