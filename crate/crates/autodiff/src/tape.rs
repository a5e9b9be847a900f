//! Gradient tape: every primitive appends a node holding its output value and
//! the operands it read. Node ids grow monotonically, so the node vector is
//! already in topological order and `backward` is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};

use crate::element::Element;
use crate::error::{AutodiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Inputs to `exp` and `sigmoid` are clamped to this magnitude.
pub const EXP_CLAMP: f64 = 30.0;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Expand(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of [`Tape::backward`]: gradients for every bound parameter and
/// every leaf created with [`Tape::input`].
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Tensor<T>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var)
    }
}

pub struct Tape<'p, T: Element> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
    backward_done: bool,
    check_finite: bool,
}

impl<'p, T: Element> Tape<'p, T> {
    /// A recording tape reading parameters from `params`.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::build(Some(params), true)
    }

    /// A tape that evaluates but records nothing differentiable.
    pub fn no_grad(params: &'p ParamStore<T>) -> Self {
        Self::build(Some(params), false)
    }

    /// A recording tape without a parameter store.
    pub fn detached() -> Self {
        Self::build(None, true)
    }

    fn build(params: Option<&'p ParamStore<T>>, grad_enabled: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled,
            backward_done: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the non-finite output check on every primitive.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn params(&self) -> Option<&'p ParamStore<T>> {
        self.params
    }

    /// Binds a parameter as a leaf. Repeated binds return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound.get(&id) {
            return Ok(*v);
        }
        let store = self.params.ok_or(AutodiffError::NoParams)?;
        let value = store.value(id).clone();
        let v = self.push_node(value, Op::Param(id), self.grad_enabled);
        self.bound.insert(id, v);
        Ok(v)
    }

    /// A differentiable leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push_node(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, operands: &[Var], name: &'static str) -> Result<Var> {
        if self.check_finite
            && !value.is_finite()
            && operands.iter().all(|o| self.nodes[o.0].value.is_finite())
        {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let rg = self.grad_enabled && operands.iter().any(|o| self.nodes[o.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push_node(value, op, rg))
    }

    // ----- elementwise ------------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shapes(name, &sa, &sb)?;
        let ma = BroadcastMap::new(&sa, &out_shape);
        let mb = BroadcastMap::new(&sb, &out_shape);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let data = (0..n).map(|i| f(va[ma.at(i)], vb[mb.at(i)])).collect();
        self.push(Tensor::from_parts(out_shape, data), op, &[a, b], name)
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64_lossy(factor);
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * f).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, f), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x + c).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::AddScalar(a), &[a], "add_scalar")
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op, &[a], name)
    }

    /// `max(x, 0)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let c = T::from_f64_lossy(EXP_CLAMP);
        self.unary(
            a,
            "sigmoid",
            move |x| T::one() / (T::one() + (-x.max(-c).min(c)).exp()),
            Op::Sigmoid(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let c = T::from_f64_lossy(EXP_CLAMP);
        self.unary(a, "exp", move |x| x.max(-c).min(c).exp(), Op::Exp(a))
    }

    // ----- linear algebra ---------------------------------------------------

    /// `a · b` where `a` is `[..., k]` (leading axes flattened) and `b` is `[k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || sa.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("expected [.., k] x [k, m], got {sa:?} x {sb:?}"),
            });
        }
        let k = *sa.last().unwrap();
        if k != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!(
                    "dimension {} of lhs is {k} but dimension 0 of rhs is {}",
                    sa.len() - 1,
                    sb[0]
                ),
            });
        }
        let m = sb[1];
        let n = numel(&sa) / k;
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (m, 1),
            T::zero(),
            &mut out,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(m);
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Batched product `[B, n, k] x [B, k, m] -> [B, n, m]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 {
            return Err(AutodiffError::ShapeMismatch {
                op: "bmm",
                detail: format!("expected rank-3 operands, got {sa:?} x {sb:?}"),
            });
        }
        if sa[0] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "bmm",
                detail: format!("dimension 0 (batch): {} vs {}", sa[0], sb[0]),
            });
        }
        if sa[2] != sb[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "bmm",
                detail: format!("dimension 2 of lhs is {} but dimension 1 of rhs is {}", sa[2], sb[1]),
            });
        }
        let (bsz, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bsz * n * m];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..bsz {
            T::gemm(
                n,
                k,
                m,
                &va[i * n * k..(i + 1) * n * k],
                (k, 1),
                &vb[i * k * m..(i + 1) * k * m],
                (m, 1),
                T::zero(),
                &mut out[i * n * m..(i + 1) * n * m],
            );
        }
        self.push(Tensor::from_parts(vec![bsz, n, m], out), Op::Bmm(a, b), &[a, b], "bmm")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                detail: format!("rank {} < 2", s.len()),
            });
        }
        let data = transpose_last2(self.value(a).data(), &s);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        self.push(Tensor::from_parts(shape, data), Op::Transpose(a), &[a], "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), &[a], "reshape")
    }

    /// Broadcasts `a` to `shape` (materialized copy).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let out = broadcast_shapes("expand", &s, shape)?;
        if out != shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "expand",
                detail: format!("{s:?} does not broadcast to {shape:?}"),
            });
        }
        let map = BroadcastMap::new(&s, shape);
        let v = self.value(a).data();
        let data = (0..numel(shape)).map(|i| v[map.at(i)]).collect();
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Expand(a), &[a], "expand")
    }

    // ----- structural -------------------------------------------------------

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| AutodiffError::InvalidArgument("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidArgument(format!("concat axis {axis} on rank {}", base.len())));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    detail: format!("rank {} vs {}", s.len(), base.len()),
                });
            }
            for (d, (&x, &y)) in s.iter().zip(&base).enumerate() {
                if d != axis && x != y {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat",
                        detail: format!("dimension {d}: {x} vs {y}"),
                    });
                }
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
            "concat",
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                detail: format!("range {start}..{} on dimension {axis} of {s:?}", start + len),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let v = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(
            Tensor::from_parts(shape, data),
            Op::Slice { a, axis, start },
            &[a],
            "slice",
        )
    }

    /// Row lookup into a `[rows, dim]` table. The output has shape
    /// `prefix ++ [dim]` where `prefix` multiplies out to `ids.len()`.
    pub fn embed(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "embed",
                detail: format!("table must be rank 2, got {s:?}"),
            });
        }
        if numel(prefix) != ids.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "embed",
                detail: format!("{} ids for output prefix {prefix:?}", ids.len()),
            });
        }
        let (rows, dim) = (s[0], s[1]);
        if let Some((position, &index)) = ids.iter().enumerate().find(|(_, &i)| i >= rows) {
            return Err(AutodiffError::IndexOutOfRange {
                index,
                rows,
                position,
            });
        }
        let v = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&v[i * dim..(i + 1) * dim]);
        }
        let mut shape = prefix.to_vec();
        shape.push(dim);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "embed",
        )
    }

    // ----- normalization ----------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last axis restricted to positions where `allowed` is
    /// true; disallowed positions get exactly zero weight. `allowed` has the
    /// same element count as `a`.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.value(a).numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("mask has {} entries for {:?}", allowed.len(), self.shape(a)),
            });
        }
        self.softmax_impl(a, Some(allowed))
    }

    fn softmax_impl(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let w = *shape.last().unwrap_or(&1);
        if w == 0 {
            return Err(AutodiffError::EmptyAxis { op: "softmax" });
        }
        let x = t.data();
        let mut out = vec![T::zero(); x.len()];
        for (row, (xr, yr)) in x.chunks(w).zip(out.chunks_mut(w)).enumerate() {
            let ok = |j: usize| allowed.is_none_or(|m| m[row * w + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in xr.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(AutodiffError::FullyMasked { row });
            }
            let mut sum = T::zero();
            for (j, (&v, y)) in xr.iter().zip(yr.iter_mut()).enumerate() {
                if ok(j) {
                    *y = (v - max).exp();
                    sum = sum + *y;
                }
            }
            yr.iter_mut().for_each(|y| *y = *y / sum);
        }
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), &[a], "softmax")
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(AutodiffError::EmptyAxis { op: "layer_norm" })?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [d] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("{name} is {:?}, expected [{d}]", self.shape(p)),
                });
            }
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let xr = &xv[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() / dn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    // ----- reductions and losses --------------------------------------------

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(a), &[a], "mean")
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// rows of `[n, v]` logits. `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {s:?} for {} targets", targets.len()),
            });
        }
        let v = s[1];
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(AutodiffError::NoTargets);
        }
        if let Some((position, index)) = targets
            .iter()
            .enumerate()
            .find_map(|(i, t)| t.filter(|&t| t >= v).map(|t| (i, t)))
        {
            return Err(AutodiffError::IndexOutOfRange {
                index,
                rows: v,
                position,
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let xr = &x[r * v..(r + 1) * v];
            let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..v {
                let e = (xr[j] - max).exp();
                probs[r * v + j] = e;
                sum = sum + e;
            }
            probs[r * v..(r + 1) * v].iter_mut().for_each(|p| *p = *p / sum);
            total = total + (max + sum.ln() - xr[t]);
        }
        let loss = total / T::from_usize(count).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Sign pattern (`input > 0`) of every relu on the tape; a change in this
    /// pattern under perturbation means a kink was crossed.
    pub fn relu_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                sig.extend(self.nodes[a.0].value.data().iter().map(|&x| x > T::zero()));
            }
        }
        sig
    }

    // ----- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. May run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(AutodiffError::NonScalarLoss(ls.to_vec()));
        }
        self.backward_done = true;

        let mut out = Gradients::default();
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(id, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        id: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut send = |v: Var, gv: Vec<T>| accumulate(grads, v, gv);

        match &node.op {
            Op::Leaf => {
                out.leaves.insert(Var(id), Tensor::from_parts(node.value.shape().to_vec(), g));
            }
            Op::Param(pid) => {
                out.params
                    .insert(*pid, Tensor::from_parts(node.value.shape().to_vec(), g));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                for (v, s) in [(*a, T::one()), (*b, sign)] {
                    if wants(v) {
                        send(v, reduce_broadcast(&g, val(v).shape(), node.value.shape(), |_, x| x * s));
                    }
                }
            }
            Op::Mul(a, b) => {
                let out_shape = node.value.shape();
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let om = BroadcastMap::new(val(other).shape(), out_shape);
                        let od = val(other).data();
                        send(v, reduce_broadcast(&g, val(v).shape(), out_shape, |i, x| x * od[om.at(i)]));
                    }
                }
            }
            Op::Scale(a, f) => send(*a, g.iter().map(|&x| x * *f).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, g),
            Op::MatMul(a, b) => {
                let sb = val(*b).shape();
                let (k, m) = (sb[0], sb[1]);
                let n = g.len() / m;
                if wants(*a) {
                    let mut ga = vec![T::zero(); n * k];
                    T::gemm(n, m, k, &g, (m, 1), val(*b).data(), (1, m), T::zero(), &mut ga);
                    send(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); k * m];
                    T::gemm(k, n, m, val(*a).data(), (1, k), &g, (m, 1), T::zero(), &mut gb);
                    send(*b, gb);
                }
            }
            Op::Bmm(a, b) => {
                let sa = val(*a).shape();
                let sb = val(*b).shape();
                let (bsz, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
                if wants(*a) {
                    let mut ga = vec![T::zero(); bsz * n * k];
                    let bv = val(*b).data();
                    for i in 0..bsz {
                        T::gemm(
                            n,
                            m,
                            k,
                            &g[i * n * m..(i + 1) * n * m],
                            (m, 1),
                            &bv[i * k * m..(i + 1) * k * m],
                            (1, m),
                            T::zero(),
                            &mut ga[i * n * k..(i + 1) * n * k],
                        );
                    }
                    send(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); bsz * k * m];
                    let av = val(*a).data();
                    for i in 0..bsz {
                        T::gemm(
                            k,
                            n,
                            m,
                            &av[i * n * k..(i + 1) * n * k],
                            (1, k),
                            &g[i * n * m..(i + 1) * n * m],
                            (m, 1),
                            T::zero(),
                            &mut gb[i * k * m..(i + 1) * k * m],
                        );
                    }
                    send(*b, gb);
                }
            }
            Op::Transpose(a) => send(*a, transpose_last2(&g, node.value.shape())),
            Op::Expand(a) => {
                send(*a, reduce_broadcast(&g, val(*a).shape(), node.value.shape(), |_, x| x));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    if wants(*p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        send(*p, gp);
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let src = val(*a).shape();
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut ga = vec![T::zero(); numel(src)];
                for o in 0..outer {
                    let dst = (o * src[*axis] + start) * inner;
                    let s = o * len * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[s..s + len * inner]);
                }
                send(*a, ga);
            }
            Op::Gather { table, ids } => {
                let s = val(*table).shape();
                let dim = s[1];
                let mut gt = vec![T::zero(); s[0] * dim];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..dim {
                        gt[i * dim + j] = gt[i * dim + j] + g[r * dim + j];
                    }
                }
                send(*table, gt);
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid(a) | Op::Exp(a) => {
                let c = T::from_f64_lossy(EXP_CLAMP);
                let x = val(*a).data();
                let y = node.value.data();
                let is_exp = matches!(node.op, Op::Exp(_));
                let ga = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gi, (&xi, &yi))| {
                        if xi.abs() > c {
                            T::zero()
                        } else if is_exp {
                            gi * yi
                        } else {
                            gi * yi * (T::one() - yi)
                        }
                    })
                    .collect();
                send(*a, ga);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap();
                let mut ga = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(w).zip(g.chunks(w)).zip(ga.chunks_mut(w)) {
                    let dot = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>();
                    for j in 0..w {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).numel();
                let gv = val(*gamma).data();
                let rows = g.len() / d;
                if wants(*gamma) || wants(*beta) {
                    let mut gg = vec![T::zero(); d];
                    let mut gb = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                            gb[j] = gb[j] + g[r * d + j];
                        }
                    }
                    if wants(*gamma) {
                        send(*gamma, gg);
                    }
                    if wants(*beta) {
                        send(*beta, gb);
                    }
                }
                if wants(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            mean_d = mean_d + dh;
                            mean_dx = mean_dx + dh * xhat[r * d + j];
                        }
                        mean_d = mean_d / dn;
                        mean_dx = mean_dx / dn;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            gx[r * d + j] = rstd[r] * (dh - mean_d - xhat[r * d + j] * mean_dx);
                        }
                    }
                    send(*x, gx);
                }
            }
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).numel()]),
            Op::Mean(a) => {
                let n = val(*a).numel();
                send(*a, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = val(*logits).shape()[1];
                let scale = g[0] / T::from_usize(*count).unwrap();
                let mut gl = vec![T::zero(); probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..v {
                        gl[r * v + j] = probs[r * v + j] * scale;
                    }
                    gl[r * v + t] = gl[r * v + t] - scale;
                }
                send(*logits, gl);
            }
        }
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

fn transpose_last2<T: Element>(x: &[T], shape: &[usize]) -> Vec<T> {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let batch = x.len() / (rows * cols);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let off = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[off + j * rows + i] = x[off + i * cols + j];
            }
        }
    }
    out
}

fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => {
                return Err(AutodiffError::ShapeMismatch {
                    op,
                    detail: format!("dimension {i}: {x} vs {y} (shapes {a:?} and {b:?})"),
                })
            }
        };
    }
    Ok(out)
}

/// Maps a flat index of the broadcast output back to the source operand.
enum BroadcastMap {
    Identity,
    Modulo(usize),
    Table(Vec<usize>),
}

impl BroadcastMap {
    fn new(src: &[usize], out: &[usize]) -> Self {
        if src == out {
            return BroadcastMap::Identity;
        }
        let trimmed: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return BroadcastMap::Modulo(numel(&trimmed));
        }
        let r = out.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, r - src.len()).chain(src.iter().copied()).collect();
        let mut strides = vec![0; r];
        let mut acc = 1;
        for i in (0..r).rev() {
            strides[i] = if padded[i] == 1 { 0 } else { acc };
            acc *= padded[i];
        }
        let n = numel(out);
        let mut table = Vec::with_capacity(n);
        let mut idx = vec![0; r];
        let mut off = 0;
        for _ in 0..n {
            table.push(off);
            for d in (0..r).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= strides[d] * out[d];
                idx[d] = 0;
            }
        }
        BroadcastMap::Table(table)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Identity => i,
            BroadcastMap::Modulo(n) => i % n,
            BroadcastMap::Table(t) => t[i],
        }
    }
}

fn reduce_broadcast<T: Element>(
    g: &[T],
    src: &[usize],
    out: &[usize],
    f: impl Fn(usize, T) -> T,
) -> Vec<T> {
    let map = BroadcastMap::new(src, out);
    if let BroadcastMap::Identity = map {
        return g.iter().enumerate().map(|(i, &x)| f(i, x)).collect();
    }
    let mut acc = vec![T::zero(); numel(src)];
    for (i, &x) in g.iter().enumerate() {
        let j = map.at(i);
        acc[j] = acc[j] + f(i, x);
    }
    acc
}
