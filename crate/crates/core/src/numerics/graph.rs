//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation as a node holding its forward value
//! and whatever the backward pass needs. [`Graph::backward`] walks the tape
//! in reverse and returns gradients for leaves and parameters. One graph
//! belongs to one computation; build a fresh graph per training step.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, axis_split};
use crate::numerics::param::{ParamId, ParamStore};
use crate::numerics::real::matmul;
use crate::numerics::tensor::numel;
use crate::numerics::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Lstm(Box<LstmSaved<T>>),
    Segment {
        x: Var,
        chunk: usize,
        hop: usize,
    },
    OverlapAdd {
        x: Var,
        hop: usize,
    },
    Frame {
        x: Var,
        width: usize,
        stride: usize,
    },
    Fold {
        x: Var,
        stride: usize,
    },
    /// Scalar-valued op whose Jacobian row was computed in the forward pass.
    ScalarFn {
        x: Var,
        local_grad: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

struct LstmSaved<T> {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    reverse: bool,
    /// Post-activation gates `[B, T, 4H]` in i, f, g, o order.
    gates: Vec<T>,
    /// Cell states `[B, T, H]`.
    cells: Vec<T>,
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::Segment { x, .. }
            | Op::OverlapAdd { x, .. }
            | Op::Frame { x, .. }
            | Op::Fold { x, .. }
            | Op::ScalarFn { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::Lstm(s) => vec![s.x, s.w_ih, s.w_hh, s.bias],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf or parameter node.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter, gradient)` for every parameter reached by the graph.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads.get(v.0).and_then(|g| g.as_deref()).map(|g| (*id, g)))
    }

    /// Adds every parameter gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g);
        }
    }
}

/// A recorded computation.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
    record: bool,
    macs: u64,
}

impl<T: Real> Default for Graph<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<'static, T> {
    /// A graph with no parameter store.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
            record: true,
            macs: 0,
        }
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(Error::Shape(msg))
}

impl<'p, T: Real> Graph<'p, T> {
    /// A recording graph reading parameters from `params`.
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: HashMap::new(),
            record: true,
            macs: 0,
        }
    }

    /// A graph that computes values only; nothing is saved for backward.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Graph {
            record: false,
            ..Self::with_params(params)
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Multiply-accumulate operations performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
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

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = self.record && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_raw(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Var {
        self.push(Tensor::from_parts_unchecked(shape, data), op)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input leaf; with `requires_grad` its gradient is reported by backward.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// The node for a stored parameter; repeated calls share one node so
    /// gradients from every use accumulate.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let value = store.value(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad: self.record,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (data, shape) = kernels::broadcast_binary(self.data(a), self.shape(a), self.data(b), self.shape(b), f)?;
        Ok(self.push_raw(shape, data, op))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.data(a).iter().map(|&v| v * s).collect();
        self.push_raw(self.shape(a).to_vec(), data, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let data = self.data(a).iter().map(|&v| v + s).collect();
        self.push_raw(self.shape(a).to_vec(), data, Op::AddScalar(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.data(a).iter().map(|&v| f(v)).collect();
        self.push_raw(self.shape(a).to_vec(), data, op)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu_scalar, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.act_tanh(), Op::Tanh(a))
    }

    // ---- products -----------------------------------------------------

    /// `x W^T + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return shape_err(format!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                return shape_err(format!("linear: bias {:?} expected [{out_f}]", self.shape(b)));
            }
        }
        let rows = numel(&xs) / in_f;
        let mut out = vec![T::zero(); rows * out_f];
        matmul(rows, in_f, out_f, self.data(x), false, self.data(w), true, &mut out, false);
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(out_f) {
                row.iter_mut().zip(bd).for_each(|(o, &v)| *o = *o + v);
            }
        }
        self.macs += (rows * in_f * out_f) as u64;
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_f;
        Ok(self.push_raw(shape, out, Op::Linear { x, w, b }))
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]` with optional
    /// transposition of either operand's stored matrices.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(format!("bmm: incompatible {sa:?} and {sb:?}"));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return shape_err(format!("bmm: inner dimensions differ for {sa:?} and {sb:?}"));
        }
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..batch {
                matmul(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    ta,
                    &bd[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.macs += (batch * m * k * n) as u64;
        Ok(self.push_raw(vec![batch, m, n], out, Op::Bmm { a, b, ta, tb }))
    }

    // ---- normalization --------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let len = *self.shape(a).last().unwrap_or(&1);
        let data = kernels::softmax_lastaxis(self.data(a), len);
        self.push_raw(self.shape(a).to_vec(), data, Op::Softmax(a))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return shape_err(format!("layer_norm: affine parameters must have length {d}"));
        }
        let out = kernels::layer_norm_rows(self.data(x), d, self.data(gamma), self.data(beta));
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: out.xhat,
            rstd: out.rstd,
        };
        Ok(self.push_raw(self.shape(x).to_vec(), out.y, op))
    }

    // ---- layout ---------------------------------------------------------

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let nd = self.shape(x).len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("permute: {axes:?} is not a permutation of {nd} axes"));
        }
        let (data, shape) = kernels::permute(self.data(x), self.shape(x), axes);
        Ok(self.push_raw(shape, data, Op::Permute { x, axes: axes.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() || shape.contains(&0) {
            return shape_err(format!("reshape: {:?} -> {shape:?}", self.shape(x)));
        }
        let data = self.data(x).to_vec();
        Ok(self.push_raw(shape.to_vec(), data, Op::Reshape(x)))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return shape_err(format!("concat: axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return shape_err(format!("concat: {s:?} incompatible with {first:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push_raw(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return shape_err(format!("narrow: [{start}, {}) along axis {axis} of {s:?}", start + len));
        }
        let (outer, alen, inner) = axis_split(&s, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push_raw(shape, out, Op::Narrow { x, axis, start }))
    }

    /// Rows of a `[rows, width]` table selected by `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || indices.iter().any(|&i| i >= s[0]) || indices.is_empty() {
            return shape_err(format!("gather_rows: bad indices for table {s:?}"));
        }
        let w = s[1];
        let src = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            out.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        Ok(self.push_raw(
            vec![indices.len(), w],
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    // ---- recurrence -----------------------------------------------------

    /// A single-direction LSTM over `x: [B, T, D]` with zero initial state.
    ///
    /// `w_ih: [4H, D]`, `w_hh: [4H, H]`, `bias: [4H]`, gates ordered input,
    /// forget, cell, output. With `reverse` the sequence is processed from
    /// the last step to the first; outputs stay aligned with input steps.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let wi = self.shape(w_ih).to_vec();
        let wh = self.shape(w_hh).to_vec();
        if xs.len() != 3 || wi.len() != 2 || wh.len() != 2 {
            return shape_err(format!("lstm: input {xs:?}, w_ih {wi:?}, w_hh {wh:?}"));
        }
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        let h = wh[1];
        if wi != [4 * h, d] || wh != [4 * h, h] || self.shape(bias) != [4 * h] {
            return shape_err(format!("lstm: inconsistent weights {wi:?}, {wh:?} for input {xs:?}"));
        }
        let g4 = 4 * h;
        // Input contributions for every step at once.
        let mut pre = vec![T::zero(); b * t * g4];
        matmul(b * t, d, g4, self.data(x), false, self.data(w_ih), true, &mut pre, false);
        {
            let bd = self.data(bias);
            for row in pre.chunks_mut(g4) {
                row.iter_mut().zip(bd).for_each(|(p, &v)| *p = *p + v);
            }
        }
        let mut gates = pre;
        let mut cells = vec![T::zero(); b * t * h];
        let mut hidden = vec![T::zero(); b * t * h];
        let mut h_prev = vec![T::zero(); b * h];
        let mut c_prev = vec![T::zero(); b * h];
        let mut rec = vec![T::zero(); b * g4];
        let whh = self.data(w_hh).to_vec();
        for step in 0..t {
            let ti = if reverse { t - 1 - step } else { step };
            matmul(b, h, g4, &h_prev, false, &whh, true, &mut rec, false);
            for bi in 0..b {
                let gi = (bi * t + ti) * g4;
                let g = &mut gates[gi..gi + g4];
                let r = &rec[bi * g4..(bi + 1) * g4];
                for j in 0..h {
                    let i_g = kernels::sigmoid_scalar(g[j] + r[j]);
                    let f_g = kernels::sigmoid_scalar(g[h + j] + r[h + j]);
                    let c_g = (g[2 * h + j] + r[2 * h + j]).act_tanh();
                    let o_g = kernels::sigmoid_scalar(g[3 * h + j] + r[3 * h + j]);
                    g[j] = i_g;
                    g[h + j] = f_g;
                    g[2 * h + j] = c_g;
                    g[3 * h + j] = o_g;
                    let c = f_g * c_prev[bi * h + j] + i_g * c_g;
                    let hv = o_g * c.act_tanh();
                    c_prev[bi * h + j] = c;
                    h_prev[bi * h + j] = hv;
                    cells[(bi * t + ti) * h + j] = c;
                    hidden[(bi * t + ti) * h + j] = hv;
                }
            }
        }
        self.macs += (b * t * g4 * (d + h)) as u64;
        let saved = LstmSaved {
            x,
            w_ih,
            w_hh,
            bias,
            reverse,
            gates,
            cells,
        };
        Ok(self.push_raw(vec![b, t, h], hidden, Op::Lstm(Box::new(saved))))
    }

    // ---- framing --------------------------------------------------------

    /// Overlapping chunks: `[..., T, D] -> [..., chunk, S, D]` where chunk
    /// `s` starts at frame `s * hop`; frames past `T` are zero.
    pub fn segment(&mut self, x: Var, chunk: usize, hop: usize, num_chunks: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || chunk == 0 || hop == 0 || num_chunks == 0 {
            return shape_err(format!("segment: input {s:?}, chunk {chunk}, hop {hop}"));
        }
        let nd = s.len();
        let (t, d) = (s[nd - 2], s[nd - 1]);
        let lead = numel(&s[..nd - 2]);
        let src = self.data(x);
        let mut out = vec![T::zero(); lead * chunk * num_chunks * d];
        for l in 0..lead {
            for k in 0..chunk {
                for c in 0..num_chunks {
                    let pos = c * hop + k;
                    if pos < t {
                        let dst = ((l * chunk + k) * num_chunks + c) * d;
                        let from = (l * t + pos) * d;
                        out[dst..dst + d].copy_from_slice(&src[from..from + d]);
                    }
                }
            }
        }
        let mut shape = s[..nd - 2].to_vec();
        shape.extend([chunk, num_chunks, d]);
        Ok(self.push_raw(shape, out, Op::Segment { x, chunk, hop }))
    }

    /// Inverse of [`Graph::segment`]: sums chunk frames at their positions and
    /// divides by the per-position overlap count, dropping the padded tail.
    pub fn overlap_add(&mut self, x: Var, hop: usize, length: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 || hop == 0 || length == 0 {
            return shape_err(format!("overlap_add: input {s:?}, hop {hop}, length {length}"));
        }
        let nd = s.len();
        let (chunk, nc, d) = (s[nd - 3], s[nd - 2], s[nd - 1]);
        if hop * (nc - 1) + chunk < length {
            return shape_err(format!(
                "overlap_add: {nc} chunks of {chunk} with hop {hop} cannot cover {length} frames"
            ));
        }
        let lead = numel(&s[..nd - 3]);
        let counts = overlap_counts(chunk, hop, nc, length);
        let src = self.data(x);
        let mut out = vec![T::zero(); lead * length * d];
        for l in 0..lead {
            for k in 0..chunk {
                for c in 0..nc {
                    let pos = c * hop + k;
                    if pos < length {
                        let from = ((l * chunk + k) * nc + c) * d;
                        let dst = (l * length + pos) * d;
                        for j in 0..d {
                            out[dst + j] = out[dst + j] + src[from + j];
                        }
                    }
                }
            }
            for (pos, &cnt) in counts.iter().enumerate() {
                let inv = T::one() / T::from_usize(cnt).unwrap();
                for v in &mut out[(l * length + pos) * d..(l * length + pos + 1) * d] {
                    *v = *v * inv;
                }
            }
        }
        let mut shape = s[..nd - 3].to_vec();
        shape.extend([length, d]);
        Ok(self.push_raw(shape, out, Op::OverlapAdd { x, hop }))
    }

    /// Sliding windows: `[..., T] -> [..., frames, width]`, window `f`
    /// starting at sample `f * stride`, zero beyond `T`.
    pub fn frame(&mut self, x: Var, width: usize, stride: usize, frames: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || width == 0 || stride == 0 || frames == 0 {
            return shape_err(format!("frame: input {s:?}, width {width}, stride {stride}"));
        }
        let t = *s.last().unwrap();
        let lead = numel(&s[..s.len() - 1]);
        let src = self.data(x);
        let mut out = vec![T::zero(); lead * frames * width];
        for l in 0..lead {
            for f in 0..frames {
                for j in 0..width {
                    let pos = f * stride + j;
                    if pos < t {
                        out[(l * frames + f) * width + j] = src[l * t + pos];
                    }
                }
            }
        }
        let mut shape = s[..s.len() - 1].to_vec();
        shape.extend([frames, width]);
        Ok(self.push_raw(shape, out, Op::Frame { x, width, stride }))
    }

    /// Transposed framing: `[..., frames, width] -> [..., length]`, summing
    /// overlapping windows and discarding samples at or beyond `length`.
    pub fn fold(&mut self, x: Var, stride: usize, length: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || stride == 0 || length == 0 {
            return shape_err(format!("fold: input {s:?}, stride {stride}, length {length}"));
        }
        let nd = s.len();
        let (frames, width) = (s[nd - 2], s[nd - 1]);
        let lead = numel(&s[..nd - 2]);
        let src = self.data(x);
        let mut out = vec![T::zero(); lead * length];
        for l in 0..lead {
            for f in 0..frames {
                for j in 0..width {
                    let pos = f * stride + j;
                    if pos < length {
                        out[l * length + pos] = out[l * length + pos] + src[(l * frames + f) * width + j];
                    }
                }
            }
        }
        let mut shape = s[..nd - 2].to_vec();
        shape.push(length);
        Ok(self.push_raw(shape, out, Op::Fold { x, stride }))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.data(x).iter().copied().sum::<T>();
        self.push_raw(vec![], vec![v], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let v = self.data(x).iter().copied().sum::<T>() / n;
        self.push_raw(vec![], vec![v], Op::Mean(x))
    }

    /// Records a scalar function of `x` whose value and gradient with respect
    /// to `x` were computed by the caller.
    pub fn scalar_fn(&mut self, x: Var, value: T, local_grad: Vec<T>) -> Result<Var> {
        if local_grad.len() != self.value(x).numel() {
            return shape_err("scalar_fn: gradient length differs from input".into());
        }
        Ok(self.push_raw(vec![], vec![value], Op::ScalarFn { x, local_grad }))
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of the scalar `output` with respect to every leaf and
    /// parameter that requires them.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_node = &self.nodes[output.0];
        if out_node.value.numel() != 1 {
            return Err(Error::NonScalarOutput(out_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if i <= output.0 => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.wants(*a) {
                    self.acc(grads, *a, kernels::reduce_to_shape(g, out_shape, self.shape(*a)));
                }
                if self.wants(*b) {
                    let mut gb = kernels::reduce_to_shape(g, out_shape, self.shape(*b));
                    if neg {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(this) {
                        let (prod, _) =
                            kernels::broadcast_binary(g, out_shape, self.data(other), self.shape(other), |x, y| x * y)
                                .expect("shapes broadcast in forward");
                        self.acc(grads, this, kernels::reduce_to_shape(&prod, out_shape, self.shape(this)));
                    }
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, g.to_vec()),
            Op::Gelu(a) => {
                let x = self.data(*a);
                self.acc(grads, *a, g.iter().zip(x).map(|(&gv, &xv)| gv * kernels::gelu_derivative(xv)).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.acc(grads, *a, g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.acc(grads, *a, g.iter().zip(y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect());
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (out_f, in_f) = (ws[0], ws[1]);
                let rows = g.len() / out_f;
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); rows * in_f];
                    matmul(rows, out_f, in_f, g, false, self.data(*w), false, &mut gx, false);
                    self.acc(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); out_f * in_f];
                    matmul(out_f, rows, in_f, g, true, self.data(*x), false, &mut gw, false);
                    self.acc(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); out_f];
                        for row in g.chunks(out_f) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                        }
                        self.acc(grads, *b, gb);
                    }
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let sa = self.shape(*a);
                let batch = sa[0];
                let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = out_shape[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if ta {
                            matmul(k, n, m, bi, tb, gi, true, dst, false);
                        } else {
                            matmul(m, n, k, gi, false, bi, !tb, dst, false);
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if tb {
                            matmul(n, m, k, gi, true, ai, ta, dst, false);
                        } else {
                            matmul(k, m, n, ai, !ta, gi, false, dst, false);
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Softmax(a) => {
                let len = *out_shape.last().unwrap_or(&1);
                let y = node.value.data();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks(len).zip(y.chunks(len)).zip(gx.chunks_mut(len)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..len {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap_or(&1);
                let gm = self.data(*gamma);
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![T::zero(); d];
                    let mut gbeta = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * hr[j];
                            gbeta[j] = gbeta[j] + gr[j];
                        }
                    }
                    self.acc(grads, *gamma, gg);
                    self.acc(grads, *beta, gbeta);
                }
                if self.wants(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, ((gr, hr), dst)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hr[j];
                        }
                        let scale = rstd[r] / dn;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            dst[j] = scale * (dn * dh - s1 - hr[j] * s2);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Permute { x, axes } => {
                let (gx, _) = kernels::permute(g, out_shape, &kernels::inverse_axes(axes));
                self.acc(grads, *x, gx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                let total = out_shape[*axis];
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.acc(grads, v, gv);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, alen, inner) = axis_split(xs, *axis);
                let len = out_shape[*axis];
                let mut gx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, gx);
            }
            Op::Gather { table, indices } => {
                let w = self.shape(*table)[1];
                let mut gt = vec![T::zero(); self.value(*table).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..w {
                        gt[i * w + j] = gt[i * w + j] + g[r * w + j];
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::Lstm(saved) => self.lstm_backward(saved, node, g, grads),
            Op::Segment { x, chunk, hop } => {
                let xs = self.shape(*x);
                let nd = xs.len();
                let (t, d) = (xs[nd - 2], xs[nd - 1]);
                let lead = numel(&xs[..nd - 2]);
                let nc = out_shape[out_shape.len() - 2];
                let mut gx = vec![T::zero(); numel(xs)];
                for l in 0..lead {
                    for k in 0..*chunk {
                        for c in 0..nc {
                            let pos = c * hop + k;
                            if pos < t {
                                let from = ((l * chunk + k) * nc + c) * d;
                                let dst = (l * t + pos) * d;
                                for j in 0..d {
                                    gx[dst + j] = gx[dst + j] + g[from + j];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::OverlapAdd { x, hop } => {
                let xs = self.shape(*x);
                let nd = xs.len();
                let (chunk, nc, d) = (xs[nd - 3], xs[nd - 2], xs[nd - 1]);
                let length = out_shape[out_shape.len() - 2];
                let lead = numel(&xs[..nd - 3]);
                let counts = overlap_counts(chunk, *hop, nc, length);
                let mut gx = vec![T::zero(); numel(xs)];
                for l in 0..lead {
                    for k in 0..chunk {
                        for c in 0..nc {
                            let pos = c * hop + k;
                            if pos < length {
                                let inv = T::one() / T::from_usize(counts[pos]).unwrap();
                                let dst = ((l * chunk + k) * nc + c) * d;
                                let from = (l * length + pos) * d;
                                for j in 0..d {
                                    gx[dst + j] = g[from + j] * inv;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Frame { x, width, stride } => {
                let xs = self.shape(*x);
                let t = *xs.last().unwrap();
                let lead = numel(&xs[..xs.len() - 1]);
                let frames = out_shape[out_shape.len() - 2];
                let mut gx = vec![T::zero(); numel(xs)];
                for l in 0..lead {
                    for f in 0..frames {
                        for j in 0..*width {
                            let pos = f * stride + j;
                            if pos < t {
                                gx[l * t + pos] = gx[l * t + pos] + g[(l * frames + f) * width + j];
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Fold { x, stride } => {
                let xs = self.shape(*x);
                let nd = xs.len();
                let (frames, width) = (xs[nd - 2], xs[nd - 1]);
                let length = *out_shape.last().unwrap();
                let lead = numel(&xs[..nd - 2]);
                let mut gx = vec![T::zero(); numel(xs)];
                for l in 0..lead {
                    for f in 0..frames {
                        for j in 0..width {
                            let pos = f * stride + j;
                            if pos < length {
                                gx[(l * frames + f) * width + j] = g[l * length + pos];
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ScalarFn { x, local_grad } => {
                self.acc(grads, *x, local_grad.iter().map(|&v| v * g[0]).collect());
            }
            Op::Sum(x) => self.acc(grads, *x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = g[0] / T::from_usize(n).unwrap();
                self.acc(grads, *x, vec![v; n]);
            }
        }
    }

    fn lstm_backward(&self, s: &LstmSaved<T>, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let xs = self.shape(s.x);
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        let h = node.value.shape()[2];
        let g4 = 4 * h;
        let hidden = node.value.data();
        let whh = self.data(s.w_hh);
        // Pre-activation gradients for every (batch, step).
        let mut dpre = vec![T::zero(); b * t * g4];
        // Hidden state entering each step (zero for the first processed step).
        let mut h_in = vec![T::zero(); b * t * h];
        let mut dh_rec = vec![T::zero(); b * h];
        let mut dc_next = vec![T::zero(); b * h];
        let mut dgates_step = vec![T::zero(); b * g4];
        for step in (0..t).rev() {
            let ti = if s.reverse { t - 1 - step } else { step };
            let prev = if step == 0 {
                None
            } else if s.reverse {
                Some(ti + 1)
            } else {
                Some(ti - 1)
            };
            for bi in 0..b {
                let gate = &s.gates[(bi * t + ti) * g4..(bi * t + ti + 1) * g4];
                for j in 0..h {
                    let (ig, fg, cg, og) = (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                    let c = s.cells[(bi * t + ti) * h + j];
                    let c_prev = prev.map_or(T::zero(), |p| s.cells[(bi * t + p) * h + j]);
                    let tc = c.act_tanh();
                    let dh = g[(bi * t + ti) * h + j] + dh_rec[bi * h + j];
                    let dout = dh * tc;
                    let dc = dc_next[bi * h + j] + dh * og * (T::one() - tc * tc);
                    let di = dc * cg;
                    let dcg = dc * ig;
                    let df = dc * c_prev;
                    dc_next[bi * h + j] = dc * fg;
                    let row = &mut dgates_step[bi * g4..(bi + 1) * g4];
                    row[j] = di * ig * (T::one() - ig);
                    row[h + j] = df * fg * (T::one() - fg);
                    row[2 * h + j] = dcg * (T::one() - cg * cg);
                    row[3 * h + j] = dout * og * (T::one() - og);
                    if let Some(p) = prev {
                        h_in[(bi * t + ti) * h + j] = hidden[(bi * t + p) * h + j];
                    }
                }
                dpre[(bi * t + ti) * g4..(bi * t + ti + 1) * g4]
                    .copy_from_slice(&dgates_step[bi * g4..(bi + 1) * g4]);
            }
            matmul(b, g4, h, &dgates_step, false, whh, false, &mut dh_rec, false);
        }
        if self.wants(s.x) {
            let mut gx = vec![T::zero(); b * t * d];
            matmul(b * t, g4, d, &dpre, false, self.data(s.w_ih), false, &mut gx, false);
            self.acc(grads, s.x, gx);
        }
        if self.wants(s.w_ih) {
            let mut gw = vec![T::zero(); g4 * d];
            matmul(g4, b * t, d, &dpre, true, self.data(s.x), false, &mut gw, false);
            self.acc(grads, s.w_ih, gw);
        }
        if self.wants(s.w_hh) {
            let mut gw = vec![T::zero(); g4 * h];
            matmul(g4, b * t, h, &dpre, true, &h_in, false, &mut gw, false);
            self.acc(grads, s.w_hh, gw);
        }
        if self.wants(s.bias) {
            let mut gb = vec![T::zero(); g4];
            for row in dpre.chunks(g4) {
                gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
            }
            self.acc(grads, s.bias, gb);
        }
    }
}

/// Number of chunk frames covering each of the first `length` positions.
pub(crate) fn overlap_counts(chunk: usize, hop: usize, num_chunks: usize, length: usize) -> Vec<usize> {
    let mut counts = vec![0usize; length];
    for c in 0..num_chunks {
        for k in 0..chunk {
            let pos = c * hop + k;
            if pos < length {
                counts[pos] += 1;
            }
        }
    }
    counts
}
