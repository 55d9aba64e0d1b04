//! Append-only Wengert tape over vector-valued nodes.
//!
//! Every node holds a flat `Vec<f64>`; scalars are length-1 nodes. The
//! reverse sweep comes in two flavours: [`Tape::grad`] accumulates plain
//! `f64` adjoints, while [`Tape::grad_graph`] emits the adjoint computation
//! back onto the tape so that the returned gradient can itself be
//! differentiated. The second form is only available on tapes created with
//! [`Tape::higher_order`].

use std::sync::atomic::{AtomicU64, Ordering};

use super::{AdError, ParamVector};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Floor applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    id: usize,
    len: usize,
}

impl Var {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape_id(&self) -> u64 {
        self.tape
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `scale * x + shift`
    Affine(usize),
    Recip(usize),
    Exp(usize),
    Ln(usize),
    ClampMin(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Sum(usize),
    Broadcast(usize),
    Slice(usize, usize),
    Pad(usize, usize),
    Concat(Vec<usize>),
    /// `W x` with `W` stored row-major as `rows x cols`.
    MatVec {
        w: usize,
        x: usize,
        rows: usize,
        cols: usize,
    },
    /// `W^T x`
    MatVecT {
        w: usize,
        x: usize,
        rows: usize,
        cols: usize,
    },
    /// `a b^T` flattened row-major.
    Outer(usize, usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Const => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Outer(a, b) => vec![*a, *b],
            Op::MatVec { w, x, .. } | Op::MatVecT { w, x, .. } => vec![*w, *x],
            Op::Affine(a)
            | Op::Recip(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::ClampMin(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::Broadcast(a)
            | Op::Slice(a, _)
            | Op::Pad(a, _) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
    /// Multiplier used by `Affine`; stored beside the op to keep `Op` small.
    scale: f64,
}

/// Single-owner recording of primitive operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    higher_order: bool,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// First-order tape: [`Tape::grad`] only.
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            higher_order: false,
            nodes: Vec::new(),
        }
    }

    /// Tape that also supports [`Tape::grad_graph`] and [`Tape::hvp`].
    pub fn higher_order() -> Self {
        Self {
            higher_order: true,
            ..Self::new()
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn is_higher_order(&self) -> bool {
        self.higher_order
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input node ids of node `id`, for structural checks.
    pub fn inputs_of(&self, id: usize) -> Vec<usize> {
        self.nodes[id].op.inputs()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.push_scaled(op, value, 1.0)
    }

    fn push_scaled(&mut self, op: Op, value: Vec<f64>, scale: f64) -> Var {
        let id = self.nodes.len();
        let len = value.len();
        self.nodes.push(Node { op, value, scale });
        Var { tape: self.id, id, len }
    }

    fn check(&self, v: Var) {
        assert_eq!(v.tape, self.id, "variable belongs to tape {} not {}", v.tape, self.id);
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.check(v);
        &self.nodes[v.id].value
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on a length-{} node", val.len());
        val[0]
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, values: Vec<f64>) -> Var {
        self.push(Op::Leaf, values)
    }

    /// Registers `params` as a differentiable input.
    pub fn watch(&mut self, params: &ParamVector) -> Var {
        self.leaf(params.values().to_vec())
    }

    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        self.push(Op::Const, values)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(vec![value])
    }

    /// Copies the current value of `v` into a new constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).to_vec();
        self.constant(value)
    }

    fn binary(&self, a: Var, b: Var) -> (&[f64], &[f64]) {
        self.check(a);
        self.check(b);
        assert_eq!(a.len, b.len, "length mismatch {} vs {}", a.len, b.len);
        (&self.nodes[a.id].value, &self.nodes[b.id].value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = self.binary(a, b);
        let v = x.iter().zip(y).map(|(p, q)| p + q).collect();
        self.push(Op::Add(a.id, b.id), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = self.binary(a, b);
        let v = x.iter().zip(y).map(|(p, q)| p - q).collect();
        self.push(Op::Sub(a.id, b.id), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = self.binary(a, b);
        let v = x.iter().zip(y).map(|(p, q)| p * q).collect();
        self.push(Op::Mul(a.id, b.id), v)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).iter().map(|x| scale * x + shift).collect();
        self.push_scaled(Op::Affine(a.id), v, scale)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| 1.0 / x).collect();
        self.push(Op::Recip(a.id), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(Op::Exp(a.id), v)
    }

    /// `max(a, floor)` elementwise; gradient passes only where `a >= floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).iter().map(|x| x.max(floor)).collect();
        self.push(Op::ClampMin(a.id, floor), v)
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`].
    pub fn ln(&mut self, a: Var) -> Var {
        let c = self.clamp_min(a, LOG_FLOOR);
        self.ln_raw(c)
    }

    fn ln_raw(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.ln()).collect();
        self.push(Op::Ln(a.id), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a.id), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a.id), v)
    }

    /// Sum of all entries, as a length-1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = vec![self.value(a).iter().sum()];
        self.push(Op::Sum(a.id), v)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Repeats a length-1 node `n` times.
    pub fn broadcast(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), 1, "broadcast expects a scalar");
        let v = vec![x[0]; n];
        self.push(Op::Broadcast(a.id), v)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.len(), "slice {start}+{len} out of {}", x.len());
        let v = x[start..start + len].to_vec();
        self.push(Op::Slice(a.id, start), v)
    }

    /// Embeds `a` into a zero vector of length `total` at offset `start`.
    pub fn pad(&mut self, a: Var, start: usize, total: usize) -> Var {
        let x = self.value(a);
        assert!(start + x.len() <= total);
        let mut v = vec![0.0; total];
        v[start..start + x.len()].copy_from_slice(x);
        self.push(Op::Pad(a.id, start), v)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(self.value(*p));
        }
        self.push(Op::Concat(parts.iter().map(|p| p.id).collect()), v)
    }

    /// `W x` where `w` is a row-major `rows x cols` matrix.
    pub fn matvec(&mut self, w: Var, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(w.len, rows * cols, "matrix length");
        assert_eq!(x.len, cols, "matvec input length");
        let v = matvec_raw(self.value(w), self.value(x), rows, cols);
        self.push(
            Op::MatVec {
                w: w.id,
                x: x.id,
                rows,
                cols,
            },
            v,
        )
    }

    /// `W^T x` where `w` is a row-major `rows x cols` matrix.
    pub fn matvec_t(&mut self, w: Var, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(w.len, rows * cols, "matrix length");
        assert_eq!(x.len, rows, "matvec_t input length");
        let v = matvec_t_raw(self.value(w), self.value(x), rows, cols);
        self.push(
            Op::MatVecT {
                w: w.id,
                x: x.id,
                rows,
                cols,
            },
            v,
        )
    }

    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let v = outer_raw(self.value(a), self.value(b));
        self.push(Op::Outer(a.id, b.id), v)
    }

    /// Log-softmax with max subtraction. The shift is a constant, which is
    /// exact because log-softmax is invariant to it.
    pub fn log_softmax(&mut self, z: Var) -> Var {
        let m = self.value(z).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mc = self.constant(vec![m; z.len]);
        let s = self.sub(z, mc);
        let e = self.exp(s);
        let t = self.sum(e);
        let lse = self.ln(t);
        let b = self.broadcast(lse, z.len);
        self.sub(s, b)
    }

    pub fn softmax(&mut self, z: Var) -> Var {
        let l = self.log_softmax(z);
        self.exp(l)
    }

    /// Gradient of the scalar `loss` with respect to `params`, as plain numbers.
    pub fn grad(&self, loss: Var, params: Var) -> Result<ParamVector, AdError> {
        let g = self.grad_many(loss, &[params])?;
        Ok(g.into_iter().next().expect("one gradient"))
    }

    /// Gradients of `loss` with respect to several nodes in one sweep.
    pub fn grad_many(&self, loss: Var, wrt: &[Var]) -> Result<Vec<ParamVector>, AdError> {
        if loss.tape != self.id || wrt.iter().any(|p| p.tape != self.id) {
            return Err(AdError::TapeMismatch);
        }
        if loss.len != 1 {
            return Err(AdError::ShapeMismatch {
                expected: 1,
                found: loss.len,
            });
        }
        let keep: Vec<usize> = wrt.iter().map(|p| p.id).collect();
        let kept = self.backward_numeric(loss, &keep);
        let mut out = Vec::with_capacity(wrt.len());
        for (slot, p) in kept.into_iter().zip(wrt) {
            let g = slot.unwrap_or_else(|| vec![0.0; p.len]);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AdError::NonFinite);
            }
            out.push(ParamVector::from_vec_unchecked(g));
        }
        Ok(out)
    }

    fn backward_numeric(&self, loss: Var, keep: &[usize]) -> Vec<Option<Vec<f64>>> {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(vec![1.0]);
        let mut kept = vec![None; keep.len()];
        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            for (slot, k) in kept.iter_mut().zip(keep) {
                if *k == id {
                    *slot = Some(g.clone());
                }
            }
            let node = &self.nodes[id];
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    acc(&mut adj, *a, &g);
                    acc(&mut adj, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, &g);
                    let ng: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc(&mut adj, *b, &ng);
                }
                Op::Mul(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(p, q)| p * q).collect();
                    let gb: Vec<f64> = g.iter().zip(va).map(|(p, q)| p * q).collect();
                    acc(&mut adj, *a, &ga);
                    acc(&mut adj, *b, &gb);
                }
                Op::Affine(a) => {
                    let s = node.scale;
                    let ga: Vec<f64> = g.iter().map(|x| s * x).collect();
                    acc(&mut adj, *a, &ga);
                }
                Op::Recip(a) => {
                    let ga: Vec<f64> = g.iter().zip(y).map(|(p, q)| -p * q * q).collect();
                    acc(&mut adj, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> = g.iter().zip(y).map(|(p, q)| p * q).collect();
                    acc(&mut adj, *a, &ga);
                }
                Op::Ln(a) => {
                    let x = &self.nodes[*a].value;
                    let ga: Vec<f64> = g.iter().zip(x).map(|(p, q)| p / q).collect();
                    acc(&mut adj, *a, &ga);
                }
                Op::ClampMin(a, floor) => {
                    let x = &self.nodes[*a].value;
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(p, q)| if *q >= *floor { *p } else { 0.0 })
                        .collect();
                    acc(&mut adj, *a, &ga);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = g.iter().zip(y).map(|(p, q)| p * (1.0 - q * q)).collect();
                    acc(&mut adj, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let ga: Vec<f64> = g.iter().zip(y).map(|(p, q)| p * q * (1.0 - q)).collect();
                    acc(&mut adj, *a, &ga);
                }
                Op::Sum(a) => {
                    let n = self.nodes[*a].value.len();
                    acc(&mut adj, *a, &vec![g[0]; n]);
                }
                Op::Broadcast(a) => {
                    acc(&mut adj, *a, &[g.iter().sum()]);
                }
                Op::Slice(a, start) => {
                    let n = self.nodes[*a].value.len();
                    let slot = adj[*a].get_or_insert_with(|| vec![0.0; n]);
                    for (s, v) in slot[*start..*start + g.len()].iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                Op::Pad(a, start) => {
                    let n = self.nodes[*a].value.len();
                    acc(&mut adj, *a, &g[*start..*start + n]);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[*p].value.len();
                        acc(&mut adj, *p, &g[off..off + n]);
                        off += n;
                    }
                }
                Op::MatVec { w, x, rows, cols } => {
                    let vw = &self.nodes[*w].value;
                    let vx = &self.nodes[*x].value;
                    acc(&mut adj, *w, &outer_raw(&g, vx));
                    acc(&mut adj, *x, &matvec_t_raw(vw, &g, *rows, *cols));
                }
                Op::MatVecT { w, x, rows, cols } => {
                    let vw = &self.nodes[*w].value;
                    let vx = &self.nodes[*x].value;
                    acc(&mut adj, *w, &outer_raw(vx, &g));
                    acc(&mut adj, *x, &matvec_raw(vw, &g, *rows, *cols));
                }
                Op::Outer(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let (r, c) = (va.len(), vb.len());
                    acc(&mut adj, *a, &matvec_raw(&g, vb, r, c));
                    acc(&mut adj, *b, &matvec_t_raw(&g, va, r, c));
                }
            }
        }
        kept
    }

    /// Gradient of `loss` with respect to `params`, recorded on the tape so it
    /// can be differentiated again.
    pub fn grad_graph(&mut self, loss: Var, params: Var) -> Result<Var, AdError> {
        let g = self.grad_graph_many(loss, &[params])?;
        Ok(g[0])
    }

    pub fn grad_graph_many(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>, AdError> {
        if !self.higher_order {
            return Err(AdError::HigherOrderUnavailable);
        }
        if loss.tape != self.id || wrt.iter().any(|p| p.tape != self.id) {
            return Err(AdError::TapeMismatch);
        }
        if loss.len != 1 {
            return Err(AdError::ShapeMismatch {
                expected: 1,
                found: loss.len,
            });
        }
        let keep: Vec<usize> = wrt.iter().map(|p| p.id).collect();
        let mut adj: Vec<Option<Var>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(self.constant(vec![1.0]));
        let mut kept: Vec<Option<Var>> = vec![None; wrt.len()];
        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            for (slot, k) in kept.iter_mut().zip(&keep) {
                if *k == id {
                    *slot = Some(g);
                }
            }
            let op = self.nodes[id].op.clone();
            let me = self.var_of(id);
            match op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    self.acc_var(&mut adj, a, g);
                    self.acc_var(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    self.acc_var(&mut adj, a, g);
                    let ng = self.neg(g);
                    self.acc_var(&mut adj, b, ng);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.var_of(a), self.var_of(b));
                    let ga = self.mul(g, vb);
                    let gb = self.mul(g, va);
                    self.acc_var(&mut adj, a, ga);
                    self.acc_var(&mut adj, b, gb);
                }
                Op::Affine(a) => {
                    let s = self.nodes[id].scale;
                    let ga = self.scale(g, s);
                    self.acc_var(&mut adj, a, ga);
                }
                Op::Recip(a) => {
                    let yy = self.mul(me, me);
                    let t = self.mul(g, yy);
                    let ga = self.neg(t);
                    self.acc_var(&mut adj, a, ga);
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, me);
                    self.acc_var(&mut adj, a, ga);
                }
                Op::Ln(a) => {
                    let va = self.var_of(a);
                    let r = self.recip(va);
                    let ga = self.mul(g, r);
                    self.acc_var(&mut adj, a, ga);
                }
                Op::ClampMin(a, floor) => {
                    let mask: Vec<f64> = self.nodes[a]
                        .value
                        .iter()
                        .map(|q| if *q >= floor { 1.0 } else { 0.0 })
                        .collect();
                    let m = self.constant(mask);
                    let ga = self.mul(g, m);
                    self.acc_var(&mut adj, a, ga);
                }
                Op::Tanh(a) => {
                    let yy = self.mul(me, me);
                    let d = self.affine(yy, -1.0, 1.0);
                    let ga = self.mul(g, d);
                    self.acc_var(&mut adj, a, ga);
                }
                Op::Sigmoid(a) => {
                    let one_minus = self.affine(me, -1.0, 1.0);
                    let d = self.mul(me, one_minus);
                    let ga = self.mul(g, d);
                    self.acc_var(&mut adj, a, ga);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a].value.len();
                    let ga = self.broadcast(g, n);
                    self.acc_var(&mut adj, a, ga);
                }
                Op::Broadcast(a) => {
                    let ga = self.sum(g);
                    self.acc_var(&mut adj, a, ga);
                }
                Op::Slice(a, start) => {
                    let n = self.nodes[a].value.len();
                    let ga = self.pad(g, start, n);
                    self.acc_var(&mut adj, a, ga);
                }
                Op::Pad(a, start) => {
                    let n = self.nodes[a].value.len();
                    let ga = self.slice(g, start, n);
                    self.acc_var(&mut adj, a, ga);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p].value.len();
                        let ga = self.slice(g, off, n);
                        self.acc_var(&mut adj, p, ga);
                        off += n;
                    }
                }
                Op::MatVec { w, x, rows, cols } => {
                    let (vw, vx) = (self.var_of(w), self.var_of(x));
                    let gw = self.outer(g, vx);
                    let gx = self.matvec_t(vw, g, rows, cols);
                    self.acc_var(&mut adj, w, gw);
                    self.acc_var(&mut adj, x, gx);
                }
                Op::MatVecT { w, x, rows, cols } => {
                    let (vw, vx) = (self.var_of(w), self.var_of(x));
                    let gw = self.outer(vx, g);
                    let gx = self.matvec(vw, g, rows, cols);
                    self.acc_var(&mut adj, w, gw);
                    self.acc_var(&mut adj, x, gx);
                }
                Op::Outer(a, b) => {
                    let (va, vb) = (self.var_of(a), self.var_of(b));
                    let (r, c) = (va.len, vb.len);
                    let ga = self.matvec(g, vb, r, c);
                    let gb = self.matvec_t(g, va, r, c);
                    self.acc_var(&mut adj, a, ga);
                    self.acc_var(&mut adj, b, gb);
                }
            }
        }
        let mut out = Vec::with_capacity(wrt.len());
        for (slot, p) in kept.into_iter().zip(wrt) {
            let g = match slot {
                Some(g) => g,
                None => self.constant(vec![0.0; p.len]),
            };
            if self.value(g).iter().any(|x| !x.is_finite()) {
                return Err(AdError::NonFinite);
            }
            out.push(g);
        }
        Ok(out)
    }

    /// Hessian-vector product `(d^2 loss / d params^2) v`.
    pub fn hvp(&mut self, loss: Var, params: Var, v: &ParamVector) -> Result<ParamVector, AdError> {
        if v.len() != params.len {
            return Err(AdError::ShapeMismatch {
                expected: params.len,
                found: v.len(),
            });
        }
        let g = self.grad_graph(loss, params)?;
        let vc = self.constant(v.values().to_vec());
        let s = self.dot(g, vc);
        self.grad(s, params)
    }

    fn var_of(&self, id: usize) -> Var {
        Var {
            tape: self.id,
            id,
            len: self.nodes[id].value.len(),
        }
    }

    fn acc_var(&mut self, adj: &mut [Option<Var>], target: usize, g: Var) {
        // Constants never need adjoints.
        if matches!(self.nodes[target].op, Op::Const) {
            return;
        }
        adj[target] = Some(match adj[target] {
            Some(prev) => self.add(prev, g),
            None => g,
        });
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], target: usize, g: &[f64]) {
    match &mut adj[target] {
        Some(prev) => {
            for (p, v) in prev.iter_mut().zip(g) {
                *p += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matvec_raw(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

pub(crate) fn matvec_t_raw(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let xr = x[r];
        if xr == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += a * xr;
        }
    }
    out
}

pub(crate) fn outer_raw(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        out.extend(b.iter().map(|y| x * y));
    }
    out
}
