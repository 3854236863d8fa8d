//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order, so backward is a single
//! reverse sweep. Leaves registered with `requires_grad` collect gradients
//! that accumulate across repeated `backward` calls until [`Tape::reset`].

use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::{self, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    RmsNorm { x: usize, gain: usize, d: usize, inv: Vec<T> },
    Silu(usize),
    Embedding { table: usize, tokens: Vec<usize>, d: usize },
    Rope { x: usize, n_heads: usize },
    Attention { q: usize, k: usize, v: usize, n_heads: usize, probs: Vec<T> },
    LogSoftmax { x: usize, cols: usize },
    Softmax { x: usize, cols: usize },
    Gather { x: usize, cols: usize, idx: Vec<usize> },
    SelectRows { x: usize, cols: usize, rows: Vec<usize> },
    SumRows { x: usize, cols: usize },
    Sum(usize),
    Exp(usize),
    LogSigmoid(usize),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Vec<T>>>>,
}

/// Handle to a value recorded on a tape.
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (if c == 0 { 0 } else { n / c }, c)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every node and accumulated gradient.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.leaf_grads.get_mut().clear();
    }

    /// Register a tensor, honouring its `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t, t.requires_grad)
    }

    /// Register a tensor that never receives gradient.
    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t, false)
    }

    /// Register a tensor that always receives gradient.
    pub fn variable(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t, true)
    }

    fn push_leaf(&self, t: &Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared(),
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn get(&self, id: usize) -> (Vec<usize>, Arc<Vec<T>>, bool) {
        let nodes = self.nodes.borrow();
        let n = &nodes[id];
        (n.shape.clone(), Arc::clone(&n.value), n.requires_grad)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let grads = self.leaf_grads.borrow();
        let g = grads.get(v.id)?.as_ref()?;
        let shape = self.nodes.borrow()[v.id].shape.clone();
        Some(Tensor::from_shared(shape, Arc::new(g.clone())))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize_with(nodes.len(), || None);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                match &mut leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        Ok(())
    }
}

/// Add `contrib` into the gradient slot of `id` when that node wants one.
fn deposit<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]);
    f(slot);
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

fn propagate<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: usize| nodes[id].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            deposit(nodes, grads, a, |da| matmul_nt_acc(g, val(b), da, m, k, n));
            deposit(nodes, grads, b, |db| matmul_tn_acc(val(a), g, db, m, k, n));
        }
        &Op::Add(a, b) => {
            deposit(nodes, grads, a, |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            deposit(nodes, grads, b, |db| db.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
        }
        &Op::Sub(a, b) => {
            deposit(nodes, grads, a, |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            deposit(nodes, grads, b, |db| db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
        }
        &Op::Mul(a, b) => {
            deposit(nodes, grads, a, |da| {
                for ((d, &x), &y) in da.iter_mut().zip(g).zip(val(b)) {
                    *d += x * y;
                }
            });
            deposit(nodes, grads, b, |db| {
                for ((d, &x), &y) in db.iter_mut().zip(g).zip(val(a)) {
                    *d += x * y;
                }
            });
        }
        &Op::Scale(a, c) => {
            deposit(nodes, grads, a, |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += c * x));
        }
        Op::RmsNorm { x, gain, d, inv } => {
            let (x, gain, d) = (*x, *gain, *d);
            let xv = val(x);
            let wv = val(gain);
            deposit(nodes, grads, gain, |dw| {
                for (r, &s) in inv.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        dw[j] += gr[j] * xr[j] * s;
                    }
                }
            });
            deposit(nodes, grads, x, |dx| {
                let inv_d = T::one() / T::of(d as f64);
                for (r, &s) in inv.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot += gr[j] * wv[j] * xr[j];
                    }
                    let coef = s * s * s * inv_d * dot;
                    let dr = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        dr[j] += s * wv[j] * gr[j] - coef * xr[j];
                    }
                }
            });
        }
        &Op::Silu(x) => {
            deposit(nodes, grads, x, |dx| {
                for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(val(x)) {
                    let s = kernels::sigmoid(xi);
                    *d += gi * s * (T::one() + xi * (T::one() - s));
                }
            });
        }
        Op::Embedding { table, tokens, d } => {
            let d = *d;
            deposit(nodes, grads, *table, |dt| {
                for (t, &tok) in tokens.iter().enumerate() {
                    let src = &g[t * d..(t + 1) * d];
                    let dst = &mut dt[tok * d..(tok + 1) * d];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
            });
        }
        &Op::Rope { x, n_heads } => {
            let (rows, d) = rows_cols(&node.shape);
            deposit(nodes, grads, x, |dx| {
                let hd = d / n_heads;
                for t in 0..rows {
                    for h in 0..n_heads {
                        for i in 0..hd / 2 {
                            let theta = kernels::rope_angle(t, i, hd);
                            let (s, c) = (T::of(theta.sin()), T::of(theta.cos()));
                            let i0 = t * d + h * hd + 2 * i;
                            let (g0, g1) = (g[i0], g[i0 + 1]);
                            dx[i0] += g0 * c + g1 * s;
                            dx[i0 + 1] += g1 * c - g0 * s;
                        }
                    }
                }
            });
        }
        Op::Attention { q, k, v, n_heads, probs } => {
            let (q, k, v, n_heads) = (*q, *k, *v, *n_heads);
            let (t_len, d) = rows_cols(&node.shape);
            let hd = d / n_heads;
            let scale = T::one() / T::of(hd as f64).sqrt();
            let (qv, kv, vv) = (val(q), val(k), val(v));
            let mut dq = vec![T::zero(); t_len * d];
            let mut dk = vec![T::zero(); t_len * d];
            let mut dv = vec![T::zero(); t_len * d];
            let mut dp = vec![T::zero(); t_len];
            for h in 0..n_heads {
                let off = h * hd;
                let ph = &probs[h * t_len * t_len..(h + 1) * t_len * t_len];
                for i in 0..t_len {
                    let gi = &g[i * d + off..i * d + off + hd];
                    let pi = &ph[i * t_len..i * t_len + i + 1];
                    let mut dot_pd = T::zero();
                    for j in 0..=i {
                        let vj = &vv[j * d + off..j * d + off + hd];
                        let mut s = T::zero();
                        for c in 0..hd {
                            s += gi[c] * vj[c];
                        }
                        dp[j] = s;
                        dot_pd += pi[j] * s;
                        let dvj = &mut dv[j * d + off..j * d + off + hd];
                        for c in 0..hd {
                            dvj[c] += pi[j] * gi[c];
                        }
                    }
                    for j in 0..=i {
                        let ds = pi[j] * (dp[j] - dot_pd) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        for c in 0..hd {
                            dq[i * d + off + c] += ds * kv[j * d + off + c];
                            dk[j * d + off + c] += ds * qv[i * d + off + c];
                        }
                    }
                }
            }
            deposit(nodes, grads, q, |dst| add_into(dst, &dq));
            deposit(nodes, grads, k, |dst| add_into(dst, &dk));
            deposit(nodes, grads, v, |dst| add_into(dst, &dv));
        }
        &Op::LogSoftmax { x, cols } => {
            let y = &node.value;
            deposit(nodes, grads, x, |dx| {
                for r in 0..y.len() / cols {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gs: T = gr.iter().copied().sum();
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dr[j] += gr[j] - yr[j].exp() * gs;
                    }
                }
            });
        }
        &Op::Softmax { x, cols } => {
            let y = &node.value;
            deposit(nodes, grads, x, |dx| {
                for r in 0..y.len() / cols {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let mut dot = T::zero();
                    for j in 0..cols {
                        dot += gr[j] * yr[j];
                    }
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::Gather { x, cols, idx } => {
            let cols = *cols;
            deposit(nodes, grads, *x, |dx| {
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * cols + c] += g[r];
                }
            });
        }
        Op::SelectRows { x, cols, rows } => {
            let cols = *cols;
            deposit(nodes, grads, *x, |dx| {
                for (i, &r) in rows.iter().enumerate() {
                    let src = &g[i * cols..(i + 1) * cols];
                    let dst = &mut dx[r * cols..(r + 1) * cols];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
            });
        }
        &Op::SumRows { x, cols } => {
            deposit(nodes, grads, x, |dx| {
                for (r, &gr) in g.iter().enumerate() {
                    dx[r * cols..(r + 1) * cols].iter_mut().for_each(|a| *a += gr);
                }
            });
        }
        &Op::Sum(x) => {
            let g0 = g[0];
            deposit(nodes, grads, x, |dx| dx.iter_mut().for_each(|a| *a += g0));
        }
        &Op::Exp(x) => {
            let y = &node.value;
            deposit(nodes, grads, x, |dx| {
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y.iter()) {
                    *d += gi * yi;
                }
            });
        }
        &Op::LogSigmoid(x) => {
            deposit(nodes, grads, x, |dx| {
                for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(val(x)) {
                    *d += gi * kernels::sigmoid(-xi);
                }
            });
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor<T> {
        let (shape, value, _) = self.tape.get(self.id);
        Tensor::from_shared(shape, value)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.tape.nodes.borrow()[self.id].value.to_vec()
    }

    pub fn item(&self) -> Result<T> {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&b)?;
        let (sa, va, ra) = self.tape.get(self.id);
        let (sb, vb, rb) = self.tape.get(b.id);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(&va, &vb, &mut out, m, k, n);
        Ok(self.tape.push(vec![m, n], out, ra || rb, Op::MatMul { a: self.id, b: b.id, m, k, n }))
    }

    fn zip_op(self, b: Var<'t, T>, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        self.same_tape(&b)?;
        let (sa, va, ra) = self.tape.get(self.id);
        let (sb, vb, rb) = self.tape.get(b.id);
        if va.len() != vb.len() {
            return Err(Error::Shape(format!("{name} {sa:?} vs {sb:?}")));
        }
        let out = va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.tape.push(sa, out, ra || rb, op))
    }

    pub fn add(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_op(b, "add", |x, y| x + y, Op::Add(self.id, b.id))
    }

    pub fn sub(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_op(b, "sub", |x, y| x - y, Op::Sub(self.id, b.id))
    }

    pub fn mul(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_op(b, "mul", |x, y| x * y, Op::Mul(self.id, b.id))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let (s, v, r) = self.tape.get(self.id);
        let out = v.iter().map(|&x| x * c).collect();
        self.tape.push(s, out, r, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    /// Row-wise RMS normalisation with a learned gain over the last dimension.
    pub fn rms_norm(self, gain: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&gain)?;
        let (sx, vx, rx) = self.tape.get(self.id);
        let (sg, vg, rg) = self.tape.get(gain.id);
        let (rows, d) = rows_cols(&sx);
        if vg.len() != d || d == 0 {
            return Err(Error::Shape(format!("rms_norm {sx:?} with gain {sg:?}")));
        }
        let mut out = vec![T::zero(); vx.len()];
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &vx[r * d..(r + 1) * d];
            let s = kernels::inv_rms(xr);
            inv.push(s);
            for j in 0..d {
                out[r * d + j] = xr[j] * s * vg[j];
            }
        }
        Ok(self.tape.push(sx, out, rx || rg, Op::RmsNorm { x: self.id, gain: gain.id, d, inv }))
    }

    pub fn silu(self) -> Var<'t, T> {
        let (s, v, r) = self.tape.get(self.id);
        let out = v.iter().map(|&x| x * kernels::sigmoid(x)).collect();
        self.tape.push(s, out, r, Op::Silu(self.id))
    }

    /// Gather rows of an embedding table `[V×d]` → `[T×d]`.
    pub fn embed(self, tokens: &[usize]) -> Result<Var<'t, T>> {
        let (s, v, r) = self.tape.get(self.id);
        if s.len() != 2 {
            return Err(Error::Shape(format!("embedding table of shape {s:?}")));
        }
        let (vocab, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            if tok >= vocab {
                return Err(Error::Index { index: tok, size: vocab });
            }
            out.extend_from_slice(&v[tok * d..(tok + 1) * d]);
        }
        Ok(self.tape.push(
            vec![tokens.len(), d],
            out,
            r,
            Op::Embedding { table: self.id, tokens: tokens.to_vec(), d },
        ))
    }

    /// Rotary position embedding over `[T×d]`, split into `n_heads` heads.
    pub fn rope(self, n_heads: usize) -> Result<Var<'t, T>> {
        let (s, v, r) = self.tape.get(self.id);
        let (rows, d) = rows_cols(&s);
        if n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return Err(Error::Shape(format!("rope on {s:?} with {n_heads} heads")));
        }
        let hd = d / n_heads;
        let mut out = v.to_vec();
        for t in 0..rows {
            for h in 0..n_heads {
                for i in 0..hd / 2 {
                    let theta = kernels::rope_angle(t, i, hd);
                    let (sn, c) = (T::of(theta.sin()), T::of(theta.cos()));
                    let i0 = t * d + h * hd + 2 * i;
                    let (x0, x1) = (v[i0], v[i0 + 1]);
                    out[i0] = x0 * c - x1 * sn;
                    out[i0 + 1] = x0 * sn + x1 * c;
                }
            }
        }
        Ok(self.tape.push(s, out, r, Op::Rope { x: self.id, n_heads }))
    }

    /// Causal multi-head scaled dot-product attention; `self` is the query.
    pub fn attention(self, k: Var<'t, T>, v: Var<'t, T>, n_heads: usize) -> Result<Var<'t, T>> {
        self.same_tape(&k)?;
        self.same_tape(&v)?;
        let (sq, qv, rq) = self.tape.get(self.id);
        let (sk, kv, rk) = self.tape.get(k.id);
        let (sv, vv, rv) = self.tape.get(v.id);
        if sq.len() != 2 || sq != sk || sq != sv || n_heads == 0 || sq[1] % n_heads != 0 {
            return Err(Error::Shape(format!(
                "attention q{sq:?} k{sk:?} v{sv:?} heads {n_heads}"
            )));
        }
        let (t_len, d) = (sq[0], sq[1]);
        let hd = d / n_heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let mut probs = vec![T::zero(); n_heads * t_len * t_len];
        let mut out = vec![T::zero(); t_len * d];
        let mut scores = vec![T::zero(); t_len];
        for h in 0..n_heads {
            let off = h * hd;
            for i in 0..t_len {
                let qi = &qv[i * d + off..i * d + off + hd];
                for j in 0..=i {
                    let kj = &kv[j * d + off..j * d + off + hd];
                    let mut s = T::zero();
                    for c in 0..hd {
                        s += qi[c] * kj[c];
                    }
                    scores[j] = s * scale;
                }
                let p = &mut probs[(h * t_len + i) * t_len..(h * t_len + i) * t_len + i + 1];
                kernels::softmax_into(&scores[..=i], p);
                let oi = &mut out[i * d + off..i * d + off + hd];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vv[j * d + off..j * d + off + hd];
                    for c in 0..hd {
                        oi[c] += pj * vj[c];
                    }
                }
            }
        }
        Ok(self.tape.push(
            sq,
            out,
            rq || rk || rv,
            Op::Attention { q: self.id, k: k.id, v: v.id, n_heads, probs },
        ))
    }

    pub fn log_softmax(self) -> Var<'t, T> {
        let (s, v, r) = self.tape.get(self.id);
        let (rows, cols) = rows_cols(&s);
        let mut out = vec![T::zero(); v.len()];
        for i in 0..rows {
            kernels::log_softmax_into(&v[i * cols..(i + 1) * cols], &mut out[i * cols..(i + 1) * cols]);
        }
        self.tape.push(s, out, r, Op::LogSoftmax { x: self.id, cols })
    }

    pub fn softmax(self) -> Var<'t, T> {
        let (s, v, r) = self.tape.get(self.id);
        let (rows, cols) = rows_cols(&s);
        let mut out = vec![T::zero(); v.len()];
        for i in 0..rows {
            kernels::softmax_into(&v[i * cols..(i + 1) * cols], &mut out[i * cols..(i + 1) * cols]);
        }
        self.tape.push(s, out, r, Op::Softmax { x: self.id, cols })
    }

    /// Pick one column per row: `out[r] = x[r, idx[r]]`.
    pub fn gather(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let (s, v, r) = self.tape.get(self.id);
        let (rows, cols) = rows_cols(&s);
        if idx.len() != rows {
            return Err(Error::Shape(format!("gather of {} indices from {s:?}", idx.len())));
        }
        let mut out = Vec::with_capacity(rows);
        for (i, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(Error::Index { index: c, size: cols });
            }
            out.push(v[i * cols + c]);
        }
        Ok(self.tape.push(
            vec![rows],
            out,
            r,
            Op::Gather { x: self.id, cols, idx: idx.to_vec() },
        ))
    }

    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'t, T>> {
        let (s, v, r) = self.tape.get(self.id);
        let (n_rows, cols) = rows_cols(&s);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &row in rows {
            if row >= n_rows {
                return Err(Error::Index { index: row, size: n_rows });
            }
            out.extend_from_slice(&v[row * cols..(row + 1) * cols]);
        }
        Ok(self.tape.push(
            vec![rows.len(), cols],
            out,
            r,
            Op::SelectRows { x: self.id, cols, rows: rows.to_vec() },
        ))
    }

    /// Sum over the last dimension.
    pub fn sum_rows(self) -> Var<'t, T> {
        let (s, v, r) = self.tape.get(self.id);
        let (rows, cols) = rows_cols(&s);
        let out = (0..rows)
            .map(|i| v[i * cols..(i + 1) * cols].iter().copied().sum())
            .collect();
        self.tape.push(vec![rows], out, r, Op::SumRows { x: self.id, cols })
    }

    pub fn sum(self) -> Var<'t, T> {
        let (_, v, r) = self.tape.get(self.id);
        let total: T = v.iter().copied().sum();
        self.tape.push(vec![1], vec![total], r, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.tape.nodes.borrow()[self.id].value.len().max(1);
        self.sum().scale(T::one() / T::of(n as f64))
    }

    pub fn exp(self) -> Var<'t, T> {
        let (s, v, r) = self.tape.get(self.id);
        let out = v.iter().map(|x| x.exp()).collect();
        self.tape.push(s, out, r, Op::Exp(self.id))
    }

    pub fn log_sigmoid(self) -> Var<'t, T> {
        let (s, v, r) = self.tape.get(self.id);
        let out = v.iter().map(|&x| kernels::log_sigmoid(x)).collect();
        self.tape.push(s, out, r, Op::LogSigmoid(self.id))
    }

    /// Mean next-token cross-entropy of logit rows `[R×V]` against `targets[R]`.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t, T>> {
        Ok(self.log_softmax().gather(targets)?.mean().neg())
    }
}
