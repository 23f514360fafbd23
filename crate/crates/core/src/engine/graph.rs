//! Define-then-run computation record with reverse-mode differentiation.
//!
//! A [`Graph`] is built once from named inputs and a fixed op set, then
//! evaluated against a [`Feed`] of tensors. Node ids are handed out in
//! construction order, so the node list is always topologically sorted and
//! the backward sweep is a single reverse pass over it.

use std::collections::{BTreeMap, HashMap};

use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<E> {
    Input { name: String, requires_grad: bool },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: E, shift: E },
    Relu(NodeId),
    Silu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId },
    Reshape { x: NodeId, tail: Vec<usize> },
    Concat(NodeId, NodeId),
    StopGradient(NodeId),
}

impl<E> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Silu(_) => "silu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::Reshape { .. } => "reshape",
            Op::Concat(..) => "concat",
            Op::StopGradient(_) => "stop_gradient",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Input { .. } => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![a, b],
            Op::Affine { x, .. }
            | Op::Relu(x)
            | Op::Silu(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape { x, .. }
            | Op::StopGradient(x) => vec![x],
            Op::Conv2d { x, w, b } => vec![x, w, b],
        }
    }
}

/// Named tensors bound to graph inputs for one evaluation.
pub struct Feed<'a, E> {
    map: HashMap<&'a str, &'a Tensor<E>>,
}

impl<'a, E> Default for Feed<'a, E> {
    fn default() -> Self {
        Self {
            map: HashMap::new(),
        }
    }
}

impl<'a, E> Feed<'a, E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &'a str, value: &'a Tensor<E>) -> &mut Self {
        self.map.insert(name, value);
        self
    }

    pub fn extend(&mut self, params: &'a BTreeMap<String, Tensor<E>>) -> &mut Self {
        for (k, v) in params {
            self.map.insert(k.as_str(), v);
        }
        self
    }

    fn get(&self, name: &str) -> Option<&'a Tensor<E>> {
        self.map.get(name).copied()
    }
}

/// Gradients keyed by input name.
pub type Gradients<E> = BTreeMap<String, Tensor<E>>;

pub struct Graph<E> {
    ops: Vec<Op<E>>,
    outputs: Vec<(String, NodeId)>,
    values: Vec<Tensor<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            outputs: Vec::new(),
            values: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<E>) -> NodeId {
        self.values.clear();
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn input(&mut self, name: &str, requires_grad: bool) -> NodeId {
        self.push(Op::Input {
            name: name.to_string(),
            requires_grad,
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        self.push(Op::Affine {
            x,
            scale: E::from_f64(scale),
            shift: E::from_f64(shift),
        })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let neg = self.affine(b, -1.0, 0.0);
        self.add(a, neg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Silu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    /// Stride-1 convolution with zero padding that preserves H×W.
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]` (k odd), `b: [Cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Conv2d { x, w, b })
    }

    /// Keeps the leading extent and reshapes the rest to `tail`.
    pub fn reshape(&mut self, x: NodeId, tail: &[usize]) -> NodeId {
        self.push(Op::Reshape {
            x,
            tail: tail.to_vec(),
        })
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Concat(a, b))
    }

    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        self.push(Op::StopGradient(x))
    }

    pub fn mark_output(&mut self, name: &str, node: NodeId) {
        self.outputs.push((name.to_string(), node));
    }

    pub fn is_evaluated(&self) -> bool {
        !self.ops.is_empty() && self.values.len() == self.ops.len()
    }

    /// Value of a node from the last evaluation.
    pub fn value(&self, node: NodeId) -> Result<&Tensor<E>> {
        if !self.is_evaluated() {
            return Err(Error::state("graph has not been evaluated"));
        }
        Ok(&self.values[node.0])
    }

    /// Runs the forward pass and returns every marked output by name.
    pub fn evaluate(&mut self, feed: &Feed<'_, E>) -> Result<BTreeMap<String, Tensor<E>>> {
        self.forward(feed)?;
        Ok(self
            .outputs
            .iter()
            .map(|(n, id)| (n.clone(), self.values[id.0].clone()))
            .collect())
    }

    /// Forward pass only; read results through [`Graph::value`].
    pub fn forward(&mut self, feed: &Feed<'_, E>) -> Result<()> {
        self.values.clear();
        let mut values: Vec<Tensor<E>> = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let out = eval_op(op, &values, feed)?;
            if !out.is_finite() {
                return Err(Error::Numeric {
                    node: i,
                    op: op.name(),
                });
            }
            values.push(out);
        }
        self.values = values;
        Ok(())
    }

    /// Reverse sweep from `output`, seeded with `output_grad`. Returns a
    /// gradient for every input declared with `requires_grad`; inputs not
    /// reachable from `output` get zeros.
    pub fn backpropagate(&self, output: NodeId, output_grad: &Tensor<E>) -> Result<Gradients<E>> {
        if !self.is_evaluated() {
            return Err(Error::state("backpropagate called before evaluate"));
        }
        let out_dims = self.values[output.0].dims();
        if output_grad.dims() != out_dims {
            return Err(Error::shape(format!(
                "output grad dims {:?} != output dims {:?}",
                output_grad.dims(),
                out_dims
            )));
        }

        let n = output.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.ops[i] {
                Op::Input { requires_grad, .. } => *requires_grad,
                Op::StopGradient(_) => false,
                op => op.parents().iter().any(|p| needs[p.0]),
            };
        }

        let mut grads: Vec<Option<Vec<E>>> = vec![None; n];
        grads[output.0] = Some(output_grad.data().to_vec());

        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Input { .. } = self.ops[i] {
                grads[i] = Some(g);
                continue;
            }
            backward_op(&self.ops[i], &self.values, &g, &needs, &mut grads)?;
        }

        let mut out = Gradients::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Input {
                name,
                requires_grad: true,
            } = op
            {
                let dims = self.values[i].dims().to_vec();
                let g = match grads.get_mut(i).and_then(|g| g.take()) {
                    Some(data) => Tensor::new(dims, data)?,
                    None => Tensor::zeros(&dims),
                };
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

/// Broadcast relation between two elementwise operands.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    /// Second operand repeats over the first operand's leading extent.
    RightOverLead,
    LeftOverLead,
}

fn bcast(a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if !a.is_empty() && &a[1..] == b {
        Ok(Bcast::RightOverLead)
    } else if !b.is_empty() && &b[1..] == a {
        Ok(Bcast::LeftOverLead)
    } else {
        Err(Error::shape(format!("elementwise dims {a:?} vs {b:?}")))
    }
}

fn zip_bcast<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
    match bcast(a.dims(), b.dims())? {
        Bcast::Same => {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.dims().to_vec(), data)
        }
        Bcast::RightOverLead => {
            let w = b.numel();
            let data = a
                .data()
                .chunks(w)
                .flat_map(|row| row.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
                .collect();
            Tensor::new(a.dims().to_vec(), data)
        }
        Bcast::LeftOverLead => {
            let w = a.numel();
            let data = b
                .data()
                .chunks(w)
                .flat_map(|row| a.data().iter().zip(row).map(|(&x, &y)| f(x, y)))
                .collect();
            Tensor::new(b.dims().to_vec(), data)
        }
    }
}

fn map<E: Element>(x: &Tensor<E>, f: impl Fn(E) -> E) -> Tensor<E> {
    let data: Vec<E> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.dims().to_vec(), data).expect("same dims")
}

struct ConvShape {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvShape {
    fn of(x: &[usize], w: &[usize], b: &[usize]) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || b.len() != 1 {
            return Err(Error::shape(format!(
                "conv2d ranks: x {x:?}, w {w:?}, b {b:?}"
            )));
        }
        if w[1] != x[1] || w[2] != w[3] || w[2].is_multiple_of(2) || b[0] != w[0] {
            return Err(Error::shape(format!(
                "conv2d dims: x {x:?}, w {w:?}, b {b:?}"
            )));
        }
        Ok(Self {
            batch: x[0],
            cin: x[1],
            cout: w[0],
            h: x[2],
            w: x[3],
            k: w[2],
        })
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Patch matrix stored transposed, `[Cin*k*k, B*H*W]`, with zero padding.
fn im2col<E: Element>(x: &[E], s: &ConvShape) -> Vec<E> {
    let (hw, m) = (s.hw(), s.batch * s.hw());
    let mut cols = vec![E::zero(); s.ckk() * m];
    for_each_tap(s, |l, bi, c, y, py, xs, px| {
        let src = &x[(bi * s.cin + c) * hw + y * s.w..][xs.clone()];
        cols[l * m + bi * hw + py * s.w..][px..px + src.len()].copy_from_slice(src);
    });
    cols
}

/// Adds the transposed patch gradient back onto the input positions.
fn col2im_accumulate<E: Element>(dcols: &[E], s: &ConvShape, dx: &mut [E]) {
    let (hw, m) = (s.hw(), s.batch * s.hw());
    for_each_tap(s, |l, bi, c, y, py, xs, px| {
        let src = &dcols[l * m + bi * hw + py * s.w + px..][..xs.len()];
        for (d, &g) in dx[(bi * s.cin + c) * hw + y * s.w..][xs]
            .iter_mut()
            .zip(src)
        {
            *d = *d + g;
        }
    });
}

/// Calls `f(l, batch, channel, y, py, x_range, px0)` for every kernel tap
/// `l` and output row `py` whose source row `y` lies inside the image;
/// `x_range` is the in-bounds source span starting at output column `px0`.
fn for_each_tap(
    s: &ConvShape,
    mut f: impl FnMut(usize, usize, usize, usize, usize, std::ops::Range<usize>, usize),
) {
    let r = s.k / 2;
    for c in 0..s.cin {
        for ky in 0..s.k {
            for kx in 0..s.k {
                let l = (c * s.k + ky) * s.k + kx;
                // output columns px with 0 <= px + kx - r < w
                let px0 = r.saturating_sub(kx);
                let px1 = (s.w + r).saturating_sub(kx).min(s.w);
                if px0 >= px1 {
                    continue;
                }
                let xs = px0 + kx - r..px1 + kx - r;
                for bi in 0..s.batch {
                    for py in 0..s.h {
                        let y = py + ky;
                        if y < r || y - r >= s.h {
                            continue;
                        }
                        f(l, bi, c, y - r, py, xs.clone(), px0);
                    }
                }
            }
        }
    }
}

fn eval_op<E: Element>(op: &Op<E>, v: &[Tensor<E>], feed: &Feed<'_, E>) -> Result<Tensor<E>> {
    Ok(match op {
        Op::Input { name, .. } => feed
            .get(name)
            .ok_or_else(|| Error::arg(format!("missing input `{name}`")))?
            .clone(),
        Op::MatMul(a, b) => {
            let (a, b) = (&v[a.0], &v[b.0]);
            let (ad, bd) = (a.dims(), b.dims());
            if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
                return Err(Error::shape(format!("matmul {ad:?} x {bd:?}")));
            }
            let (m, k, n) = (ad[0], ad[1], bd[1]);
            let mut c = vec![E::zero(); m * n];
            E::gemm(
                m,
                k,
                n,
                a.data(),
                k as isize,
                1,
                b.data(),
                n as isize,
                1,
                E::zero(),
                &mut c,
            );
            Tensor::new(vec![m, n], c)?
        }
        Op::Add(a, b) => zip_bcast(&v[a.0], &v[b.0], |x, y| x + y)?,
        Op::Mul(a, b) => zip_bcast(&v[a.0], &v[b.0], |x, y| x * y)?,
        Op::Affine { x, scale, shift } => {
            let (s, c) = (*scale, *shift);
            map(&v[x.0], |e| s * e + c)
        }
        Op::Relu(x) => map(&v[x.0], |e| if e > E::zero() { e } else { E::zero() }),
        Op::Silu(x) => map(&v[x.0], |e| e * sigmoid(e)),
        Op::Tanh(x) => map(&v[x.0], |e| e.tanh()),
        Op::Exp(x) => map(&v[x.0], |e| e.exp()),
        Op::Sum(x) => Tensor::scalar(v[x.0].data().iter().fold(E::zero(), |acc, &e| acc + e)),
        Op::Mean(x) => {
            let t = &v[x.0];
            if t.numel() == 0 {
                return Err(Error::shape("mean of empty tensor"));
            }
            let s = t.data().iter().fold(E::zero(), |acc, &e| acc + e);
            Tensor::scalar(s / E::from_f64(t.numel() as f64))
        }
        Op::Conv2d { x, w, b } => {
            let (xt, wt, bt) = (&v[x.0], &v[w.0], &v[b.0]);
            let s = ConvShape::of(xt.dims(), wt.dims(), bt.dims())?;
            let (hw, ckk) = (s.hw(), s.ckk());
            let cols = im2col(xt.data(), &s);
            let m = s.batch * hw;
            let mut out_t = vec![E::zero(); m * s.cout];
            // out_t[(b,p), o] = sum_l cols[l, (b,p)] * w[o, l]
            E::gemm(
                m,
                ckk,
                s.cout,
                &cols,
                1,
                m as isize,
                wt.data(),
                1,
                ckk as isize,
                E::zero(),
                &mut out_t,
            );
            let mut y = vec![E::zero(); s.batch * s.cout * hw];
            for bi in 0..s.batch {
                for o in 0..s.cout {
                    let bias = bt.data()[o];
                    let dst = &mut y[(bi * s.cout + o) * hw..][..hw];
                    for (p, d) in dst.iter_mut().enumerate() {
                        *d = out_t[(bi * hw + p) * s.cout + o] + bias;
                    }
                }
            }
            Tensor::new(vec![s.batch, s.cout, s.h, s.w], y)?
        }
        Op::Reshape { x, tail } => {
            let t = &v[x.0];
            let mut dims = vec![t.rows()];
            dims.extend_from_slice(tail);
            t.clone().reshape(&dims)?
        }
        Op::Concat(a, b) => {
            let (a, b) = (&v[a.0], &v[b.0]);
            let (ad, bd) = (a.dims(), b.dims());
            if ad.is_empty() || ad.len() != bd.len() || ad[..ad.len() - 1] != bd[..bd.len() - 1] {
                return Err(Error::shape(format!("concat {ad:?} with {bd:?}")));
            }
            let (p, q) = (ad[ad.len() - 1], bd[bd.len() - 1]);
            let rows = a.numel() / p.max(1);
            let mut data = Vec::with_capacity(a.numel() + b.numel());
            for r in 0..rows {
                data.extend_from_slice(&a.data()[r * p..(r + 1) * p]);
                data.extend_from_slice(&b.data()[r * q..(r + 1) * q]);
            }
            let mut dims = ad.to_vec();
            *dims.last_mut().unwrap() = p + q;
            Tensor::new(dims, data)?
        }
        Op::StopGradient(x) => v[x.0].clone(),
    })
}

fn accumulate<E: Element>(grads: &mut [Option<Vec<E>>], id: NodeId, contrib: Vec<E>) {
    match &mut grads[id.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Reduces a gradient of the broadcast result back to an operand's dims.
fn unbroadcast<E: Element>(g: Vec<E>, operand_numel: usize) -> Vec<E> {
    if g.len() == operand_numel {
        return g;
    }
    let mut out = vec![E::zero(); operand_numel];
    for row in g.chunks(operand_numel) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o = *o + x;
        }
    }
    out
}

/// Elementwise product with `other` expanded to `g`'s length when broadcast.
fn times_expanded<E: Element>(g: &[E], other: &[E]) -> Vec<E> {
    if g.len() == other.len() {
        g.iter().zip(other).map(|(&a, &b)| a * b).collect()
    } else {
        g.chunks(other.len())
            .flat_map(|row| row.iter().zip(other).map(|(&a, &b)| a * b))
            .collect()
    }
}

fn backward_op<E: Element>(
    op: &Op<E>,
    v: &[Tensor<E>],
    g: &[E],
    needs: &[bool],
    grads: &mut [Option<Vec<E>>],
) -> Result<()> {
    match op {
        Op::Input { .. } | Op::StopGradient(_) => {}
        Op::MatMul(a, b) => {
            let (at, bt) = (&v[a.0], &v[b.0]);
            let (m, k, n) = (at.dims()[0], at.dims()[1], bt.dims()[1]);
            if needs[a.0] {
                // dA[m,k] = dC[m,n] · Bᵀ
                let mut da = vec![E::zero(); m * k];
                E::gemm(
                    m,
                    n,
                    k,
                    g,
                    n as isize,
                    1,
                    bt.data(),
                    1,
                    n as isize,
                    E::zero(),
                    &mut da,
                );
                accumulate(grads, *a, da);
            }
            if needs[b.0] {
                // dB[k,n] = Aᵀ · dC
                let mut db = vec![E::zero(); k * n];
                E::gemm(
                    k,
                    m,
                    n,
                    at.data(),
                    1,
                    k as isize,
                    g,
                    n as isize,
                    1,
                    E::zero(),
                    &mut db,
                );
                accumulate(grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            if needs[a.0] {
                accumulate(grads, *a, unbroadcast(g.to_vec(), v[a.0].numel()));
            }
            if needs[b.0] {
                accumulate(grads, *b, unbroadcast(g.to_vec(), v[b.0].numel()));
            }
        }
        Op::Mul(a, b) => {
            let (at, bt) = (&v[a.0], &v[b.0]);
            if needs[a.0] {
                let full = if at.numel() >= bt.numel() {
                    times_expanded(g, bt.data())
                } else {
                    // a is broadcast: pair each g row with the matching b row
                    g.iter().zip(bt.data()).map(|(&x, &y)| x * y).collect()
                };
                accumulate(grads, *a, unbroadcast(full, at.numel()));
            }
            if needs[b.0] {
                let full = if bt.numel() >= at.numel() {
                    times_expanded(g, at.data())
                } else {
                    g.iter().zip(at.data()).map(|(&x, &y)| x * y).collect()
                };
                accumulate(grads, *b, unbroadcast(full, bt.numel()));
            }
        }
        Op::Affine { x, scale, .. } => {
            let s = *scale;
            accumulate(grads, *x, g.iter().map(|&e| e * s).collect());
        }
        Op::Relu(x) => {
            let xs = v[x.0].data();
            let d = g
                .iter()
                .zip(xs)
                .map(|(&gi, &xi)| if xi > E::zero() { gi } else { E::zero() })
                .collect();
            accumulate(grads, *x, d);
        }
        Op::Silu(x) => {
            let xs = v[x.0].data();
            let d = g
                .iter()
                .zip(xs)
                .map(|(&gi, &xi)| {
                    let s = sigmoid(xi);
                    gi * s * (E::one() + xi * (E::one() - s))
                })
                .collect();
            accumulate(grads, *x, d);
        }
        Op::Tanh(x) => {
            let ys = v[x.0].data();
            let d = g
                .iter()
                .zip(ys)
                .map(|(&gi, &xi)| {
                    let y = xi.tanh();
                    gi * (E::one() - y * y)
                })
                .collect();
            accumulate(grads, *x, d);
        }
        Op::Exp(x) => {
            let xs = v[x.0].data();
            let d = g.iter().zip(xs).map(|(&gi, &xi)| gi * xi.exp()).collect();
            accumulate(grads, *x, d);
        }
        Op::Sum(x) => {
            accumulate(grads, *x, vec![g[0]; v[x.0].numel()]);
        }
        Op::Mean(x) => {
            let n = v[x.0].numel();
            accumulate(grads, *x, vec![g[0] / E::from_f64(n as f64); n]);
        }
        Op::Conv2d { x, w, b } => {
            let (xt, wt, bt) = (&v[x.0], &v[w.0], &v[b.0]);
            let s = ConvShape::of(xt.dims(), wt.dims(), bt.dims())?;
            let (hw, ckk, m) = (s.hw(), s.ckk(), s.batch * s.hw());
            // transpose dY [B, Cout, HW] -> [(B,HW), Cout]
            let mut g_t = vec![E::zero(); m * s.cout];
            for bi in 0..s.batch {
                for o in 0..s.cout {
                    let src = &g[(bi * s.cout + o) * hw..][..hw];
                    for (p, &val) in src.iter().enumerate() {
                        g_t[(bi * hw + p) * s.cout + o] = val;
                    }
                }
            }
            if needs[b.0] {
                let mut db = vec![E::zero(); s.cout];
                for row in g_t.chunks(s.cout) {
                    for (d, &val) in db.iter_mut().zip(row) {
                        *d = *d + val;
                    }
                }
                accumulate(grads, *b, db);
            }
            if needs[w.0] {
                let cols = im2col(xt.data(), &s);
                // dW[o, l] = sum_(b,p) g_t[(b,p), o] * cols[l, (b,p)]
                let mut dw = vec![E::zero(); s.cout * ckk];
                E::gemm(
                    s.cout,
                    m,
                    ckk,
                    &g_t,
                    1,
                    s.cout as isize,
                    &cols,
                    1,
                    m as isize,
                    E::zero(),
                    &mut dw,
                );
                accumulate(grads, *w, dw);
            }
            if needs[x.0] {
                // dcols[l, (b,p)] = sum_o w[o, l] * g_t[(b,p), o]
                let mut dcols = vec![E::zero(); ckk * m];
                E::gemm(
                    ckk,
                    s.cout,
                    m,
                    wt.data(),
                    1,
                    ckk as isize,
                    &g_t,
                    1,
                    s.cout as isize,
                    E::zero(),
                    &mut dcols,
                );
                let mut dx = vec![E::zero(); xt.numel()];
                col2im_accumulate(&dcols, &s, &mut dx);
                accumulate(grads, *x, dx);
            }
        }
        Op::Reshape { x, .. } => accumulate(grads, *x, g.to_vec()),
        Op::Concat(a, b) => {
            let (at, bt) = (&v[a.0], &v[b.0]);
            let p = *at.dims().last().unwrap();
            let q = *bt.dims().last().unwrap();
            let rows = at.numel() / p.max(1);
            let mut ga = Vec::with_capacity(at.numel());
            let mut gb = Vec::with_capacity(bt.numel());
            for r in 0..rows {
                ga.extend_from_slice(&g[r * (p + q)..r * (p + q) + p]);
                gb.extend_from_slice(&g[r * (p + q) + p..(r + 1) * (p + q)]);
            }
            if needs[a.0] {
                accumulate(grads, *a, ga);
            }
            if needs[b.0] {
                accumulate(grads, *b, gb);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims, v).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", false);
        let b = g.input("b", false);
        let c = g.matmul(a, b);
        g.mark_output("c", c);
        let (ta, tb) = (t(&[2, 2], &[1., 2., 3., 4.]), t(&[2, 1], &[1., 1.]));
        let mut feed = Feed::new();
        feed.insert("a", &ta).insert("b", &tb);
        let out = g.evaluate(&feed).unwrap();
        assert_eq!(out["c"].data(), &[3.0, 7.0]);
        assert_eq!(out["c"].dims(), &[2, 1]);
    }

    #[test]
    fn relu_and_silu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", false);
        let r = g.relu(x);
        let s = g.silu(x);
        g.mark_output("r", r);
        g.mark_output("s", s);
        let tx = t(&[3], &[-1., 0., 2.]);
        let mut feed = Feed::new();
        feed.insert("x", &tx);
        let out = g.evaluate(&feed).unwrap();
        assert_eq!(out["r"].data(), &[0., 0., 2.]);

        let one = t(&[1], &[1.0]);
        let mut feed = Feed::new();
        feed.insert("x", &one);
        let out = g.evaluate(&feed).unwrap();
        // 1 / (1 + e^-1)
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((out["s"].data()[0] - expected).abs() < 1e-15);
        assert!((out["s"].data()[0] - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn linear_rule_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", true);
        let y = g.affine(x, 3.0, 0.0);
        let tx = t(&[], &[2.0]);
        let mut feed = Feed::new();
        feed.insert("x", &tx);
        g.forward(&feed).unwrap();
        let grads = g.backpropagate(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["x"].data(), &[3.0]);
    }

    #[test]
    fn stop_gradient_blocks_one_factor() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", true);
        let sx = g.stop_gradient(x);
        let y = g.mul(sx, x);
        let tx = t(&[], &[2.0]);
        let mut feed = Feed::new();
        feed.insert("x", &tx);
        g.forward(&feed).unwrap();
        let grads = g.backpropagate(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["x"].data(), &[2.0]);
    }

    #[test]
    fn gradient_behind_stop_is_exact_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", true);
        let sx = g.stop_gradient(x);
        let y = g.exp(sx);
        let s = g.sum(y);
        let tx = t(&[3], &[0.1, -0.3, 2.0]);
        let mut feed = Feed::new();
        feed.insert("x", &tx);
        g.forward(&feed).unwrap();
        let grads = g.backpropagate(s, &Tensor::scalar(1.0)).unwrap();
        assert!(grads["x"].data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", true);
        let y = g.sum(x);
        assert!(matches!(
            g.backpropagate(y, &Tensor::scalar(1.0)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn shape_and_numeric_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", false);
        let b = g.input("b", false);
        let c = g.matmul(a, b);
        let _ = g.exp(c);
        let (ta, tb) = (t(&[2, 3], &[0.; 6]), t(&[2, 1], &[0.; 2]));
        let mut feed = Feed::new();
        feed.insert("a", &ta).insert("b", &tb);
        assert!(matches!(g.forward(&feed), Err(Error::Shape(_))));

        let (ta, tb) = (t(&[1, 1], &[1000.0]), t(&[1, 1], &[1.0]));
        let mut feed = Feed::new();
        feed.insert("a", &ta).insert("b", &tb);
        assert!(matches!(
            g.forward(&feed),
            Err(Error::Numeric { node: 3, op: "exp" })
        ));
    }

    #[test]
    fn missing_input_is_reported() {
        let mut g = Graph::<f32>::new();
        let _ = g.input("x", false);
        assert!(matches!(g.forward(&Feed::new()), Err(Error::Argument(_))));
    }

    #[test]
    fn broadcast_over_leading_extent() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", true);
        let b = g.input("b", true);
        let c = g.mul(a, b);
        let s = g.sum(c);
        let ta = t(&[2, 2], &[1., 2., 3., 4.]);
        let tb = t(&[2], &[10., 20.]);
        let mut feed = Feed::new();
        feed.insert("a", &ta).insert("b", &tb);
        g.forward(&feed).unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[10., 40., 30., 80.]);
        let grads = g.backpropagate(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["a"].data(), &[10., 20., 10., 20.]);
        assert_eq!(grads["b"].data(), &[4., 6.]);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", false);
        let w = g.input("w", false);
        let b = g.input("b", false);
        let y = g.conv2d(x, w, b);
        let tx = t(&[1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]);
        let mut wk = vec![0.0; 9];
        wk[4] = 1.0;
        let tw = t(&[1, 1, 3, 3], &wk);
        let tb = t(&[1], &[0.5]);
        let mut feed = Feed::new();
        feed.insert("x", &tx).insert("w", &tw).insert("b", &tb);
        g.forward(&feed).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[1.5, 2.5, 3.5, 4.5, 5.5, 6.5]);
    }

    #[test]
    fn evaluate_is_pure() {
        let mut g = Graph::<f32>::new();
        let x = g.input("x", false);
        let w = g.input("w", false);
        let h = g.matmul(x, w);
        let h = g.silu(h);
        g.mark_output("h", h);
        let tx = Tensor::<f32>::from_f64(&[2, 3], &[0.1, -0.7, 0.3, 1.1, 0.2, -0.4]).unwrap();
        let tw = Tensor::<f32>::from_f64(&[3, 2], &[0.5, -0.2, 0.8, 0.1, -0.9, 0.3]).unwrap();
        let mut feed = Feed::new();
        feed.insert("x", &tx).insert("w", &tw);
        let a = g.evaluate(&feed).unwrap();
        let b = g.evaluate(&feed).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a["h"]), bits(&b["h"]));
    }
}
