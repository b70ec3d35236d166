//! Wengert-list style gradient tape.
//!
//! Every operation appends one node holding its output value and enough
//! context to run its backward rule. Nodes can only reference earlier nodes,
//! so the append order is already a topological order and `backward` is a
//! single reverse sweep.

use crate::conv::{self, ConvGeometry};
use crate::float::{matmul_into, matmul_nt_into, matmul_tn_into};
use crate::tensor::numel;
use crate::{Float, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Silu(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, inv_std: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    AddChannel(Var, Var),
    Concat1(Vec<Var>),
    Upsample2x(Var),
    Gather { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MseReduce(Var, Var),
    MaeReduce(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], retained for leaf values only.
#[derive(Debug)]
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss w.r.t. a leaf. `None` when the leaf does not
    /// require gradients or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }
}

/// Elementwise binary layout: identical shapes, or `rhs` equal to `lhs`
/// without its leading (batch) dimension.
#[derive(Clone, Copy, PartialEq)]
enum Layout {
    Same,
    BroadcastRhs,
}

fn binary_layout(op: &'static str, a: &[usize], b: &[usize]) -> Result<Layout, TensorError> {
    if a == b {
        Ok(Layout::Same)
    } else if !a.is_empty() && &a[1..] == b {
        Ok(Layout::BroadcastRhs)
    } else {
        Err(TensorError::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() })
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Sum over `xs` in f64, so reductions stay accurate in the f32 instantiation.
fn sum64<T: Float>(xs: impl Iterator<Item = T>) -> f64 {
    xs.map(|v| v.as_f64()).sum()
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well-formed")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Registers a value that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>), TensorError> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        binary_layout(name, &na.shape, &nb.shape)?;
        let inner = nb.value.len().max(1);
        let out = na
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, nb.value[i % inner]))
            .collect();
        Ok((na.shape.clone(), out))
    }

    /// `a + b`; `b` may omit `a`'s leading batch dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, value) = self.elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, value) = self.elementwise("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, value) = self.elementwise("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| x * s).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, rg, Op::Scale(a, s))
    }

    /// Multiplies batch element `i` by the constant `coef[i]`.
    pub fn scale_rows(&mut self, a: Var, coef: &[T]) -> Result<Var, TensorError> {
        let n = &self.nodes[a.0];
        if n.shape.first() != Some(&coef.len()) {
            return Err(TensorError::Shape { op: "scale_rows", lhs: n.shape.clone(), rhs: vec![coef.len()] });
        }
        let stride = n.value.len() / coef.len().max(1);
        let value = n.value.iter().enumerate().map(|(i, &x)| x * coef[i / stride]).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, value, rg, Op::ScaleRows(a, coef.to_vec())))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| x * sigmoid(x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, rg, Op::Silu(a))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape { op: "matmul", lhs: sa.clone(), rhs: sb.clone() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, &self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// Affine map `x·w + bias` for `x[batch×in]`, `w[in×out]`, `bias[out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, TensorError> {
        let h = self.matmul(x, w)?;
        self.add(h, bias)
    }

    /// Batched "same" convolution of `x[B×C×H×W]` with an odd square kernel
    /// `k[O×C×K×K]`, zero padding `K/2`, output spatial size `ceil(H/stride)`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var, TensorError> {
        let (sx, sk) = (&self.nodes[x.0].shape, &self.nodes[kernel.0].shape);
        let geom = ConvGeometry::new(sx, sk, stride)?;
        if let Some(b) = bias {
            let sb = &self.nodes[b.0].shape;
            if sb.as_slice() != [geom.out_channels] {
                return Err(TensorError::Shape { op: "conv2d bias", lhs: sk.clone(), rhs: sb.clone() });
            }
        }
        let mut out = conv::forward(&geom, &self.nodes[x.0].value, &self.nodes[kernel.0].value);
        if let Some(b) = bias {
            let bv = &self.nodes[b.0].value;
            let plane = geom.out_plane();
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bias = bv[i % geom.out_channels];
                chunk.iter_mut().for_each(|v| *v = *v + bias);
            }
        }
        let shape = geom.out_shape();
        let mut ins = vec![x, kernel];
        ins.extend(bias);
        let rg = self.rg(&ins);
        Ok(self.push(shape, out, rg, Op::Conv2d { x, kernel, bias, geom }))
    }

    /// Group normalization over `x[B×C×…]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var, TensorError> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() < 2 || groups == 0 || sx[1] % groups != 0 {
            return Err(TensorError::Shape { op: "group_norm", lhs: sx, rhs: vec![groups] });
        }
        let c = sx[1];
        for p in [gamma, beta] {
            if self.nodes[p.0].shape.as_slice() != [c] {
                return Err(TensorError::Shape { op: "group_norm affine", lhs: sx, rhs: self.nodes[p.0].shape.clone() });
            }
        }
        let spatial = numel(&sx[2..]);
        let group_len = (c / groups) * spatial;
        let xv = &self.nodes[x.0].value;
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let (xhat, inv_std) = normalize_rows(xv, group_len, eps);
        let mut out = Vec::with_capacity(xhat.len());
        for (j, plane) in xhat.chunks(spatial.max(1)).enumerate() {
            let (gc, bc) = (gv[j % c], bv[j % c]);
            out.extend(plane.iter().map(|&h| h * gc + bc));
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(sx, out, rg, Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std }))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, TensorError> {
        let sx = self.nodes[x.0].shape.clone();
        let d = *sx.last().ok_or(TensorError::Contract("layer_norm on a scalar"))?;
        for p in [gamma, beta] {
            if self.nodes[p.0].shape.as_slice() != [d] {
                return Err(TensorError::Shape { op: "layer_norm affine", lhs: sx, rhs: self.nodes[p.0].shape.clone() });
            }
        }
        let (xhat, inv_std) = normalize_rows(&self.nodes[x.0].value, d, eps);
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let out = xhat.iter().enumerate().map(|(i, &h)| h * gv[i % d] + bv[i % d]).collect();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(sx, out, rg, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// `x[B×C×…] + e[B×C]`, broadcasting `e` over the trailing dimensions.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var, TensorError> {
        let (sx, se) = (&self.nodes[x.0].shape, &self.nodes[e.0].shape);
        if sx.len() < 2 || se.as_slice() != &sx[..2] {
            return Err(TensorError::Shape { op: "add_channel", lhs: sx.clone(), rhs: se.clone() });
        }
        let spatial = numel(&sx[2..]);
        let ev = &self.nodes[e.0].value;
        let out = self.nodes[x.0].value.iter().enumerate().map(|(i, &v)| v + ev[i / spatial]).collect();
        let shape = sx.clone();
        let rg = self.rg(&[x, e]);
        Ok(self.push(shape, out, rg, Op::AddChannel(x, e)))
    }

    /// Concatenation along dimension 1. All parts share the batch size and
    /// every dimension after the first two.
    pub fn concat1(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Contract("concat of nothing"))?;
        let s0 = self.nodes[first.0].shape.clone();
        if s0.len() < 2 {
            return Err(TensorError::Shape { op: "concat1", lhs: s0, rhs: vec![] });
        }
        let mut channels = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(TensorError::Shape { op: "concat1", lhs: s0, rhs: s.clone() });
            }
            channels += s[1];
        }
        let batch = s0[0];
        let tail = numel(&s0[2..]);
        let mut out = Vec::with_capacity(batch * channels * tail);
        for b in 0..batch {
            for p in parts {
                let n = &self.nodes[p.0];
                let w = n.shape[1] * tail;
                out.extend_from_slice(&n.value[b * w..(b + 1) * w]);
            }
        }
        let mut shape = s0;
        shape[1] = channels;
        let rg = self.rg(parts);
        Ok(self.push(shape, out, rg, Op::Concat1(parts.to_vec())))
    }

    /// Nearest-neighbour 2× upsampling of `x[B×C×H×W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 4 {
            return Err(TensorError::Shape { op: "upsample2x", lhs: sx, rhs: vec![] });
        }
        let (h, w) = (sx[2], sx[3]);
        let xv = &self.nodes[x.0].value;
        let planes = sx[0] * sx[1];
        let mut out = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..2 * h {
                let row = &src[(oy / 2) * w..(oy / 2 + 1) * w];
                for ox in 0..2 * w {
                    out.push(row[ox / 2]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![sx[0], sx[1], 2 * h, 2 * w], out, rg, Op::Upsample2x(x)))
    }

    /// Row lookup `table[ids[i]]` producing `[ids.len() × D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let st = &self.nodes[table.0].shape;
        if st.len() != 2 {
            return Err(TensorError::Shape { op: "gather_rows", lhs: st.clone(), rhs: vec![] });
        }
        let (rows, d) = (st[0], st[1]);
        if ids.iter().any(|&i| i >= rows) {
            return Err(TensorError::Contract("gather_rows index out of range"));
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(vec![ids.len(), d], out, rg, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n = &self.nodes[a.0];
        if numel(shape) != n.value.len() {
            return Err(TensorError::Shape { op: "reshape", lhs: n.shape.clone(), rhs: shape.to_vec() });
        }
        let (value, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let s = T::of(sum64(n.value.iter().copied()));
        let rg = n.requires_grad;
        self.push(vec![], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let s = T::of(sum64(n.value.iter().copied()) / n.value.len().max(1) as f64);
        let rg = n.requires_grad;
        self.push(vec![], vec![s], rg, Op::Mean(a))
    }

    /// Mean over all elements of `(a − b)²`.
    pub fn mse_reduce(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(TensorError::Shape { op: "mse_reduce", lhs: na.shape.clone(), rhs: nb.shape.clone() });
        }
        let total: f64 = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(x, y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        let v = T::of(total / na.value.len().max(1) as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![], vec![v], rg, Op::MseReduce(a, b)))
    }

    /// Mean over all elements of `|a − b|`.
    pub fn mae_reduce(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(TensorError::Shape { op: "mae_reduce", lhs: na.shape.clone(), rhs: nb.shape.clone() });
        }
        let total: f64 = na.value.iter().zip(&nb.value).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum();
        let v = T::of(total / na.value.len().max(1) as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![], vec![v], rg, Op::MaeReduce(a, b)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let ln = self.nodes.get(loss.0).ok_or(TensorError::Contract("loss is not on this tape"))?;
        if ln.value.len() != 1 {
            return Err(TensorError::Contract("backward requires a scalar loss"));
        }
        let mut slots: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !ln.requires_grad {
            return Ok(Gradients { slots });
        }
        slots[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.backprop_node(node, &g, &mut slots);
        }
        Ok(Gradients { slots })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], slots: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_buf(nodes, slots, $v) $body
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(s, v)| *s = *s + *v);
                });
                with_grad!(*b, |gb| {
                    let inner = gb.len();
                    for (i, v) in g.iter().enumerate() {
                        gb[i % inner] = gb[i % inner] + sign * *v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let inner = bv.len();
                with_grad!(*a, |ga| {
                    for (i, v) in g.iter().enumerate() {
                        ga[i] = ga[i] + *v * bv[i % inner];
                    }
                });
                with_grad!(*b, |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % inner] = gb[i % inner] + *v * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d = *d + *v * *s);
                });
            }
            Op::ScaleRows(a, coef) => {
                let stride = g.len() / coef.len().max(1);
                with_grad!(*a, |ga| {
                    for (i, v) in g.iter().enumerate() {
                        ga[i] = ga[i] + *v * coef[i / stride];
                    }
                });
            }
            Op::Silu(a) => {
                let av = &nodes[a.0].value;
                with_grad!(*a, |ga| {
                    for (i, v) in g.iter().enumerate() {
                        let x = av[i];
                        let s = sigmoid(x);
                        ga[i] = ga[i] + *v * s * (T::one() + x * (T::one() - s));
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                with_grad!(*a, |ga| {
                    matmul_nt_into(m, n, k, g, bv, ga, true);
                });
                with_grad!(*b, |gb| {
                    matmul_tn_into(k, m, n, av, g, gb, true);
                });
            }
            Op::Conv2d { x, kernel, bias, geom } => {
                let xv = &nodes[x.0].value;
                let kv = &nodes[kernel.0].value;
                let need_x = nodes[x.0].requires_grad;
                let need_k = nodes[kernel.0].requires_grad;
                if need_x || need_k {
                    let mut dx = if need_x { Some(vec![T::zero(); xv.len()]) } else { None };
                    let mut dk = if need_k { Some(vec![T::zero(); kv.len()]) } else { None };
                    conv::backward(geom, xv, kv, g, dx.as_deref_mut(), dk.as_deref_mut());
                    if let Some(dx) = dx {
                        with_grad!(*x, |gx| {
                            gx.iter_mut().zip(&dx).for_each(|(s, v)| *s = *s + *v);
                        });
                    }
                    if let Some(dk) = dk {
                        with_grad!(*kernel, |gk| {
                            gk.iter_mut().zip(&dk).for_each(|(s, v)| *s = *s + *v);
                        });
                    }
                }
                if let Some(b) = bias {
                    let plane = geom.out_plane();
                    let oc = geom.out_channels;
                    with_grad!(*b, |gb| {
                        for (i, chunk) in g.chunks(plane).enumerate() {
                            let s = T::of(sum64(chunk.iter().copied()));
                            gb[i % oc] = gb[i % oc] + s;
                        }
                    });
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let shape = &node.shape;
                let c = shape[1];
                let spatial = numel(&shape[2..]);
                let group_len = (c / groups) * spatial;
                let gv = &nodes[gamma.0].value;
                let spatial = spatial.max(1);
                with_grad!(*gamma, |gg| {
                    for (j, (gp, hp)) in g.chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
                        let acc = gp.iter().zip(hp).fold(T::zero(), |a, (v, h)| a + *v * *h);
                        gg[j % c] = gg[j % c] + acc;
                    }
                });
                with_grad!(*beta, |gbt| {
                    for (j, gp) in g.chunks(spatial).enumerate() {
                        gbt[j % c] = gbt[j % c] + gp.iter().fold(T::zero(), |a, v| a + *v);
                    }
                });
                with_grad!(*x, |gx| {
                    let mut dxhat = Vec::with_capacity(g.len());
                    for (j, gp) in g.chunks(spatial).enumerate() {
                        let gc = gv[j % c];
                        dxhat.extend(gp.iter().map(|v| *v * gc));
                    }
                    normalize_backward(&dxhat, xhat, inv_std, group_len, gx);
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *node.shape.last().expect("non-scalar");
                let gv = &nodes[gamma.0].value;
                with_grad!(*gamma, |gg| {
                    for (i, v) in g.iter().enumerate() {
                        gg[i % d] = gg[i % d] + *v * xhat[i];
                    }
                });
                with_grad!(*beta, |gbt| {
                    for (i, v) in g.iter().enumerate() {
                        gbt[i % d] = gbt[i % d] + *v;
                    }
                });
                with_grad!(*x, |gx| {
                    let dxhat: Vec<T> = g.iter().enumerate().map(|(i, v)| *v * gv[i % d]).collect();
                    normalize_backward(&dxhat, xhat, inv_std, d, gx);
                });
            }
            Op::AddChannel(x, e) => {
                let spatial = numel(&node.shape[2..]);
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(s, v)| *s = *s + *v);
                });
                with_grad!(*e, |ge| {
                    for (j, chunk) in g.chunks(spatial).enumerate() {
                        ge[j] = ge[j] + T::of(sum64(chunk.iter().copied()));
                    }
                });
            }
            Op::Concat1(parts) => {
                let batch = node.shape[0];
                let tail = numel(&node.shape[2..]);
                let row = node.shape[1] * tail;
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1] * tail;
                    with_grad!(*p, |gp| {
                        for b in 0..batch {
                            let src = &g[b * row + offset..b * row + offset + w];
                            for (d, v) in gp[b * w..(b + 1) * w].iter_mut().zip(src) {
                                *d = *d + *v;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Upsample2x(x) => {
                let sx = &nodes[x.0].shape;
                let (h, w) = (sx[2], sx[3]);
                with_grad!(*x, |gx| {
                    for p in 0..sx[0] * sx[1] {
                        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut gx[p * h * w..(p + 1) * h * w];
                        for oy in 0..2 * h {
                            for ox in 0..2 * w {
                                let d = &mut dst[(oy / 2) * w + ox / 2];
                                *d = *d + src[oy * 2 * w + ox];
                            }
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].shape[1];
                with_grad!(*table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] = gt[i * d + j] + g[r * d + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(s, v)| *s = *s + *v);
                });
            }
            Op::Sum(a) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().for_each(|s| *s = *s + g[0]);
                });
            }
            Op::Mean(a) => {
                with_grad!(*a, |ga| {
                    let scale = g[0] / T::of(ga.len().max(1) as f64);
                    ga.iter_mut().for_each(|s| *s = *s + scale);
                });
            }
            Op::MseReduce(a, b) | Op::MaeReduce(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let n = T::of(av.len().max(1) as f64);
                let squared = matches!(node.op, Op::MseReduce(..));
                let local = |i: usize| -> T {
                    let d = av[i] - bv[i];
                    if squared {
                        T::of(2.0) * d * g[0] / n
                    } else if d > T::zero() {
                        g[0] / n
                    } else if d < T::zero() {
                        -g[0] / n
                    } else {
                        T::zero()
                    }
                };
                with_grad!(*a, |ga| {
                    for (i, s) in ga.iter_mut().enumerate() {
                        *s = *s + local(i);
                    }
                });
                with_grad!(*b, |gb| {
                    for (i, s) in gb.iter_mut().enumerate() {
                        *s = *s - local(i);
                    }
                });
            }
        }
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` when `v` does not
/// require gradients.
fn grad_buf<'s, T: Float>(nodes: &[Node<T>], slots: &'s mut [Option<Vec<T>>], v: Var) -> Option<&'s mut Vec<T>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(slots[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
}

/// Normalizes consecutive rows of length `len`; returns (x̂, 1/σ per row).
fn normalize_rows<T: Float>(x: &[T], len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.len() / len.max(1));
    for row in x.chunks(len) {
        let mean = sum64(row.iter().copied()) / len as f64;
        let var = row
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / len as f64;
        let inv = 1.0 / (var + eps.as_f64()).sqrt();
        inv_std.push(T::of(inv));
        xhat.extend(row.iter().map(|v| T::of((v.as_f64() - mean) * inv)));
    }
    (xhat, inv_std)
}

fn normalize_backward<T: Float>(dxhat: &[T], xhat: &[T], inv_std: &[T], len: usize, gx: &mut [T]) {
    for (r, ((dh, xh), gx)) in dxhat.chunks(len).zip(xhat.chunks(len)).zip(gx.chunks_mut(len)).enumerate() {
        let mean_dh = sum64(dh.iter().copied()) / len as f64;
        let mean_dh_xh = dh.iter().zip(xh).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / len as f64;
        let inv = inv_std[r].as_f64();
        for i in 0..len {
            let v = inv * (dh[i].as_f64() - mean_dh - xh[i].as_f64() * mean_dh_xh);
            gx[i] = gx[i] + T::of(v);
        }
    }
}
