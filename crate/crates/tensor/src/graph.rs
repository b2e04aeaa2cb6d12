//! Operation record for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order and may only refer to earlier
//! nodes, so the record is a DAG by construction. `backward` walks it once
//! in reverse, accumulating gradients additively.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{ArrayView2, Axis};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::store::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Silu,
    Tanh,
    Sigmoid,
    Softplus,
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
        }
    }

    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            // max(x, 0) + ln(1 + e^{-|x|}) is smooth and never overflows.
            Activation::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
        }
    }

    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

/// A fused operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, each the length of that input.
    fn backward(&self, inputs: &[&[T]], output: &[T], grad_output: &[T]) -> Result<Vec<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Param,
    Activation(Var, Activation),
    Exp(Var),
    Abs(Var),
    Scale(Var, T),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    DepthwiseConv2d { x: Var, k: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    GlobalAvgPool(Var),
    ChannelConv1d { x: Var, k: Var },
    ScaleChannels { x: Var, w: Var },
    Gather { x: Var, index: Arc<[usize]> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Real> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::Activation(x, _)
            | Op::Exp(x)
            | Op::Abs(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::GlobalAvgPool(x)
            | Op::Gather { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::DepthwiseConv2d { x, k } | Op::ChannelConv1d { x, k } => vec![*x, *k],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ScaleChannels { x, w } => vec![*x, *w],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::gradients`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    track_grad: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { op, index, value: Real::to_f64(data[index]) }),
        None => Ok(()),
    }
}

fn view2<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("caller checked extents")
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), track_grad: true }
    }

    /// A graph whose parameters are recorded as constants, so nothing
    /// requires a gradient and custom ops may skip their saved state.
    pub fn inference() -> Self {
        Graph { track_grad: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => self.track_grad,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { shape, data, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.data.clone()).expect("node extents are consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Records a constant or, when `t.requires_grad`, a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        let shape = t.shape().to_vec();
        let v = self.push(shape, t.into_data(), Op::Leaf);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// Brings a named parameter into the record. Repeated calls return the
    /// same node so every use shares one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let n = self.node(x);
        check_finite(kind.name(), &n.data)?;
        let data = n.data.iter().map(|&v| kind.apply(v)).collect();
        let shape = n.shape.clone();
        Ok(self.push(shape, data, Op::Activation(x, kind)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let data = n.data.iter().map(|v| v.exp()).collect();
        let shape = n.shape.clone();
        self.push(shape, data, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let data = n.data.iter().map(|v| v.abs()).collect();
        let shape = n.shape.clone();
        self.push(shape, data, Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let c = T::from_f64(factor);
        let n = self.node(x);
        let data = n.data.iter().map(|&v| v * c).collect();
        let shape = n.shape.clone();
        self.push(shape, data, Op::Scale(x, c))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, record: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, record))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(vec![], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x);
        let s = d.iter().fold(T::zero(), |acc, &v| acc + v) / T::from_f64(d.len().max(1) as f64);
        self.push(vec![], vec![s], Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(TensorError::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x))));
        }
        let data = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x)))
    }

    /// `out[..., j] = Σ_i x[..., i] · w[i, j] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let cin = *xs.last().ok_or_else(|| TensorError::shape("linear", "input is a scalar"))?;
        if ws.len() != 2 || ws[0] != cin {
            return Err(TensorError::shape("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let cout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::shape("linear", format!("bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / cin.max(1);
        let out = view2(self.value(x), rows, cin).dot(&view2(self.value(w), cin, cout));
        let mut data = out.into_raw_vec_and_offset().0;
        if let Some(b) = b {
            let bias = self.value(b);
            for row in data.chunks_mut(cout.max(1)) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        Ok(self.push(shape, data, Op::Linear { x, w, b }))
    }

    /// Per-channel 2D convolution of `x[C,H,W]` with `k[C,kh,kw]`, zero
    /// padding, spatial extent preserved.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 3 || xs[0] != ks[0] {
            return Err(TensorError::shape("depthwise_conv2d", format!("input {xs:?} vs kernel {ks:?}")));
        }
        let (kh, kw) = (ks[1], ks[2]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::invalid("depthwise_conv2d", format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        let xd = self.value(x);
        let kd = self.value(k);
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            let xc = &xd[ch * h * w..(ch + 1) * h * w];
            let kc = &kd[ch * kh * kw..(ch + 1) * kh * kw];
            let oc = &mut out[ch * h * w..(ch + 1) * h * w];
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = T::zero();
                    for di in 0..kh as isize {
                        let ii = i + di - ph;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for dj in 0..kw as isize {
                            let jj = j + dj - pw;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            acc = acc + kc[(di * kw as isize + dj) as usize] * xc[(ii * w as isize + jj) as usize];
                        }
                    }
                    oc[(i * w as isize + j) as usize] = acc;
                }
            }
        }
        Ok(self.push(xs, out, Op::DepthwiseConv2d { x, k }))
    }

    /// Normalizes over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::invalid("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| TensorError::shape("layer_norm", "input is a scalar"))?;
        if c == 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("input {xs:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::from_f64(eps);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(c) {
            let (mean, rstd) = row_stats(row, eps);
            for ((&v, &gv), &bv) in row.iter().zip(g).zip(b) {
                out.push((v - mean) * rstd * gv + bv);
            }
        }
        Ok(self.push(xs, out, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// `x[C,H,W]` → `[C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 || xs[2] == 0 {
            return Err(TensorError::shape("global_avg_pool", format!("expected [C,H,W] with H,W ≥ 1, got {xs:?}")));
        }
        let hw = xs[1] * xs[2];
        let inv = T::from_f64(1.0 / hw as f64);
        let data = self.value(x).chunks(hw).map(|c| c.iter().fold(T::zero(), |a, &v| a + v) * inv).collect();
        Ok(self.push(vec![xs[0]], data, Op::GlobalAvgPool(x)))
    }

    /// 1D convolution along a `[C]` vector with an odd kernel and zero padding.
    pub fn channel_conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 1 || ks.len() != 1 {
            return Err(TensorError::shape("channel_conv1d", format!("input {xs:?} vs kernel {ks:?}")));
        }
        let (c, kl) = (xs[0], ks[0]);
        if kl % 2 == 0 {
            return Err(TensorError::invalid("channel_conv1d", format!("kernel length must be odd, got {kl}")));
        }
        if kl > 2 * c - 1 {
            return Err(TensorError::invalid("channel_conv1d", format!("kernel length {kl} exceeds 2C-1 for C={c}")));
        }
        let pad = (kl / 2) as isize;
        let (xd, kd) = (self.value(x), self.value(k));
        let data = (0..c as isize)
            .map(|i| {
                (0..kl as isize).fold(T::zero(), |acc, j| {
                    let src = i + j - pad;
                    if src < 0 || src >= c as isize {
                        acc
                    } else {
                        acc + kd[j as usize] * xd[src as usize]
                    }
                })
            })
            .collect();
        Ok(self.push(xs, data, Op::ChannelConv1d { x, k }))
    }

    /// `out[c, ...] = w[c] · x[c, ...]`.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.first().ok_or_else(|| TensorError::shape("scale_channels", "input is a scalar"))?;
        if self.shape(w) != [c] {
            return Err(TensorError::shape("scale_channels", format!("input {xs:?} vs weights {:?}", self.shape(w))));
        }
        let per = self.value(x).len() / c.max(1);
        let wd = self.value(w);
        let data = self
            .value(x)
            .chunks(per.max(1))
            .zip(wd)
            .flat_map(|(chunk, &wv)| chunk.iter().map(move |&v| v * wv))
            .collect();
        Ok(self.push(xs, data, Op::ScaleChannels { x, w }))
    }

    /// `out[i] = x[index[i]]`, with `usize::MAX` selecting zero. Covers
    /// permutations, padding and cropping.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(TensorError::shape("gather", format!("{} indices for output shape {shape:?}", index.len())));
        }
        let xd = self.value(x);
        let mut data = Vec::with_capacity(numel);
        for &i in index.iter() {
            if i == usize::MAX {
                data.push(T::zero());
            } else if i < xd.len() {
                data.push(xd[i]);
            } else {
                return Err(TensorError::shape("gather", format!("index {i} out of range for {} values", xd.len())));
            }
        }
        Ok(self.push(shape.to_vec(), data, Op::Gather { x, index }))
    }

    /// Records a fused operation whose forward value the caller has computed.
    pub fn custom(&mut self, inputs: &[Var], shape: &[usize], data: Vec<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::shape(op.name(), format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Custom { inputs: inputs.to_vec(), op }))
    }

    /// Reverse pass from a scalar `loss`, returning per-node gradients.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let ln = self.node(loss);
        if ln.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for p in node.op.parents() {
                if p.0 >= i {
                    return Err(TensorError::Cycle { node: i, parent: p.0 });
                }
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass from `loss`, adding gradients into `store`. Parameters of
    /// the store that the loss does not reach end up with a zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for name in store.names() {
            store.get_mut(&name).expect("listed name").ensure_grad();
        }
        for (name, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store
                    .get_mut(name)
                    .ok_or_else(|| TensorError::UnknownParam(name.clone()))?
                    .accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut send = |v: Var, contribution: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contribution) {
                        *a = *a + c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Activation(x, kind) => {
                let xd = self.value(*x);
                send(*x, xd.iter().zip(g).map(|(&v, &gv)| gv * kind.derivative(v)).collect());
            }
            Op::Exp(x) => send(*x, node.data.iter().zip(g).map(|(&o, &gv)| o * gv).collect()),
            Op::Abs(x) => {
                let xd = self.value(*x);
                send(
                    *x,
                    xd.iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else if v < T::zero() { -gv } else { T::zero() })
                        .collect(),
                );
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|&gv| gv * *c).collect()),
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(bd).map(|(&gv, &v)| gv * v).collect());
                send(*b, g.iter().zip(ad).map(|(&gv, &v)| gv * v).collect());
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / T::from_f64(n.max(1) as f64); n]);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (cin, cout) = (ws[0], ws[1]);
                let rows = self.value(*x).len() / cin.max(1);
                let gv = view2(g, rows, cout);
                if self.requires_grad(*x) {
                    let gx = gv.dot(&view2(self.value(*w), cin, cout).t());
                    send(*x, gx.as_standard_layout().iter().copied().collect());
                }
                if self.requires_grad(*w) {
                    let gw = view2(self.value(*x), rows, cin).t().dot(&gv);
                    send(*w, gw.as_standard_layout().iter().copied().collect());
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        send(*b, gv.sum_axis(Axis(0)).to_vec());
                    }
                }
            }
            Op::DepthwiseConv2d { x, k } => {
                let xs = self.shape(*x);
                let ks = self.shape(*k);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (kh, kw) = (ks[1], ks[2]);
                let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
                let (xd, kd) = (self.value(*x), self.value(*k));
                let mut gx = vec![T::zero(); xd.len()];
                let mut gk = vec![T::zero(); kd.len()];
                for ch in 0..c {
                    let base = ch * h * w;
                    let kbase = ch * kh * kw;
                    for i in 0..h as isize {
                        for j in 0..w as isize {
                            let go = g[base + (i * w as isize + j) as usize];
                            if go == T::zero() {
                                continue;
                            }
                            for di in 0..kh as isize {
                                let ii = i + di - ph;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for dj in 0..kw as isize {
                                    let jj = j + dj - pw;
                                    if jj < 0 || jj >= w as isize {
                                        continue;
                                    }
                                    let xi = base + (ii * w as isize + jj) as usize;
                                    let ki = kbase + (di * kw as isize + dj) as usize;
                                    gx[xi] = gx[xi] + go * kd[ki];
                                    gk[ki] = gk[ki] + go * xd[xi];
                                }
                            }
                        }
                    }
                }
                send(*x, gx);
                send(*k, gk);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let c = *self.shape(*x).last().unwrap();
                let gd = self.value(*gamma);
                let mut gx = Vec::with_capacity(self.value(*x).len());
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let inv_c = T::from_f64(1.0 / c as f64);
                for (row, grow) in self.value(*x).chunks(c).zip(g.chunks(c)) {
                    let (mean, rstd) = row_stats(row, *eps);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = grow[j] * gd[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        ggamma[j] = ggamma[j] + grow[j] * xhat;
                        gbeta[j] = gbeta[j] + grow[j];
                    }
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = grow[j] * gd[j];
                        gx.push(rstd * (dxhat - sum_dxhat * inv_c - xhat * sum_dxhat_xhat * inv_c));
                    }
                }
                send(*x, gx);
                send(*gamma, ggamma);
                send(*beta, gbeta);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let hw = xs[1] * xs[2];
                let inv = T::from_f64(1.0 / hw as f64);
                send(*x, g.iter().flat_map(|&gv| std::iter::repeat(gv * inv).take(hw)).collect());
            }
            Op::ChannelConv1d { x, k } => {
                let (xd, kd) = (self.value(*x), self.value(*k));
                let (c, kl) = (xd.len(), kd.len());
                let pad = (kl / 2) as isize;
                let mut gx = vec![T::zero(); c];
                let mut gk = vec![T::zero(); kl];
                for i in 0..c as isize {
                    for j in 0..kl as isize {
                        let src = i + j - pad;
                        if src < 0 || src >= c as isize {
                            continue;
                        }
                        gx[src as usize] = gx[src as usize] + g[i as usize] * kd[j as usize];
                        gk[j as usize] = gk[j as usize] + g[i as usize] * xd[src as usize];
                    }
                }
                send(*x, gx);
                send(*k, gk);
            }
            Op::ScaleChannels { x, w } => {
                let (xd, wd) = (self.value(*x), self.value(*w));
                let per = xd.len() / wd.len().max(1);
                let mut gx = Vec::with_capacity(xd.len());
                let mut gw = vec![T::zero(); wd.len()];
                for (ch, (xc, gc)) in xd.chunks(per.max(1)).zip(g.chunks(per.max(1))).enumerate() {
                    for (&xv, &gv) in xc.iter().zip(gc) {
                        gx.push(gv * wd[ch]);
                        gw[ch] = gw[ch] + gv * xv;
                    }
                }
                send(*x, gx);
                send(*w, gw);
            }
            Op::Gather { x, index } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (&i, &gv) in index.iter().zip(g) {
                    if i != usize::MAX {
                        gx[i] = gx[i] + gv;
                    }
                }
                send(*x, gx);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&[T]> = inputs.iter().map(|&v| self.value(v)).collect();
                let gin = op.backward(&values, &node.data, g)?;
                if gin.len() != inputs.len() {
                    return Err(TensorError::invalid(op.name(), "backward returned the wrong number of gradients"));
                }
                for (&v, gi) in inputs.iter().zip(gin) {
                    if gi.len() != self.value(v).len() {
                        return Err(TensorError::shape(op.name(), "backward gradient length mismatch"));
                    }
                    send(v, gi);
                }
            }
        }
        Ok(())
    }
}

fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, T::one() / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn activations_at_reference_points() {
        assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert!(close(Activation::Softplus.apply(0.0f64), std::f64::consts::LN_2, 1e-15));
        // scalar oracle: 1 / (1 + e^-1)
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert!(close(Activation::Silu.apply(1.0f64), oracle, 1e-15));
        assert!(close(oracle, 0.731059, 1e-6));
    }

    #[test]
    fn activation_rejects_non_finite_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[3], vec![0.0, f64::NAN, 1.0]).unwrap();
        match g.activation(x, Activation::Tanh) {
            Err(TensorError::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn linear_hand_product() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[2], vec![1.0, 2.0]).unwrap();
        let w = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let b = g.constant(&[2], vec![1.0, 1.0]).unwrap();
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &[2.0, 5.0]);
        let bad = g.constant(&[3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(g.linear(x, bad, None), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn depthwise_conv_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[1, 1, 3], vec![0.0, 3.0, 0.0]).unwrap();
        let third = 1.0 / 3.0;
        let k = g.constant(&[1, 1, 3], vec![third; 3]).unwrap();
        let y = g.depthwise_conv2d(x, k).unwrap();
        for (got, want) in g.value(y).iter().zip([1.0, 1.0, 1.0]) {
            assert!(close(*got, want, 1e-12));
        }
        let even = g.constant(&[1, 1, 2], vec![1.0; 2]).unwrap();
        assert!(g.depthwise_conv2d(x, even).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let gamma = g.constant(&[2], vec![1.0, 1.0]).unwrap();
        let beta = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        let x = g.constant(&[2], vec![1.0, 3.0]).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert!(close(g.value(y)[0], -1.0, 1e-9) && close(g.value(y)[1], 1.0, 1e-9));
        let c = g.constant(&[2], vec![4.0, 4.0]).unwrap();
        let z = g.layer_norm(c, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(z), &[0.0, 0.0]);
    }

    #[test]
    fn global_average_pool_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p), &[2.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq);
        let grads = g.gradients(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
        assert!(matches!(g.gradients(p), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn gather_pads_with_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[2], vec![5.0, 7.0]).unwrap().with_grad());
        let idx: Arc<[usize]> = vec![1, usize::MAX, 0, 1].into();
        let y = g.gather(x, idx, &[4]).unwrap();
        assert_eq!(g.value(y), &[7.0, 0.0, 5.0, 7.0]);
        let loss = g.sum(y);
        assert_eq!(g.gradients(loss).unwrap().get(x).unwrap(), &[1.0, 2.0]);
    }
}
