//! Selective state-space scans.
//!
//! The continuous system `h' = A h + B x, y = C h + D x` with diagonal `A` is
//! discretized per step with `Ā = exp(ΔA)` and `B̄ = Δ B`. In the selective
//! form `Δ`, `B` and `C` are linear functions of the current input, so the
//! recurrence is time-varying; the time-invariant special case is also
//! available as an explicit causal convolution.
//!
//! Layouts: sequences are `[L, D]` (steps by channels), `A` is `[D, N]`,
//! per-step `B`/`C` are `[L, N]` and shared across channels.


use icemamba_tensor::{Activation, CustomOp, Graph, ParamStore, Real, Tensor, TensorError, Var};
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::init::{linear_params, Initializer};
use crate::layout;

/// Discretizes a diagonal system with step `delta`.
///
/// Returns `(Ā, B̄)` with `Ā = exp(delta·a)` and `B̄ = delta·b`.
pub fn zoh_discretize<T: Real>(a: &[T], b: &[T], delta: T) -> Result<(Vec<T>, Vec<T>)> {
    if !(delta >= T::zero()) {
        return Err(Error::invalid("step size", format!("delta must be non-negative, got {delta}")));
    }
    if a.len() != b.len() {
        return Err(Error::shape("zoh_discretize", format!("A has {} entries, B has {}", a.len(), b.len())));
    }
    let a_bar = a.iter().map(|&ai| (delta * ai).exp()).collect();
    let b_bar = b.iter().map(|&bi| delta * bi).collect();
    Ok((a_bar, b_bar))
}

/// Traversal order of a 2D grid flattened into a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanOrder {
    RowMajor,
    ColumnMajor,
    RowMajorReversed,
    ColumnMajorReversed,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 4] =
        [ScanOrder::RowMajor, ScanOrder::ColumnMajor, ScanOrder::RowMajorReversed, ScanOrder::ColumnMajorReversed];

    /// Grid position (`row * w + col`) visited at each step.
    pub fn positions(self, h: usize, w: usize) -> Vec<usize> {
        let l = h * w;
        let col_major = |k: usize| (k % h) * w + k / h;
        match self {
            ScanOrder::RowMajor => (0..l).collect(),
            ScanOrder::ColumnMajor => (0..l).map(col_major).collect(),
            ScanOrder::RowMajorReversed => (0..l).rev().collect(),
            ScanOrder::ColumnMajorReversed => (0..l).rev().map(col_major).collect(),
        }
    }
}

/// A flattened feature map: `x` is `[L, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSequence<T> {
    pub x: Array2<T>,
    pub order: ScanOrder,
}

impl<T: Real> ScanSequence<T> {
    pub fn new(x: Array2<T>, order: ScanOrder) -> Self {
        ScanSequence { x, order }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.x.ncols()
    }
}

/// Flattens `[C, H, W]` into the four traversal orders.
pub fn cross_scan<T: Real>(feature: &Array3<T>) -> [ScanSequence<T>; 4] {
    let (c, h, w) = feature.dim();
    ScanOrder::ALL.map(|order| {
        let pos = order.positions(h, w);
        let mut x = Array2::zeros((h * w, c));
        for (k, &p) in pos.iter().enumerate() {
            let (i, j) = (p / w, p % w);
            for ch in 0..c {
                x[[k, ch]] = feature[[ch, i, j]];
            }
        }
        ScanSequence::new(x, order)
    })
}

/// Scatters each sequence back onto the grid and sums them.
pub fn cross_merge<T: Real>(seqs: &[ScanSequence<T>], h: usize, w: usize) -> Result<Array3<T>> {
    let c = seqs.first().map_or(0, |s| s.channels());
    let mut out = Array3::zeros((c, h, w));
    for seq in seqs {
        if seq.len() != h * w || seq.channels() != c {
            return Err(Error::shape(
                "cross_merge",
                format!("sequence [{}, {}] for a {c}x{h}x{w} grid", seq.len(), seq.channels()),
            ));
        }
        for (k, &p) in seq.order.positions(h, w).iter().enumerate() {
            let (i, j) = (p / w, p % w);
            for ch in 0..c {
                out[[ch, i, j]] += seq.x[[k, ch]];
            }
        }
    }
    Ok(out)
}

/// Per-step quantities of a time-varying scan.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParams<T> {
    /// `[L, D]`, non-negative.
    pub delta: Array2<T>,
    /// `[L, N]`
    pub b: Array2<T>,
    /// `[L, N]`
    pub c: Array2<T>,
}

impl<T: Real> StepParams<T> {
    /// Repeats fixed per-channel steps and shared `B`, `C` over `len` steps.
    pub fn constant(len: usize, delta: ArrayView1<T>, b: ArrayView1<T>, c: ArrayView1<T>) -> Self {
        StepParams {
            delta: delta.broadcast((len, delta.len())).expect("row broadcast").to_owned(),
            b: b.broadcast((len, b.len())).expect("row broadcast").to_owned(),
            c: c.broadcast((len, c.len())).expect("row broadcast").to_owned(),
        }
    }
}

/// Learned parameters of one selective scan direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    /// `[D, N]`, strictly negative.
    pub a: Array2<T>,
    /// `[D]`
    pub d_skip: Array1<T>,
    /// `[D, D]`
    pub delta_proj: Array2<T>,
    /// `[D]`
    pub delta_bias: Array1<T>,
    /// `[D, N]`
    pub b_proj: Array2<T>,
    /// `[D, N]`
    pub c_proj: Array2<T>,
}

impl<T: Real> SsmParams<T> {
    pub fn channels(&self) -> usize {
        self.a.nrows()
    }

    pub fn state_size(&self) -> usize {
        self.a.ncols()
    }

    fn validate(&self) -> Result<()> {
        let (d, n) = self.a.dim();
        if n == 0 {
            return Err(Error::invalid("state size", "N must be at least 1"));
        }
        let ok = self.d_skip.len() == d
            && self.delta_proj.dim() == (d, d)
            && self.delta_bias.len() == d
            && self.b_proj.dim() == (d, n)
            && self.c_proj.dim() == (d, n);
        if !ok {
            return Err(Error::shape("ssm parameters", format!("inconsistent with A of shape [{d}, {n}]")));
        }
        if let Some(v) = self.a.iter().find(|v| !(**v < T::zero())) {
            return Err(Error::invalid("A", format!("entries must be strictly negative, found {v}")));
        }
        Ok(())
    }

    /// Input-dependent `Δ`, `B` and `C` for every step of `x` (`[L, D]`).
    pub fn project(&self, x: ArrayView2<T>) -> Result<StepParams<T>> {
        self.validate()?;
        if x.ncols() != self.channels() {
            return Err(Error::shape(
                "selective_scan",
                format!("input has {} channels, parameters expect {}", x.ncols(), self.channels()),
            ));
        }
        let mut delta = x.dot(&self.delta_proj);
        for mut row in delta.rows_mut() {
            for (v, &bias) in row.iter_mut().zip(&self.delta_bias) {
                *v = Activation::Softplus.apply(*v + bias);
            }
        }
        Ok(StepParams { delta, b: x.dot(&self.b_proj), c: x.dot(&self.c_proj) })
    }

    /// Reads one direction's parameters from a store (see [`Vssb`] naming).
    pub fn from_store(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let get = |name: &str| -> Result<&Tensor<T>> {
            store.get(&format!("{prefix}.{name}")).ok_or_else(|| TensorError::UnknownParam(format!("{prefix}.{name}")).into())
        };
        let mat = |t: &Tensor<T>| Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec()).expect("2-d");
        let vec = |t: &Tensor<T>| Array1::from(t.data().to_vec());
        Ok(SsmParams {
            a: mat(get("a_log")?).mapv(|v| -v.exp()),
            d_skip: vec(get("d_skip")?),
            delta_proj: mat(get("delta_proj.weight")?),
            delta_bias: vec(get("delta_proj.bias")?),
            b_proj: mat(get("b_proj")?),
            c_proj: mat(get("c_proj")?),
        })
    }
}

/// Runs the recurrence `h_k = exp(Δ_k A) h_{k-1} + Δ_k B_k x_k`,
/// `y_k = C_k·h_k + D x_k` from `h_0 = 0`.
pub fn scan_recurrence<T: Real>(
    x: ArrayView2<T>,
    a: ArrayView2<T>,
    steps: &StepParams<T>,
    d_skip: ArrayView1<T>,
) -> Result<Array2<T>> {
    let (l, d) = x.dim();
    let n = a.ncols();
    let ok = a.nrows() == d
        && steps.delta.dim() == (l, d)
        && steps.b.dim() == (l, n)
        && steps.c.dim() == (l, n)
        && d_skip.len() == d;
    if !ok {
        return Err(Error::shape("scan_recurrence", format!("input [{l}, {d}], A [{}, {n}]", a.nrows())));
    }
    if let Some(v) = steps.delta.iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::invalid("step size", format!("delta must be non-negative, got {v}")));
    }
    let owned = |v: ArrayView2<T>| v.as_standard_layout().into_owned().into_raw_vec_and_offset().0;
    let y = kernel::forward(&ScanDims { l, d, n }, &ScanInputs {
        x: &owned(x),
        delta: &owned(steps.delta.view()),
        a: &owned(a),
        b: &owned(steps.b.view()),
        c: &owned(steps.c.view()),
        d_skip: &d_skip.to_vec(),
    });
    Ok(Array2::from_shape_vec((l, d), y).expect("kernel output extent"))
}

/// Hidden states `[L, D, N]` of the recurrence, for inspection.
pub fn scan_states<T: Real>(x: ArrayView2<T>, a: ArrayView2<T>, steps: &StepParams<T>) -> Array3<T> {
    let (l, d) = x.dim();
    let n = a.ncols();
    let mut states = Array3::zeros((l, d, n));
    let mut h = Array2::<T>::zeros((d, n));
    for k in 0..l {
        for ch in 0..d {
            let dt = steps.delta[[k, ch]];
            for s in 0..n {
                h[[ch, s]] = (dt * a[[ch, s]]).exp() * h[[ch, s]] + dt * steps.b[[k, s]] * x[[k, ch]];
            }
        }
        states.index_axis_mut(Axis(0), k).assign(&h);
    }
    states
}

/// Input-dependent scan of one sequence.
pub fn selective_scan<T: Real>(seq: &ScanSequence<T>, params: &SsmParams<T>) -> Result<ScanSequence<T>> {
    let steps = params.project(seq.x.view())?;
    let y = scan_recurrence(seq.x.view(), params.a.view(), &steps, params.d_skip.view())?;
    Ok(ScanSequence::new(y, seq.order))
}

/// Fixed discretized parameters of a time-invariant system.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiParams<T> {
    /// `[D, N]`
    pub a_bar: Array2<T>,
    /// `[D, N]`
    pub b_bar: Array2<T>,
    /// `[N]`
    pub c: Array1<T>,
    /// `[D]`
    pub d_skip: Array1<T>,
}

impl<T: Real> LtiParams<T> {
    /// Discretizes continuous `a` (`[D, N]`) with per-channel `delta` and
    /// shared `b`, `c`.
    pub fn discretize(
        a: ArrayView2<T>,
        delta: ArrayView1<T>,
        b: ArrayView1<T>,
        c: ArrayView1<T>,
        d_skip: ArrayView1<T>,
    ) -> Result<Self> {
        let (d, n) = a.dim();
        if delta.len() != d || b.len() != n || c.len() != n || d_skip.len() != d {
            return Err(Error::shape("lti parameters", format!("A [{d}, {n}]")));
        }
        let mut a_bar = Array2::zeros((d, n));
        let mut b_bar = Array2::zeros((d, n));
        for ch in 0..d {
            let row: Vec<T> = a.row(ch).to_vec();
            let (ab, bb) = zoh_discretize(&row, &b.to_vec(), delta[ch])?;
            a_bar.row_mut(ch).assign(&Array1::from(ab));
            b_bar.row_mut(ch).assign(&Array1::from(bb));
        }
        Ok(LtiParams { a_bar, b_bar, c: c.to_owned(), d_skip: d_skip.to_owned() })
    }

    /// Convolution kernel `K[j, d] = Σ_n C_n Ā_{d,n}^j B̄_{d,n}` for `j < len`.
    pub fn kernel(&self, len: usize) -> Array2<T> {
        let (d, n) = self.a_bar.dim();
        let mut k = Array2::zeros((len, d));
        for ch in 0..d {
            for s in 0..n {
                let mut term = self.c[s] * self.b_bar[[ch, s]];
                for j in 0..len {
                    k[[j, ch]] += term;
                    term = term * self.a_bar[[ch, s]];
                }
            }
        }
        k
    }
}

impl<T: Real> TryFrom<&SsmParams<T>> for LtiParams<T> {
    type Error = Error;

    /// Only selective parameters whose projections are identically zero
    /// describe a time-invariant system.
    fn try_from(p: &SsmParams<T>) -> Result<Self> {
        p.validate()?;
        let zero = |m: &Array2<T>| m.iter().all(|v| *v == T::zero());
        if !(zero(&p.delta_proj) && zero(&p.b_proj) && zero(&p.c_proj)) {
            return Err(Error::invalid("lti parameters", "projections are input-dependent"));
        }
        let delta = p.delta_bias.mapv(|v| Activation::Softplus.apply(v));
        let zeros = Array1::zeros(p.state_size());
        LtiParams::discretize(p.a.view(), delta.view(), zeros.view(), zeros.view(), p.d_skip.view())
    }
}

/// Time-invariant scan as a causal convolution with [`LtiParams::kernel`].
pub fn lti_conv_scan<T: Real>(seq: &ScanSequence<T>, lti: &LtiParams<T>) -> Result<ScanSequence<T>> {
    let (l, d) = seq.x.dim();
    if lti.a_bar.nrows() != d || lti.d_skip.len() != d {
        return Err(Error::shape("lti_conv_scan", format!("input has {d} channels, parameters {}", lti.a_bar.nrows())));
    }
    let k = lti.kernel(l);
    let mut y = Array2::zeros((l, d));
    for t in 0..l {
        for ch in 0..d {
            let mut acc = lti.d_skip[ch] * seq.x[[t, ch]];
            for j in 0..=t {
                acc += k[[j, ch]] * seq.x[[t - j, ch]];
            }
            y[[t, ch]] = acc;
        }
    }
    Ok(ScanSequence::new(y, seq.order))
}

#[derive(Debug, Clone, Copy)]
struct ScanDims {
    l: usize,
    d: usize,
    n: usize,
}

struct ScanInputs<'a, T> {
    x: &'a [T],
    delta: &'a [T],
    a: &'a [T],
    b: &'a [T],
    c: &'a [T],
    d_skip: &'a [T],
}

mod kernel {
    use super::*;

    pub(super) fn forward<T: Real>(dims: &ScanDims, inp: &ScanInputs<'_, T>) -> Vec<T> {
        run(dims, inp, None)
    }

    /// Hidden states `[L + 1, D, N]` and decays `[L, D, N]` kept for the
    /// backward pass.
    pub(super) struct Trace<T> {
        pub states: Vec<T>,
        pub decay: Vec<T>,
    }

    pub(super) fn forward_traced<T: Real>(dims: &ScanDims, inp: &ScanInputs<'_, T>) -> (Vec<T>, Trace<T>) {
        let ScanDims { l, d, n } = *dims;
        let mut trace = Trace { states: vec![T::zero(); (l + 1) * d * n], decay: vec![T::zero(); l * d * n] };
        let y = run(dims, inp, Some(&mut trace));
        (y, trace)
    }

    fn run<T: Real>(dims: &ScanDims, inp: &ScanInputs<'_, T>, mut trace: Option<&mut Trace<T>>) -> Vec<T> {
        let ScanDims { l, d, n } = *dims;
        let mut h = vec![T::zero(); d * n];
        let mut y = vec![T::zero(); l * d];
        for k in 0..l {
            let bk = &inp.b[k * n..(k + 1) * n];
            let ck = &inp.c[k * n..(k + 1) * n];
            for ch in 0..d {
                let dt = inp.delta[k * d + ch];
                let xv = inp.x[k * d + ch];
                let hrow = &mut h[ch * n..(ch + 1) * n];
                let arow = &inp.a[ch * n..(ch + 1) * n];
                let mut acc = inp.d_skip[ch] * xv;
                for s in 0..n {
                    let da = (dt * arow[s]).exp();
                    hrow[s] = da * hrow[s] + dt * bk[s] * xv;
                    acc += ck[s] * hrow[s];
                    if let Some(t) = trace.as_deref_mut() {
                        t.decay[(k * d + ch) * n + s] = da;
                    }
                }
                y[k * d + ch] = acc;
            }
            if let Some(t) = trace.as_deref_mut() {
                t.states[(k + 1) * d * n..(k + 2) * d * n].copy_from_slice(&h);
            }
        }
        y
    }

    /// Vector-Jacobian product over a traced forward pass.
    pub(super) fn backward<T: Real>(dims: &ScanDims, inp: &ScanInputs<'_, T>, tr: &Trace<T>, gy: &[T]) -> [Vec<T>; 6] {
        let ScanDims { l, d, n } = *dims;
        let hs = &tr.states;
        let mut gx = vec![T::zero(); l * d];
        let mut gdelta = vec![T::zero(); l * d];
        let mut ga = vec![T::zero(); d * n];
        let mut gb = vec![T::zero(); l * n];
        let mut gc = vec![T::zero(); l * n];
        let mut gd = vec![T::zero(); d];
        let mut carry = vec![T::zero(); d * n];
        for k in (0..l).rev() {
            let h_prev = &hs[k * d * n..(k + 1) * d * n];
            let h_cur = &hs[(k + 1) * d * n..(k + 2) * d * n];
            let decay = &tr.decay[k * d * n..(k + 1) * d * n];
            for ch in 0..d {
                let dt = inp.delta[k * d + ch];
                let xv = inp.x[k * d + ch];
                let g = gy[k * d + ch];
                gd[ch] += g * xv;
                let mut gx_acc = g * inp.d_skip[ch];
                let mut gdt_acc = T::zero();
                for s in 0..n {
                    let i = ch * n + s;
                    let a = inp.a[i];
                    let bks = inp.b[k * n + s];
                    let da = decay[i];
                    gc[k * n + s] += g * h_cur[i];
                    let gh = g * inp.c[k * n + s] + carry[i];
                    let gdecay = gh * h_prev[i] * da;
                    gdt_acc += gdecay * a + gh * bks * xv;
                    ga[i] += gdecay * dt;
                    gb[k * n + s] += gh * dt * xv;
                    gx_acc += gh * dt * bks;
                    carry[i] = gh * da;
                }
                gx[k * d + ch] += gx_acc;
                gdelta[k * d + ch] += gdt_acc;
            }
        }
        [gx, gdelta, ga, gb, gc, gd]
    }
}

struct SelectiveScanOp<T> {
    dims: ScanDims,
    trace: kernel::Trace<T>,
}

impl<T: Real> CustomOp<T> for SelectiveScanOp<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], grad_output: &[T]) -> icemamba_tensor::Result<Vec<Vec<T>>> {
        let inp = ScanInputs {
            x: inputs[0],
            delta: inputs[1],
            a: inputs[2],
            b: inputs[3],
            c: inputs[4],
            d_skip: inputs[5],
        };
        Ok(kernel::backward(&self.dims, &inp, &self.trace, grad_output).into())
    }
}

/// Records a selective scan on the graph.
///
/// `x`, `delta`: `[L, D]`; `a`: `[D, N]` (continuous, negative); `b`, `c`:
/// `[L, N]`; `d_skip`: `[D]`.
pub fn scan_var<T: Real>(g: &mut Graph<T>, x: Var, delta: Var, a: Var, b: Var, c: Var, d_skip: Var) -> Result<Var> {
    let xs = g.shape(x);
    if xs.len() != 2 {
        return Err(Error::shape("selective_scan", format!("input must be [L, D], got {xs:?}")));
    }
    let (l, d) = (xs[0], xs[1]);
    let n = g.shape(a).get(1).copied().unwrap_or(0);
    let expect = [(delta, vec![l, d]), (a, vec![d, n]), (b, vec![l, n]), (c, vec![l, n]), (d_skip, vec![d])];
    for (v, shape) in &expect {
        if g.shape(*v) != shape.as_slice() {
            return Err(Error::shape("selective_scan", format!("expected {shape:?}, got {:?}", g.shape(*v))));
        }
    }
    let dims = ScanDims { l, d, n };
    let inputs = [x, delta, a, b, c, d_skip];
    let inp = ScanInputs {
        x: g.value(x),
        delta: g.value(delta),
        a: g.value(a),
        b: g.value(b),
        c: g.value(c),
        d_skip: g.value(d_skip),
    };
    if !inputs.iter().any(|&v| g.requires_grad(v)) {
        let y = kernel::forward(&dims, &inp);
        return Ok(g.constant(&[l, d], y)?);
    }
    let (y, trace) = kernel::forward_traced(&dims, &inp);
    Ok(g.custom(&inputs, &[l, d], y, Box::new(SelectiveScanOp { dims, trace }))?)
}

/// Visual state-space block operating on `[C, H, W]` features with a
/// residual connection.
///
/// Parameter names under `prefix`: `norm`, `in_proj`, `dwconv`, `gate_proj`,
/// `dir{0..4}` (each with `a_log`, `d_skip`, `delta_proj`, `b_proj`,
/// `c_proj`), `out_norm`, `out_proj`.
#[derive(Debug, Clone)]
pub struct Vssb {
    pub prefix: String,
    pub channels: usize,
    pub state_size: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Vssb {
    pub fn new(prefix: impl Into<String>, channels: usize, state_size: usize) -> Self {
        Vssb { prefix: prefix.into(), channels, state_size }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, init: &mut Initializer) {
        let (c, n) = (self.channels, self.state_size);
        let ones = |len| Tensor::full(&[len], T::one());
        store.insert(self.name("norm.gamma"), ones(c));
        store.insert(self.name("norm.beta"), Tensor::zeros(&[c]));
        linear_params(store, init, &self.name("in_proj"), c, c);
        store.insert(self.name("dwconv.kernel"), init.trunc_normal(&[c, 3, 3], crate::init::WEIGHT_STD));
        linear_params(store, init, &self.name("gate_proj"), c, c);
        for dir in 0..4 {
            let p = self.name(&format!("dir{dir}"));
            let a_log: Vec<T> = (0..c).flat_map(|_| (1..=n).map(|i| T::from_f64((i as f64).ln()))).collect();
            store.insert(format!("{p}.a_log"), Tensor::new(&[c, n], a_log).expect("extent"));
            store.insert(format!("{p}.d_skip"), ones(c));
            linear_params(store, init, &format!("{p}.delta_proj"), c, c);
            store.insert(format!("{p}.b_proj"), init.trunc_normal(&[c, n], crate::init::WEIGHT_STD));
            store.insert(format!("{p}.c_proj"), init.trunc_normal(&[c, n], crate::init::WEIGHT_STD));
        }
        store.insert(self.name("out_norm.gamma"), ones(c));
        store.insert(self.name("out_norm.beta"), Tensor::zeros(&[c]));
        linear_params(store, init, &self.name("out_proj"), c, c);
    }

    fn param<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, part: &str) -> Result<Var> {
        Ok(g.param(store, &self.name(part))?)
    }

    fn linear<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, part: &str) -> Result<Var> {
        let w = self.param(g, store, &format!("{part}.weight"))?;
        let b = self.param(g, store, &format!("{part}.bias"))?;
        Ok(g.linear(x, w, Some(b))?)
    }

    /// Four-direction scan of `[C, H, W]` features, fused by summation.
    pub fn ss2d<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (c, h, w) = layout::chw(g.shape(x), "ss2d")?;
        let mut fused: Option<Var> = None;
        for (dir, order) in ScanOrder::ALL.into_iter().enumerate() {
            let pos = order.positions(h, w);
            let (to_seq, from_seq) = layout::scan_maps(&pos, c, h * w);
            let seq = g.gather(x, to_seq, &[h * w, c])?;
            let p = format!("dir{dir}");
            let delta = self.linear(g, store, seq, &format!("{p}.delta_proj"))?;
            let delta = g.activation(delta, Activation::Softplus)?;
            let wb = self.param(g, store, &format!("{p}.b_proj"))?;
            let b = g.linear(seq, wb, None)?;
            let wc = self.param(g, store, &format!("{p}.c_proj"))?;
            let cm = g.linear(seq, wc, None)?;
            let a_log = self.param(g, store, &format!("{p}.a_log"))?;
            let a = g.exp(a_log);
            let a = g.scale(a, -1.0);
            let d_skip = self.param(g, store, &format!("{p}.d_skip"))?;
            let y = scan_var(g, seq, delta, a, b, cm, d_skip)?;
            let back = g.gather(y, from_seq, &[c, h, w])?;
            fused = Some(match fused {
                None => back,
                Some(acc) => g.add(acc, back)?,
            });
        }
        Ok(fused.expect("four directions"))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (c, h, w) = layout::chw(g.shape(x), "vssb")?;
        if c != self.channels {
            return Err(Error::shape("vssb", format!("block has {} channels, input {c}", self.channels)));
        }
        let tokens = g.gather(x, layout::chw_to_hwc(c, h, w), &[h * w, c])?;
        let gamma = self.param(g, store, "norm.gamma")?;
        let beta = self.param(g, store, "norm.beta")?;
        let u = g.layer_norm(tokens, gamma, beta, LAYER_NORM_EPS)?;

        let main = self.linear(g, store, u, "in_proj")?;
        let main = g.gather(main, layout::hwc_to_chw(c, h, w), &[c, h, w])?;
        let k = self.param(g, store, "dwconv.kernel")?;
        let main = g.depthwise_conv2d(main, k)?;
        let main = g.activation(main, Activation::Silu)?;
        let main = self.ss2d(g, store, main)?;
        let main = g.gather(main, layout::chw_to_hwc(c, h, w), &[h * w, c])?;
        let gamma = self.param(g, store, "out_norm.gamma")?;
        let beta = self.param(g, store, "out_norm.beta")?;
        let main = g.layer_norm(main, gamma, beta, LAYER_NORM_EPS)?;

        let gate = self.linear(g, store, u, "gate_proj")?;
        let gate = g.activation(gate, Activation::Silu)?;
        let mixed = g.mul(main, gate)?;
        let out = self.linear(g, store, mixed, "out_proj")?;
        let res = g.add(tokens, out)?;
        Ok(g.gather(res, layout::hwc_to_chw(c, h, w), &[c, h, w])?)
    }
}

/// Reference SS2D without the graph, for cross-checking the recorded path.
pub fn ss2d_reference<T: Real>(x: &Array3<T>, params: &[SsmParams<T>; 4]) -> Result<Array3<T>> {
    let (_, h, w) = x.dim();
    let scanned = cross_scan(x)
        .iter()
        .zip(params)
        .map(|(seq, p)| selective_scan(seq, p))
        .collect::<Result<Vec<_>>>()?;
    cross_merge(&scanned, h, w)
}
