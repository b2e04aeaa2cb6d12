//! Channel attention, residual state-space blocks and patch resampling.
//!
//! Every block owns a name prefix under which its parameters live in a
//! [`ParamStore`]; `init` registers them and `forward` records the block on a
//! [`Graph`]. Features are `[C, H, W]` at block boundaries.

use icemamba_tensor::{Activation, Graph, ParamStore, Real, Var};

use crate::error::{Error, Result};
use crate::init::{linear_params, Initializer, WEIGHT_STD};
use crate::layout;
use crate::ssm::Vssb;

/// Odd kernel length for channel attention over `channels` channels:
/// `trunc(log2(C)/2 + 1/2)`, bumped to the next odd value.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = ((channels.max(1) as f64).log2() / 2.0 + 0.5) as usize;
    if t % 2 == 1 {
        t
    } else {
        t + 1
    }
}

fn param<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, part: &str) -> Result<Var> {
    Ok(g.param(store, &format!("{prefix}.{part}"))?)
}

/// Per-position linear map of `[C_in, H, W]` to `[C_out, H, W]`.
pub fn conv1x1<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let (c, h, w) = layout::chw(g.shape(x), "conv1x1")?;
    let wt = param(g, store, prefix, "weight")?;
    let b = param(g, store, prefix, "bias")?;
    let c_out = g.shape(wt).get(1).copied().unwrap_or(0);
    let tokens = g.gather(x, layout::chw_to_hwc(c, h, w), &[h * w, c])?;
    let y = g.linear(tokens, wt, Some(b))?;
    Ok(g.gather(y, layout::hwc_to_chw(c_out, h, w), &[c_out, h, w])?)
}

/// Efficient channel attention: per-channel sigmoid gates from a short
/// convolution over pooled channel means.
#[derive(Debug, Clone)]
pub struct Eca {
    pub prefix: String,
    pub channels: usize,
}

impl Eca {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Eca { prefix: prefix.into(), channels }
    }

    pub fn kernel_size(&self) -> usize {
        eca_kernel_size(self.channels)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, init: &mut Initializer) {
        store.insert(format!("{}.kernel", self.prefix), init.trunc_normal(&[self.kernel_size()], WEIGHT_STD));
    }

    /// Gate values in (0, 1), one per channel.
    pub fn gates<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = param(g, store, &self.prefix, "kernel")?;
        let pooled = g.global_avg_pool(x)?;
        let mixed = g.channel_conv1d(pooled, k)?;
        Ok(g.activation(mixed, Activation::Sigmoid)?)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = self.gates(g, store, x)?;
        Ok(g.scale_channels(x, w)?)
    }
}

/// Residual block: `VSSB(VSSB(ECA(x))) + silu(conv1x1(x))`.
#[derive(Debug, Clone)]
pub struct Ressb {
    pub prefix: String,
    pub eca: Eca,
    pub vssb1: Vssb,
    pub vssb2: Vssb,
}

impl Ressb {
    pub fn new(prefix: impl Into<String>, channels: usize, state_size: usize) -> Self {
        let prefix = prefix.into();
        Ressb {
            eca: Eca::new(format!("{prefix}.eca"), channels),
            vssb1: Vssb::new(format!("{prefix}.vssb1"), channels, state_size),
            vssb2: Vssb::new(format!("{prefix}.vssb2"), channels, state_size),
            prefix,
        }
    }

    pub fn residual_prefix(&self) -> String {
        format!("{}.residual", self.prefix)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, init: &mut Initializer) {
        self.eca.init(store, init);
        self.vssb1.init(store, init);
        self.vssb2.init(store, init);
        let c = self.eca.channels;
        linear_params(store, init, &self.residual_prefix(), c, c);
    }

    /// The enhanced branch and the convolutional branch, before summation.
    pub fn branches<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let e = self.eca.forward(g, store, x)?;
        let e = self.vssb1.forward(g, store, e)?;
        let e = self.vssb2.forward(g, store, e)?;
        let r = conv1x1(g, store, &self.residual_prefix(), x)?;
        let r = g.activation(r, Activation::Silu)?;
        Ok((e, r))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (e, r) = self.branches(g, store, x)?;
        Ok(g.add(e, r)?)
    }
}

/// Non-overlapping `P×P` patches flattened and mapped to `c_out` channels.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, init: &mut Initializer) {
        linear_params(store, init, &self.prefix, self.c_in * self.patch * self.patch, self.c_out);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (c, h, w) = layout::chw(g.shape(x), "patch_embed")?;
        let p = self.patch;
        if c != self.c_in {
            return Err(Error::shape("patch_embed", format!("expected {} input channels, got {c}", self.c_in)));
        }
        if p == 0 || h % p != 0 || w % p != 0 {
            let pad = |n: usize| (p - n % p) % p;
            return Err(Error::shape(
                "patch_embed",
                format!("{h}x{w} is not divisible by patch {p}; pad by {}x{} cells", pad(h), pad(w)),
            ));
        }
        let folded = g.gather(x, layout::space_to_depth(c, h, w, p), &[c * p * p, h / p, w / p])?;
        conv1x1(g, store, &self.prefix, folded)
    }
}

/// Resolution changes between encoder and decoder stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rescale {
    /// `[C, H, W]` to `[2C, H/2, W/2]`: 2×2 neighbours concatenated, then `4C → 2C`.
    Merge,
    /// `[C, H, W]` to `[C/2, 2H, 2W]`: `C → 2C`, then spread over 2×2 cells.
    Expand,
    /// `[C, H, W]` to `[C, PH, PW]`: `C → C·P²`, then spread over P×P cells.
    FinalExpand(usize),
}

#[derive(Debug, Clone)]
pub struct PatchRescale {
    pub prefix: String,
    pub channels: usize,
    pub kind: Rescale,
}

impl PatchRescale {
    fn widths(&self) -> (usize, usize) {
        let c = self.channels;
        match self.kind {
            Rescale::Merge => (4 * c, 2 * c),
            Rescale::Expand => (c, 2 * c),
            Rescale::FinalExpand(p) => (c, c * p * p),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, init: &mut Initializer) {
        let (a, b) = self.widths();
        linear_params(store, init, &self.prefix, a, b);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (c, h, w) = layout::chw(g.shape(x), "patch_rescale")?;
        if c != self.channels {
            return Err(Error::shape("patch_rescale", format!("expected {} channels, got {c}", self.channels)));
        }
        match self.kind {
            Rescale::Merge => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape("patch_merge", format!("extents {h}x{w} must be even")));
                }
                let folded = g.gather(x, layout::space_to_depth(c, h, w, 2), &[4 * c, h / 2, w / 2])?;
                conv1x1(g, store, &self.prefix, folded)
            }
            Rescale::Expand => {
                if c % 2 != 0 {
                    return Err(Error::shape("patch_expand", format!("channel count {c} must be even")));
                }
                let wide = conv1x1(g, store, &self.prefix, x)?;
                Ok(g.gather(wide, layout::depth_to_space(c / 2, h, w, 2), &[c / 2, 2 * h, 2 * w])?)
            }
            Rescale::FinalExpand(p) => {
                let wide = conv1x1(g, store, &self.prefix, x)?;
                Ok(g.gather(wide, layout::depth_to_space(c, h, w, p), &[c, p * h, p * w])?)
            }
        }
    }
}

/// `tanh(conv1x1(x))` with one output map per lead time.
#[derive(Debug, Clone)]
pub struct OutputHead {
    pub prefix: String,
    pub channels: usize,
    pub leads: usize,
}

impl OutputHead {
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, init: &mut Initializer) {
        linear_params(store, init, &self.prefix, self.channels, self.leads);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = conv1x1(g, store, &self.prefix, x)?;
        Ok(g.activation(y, Activation::Tanh)?)
    }
}
