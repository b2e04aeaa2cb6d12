//! Index maps for permuting `[C, H, W]` feature maps on the graph.

use std::sync::Arc;

use crate::error::{Error, Result};

pub(crate) fn chw(shape: &[usize], context: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(context, format!("expected [C, H, W], got {shape:?}"))),
    }
}

/// `[C, H, W]` to `[H·W, C]`.
pub fn chw_to_hwc(c: usize, h: usize, w: usize) -> Arc<[usize]> {
    let l = h * w;
    (0..l).flat_map(|p| (0..c).map(move |ch| ch * l + p)).collect()
}

/// `[H·W, C]` to `[C, H, W]`.
pub fn hwc_to_chw(c: usize, h: usize, w: usize) -> Arc<[usize]> {
    let l = h * w;
    (0..c).flat_map(|ch| (0..l).map(move |p| p * c + ch)).collect()
}

/// Maps between `[C, H, W]` and a `[L, C]` sequence visiting `positions`.
pub(crate) fn scan_maps(positions: &[usize], c: usize, l: usize) -> (Arc<[usize]>, Arc<[usize]>) {
    let to_seq = positions.iter().flat_map(|&p| (0..c).map(move |ch| ch * l + p)).collect();
    let mut step_of = vec![0; l];
    for (k, &p) in positions.iter().enumerate() {
        step_of[p] = k;
    }
    let from_seq = (0..c).flat_map(|ch| step_of.iter().map(move |&k| k * c + ch)).collect::<Vec<_>>().into();
    (to_seq, from_seq)
}

/// Zero-pads the spatial extents of `[C, H, W]` to `[C, ph, pw]`.
pub fn pad_map(c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Arc<[usize]> {
    (0..c)
        .flat_map(|ch| {
            (0..ph).flat_map(move |i| {
                (0..pw).map(move |j| if i < h && j < w { (ch * h + i) * w + j } else { usize::MAX })
            })
        })
        .collect()
}

/// Crops `[C, ph, pw]` to its top-left `[C, h, w]`.
pub fn crop_map(c: usize, ph: usize, pw: usize, h: usize, w: usize) -> Arc<[usize]> {
    (0..c).flat_map(|ch| (0..h).flat_map(move |i| (0..w).map(move |j| (ch * ph + i) * pw + j))).collect()
}

/// `[C, H, W]` to `[C·p², H/p, W/p]`; output channel `(ch·p + di)·p + dj`.
pub fn space_to_depth(c: usize, h: usize, w: usize, p: usize) -> Arc<[usize]> {
    let (oh, ow) = (h / p, w / p);
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for di in 0..p {
            for dj in 0..p {
                for i in 0..oh {
                    for j in 0..ow {
                        idx.push((ch * h + i * p + di) * w + j * p + dj);
                    }
                }
            }
        }
    }
    idx.into()
}

/// Inverse of [`space_to_depth`]: `[C·p², H, W]` to `[C, H·p, W·p]`.
pub fn depth_to_space(c: usize, h: usize, w: usize, p: usize) -> Arc<[usize]> {
    let (oh, ow) = (h * p, w * p);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let src_ch = (ch * p + i % p) * p + j % p;
                idx.push((src_ch * h + i / p) * w + j / p);
            }
        }
    }
    idx.into()
}
