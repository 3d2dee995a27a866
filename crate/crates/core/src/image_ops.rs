//! Differentiable image-space operators shared by the foreground and
//! background modules: axis-aligned spatial transformation and its inverse
//! placement, spatial broadcast, and sub-pixel upsampling.
//!
//! Normalized coordinates are in [-1, 1] with the center of pixel `i` (of
//! `n`) at `(2i+1)/n - 1`; out-of-bounds samples read zero.

use ndarray::{ArrayD, IxDyn};

use crate::error::Result;
use crate::scalar::{sc, Scalar};
use crate::tensor::{require, Tape, Var};

/// Floor below which a box scale cannot be inverted for placement.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Axis-aligned attention box: a canvas rectangle centered at `shift` with
/// half-extent `scale` in normalized coordinates (so `scale_x` is the
/// fraction of the canvas width the box covers).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxParams<S: Scalar> {
    pub scale_x: S,
    pub scale_y: S,
    pub shift_x: S,
    pub shift_y: S,
}

impl<S: Scalar> BoxParams<S> {
    pub fn new(scale_x: S, scale_y: S, shift_x: S, shift_y: S) -> Result<Self> {
        let b = BoxParams { scale_x, scale_y, shift_x, shift_y };
        b.validate()?;
        Ok(b)
    }

    /// Model-produced boxes are strictly inside (0,1) x (-1,1) because they
    /// pass through sigmoid/tanh; scale = 1 is admitted so the identity
    /// transform is expressible.
    pub fn validate(&self) -> Result<()> {
        let one = S::one();
        require(
            self.scale_x > S::zero() && self.scale_x <= one
                && self.scale_y > S::zero() && self.scale_y <= one,
            format!("box scales must lie in (0,1], got ({}, {})", self.scale_x, self.scale_y),
        )?;
        require(
            self.shift_x > -one && self.shift_x < one
                && self.shift_y > -one && self.shift_y < one,
            format!("box shifts must lie in (-1,1), got ({}, {})", self.shift_x, self.shift_y),
        )
    }

    /// Pixel-space box `(x0, y0, x1, y1)` on a `size`-pixel square canvas.
    pub fn to_pixel_box(&self, size: usize) -> (f64, f64, f64, f64) {
        let s = size as f64;
        let cx = (self.shift_x.as_f64() + 1.0) / 2.0 * s;
        let cy = (self.shift_y.as_f64() + 1.0) / 2.0 * s;
        let hx = self.scale_x.as_f64() / 2.0 * s;
        let hy = self.scale_y.as_f64() / 2.0 * s;
        (cx - hx, cy - hy, cx + hx, cy + hy)
    }
}

/// Pack plain boxes into an `[M, 4]` constant tensor.
pub fn boxes_tensor<S: Scalar>(t: &mut Tape<S>, boxes: &[BoxParams<S>]) -> Var {
    let mut data = Vec::with_capacity(boxes.len() * 4);
    for b in boxes {
        data.extend_from_slice(&[b.scale_x, b.scale_y, b.shift_x, b.shift_y]);
    }
    t.constant(ArrayD::from_shape_vec(IxDyn(&[boxes.len(), 4]), data).unwrap())
}

/// Sampling grid of normalized source coordinates for each output pixel.
///
/// `boxes: [M, 4]` rows `(scale_x, scale_y, shift_x, shift_y)`; output pixel
/// with normalized center `(u, v)` maps to `(scale_x*u + shift_x,
/// scale_y*v + shift_y)`.
pub fn affine_grid<S: Scalar>(t: &mut Tape<S>, boxes: Var, out_h: usize, out_w: usize) -> Result<Var> {
    require(out_h >= 1 && out_w >= 1, format!("output size must be positive, got {out_h}x{out_w}"))?;
    Ok(t.affine_grid(boxes, out_h, out_w))
}

/// Bilinear resampling of `image: [N,C,H,W]` at `grid: [N*group,oh,ow,2]`;
/// out-of-bounds source coordinates contribute zero.
pub fn bilinear_sample<S: Scalar>(t: &mut Tape<S>, image: Var, grid: Var, group: usize) -> Result<Var> {
    let ishape = t.shape(image).to_vec();
    let gshape = t.shape(grid).to_vec();
    require(ishape.len() == 4, format!("image must be [N,C,H,W], got {ishape:?}"))?;
    require(
        gshape.len() == 4 && gshape[3] == 2,
        format!("grid must be [M,oh,ow,2], got {gshape:?}"),
    )?;
    require(
        gshape[0] == ishape[0] * group,
        format!("grid count {} != batch {} x group {group}", gshape[0], ishape[0]),
    )?;
    Ok(t.bilinear_sample(image, grid, group))
}

/// Extract `group` glimpses of size `gs` per batch item at the given boxes.
///
/// `image: [N,C,H,W]`, `boxes: [N*group, 4]` -> `[N*group, C, gs, gs]`.
pub fn st_extract<S: Scalar>(
    t: &mut Tape<S>,
    image: Var,
    boxes: Var,
    gs: usize,
    group: usize,
) -> Result<Var> {
    let grid = affine_grid(t, boxes, gs, gs)?;
    bilinear_sample(t, image, grid, group)
}

/// Place glimpses back onto a canvas: the inverse transform of
/// [`st_extract`], zero outside the box.
///
/// `glimpse: [M,C,gs,gs]`, `boxes: [M,4]` -> `[M, C, out_h, out_w]`.
pub fn st_place<S: Scalar>(
    t: &mut Tape<S>,
    glimpse: Var,
    boxes: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let min_scale = t
        .val(boxes)
        .index_axis(ndarray::Axis(1), 0)
        .iter()
        .chain(t.val(boxes).index_axis(ndarray::Axis(1), 1).iter())
        .fold(S::infinity(), |acc, &v| acc.min(v));
    require(
        min_scale > sc::<S>(SCALE_FLOOR),
        format!("box scale {min_scale} at or below the {SCALE_FLOOR} inversion floor"),
    )?;
    // inverse box: scale' = 1/scale, shift' = -shift/scale
    let scales = t.slice_axis(boxes, 1, 0, 2);
    let shifts = t.slice_axis(boxes, 1, 2, 2);
    let one = t.constant(ArrayD::from_elem(IxDyn(&[1, 1]), S::one()));
    let inv_scale = t.div(one, scales);
    let neg_shift = t.neg(shifts);
    let inv_shift = t.div(neg_shift, scales);
    let inv_boxes = t.concat(&[inv_scale, inv_shift], 1);
    let grid = affine_grid(t, inv_boxes, out_h, out_w)?;
    bilinear_sample(t, glimpse, grid, 1)
}

/// Tile a latent vector over space and append normalized coordinate channels.
///
/// `z: [N, D]` -> `[N, D+2, out_h, out_w]`; channel `D` holds x coordinates,
/// channel `D+1` holds y coordinates, both at pixel centers.
pub fn spatial_broadcast<S: Scalar>(t: &mut Tape<S>, z: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let zshape = t.shape(z).to_vec();
    require(zshape.len() == 2 && zshape[1] >= 1, format!("latent must be [N,D], got {zshape:?}"))?;
    let (n, d) = (zshape[0], zshape[1]);
    let zc = t.reshape(z, &[n, d, 1, 1]);
    let tiled = t.broadcast_to(zc, &[n, d, out_h, out_w]);
    let mut coords = ArrayD::<S>::zeros(IxDyn(&[1, 2, out_h, out_w]));
    for i in 0..out_h {
        let v = crate::tensor::pixel_center::<S>(i, out_h);
        for j in 0..out_w {
            let u = crate::tensor::pixel_center::<S>(j, out_w);
            coords[[0, 0, i, j]] = u;
            coords[[0, 1, i, j]] = v;
        }
    }
    let cvar = t.constant(coords);
    let cb = t.broadcast_to(cvar, &[n, 2, out_h, out_w]);
    Ok(t.concat(&[tiled, cb], 1))
}

/// Rearrange `[N, C*n*n, H, W]` into `[N, C, nH, nW]`; a pure permutation.
pub fn subpixel_upsample<S: Scalar>(t: &mut Tape<S>, features: Var, n: usize) -> Result<Var> {
    let shape = t.shape(features).to_vec();
    require(shape.len() == 4, format!("features must be [N,C,H,W], got {shape:?}"))?;
    require(
        shape[1] % (n * n) == 0,
        format!("channel count {} not divisible by {}", shape[1], n * n),
    )?;
    Ok(t.pixel_shuffle(features, n))
}

/// Inverse rearrangement of [`subpixel_upsample`].
pub fn subpixel_downsample<S: Scalar>(t: &mut Tape<S>, features: Var, n: usize) -> Result<Var> {
    let shape = t.shape(features).to_vec();
    require(shape.len() == 4, format!("features must be [N,C,H,W], got {shape:?}"))?;
    require(
        shape[2] % n == 0 && shape[3] % n == 0,
        format!("spatial dims {}x{} not divisible by {n}", shape[2], shape[3]),
    )?;
    Ok(t.pixel_unshuffle(features, n))
}

pub use crate::tensor::pixel_center;
