//! Differentiable sampling primitives: affine grids, bilinear interpolation
//! with zero padding, and sub-pixel (pixel shuffle) rearrangement.
//!
//! Coordinate convention, fixed repo-wide: normalized coordinates live in
//! [-1, 1] with the center of pixel `i` (of `n`) at `(2i+1)/n - 1`.

use ndarray::{ArrayD, Axis, IxDyn};
use rayon::prelude::*;

use super::{Tape, Var};
use crate::scalar::{sc, Scalar};

/// Center of pixel `i` out of `n` in normalized [-1, 1] coordinates.
pub fn pixel_center<S: Scalar>(i: usize, n: usize) -> S {
    sc::<S>((2 * i + 1) as f64 / n as f64 - 1.0)
}

impl<S: Scalar> Tape<S> {
    /// Sampling grid for an axis-aligned box transform.
    ///
    /// `boxes: [M, 4]` rows `(scale_x, scale_y, shift_x, shift_y)` ->
    /// `[M, oh, ow, 2]` where entry `(i, j)` is
    /// `(scale_x * u_j + shift_x, scale_y * v_i + shift_y)` with `u, v` the
    /// normalized output pixel centers.
    pub fn affine_grid(&mut self, boxes: Var, oh: usize, ow: usize) -> Var {
        let bv = self.val(boxes).clone();
        assert_eq!(bv.ndim(), 2, "boxes must be [M,4]");
        assert_eq!(bv.shape()[1], 4, "boxes must be [M,4]");
        let m = bv.shape()[0];
        let bo = bv.as_standard_layout().to_owned();
        let bs = bo.as_slice().unwrap();

        let mut grid = ArrayD::<S>::zeros(IxDyn(&[m, oh, ow, 2]));
        {
            let gs = grid.as_slice_mut().unwrap();
            for mi in 0..m {
                let (sx, sy, tx, ty) = (bs[mi * 4], bs[mi * 4 + 1], bs[mi * 4 + 2], bs[mi * 4 + 3]);
                for i in 0..oh {
                    let v = pixel_center::<S>(i, oh);
                    for j in 0..ow {
                        let u = pixel_center::<S>(j, ow);
                        let idx = ((mi * oh + i) * ow + j) * 2;
                        gs[idx] = sx * u + tx;
                        gs[idx + 1] = sy * v + ty;
                    }
                }
            }
        }

        self.push(
            grid,
            Some(Box::new(move |g, grads| {
                let go = g.as_standard_layout().to_owned();
                let gsl = go.as_slice().unwrap();
                let mut db = ArrayD::<S>::zeros(IxDyn(&[m, 4]));
                let dbs = db.as_slice_mut().unwrap();
                for mi in 0..m {
                    let (mut dsx, mut dsy, mut dtx, mut dty) =
                        (S::zero(), S::zero(), S::zero(), S::zero());
                    for i in 0..oh {
                        let v = pixel_center::<S>(i, oh);
                        for j in 0..ow {
                            let u = pixel_center::<S>(j, ow);
                            let idx = ((mi * oh + i) * ow + j) * 2;
                            dsx += u * gsl[idx];
                            dtx += gsl[idx];
                            dsy += v * gsl[idx + 1];
                            dty += gsl[idx + 1];
                        }
                    }
                    dbs[mi * 4] = dsx;
                    dbs[mi * 4 + 1] = dsy;
                    dbs[mi * 4 + 2] = dtx;
                    dbs[mi * 4 + 3] = dty;
                }
                grads.accum(boxes, db);
            })),
        )
    }

    /// Bilinear sampling with zero padding outside the source image.
    ///
    /// `image: [N, C, H, W]`, `grid: [N*group, oh, ow, 2]` ->
    /// `[N*group, C, oh, ow]`; grid row `m` reads image `m / group`.
    /// Differentiable in both the image and the grid.
    pub fn bilinear_sample(&mut self, image: Var, grid: Var, group: usize) -> Var {
        let iv = self.val(image).clone();
        let gv = self.val(grid).clone();
        assert_eq!(iv.ndim(), 4, "image must be [N,C,H,W]");
        assert_eq!(gv.ndim(), 4, "grid must be [M,oh,ow,2]");
        assert_eq!(gv.shape()[3], 2, "grid last dim must be 2");
        let (n, c, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2], iv.shape()[3]);
        let m = gv.shape()[0];
        assert_eq!(m, n * group, "grid count must be batch * group");
        let (oh, ow) = (gv.shape()[1], gv.shape()[2]);

        let io = iv.as_standard_layout().to_owned();
        let go = gv.as_standard_layout().to_owned();

        let mut out = ArrayD::<S>::zeros(IxDyn(&[m, c, oh, ow]));
        {
            let mut items: Vec<_> = out.outer_iter_mut().collect();
            let isl = io.as_slice().unwrap();
            let gsl = go.as_slice().unwrap();
            items.par_iter_mut().enumerate().for_each(|(mi, om)| {
                let ni = mi / group;
                let img = &isl[ni * c * h * w..(ni + 1) * c * h * w];
                let osl = om.as_slice_mut().unwrap();
                for i in 0..oh {
                    for j in 0..ow {
                        let gidx = ((mi * oh + i) * ow + j) * 2;
                        let (gx, gy) = (gsl[gidx], gsl[gidx + 1]);
                        let tap = TapWeights::at(gx, gy, h, w);
                        for ci in 0..c {
                            let plane = &img[ci * h * w..(ci + 1) * h * w];
                            osl[(ci * oh + i) * ow + j] = tap.gather(plane, w);
                        }
                    }
                }
            });
        }

        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let gout = g.as_standard_layout().to_owned();
                let gosl = gout.as_slice().unwrap();
                let isl = io.as_slice().unwrap();
                let gsl = go.as_slice().unwrap();

                let mut dgrid = ArrayD::<S>::zeros(IxDyn(&[m, oh, ow, 2]));
                let mut dimg = ArrayD::<S>::zeros(IxDyn(&[n, c, h, w]));
                {
                    // parallel over batch items: every group row of one item is
                    // handled by the same thread, so image scatter is race-free
                    let mut dimg_items: Vec<_> = dimg.outer_iter_mut().collect();
                    let mut dgrid_chunks: Vec<_> =
                        dgrid.axis_chunks_iter_mut(Axis(0), group).collect();
                    dimg_items.par_iter_mut().zip(dgrid_chunks.par_iter_mut()).enumerate().for_each(
                        |(ni, (dimg_n, dgrid_n))| {
                            let img = &isl[ni * c * h * w..(ni + 1) * c * h * w];
                            let dim = dimg_n.as_slice_mut().unwrap();
                            let dgr = dgrid_n.as_slice_mut().unwrap();
                            for gi in 0..group {
                                let mi = ni * group + gi;
                                for i in 0..oh {
                                    for j in 0..ow {
                                        let gidx = ((mi * oh + i) * ow + j) * 2;
                                        let (gx, gy) = (gsl[gidx], gsl[gidx + 1]);
                                        let tap = TapWeights::at(gx, gy, h, w);
                                        let mut dgx = S::zero();
                                        let mut dgy = S::zero();
                                        for ci in 0..c {
                                            let base = ci * h * w;
                                            let gval =
                                                gosl[((mi * c + ci) * oh + i) * ow + j];
                                            tap.scatter(&mut dim[base..base + h * w], w, gval);
                                            let (dx, dy) =
                                                tap.coord_grads(&img[base..base + h * w], w);
                                            dgx += dx * gval;
                                            dgy += dy * gval;
                                        }
                                        let lidx = ((gi * oh + i) * ow + j) * 2;
                                        dgr[lidx] = dgx * sc::<S>(w as f64 / 2.0);
                                        dgr[lidx + 1] = dgy * sc::<S>(h as f64 / 2.0);
                                    }
                                }
                            }
                        },
                    );
                }
                grads.accum(image, dimg);
                grads.accum(grid, dgrid);
            })),
        )
    }

    /// Rearrange `[N, C*r*r, H, W]` into `[N, C, H*r, W*r]` (no arithmetic).
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let xv = self.val(x).clone();
        assert_eq!(xv.ndim(), 4);
        let (n, cin, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert_eq!(cin % (r * r), 0, "channels {cin} not divisible by {}", r * r);
        let c = cin / (r * r);
        let xo = xv.as_standard_layout().to_owned();
        let xs = xo.as_slice().unwrap();
        let mut y = ArrayD::<S>::zeros(IxDyn(&[n, c, h * r, w * r]));
        {
            let ys = y.as_slice_mut().unwrap();
            for (ni, ci, hi, wi, dy, dx) in shuffle_indices(n, c, h, w, r) {
                let src = (((ni * cin) + (ci * r * r + dy * r + dx)) * h + hi) * w + wi;
                let dst = ((ni * c + ci) * (h * r) + hi * r + dy) * (w * r) + wi * r + dx;
                ys[dst] = xs[src];
            }
        }
        self.push(
            y,
            Some(Box::new(move |g, grads| {
                let go = g.as_standard_layout().to_owned();
                let gs = go.as_slice().unwrap();
                let mut dx_arr = ArrayD::<S>::zeros(IxDyn(&[n, cin, h, w]));
                {
                    let ds = dx_arr.as_slice_mut().unwrap();
                    for (ni, ci, hi, wi, dy, dx) in shuffle_indices(n, c, h, w, r) {
                        let src = (((ni * cin) + (ci * r * r + dy * r + dx)) * h + hi) * w + wi;
                        let dst =
                            ((ni * c + ci) * (h * r) + hi * r + dy) * (w * r) + wi * r + dx;
                        ds[src] = gs[dst];
                    }
                }
                grads.accum(x, dx_arr);
            })),
        )
    }

    /// Inverse of [`Tape::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Var {
        let xv = self.val(x).clone();
        assert_eq!(xv.ndim(), 4);
        let (n, c, hr, wr) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert_eq!(hr % r, 0);
        assert_eq!(wr % r, 0);
        let (h, w) = (hr / r, wr / r);
        let cin = c * r * r;
        let xo = xv.as_standard_layout().to_owned();
        let xs = xo.as_slice().unwrap();
        let mut y = ArrayD::<S>::zeros(IxDyn(&[n, cin, h, w]));
        {
            let ys = y.as_slice_mut().unwrap();
            for (ni, ci, hi, wi, dy, dx) in shuffle_indices(n, c, h, w, r) {
                let dst = (((ni * cin) + (ci * r * r + dy * r + dx)) * h + hi) * w + wi;
                let src = ((ni * c + ci) * hr + hi * r + dy) * wr + wi * r + dx;
                ys[dst] = xs[src];
            }
        }
        self.push(
            y,
            Some(Box::new(move |g, grads| {
                let go = g.as_standard_layout().to_owned();
                let gs = go.as_slice().unwrap();
                let mut dx_arr = ArrayD::<S>::zeros(IxDyn(&[n, c, hr, wr]));
                {
                    let ds = dx_arr.as_slice_mut().unwrap();
                    for (ni, ci, hi, wi, dy, dx) in shuffle_indices(n, c, h, w, r) {
                        let dst = (((ni * cin) + (ci * r * r + dy * r + dx)) * h + hi) * w + wi;
                        let src = ((ni * c + ci) * hr + hi * r + dy) * wr + wi * r + dx;
                        ds[src] = gs[dst];
                    }
                }
                grads.accum(x, dx_arr);
            })),
        )
    }
}

fn shuffle_indices(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) -> impl Iterator<Item = (usize, usize, usize, usize, usize, usize)> {
    itertools_free_product(n, c, h, w, r)
}

fn itertools_free_product(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) -> impl Iterator<Item = (usize, usize, usize, usize, usize, usize)> {
    (0..n).flat_map(move |ni| {
        (0..c).flat_map(move |ci| {
            (0..h).flat_map(move |hi| {
                (0..w).flat_map(move |wi| {
                    (0..r).flat_map(move |dy| (0..r).map(move |dx| (ni, ci, hi, wi, dy, dx)))
                })
            })
        })
    })
}

/// Four-tap bilinear footprint of one normalized coordinate pair.
struct TapWeights<S> {
    x0: isize,
    y0: isize,
    wx: S,
    wy: S,
}

impl<S: Scalar> TapWeights<S> {
    fn at(gx: S, gy: S, h: usize, w: usize) -> Self {
        // normalized -> continuous pixel coordinates (center convention)
        let px = (gx + S::one()) * sc::<S>(w as f64 / 2.0) - sc::<S>(0.5);
        let py = (gy + S::one()) * sc::<S>(h as f64 / 2.0) - sc::<S>(0.5);
        let x0 = px.floor();
        let y0 = py.floor();
        TapWeights {
            x0: x0.as_f64() as isize,
            y0: y0.as_f64() as isize,
            wx: px - x0,
            wy: py - y0,
        }
    }

    #[inline]
    fn corners(&self) -> [(isize, isize, S); 4] {
        let (wx, wy) = (self.wx, self.wy);
        let one = S::one();
        [
            (self.y0, self.x0, (one - wy) * (one - wx)),
            (self.y0, self.x0 + 1, (one - wy) * wx),
            (self.y0 + 1, self.x0, wy * (one - wx)),
            (self.y0 + 1, self.x0 + 1, wy * wx),
        ]
    }

    fn gather(&self, plane: &[S], w: usize) -> S {
        let h = plane.len() / w;
        let mut acc = S::zero();
        for (y, x, wgt) in self.corners() {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                acc += wgt * plane[y as usize * w + x as usize];
            }
        }
        acc
    }

    fn scatter(&self, plane: &mut [S], w: usize, g: S) {
        let h = plane.len() / w;
        for (y, x, wgt) in self.corners() {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                let idx = y as usize * w + x as usize;
                plane[idx] += wgt * g;
            }
        }
    }

    /// (d out / d px, d out / d py) for one channel plane.
    fn coord_grads(&self, plane: &[S], w: usize) -> (S, S) {
        let h = plane.len() / w;
        let fetch = |y: isize, x: isize| -> S {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                plane[y as usize * w + x as usize]
            } else {
                S::zero()
            }
        };
        let i00 = fetch(self.y0, self.x0);
        let i01 = fetch(self.y0, self.x0 + 1);
        let i10 = fetch(self.y0 + 1, self.x0);
        let i11 = fetch(self.y0 + 1, self.x0 + 1);
        let one = S::one();
        let dx = (i01 - i00) * (one - self.wy) + (i11 - i10) * self.wy;
        let dy = (i10 - i00) * (one - self.wx) + (i11 - i01) * self.wx;
        (dx, dy)
    }
}
