//! 2-d convolution on the tape, via im2col and matrix multiplication.
//!
//! Batch items are processed in parallel with disjoint output regions; the
//! weight-gradient reduction over the batch runs in index order, so results
//! are bit-stable across runs.

use ndarray::{Array2, ArrayD, ArrayViewMut2, Axis, Ix2, IxDyn};
use rayon::prelude::*;

use super::{Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        Conv2dSpec { stride, pad }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

impl<S: Scalar> Tape<S> {
    /// `x: [N,C,H,W]`, `w: [O,C,kh,kw]`, `b: [O]` -> `[N,O,oh,ow]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Var {
        let xv = self.val(x).clone();
        let wv = self.val(w).clone();
        let bv = self.val(b).clone();
        let (n, c, h, width) = dims4(xv.shape());
        let (o, wc, kh, kw) = dims4(wv.shape());
        assert_eq!(c, wc, "conv2d channel mismatch");
        assert_eq!(bv.shape(), [o], "conv2d bias shape");
        assert!(spec.stride >= 1);
        let oh = spec.out_size(h, kh);
        let ow = spec.out_size(width, kw);
        let ckk = c * kh * kw;

        let xo = xv.as_standard_layout().to_owned();
        let w_mat = wv
            .as_standard_layout()
            .to_owned()
            .into_shape(IxDyn(&[o, ckk]))
            .unwrap()
            .into_dimensionality::<Ix2>()
            .unwrap();

        let mut y = ArrayD::<S>::zeros(IxDyn(&[n, o, oh, ow]));
        {
            let mut items: Vec<_> = y.outer_iter_mut().collect();
            items.par_iter_mut().enumerate().for_each(|(ni, yn)| {
                let xn = xo.index_axis(Axis(0), ni);
                let col = im2col(xn.as_slice().unwrap(), c, h, width, kh, kw, spec, oh, ow);
                let mut yn2: ArrayViewMut2<S> =
                    yn.view_mut().into_shape((o, oh * ow)).unwrap();
                ndarray::linalg::general_mat_mul(S::one(), &w_mat, &col, S::zero(), &mut yn2);
                for (oc, mut row) in yn2.outer_iter_mut().enumerate() {
                    let bias = bv[oc];
                    row.mapv_inplace(|v| v + bias);
                }
            });
        }

        self.push(
            y,
            Some(Box::new(move |g, grads| {
                let go = g.as_standard_layout().to_owned();
                // bias gradient: sum over batch and spatial positions, in order
                let mut db = ArrayD::<S>::zeros(IxDyn(&[o]));
                for ni in 0..n {
                    let gn = go.index_axis(Axis(0), ni);
                    for oc in 0..o {
                        let s: S = gn.index_axis(Axis(0), oc).iter().copied().sum();
                        db[oc] += s;
                    }
                }

                let mut dx = ArrayD::<S>::zeros(IxDyn(&[n, c, h, width]));
                let mut dw_parts: Vec<Array2<S>> = (0..n).map(|_| Array2::zeros((o, ckk))).collect();
                {
                    let mut dx_items: Vec<_> = dx.outer_iter_mut().collect();
                    dx_items
                        .par_iter_mut()
                        .zip(dw_parts.par_iter_mut())
                        .enumerate()
                        .for_each(|(ni, (dxn, dwn))| {
                            let xn = xo.index_axis(Axis(0), ni);
                            let col =
                                im2col(xn.as_slice().unwrap(), c, h, width, kh, kw, spec, oh, ow);
                            let gn2 = go
                                .index_axis(Axis(0), ni)
                                .into_shape((o, oh * ow))
                                .unwrap();
                            ndarray::linalg::general_mat_mul(
                                S::one(),
                                &gn2,
                                &col.t(),
                                S::zero(),
                                dwn,
                            );
                            let mut dcol = Array2::<S>::zeros((ckk, oh * ow));
                            ndarray::linalg::general_mat_mul(
                                S::one(),
                                &w_mat.t(),
                                &gn2,
                                S::zero(),
                                &mut dcol,
                            );
                            col2im(
                                &dcol,
                                dxn.as_slice_mut().unwrap(),
                                c,
                                h,
                                width,
                                kh,
                                kw,
                                spec,
                                oh,
                                ow,
                            );
                        });
                }
                let mut dw = Array2::<S>::zeros((o, ckk));
                for part in &dw_parts {
                    dw += part;
                }
                grads.accum(w, dw.into_dyn().into_shape(IxDyn(&[o, c, kh, kw])).unwrap());
                grads.accum(x, dx);
                grads.accum(b, db);
            })),
        )
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected 4-d tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    oh: usize,
    ow: usize,
) -> Array2<S> {
    let mut col = Array2::<S>::zeros((c * kh * kw, oh * ow));
    let cs = col.as_slice_mut().unwrap();
    let (stride, pad) = (spec.stride as isize, spec.pad as isize);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = oy as isize * stride + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + iy as usize) * w;
                    let crow = base + oy * ow;
                    for ox in 0..ow {
                        let ix = ox as isize * stride + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            cs[crow + ox] = x[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    dcol: &Array2<S>,
    dx: &mut [S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    oh: usize,
    ow: usize,
) {
    let ds = dcol.as_slice().unwrap();
    let (stride, pad) = (spec.stride as isize, spec.pad as isize);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = oy as isize * stride + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + iy as usize) * w;
                    let crow = base + oy * ow;
                    for ox in 0..ow {
                        let ix = ox as isize * stride + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dx[xrow + ix as usize] += ds[crow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn conv2d_identity_kernel() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 1, 3, 3]), (1..=9).map(f64::from).collect()).unwrap());
        let w = tp.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 1]), vec![1.0]).unwrap());
        let b = tp.leaf(ArrayD::zeros(IxDyn(&[1])));
        let y = tp.conv2d(x, w, b, Conv2dSpec::new(1, 0));
        assert_eq!(tp.val(y).shape(), &[1, 1, 3, 3]);
        assert_eq!(tp.val(y).as_slice().unwrap()[4], 5.0);
    }

    #[test]
    fn conv2d_3x3_sum_kernel_with_padding() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 1.0));
        let w = tp.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 1.0));
        let b = tp.leaf(ArrayD::zeros(IxDyn(&[1])));
        let y = tp.conv2d(x, w, b, Conv2dSpec::new(1, 1));
        // interior pixels see all 9 ones, corners only 4
        let v = tp.val(y);
        assert_eq!(v[[0, 0, 1, 1]], 9.0);
        assert_eq!(v[[0, 0, 0, 0]], 4.0);
    }

    #[test]
    fn conv2d_stride_two_shape() {
        let mut tp = Tape::<f64>::new();
        let x = tp.leaf(ArrayD::zeros(IxDyn(&[2, 3, 8, 8])));
        let w = tp.leaf(ArrayD::zeros(IxDyn(&[5, 3, 4, 4])));
        let b = tp.leaf(ArrayD::zeros(IxDyn(&[5])));
        let y = tp.conv2d(x, w, b, Conv2dSpec::new(2, 1));
        assert_eq!(tp.val(y).shape(), &[2, 5, 4, 4]);
    }
}
