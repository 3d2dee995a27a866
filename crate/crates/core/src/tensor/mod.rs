//! Reverse-mode automatic differentiation on dense n-d arrays.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients per node. Values are
//! reference-counted (`ArcArray`), so backward closures capture them cheaply.
//!
//! All operations are deterministic: reductions run in index order and the
//! only parallelism used (over batch items in convolution and sampling) writes
//! disjoint output regions, so repeated runs produce bit-identical results on
//! the same platform.

mod conv;
mod sample;

pub mod gradcheck;

pub use conv::Conv2dSpec;
pub use sample::pixel_center;

use ndarray::{ArcArray, Array, ArrayD, Axis, IxDyn, Slice};

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};

pub type Val<S> = ArcArray<S, IxDyn>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

type BackFn<S> = Box<dyn FnOnce(&ArrayD<S>, &mut Grads<S>)>;

struct Node<S: Scalar> {
    val: Val<S>,
    back: Option<BackFn<S>>,
}

/// Gradient store produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<S: Scalar> {
    g: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.g[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<S>> {
        self.g[v.0].take()
    }

    fn accum(&mut self, v: Var, contrib: ArrayD<S>) {
        // keep every stored gradient in standard layout so backward closures
        // may rely on `as_slice`
        let contrib = if contrib.is_standard_layout() {
            contrib
        } else {
            contrib.as_standard_layout().to_owned()
        };
        match &mut self.g[v.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), contrib.shape());
                *g += &contrib;
            }
            slot @ None => *slot = Some(contrib),
        }
    }
}

/// Recording of one forward computation.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node (shared, cheap to clone).
    pub fn val(&self, v: Var) -> &Val<S> {
        &self.nodes[v.0].val
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].val.shape()
    }

    /// Value of a 0-d (scalar) node.
    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].val.ndim(), 0);
        *self.nodes[v.0].val.first().expect("scalar node")
    }

    fn push(&mut self, val: ArrayD<S>, back: Option<BackFn<S>>) -> Var {
        let val = if val.is_standard_layout() {
            val
        } else {
            val.as_standard_layout().to_owned()
        };
        self.push_shared(val.into_shared(), back)
    }

    fn push_shared(&mut self, val: Val<S>, back: Option<BackFn<S>>) -> Var {
        self.nodes.push(Node { val, back });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node: a differentiation root (parameter or input).
    pub fn leaf(&mut self, val: ArrayD<S>) -> Var {
        self.push(val, None)
    }

    /// Constant node; identical to a leaf, named for intent.
    pub fn constant(&mut self, val: ArrayD<S>) -> Var {
        self.push(val, None)
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.push(Array::from_elem(IxDyn(&[]), v), None)
    }

    /// Cut the gradient path: same value, no backward edge.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].val.clone();
        self.push_shared(v, None)
    }

    /// Run reverse-mode accumulation from `loss` (any shape; seeded with ones).
    ///
    /// Consumes the recorded backward closures: one backward per tape.
    pub fn backward(&mut self, loss: Var) -> Grads<S> {
        let mut grads = Grads { g: vec![None; self.nodes.len()] };
        let seed = ArrayD::ones(self.nodes[loss.0].val.shape());
        grads.g[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(back) = self.nodes[i].back.take() else { continue };
            let Some(gi) = grads.g[i].take() else { continue };
            back(&gi, &mut grads);
            grads.g[i] = Some(gi);
        }
        grads
    }

    // ---- elementwise helpers ----

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(S) -> S + Sync,
        dfdx: impl Fn(S) -> S + Sync + 'static,
    ) -> Var {
        let xv = self.nodes[x.0].val.clone();
        let xs = xv.as_slice().expect("standard layout");
        let mut y = ArrayD::<S>::zeros(xv.raw_dim());
        par_map2(xs, y.as_slice_mut().unwrap(), &f);
        self.push(
            y,
            Some(Box::new(move |g, grads| {
                let mut gx = ArrayD::<S>::zeros(xv.raw_dim());
                let gs = g.as_slice().expect("grad standard layout");
                let xs = xv.as_slice().expect("standard layout");
                par_map3(gs, xs, gx.as_slice_mut().unwrap(), |gi, xi| gi * dfdx(xi));
                grads.accum(x, gx);
            })),
        )
    }

    /// Unary op whose derivative is cheaper from the output value.
    fn unary_from_out(
        &mut self,
        x: Var,
        f: impl Fn(S) -> S + Sync,
        dfdy: impl Fn(S) -> S + Sync + 'static,
    ) -> Var {
        let xv = self.nodes[x.0].val.clone();
        let mut y = ArrayD::<S>::zeros(xv.raw_dim());
        par_map2(xv.as_slice().expect("standard layout"), y.as_slice_mut().unwrap(), &f);
        let v = self.push(y, None);
        let yv = self.nodes[v.0].val.clone();
        self.nodes[v.0].back = Some(Box::new(move |g, grads| {
            let mut gx = ArrayD::<S>::zeros(yv.raw_dim());
            let gs = g.as_slice().expect("grad standard layout");
            let ys = yv.as_slice().expect("standard layout");
            par_map3(gs, ys, gx.as_slice_mut().unwrap(), |gi, yi| gi * dfdy(yi));
            grads.accum(x, gx);
        }));
        v
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, |_| -S::one())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cs = sc::<S>(c);
        self.unary(x, move |v| v * cs, move |_| cs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let cs = sc::<S>(c);
        self.unary(x, move |v| v + cs, |_| S::one())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary_from_out(x, |v| v.exp(), |y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), |v| v.recip())
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary_from_out(x, |v| v.sqrt(), |y| (sc::<S>(2.0) * y).recip())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |v| sc::<S>(2.0) * v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary_from_out(x, stable_sigmoid, |y| y * (S::one() - y))
    }

    /// log(sigmoid(x)), computed without overflow.
    pub fn logsigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.min(S::zero()) - ((-v.abs()).exp() + S::one()).ln(),
            |v| S::one() - stable_sigmoid(v),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary_from_out(x, |v| v.tanh(), |y| S::one() - y * y)
    }

    /// softplus(x) + 1e-6; the floor keeps downstream divisions finite when
    /// single-precision softplus underflows.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.max(S::zero()) + (S::one() + (-v.abs()).exp()).ln() + sc::<S>(1e-6),
            stable_sigmoid,
        )
    }

    /// ELU with alpha = 1 (identical to CELU(1)).
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > S::zero() { v } else { v.exp() - S::one() },
            |v| if v > S::zero() { S::one() } else { v.exp() },
        )
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (sc::<S>(lo), sc::<S>(hi));
        self.unary(
            x,
            move |v| v.max(l).min(h),
            move |v| if v > l && v < h { S::one() } else { S::zero() },
        )
    }

    // ---- broadcasting binary ops ----

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S + Sync,
        // (a_i, b_i, g_i) -> (da_i, db_i)
        dfdab: impl Fn(S, S, S) -> (S, S) + Sync + 'static,
    ) -> Var {
        let av = self.nodes[a.0].val.clone();
        let bv = self.nodes[b.0].val.clone();
        let same_shape = av.shape() == bv.shape();
        let out_shape = broadcast_shape(av.shape(), bv.shape())
            .unwrap_or_else(|| panic!("incompatible shapes {:?} vs {:?}", av.shape(), bv.shape()));
        let mut y = ArrayD::<S>::zeros(out_shape.clone());
        if same_shape {
            par_map3(
                av.as_slice().expect("standard layout"),
                bv.as_slice().expect("standard layout"),
                y.as_slice_mut().unwrap(),
                &f,
            );
        } else {
            let ab = av.broadcast(out_shape.clone()).expect("broadcast a");
            let bb = bv.broadcast(out_shape.clone()).expect("broadcast b");
            ndarray::Zip::from(&mut y).and(&ab).and(&bb).for_each(|yi, &ai, &bi| *yi = f(ai, bi));
        }
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        self.push(
            y,
            Some(Box::new(move |g, grads| {
                let mut da = ArrayD::<S>::zeros(out_shape.clone());
                let mut db = ArrayD::<S>::zeros(out_shape.clone());
                if same_shape {
                    use rayon::prelude::*;
                    let gs = g.as_slice().expect("grad standard layout");
                    let avs = av.as_slice().unwrap();
                    let bvs = bv.as_slice().unwrap();
                    let das = da.as_slice_mut().unwrap();
                    let dbs = db.as_slice_mut().unwrap();
                    if gs.len() < 2 * PAR_CHUNK {
                        for i in 0..gs.len() {
                            let (x, y) = dfdab(avs[i], bvs[i], gs[i]);
                            das[i] = x;
                            dbs[i] = y;
                        }
                    } else {
                        das.par_chunks_mut(PAR_CHUNK)
                            .zip(dbs.par_chunks_mut(PAR_CHUNK))
                            .zip(
                                avs.par_chunks(PAR_CHUNK)
                                    .zip(bvs.par_chunks(PAR_CHUNK).zip(gs.par_chunks(PAR_CHUNK))),
                            )
                            .for_each(|((dac, dbc), (ac, (bc, gc)))| {
                                for i in 0..gc.len() {
                                    let (x, y) = dfdab(ac[i], bc[i], gc[i]);
                                    dac[i] = x;
                                    dbc[i] = y;
                                }
                            });
                    }
                } else {
                    let ab = av.broadcast(out_shape.clone()).expect("broadcast a");
                    let bb = bv.broadcast(out_shape.clone()).expect("broadcast b");
                    ndarray::Zip::from(&mut da)
                        .and(&mut db)
                        .and(&ab)
                        .and(&bb)
                        .and(g)
                        .for_each(|dai, dbi, &ai, &bi, &gi| {
                            let (x, y) = dfdab(ai, bi, gi);
                            *dai = x;
                            *dbi = y;
                        });
                }
                grads.accum(a, reduce_to_shape(da, &ash));
                grads.accum(b, reduce_to_shape(db, &bsh));
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, |x, y, g| (g / y, -g * x / (y * y)))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].val.clone();
        let total: S = xv.iter().copied().sum();
        let shape = xv.shape().to_vec();
        self.push(
            Array::from_elem(IxDyn(&[]), total),
            Some(Box::new(move |g, grads| {
                let gs = *g.first().expect("scalar grad");
                grads.accum(x, ArrayD::from_elem(IxDyn(&shape), gs));
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].val.len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over one axis, keeping it as a length-1 dimension.
    pub fn sum_axis_keep(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.nodes[x.0].val.clone();
        let mut y = xv.sum_axis(Axis(axis));
        y.insert_axis_inplace(Axis(axis));
        let in_shape = xv.shape().to_vec();
        self.push(
            y,
            Some(Box::new(move |g, grads| {
                let gb = g.broadcast(IxDyn(&in_shape)).expect("grad broadcast").to_owned();
                grads.accum(x, gb);
            })),
        )
    }

    /// Sum over one axis, dropping the dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.nodes[x.0].val.clone();
        let y = xv.sum_axis(Axis(axis));
        let in_shape = xv.shape().to_vec();
        self.push(
            y,
            Some(Box::new(move |g, grads| {
                let mut gk = g.clone();
                gk.insert_axis_inplace(Axis(axis));
                let gb = gk.broadcast(IxDyn(&in_shape)).expect("grad broadcast").to_owned();
                grads.accum(x, gb);
            })),
        )
    }

    pub fn mean_axis_keep(&mut self, x: Var, axis: usize) -> Var {
        let n = self.nodes[x.0].val.shape()[axis];
        let s = self.sum_axis_keep(x, axis);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.nodes[x.0].val.clone();
        let in_shape = xv.shape().to_vec();
        assert_eq!(
            xv.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            in_shape,
            shape
        );
        let y = xv
            .as_standard_layout()
            .to_owned()
            .into_shape(IxDyn(shape))
            .expect("element count checked");
        self.push(
            y,
            Some(Box::new(move |g, grads| {
                let gx = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape(IxDyn(&in_shape))
                    .expect("grad reshape");
                grads.accum(x, gx);
            })),
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let xv = self.nodes[x.0].val.clone();
        let axes_v = axes.to_vec();
        let y = xv.view().permuted_axes(IxDyn(axes)).as_standard_layout().to_owned();
        self.push(
            y,
            Some(Box::new(move |g, grads| {
                let mut inv = vec![0usize; axes_v.len()];
                for (i, &a) in axes_v.iter().enumerate() {
                    inv[a] = i;
                }
                let gx = g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned();
                grads.accum(x, gx);
            })),
        )
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.nodes[x.0].val.clone();
        let in_shape = xv.shape().to_vec();
        let y = xv.broadcast(IxDyn(shape)).expect("broadcast_to").to_owned();
        self.push(
            y,
            Some(Box::new(move |g, grads| {
                grads.accum(x, reduce_to_shape(g.clone(), &in_shape));
            })),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].val.view()).collect();
        let y = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let lens: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].val.shape()[axis]).collect();
        let parts_v = parts.to_vec();
        self.push(
            y,
            Some(Box::new(move |g, grads| {
                let mut start = 0isize;
                for (p, &len) in parts_v.iter().zip(&lens) {
                    let sl = g
                        .slice_axis(Axis(axis), Slice::new(start, Some(start + len as isize), 1))
                        .to_owned();
                    grads.accum(*p, sl);
                    start += len as isize;
                }
            })),
        )
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.nodes[x.0].val.clone();
        let in_shape = xv.shape().to_vec();
        let y = xv
            .slice_axis(Axis(axis), Slice::new(start as isize, Some((start + len) as isize), 1))
            .to_owned();
        self.push(
            y,
            Some(Box::new(move |g, grads| {
                let mut gx = ArrayD::<S>::zeros(IxDyn(&in_shape));
                gx.slice_axis_mut(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                )
                .assign(g);
                grads.accum(x, gx);
            })),
        )
    }

    /// Stack equal-shaped tensors along a fresh axis.
    pub fn stack_new_axis(&mut self, parts: &[Var], axis: usize) -> Var {
        let expanded: Vec<Var> = parts
            .iter()
            .map(|&p| {
                let mut shape = self.shape(p).to_vec();
                shape.insert(axis, 1);
                self.reshape(p, &shape)
            })
            .collect();
        self.concat(&expanded, axis)
    }

    /// Elementwise log N(x; mu, sigma^2) with constant sigma, fused into one
    /// pass; mu broadcasts against x on matching shapes only.
    pub fn gauss_logpdf(&mut self, x: Var, mu: Var, sigma: f64) -> Var {
        let xv = self.nodes[x.0].val.clone();
        let muv = self.nodes[mu.0].val.clone();
        let out_shape = broadcast_shape(xv.shape(), muv.shape())
            .unwrap_or_else(|| panic!("incompatible shapes {:?} vs {:?}", xv.shape(), muv.shape()));
        let inv_sigma = sc::<S>(1.0 / sigma);
        let log_norm = sc::<S>(-sigma.ln() - 0.5 * crate::objective_ln_2pi());
        let half = sc::<S>(0.5);
        let (xb, mb) = (
            xv.broadcast(out_shape.clone()).expect("broadcast x").to_owned(),
            muv.broadcast(out_shape.clone()).expect("broadcast mu").to_owned(),
        );
        let mut y = ArrayD::<S>::zeros(out_shape.clone());
        {
            let (xs, ms, ys) = (
                xb.as_slice().unwrap(),
                mb.as_slice().unwrap(),
                y.as_slice_mut().unwrap(),
            );
            par_map3(xs, ms, ys, |xi, mi| {
                let z = (xi - mi) * inv_sigma;
                log_norm - half * z * z
            });
        }
        let (xsh, msh) = (xv.shape().to_vec(), muv.shape().to_vec());
        self.push(
            y,
            Some(Box::new(move |g, grads| {
                let gs = g.as_slice().expect("grad standard layout");
                let inv_var = inv_sigma * inv_sigma;
                let mut dmu = ArrayD::<S>::zeros(out_shape.clone());
                {
                    let (xs, ms, ds) = (
                        xb.as_slice().unwrap(),
                        mb.as_slice().unwrap(),
                        dmu.as_slice_mut().unwrap(),
                    );
                    // d/dmu = g * (x - mu) / sigma^2; d/dx is the negative
                    ds.iter_mut()
                        .zip(xs.iter().zip(ms.iter().zip(gs.iter())))
                        .for_each(|(d, (&xi, (&mi, &gi)))| *d = gi * (xi - mi) * inv_var);
                }
                let dx = dmu.mapv(|v| -v);
                grads.accum(x, reduce_to_shape(dx, &xsh));
                grads.accum(mu, reduce_to_shape(dmu, &msh));
            })),
        )
    }

    /// Nearest-neighbor upsampling of `[N, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, r: usize) -> Var {
        if r == 1 {
            let shape = self.shape(x).to_vec();
            return self.reshape(x, &shape);
        }
        let shape = self.shape(x).to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let a = self.reshape(x, &[n, c, h, 1, w, 1]);
        let b = self.broadcast_to(a, &[n, c, h, r, w, r]);
        self.reshape(b, &[n, c, h * r, w * r])
    }

    // ---- matmul ----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].val.clone();
        let bv = self.nodes[b.0].val.clone();
        assert_eq!(av.ndim(), 2, "matmul lhs must be 2-d");
        assert_eq!(bv.ndim(), 2, "matmul rhs must be 2-d");
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dims");
        let a2 = av.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let y = a2.dot(&b2).into_dyn();
        self.push(
            y,
            Some(Box::new(move |g, grads| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let a2 = av.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let da = g2.dot(&b2.t()).into_dyn();
                let db = a2.t().dot(&g2).into_dyn();
                grads.accum(a, da);
                grads.accum(b, db);
            })),
        )
    }

    // ---- stabilized softmax family ----

    /// Softmax along `axis` (max-subtracted; the max is treated as constant).
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.nodes[x.0].val.clone();
        let y = softmax_values(&xv.to_owned(), axis);
        let v = self.push(y, None);
        let yv = self.nodes[v.0].val.clone();
        self.nodes[v.0].back = Some(Box::new(move |g, grads| {
            // dx = y * (g - sum_axis(g * y))
            let gy = g * &yv;
            let mut s = gy.sum_axis(Axis(axis));
            s.insert_axis_inplace(Axis(axis));
            let sb = s.broadcast(yv.shape()).expect("softmax grad broadcast");
            let mut gx = ArrayD::<S>::zeros(yv.raw_dim());
            ndarray::Zip::from(&mut gx).and(g).and(&sb).and(&yv).for_each(
                |o, &gi, &si, &yi| *o = yi * (gi - si),
            );
            grads.accum(x, gx);
        }));
        v
    }

    /// log(sum(exp(x))) along `axis`, dropping the dimension.
    pub fn logsumexp_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.nodes[x.0].val.clone();
        let xo = xv.to_owned();
        let m = xo.fold_axis(Axis(axis), S::neg_infinity(), |acc, &v| acc.max(v));
        let mut mk = m.clone();
        mk.insert_axis_inplace(Axis(axis));
        let mb = mk.broadcast(xo.shape()).expect("lse broadcast").to_owned();
        let mut ex = ArrayD::<S>::zeros(xo.raw_dim());
        ndarray::Zip::from(&mut ex).and(&xo).and(&mb).for_each(|e, &xi, &mi| *e = (xi - mi).exp());
        let sum = ex.sum_axis(Axis(axis));
        let mut y = sum.mapv(|v| v.ln());
        y += &m;
        self.push(
            y,
            Some(Box::new(move |g, grads| {
                // dx = softmax(x, axis) * g (broadcast over axis)
                let sm = softmax_values(&xv.to_owned(), axis);
                let mut gk = g.clone();
                gk.insert_axis_inplace(Axis(axis));
                let gb = gk.broadcast(sm.shape()).expect("lse grad broadcast");
                let mut gx = ArrayD::<S>::zeros(sm.raw_dim());
                ndarray::Zip::from(&mut gx)
                    .and(&sm)
                    .and(&gb)
                    .for_each(|o, &si, &gi| *o = si * gi);
                grads.accum(x, gx);
            })),
        )
    }
}

fn stable_sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        (S::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn softmax_values<S: Scalar>(x: &ArrayD<S>, axis: usize) -> ArrayD<S> {
    let m = x.fold_axis(Axis(axis), S::neg_infinity(), |acc, &v| acc.max(v));
    let mut mk = m;
    mk.insert_axis_inplace(Axis(axis));
    let mb = mk.broadcast(x.shape()).expect("softmax broadcast").to_owned();
    let mut e = ArrayD::<S>::zeros(x.raw_dim());
    ndarray::Zip::from(&mut e).and(x).and(&mb).for_each(|o, &xi, &mi| *o = (xi - mi).exp());
    let mut s = e.sum_axis(Axis(axis));
    s.insert_axis_inplace(Axis(axis));
    let sb = s.broadcast(x.shape()).expect("softmax broadcast").to_owned();
    e / &sb
}

/// NumPy-style broadcast of two shapes, right-aligned.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<IxDyn> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let ad = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let bd = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if ad == bd {
            ad
        } else if ad == 1 {
            bd
        } else if bd == 1 {
            ad
        } else {
            return None;
        };
    }
    Some(IxDyn(&out))
}

/// Sum a gradient down to the unbroadcast shape of its source.
fn reduce_to_shape<S: Scalar>(mut g: ArrayD<S>, target: &[usize]) -> ArrayD<S> {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &dim) in target.iter().enumerate() {
        if dim == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax));
            g.insert_axis_inplace(Axis(ax));
        }
    }
    g
}

const PAR_CHUNK: usize = 65536;

/// Elementwise map with fixed-size parallel chunks; chunk boundaries do not
/// depend on the thread count, so results are bit-stable.
fn par_map2<S: Scalar>(src: &[S], dst: &mut [S], f: impl Fn(S) -> S + Sync) {
    use rayon::prelude::*;
    if src.len() < 2 * PAR_CHUNK {
        dst.iter_mut().zip(src).for_each(|(d, &s)| *d = f(s));
    } else {
        dst.par_chunks_mut(PAR_CHUNK).zip(src.par_chunks(PAR_CHUNK)).for_each(|(dc, sc_)| {
            dc.iter_mut().zip(sc_).for_each(|(d, &s)| *d = f(s));
        });
    }
}

fn par_map3<S: Scalar>(a: &[S], b: &[S], dst: &mut [S], f: impl Fn(S, S) -> S + Sync) {
    use rayon::prelude::*;
    if a.len() < 2 * PAR_CHUNK {
        dst.iter_mut().zip(a.iter().zip(b)).for_each(|(d, (&x, &y))| *d = f(x, y));
    } else {
        dst.par_chunks_mut(PAR_CHUNK)
            .zip(a.par_chunks(PAR_CHUNK).zip(b.par_chunks(PAR_CHUNK)))
            .for_each(|(dc, (ac, bc))| {
                dc.iter_mut().zip(ac.iter().zip(bc)).for_each(|(d, (&x, &y))| *d = f(x, y));
            });
    }
}

/// Shape-checked constructor used by operator entry points.
pub fn require(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg.into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn t() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn add_broadcasts_and_backpropagates() {
        let mut tp = t();
        let a = tp.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = tp.leaf(ndarray::arr1(&[10.0, 20.0]).into_dyn());
        let y = tp.add(a, b);
        assert_eq!(tp.val(y).as_slice().unwrap(), &[11.0, 22.0, 13.0, 24.0]);
        let s = tp.sum_all(y);
        let grads = tp.backward(s);
        assert_eq!(grads.get(a).unwrap().as_slice().unwrap(), &[1.0; 4]);
        assert_eq!(grads.get(b).unwrap().as_slice().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_matches_hand_result() {
        let mut tp = t();
        let a = tp.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = tp.leaf(arr2(&[[5.0], [6.0]]).into_dyn());
        let y = tp.matmul(a, b);
        assert_eq!(tp.val(y).as_slice().unwrap(), &[17.0, 39.0]);
        let s = tp.sum_all(y);
        let grads = tp.backward(s);
        assert_eq!(grads.get(a).unwrap().as_slice().unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(grads.get(b).unwrap().as_slice().unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tp = t();
        let x = tp.leaf(arr2(&[[0.0, 1.0, -2.0], [5.0, 5.0, 5.0]]).into_dyn());
        let y = tp.softmax_axis(x, 1);
        let v = tp.val(y);
        for row in v.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_handles_large_magnitudes() {
        let mut tp = t();
        let x = tp.leaf(ndarray::arr1(&[1000.0, 1000.0]).into_dyn());
        let y = tp.logsumexp_axis(x, 0);
        let v = tp.scalar_value(y);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut tp = t();
        let x = tp.leaf(arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).into_dyn());
        let a = tp.slice_axis(x, 1, 0, 1);
        let b = tp.slice_axis(x, 1, 1, 2);
        let y = tp.concat(&[a, b], 1);
        assert_eq!(tp.val(y).as_slice().unwrap(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = tp.sum_all(y);
        let grads = tp.backward(s);
        assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[1.0; 6]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tp = t();
        let x = tp.leaf(ndarray::arr1(&[2.0]).into_dyn());
        let d = tp.detach(x);
        let y = tp.mul(d, d);
        let s = tp.sum_all(y);
        let grads = tp.backward(s);
        assert!(grads.get(x).is_none());
    }
}
