//! Parameter storage and the small set of network layers the model uses.
//!
//! Parameters live outside the tape in a [`ParamStore`]; a forward pass binds
//! them as leaves and the optimizers update the store in place after
//! backward. Names are prefixed `fg.` / `bg.`, which is what partitions the
//! parameters between the two optimizers.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::{sc, Scalar};
use crate::tensor::{Conv2dSpec, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    vals: Vec<ArrayD<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), vals: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, val: ArrayD<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.vals.len());
        self.by_name.insert(name.clone(), id.0);
        self.names.push(name);
        self.vals.push(val);
        id
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<S> {
        &self.vals[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.vals[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.vals.len()).map(ParamId)
    }

    pub fn id_at(&self, index: usize) -> ParamId {
        assert!(index < self.vals.len());
        ParamId(index)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Bind every parameter onto a tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        let vars = self.vals.iter().map(|v| tape.leaf(v.clone())).collect();
        Bound { vars }
    }

    pub fn total_elements(&self) -> usize {
        self.vals.iter().map(|v| v.len()).sum()
    }
}

/// Tape bindings for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn pairs(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().enumerate().map(|(i, &v)| (ParamId(i), v))
    }
}

fn uniform_init<S: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> ArrayD<S> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || sc::<S>(rng.gen_range(-bound..bound)))
}

/// Fully connected layer; weight stored `[in, out]` so forward is one matmul.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let k = (1.0 / in_dim as f64).sqrt();
        Linear {
            w: ps.add(format!("{name}.w"), uniform_init(&[in_dim, out_dim], k, rng)),
            b: ps.add(format!("{name}.b"), uniform_init(&[out_dim], k, rng)),
        }
    }

    /// `x: [N, in] -> [N, out]`.
    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, p: &Bound, x: Var) -> Var {
        let y = t.matmul(x, p.var(self.w));
        t.add(y, p.var(self.b))
    }
}

pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2dLayer {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: Conv2dSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let k = (1.0 / fan_in as f64).sqrt();
        Conv2dLayer {
            w: ps.add(
                format!("{name}.w"),
                uniform_init(&[out_ch, in_ch, kernel, kernel], k, rng),
            ),
            b: ps.add(format!("{name}.b"), uniform_init(&[out_ch], k, rng)),
            spec,
        }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, p: &Bound, x: Var) -> Var {
        t.conv2d(x, p.var(self.w), p.var(self.b), self.spec)
    }
}

/// Group normalization over `[N, C, H, W]`, per-channel affine.
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "channels must divide into groups");
        GroupNorm {
            gamma: ps.add(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), S::one())),
            beta: ps.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            groups,
        }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, p: &Bound, x: Var) -> Var {
        let shape = t.shape(x).to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let g = self.groups;
        let xg = t.reshape(x, &[n, g, (c / g) * h * w]);
        let mu = t.mean_axis_keep(xg, 2);
        let cent = t.sub(xg, mu);
        let sq = t.square(cent);
        let var = t.mean_axis_keep(sq, 2);
        let veps = t.add_scalar(var, 1e-5);
        let std = t.sqrt(veps);
        let norm = t.div(cent, std);
        let back = t.reshape(norm, &[n, c, h, w]);
        let gamma = t.reshape(p.var(self.gamma), &[1, c, 1, 1]);
        let beta = t.reshape(p.var(self.beta), &[1, c, 1, 1]);
        let scaled = t.mul(back, gamma);
        t.add(scaled, beta)
    }
}

/// Standard LSTM cell; initial states are owned by the chain that runs it.
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let k = (1.0 / hidden as f64).sqrt();
        LstmCell {
            w_ih: ps.add(format!("{name}.w_ih"), uniform_init(&[input, 4 * hidden], k, rng)),
            w_hh: ps.add(format!("{name}.w_hh"), uniform_init(&[hidden, 4 * hidden], k, rng)),
            b: ps.add(format!("{name}.b"), uniform_init(&[4 * hidden], k, rng)),
            hidden,
        }
    }

    /// `(x: [N, in], h: [N, H], c: [N, H]) -> (h', c')`.
    pub fn forward<S: Scalar>(
        &self,
        t: &mut Tape<S>,
        p: &Bound,
        x: Var,
        h: Var,
        c: Var,
    ) -> (Var, Var) {
        let xi = t.matmul(x, p.var(self.w_ih));
        let hh = t.matmul(h, p.var(self.w_hh));
        let s = t.add(xi, hh);
        let gates = t.add(s, p.var(self.b));
        let hid = self.hidden;
        let i = t.slice_axis(gates, 1, 0, hid);
        let f = t.slice_axis(gates, 1, hid, hid);
        let g = t.slice_axis(gates, 1, 2 * hid, hid);
        let o = t.slice_axis(gates, 1, 3 * hid, hid);
        let i = t.sigmoid(i);
        let f = t.sigmoid(f);
        let g = t.tanh(g);
        let o = t.sigmoid(o);
        let fc = t.mul(f, c);
        let ig = t.mul(i, g);
        let c_new = t.add(fc, ig);
        let ct = t.tanh(c_new);
        let h_new = t.mul(o, ct);
        (h_new, c_new)
    }
}

/// Sub-pixel upsampling block: stride-1 conv to `out*r*r` channels followed
/// by pixel shuffle.
pub struct ConvSub {
    pub conv: Conv2dLayer,
    pub r: usize,
}

impl ConvSub {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        r: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvSub {
            conv: Conv2dLayer::new(ps, name, in_ch, out_ch * r * r, 3, Conv2dSpec::new(1, 1), rng),
            r,
        }
    }

    pub fn forward<S: Scalar>(&self, t: &mut Tape<S>, p: &Bound, x: Var) -> Var {
        let y = self.conv.forward(t, p, x);
        t.pixel_shuffle(y, self.r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_grads;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    #[test]
    fn linear_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamStore::<f64>::new();
        let lin = Linear::new(&mut ps, "t.lin", 5, 3, &mut rng);

        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let mut ps2 = ParamStore::<f64>::new();
        let lin2 = Linear::new(&mut ps2, "t.lin", 5, 3, &mut rng2);
        assert_eq!(ps.get(lin.w), ps2.get(lin2.w));

        let mut t = Tape::new();
        let p = ps.bind(&mut t);
        let x = t.leaf(ArrayD::zeros(IxDyn(&[2, 5])));
        let y = lin.forward(&mut t, &p, x);
        assert_eq!(t.shape(y), &[2, 3]);
    }

    #[test]
    fn group_norm_normalizes_and_backpropagates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::<f64>::new();
        let gn = GroupNorm::new(&mut ps, "t.gn", 4, 2);
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[2, 4, 3, 3]), || {
            rand::Rng::gen_range(&mut rng, -2.0..2.0)
        });
        check_grads(
            |t, v| {
                let p = ps.bind(t);
                gn.forward(t, &p, v[0])
            },
            std::slice::from_ref(&x),
            1e-5,
            1e-5,
            1e-7,
        )
        .unwrap();

        // normalized output has ~zero mean per group
        let mut t = Tape::new();
        let p = ps.bind(&mut t);
        let xv = t.leaf(x);
        let y = gn.forward(&mut t, &p, xv);
        let v = t.val(y);
        let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-10);
    }

    #[test]
    fn lstm_cell_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut ps, "t.lstm", 3, 4, &mut rng);
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[2, 3]), || {
            rand::Rng::gen_range(&mut rng, -1.0..1.0)
        });
        let h = ArrayD::zeros(IxDyn(&[2, 4]));
        let c = ArrayD::zeros(IxDyn(&[2, 4]));
        check_grads(
            |t, v| {
                let p = ps.bind(t);
                let (h2, c2) = cell.forward(t, &p, v[0], v[1], v[2]);
                let (h3, _) = cell.forward(t, &p, v[0], h2, c2);
                h3
            },
            &[x, h, c],
            1e-5,
            1e-5,
            1e-7,
        )
        .unwrap();
    }

    #[test]
    fn conv_sub_upsamples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::<f64>::new();
        let up = ConvSub::new(&mut ps, "t.up", 4, 2, 2, &mut rng);
        let mut t = Tape::new();
        let p = ps.bind(&mut t);
        let x = t.leaf(ArrayD::zeros(IxDyn(&[1, 4, 3, 3])));
        let y = up.forward(&mut t, &p, x);
        assert_eq!(t.shape(y), &[1, 2, 6, 6]);
    }
}
